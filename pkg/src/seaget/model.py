"""Transformer encoder, prediction heads, transition residual, opening-hours
filter and the joint training loss."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .dataio import OperationalHoursTable, PoiCatalog, Trajectory, assign_season, open_mask, time_of_day
from .embeddings import ContextEmbedder
from .gnn import GcnStack, TransitionAttentionParams, gcn_forward, transition_attention_rows
from .numcore import Rng, ShapeError, Tensor

log = logging.getLogger(__name__)

TIME_LOSS_WEIGHT = 10.0


@dataclass
class ModelConfig:
    num_users: int
    num_pois: int
    num_categories: int
    feature_dim: int
    poi_dim: int = 128
    time_dim: int = 32
    season_dim: int = 32
    gcn_layers: int = 2
    enc_layers: int = 2
    heads: int = 2
    d_ff: int | None = None
    dropout: float = 0.3

    @property
    def d_model(self) -> int:
        return 2 * (self.poi_dim + self.time_dim + self.season_dim)

    @property
    def ff_width(self) -> int:
        return self.d_ff or 4 * self.d_model


# ---------------------------------------------------------------------------
# encoder


def positional_encoding(k: int, d: int) -> np.ndarray:
    pos = np.arange(k)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def positional_encode(x: Tensor) -> Tensor:
    k, d = x.shape[-2:]
    return x + positional_encoding(k, d)


@dataclass
class EncoderLayer:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    heads: int

    @classmethod
    def init(cls, rng: Rng, d: int, d_ff: int, heads: int, prefix: str) -> "EncoderLayer":
        if d % heads:
            raise ShapeError(f"model width {d} not divisible by {heads} heads")
        w = lambda i, o, n: nc.init_weight(rng, i, o, f"{prefix}.{n}")  # noqa: E731
        return cls(w(d, d, "w_q"), w(d, d, "w_k"), w(d, d, "w_v"), w(d, d, "w_o"),
                   nc.Parameter(np.ones(d), f"{prefix}.ln1_gain"), nc.init_bias(d, f"{prefix}.ln1_bias"),
                   w(d, d_ff, "w_1"), nc.init_bias(d_ff, f"{prefix}.b_1"),
                   w(d_ff, d, "w_2"), nc.init_bias(d, f"{prefix}.b_2"),
                   nc.Parameter(np.ones(d), f"{prefix}.ln2_gain"), nc.init_bias(d, f"{prefix}.ln2_bias"),
                   heads)

    def parameters(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.ln1_gain, self.ln1_bias,
                self.w_1, self.b_1, self.w_2, self.b_2, self.ln2_gain, self.ln2_bias]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, k, d = x.shape
    return nc.transpose(nc.reshape(x, (b, k, heads, d // heads)), (0, 2, 1, 3))


def encoder_layer_forward(x: Tensor, layer: EncoderLayer, causal: bool = True, training: bool = False,
                          rng: Rng | None = None, dropout: float = 0.0) -> Tensor:
    b, k, d = x.shape
    q = _split_heads(x @ layer.w_q, layer.heads)
    key = _split_heads(x @ layer.w_k, layer.heads)
    v = _split_heads(x @ layer.w_v, layer.heads)
    scores = q @ nc.transpose(key, (0, 1, 3, 2))  # b, h, k, k
    mask = np.tril(np.ones((k, k), dtype=bool)) if causal else None
    weights = nc.dropout(nc.softmax(scores, mask), dropout, training, rng)
    heads = nc.reshape(nc.transpose(weights @ v, (0, 2, 1, 3)), (b, k, d))
    attn = nc.layer_norm(x + heads @ layer.w_o, layer.ln1_gain, layer.ln1_bias)
    ff = nc.relu(attn @ layer.w_1 + layer.b_1) @ layer.w_2 + layer.b_2
    ff = nc.dropout(ff, dropout, training, rng)
    return nc.layer_norm(attn + ff, layer.ln2_gain, layer.ln2_bias)


def encoder_forward(x, layers: list[EncoderLayer], causal: bool = True, training: bool = False,
                    rng: Rng | None = None, dropout: float = 0.0) -> Tensor:
    """Run ``x`` (k x d, or b x k x d) through the stacked encoder layers."""
    x = nc.as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1, *x.shape))
    for layer in layers:
        if x.shape[-1] % layer.heads:
            raise ShapeError(f"model width {x.shape[-1]} not divisible by {layer.heads} heads")
        x = encoder_layer_forward(x, layer, causal, training, rng, dropout)
    return nc.reshape(x, x.shape[1:]) if squeeze else x


# ---------------------------------------------------------------------------
# heads, residual, filter


@dataclass
class DecoderHeads:
    w_poi: Tensor
    b_poi: Tensor
    w_time: Tensor
    b_time: Tensor
    w_cat: Tensor
    b_cat: Tensor

    @classmethod
    def init(cls, rng: Rng, d: int, num_pois: int, num_categories: int) -> "DecoderHeads":
        return cls(nc.init_weight(rng, d, num_pois, "head.w_poi"), nc.init_bias(num_pois, "head.b_poi"),
                   nc.init_weight(rng, d, 1, "head.w_time"), nc.init_bias(1, "head.b_time"),
                   nc.init_weight(rng, d, num_categories, "head.w_cat"), nc.init_bias(num_categories, "head.b_cat"))

    def parameters(self) -> list[Tensor]:
        return [self.w_poi, self.b_poi, self.w_time, self.b_time, self.w_cat, self.b_cat]


@dataclass
class PredictionTriple:
    poi: Tensor  # ... x N logits
    time: Tensor  # ... x 1
    cat: Tensor  # ... x |cat| logits


def decode(x: Tensor, heads: DecoderHeads) -> PredictionTriple:
    return PredictionTriple(x @ heads.w_poi + heads.b_poi, x @ heads.w_time + heads.b_time,
                            x @ heads.w_cat + heads.b_cat)


def apply_transition_residual(poi_logits, phi, current_poi_ids):
    """Add row ``current_poi_ids[i]`` of the attention map to logits row i."""
    ids = np.asarray(current_poi_ids, dtype=np.int64)
    phi_rows = phi.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= phi_rows):
        raise IndexError(f"current poi id outside [0, {phi_rows})")
    if isinstance(poi_logits, Tensor) or isinstance(phi, Tensor):
        return nc.add(poi_logits, nc.as_tensor(phi)[ids])
    return np.asarray(poi_logits) + np.asarray(phi)[ids]


@dataclass
class FilterResult:
    logits: np.ndarray
    all_closed: bool


def filter_by_mask(logits, is_open: np.ndarray) -> FilterResult:
    logits = np.asarray(logits, dtype=np.float64)
    if not is_open.any():
        log.warning("every POI is closed at the query time; returning unfiltered scores")
        return FilterResult(logits.copy(), True)
    return FilterResult(np.where(is_open, logits, -np.inf), False)


def operational_filter(logits, table: OperationalHoursTable, query_local_time: int,
                       catalog: PoiCatalog) -> FilterResult:
    """Send logits of POIs closed at ``query_local_time`` to -inf."""
    return filter_by_mask(logits, open_mask(table, catalog, query_local_time))


# ---------------------------------------------------------------------------
# batches and loss


@dataclass
class SequenceBatch:
    users: np.ndarray  # B
    pois: np.ndarray  # B x k
    cats: np.ndarray
    times: np.ndarray  # fraction of day
    seasons: np.ndarray
    stamps: np.ndarray  # local timestamps
    lengths: np.ndarray
    target_poi: np.ndarray
    target_cat: np.ndarray
    target_time: np.ndarray
    target_stamp: np.ndarray
    mask: np.ndarray  # B x k, True where a successor exists

    @property
    def tokens(self) -> np.ndarray:
        return np.arange(self.pois.shape[1])[None, :] < self.lengths[:, None]


def make_batch(trajs: list[Trajectory], pad_to: int | None = None) -> SequenceBatch:
    b = len(trajs)
    k = max(max(len(t) for t in trajs), pad_to or 0)
    z = lambda dtype=np.int64: np.zeros((b, k), dtype=dtype)  # noqa: E731
    pois, cats, seasons, stamps = z(), z(), z(), z()
    times = z(np.float64)
    for i, t in enumerate(trajs):
        for j, c in enumerate(t.checkins):
            pois[i, j] = c.poi_id
            cats[i, j] = c.category_id
            stamps[i, j] = c.local_timestamp
            times[i, j] = time_of_day(c.local_timestamp)
            seasons[i, j] = assign_season(c.local_timestamp)
    lengths = np.array([len(t) for t in trajs])
    mask = np.arange(k)[None, :] < (lengths - 1)[:, None]
    shift = lambda a: np.concatenate([a[:, 1:], np.zeros_like(a[:, :1])], axis=1) * mask  # noqa: E731
    return SequenceBatch(np.array([t.user_id for t in trajs]), pois, cats, times, seasons, stamps, lengths,
                         shift(pois), shift(cats), shift(times), shift(stamps), mask)


@dataclass
class LossParts:
    total: Tensor
    poi: float
    time: float
    cat: float


def joint_loss(preds: PredictionTriple, batch: SequenceBatch, time_weight: float = TIME_LOSS_WEIGHT) -> LossParts:
    """POI cross-entropy + weighted time MSE + category cross-entropy over valid positions."""
    mask = batch.mask.reshape(-1)
    n_poi = preds.poi.shape[-1]
    n_cat = preds.cat.shape[-1]
    l_poi = nc.cross_entropy(nc.reshape(preds.poi, (-1, n_poi)), batch.target_poi.reshape(-1), mask)
    l_time = nc.mse(nc.reshape(preds.time, (-1,)), batch.target_time.reshape(-1), mask)
    l_cat = nc.cross_entropy(nc.reshape(preds.cat, (-1, n_cat)), batch.target_cat.reshape(-1), mask)
    total = l_poi + l_time * time_weight + l_cat
    return LossParts(total, float(l_poi.data), float(l_time.data), float(l_cat.data))


# ---------------------------------------------------------------------------
# full model


@dataclass
class Seaget:
    config: ModelConfig
    features: np.ndarray  # N x C node features
    laplacian: np.ndarray  # N x N
    gcn: GcnStack
    attention: TransitionAttentionParams
    embedder: ContextEmbedder
    layers: list[EncoderLayer]
    heads: DecoderHeads
    meta: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, features: np.ndarray, laplacian: np.ndarray, seed: int) -> "Seaget":
        rng = Rng(seed, "init")
        n = config.num_pois
        if features.shape != (n, config.feature_dim) or laplacian.shape != (n, n):
            raise ShapeError("graph matrices do not match the model configuration")
        d = config.d_model
        gcn = GcnStack.init(rng, config.feature_dim, config.poi_dim, config.gcn_layers, config.dropout)
        attention = TransitionAttentionParams.init(rng, config.feature_dim)
        embedder = ContextEmbedder.init(rng, config.num_users, config.num_categories, config.poi_dim,
                                        config.time_dim, config.season_dim)
        layers = [EncoderLayer.init(rng, d, config.ff_width, config.heads, f"enc{i}")
                  for i in range(config.enc_layers)]
        heads = DecoderHeads.init(rng, d, n, config.num_categories)
        return cls(config, np.asarray(features, dtype=np.float64), np.asarray(laplacian, dtype=np.float64),
                   gcn, attention, embedder, layers, heads)

    def parameters(self) -> list[Tensor]:
        ps = self.gcn.parameters() + self.attention.parameters() + self.embedder.parameters()
        for layer in self.layers:
            ps += layer.parameters()
        return ps + self.heads.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def poi_embeddings(self, training: bool = False, rng: Rng | None = None) -> Tensor:
        return gcn_forward(self.features, self.laplacian, self.gcn, training, rng)

    def forward(self, batch: SequenceBatch, training: bool = False, rng: Rng | None = None) -> PredictionTriple:
        """Predictions for every position; POI logits include the transition residual."""
        b, k = batch.pois.shape
        if batch.users.size and batch.users.max() >= self.config.num_users:
            raise IndexError(f"user id {batch.users.max()} unknown to the model")
        e_p = self.poi_embeddings(training, rng)
        users = np.repeat(batch.users, k)
        e_q = self.embedder.embed(e_p, users, batch.pois, batch.cats, batch.times, batch.seasons)
        e_q = e_q * batch.tokens.reshape(-1, 1).astype(np.float64)
        x = positional_encode(nc.reshape(e_q, (b, k, self.config.d_model)))
        x = encoder_forward(x, self.layers, causal=True, training=training, rng=rng,
                            dropout=self.config.dropout)
        preds = decode(x, self.heads)
        phi_rows = transition_attention_rows(self.features, self.laplacian, self.attention, batch.pois.reshape(-1))
        preds.poi = preds.poi + nc.reshape(phi_rows, (b, k, self.config.num_pois))
        return preds

    def loss(self, batch: SequenceBatch, training: bool = False, rng: Rng | None = None) -> LossParts:
        return joint_loss(self.forward(batch, training, rng), batch)

    def config_dict(self) -> dict:
        return asdict(self.config)
