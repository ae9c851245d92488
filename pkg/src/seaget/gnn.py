"""Graph convolution over the flow map and the POI transition attention map."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Rng, ShapeError, Tensor

LEAKY_SLOPE = 0.2


@dataclass
class GcnStack:
    weights: list[Tensor]  # hidden layers: C->W, then W->W
    biases: list[Tensor]
    out_weight: Tensor
    out_bias: Tensor
    dropout: float = 0.3

    @classmethod
    def init(cls, rng: Rng, in_dim: int, width: int, layers: int = 2, dropout: float = 0.3) -> "GcnStack":
        if layers < 1:
            raise ValueError("a GCN stack needs at least one hidden layer")
        dims = [in_dim] + [width] * layers
        weights = [nc.init_weight(rng, dims[i], dims[i + 1], f"gcn.w{i}") for i in range(layers)]
        biases = [nc.init_bias(width, f"gcn.b{i}") for i in range(layers)]
        return cls(weights, biases, nc.init_weight(rng, width, width, "gcn.w_out"),
                   nc.init_bias(width, "gcn.b_out"), dropout)

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, self.out_weight, self.out_bias]


def gcn_forward(x, lap, stack: GcnStack, training: bool = False, rng: Rng | None = None) -> Tensor:
    """Hidden layers LeakyReLU(L H W + b); dropout; linear output layer L H W + b."""
    x = nc.as_tensor(x)
    lap = nc.as_tensor(lap)
    n = x.shape[0]
    if lap.shape != (n, n):
        raise ShapeError(f"laplacian shape {lap.shape} does not match {n} nodes")
    if stack.weights[0].shape[0] != x.shape[1]:
        raise ShapeError(f"node features have width {x.shape[1]}, first layer expects {stack.weights[0].shape[0]}")
    h = x
    for w, b in zip(stack.weights, stack.biases):
        h = nc.leaky_relu(lap @ (h @ w) + b, LEAKY_SLOPE)
    h = nc.dropout(h, stack.dropout, training, rng)
    return lap @ (h @ stack.out_weight) + stack.out_bias


@dataclass
class TransitionAttentionParams:
    w1: Tensor
    w2: Tensor
    a1: Tensor  # h x 1
    a2: Tensor

    @classmethod
    def init(cls, rng: Rng, h: int) -> "TransitionAttentionParams":
        bound = 1.0 / np.sqrt(h)
        return cls(nc.init_weight(rng, h, h, "attn.w1"), nc.init_weight(rng, h, h, "attn.w2"),
                   nc.Parameter(rng.uniform((h, 1), -bound, bound), "attn.a1"),
                   nc.Parameter(rng.uniform((h, 1), -bound, bound), "attn.a2"))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2, self.a1, self.a2]


def _array(m) -> np.ndarray:
    return m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)


def attention_scores(x, params: TransitionAttentionParams) -> tuple[Tensor, Tensor]:
    x = nc.as_tensor(x)
    return (x @ params.w1) @ params.a1, (x @ params.w2) @ params.a2


def transition_attention(x, lap, params: TransitionAttentionParams) -> Tensor:
    """Full N x N map: (phi1 1^T + 1 phi2^T) * (L + J)."""
    phi1, phi2 = attention_scores(x, params)
    return (phi1 + nc.transpose(phi2)) * (_array(lap) + 1.0)


def transition_attention_rows(x, lap, params: TransitionAttentionParams, rows) -> Tensor:
    """Rows ``rows`` of the attention map without materialising all N x N entries."""
    rows = np.asarray(rows, dtype=np.int64)
    phi1, phi2 = attention_scores(x, params)
    lap = _array(lap)
    return (phi1[rows] + nc.transpose(phi2)) * (lap[rows] + 1.0)


def attention_row_for(phi, poi_id: int) -> np.ndarray:
    phi = phi.data if isinstance(phi, Tensor) else np.asarray(phi)
    if not 0 <= poi_id < phi.shape[0]:
        raise IndexError(f"poi id {poi_id} outside [0, {phi.shape[0]})")
    return phi[poi_id].copy()


# Matrix dump: 8-byte magic b"SGMATRIX", 4-byte dtype tag b"<f8\0", two
# little-endian uint64 (rows, cols), then the row-major float64 payload.
MATRIX_MAGIC = b"SGMATRIX"


def write_matrix(path, matrix) -> None:
    m = np.ascontiguousarray(matrix.data if isinstance(matrix, Tensor) else matrix, dtype="<f8")
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC + b"<f8\0" + struct.pack("<QQ", *m.shape))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(28)
        if head[:8] != MATRIX_MAGIC or head[8:12] != b"<f8\0":
            raise ValueError(f"{path}: not a matrix dump")
        rows, cols = struct.unpack("<QQ", head[12:28])
        return np.frombuffer(fh.read(), dtype="<f8").reshape(rows, cols).copy()
