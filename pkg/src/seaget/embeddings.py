"""Contextual check-in embeddings: POI-user, time-category and season-POI fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Rng, ShapeError, Tensor

LEAKY_SLOPE = 0.2


def time2vec(t_norm, omega: Tensor, phase: Tensor) -> Tensor:
    """One linear component followed by sinusoids of learned frequency and phase.

    ``t_norm`` holds fractions of the local day, shape (n,) or scalar.
    Returns an n x width tensor.
    """
    t = np.atleast_1d(np.asarray(t_norm, dtype=np.float64))
    if ((t < 0.0) | (t >= 1.0)).any():
        raise ValueError("time of day must lie in [0, 1)")
    z = nc.as_tensor(t.reshape(-1, 1)) * nc.reshape(omega, (1, -1)) + nc.reshape(phase, (1, -1))
    return nc.concat([z[:, :1], nc.sin(z[:, 1:])], axis=1)


def fuse(a: Tensor, b: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """LeakyReLU([a ; b] W + c) on the last axis."""
    x = nc.concat([a, b], axis=-1)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"fusion input width {x.shape[-1]} does not match weight {weight.shape}")
    return nc.leaky_relu(x @ weight + bias, LEAKY_SLOPE)


@dataclass
class ContextEmbedder:
    user: Tensor  # M x poi_dim
    category: Tensor  # |cat| x time_dim
    season: Tensor  # 4 x season_dim
    omega: Tensor
    phase: Tensor
    w_pu: Tensor
    b_pu: Tensor
    w_ct: Tensor
    b_ct: Tensor
    w_sp: Tensor
    b_sp: Tensor
    season_proj: Tensor | None  # poi_dim -> season_dim, only when widths differ

    @classmethod
    def init(cls, rng: Rng, num_users: int, num_categories: int, poi_dim: int,
             time_dim: int, season_dim: int) -> "ContextEmbedder":
        proj = None if season_dim == poi_dim else nc.init_weight(rng, poi_dim, season_dim, "emb.season_proj")
        return cls(
            user=nc.init_embedding(rng, num_users, poi_dim, "emb.user"),
            category=nc.init_embedding(rng, num_categories, time_dim, "emb.category"),
            season=nc.init_embedding(rng, 4, season_dim, "emb.season"),
            omega=nc.Parameter(rng.uniform(time_dim, 0.0, 2.0 * np.pi), "emb.t2v_omega"),
            phase=nc.Parameter(rng.uniform(time_dim, 0.0, 2.0 * np.pi), "emb.t2v_phase"),
            w_pu=nc.init_weight(rng, 2 * poi_dim, 2 * poi_dim, "emb.w_pu"),
            b_pu=nc.init_bias(2 * poi_dim, "emb.b_pu"),
            w_ct=nc.init_weight(rng, 2 * time_dim, 2 * time_dim, "emb.w_ct"),
            b_ct=nc.init_bias(2 * time_dim, "emb.b_ct"),
            w_sp=nc.init_weight(rng, 2 * season_dim, 2 * season_dim, "emb.w_sp"),
            b_sp=nc.init_bias(2 * season_dim, "emb.b_sp"),
            season_proj=proj,
        )

    @property
    def width(self) -> int:
        return self.w_pu.shape[0] + self.w_ct.shape[0] + self.w_sp.shape[0]

    def parameters(self) -> list[Tensor]:
        ps = [self.user, self.category, self.season, self.omega, self.phase,
              self.w_pu, self.b_pu, self.w_ct, self.b_ct, self.w_sp, self.b_sp]
        if self.season_proj is not None:
            ps.append(self.season_proj)
        return ps

    def fuse_poi_user(self, e_p: Tensor, e_u: Tensor) -> Tensor:
        if e_p.shape[-1] != e_u.shape[-1]:
            raise ShapeError(f"POI width {e_p.shape[-1]} differs from user width {e_u.shape[-1]}")
        return fuse(e_p, e_u, self.w_pu, self.b_pu)

    def fuse_time_category(self, e_t: Tensor, e_c: Tensor) -> Tensor:
        return fuse(e_t, e_c, self.w_ct, self.b_ct)

    def fuse_season_poi(self, e_s: Tensor, e_p: Tensor) -> Tensor:
        if self.season_proj is not None:
            e_p = e_p @ self.season_proj
        if e_s.shape[-1] != e_p.shape[-1]:
            raise ShapeError(f"season width {e_s.shape[-1]} differs from projected POI width {e_p.shape[-1]}")
        return fuse(e_s, e_p, self.w_sp, self.b_sp)

    def embed(self, poi_emb: Tensor, users, pois, categories, times, seasons) -> Tensor:
        """Embed a flat batch of check-ins; returns n x (2 poi + 2 time + 2 season)."""
        users, pois, categories, seasons = (np.asarray(a, dtype=np.int64).reshape(-1)
                                            for a in (users, pois, categories, seasons))
        for name, ids, limit in (("user", users, self.user.shape[0]), ("poi", pois, poi_emb.shape[0]),
                                 ("category", categories, self.category.shape[0]), ("season", seasons, 4)):
            if ids.size and (ids.min() < 0 or ids.max() >= limit):
                raise IndexError(f"{name} id outside [0, {limit})")
        e_p = poi_emb[pois]
        e_u = self.user[users]
        e_t = time2vec(times, self.omega, self.phase)
        e_c = self.category[categories]
        e_s = self.season[seasons]
        return nc.concat([self.fuse_poi_user(e_p, e_u), self.fuse_time_category(e_t, e_c),
                          self.fuse_season_poi(e_s, e_p)], axis=-1)
