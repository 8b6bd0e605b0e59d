"""Three-level set-abstraction encoder.

Level 1 and level 2 subsample the cloud with farthest point sampling, group
in-radius neighbors, and pool a shared per-member MLP over each group; the
final level groups everything into a single global representation. Outputs
are permutation-invariant because sampling starts from the farthest point
from the centroid and pooling is a max over members.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import ball_query, farthest_point_sample, group_relative
from .layers import apply_mlp, dense, init_dense, init_mlp
from .params import ParamStore


@dataclass
class LevelConfig:
    m: int
    radius: float
    k: int
    widths: list[int]


@dataclass
class EncoderConfig:
    n_input: int = 2048
    level1: LevelConfig = field(default_factory=lambda: LevelConfig(
        512, 0.2, 32, [64, 64, 128]))
    level2: LevelConfig = field(default_factory=lambda: LevelConfig(
        256, 0.4, 32, [128, 128, 256]))
    global_widths: list[int] = field(default_factory=lambda: [256, 512, 512])
    global_out: int = 512

    @staticmethod
    def miniature() -> "EncoderConfig":
        return EncoderConfig(
            n_input=32,
            level1=LevelConfig(16, 0.4, 4, [8, 8, 16]),
            level2=LevelConfig(8, 0.8, 4, [16, 16, 24]),
            global_widths=[24, 32, 32],
            global_out=32,
        )


@dataclass
class FeatureMap:
    """M local-region features paired with their 3-D centroids."""
    centroids: np.ndarray       # (M, 3)
    features: Tensor            # (M, D)
    level: int


@dataclass
class GlobalFeature:
    vector: Tensor              # (1, D)


@dataclass
class _GeomLevel:
    center_idx: np.ndarray
    member_idx: np.ndarray      # (M, K)
    rel: np.ndarray             # (M, K, 3)
    scatter: sp.csr_matrix | None = None


class EncoderCache:
    """Per-cloud geometry (indices, relative offsets, scatter operators).

    Depends only on the input coordinates, so it can be computed once per
    sample and reused across training steps.
    """

    def __init__(self, points: np.ndarray, cfg: EncoderConfig):
        dtype = ad.get_default_dtype()
        self.lvl1 = self._level(points, cfg.level1, n_parent=None, dtype=dtype)
        centers1 = points[self.lvl1.center_idx]
        self.lvl2 = self._level(centers1, cfg.level2, n_parent=cfg.level1.m,
                                dtype=dtype)
        self.centers1 = centers1
        self.centers2 = centers1[self.lvl2.center_idx]

    @staticmethod
    def _level(points, lvl: LevelConfig, n_parent, dtype) -> "_GeomLevel":
        centers = farthest_point_sample(points, lvl.m)
        neigh = ball_query(points, centers, lvl.radius, lvl.k)
        rel = group_relative(points, neigh)
        scatter = None
        if n_parent is not None:
            flat = neigh.member_indices.reshape(-1)
            scatter = sp.csr_matrix(
                (np.ones(flat.size, dtype=dtype), (flat, np.arange(flat.size))),
                shape=(n_parent, flat.size))
        return _GeomLevel(centers, neigh.member_indices, rel, scatter)


def init_encoder_params(store: ParamStore, cfg: EncoderConfig,
                        rng: np.random.Generator) -> None:
    init_mlp(store, "encoder/sa1", rng, 3, cfg.level1.widths)
    init_mlp(store, "encoder/sa2", rng, 3 + cfg.level1.widths[-1],
             cfg.level2.widths)
    init_mlp(store, "encoder/sa3", rng, 3 + cfg.level2.widths[-1],
             cfg.global_widths)
    init_dense(store, "encoder/global", rng, cfg.global_widths[-1],
               cfg.global_out)


def set_abstraction(rel: np.ndarray, member_feats: Tensor | None,
                    store: ParamStore, prefix: str, n_layers: int) -> Tensor:
    """Shared MLP over each (relative-offset, feature) member row, then a
    max over the K members of every group. rel is (M, K, 3).

    The last MLP layer is linear so region features are signed; all-ReLU
    stacks can clip whole rows to zero, which degenerates the cosine
    similarities the skip path relies on.
    """
    m, k, _ = rel.shape
    rows = ad.constant(rel.reshape(m * k, 3))
    if member_feats is not None:
        rows = ad.concat([rows, member_feats], axis=1)
    out = apply_mlp(rows, store, prefix, n_layers, relu_last=False)
    out = ad.reshape(out, (m, k, out.shape[1]))
    return ad.reduce_max(out, axis=1)


def encode(points: np.ndarray, store: ParamStore, cfg: EncoderConfig,
           cache: EncoderCache | None = None):
    """Full encoder pass: (level-1 FeatureMap, level-2 FeatureMap, global)."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape != (cfg.n_input, 3):
        raise ValueError(
            f"encoder expects ({cfg.n_input}, 3) input, got {points.shape}")
    if cache is None:
        cache = EncoderCache(points, cfg)

    f1 = set_abstraction(cache.lvl1.rel, None, store, "encoder/sa1",
                         len(cfg.level1.widths))

    # level 2 groups level-1 features, so the member gather stays on the tape
    flat2 = cache.lvl2.member_idx.reshape(-1)
    gathered = ad.gather(f1, flat2, scatter_matrix=cache.lvl2.scatter)
    f2 = set_abstraction(cache.lvl2.rel, gathered, store, "encoder/sa2",
                         len(cfg.level2.widths))

    # final level: group all level-2 regions into one feature
    rows3 = ad.concat([ad.constant(cache.centers2), f2], axis=1)
    g = apply_mlp(rows3, store, "encoder/sa3", len(cfg.global_widths),
                  relu_last=False)
    g = ad.reshape(ad.reduce_max(g, axis=0), (1, g.shape[1]))
    g = dense(g, store, "encoder/global")

    return (FeatureMap(cache.centers1, f1, level=1),
            FeatureMap(cache.centers2, f2, level=2),
            GlobalFeature(g))
