"""Attention blocks: decoder self-attention, skip-attention, score fusion.

Learnable scores are a key/query dot product pushed through a row softmax;
cosine scores are raw cosine similarities used unsmoothed (no softmax), so
they may be negative. Either way the context vector is a score-weighted sum
of value-projected sources added residually onto the targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore


@dataclass
class AttentionProjections:
    """Per-site projection parameters. ``wh/bh`` project queries, ``wl/bl``
    keys (learnable mode only), ``wg/bg`` the values mixed into the output."""
    wh: Tensor | None = None
    bh: Tensor | None = None
    wl: Tensor | None = None
    bl: Tensor | None = None
    wg: Tensor | None = None
    bg: Tensor | None = None


def init_projections(store: ParamStore, prefix: str, rng: np.random.Generator,
                     query_width: int, key_width: int, out_width: int,
                     learnable: bool) -> AttentionProjections:
    """Create the projections for one attention site in ``store``.

    The value projection always exists; the query/key pair only for
    learnable scores. Projection width equals the target feature width.
    """
    def dense(name, fan_in, fan_out):
        w = store.add(f"{prefix}/{name}/w",
                      rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        b = store.add(f"{prefix}/{name}/b", rng.normal(0.0, 0.01, fan_out))
        return w, b

    proj = AttentionProjections()
    if learnable:
        proj.wh, proj.bh = dense("theta_h", query_width, out_width)
        proj.wl, proj.bl = dense("theta_l", key_width, out_width)
    proj.wg, proj.bg = dense("theta_g", key_width, out_width)
    return proj


def learnable_scores(queries: Tensor, keys: Tensor,
                     proj: AttentionProjections) -> Tensor:
    """(J, K) score matrix: softmax over keys of projected dot products."""
    q = ad.linear(queries, proj.wh, proj.bh)
    k = ad.linear(keys, proj.wl, proj.bl)
    if q.shape[1] != k.shape[1]:
        raise ad.ShapeError(
            f"projected widths differ: {q.shape[1]} vs {k.shape[1]}")
    return ad.softmax(ad.matmul(q, k, transpose_b=True), axis=1)


# norms below this are treated as zero so zero vectors score 0 everywhere
_NORM_FLOOR = 1e-12


def cosine_scores(queries: Tensor, keys: Tensor) -> Tensor:
    """(J, K) raw cosine similarities, no softmax; zero-norm rows score 0."""
    if queries.shape[1] != keys.shape[1]:
        raise ad.ShapeError(
            f"cosine needs equal widths, got {queries.shape[1]} vs {keys.shape[1]}")
    qn = ad.clamp_min(ad.sqrt(ad.reduce_sum(ad.mul(queries, queries),
                                            axis=1, keepdims=True)), _NORM_FLOOR)
    kn = ad.clamp_min(ad.sqrt(ad.reduce_sum(ad.mul(keys, keys),
                                            axis=1, keepdims=True)), _NORM_FLOOR)
    dots = ad.matmul(queries, keys, transpose_b=True)
    return ad.div(dots, ad.matmul(qn, kn, transpose_b=True))


def fuse(targets: Tensor, sources: Tensor, scores: Tensor,
         proj: AttentionProjections) -> Tensor:
    """targets + scores @ value-projection(sources); residual by element-wise
    addition, so all-zero scores return the targets untouched."""
    values = ad.linear(sources, proj.wg, proj.bg)
    if values.shape[1] != targets.shape[1]:
        raise ad.ShapeError(
            f"value width {values.shape[1]} != target width {targets.shape[1]}")
    return ad.add(targets, ad.matmul(scores, values))


def self_attention(features: Tensor, proj: AttentionProjections,
                   mode="learnable") -> Tensor:
    """Intra-set attention: every row attends over all rows of ``features``."""
    if mode == "learnable":
        scores = learnable_scores(features, features, proj)
    elif mode == "cosine":
        scores = cosine_scores(features, features)
    else:
        raise ValueError(f"unknown self-attention mode {mode!r}")
    return fuse(features, features, scores, proj)


def skip_attention(point_feats: Tensor, region_feats: Tensor, mode: str,
                   proj: AttentionProjections):
    """Fuse encoder region features into same-level decoder point features.

    Returns ``(fused, scores)``; the score matrix is what the export path
    writes out. In cosine mode the similarity is measured against the raw
    region features when widths match, otherwise against their value
    projection (the widths of the two sides differ at the global-seed site
    and wherever encoder and decoder widths diverge).
    """
    if mode == "learnable":
        scores = learnable_scores(point_feats, region_feats, proj)
        fused = fuse(point_feats, region_feats, scores, proj)
    elif mode == "cosine":
        if point_feats.shape[1] == region_feats.shape[1]:
            scores = cosine_scores(point_feats, region_feats)
            fused = fuse(point_feats, region_feats, scores, proj)
        else:
            values = ad.linear(region_feats, proj.wg, proj.bg)
            scores = cosine_scores(point_feats, values)
            fused = ad.add(point_feats, ad.matmul(scores, values))
    else:
        raise ValueError(f"unknown skip-attention mode {mode!r}")
    return fused, scores


# ---------------------------------------------------------------------------
# score-matrix export (plain text, consumed by plotting tools)
# ---------------------------------------------------------------------------

def write_scores_file(path, level: int, scores: np.ndarray | None,
                      mode: str) -> None:
    """Header line ``level J K mode`` then J rows of K scores; a disabled
    site (no-skip run) writes the header only, with K = 0 and mode 'none'."""
    with open(path, "w") as f:
        if scores is None:
            f.write(f"{level} 0 0 none\n")
            return
        j, k = scores.shape
        f.write(f"{level} {j} {k} {mode}\n")
        for row in scores:
            f.write(" ".join(f"{v:.6f}" for v in row) + "\n")


def read_scores_file(path):
    """Inverse of ``write_scores_file``; returns (level, mode, matrix|None)."""
    with open(path) as f:
        head = f.readline().split()
        level, j, k, mode = int(head[0]), int(head[1]), int(head[2]), head[3]
        if mode == "none":
            return level, mode, None
        rows = [[float(tok) for tok in f.readline().split()] for _ in range(j)]
        mat = np.asarray(rows)
        if mat.shape != (j, k):
            raise ValueError(f"{path}: matrix shape {mat.shape} != header ({j}, {k})")
        return level, mode, mat
