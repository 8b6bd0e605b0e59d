"""Structural point-cloud kernels: sampling, neighborhoods, grouping.

Everything here is plain numpy and non-differentiable; the encoder routes
feature gradients around these kernels by reusing their index output.
Brute-force distance scans throughout: inputs are at most a few thousand
points, and determinism matters more than asymptotics at that scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass
class NeighborhoodIndex:
    """Ball-query result: ``member_indices[i]`` are the up-to-k neighbors of
    point ``center_indices[i]``, nearest first, padded by repeating the
    nearest member when the ball holds fewer than k points."""
    center_indices: np.ndarray   # (M,)
    member_indices: np.ndarray   # (M, K)
    radius: float


def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GeometryError(f"expected (N, 3) points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise GeometryError("non-finite coordinates")
    centered = pts - pts.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if scale == 0:
        return centered
    return centered / scale


def normalization_frame(points: np.ndarray):
    """(centroid, scale) such that ``(points - centroid) / scale`` is normalized."""
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    scale = np.linalg.norm(pts - centroid, axis=1).max()
    return centroid, (scale if scale > 0 else 1.0)


def _lex_min(points: np.ndarray, candidates: np.ndarray) -> int:
    """Among candidate indices, the one whose point is lexicographically
    smallest; exact coordinate ties fall back to the lowest index."""
    if len(candidates) == 1:
        return int(candidates[0])
    cand_pts = points[candidates]
    # lexsort keys are applied last-first: sort by x, then y, then z, then index
    order = np.lexsort((candidates, cand_pts[:, 2], cand_pts[:, 1], cand_pts[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset of ``m`` point indices.

    The walk starts at the point farthest from the centroid so the result
    depends on geometry, not input order (up to exact-distance ties, which
    break toward the lexicographically smallest point, then lowest index).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise GeometryError(f"cannot sample {m} of {n} points")
    d0 = ((pts - pts.mean(axis=0)) ** 2).sum(axis=1)
    start = _lex_min(pts, np.flatnonzero(d0 == d0.max()))
    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    dist = ((pts - pts[start]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = _lex_min(pts, np.flatnonzero(dist == dist.max()))
        selected[i] = nxt
        np.minimum(dist, ((pts - pts[nxt]) ** 2).sum(axis=1), out=dist)
    return selected


def ball_query(points: np.ndarray, center_indices: np.ndarray, radius: float,
               k: int) -> NeighborhoodIndex:
    """Up to ``k`` in-radius neighbors per center, nearest first.

    Centers are indices into ``points``; a center is always its own nearest
    member (distance 0). Short balls pad by repeating the nearest member so
    the output is a dense (M, K) index array.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] == 0:
        raise GeometryError("ball query on an empty cloud")
    if radius <= 0 or k < 1:
        raise GeometryError(f"need radius > 0 and k >= 1, got {radius}, {k}")
    centers = np.asarray(center_indices, dtype=np.int64)
    diff = pts[centers, None, :] - pts[None, :, :]
    d2 = (diff * diff).sum(axis=2)                      # (M, N)
    r2 = float(radius) ** 2
    m = centers.shape[0]
    n = pts.shape[0]
    members = np.empty((m, k), dtype=np.int64)
    kk = min(k, n)
    part = np.argpartition(d2, kk - 1, axis=1)[:, :kk] if kk < n \
        else np.tile(np.arange(n), (m, 1))
    for i in range(m):
        cand = part[i]
        order = np.lexsort((cand, d2[i, cand]))         # distance, then index
        cand = cand[order]
        inside = cand[d2[i, cand] <= r2 + 1e-12]
        if inside.size == 0:
            inside = cand[:1]
        if inside.size < k:
            row = np.full(k, inside[0], dtype=np.int64)
            row[:inside.size] = inside
        else:
            row = inside[:k]
        members[i] = row
    return NeighborhoodIndex(centers, members, float(radius))


def group_relative(points: np.ndarray, neigh: NeighborhoodIndex,
                   feats: np.ndarray | None = None) -> np.ndarray:
    """(M, K, 3 [+ D]) array of member coordinates relative to their center,
    optionally concatenated with the member features."""
    pts = np.asarray(points, dtype=np.float64)
    idx = neigh.member_indices
    if idx.min() < 0 or idx.max() >= pts.shape[0]:
        raise GeometryError("member index out of range")
    rel = pts[idx] - pts[neigh.center_indices][:, None, :]
    if feats is None:
        return rel
    feats = np.asarray(feats)
    if feats.shape[0] != pts.shape[0]:
        raise GeometryError(
            f"features not aligned with cloud: {feats.shape[0]} vs {pts.shape[0]}")
    return np.concatenate([rel, feats[idx]], axis=2)
