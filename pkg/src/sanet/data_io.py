"""Point-cloud files, synthetic shape generation, and the input-size policy.

Dataset layout on disk:
    <root>/<split>/index.txt              one "shape_id category" line per shape
    <root>/<split>/<shape_id>/complete.xyz
    <root>/<split>/<shape_id>/partial_<view>.xyz

Shapes are sampled uniformly by area from seeded parametric assemblies of
boxes and cylinders. Partial views approximate occlusion by removing a
contiguous region around the point facing away from the viewpoint.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .geometry import normalize

N_POINTS = 2048


class DataError(Exception):
    """Bad files, malformed content, missing datasets."""


@dataclass
class ShapeSample:
    shape_id: str
    category: str
    complete: np.ndarray          # (2048, 3), normalized
    partials: list                # list of (keep, 3) arrays, complete's frame


# ---------------------------------------------------------------------------
# XYZ / PLY files
# ---------------------------------------------------------------------------

def write_xyz(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        for p in points:
            f.write(f"{p[0]:.8f} {p[1]:.8f} {p[2]:.8f}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, "
                                f"got {len(parts)}")
            try:
                rows.append([float(tok) for tok in parts])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DataError(f"{path}: empty point cloud")
    return np.asarray(rows, dtype=np.float64)


def read_ply_ascii(path) -> np.ndarray:
    """Vertex positions from an ascii PLY; all other properties ignored."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise DataError(f"{path}: not a PLY file")
        n_vertex = None
        columns: list[str] = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise DataError(f"{path}: truncated header")
            line = line.strip()
            if line.startswith("format"):
                if "ascii" not in line:
                    raise DataError(f"{path}: only ascii PLY is supported")
            elif line.startswith("element"):
                parts = line.split()
                in_vertex = parts[1] == "vertex"
                if in_vertex:
                    n_vertex = int(parts[2])
            elif line.startswith("property") and in_vertex:
                columns.append(line.split()[-1])
            elif line == "end_header":
                break
        if n_vertex is None:
            raise DataError(f"{path}: no vertex element")
        try:
            ix, iy, iz = columns.index("x"), columns.index("y"), columns.index("z")
        except ValueError:
            raise DataError(f"{path}: vertex element lacks x/y/z") from None
        pts = np.empty((n_vertex, 3), dtype=np.float64)
        for i in range(n_vertex):
            line = f.readline()
            if not line.strip():
                raise DataError(f"{path}: vertex count mismatch "
                                f"(header says {n_vertex}, file has {i})")
            vals = line.split()
            try:
                pts[i] = (float(vals[ix]), float(vals[iy]), float(vals[iz]))
            except (ValueError, IndexError):
                raise DataError(f"{path}: bad vertex line {i}") from None
    return pts


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_KINDS = ("plane-like", "table-like", "cuboid", "cylinder", "composite")
_MIRRORED = {"plane-like", "table-like"}


def _box_faces(center, half):
    """Six rectangular faces of an axis-aligned box as (corner, e1, e2)."""
    cx, cy, cz = center
    hx, hy, hz = half
    faces = []
    for sign in (-1, 1):
        faces.append(((cx + sign * hx, cy - hy, cz - hz),
                      (0, 2 * hy, 0), (0, 0, 2 * hz)))
        faces.append(((cx - hx, cy + sign * hy, cz - hz),
                      (2 * hx, 0, 0), (0, 0, 2 * hz)))
        faces.append(((cx - hx, cy - hy, cz + sign * hz),
                      (2 * hx, 0, 0), (0, 2 * hy, 0)))
    return faces


def _sample_faces(faces, n, rng):
    corners = np.array([f[0] for f in faces], dtype=np.float64)
    e1 = np.array([f[1] for f in faces], dtype=np.float64)
    e2 = np.array([f[2] for f in faces], dtype=np.float64)
    areas = np.linalg.norm(np.cross(e1, e2), axis=1)
    pick = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.random((n, 1))
    v = rng.random((n, 1))
    return corners[pick] + u * e1[pick] + v * e2[pick]


def _sample_cylinder(center, radius, height, n, rng, axis=2):
    lateral = 2 * np.pi * radius * height
    caps = 2 * np.pi * radius ** 2
    on_side = rng.random(n) < lateral / (lateral + caps)
    theta = rng.random(n) * 2 * np.pi
    r = np.where(on_side, radius, radius * np.sqrt(rng.random(n)))
    h = np.where(on_side, (rng.random(n) - 0.5) * height,
                 np.sign(rng.random(n) - 0.5) * height / 2)
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), h], axis=1)
    order = [0, 1, 2]
    order[2], order[axis] = order[axis], order[2]
    return pts[:, order] + np.asarray(center)


def synth_shape(kind: str, seed: int) -> np.ndarray:
    """2048 surface points from a seeded parametric assembly.

    The mirrored kinds (plane-like, table-like) are built as a 1024-point
    sample unioned with its reflection across y = 0, so the output point
    set is exactly bilaterally symmetric.
    """
    if kind not in SHAPE_KINDS:
        raise DataError(f"unknown shape kind {kind!r}")
    rng = np.random.default_rng([seed, SHAPE_KINDS.index(kind)])
    n = N_POINTS // 2 if kind in _MIRRORED else N_POINTS

    if kind == "plane-like":
        length = rng.uniform(1.6, 2.0)
        span = rng.uniform(1.8, 2.6)
        chord = rng.uniform(0.35, 0.55)
        body = rng.uniform(0.16, 0.24)
        faces = _box_faces((0, 0, 0), (length / 2, body / 2, body / 2))
        faces += _box_faces((rng.uniform(-0.1, 0.2), 0, 0),
                            (chord / 2, span / 2, 0.02))
        faces += _box_faces((-length / 2 + 0.12, 0, 0),
                            (chord / 4, span / 5, 0.02))
        faces += _box_faces((-length / 2 + 0.12, 0, body / 2 + 0.15),
                            (chord / 4, 0.02, 0.15))
        pts = _sample_faces(faces, n, rng)
    elif kind == "table-like":
        top_x = rng.uniform(0.8, 1.2)
        top_y = rng.uniform(0.8, 1.2)
        height = rng.uniform(0.6, 0.9)
        leg = rng.uniform(0.03, 0.06)
        faces = _box_faces((0, 0, height), (top_x / 2, top_y / 2, 0.03))
        for sx in (-1, 1):
            for sy in (-1, 1):
                faces += _box_faces(
                    (sx * (top_x / 2 - leg), sy * (top_y / 2 - leg), height / 2),
                    (leg, leg, height / 2))
        pts = _sample_faces(faces, n, rng)
    elif kind == "cuboid":
        half = rng.uniform(0.3, 1.0, size=3)
        pts = _sample_faces(_box_faces((0, 0, 0), half), n, rng)
    elif kind == "cylinder":
        pts = _sample_cylinder((0, 0, 0), rng.uniform(0.3, 0.7),
                               rng.uniform(0.8, 1.8), n, rng)
    else:  # composite
        faces = _box_faces((0, 0, 0), rng.uniform(0.2, 0.6, size=3))
        faces += _box_faces(rng.uniform(-0.5, 0.5, size=3),
                            rng.uniform(0.1, 0.4, size=3))
        n_box = int(round(n * 0.7))
        pts = np.concatenate([
            _sample_faces(faces, n_box, rng),
            _sample_cylinder(rng.uniform(-0.4, 0.4, size=3),
                             rng.uniform(0.1, 0.3), rng.uniform(0.5, 1.2),
                             n - n_box, rng),
        ])

    if kind in _MIRRORED:
        pts = np.concatenate([pts, pts * np.array([1.0, -1.0, 1.0])])
    return pts


def make_partial(complete: np.ndarray, viewpoint, keep: int,
                 seed: int = 0) -> np.ndarray:
    """Occlude the far side: drop the points closest (within the cloud) to
    the point lying farthest along the negated view direction."""
    pts = np.asarray(complete, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= keep <= n:
        raise DataError(f"keep must be in 1..{n}, got {keep}")
    vp = np.asarray(viewpoint, dtype=np.float64)
    norm = np.linalg.norm(vp)
    if norm == 0:
        raise DataError("viewpoint vector must be nonzero")
    back = pts @ (-vp / norm)
    anchor = pts[int(back.argmax())]
    d = ((pts - anchor) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(n), d))      # nearest first, stable on ties
    keep_idx = np.sort(order[n - keep:])
    return pts[keep_idx]


def pad_to_input_size(cloud: np.ndarray, n: int = N_POINTS,
                      seed: int = 0) -> np.ndarray:
    """Fixed-size input policy: subsample without replacement above n,
    duplicate uniformly resampled points below n."""
    pts = np.asarray(cloud, dtype=np.float64)
    count = pts.shape[0]
    if count == 0:
        raise DataError("cannot pad an empty cloud")
    if count == n:
        return pts.copy()
    rng = np.random.default_rng(seed)
    if count > n:
        idx = rng.choice(count, size=n, replace=False)
        return pts[np.sort(idx)]
    extra = rng.choice(count, size=n - count, replace=True)
    return np.concatenate([pts, pts[extra]])


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

VIEWPOINTS = np.array([(x, y, z) for x in (-1, 1) for y in (-1, 1)
                       for z in (-1, 1)], dtype=np.float64) / np.sqrt(3.0)


def generate_dataset(root, split: str, n_shapes: int, views: int = 8,
                     keep: int = 1024, seed: int = 0) -> list[str]:
    """Write ``n_shapes`` normalized shapes with ``views`` partial views
    each; fully determined by ``seed``. Returns the shape ids."""
    split_dir = os.path.join(root, split)
    os.makedirs(split_dir, exist_ok=True)
    ids = []
    lines = []
    for i in range(n_shapes):
        kind = SHAPE_KINDS[i % len(SHAPE_KINDS)]
        shape_id = f"{kind}-{i:04d}"
        complete = normalize(synth_shape(kind, seed=seed * 100003 + i))
        shape_dir = os.path.join(split_dir, shape_id)
        os.makedirs(shape_dir, exist_ok=True)
        write_xyz(os.path.join(shape_dir, "complete.xyz"), complete)
        for v in range(views):
            vp = VIEWPOINTS[v % len(VIEWPOINTS)]
            partial = make_partial(complete, vp, keep)
            write_xyz(os.path.join(shape_dir, f"partial_{v}.xyz"), partial)
        ids.append(shape_id)
        lines.append(f"{shape_id} {kind}")
    with open(os.path.join(split_dir, "index.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    return ids


def load_dataset(root, split: str) -> list[ShapeSample]:
    split_dir = os.path.join(root, split)
    index = os.path.join(split_dir, "index.txt")
    if not os.path.isfile(index):
        raise DataError(f"no dataset at {split_dir} (missing index.txt)")
    samples = []
    with open(index) as f:
        for line in f:
            if not line.strip():
                continue
            shape_id, category = line.split()
            shape_dir = os.path.join(split_dir, shape_id)
            complete = read_xyz(os.path.join(shape_dir, "complete.xyz"))
            partials = []
            v = 0
            while os.path.isfile(os.path.join(shape_dir, f"partial_{v}.xyz")):
                partials.append(read_xyz(os.path.join(shape_dir,
                                                      f"partial_{v}.xyz")))
                v += 1
            if not partials:
                raise DataError(f"{shape_dir}: no partial views")
            samples.append(ShapeSample(shape_id, category, complete, partials))
    if not samples:
        raise DataError(f"{split_dir}: empty split")
    return samples
