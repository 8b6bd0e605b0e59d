"""Structure-preserving decoder with hierarchical folding.

A seed state is generated from the global feature, then three folding
blocks expand it 64 -> 256 -> 512 -> 2048, each block an up-down-up
refinement whose up-modules fold increasingly dense 2-D grids (all drawn
from one fixed 46x46 plane) into the point features. Skip-attention fuses
encoder region features into the matching-resolution decoder state between
blocks; every level emits a coarse cloud through a shared point head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import (AttentionProjections, init_projections,
                        self_attention, skip_attention)
from .autodiff import Tensor
from .encoder import EncoderConfig, FeatureMap, GlobalFeature
from .layers import apply_mlp, dense, init_dense, init_mlp
from .params import ParamStore

MODES = ("full", "no_skip", "skip_learnable", "fold_cosine")

GRID_SIDE = 46  # smallest side whose square reaches the 2048-point output


def sample_grid(n: int, side: int = GRID_SIDE) -> np.ndarray:
    """``n`` evenly spaced points from the fixed side x side unit lattice.

    Lattice cells are indexed row-major 0 .. side^2-1; selection takes
    round(j * (side^2-1) / (n-1)) for j = 0..n-1 with exact integer
    arithmetic, so the result is bit-stable. Rows come out in row-major
    lattice order and are distinct for every n >= 2.
    """
    top = side * side - 1
    if not 1 <= n <= side * side:
        raise ValueError(f"grid supports 1..{side * side} points, got {n}")
    if n == 1:
        idx = np.zeros(1, dtype=np.int64)
    else:
        j = np.arange(n, dtype=np.int64)
        idx = (2 * top * j + (n - 1)) // (2 * (n - 1))
    rows, cols = idx // side, idx % side
    return np.stack([rows, cols], axis=1).astype(np.float64) / (side - 1)


@dataclass
class DecoderConfig:
    seed_count: int = 64
    seed_width: int = 128
    ratios: tuple = (4, 2, 4)
    widths: tuple = (128, 128, 64)
    fold_hidden: int = 64
    feat_hidden: int = 128
    head_hidden: int = 64
    grid_side: int = GRID_SIDE

    def counts(self):
        """Point counts per level: seed plus one per folding block."""
        out = [self.seed_count]
        for r in self.ratios:
            out.append(out[-1] * r)
        return out

    @staticmethod
    def miniature() -> "DecoderConfig":
        return DecoderConfig(seed_count=4, seed_width=16, ratios=(4, 2, 4),
                             widths=(16, 16, 8), fold_hidden=8, feat_hidden=8,
                             head_hidden=8)


@dataclass
class DecodeResult:
    clouds: list            # Tensors: one coarse cloud per level + final last
    final: Tensor           # alias of clouds[-1]
    skip_scores: list       # per skip site: np.ndarray or None (no_skip)
    features: list          # per-level feature tensors (seed first)


def init_decoder_params(store: ParamStore, dcfg: DecoderConfig,
                        ecfg: EncoderConfig, mode: str,
                        rng: np.random.Generator) -> None:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    init_dense(store, "decoder/seed", rng, ecfg.global_out, dcfg.seed_width)
    store.add("decoder/seed/offsets",
              rng.normal(0.0, 0.1, (dcfg.seed_count, dcfg.seed_width)))

    self_learnable = mode != "fold_cosine"
    d_in = dcfg.seed_width
    for b, (r, d_out) in enumerate(zip(dcfg.ratios, dcfg.widths), start=1):
        for up, up_in in (("up1", d_in), ("up2", d_out)):
            prefix = f"decoder/block{b}/{up}"
            init_mlp(store, f"{prefix}/fold", rng, up_in + 2,
                     [dcfg.fold_hidden, 3])
            init_mlp(store, f"{prefix}/feat", rng, up_in + 3,
                     [dcfg.feat_hidden, d_out])
            init_projections(store, f"{prefix}/attn", rng, d_out, d_out, d_out,
                             learnable=self_learnable)
        init_dense(store, f"decoder/block{b}/down", rng, r * d_out, d_out)
        d_in = d_out

    head_widths = [dcfg.seed_width] + list(dcfg.widths)
    for i, w in enumerate(head_widths):
        init_mlp(store, f"decoder/head{i}", rng, w, [dcfg.head_hidden, 3])

    if mode != "no_skip":
        skip_learnable = mode == "skip_learnable"
        # site 0 fuses the global feature into the seed; sites 1 and 2 fuse
        # encoder levels 2 and 1 into the matching decoder resolutions
        sites = [
            ("skip/site0", dcfg.seed_width, ecfg.global_out),
            ("skip/site1", dcfg.widths[0], ecfg.level2.widths[-1]),
            ("skip/site2", dcfg.widths[1], ecfg.level1.widths[-1]),
        ]
        for prefix, target_w, source_w in sites:
            init_projections(store, prefix, rng, target_w, source_w, target_w,
                             learnable=skip_learnable)


def _site_proj(store: ParamStore, prefix: str) -> AttentionProjections:
    get = lambda n: store[f"{prefix}/{n}"] if f"{prefix}/{n}" in store else None
    return AttentionProjections(
        wh=get("theta_h/w"), bh=get("theta_h/b"),
        wl=get("theta_l/w"), bl=get("theta_l/b"),
        wg=get("theta_g/w"), bg=get("theta_g/b"))


def seed_from_global(g: GlobalFeature, store: ParamStore,
                     dcfg: DecoderConfig) -> Tensor:
    """(seed_count, seed_width) state: a shared dense map of the global
    vector broadcast over rows, plus a learned per-row offset table."""
    row = dense(g.vector, store, "decoder/seed")
    rows = ad.broadcast(ad.reshape(row, (row.shape[1],)), 0, dcfg.seed_count)
    return ad.add(rows, store["decoder/seed/offsets"])


def up_module(features: Tensor, r: int, grid: Tensor, store: ParamStore,
              prefix: str, attn_mode: str) -> Tensor:
    """Duplicate each feature r times (copies contiguous), fold in the grid
    coordinates via a 3-wide codeword, lift to the next width, then
    self-attend over all rows."""
    n, d = features.shape
    if grid.shape[0] != r * n:
        raise ad.ShapeError(
            f"{prefix}: grid rows {grid.shape[0]} != r*N = {r * n}")
    dup = ad.reshape(ad.broadcast(features, 1, r), (r * n, d))
    codeword = apply_mlp(ad.concat([dup, grid], axis=1), store,
                         f"{prefix}/fold", 2, relu_last=False)
    lifted = apply_mlp(ad.concat([dup, codeword], axis=1), store,
                       f"{prefix}/feat", 2, relu_last=False)
    return self_attention(lifted, _site_proj(store, f"{prefix}/attn"),
                          mode=attn_mode)


def down_module(features: Tensor, r: int, store: ParamStore,
                prefix: str) -> Tensor:
    """Aggregate groups of r consecutive rows by concatenation, then map
    back to the row width."""
    rn, d = features.shape
    if rn % r:
        raise ad.ShapeError(f"{prefix}: {rn} rows not divisible by r={r}")
    grouped = ad.reshape(features, (rn // r, r * d))
    return dense(grouped, store, prefix)


def folding_block(features: Tensor, r: int, grid: Tensor, store: ParamStore,
                  prefix: str, attn_mode: str, second_up=True) -> Tensor:
    """Up-down-up refinement: the second expansion is a correction added
    onto the first. ``second_up=False`` degenerates to a single fold."""
    u1 = up_module(features, r, grid, store, f"{prefix}/up1", attn_mode)
    if not second_up:
        return u1
    d = down_module(u1, r, store, f"{prefix}/down")
    u2 = up_module(d, r, grid, store, f"{prefix}/up2", attn_mode)
    return ad.add(u1, u2)


def point_head(features: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Shared per-row MLP mapping features to 3-D coordinates."""
    return apply_mlp(features, store, prefix, 2, relu_last=False)


def make_grids(dcfg: DecoderConfig):
    counts = dcfg.counts()
    return [ad.constant(sample_grid(c, dcfg.grid_side)) for c in counts[1:]]


def decode(g: GlobalFeature, skips, mode: str, store: ParamStore,
           dcfg: DecoderConfig, grids=None) -> DecodeResult:
    """Run the decoder.

    ``skips`` is the (level-1, level-2) FeatureMap pair from the encoder;
    it is ignored entirely in no_skip mode. Skip scores are kept for export.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if grids is None:
        grids = make_grids(dcfg)
    self_mode = "cosine" if mode == "fold_cosine" else "learnable"
    skip_mode = "learnable" if mode == "skip_learnable" else "cosine"
    use_skips = mode != "no_skip"
    fm1, fm2 = (skips if skips is not None else (None, None))
    if use_skips and (fm1 is None or fm2 is None):
        raise ValueError("decode needs encoder feature maps unless no_skip")
    if use_skips and (fm1.level, fm2.level) != (1, 2):
        raise ValueError("skips must be the (level-1, level-2) feature maps")

    scores: list = []
    features: list = []
    clouds: list = []

    state = seed_from_global(g, store, dcfg)
    features.append(state)
    clouds.append(point_head(state, store, "decoder/head0"))
    if use_skips:
        state, s0 = skip_attention(state, g.vector, skip_mode,
                                   _site_proj(store, "skip/site0"))
        scores.append(s0.value.copy())
    else:
        scores.append(None)

    sources = [fm2, fm1] if use_skips else [None, None]
    for b, (r, grid) in enumerate(zip(dcfg.ratios, grids), start=1):
        state = folding_block(state, r, grid, store, f"decoder/block{b}",
                              self_mode)
        features.append(state)
        clouds.append(point_head(state, store, f"decoder/head{b}"))
        if b < len(dcfg.ratios):
            if use_skips:
                state, s = skip_attention(state, sources[b - 1].features,
                                          skip_mode,
                                          _site_proj(store, f"skip/site{b}"))
                scores.append(s.value.copy())
            else:
                scores.append(None)

    return DecodeResult(clouds=clouds, final=clouds[-1],
                        skip_scores=scores, features=features)
