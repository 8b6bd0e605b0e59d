"""Whole-network wiring: configuration, parameter construction, forward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import (DecodeResult, DecoderConfig, MODES, decode,
                      init_decoder_params, make_grids)
from .encoder import EncoderCache, EncoderConfig, encode, init_encoder_params
from .params import ParamStore

MODE_IDS = {mode: i for i, mode in enumerate(MODES)}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    mode: str = "full"

    @staticmethod
    def miniature(mode="full") -> "ModelConfig":
        return ModelConfig(EncoderConfig.miniature(), DecoderConfig.miniature(),
                           mode)

    @property
    def n_input(self) -> int:
        return self.encoder.n_input

    @property
    def n_output(self) -> int:
        return self.decoder.counts()[-1]


def init_model_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_encoder_params(store, cfg.encoder, rng)
    init_decoder_params(store, cfg.decoder, cfg.encoder, cfg.mode, rng)
    return store


class Network:
    """Config + parameters + cached per-config constants (folding grids)."""

    def __init__(self, cfg: ModelConfig, store: ParamStore | None = None,
                 seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else init_model_params(cfg, seed)
        self.grids = make_grids(cfg.decoder)

    def forward(self, points: np.ndarray,
                cache: EncoderCache | None = None) -> DecodeResult:
        """Complete one (already padded and normalized) input cloud."""
        fm1, fm2, g = encode(points, self.store, self.cfg.encoder, cache)
        return decode(g, (fm1, fm2), self.cfg.mode, self.store,
                      self.cfg.decoder, self.grids)

    def complete(self, points: np.ndarray) -> DecodeResult:
        return self.forward(points)

    def param_count(self) -> int:
        return self.store.count()

    def param_breakdown(self) -> dict[str, int]:
        return self.store.count_by_prefix(depth=1)


def mode_meta(cfg: ModelConfig) -> dict[str, float]:
    return {"mode_id": float(MODE_IDS[cfg.mode]),
            "n_input": float(cfg.n_input)}


def mode_from_meta(meta: dict) -> str:
    if "mode_id" in meta:
        return MODES[int(np.asarray(meta["mode_id"]).reshape(-1)[0])]
    return "full"
