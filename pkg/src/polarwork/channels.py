"""Channel models and reproducible noise streams.

Noise comes from numpy's Philox counter-based generator keyed by a
``SeedSequence`` built from ``(run_seed, stream_id, block_index)``, so the
same key always yields the same samples on any platform numpy supports.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InputError, NumericError

KINDS = ("awgn", "rayleigh_fast", "bursty")


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "awgn"
    sigma: float = 1.0
    rho: float = 0.0
    sigma_b: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown channel kind {self.kind!r}; expected one of {KINDS}")
        if not self.sigma > 0:
            raise InputError("sigma must be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise InputError("rho must lie in [0, 1]")
        if self.sigma_b < 0:
            raise InputError("sigma_b must be non-negative")

    def with_sigma(self, sigma: float, burst_relative: float | None = None) -> "ChannelSpec":
        """Same noise law at another sigma; bursts optionally scale with it."""
        sb = self.sigma_b if burst_relative is None else burst_relative * sigma
        return ChannelSpec(self.kind, sigma, self.rho, sb)

    def to_dict(self) -> dict:
        return asdict(self)


def snr_db_to_sigma(snr_db: float) -> float:
    """Noise std for unit-power real symbols: SNR = 1 / sigma^2."""
    return 10.0 ** (-float(snr_db) / 20.0)


def sigma_to_snr_db(sigma: float) -> float:
    return -20.0 * math.log10(sigma)


def make_rng(*key: int) -> np.random.Generator:
    """Independent generator for an integer key such as (seed, stream, block)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return make_rng(*seed)
    return make_rng(int(seed))


def sample_noise(spec: ChannelSpec, shape, seed):
    """Draw (fading, additive) arrays; fading is None except for Rayleigh."""
    rng = _rng(seed)
    if spec.kind == "rayleigh_fast":
        h = rng.standard_normal(shape)
        return h, spec.sigma * rng.standard_normal(shape)
    z = spec.sigma * rng.standard_normal(shape)
    if spec.kind == "bursty":
        active = rng.random(shape) < spec.rho
        z = z + np.where(active, spec.sigma_b * rng.standard_normal(shape), 0.0)
    return None, z


def apply_channel(spec: ChannelSpec, x, seed) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("non-finite channel input")
    h, z = sample_noise(spec, x.shape, seed)
    return (x if h is None else h * x) + z


def burst_mask(spec: ChannelSpec, shape, seed) -> np.ndarray:
    """Which symbols received a burst for this seed (same draw order as apply_channel)."""
    rng = _rng(seed)
    rng.standard_normal(shape)
    return rng.random(shape) < spec.rho
