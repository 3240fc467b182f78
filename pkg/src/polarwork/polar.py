"""Classical polar codes: kernels, construction, encoding and SC decoding.

Indices are in natural (non bit-reversed) order.  Bits map to symbols as
b -> 1 - 2b, and a positive LLR favours bit 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InputError, NumericError

G2 = np.array([[1, 0], [1, 1]], dtype=np.uint8)
_TANH_CLAMP = 1.0 - 1e-12


def _is_power_of_two(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def kernel_matrix(ell: int) -> np.ndarray:
    """Kronecker power of G2 of size ell x ell."""
    if ell < 2 or not _is_power_of_two(ell):
        raise ConfigurationError(f"kernel size must be a power of two >= 2, got {ell}")
    g = np.ones((1, 1), dtype=np.uint8)
    while g.shape[0] < ell:
        g = np.kron(g, G2)
    return g


def split_levels(n: int, ell: int) -> list[int]:
    """Kernel size of every tree level, leaves first.

    n = r * ell**m with 1 <= r <= ell; a root of size r is added when r > 1.
    """
    if ell < 2:
        raise ConfigurationError("kernel size must be >= 2")
    m, rest = 0, n
    while rest % ell == 0 and rest >= ell:
        rest //= ell
        m += 1
    if m == 0 or rest > ell:
        raise ConfigurationError(f"n={n} is not r*ell^m with 1<=r<=ell for ell={ell}")
    return [ell] * m + ([rest] if rest > 1 else [])


@dataclass(frozen=True)
class ReliabilityOrder:
    """Bit-channel indices from least to most reliable."""

    order: tuple[int, ...]
    source: str = "bhattacharyya"
    z: tuple[float, ...] | None = None

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise InputError("reliability order is not a permutation")

    @property
    def n(self) -> int:
        return len(self.order)

    def frozen(self, k: int) -> tuple[int, ...]:
        if not 0 < k <= self.n:
            raise InputError(f"k={k} outside (0, {self.n}]")
        return tuple(sorted(self.order[: self.n - k]))


@dataclass(frozen=True)
class CodeLayout:
    n: int
    k: int
    ell: int
    frozen: tuple[int, ...]

    def __post_init__(self):
        if not 0 < self.k <= self.n:
            raise ConfigurationError(f"need 0 < k <= n, got n={self.n} k={self.k}")
        split_levels(self.n, self.ell)
        fz = tuple(sorted(int(i) for i in self.frozen))
        if len(set(fz)) != len(fz) or len(fz) != self.n - self.k:
            raise ConfigurationError(f"frozen set must hold n-k={self.n - self.k} distinct indices")
        if fz and (fz[0] < 0 or fz[-1] >= self.n):
            raise ConfigurationError("frozen index out of range")
        object.__setattr__(self, "frozen", fz)

    @classmethod
    def from_order(cls, n, k, ell, order: ReliabilityOrder) -> "CodeLayout":
        if order.n != n:
            raise ConfigurationError(f"reliability order has length {order.n}, code length {n}")
        return cls(n, k, ell, order.frozen(k))

    @classmethod
    def build(cls, n, k, ell=2, design_erasure=0.5) -> "CodeLayout":
        return cls.from_order(n, k, ell, construct_reliability(n, design_erasure))

    @cached_property
    def info(self) -> tuple[int, ...]:
        fz = set(self.frozen)
        return tuple(i for i in range(self.n) if i not in fz)

    @cached_property
    def info_mask(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[list(self.info)] = True
        return mask

    @property
    def levels(self) -> list[int]:
        return split_levels(self.n, self.ell)

    @property
    def depth(self) -> int:
        return len(self.levels)

    def to_dict(self) -> dict:
        return {"n": self.n, "k": self.k, "ell": self.ell, "frozen": list(self.frozen)}

    @classmethod
    def from_dict(cls, d) -> "CodeLayout":
        return cls(int(d["n"]), int(d["k"]), int(d["ell"]), tuple(d["frozen"]))


def construct_reliability(n: int, design_erasure: float = 0.5, ell: int = 2) -> ReliabilityOrder:
    """Bhattacharyya (BEC) construction.

    Every Kronecker power of G2 yields the same code for a given n, so ell
    only has to be a power of two.
    """
    if not 0.0 < design_erasure < 1.0:
        raise InputError(f"design erasure must lie in (0, 1), got {design_erasure}")
    if not _is_power_of_two(n) or not _is_power_of_two(ell):
        raise ConfigurationError("n and ell must be powers of two")
    z = np.array([design_erasure])
    while z.size < n:
        nxt = np.empty(2 * z.size)
        nxt[0::2] = 2 * z - z * z
        nxt[1::2] = z * z
        z = nxt
    # descending z, ties by index
    order = sorted(range(n), key=lambda i: (-z[i], i))
    return ReliabilityOrder(tuple(order), "bhattacharyya", tuple(float(v) for v in z))


def load_reliability_file(path, n: int) -> ReliabilityOrder:
    """Read one index per line, least reliable first.

    A longer universal sequence is filtered down to indices below n.
    """
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            values.append(int(line))
        except ValueError:
            raise InputError(f"{path}:{lineno}: not an integer: {line!r}") from None
    if len(values) < n:
        raise InputError(f"sequence has {len(values)} entries, need at least {n}")
    seq = [v for v in values if v < n] if len(values) > n else values
    if sorted(seq) != list(range(n)):
        raise InputError("sequence is not a permutation of 0..n-1 after filtering")
    return ReliabilityOrder(tuple(seq), "file")


def _embed(layout: CodeLayout, u) -> np.ndarray:
    u = np.asarray(u)
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    if u2.shape[1] != layout.k:
        raise InputError(f"message length {u2.shape[1]} != k={layout.k}")
    m = np.zeros((u2.shape[0], layout.n), dtype=np.uint8)
    m[:, layout.info_mask] = u2
    return m, single


def polar_transform(m: np.ndarray) -> np.ndarray:
    """m @ G_n over GF(2) with natural-order G_n, along the last axis."""
    x = np.array(m, dtype=np.uint8, copy=True)
    n = x.shape[-1]
    h = n // 2
    while h >= 1:
        v = x.reshape(x.shape[:-1] + (n // (2 * h), 2, h))
        v[..., 0, :] ^= v[..., 1, :]
        h //= 2
    return x


def polar_encode(layout: CodeLayout, u) -> np.ndarray:
    m, single = _embed(layout, u)
    x = polar_transform(m)
    return x[0] if single else x


def generator_matrix(n: int) -> np.ndarray:
    return polar_transform(np.eye(n, dtype=np.uint8))


def f_exact(a, b):
    """Exact check-node update 2 atanh(tanh(a/2) tanh(b/2))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    t = np.tanh(a / 2) * np.tanh(b / 2)
    out = 2 * np.arctanh(np.clip(t, -_TANH_CLAMP, _TANH_CLAMP))
    # rounding near tanh saturation can overshoot the true bound min(|a|, |b|)
    cap = np.minimum(np.abs(a), np.abs(b))
    return np.clip(out, -cap, cap)


def f_minsum(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.sign(a) * np.sign(b) * np.minimum(np.abs(a), np.abs(b))


def g_update(beta, a, b):
    return (1 - 2 * np.asarray(beta, dtype=float)) * a + b


def awgn_llr(y, sigma: float) -> np.ndarray:
    return 2.0 * np.asarray(y, dtype=float) / sigma**2


def sc_decode(layout: CodeLayout, channel_llrs, mode: str = "exact"):
    """Successive cancellation decoding for the Arikan kernel.

    Accepts one LLR vector or a batch.  Returns ``(u_hat, decision_llrs)``
    restricted to the information set.
    """
    if mode not in ("exact", "minsum"):
        raise InputError(f"unknown SC mode {mode!r}")
    llr = np.asarray(channel_llrs, dtype=float)
    single = llr.ndim == 1
    llr = np.atleast_2d(llr)
    if llr.shape[1] != layout.n:
        raise InputError(f"expected {layout.n} LLRs, got {llr.shape[1]}")
    if not np.isfinite(llr).all():
        raise NumericError("non-finite channel LLR")
    if not _is_power_of_two(layout.n):
        raise ConfigurationError("SC decoding needs n a power of two")
    f = f_exact if mode == "exact" else f_minsum
    frozen = ~layout.info_mask
    u_hat = np.zeros(llr.shape, dtype=np.uint8)
    dec_llr = np.zeros(llr.shape)

    def node(alpha, lo):
        size = alpha.shape[1]
        if size == 1:
            dec_llr[:, lo] = alpha[:, 0]
            if frozen[lo]:
                bit = np.zeros(alpha.shape[0], dtype=np.uint8)
            else:
                bit = (alpha[:, 0] < 0).astype(np.uint8)
            u_hat[:, lo] = bit
            return bit[:, None]
        half = size // 2
        a, b = alpha[:, :half], alpha[:, half:]
        if frozen[lo:lo + half].all():
            beta_l = np.zeros((alpha.shape[0], half), dtype=np.uint8)
        else:
            beta_l = node(f(a, b), lo)
        beta_r = node(g_update(beta_l, a, b), lo + half)
        return np.concatenate([beta_l ^ beta_r, beta_r], axis=1)

    node(llr, 0)
    info = layout.info_mask
    out_u, out_l = u_hat[:, info], dec_llr[:, info]
    return (out_u[0], out_l[0]) if single else (out_u, out_l)


def bipolar(bits) -> np.ndarray:
    return 1.0 - 2.0 * np.asarray(bits, dtype=float)


def all_messages(k: int) -> np.ndarray:
    """Every k-bit message, lexicographic with u_0 most significant."""
    idx = np.arange(2**k)
    return ((idx[:, None] >> np.arange(k - 1, -1, -1)) & 1).astype(np.uint8)


ML_MAX_K = 20


def ml_decode(layout: CodeLayout, y, sigma: float = 1.0, chunk: int = 4096):
    """Exhaustive minimum-distance decoding; ties go to the smallest message.

    sigma does not change the decision on AWGN and is accepted only to
    mirror the likelihood formulation.
    """
    if layout.k > ML_MAX_K:
        raise InputError(f"ML decoding refused for k={layout.k} > {ML_MAX_K}")
    y = np.asarray(y, dtype=float)
    single = y.ndim == 1
    y = np.atleast_2d(y)
    msgs = all_messages(layout.k)
    book = bipolar(polar_encode(layout, msgs))
    # argmin ||y - c||^2 == argmax <y, c> since every ||c||^2 = n
    best = np.empty(y.shape[0], dtype=np.int64)
    for s in range(0, y.shape[0], chunk):
        best[s:s + chunk] = np.argmax(y[s:s + chunk] @ book.T, axis=1)
    out = msgs[best]
    return out[0] if single else out

