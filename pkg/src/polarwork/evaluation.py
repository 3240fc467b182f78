"""Monte-Carlo BER/BLER estimation and codebook analyses."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from scipy import stats
from statsmodels.stats.proportion import proportion_confint

from .channels import ChannelSpec, make_rng, sample_noise, snr_db_to_sigma
from .codec import NeuralCode
from .errors import InputError
from .polar import CodeLayout, awgn_llr, bipolar, ml_decode, polar_encode, sc_decode

EVAL_STREAM = 7
DIST_STREAM = 8
CSV_COLUMNS = ["snr_db", "blocks", "bit_errors", "block_errors", "ber", "bler", "ber_ci", "bler_ci"]


@dataclass
class Codec:
    """An encoder/decoder pair working on numpy arrays.

    ``encode`` maps a batch of bit rows to real codewords; ``decode`` maps
    received rows and the channel noise std to bit estimates.
    """

    name: str
    n: int
    k: int
    encode: Callable[[np.ndarray], np.ndarray]
    decode: Callable[[np.ndarray, float], np.ndarray]


def uncoded_codec(k: int) -> Codec:
    return Codec("uncoded", k, k, lambda u: bipolar(u), lambda y, s: (y < 0).astype(np.uint8))


def polar_sc_codec(layout: CodeLayout, mode: str = "exact") -> Codec:
    return Codec(f"polar-sc-{mode}", layout.n, layout.k,
                 lambda u: bipolar(polar_encode(layout, u)),
                 lambda y, s: sc_decode(layout, awgn_llr(y, s), mode)[0])


def polar_ml_codec(layout: CodeLayout) -> Codec:
    return Codec("polar-ml", layout.n, layout.k,
                 lambda u: bipolar(polar_encode(layout, u)),
                 lambda y, s: ml_decode(layout, y, s))


def neural_codec(code: NeuralCode, parallel: bool = False, feedback: str = "hard",
                 chunk: int = 20000) -> Codec:
    """Eval-mode wrapper: running/per-codeword normalization, no gradients."""

    def enc(u):
        with torch.no_grad():
            return np.concatenate([code.encode(u[s:s + chunk], training=False).numpy()
                                   for s in range(0, len(u), chunk)])

    def dec(y, sigma):
        with torch.no_grad():
            return np.concatenate([code.decode(y[s:s + chunk], feedback=feedback, parallel=parallel)[1].numpy()
                                   for s in range(0, len(y), chunk)])

    name = "neural-" + ("parallel" if parallel else "sc") + ("-binary" if code.binary else "")
    return Codec(name, code.layout.n, code.layout.k, enc, dec)


def wilson_halfwidth(count: int, total: int) -> float:
    if total == 0:
        return float("nan")
    lo, hi = proportion_confint(count, total, alpha=0.05, method="wilson")
    return float((hi - lo) / 2)


@dataclass
class EvalRow:
    snr_db: float
    blocks: int
    bit_errors: int
    block_errors: int
    ber: float
    bler: float
    ber_ci: float
    bler_ci: float
    one_sided: bool = False


@dataclass
class EvalReport:
    codec: str
    k: int
    channel: str
    rows: list[EvalRow] = field(default_factory=list)

    def row(self, snr_db: float) -> EvalRow:
        for r in self.rows:
            if math.isclose(r.snr_db, snr_db, abs_tol=1e-9):
                return r
        raise KeyError(snr_db)

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([repr(float(r.snr_db)), r.blocks, r.bit_errors, r.block_errors,
                        repr(r.ber), repr(r.bler), repr(r.ber_ci), repr(r.bler_ci)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"codec": self.codec, "channel": self.channel,
                "points": [{"snr_db": r.snr_db, "ber": r.ber, "bler": r.bler, "blocks": r.blocks,
                            "one_sided": r.one_sided} for r in self.rows]}


def _transmit(codec: Codec, spec: ChannelSpec, u: np.ndarray, rng) -> np.ndarray:
    x = codec.encode(u)
    h, z = sample_noise(spec, x.shape, rng)
    y = (x if h is None else h * x) + z
    return codec.decode(y, spec.sigma)


def monte_carlo(codec: Codec, points, min_block_errors: int = 100, max_blocks: int = 1_000_000,
                seed: int = 0, batch_size: int = 10000, min_blocks: int = 0) -> EvalReport:
    """Simulate each ``(snr_db, ChannelSpec)`` point until enough block errors.

    Batch ``t`` of point ``p`` draws messages and noise from the stream
    ``(seed, p, t)``, so two codecs evaluated with one seed see identical
    messages and noise.  Bit errors count information bits only.
    """
    points = list(points)
    kinds = {spec.kind for _, spec in points}
    report = EvalReport(codec.name, codec.k, ",".join(sorted(kinds)))
    for p, (snr_db, spec) in enumerate(points):
        blocks = bit_err = blk_err = 0
        t = 0
        while blocks < max_blocks and (blk_err < min_block_errors or blocks < min_blocks):
            b = min(batch_size, max_blocks - blocks)
            rng = make_rng(seed, EVAL_STREAM, p, t)
            u = rng.integers(0, 2, size=(b, codec.k)).astype(np.uint8)
            u_hat = _transmit(codec, spec, u, rng)
            wrong = u_hat != u
            bit_err += int(wrong.sum())
            blk_err += int(wrong.any(axis=1).sum())
            blocks += b
            t += 1
        report.rows.append(EvalRow(
            float(snr_db), blocks, bit_err, blk_err,
            bit_err / (blocks * codec.k), blk_err / blocks,
            wilson_halfwidth(bit_err, blocks * codec.k), wilson_halfwidth(blk_err, blocks),
            one_sided=blk_err == 0,
        ))
    return report


def awgn_points(snrs_db) -> list[tuple[float, ChannelSpec]]:
    return [(float(s), ChannelSpec("awgn", snr_db_to_sigma(s))) for s in snrs_db]


def channel_points(snrs_db, kind="awgn", rho=0.0, burst_std=0.0, burst_relative=False):
    out = []
    for s in snrs_db:
        sigma = snr_db_to_sigma(s)
        sb = burst_std * sigma if burst_relative else burst_std
        out.append((float(s), ChannelSpec(kind, sigma, rho, sb)))
    return out


# distance profile --------------------------------------------------------

@dataclass
class DistanceProfile:
    n: int
    distances: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    gaussian_mean: float
    gaussian_std: float

    def gaussian_pdf(self, r) -> np.ndarray:
        """Density of ||c1 - c2|| for independent i.i.d. N(0, 1) codewords."""
        return stats.chi(df=self.n, scale=math.sqrt(2)).pdf(r)

    def to_csv(self, header_comment: str | None = None) -> str:
        return histogram_csv(self.edges, self.counts, header_comment)

    def summary(self) -> dict:
        return {"n": self.n, "pairs": int(self.distances.size), "mean": self.mean, "std": self.std,
                "gaussian_mean": self.gaussian_mean, "gaussian_std": self.gaussian_std}


def gaussian_codebook_distance(n: int) -> tuple[float, float]:
    d = stats.chi(df=n, scale=math.sqrt(2))
    return float(d.mean()), float(d.std())


def sample_distinct_pairs(k: int, num_pairs: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if k < 1:
        raise InputError("need k >= 1 to draw distinct messages")
    a = rng.integers(0, 2, size=(num_pairs, k)).astype(np.uint8)
    b = rng.integers(0, 2, size=(num_pairs, k)).astype(np.uint8)
    same = (a == b).all(axis=1)
    while same.any():
        b[same] = rng.integers(0, 2, size=(int(same.sum()), k))
        same = (a == b).all(axis=1)
    return a, b


def codeword_distance(encode, u1, u2) -> np.ndarray:
    x1 = np.atleast_2d(encode(np.atleast_2d(u1)))
    x2 = np.atleast_2d(encode(np.atleast_2d(u2)))
    return np.sqrt(((x1 - x2) ** 2).sum(axis=1))


def distance_profile(encode, n: int, k: int, num_pairs: int = 10000, seed: int = 0,
                     bins: int = 50) -> DistanceProfile:
    rng = make_rng(seed, DIST_STREAM)
    a, b = sample_distinct_pairs(k, num_pairs, rng)
    d = codeword_distance(encode, a, b)
    counts, edges = np.histogram(d, bins=bins)
    gm, gs = gaussian_codebook_distance(n)
    return DistanceProfile(n, d, edges, counts, float(d.mean()), float(d.std()), gm, gs)


def histogram_csv(edges, counts, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()


# first-error analysis ---------------------------------------------------

def first_error_positions(u, u_hat) -> np.ndarray:
    """Index of the first wrong information bit per block, -1 when error-free."""
    wrong = np.atleast_2d(np.asarray(u) != np.asarray(u_hat))
    first = np.argmax(wrong, axis=1)
    return np.where(wrong.any(axis=1), first, -1)


@dataclass
class FirstErrorHistogram:
    counts: np.ndarray
    blocks: int

    @property
    def erroneous(self) -> int:
        return int(self.counts.sum())

    @property
    def distribution(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)

    @property
    def mode(self) -> int:
        return int(np.argmax(self.counts))

    def to_csv(self, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "count"])
        for i, c in enumerate(self.counts):
            w.writerow([i, int(c)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"blocks": self.blocks, "erroneous": self.erroneous, "mode": self.mode,
                "distribution": [float(v) for v in self.distribution]}


def first_error_histogram(codec: Codec, spec: ChannelSpec, num_blocks: int, seed: int = 0,
                          batch_size: int = 10000) -> FirstErrorHistogram:
    counts = np.zeros(codec.k, dtype=np.int64)
    done, t = 0, 0
    while done < num_blocks:
        b = min(batch_size, num_blocks - done)
        rng = make_rng(seed, EVAL_STREAM, 0, t)
        u = rng.integers(0, 2, size=(b, codec.k)).astype(np.uint8)
        pos = first_error_positions(u, _transmit(codec, spec, u, rng))
        counts += np.bincount(pos[pos >= 0], minlength=codec.k)
        done += b
        t += 1
    return FirstErrorHistogram(counts, done)


