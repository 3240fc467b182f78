"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The summary lines are printed at the end of the pytest run by the hook in
conftest.py.  Run just this file with

    pytest tests/test_acceptance.py -v

Criteria 6, 7, 8 and 10 train neural codes and take several minutes.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import optimize, stats

from polarwork.channels import ChannelSpec, apply_channel, burst_mask, make_rng, sample_noise, snr_db_to_sigma
from polarwork.cli import main
from polarwork.codec import Architecture, NeuralCode, dp_encode, load_checkpoint, save_checkpoint
from polarwork.evaluation import (
    awgn_points,
    distance_profile,
    first_error_histogram,
    monte_carlo,
    neural_codec,
    polar_ml_codec,
    polar_sc_codec,
    uncoded_codec,
)
from polarwork.nn import DenseNet, init_dense
from polarwork.polar import CodeLayout, all_messages, bipolar, polar_encode
from polarwork.training import smooth
from test_nn import check_net_gradients


def record(results, number, ok, detail):
    results[number] = (bool(ok), detail)
    return ok


# 1 ------------------------------------------------------------------------

def test_criterion_01_classical_correctness(acceptance_results):
    start = time.perf_counter()
    lay43 = CodeLayout.build(4, 3)
    encodings_ok = all(
        polar_encode(lay43, u).tolist() == [u[0] ^ u[1] ^ u[2], u[0] ^ u[2], u[1] ^ u[2], u[2]]
        for u in all_messages(3).tolist())
    info = CodeLayout.build(16, 8, 4).info
    elapsed = time.perf_counter() - start
    ok = encodings_ok and info == (7, 9, 10, 11, 12, 13, 14, 15) and elapsed < 1.0
    record(acceptance_results, 1, ok, f"closed form {encodings_ok}, I={list(info)}, {elapsed:.3f}s")
    assert ok


# 2 ------------------------------------------------------------------------

def test_criterion_02_sc_versus_ml(acceptance_results):
    start = time.perf_counter()
    lay = CodeLayout.build(8, 4)
    point = [(0.0, ChannelSpec("awgn", 1.0))]
    kw = dict(min_blocks=100_000, max_blocks=100_000, seed=21)
    ml = monte_carlo(polar_ml_codec(lay), point, **kw).rows[0].bler
    sc = monte_carlo(polar_sc_codec(lay), point, **kw).rows[0].bler
    elapsed = time.perf_counter() - start
    ok = ml <= sc <= 2.0 * ml and elapsed < 120
    record(acceptance_results, 2, ok, f"BLER ML {ml:.5f} <= SC {sc:.5f} <= 2 ML, {elapsed:.1f}s")
    assert ok


# 3 ------------------------------------------------------------------------

def test_criterion_03_minsum_fidelity(acceptance_results):
    start = time.perf_counter()
    lay = CodeLayout.build(64, 32)
    point = [(0.0, ChannelSpec("awgn", 0.89))]
    kw = dict(min_blocks=100_000, max_blocks=100_000, seed=31)
    exact = monte_carlo(polar_sc_codec(lay, "exact"), point, **kw).rows[0].ber
    minsum = monte_carlo(polar_sc_codec(lay, "minsum"), point, **kw).rows[0].ber
    elapsed = time.perf_counter() - start
    ratio = max(exact, minsum) / min(exact, minsum)
    ok = ratio <= 1.3 and elapsed < 300
    record(acceptance_results, 3, ok, f"BER exact {exact:.5f}, min-sum {minsum:.5f}, ratio {ratio:.3f}, "
                                      f"{elapsed:.1f}s")
    assert ok


# 4 ------------------------------------------------------------------------

def smooth_point(rng, sizes, margin=1e-3):
    """Random net and inputs with every pre-activation at least ``margin`` from the ReLU kink.

    Central differences are undefined at a kink, and zero biases put dead
    units exactly on one, so biases are drawn at random and samples that
    land near a kink are redrawn.
    """
    while True:
        net = init_dense(sizes, rng)
        net = DenseNet(net.weights, [torch.from_numpy(rng.normal(0, 0.5, size=b.shape[0])) for b in net.biases])
        x = rng.standard_normal((3, sizes[0]))
        h, nearest = x, np.inf
        for w, b in zip(net.weights[:-1], net.biases[:-1]):
            pre = h @ w.numpy().T + b.numpy()
            nearest = min(nearest, np.abs(pre).min())
            h = np.maximum(pre, 0)
        if nearest > margin:
            return net, x


def test_criterion_04_gradient_engine(acceptance_results):
    start = time.perf_counter()
    rng = make_rng(41)
    failures = 0
    for _ in range(100):
        sizes = rng.integers(1, 33, size=5).tolist()  # three hidden layers
        net, x = smooth_point(rng, sizes)
        G = rng.standard_normal((3, sizes[-1]))
        failures += not check_net_gradients(net, x, G)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    record(acceptance_results, 4, ok, f"{100 - failures}/100 nets agree at rel 1e-4, {elapsed:.1f}s")
    assert ok


# 5 ------------------------------------------------------------------------

# decoder widths play no part in encoding; small ones keep construction cheap
ZERO_ARCH = Architecture(enc_hidden=8, dec_hidden=1, depth=1, parallel_hidden=1)


def test_criterion_05_zero_network_reduction(acceptance_results):
    start = time.perf_counter()
    checked, ok = 0, True
    for n in (2, 4, 8, 16):
        for ell in sorted({2, 4, n} & set(range(2, n + 1))):
            for k in range(1, n + 1):
                lay = CodeLayout.build(n, k, ell)
                code = NeuralCode.create(lay, ZERO_ARCH, zero_encoder=True, norm_mode="per_codeword")
                msgs = all_messages(k)
                ok &= np.array_equal(dp_encode(code, msgs).numpy(), bipolar(polar_encode(lay, msgs)))
                checked += 1
    elapsed = time.perf_counter() - start
    ok = ok and elapsed < 1.0
    record(acceptance_results, 5, ok, f"{checked} layouts exhaustive, {elapsed:.3f}s")
    assert ok


# 6 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_06_single_kernel(acceptance_results, kernel_4_1):
    code, _, train_time = kernel_4_1
    report = monte_carlo(neural_codec(code), awgn_points([-5.0, -3.0, -1.0]), min_blocks=100_000,
                         max_blocks=100_000, seed=61)
    lines, ok = [], train_time <= 600
    for row in report.rows:
        sigma = snr_db_to_sigma(row.snr_db)
        bound = stats.norm.sf(2 / sigma)
        allowed = stats.norm.sf(2 / (sigma * 10 ** (0.5 / 20)))  # bound shifted by 0.5 dB
        ok &= row.ber <= allowed
        lines.append(f"{row.snr_db:g}dB {row.ber:.4f} (Q {bound:.4f}, +0.5dB {allowed:.4f})")
    record(acceptance_results, 6, ok, "; ".join(lines) + f"; trained {train_time:.0f}s")
    assert ok


# 7 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_full_pipeline(acceptance_results, curriculum_run, layout_16_8_4):
    points = awgn_points([-2.0, 0.0, 2.0])
    kw = dict(min_blocks=100_000, max_blocks=100_000, seed=71)
    neural = monte_carlo(neural_codec(curriculum_run["code"]), points, **kw)
    sc = monte_carlo(polar_sc_codec(layout_16_8_4), points, **kw)
    ok = curriculum_run["time"] <= 7200
    lines, beats = [], 0
    for a, b in zip(neural.rows, sc.rows):
        ok &= a.ber <= 1.5 * b.ber
        beats += a.ber < b.ber
        lines.append(f"{a.snr_db:g}dB {a.ber:.4f} vs SC {b.ber:.4f}")
    detail = "; ".join(lines) + f"; beats SC at {beats}/3 (stretch), trained {curriculum_run['time']:.0f}s"
    record(acceptance_results, 7, ok, detail)
    assert ok


# 8 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_curriculum_effect(acceptance_results, curriculum_run, scratch_run):
    scratch = smooth(scratch_run["trace"].losses("dec"))
    curriculum = smooth(curriculum_run["trace"].losses("dec"))
    target = scratch[-1]
    hits = np.flatnonzero(curriculum <= target)
    reached = int(hits[0]) + 1 if hits.size else None
    ok = reached is not None and reached <= 0.7 * len(scratch)
    record(acceptance_results, 8, ok, f"scratch final BCE {target:.4f}; curriculum reaches it at decoder step "
                                      f"{reached} of {len(scratch)}")
    assert ok


# 9 ------------------------------------------------------------------------

def test_criterion_09_channel_statistics(acceptance_results):
    start = time.perf_counter()
    n = 1_000_000
    var = apply_channel(ChannelSpec("awgn", 1.0), np.zeros(n), seed=(91, 1, 0)).var()
    h, _ = sample_noise(ChannelSpec("rayleigh_fast", 1.0), (n,), seed=(92, 1, 0))
    power = float(np.mean(h**2))
    frac = float(burst_mask(ChannelSpec("bursty", 1.0, 0.1, math.sqrt(2)), (n,), seed=(93, 1, 0)).mean())
    elapsed = time.perf_counter() - start
    ok = abs(var - 1) <= 0.01 and abs(power - 1) <= 0.02 and abs(frac - 0.1) <= 0.005 and elapsed < 60
    record(acceptance_results, 9, ok, f"AWGN var {var:.4f}, E[h^2] {power:.4f}, burst fraction {frac:.4f}, "
                                      f"{elapsed:.2f}s")
    assert ok


# 10 -----------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_ste_binarization(acceptance_results, ste_run, curriculum_run, tmp_path):
    code = ste_run["code"]
    x = neural_codec(code).encode(all_messages(8))
    binary = bool(np.all(np.abs(x) == 1.0))
    point = [(0.0, ChannelSpec("awgn", 1.0))]
    kw = dict(min_blocks=100_000, max_blocks=100_000, seed=101)
    ste_ber = monte_carlo(neural_codec(code), point, **kw).rows[0].ber
    parent_ber = monte_carlo(neural_codec(curriculum_run["code"]), point, **kw).rows[0].ber
    prof = distance_profile(neural_codec(code).encode, 16, 8, num_pairs=10_000, seed=102)
    hist = tmp_path / "distance.csv"
    hist.write_text(prof.to_csv())
    produced = hist.is_file() and int(prof.counts.sum()) == 10_000
    ok = binary and ste_ber <= 2.5 * parent_ber and produced
    record(acceptance_results, 10, ok, f"codewords +-1: {binary}; BER {ste_ber:.4f} vs parent {parent_ber:.4f}; "
                                       f"histogram mean {prof.mean:.2f}")
    assert ok


# 11 -----------------------------------------------------------------------

def test_criterion_11_uncoded(acceptance_results):
    report = monte_carlo(uncoded_codec(10), [(0.0, ChannelSpec("awgn", 1.0))], min_blocks=100_000,
                         max_blocks=100_000, seed=111)
    ber = report.rows[0].ber
    ok = abs(ber - 0.158655) <= 0.002
    record(acceptance_results, 11, ok, f"BER {ber:.5f} over 10^6 bits (Q(1)=0.158655)")
    assert ok


# 12 -----------------------------------------------------------------------

def _cli_run(root: Path, monkeypatch) -> tuple[bytes, bytes]:
    root.mkdir()
    monkeypatch.chdir(root)
    train = ["n=8", "k=4", "ell=4", "enc_hidden=8", "dec_hidden=8", "depth=2", "epochs=2", "dec_steps=4",
             "enc_steps=2", "batch_size=64", "seed=12", "out_dir=train"]
    assert main(["train", *train]) == 0
    assert main(["eval", "checkpoint=train/checkpoint.json", "snrs=-2,0,2", "min_blocks=3000",
                 "max_blocks=3000", "eval_batch=1000", "seed=12", "out_dir=eval"]) == 0
    return (root / "train/checkpoint.json").read_bytes(), (root / "eval/report.csv").read_bytes()


def test_criterion_12_determinism_and_persistence(acceptance_results, tmp_path, monkeypatch, capsys):
    ckpt_a, report_a = _cli_run(tmp_path / "a", monkeypatch)
    ckpt_b, report_b = _cli_run(tmp_path / "b", monkeypatch)
    capsys.readouterr()
    code = NeuralCode.create(CodeLayout.build(4, 2, 4), seed=12)
    path = tmp_path / "code.json"
    save_checkpoint(path, code)
    loaded = load_checkpoint(path)
    u = make_rng(12).integers(0, 2, size=(100, 2))
    same_output = np.array_equal(dp_encode(code, u, training=False).numpy(),
                                 dp_encode(loaded, u, training=False).numpy())
    resaved = tmp_path / "again.json"
    save_checkpoint(resaved, loaded)
    same_bytes = resaved.read_bytes() == path.read_bytes()
    ok = ckpt_a == ckpt_b and report_a == report_b and same_output and same_bytes
    record(acceptance_results, 12, ok, f"checkpoints identical {ckpt_a == ckpt_b}, reports identical "
                                       f"{report_a == report_b}, round trip outputs {same_output}, bytes {same_bytes}")
    assert ok


# 13 -----------------------------------------------------------------------

def _phi(m):
    """Bit-channel mean function of the Gaussian approximation (Chung's fit)."""
    if m <= 0:
        return 1.0
    if m < 10:
        return math.exp(-0.4527 * m**0.86 + 0.0218)
    return math.sqrt(math.pi / m) * math.exp(-m / 4) * (1 - 10 / (7 * m))


def _phi_inv(y):
    return optimize.brentq(lambda m: _phi(m) - y, 1e-12, 1e4)


def gaussian_approx_error_probs(n: int, sigma: float) -> np.ndarray:
    """Genie-aided bit-channel error probabilities by density evolution, natural order."""
    means = [2 / sigma**2]
    while len(means) < n:
        nxt = []
        for m in means:
            nxt += [_phi_inv(1 - (1 - _phi(m)) ** 2), 2 * m]
        means = nxt
    return stats.norm.sf(np.sqrt(np.array(means) / 2))


def test_first_error_oracle_explains_observed_mode():
    """The least reliable information bit of Polar(16,8) is bit 9, which SC visits second."""
    lay = CodeLayout.build(16, 8, 4)
    p = gaussian_approx_error_probs(16, 1.12)
    assert set(np.argsort(p)[:8]) == set(lay.info)
    worst = int(np.argmax(p[list(lay.info)]))
    assert lay.info[worst] == 9 and worst == 1
    hist = first_error_histogram(polar_sc_codec(lay), ChannelSpec("awgn", 1.12), 20_000, seed=130)
    assert hist.mode == worst


@pytest.mark.xfail(strict=True, reason="for Polar(16,8) the least reliable information bit is the second one "
                                       "decoded, so the first-error mode sits at index 1")
def test_criterion_13_first_error_mode(acceptance_results):
    lay = CodeLayout.build(16, 8, 4)
    hist = first_error_histogram(polar_sc_codec(lay), ChannelSpec("awgn", 1.12), 50_000, seed=131)
    ok = hist.erroneous >= 10_000 and hist.mode == 0
    shares = ", ".join(f"{v:.3f}" for v in hist.distribution)
    record(acceptance_results, 13, ok, f"{hist.erroneous} erroneous blocks, mode at index {hist.mode}, "
                                       f"shares [{shares}]")
    assert ok
