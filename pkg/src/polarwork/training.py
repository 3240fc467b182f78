"""Alternating encoder/decoder training, kernel curriculum and fine-tuning."""
from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .channels import ChannelSpec, make_rng, sample_noise, snr_db_to_sigma
from .codec import Architecture, NeuralCode, atomic_write, save_checkpoint
from .errors import ConfigurationError, TrainingDiverged
from .nn import DTYPE, AdamState, DenseNet, adam_step, bce_with_logits
from .polar import CodeLayout, construct_reliability

log = logging.getLogger(__name__)

PHASE_ID = {"dec": 1, "enc": 2}
STALL_GRAD = 1e-12
STALL_STEPS = 100


@dataclass
class TrainPlan:
    """Hyperparameters of one alternating-optimization run.

    Defaults are the desk-scale preset; ``TrainPlan.large_scale()`` gives the
    full-size schedule (batch 20000, 2000 epochs).
    """

    batch_size: int = 512
    epochs: int = 150
    dec_steps: int = 100
    enc_steps: int = 10
    snr_enc: float = 0.0
    snr_dec: float = -2.0
    lr_enc: float = 1e-4
    lr_dec: float = 1e-4
    channel: str = "awgn"
    burst_prob: float = 0.0
    burst_std: float = 0.0
    burst_relative: bool = False
    seed: int = 0
    accumulation: int = 1
    train_encoder: bool = True
    train_decoder: bool = True
    decoder: str = "sc"
    loss: str = "bce"

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ConfigurationError("batch_size and accumulation must be positive")
        if min(self.epochs, self.dec_steps, self.enc_steps) < 0:
            raise ConfigurationError("step counts must be non-negative")
        if self.decoder not in ("sc", "parallel"):
            raise ConfigurationError("decoder must be 'sc' or 'parallel'")
        if self.loss not in ("bce", "bler_product"):
            raise ConfigurationError("loss must be 'bce' or 'bler_product'")
        if min(self.lr_enc, self.lr_dec) <= 0:
            raise ConfigurationError("learning rates must be positive")
        self.channel_spec(1.0)

    @classmethod
    def large_scale(cls, **kw) -> "TrainPlan":
        base = dict(batch_size=20000, epochs=2000, dec_steps=200, enc_steps=20,
                    snr_enc=0.0, snr_dec=-2.0, lr_enc=1e-4, lr_dec=1e-4)
        base.update(kw)
        return cls(**base)

    def channel_spec(self, sigma: float) -> ChannelSpec:
        sb = self.burst_std * sigma if self.burst_relative else self.burst_std
        return ChannelSpec(self.channel, sigma, self.burst_prob, sb)

    @property
    def total_steps(self) -> int:
        per = (self.dec_steps if self.train_decoder else 0) + (self.enc_steps if self.train_encoder else 0)
        return self.epochs * per

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TraceRow:
    step: int
    phase: str
    loss: float


@dataclass
class LossTrace:
    rows: list[TraceRow] = field(default_factory=list)

    def append(self, step, phase, loss):
        self.rows.append(TraceRow(step, phase, float(loss)))

    def losses(self, phase: str | None = None) -> np.ndarray:
        return np.array([r.loss for r in self.rows if phase is None or r.phase == phase])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "phase", "loss"])
        for r in self.rows:
            w.writerow([r.step, r.phase, repr(r.loss)])
        return buf.getvalue()

    def __len__(self):
        return len(self.rows)


def smooth(values, window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def bler_product_loss(logits: torch.Tensor, u) -> torch.Tensor:
    """1 - prod_i P[bit i correct], averaged over the batch."""
    u = torch.as_tensor(np.asarray(u), dtype=DTYPE)
    align = 2 * u - 1  # +1 where the bit is 1, matching the logit sign convention
    log_correct = -torch.nn.functional.softplus(-align * logits).sum(dim=1)
    return (1 - torch.exp(log_correct)).mean()


def _loss(plan: TrainPlan, logits, u):
    if plan.loss == "bler_product":
        return bler_product_loss(logits, u)
    return bce_with_logits(logits, torch.as_tensor(np.asarray(u), dtype=DTYPE))[0]


def _group(code: NeuralCode, phase: str, plan: TrainPlan):
    if phase == "enc":
        return code.encoder_parameters()
    return code.decoder_parameters(plan.decoder)


def _bump(code: NeuralCode):
    for net in list(code.encoders.values()) + list(code.decoders.values()) + list(code.parallel.values()):
        net.version += 1


def training_step(code: NeuralCode, plan: TrainPlan, phase: str, step: int, state: AdamState) -> tuple[float, float]:
    """One optimizer step; returns (loss, gradient norm)."""
    sigma = snr_db_to_sigma(plan.snr_dec if phase == "dec" else plan.snr_enc)
    spec = plan.channel_spec(sigma)
    code.set_trainable(encoder=phase == "enc", decoder=phase == "dec")
    params = _group(code, phase, plan)
    for p in params:
        p.grad = None
    rng = make_rng(plan.seed, PHASE_ID[phase], step)
    # With the encoder frozen the deployed code is fixed: train the decoder on
    # eval-mode codewords and leave the running statistics alone.
    frozen_code = not plan.train_encoder and code.norm.updates > 0
    total = 0.0
    for _ in range(plan.accumulation):
        u = rng.integers(0, 2, size=(plan.batch_size, code.layout.k))
        if phase == "enc":
            x = code.encode(u, training=True)
        else:
            with torch.no_grad():
                x = code.encode(u, training=not frozen_code)
        h, z = sample_noise(spec, tuple(x.shape), rng)
        y = x if h is None else x * torch.from_numpy(h)
        y = y + torch.from_numpy(z)
        logits, _ = code.decode(y, feedback="soft", parallel=plan.decoder == "parallel")
        loss = _loss(plan, logits, u)
        (loss / plan.accumulation).backward()
        total += float(loss.detach())
    loss = total / plan.accumulation
    grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
    gnorm = float(torch.sqrt(sum((g * g).sum() for g in grads))) if grads else 0.0
    if np.isfinite(loss) and np.isfinite(gnorm):
        adam_step(params, grads, state)
        _bump(code)
    for p in params:
        p.grad = None
    code.set_trainable(False, False)
    return loss, gnorm


def train_alternating(code: NeuralCode, plan: TrainPlan, trace: LossTrace | None = None,
                      diagnostic_path=None, enc_state: AdamState | None = None,
                      dec_state: AdamState | None = None, progress=None):
    """Alternate decoder-only and encoder-only Adam phases, in place.

    Returns ``(code, trace)``.  A NaN loss restores the last epoch's
    parameters, writes them to ``diagnostic_path`` when given, and raises
    ``TrainingDiverged``.
    """
    trace = trace if trace is not None else LossTrace()
    enc_state = enc_state or AdamState(lr=plan.lr_enc)
    dec_state = dec_state or AdamState(lr=plan.lr_dec)
    step = len(trace)
    stall = 0
    phases = []
    if plan.train_decoder:
        phases.append(("dec", plan.dec_steps, dec_state))
    if plan.train_encoder:
        phases.append(("enc", plan.enc_steps, enc_state))
    for epoch in range(plan.epochs):
        good = code.copy()
        for phase, count, state in phases:
            for _ in range(count):
                loss, gnorm = training_step(code, plan, phase, step, state)
                if not np.isfinite(loss):
                    _restore(code, good)
                    if diagnostic_path is not None:
                        save_checkpoint(diagnostic_path, code)
                    raise TrainingDiverged(
                        f"loss became NaN at step {step} (epoch {epoch}, phase {phase})", diagnostic_path)
                trace.append(step, phase, loss)
                stall = stall + 1 if gnorm < STALL_GRAD else 0
                if stall == STALL_STEPS:
                    warnings.warn(f"gradient norm below {STALL_GRAD} for {STALL_STEPS} steps "
                                  f"(step {step}); loss may be saturated", RuntimeWarning, stacklevel=2)
                step += 1
        if progress is not None:
            progress(epoch, trace)
    return code, trace


def _restore(code: NeuralCode, good: NeuralCode):
    code.encoders, code.decoders, code.parallel = good.encoders, good.decoders, good.parallel
    code.norm = good.norm


# curriculum -------------------------------------------------------------

@dataclass
class CurriculumPlan:
    stage1_epochs: int = 20
    stage1: TrainPlan = field(default_factory=lambda: TrainPlan(epochs=20))
    stage2: TrainPlan = field(default_factory=TrainPlan)

    def to_dict(self):
        return {"stage1_epochs": self.stage1_epochs, "stage1": self.stage1.to_dict(),
                "stage2": self.stage2.to_dict()}


class KernelStore(dict):
    """Pretrained single-kernel codes keyed by (ell, j)."""

    def to_dict(self):
        return {f"{ell},{j}": code.to_dict() for (ell, j), code in sorted(self.items())}

    @classmethod
    def from_dict(cls, doc):
        out = cls()
        for key, value in doc.items():
            ell, j = (int(v) for v in key.split(","))
            out[(ell, j)] = NeuralCode.from_dict(value)
        return out

    def save(self, path):
        atomic_write(path, json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def curriculum_stage1(ell: int, plan: TrainPlan, arch: Architecture | None = None,
                      epochs_per_rate: int | None = None, seed: int | None = None,
                      traces: dict | None = None) -> KernelStore:
    """Train (ell, j, ell) kernel codes for j = 1..ell, carrying weights forward."""
    seed = plan.seed if seed is None else seed
    plan = replace(plan, epochs=epochs_per_rate if epochs_per_rate is not None else plan.epochs)
    order = construct_reliability(ell)
    store = KernelStore()
    prev = None
    for j in range(1, ell + 1):
        layout = CodeLayout.from_order(ell, j, ell, order)
        code = NeuralCode.create(layout, arch, seed=seed + j)
        if prev is not None:
            code.encoders[(1, 0)] = prev.encoders[(1, 0)].copy()
            for key, net in prev.decoders.items():
                code.decoders[key] = net.copy()
            code.norm = replace(prev.norm)
        _, trace = train_alternating(code, replace(plan, seed=plan.seed * 1000 + j))
        if traces is not None:
            traces[j] = trace
        store[(ell, j)] = code.copy()
        prev = code
        log.info("stage1 ell=%d j=%d final loss %.4f", ell, j, trace.rows[-1].loss if trace.rows else float("nan"))
    return store


def _transplant(net: DenseNet, width: int) -> DenseNet:
    """Copy a sub-decoder, padding or trimming first-layer feedback columns."""
    out = net.copy()
    w = out.weights[0]
    if w.shape[1] == width:
        return out
    new = torch.zeros(w.shape[0], width, dtype=DTYPE)
    keep = min(width, w.shape[1])
    new[:, :keep] = w[:, :keep]
    out.weights[0] = new
    return out


def curriculum_stage2_init(code: NeuralCode, store: KernelStore):
    """Seed every kernel of ``code`` from the pretrained store, in place.

    Returns ``(code, audit)`` where audit lists ``(d, b, source)``.
    """
    sh = code.shape
    audit = []
    for d in range(1, sh.depth + 1):
        ell = sh.ell(d)
        for b in sh.nodes(d):
            active = sh.active_children(d, b)
            i = len(active)
            if i == 0:
                audit.append((d, b, "fresh (no information)"))
                continue
            if (ell, i) not in store:
                if ell != code.layout.ell:
                    audit.append((d, b, f"fresh (root kernel size {ell})"))
                    continue
                raise ConfigurationError(f"kernel store has no entry for ({ell}, {i})")
            src = store[(ell, i)]
            g = src.encoders[(1, 0)]
            if g.sizes != code.encoders[(d, b)].sizes:
                raise ConfigurationError(f"pretrained encoder {g.sizes} != node ({d},{b}) {code.encoders[(d, b)].sizes}")
            code.encoders[(d, b)] = g.copy()
            slots = src.shape.active_children(1, 0)
            for p, a in zip(slots, active):
                code.decoders[(d, b, a)] = _transplant(src.decoders[(1, 0, p)], ell + a)
            audit.append((d, b, f"g({ell},{i}) slots {slots}->{active}"))
    code.meta["curriculum"] = [list(map(str, a)) for a in audit]
    code.validate()
    return code, audit


def train_curriculum(layout: CodeLayout, plan: CurriculumPlan, arch: Architecture | None = None,
                     seed: int = 0, store: KernelStore | None = None):
    """Stage 1 (unless a store is given) followed by stage-2 init and training."""
    if store is None:
        store = curriculum_stage1(layout.ell, plan.stage1, arch, plan.stage1_epochs, seed)
    code = NeuralCode.create(layout, arch, seed=seed)
    code, audit = curriculum_stage2_init(code, store)
    code, trace = train_alternating(code, plan.stage2)
    return code, trace, store, audit


# fine-tuning ------------------------------------------------------------

def finetune_ste(code: NeuralCode, plan: TrainPlan):
    """Continue alternating training with binarized (sign + STE) codewords."""
    code.binary = True
    return train_alternating(code, plan)


def highsnr_plan(plan: TrainPlan, reference_batch: int = 20000) -> TrainPlan:
    """Large-batch, higher-SNR decoder preset scaled to the run's batch size."""
    ratio = plan.batch_size / reference_batch
    return replace(plan, batch_size=max(1, int(round(200_000 * ratio))), snr_dec=-1.0,
                   lr_dec=plan.lr_dec / 10, train_encoder=False, loss="bce")


def finetune_bler(code: NeuralCode, plan: TrainPlan, method: str = "product"):
    """Decoder-only fine-tuning on the product BLER surrogate or high-SNR BCE."""
    if method == "product":
        p = replace(plan, train_encoder=False, loss="bler_product")
    elif method == "highsnr":
        p = highsnr_plan(plan)
    else:
        raise ConfigurationError(f"unknown BLER fine-tune method {method!r}")
    return train_alternating(code, p)


def adapt_to_channel(code: NeuralCode, plan: TrainPlan, joint: bool = False):
    """Fine-tune on the plan's (typically non-AWGN) channel; decoder only unless joint."""
    return train_alternating(code, replace(plan, train_encoder=joint))
