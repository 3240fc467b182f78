"""Small dense-network engine used for every kernel encoder and decoder.

Networks are plain lists of float64 tensors.  Gradients come from torch's
reverse-mode autograd; the optimizer, losses and the straight-through sign
are implemented here so their behaviour is pinned down exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigurationError, InputError, NumericError, UsageError

DTYPE = torch.float64


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class DenseNet:
    """Fully connected network: ReLU on hidden layers, linear output."""

    weights: list[torch.Tensor]
    biases: list[torch.Tensor]
    hidden_activation: str = "relu"
    output_activation: str = "linear"
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ConfigurationError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {tuple(w.shape)} / bias {tuple(b.shape)}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer gives {self.weights[i - 1].shape[0]}"
                )
        if self.hidden_activation != "relu" or self.output_activation != "linear":
            raise ConfigurationError("only relu hidden / linear output activations are supported")

    @property
    def fan_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.fan_in] + [w.shape[0] for w in self.weights]

    def parameters(self) -> list[torch.Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def requires_grad_(self, flag: bool = True) -> "DenseNet":
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def copy(self) -> "DenseNet":
        return DenseNet(
            [w.detach().clone() for w in self.weights],
            [b.detach().clone() for b in self.biases],
        )

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.fan_in:
            raise ConfigurationError(f"input width {x.shape[-1]} != fan_in {self.fan_in}")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.addmm(b, x, w.t()) if x.ndim == 2 else x @ w.t() + b
            if i < last:
                x = torch.relu(x)
        return x


def init_dense(sizes, rng: np.random.Generator) -> DenseNet:
    """Glorot-uniform weights, zero biases."""
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigurationError(f"bad layer sizes {sizes}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        weights.append(torch.from_numpy(w))
        biases.append(torch.zeros(fan_out, dtype=DTYPE))
    return DenseNet(weights, biases)


def zero_dense(sizes) -> DenseNet:
    return DenseNet(
        [torch.zeros(o, i, dtype=DTYPE) for i, o in zip(sizes[:-1], sizes[1:])],
        [torch.zeros(o, dtype=DTYPE) for o in sizes[1:]],
    )


def mlp_sizes(fan_in: int, fan_out: int, hidden: int, depth: int) -> list[int]:
    """Layer widths for `depth` hidden layers of width `hidden`."""
    return [fan_in] + [hidden] * depth + [fan_out]


class GradientTape:
    """Records one forward pass so that `net_backward` can run exactly once."""

    def __init__(self):
        self.net = None
        self.version = None
        self.inputs = None
        self.outputs = None
        self.consumed = False

    @property
    def ready(self) -> bool:
        return self.outputs is not None and not self.consumed


def net_forward(net: DenseNet, inputs, tape: GradientTape | None = None) -> torch.Tensor:
    x = as_tensor(inputs)
    if x.ndim != 2 or x.shape[1] != net.fan_in:
        raise ConfigurationError(f"expected [batch x {net.fan_in}] input, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericError("non-finite network input")
    if tape is None:
        with torch.no_grad():
            return net(x)
    if tape.outputs is not None:
        raise UsageError("tape already holds a forward pass")
    x = x.detach().clone().requires_grad_(True)
    params = [p.detach().requires_grad_(True) for p in net.parameters()]
    shadow = DenseNet(params[0::2], params[1::2])
    out = shadow(x)
    tape.net, tape.version = net, net.version
    tape.inputs, tape.params, tape.outputs = x, params, out
    return out.detach()


def net_backward(net: DenseNet, tape: GradientTape, output_grad):
    """Returns ``(param_grads, input_grad)``; param_grads alternate weight, bias."""
    if tape.consumed:
        raise UsageError("gradient tape already consumed")
    if tape.outputs is None or tape.net is not net or tape.version != net.version:
        raise UsageError("tape does not belong to this network state")
    g = as_tensor(output_grad)
    if g.shape != tape.outputs.shape:
        raise ConfigurationError(f"output_grad shape {tuple(g.shape)} != {tuple(tape.outputs.shape)}")
    grads = torch.autograd.grad(tape.outputs, tape.params + [tape.inputs], grad_outputs=g, allow_unused=True)
    grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(tape.params + [tape.inputs], grads)]
    tape.consumed = True
    return grads[:-1], grads[-1]


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update, applied in place."""
    if len(params) != len(grads):
        raise ConfigurationError("params/grads length mismatch")
    if not state.m:
        state.m = [torch.zeros_like(p, dtype=DTYPE) for p in params]
        state.v = [torch.zeros_like(p, dtype=DTYPE) for p in params]
    if len(state.m) != len(params):
        raise ConfigurationError("optimizer state built for different parameters")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                continue
            if g.shape != p.shape or m.shape != p.shape:
                raise ConfigurationError(f"shape mismatch {tuple(g.shape)} vs {tuple(p.shape)}")
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


def bce_with_logits(logits, targets):
    """Mean over the batch of the per-message summed binary cross entropy.

    A logit is log(P[bit=1] / P[bit=0]).  Returns ``(loss, grad)`` where
    ``loss`` keeps the autograd graph and ``grad`` is d loss / d logits.
    """
    L = as_tensor(logits)
    u = as_tensor(targets)
    if u.shape != L.shape:
        raise InputError(f"targets {tuple(u.shape)} vs logits {tuple(L.shape)}")
    if not bool(((u == 0) | (u == 1)).all()):
        raise InputError("targets must be 0/1")
    batch = L.shape[0] if L.ndim > 1 else 1
    per_bit = torch.clamp(L, min=0) - L * u + torch.log1p(torch.exp(-L.abs()))
    loss = per_bit.sum() / batch
    grad = (torch.sigmoid(L.detach()) - u) / batch
    return loss, grad


class _SignSTE(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


def ste_sign(x) -> torch.Tensor:
    """Sign with sign(0)=+1 forward; clipped-identity gradient backward."""
    return _SignSTE.apply(as_tensor(x))
