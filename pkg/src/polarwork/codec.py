"""Neural Plotkin-tree codes: encoder, sequential and parallel-leaf decoders.

Tree conventions.  Level 1 holds the leaves; level ``depth`` is the root.
Node ``(d, b)`` covers message positions ``[b * s_d, (b + 1) * s_d)`` where
``s_d`` is the product of the kernel sizes of levels 1..d, and its children
are the level ``d-1`` nodes ``ell_d * b + j``.  A node's kernel is applied
coordinatewise: coordinate ``i`` of its children forms the tuple ``t`` and
``g(t) + plotkin(t)`` is scattered back to coordinate ``i`` of every output
sub-block.

Bits travel as bipolar values (0 -> +1, 1 -> -1).  Decoder messages are
LLR-like (positive favours 0); the logit for bit = 1 is their negation.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .channels import make_rng
from .errors import CheckpointError, ConfigurationError, InputError, NumericError
from .nn import DTYPE, DenseNet, init_dense, mlp_sizes, ste_sign, zero_dense
from .polar import CodeLayout, kernel_matrix

FORMAT = "polarwork-checkpoint"
FORMAT_VERSION = 1
NORM_MODES = ("batch", "running", "per_codeword")
VAR_FLOOR = 1e-12


@dataclass
class Architecture:
    enc_hidden: int = 64
    dec_hidden: int = 128
    depth: int = 3
    parallel_hidden: int = 64
    pass_through_last: bool = False


@dataclass
class PowerNorm:
    """Scalar power-normalization statistics for the encoder output."""

    mode: str = "batch"
    momentum: float = 0.99
    running_mean: float = 0.0
    running_var: float = 1.0
    updates: int = 0

    def __post_init__(self):
        if self.mode not in NORM_MODES:
            raise ConfigurationError(f"normalization mode must be one of {NORM_MODES}")

    def update(self, mean: float, var: float):
        if self.updates == 0:
            self.running_mean, self.running_var = mean, var
        else:
            a = self.momentum
            self.running_mean = a * self.running_mean + (1 - a) * mean
            self.running_var = a * self.running_var + (1 - a) * var
        self.updates += 1

    def apply(self, x: torch.Tensor, training: bool) -> torch.Tensor:
        n = x.shape[1]
        if self.mode == "per_codeword":
            energy = x.pow(2).sum(dim=1, keepdim=True)
            if bool((energy < VAR_FLOOR).any()):
                raise NumericError("zero-energy codeword cannot be normalized")
            # exact identity on codewords that already have energy n
            return x * torch.sqrt(n / energy)
        if training:
            mean = x.mean()
            var = x.var(unbiased=False)
            if float(var.detach()) < VAR_FLOOR:
                raise NumericError("batch variance below floor; cannot normalize power")
            self.update(float(mean.detach()), float(var.detach()))
            return (x - mean) / var.sqrt()
        return (x - self.running_mean) / self.running_var ** 0.5


class TreeShape:
    """Static geometry of the Plotkin tree for a layout."""

    def __init__(self, layout: CodeLayout):
        self.layout = layout
        self.levels = layout.levels  # kernel size per level, leaves first
        self.depth = len(self.levels)
        self.block = [1]
        for ell in self.levels:
            self.block.append(self.block[-1] * ell)
        mask = layout.info_mask
        self._info = {}
        for d in range(0, self.depth + 1):
            s = self.block[d]
            for b in range(layout.n // s):
                self._info[(d, b)] = int(mask[b * s:(b + 1) * s].sum())

    def ell(self, d: int) -> int:
        return self.levels[d - 1]

    def num_nodes(self, d: int) -> int:
        return self.layout.n // self.block[d]

    def nodes(self, d: int):
        return range(self.num_nodes(d))

    def info_count(self, d: int, b: int) -> int:
        return self._info[(d, b)]

    def child_has_info(self, d: int, b: int, j: int) -> bool:
        return self._info[(d - 1, self.ell(d) * b + j)] > 0

    def active_children(self, d: int, b: int) -> list[int]:
        return [j for j in range(self.ell(d)) if self.child_has_info(d, b, j)]

    def span(self, d: int, b: int) -> slice:
        s = self.block[d]
        return slice(b * s, (b + 1) * s)


def root_kernel_matrix(r: int) -> np.ndarray:
    """G_r for any r >= 2: the leading r x r block of the next Kronecker power.

    For powers of two this is the Kronecker power itself; otherwise it is
    still lower-triangular with a unit diagonal, hence invertible.
    """
    size = 2
    while size < r:
        size *= 2
    return kernel_matrix(size)[:r, :r]


@lru_cache(maxsize=None)
def _plotkin_columns(ell: int) -> tuple[tuple[int, ...], ...]:
    G = root_kernel_matrix(ell)
    return tuple(tuple(np.nonzero(G[:, j])[0].tolist()) for j in range(ell))


def _plotkin_butterfly(t: torch.Tensor) -> torch.Tensor:
    """Power-of-two Plotkin features in log2(ell) stages of (a, b) -> (a*b, b)."""
    lead, ell = t.shape[:-1], t.shape[-1]
    half = ell // 2
    while half:
        pairs = t.reshape(*lead, ell // (2 * half), 2, half)
        t = torch.stack((pairs[..., 0, :] * pairs[..., 1, :], pairs[..., 1, :]), dim=-2).reshape(*lead, ell)
        half //= 2
    return t


def bipolar_plotkin_features(t, G=None):
    """Bipolar Plotkin transform along the last axis: out_j = prod_{i: G[i,j]=1} t_i."""
    is_torch = isinstance(t, torch.Tensor)
    ell = t.shape[-1]
    if G is None and is_torch and ell & (ell - 1) == 0:
        return _plotkin_butterfly(t)
    if G is None:
        cols = _plotkin_columns(ell)
    else:
        G = np.asarray(G)
        if G.shape != (ell, ell):
            raise ConfigurationError(f"kernel {G.shape} does not match input width {ell}")
        cols = tuple(tuple(np.nonzero(G[:, j])[0].tolist()) for j in range(ell))
    if is_torch:
        return torch.stack([t[..., list(c)].prod(dim=-1) for c in cols], dim=-1)
    t = np.asarray(t, dtype=float)
    return np.stack([t[..., list(c)].prod(axis=-1) for c in cols], axis=-1)


def embed_message(layout: CodeLayout, u) -> np.ndarray:
    """Bipolar source vector: 1-2u on the information set, +1 when frozen."""
    u = np.asarray(u)
    single = u.ndim == 1
    u2 = np.atleast_2d(u)
    if u2.shape[1] != layout.k:
        raise InputError(f"message length {u2.shape[1]} != k={layout.k}")
    m = np.ones((u2.shape[0], layout.n))
    m[:, layout.info_mask] = 1.0 - 2.0 * u2
    return m[0] if single else m


def _key(*parts) -> str:
    return ",".join(str(p) for p in parts)


def _unkey(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(","))


class NeuralCode:
    """All kernel networks of one code plus its normalization statistics.

    ``encoders[(d, b)]`` maps ell_d -> ell_d.  ``decoders[(d, b, j)]`` maps
    ell_d + j -> 1 and exists only for children holding information bits.
    ``parallel[b]`` is the optional one-shot leaf decoder (ell -> ell).
    """

    def __init__(self, layout, arch=None, norm=None, seed=0):
        self.layout = layout
        self.arch = arch or Architecture()
        self.norm = norm or PowerNorm()
        self.seed = int(seed)
        self.shape = TreeShape(layout)
        self.encoders: dict[tuple[int, int], DenseNet] = {}
        self.decoders: dict[tuple[int, int, int], DenseNet] = {}
        self.parallel: dict[int, DenseNet] = {}
        self.binary = False
        self.meta: dict = {}
        self.config: dict | None = None

    # construction -----------------------------------------------------

    @classmethod
    def create(cls, layout, arch=None, seed=0, norm_mode="batch", zero_encoder=False,
               parallel=False, encoder_init="glorot"):
        code = cls(layout, arch, PowerNorm(mode=norm_mode), seed)
        sh, a = code.shape, code.arch
        for d in range(1, sh.depth + 1):
            ell = sh.ell(d)
            for b in sh.nodes(d):
                sizes = mlp_sizes(ell, ell, a.enc_hidden, a.depth)
                if zero_encoder:
                    code.encoders[(d, b)] = zero_dense(sizes)
                else:
                    code.encoders[(d, b)] = code.fresh_encoder(d, b)
                    if encoder_init == "zero_output":
                        net = code.encoders[(d, b)]
                        net.weights[-1].zero_()
                for j in sh.active_children(d, b):
                    code.decoders[(d, b, j)] = code.fresh_decoder(d, b, j)
        if parallel:
            code.add_parallel()
        return code

    def fresh_encoder(self, d, b) -> DenseNet:
        ell = self.shape.ell(d)
        return init_dense(mlp_sizes(ell, ell, self.arch.enc_hidden, self.arch.depth),
                          make_rng(self.seed, 1, d, b))

    def fresh_decoder(self, d, b, j) -> DenseNet:
        ell = self.shape.ell(d)
        return init_dense(mlp_sizes(ell + j, 1, self.arch.dec_hidden, self.arch.depth),
                          make_rng(self.seed, 2, d, b, j))

    def add_parallel(self):
        ell = self.shape.ell(1)
        for b in self.shape.nodes(1):
            if self.shape.info_count(1, b):
                self.parallel[b] = init_dense(
                    mlp_sizes(ell, ell, self.arch.parallel_hidden, self.arch.depth),
                    make_rng(self.seed, 3, b))

    def copy(self) -> "NeuralCode":
        out = NeuralCode(self.layout, Architecture(**asdict(self.arch)), PowerNorm(**asdict(self.norm)), self.seed)
        out.encoders = {k: v.copy() for k, v in self.encoders.items()}
        out.decoders = {k: v.copy() for k, v in self.decoders.items()}
        out.parallel = {k: v.copy() for k, v in self.parallel.items()}
        out.binary = self.binary
        out.meta = json.loads(json.dumps(self.meta))
        out.config = json.loads(json.dumps(self.config))
        return out

    # parameters -------------------------------------------------------

    def encoder_parameters(self) -> list[torch.Tensor]:
        return [p for k in sorted(self.encoders) for p in self.encoders[k].parameters()]

    def decoder_parameters(self, which: str = "sc") -> list[torch.Tensor]:
        nets = []
        for k in sorted(self.decoders):
            if which == "parallel" and k[0] == 1 and k[1] in self.parallel:
                continue
            nets.append(self.decoders[k])
        if which == "parallel":
            nets += [self.parallel[b] for b in sorted(self.parallel)]
        return [p for net in nets for p in net.parameters()]

    def set_trainable(self, encoder: bool, decoder: bool):
        for net in self.encoders.values():
            net.requires_grad_(encoder)
        for net in list(self.decoders.values()) + list(self.parallel.values()):
            net.requires_grad_(decoder)

    def validate(self):
        sh, a = self.shape, self.arch
        for d in range(1, sh.depth + 1):
            ell = sh.ell(d)
            for b in sh.nodes(d):
                net = self.encoders.get((d, b))
                if net is None or net.fan_in != ell or net.fan_out != ell:
                    raise ConfigurationError(f"encoder ({d},{b}) missing or not {ell}->{ell}")
                for j in sh.active_children(d, b):
                    f = self.decoders.get((d, b, j))
                    if f is None or f.fan_in != ell + j or f.fan_out != 1:
                        raise ConfigurationError(f"decoder ({d},{b},{j}) missing or not {ell + j}->1")
        extra = set(self.decoders) - {(d, b, j) for d in range(1, sh.depth + 1) for b in sh.nodes(d)
                                      for j in sh.active_children(d, b)}
        if extra:
            raise ConfigurationError(f"unexpected decoders {sorted(extra)}")
        ell = sh.ell(1)
        for b, net in self.parallel.items():
            if sh.info_count(1, b) == 0 or net.fan_in != ell or net.fan_out != ell:
                raise ConfigurationError(f"parallel leaf decoder {b} invalid")
        if a.depth < 1:
            raise ConfigurationError("network depth must be >= 1")

    # encoding ---------------------------------------------------------

    def kernel(self, d: int, b: int, t: torch.Tensor) -> torch.Tensor:
        out = self.encoders[(d, b)](t) + bipolar_plotkin_features(t)
        if self.arch.pass_through_last:
            out = torch.cat([out[..., :-1], t[..., -1:]], dim=-1)
        return out

    def encode_subtree(self, d: int, b: int, leaves: torch.Tensor) -> torch.Tensor:
        """Run levels 1..d of the subtree rooted at (d, b) on its leaf values."""
        sh = self.shape
        x = leaves
        batch = x.shape[0]
        for e in range(1, d + 1):
            ell, child = sh.ell(e), sh.block[e - 1]
            per = sh.block[d] // sh.block[e]
            first = b * per
            blocks = x.reshape(batch, per, ell, child)
            outs = [self.combine(e, first + q, blocks[:, q]) for q in range(per)]
            x = torch.cat(outs, dim=1) if per > 1 else outs[0]
        return x

    def combine(self, d: int, b: int, children: torch.Tensor) -> torch.Tensor:
        """Apply kernel (d, b) coordinatewise to child blocks (batch x ell x child)."""
        batch, ell, child = children.shape
        t = children.transpose(1, 2).reshape(batch * child, ell)
        o = self.kernel(d, b, t).reshape(batch, child, ell).transpose(1, 2)
        return o.reshape(batch, ell * child)

    def encode(self, u, training: bool = False, binarize: bool | None = None) -> torch.Tensor:
        """Codewords for a batch of messages (rows of bits)."""
        m = torch.as_tensor(np.atleast_2d(embed_message(self.layout, u)), dtype=DTYPE)
        x = self.encode_subtree(self.shape.depth, 0, m)
        binarize = self.binary if binarize is None else binarize
        if binarize:
            if self.norm.mode != "per_codeword":
                x = self.norm.apply(x, training)
            return ste_sign(x)
        return self.norm.apply(x, training)

    # decoding ---------------------------------------------------------

    def decode(self, y, feedback: str = "hard", parallel: bool = False, forced=None, trace=None):
        """Returns ``(logits [batch x k], u_hat)``.

        ``forced`` (bits, batch x k) replaces decisions in the feedback path,
        i.e. genie-aided decoding.  ``trace`` collects one tuple per network
        call: ('f', d, b, j, width) or ('leaf', b).
        """
        if feedback not in ("soft", "hard"):
            raise InputError("feedback must be 'soft' or 'hard'")
        y = torch.as_tensor(np.asarray(y, dtype=np.float64)) if not isinstance(y, torch.Tensor) else y.to(DTYPE)
        if y.ndim == 1:
            y = y[None]
        if y.shape[1] != self.layout.n:
            raise InputError(f"received length {y.shape[1]} != n={self.layout.n}")
        if not bool(torch.isfinite(y).all()):
            raise NumericError("non-finite decoder input")
        if parallel:
            missing = [b for b in self.shape.nodes(1) if self.shape.info_count(1, b) and b not in self.parallel]
            if missing:
                raise ConfigurationError(f"no parallel leaf decoder for leaves {missing}")
        if forced is not None:
            forced = torch.as_tensor(np.atleast_2d(embed_message(self.layout, forced)), dtype=DTYPE)
        ctx = _DecodeContext(feedback, parallel, forced, trace)
        logits_full, _ = self._decode_node(self.shape.depth, 0, y, ctx)
        info = torch.as_tensor(np.flatnonzero(self.layout.info_mask))
        logits = logits_full[:, info]
        return logits, (logits > 0).to(torch.uint8)

    def _estimate(self, lam, ctx, pos):
        if ctx.forced is not None:
            return ctx.forced[:, pos]
        if ctx.feedback == "soft":
            return torch.tanh(lam / 2)
        return torch.where(lam >= 0, torch.ones_like(lam), -torch.ones_like(lam))

    def _decode_node(self, d, b, lam, ctx):
        sh = self.shape
        batch = lam.shape[0]
        ell = sh.ell(d)
        if d == 1:
            base = b * ell
            logits = torch.zeros(batch, ell, dtype=DTYPE)
            est = torch.ones(batch, ell, dtype=DTYPE)
            if sh.info_count(1, b) == 0:
                return logits, est
            mask = self.layout.info_mask
            if ctx.parallel:
                if ctx.trace is not None:
                    ctx.trace.append(("leaf", b))
                out = self.parallel[b](lam)
                cols_l, cols_e = [], []
                for j in range(ell):
                    if mask[base + j]:
                        cols_l.append(-out[:, j])
                        cols_e.append(self._estimate(out[:, j], ctx, base + j))
                    else:
                        cols_l.append(torch.zeros(batch, dtype=DTYPE))
                        cols_e.append(torch.ones(batch, dtype=DTYPE))
                return torch.stack(cols_l, 1), torch.stack(cols_e, 1)
            phis, cols_l = [], []
            for j in range(ell):
                if not mask[base + j]:
                    phis.append(torch.ones(batch, 1, dtype=DTYPE))
                    cols_l.append(torch.zeros(batch, 1, dtype=DTYPE))
                    continue
                inp = torch.cat([lam] + phis, dim=1) if phis else lam
                if ctx.trace is not None:
                    ctx.trace.append(("f", 1, b, j, inp.shape[1]))
                lj = self.decoders[(1, b, j)](inp)
                cols_l.append(-lj)
                phis.append(self._estimate(lj, ctx, base + j).reshape(batch, 1))
            return torch.cat(cols_l, 1), torch.cat(phis, 1)

        child = sh.block[d - 1]
        tup = lam.reshape(batch, ell, child).transpose(1, 2)  # batch x child x ell
        phis, logits_out, est_out = [], [], []
        for j in range(ell):
            c = ell * b + j
            if not sh.child_has_info(d, b, j):
                est_c = torch.ones(batch, child, dtype=DTYPE)
                logits_out.append(torch.zeros(batch, child, dtype=DTYPE))
            else:
                inp = torch.cat([tup] + [p.unsqueeze(-1) for p in phis], dim=-1) if phis else tup
                if ctx.trace is not None:
                    ctx.trace.append(("f", d, b, j, inp.shape[-1]))
                lj = self.decoders[(d, b, j)](inp.reshape(batch * child, ell + j)).reshape(batch, child)
                logit_c, est_c = self._decode_node(d - 1, c, lj, ctx)
                logits_out.append(logit_c)
            est_out.append(est_c)
            phis.append(self.encode_subtree(d - 1, c, est_c))
        return torch.cat(logits_out, 1), torch.cat(est_out, 1)

    # serialization ----------------------------------------------------

    def to_dict(self, config=None) -> dict:
        def net_dict(net):
            return {"weights": [w.detach().tolist() for w in net.weights],
                    "biases": [b.detach().tolist() for b in net.biases]}

        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "layout": self.layout.to_dict(),
            "architecture": asdict(self.arch),
            "norm": asdict(self.norm),
            "seed": self.seed,
            "binary": self.binary,
            "meta": self.meta,
            "config": config if config is not None else self.config,
            "encoders": {_key(*k): net_dict(v) for k, v in sorted(self.encoders.items())},
            "decoders": {_key(*k): net_dict(v) for k, v in sorted(self.decoders.items())},
            "parallel": {_key(k): net_dict(v) for k, v in sorted(self.parallel.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict, layout: CodeLayout | None = None) -> "NeuralCode":
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise CheckpointError("not a checkpoint document")
        if doc.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
        try:
            lay = CodeLayout.from_dict(doc["layout"])
            if layout is not None and lay != layout:
                raise ConfigurationError(f"checkpoint layout {lay} != requested {layout}")
            code = cls(lay, Architecture(**doc["architecture"]), PowerNorm(**doc["norm"]), doc["seed"])
            code.binary = bool(doc.get("binary", False))
            code.meta = doc.get("meta") or {}
            code.config = doc.get("config")

            def net(d):
                return DenseNet([torch.tensor(w, dtype=DTYPE).reshape(len(w), -1) for w in d["weights"]],
                                [torch.tensor(b, dtype=DTYPE).reshape(-1) for b in d["biases"]])

            code.encoders = {_unkey(k): net(v) for k, v in doc["encoders"].items()}
            code.decoders = {_unkey(k): net(v) for k, v in doc["decoders"].items()}
            code.parallel = {_unkey(k)[0]: net(v) for k, v in doc["parallel"].items()}
        except (KeyError, TypeError, ValueError, RuntimeError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise CheckpointError(f"malformed checkpoint: {exc}") from exc
        for n in list(code.encoders.values()) + list(code.decoders.values()) + list(code.parallel.values()):
            for p in n.parameters():
                if not bool(torch.isfinite(p).all()):
                    raise CheckpointError("checkpoint holds non-finite parameters")
        code.validate()
        return code


@dataclass
class _DecodeContext:
    feedback: str
    parallel: bool
    forced: torch.Tensor | None
    trace: list | None = field(default=None)


def dumps_checkpoint(code: NeuralCode, config=None) -> str:
    return json.dumps(code.to_dict(config), sort_keys=True, indent=1) + "\n"


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, code: NeuralCode, config=None):
    atomic_write(path, dumps_checkpoint(code, config))


def load_checkpoint(path, layout: CodeLayout | None = None) -> NeuralCode:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint parse error at offset {exc.pos}: {exc.msg}") from exc
    return NeuralCode.from_dict(doc, layout)


# functional aliases ---------------------------------------------------

def dp_encode(code: NeuralCode, u, training: bool = False) -> torch.Tensor:
    return code.encode(u, training=training, binarize=False)


def dp_binarize_forward(code: NeuralCode, u, training: bool = False) -> torch.Tensor:
    return code.encode(u, training=training, binarize=True)


def dp_decode_sc(code: NeuralCode, y, feedback: str = "hard", **kw):
    return code.decode(y, feedback=feedback, parallel=False, **kw)


def dp_decode_parallel(code: NeuralCode, y, feedback: str = "hard", **kw):
    return code.decode(y, feedback=feedback, parallel=True, **kw)
