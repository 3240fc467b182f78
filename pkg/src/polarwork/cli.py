"""Command-line workbench.

Every command takes ``key=value`` settings (see ``RunConfig``) and an
optional ``--config`` JSON file; settings on the command line win.  Output
goes to a run directory and one JSON summary line is printed on stdout.

    polarwork construct n=16 k=8 ell=4
    polarwork train stage=curriculum n=16 k=8 ell=4 epochs=20 seed=1
    polarwork eval checkpoint=runs/.../checkpoint.json snrs=-2,0,2
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .channels import snr_db_to_sigma
from .codec import NeuralCode, atomic_write, load_checkpoint, save_checkpoint
from .config import COMMANDS, RunConfig, load_config
from .errors import CheckpointError, ConfigurationError, InputError, TrainingDiverged
from .evaluation import (
    channel_points,
    distance_profile,
    first_error_histogram,
    monte_carlo,
    neural_codec,
    polar_ml_codec,
    polar_sc_codec,
    uncoded_codec,
)
from .polar import CodeLayout, construct_reliability, load_reliability_file
from .training import (
    KernelStore,
    adapt_to_channel,
    curriculum_stage1,
    curriculum_stage2_init,
    finetune_bler,
    finetune_ste,
    smooth,
    train_alternating,
)

log = logging.getLogger("polarwork")

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_DIVERGED = 4


def build_layout(cfg: RunConfig) -> CodeLayout:
    if cfg.construction == "file":
        order = load_reliability_file(cfg.sequence_file, cfg.n)
    else:
        order = construct_reliability(cfg.n, cfg.design_erasure)
    return CodeLayout.from_order(cfg.n, cfg.k, cfg.ell, order)


def run_dir(cfg: RunConfig) -> Path:
    if cfg.out_dir:
        path = Path(cfg.out_dir)
    else:
        path = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}_s{cfg.seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_checkpoint(cfg: RunConfig) -> NeuralCode:
    if not cfg.checkpoint:
        raise CheckpointError(f"command {cfg.command!r} needs checkpoint=<path>")
    if not Path(cfg.checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {cfg.checkpoint}")
    return load_checkpoint(cfg.checkpoint)


def _write(path: Path, text: str) -> str:
    atomic_write(path, text)
    return str(path)


def _save_code(out: Path, code: NeuralCode, cfg: RunConfig) -> str:
    code.config = cfg.embedded()
    path = out / "checkpoint.json"
    save_checkpoint(path, code)
    return str(path)


def _trace_csv(cfg: RunConfig, trace) -> str:
    return f"# {cfg.comment()}\n" + trace.to_csv()


def _final_loss(trace) -> float | None:
    dec = trace.losses("dec")
    values = dec if dec.size else trace.losses()
    return float(smooth(values)[-1]) if values.size else None


# commands ---------------------------------------------------------------

def cmd_construct(cfg: RunConfig) -> dict:
    layout = build_layout(cfg)
    print("I = {" + ",".join(str(i) for i in layout.info) + "}")
    return {"n": layout.n, "k": layout.k, "ell": layout.ell, "levels": layout.levels,
            "info": list(layout.info), "frozen": list(layout.frozen)}


def cmd_train(cfg: RunConfig) -> dict:
    out = run_dir(cfg)
    arch = cfg.architecture()
    summary: dict = {"run_dir": str(out), "stage": cfg.stage}
    store = None
    if cfg.stage in ("stage1", "curriculum"):
        traces: dict = {}
        store = curriculum_stage1(cfg.ell, cfg.train_plan(), arch, cfg.stage1_epochs, cfg.seed, traces)
        summary["kernel_store"] = _write(out / "kernels.json",
                                         json.dumps(store.to_dict(), sort_keys=True, indent=1) + "\n")
        for j, trace in traces.items():
            _write(out / f"stage1_j{j}_loss.csv", _trace_csv(cfg, trace))
        summary["stage1_final_loss"] = {str(j): _final_loss(t) for j, t in traces.items()}
        if cfg.stage == "stage1":
            return summary
    layout = build_layout(cfg)
    code = NeuralCode.create(layout, arch, seed=cfg.seed, norm_mode=cfg.norm_mode, parallel=cfg.parallel)
    if cfg.stage == "stage2":
        if not cfg.kernel_store or not Path(cfg.kernel_store).is_file():
            raise CheckpointError(f"stage2 needs an existing kernel_store, got {cfg.kernel_store!r}")
        store = KernelStore.load(cfg.kernel_store)
    if store is not None:
        _, audit = curriculum_stage2_init(code, store)
        summary["transplanted"] = len([a for a in audit if not a[2].startswith("fresh")])
    plan = cfg.train_plan()
    _, trace = train_alternating(code, plan, diagnostic_path=out / "diverged.json")
    summary["steps"] = len(trace)
    summary["final_loss"] = _final_loss(trace)
    summary["loss_trace"] = _write(out / "loss_trace.csv", _trace_csv(cfg, trace))
    summary["checkpoint"] = _save_code(out, code, cfg)
    return summary


def cmd_decode_only(cfg: RunConfig) -> dict:
    """Train neural decoders against the fixed classical polar encoder."""
    out = run_dir(cfg)
    layout = build_layout(cfg)
    # Zero kernel nets reduce the neural encoder to the classical polar map,
    # and per-codeword scaling leaves bipolar codewords untouched.
    code = NeuralCode.create(layout, cfg.architecture(), seed=cfg.seed, norm_mode="per_codeword",
                             zero_encoder=True, parallel=cfg.parallel)
    _, trace = train_alternating(code, cfg.train_plan(train_encoder=False),
                                 diagnostic_path=out / "diverged.json")
    return {"run_dir": str(out), "steps": len(trace), "final_loss": _final_loss(trace),
            "loss_trace": _write(out / "loss_trace.csv", _trace_csv(cfg, trace)),
            "checkpoint": _save_code(out, code, cfg)}


def cmd_finetune(cfg: RunConfig) -> dict:
    code = _require_checkpoint(cfg)
    out = run_dir(cfg)
    plan = cfg.train_plan()
    if cfg.method == "ste":
        _, trace = finetune_ste(code, plan)
    elif cfg.method == "bler":
        _, trace = finetune_bler(code, plan, "product")
    elif cfg.method == "highsnr":
        _, trace = finetune_bler(code, plan, "highsnr")
    else:
        _, trace = adapt_to_channel(code, plan, joint=cfg.joint)
    return {"run_dir": str(out), "method": cfg.method, "steps": len(trace),
            "final_loss": _final_loss(trace),
            "loss_trace": _write(out / "loss_trace.csv", _trace_csv(cfg, trace)),
            "checkpoint": _save_code(out, code, cfg)}


def build_codec(cfg: RunConfig):
    if cfg.codec == "neural":
        code = _require_checkpoint(cfg)
        return neural_codec(code, parallel=cfg.parallel and bool(code.parallel), feedback=cfg.feedback)
    if cfg.codec == "uncoded":
        return uncoded_codec(cfg.k)
    layout = build_layout(cfg)
    if cfg.codec == "polar_ml":
        return polar_ml_codec(layout)
    return polar_sc_codec(layout, "minsum" if cfg.codec == "polar_minsum" else "exact")


def _points(cfg: RunConfig):
    return channel_points(cfg.snrs, cfg.channel, cfg.burst_prob, cfg.burst_std, cfg.burst_relative)


def cmd_eval(cfg: RunConfig) -> dict:
    codec = build_codec(cfg)
    out = run_dir(cfg)
    report = monte_carlo(codec, _points(cfg), cfg.min_block_errors, cfg.max_blocks, cfg.seed,
                         cfg.eval_batch, cfg.min_blocks)
    path = _write(out / "report.csv", report.to_csv(cfg.comment()))
    return {"run_dir": str(out), "report": path, **report.summary()}


def cmd_analyze(cfg: RunConfig) -> dict:
    codec = build_codec(cfg)
    out = run_dir(cfg)
    if cfg.analysis == "distance":
        prof = distance_profile(codec.encode, codec.n, codec.k, cfg.num_pairs, cfg.seed, cfg.bins)
        path = _write(out / "distance.csv", prof.to_csv(cfg.comment()))
        return {"run_dir": str(out), "histogram": path, "codec": codec.name, **prof.summary()}
    spec = _points(cfg)[0][1]
    hist = first_error_histogram(codec, spec, cfg.num_blocks, cfg.seed, cfg.eval_batch)
    path = _write(out / "first_errors.csv", hist.to_csv(cfg.comment()))
    return {"run_dir": str(out), "histogram": path, "codec": codec.name,
            "snr_db": cfg.snrs[0], "sigma": snr_db_to_sigma(cfg.snrs[0]), **hist.summary()}


def cmd_inspect(cfg: RunConfig) -> dict:
    code = _require_checkpoint(cfg)
    nets = list(code.encoders.values()) + list(code.decoders.values()) + list(code.parallel.values())
    return {"checkpoint": cfg.checkpoint, "layout": code.layout.to_dict(),
            "info": list(code.layout.info), "architecture": code.to_dict()["architecture"],
            "norm": code.to_dict()["norm"], "binary": code.binary,
            "encoders": len(code.encoders), "decoders": len(code.decoders),
            "parallel": len(code.parallel),
            "parameters": int(sum(p.numel() for net in nets for p in net.parameters())),
            "config": code.config}


HANDLERS = {
    "construct": cmd_construct,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "decode-only": cmd_decode_only,
    "inspect": cmd_inspect,
}


def run(cfg: RunConfig) -> dict:
    summary = HANDLERS[cfg.command](cfg)
    return {"command": cfg.command, "seed": cfg.seed, **summary}


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarwork", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("settings", nargs="*", metavar="key=value",
                        help="RunConfig fields, e.g. n=16 k=8 ell=4 snrs=-2,0,2")
    parser.add_argument("--config", help="JSON file with RunConfig fields")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.command, args.config, args.settings)
        summary = run(cfg)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (diagnostic checkpoint: {exc.checkpoint_path})", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
