"""Run configuration: one flat, schema-validated record per command."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .codec import Architecture
from .errors import ConfigurationError
from .training import CurriculumPlan, TrainPlan

COMMANDS = ("construct", "train", "finetune", "eval", "analyze", "decode-only", "inspect")

# Fields that say where output goes rather than what is computed; they are
# left out of the copy embedded in artifacts so reruns compare byte-for-byte.
LOCATION_FIELDS = ("out_dir",)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    command: Literal["construct", "train", "finetune", "eval", "analyze", "decode-only", "inspect"]
    seed: int = Field(0, ge=0)

    # layout and construction
    n: int = Field(16, ge=1)
    k: int = Field(8, ge=1)
    ell: int = Field(4, ge=2)
    construction: Literal["bhattacharyya", "file"] = "bhattacharyya"
    design_erasure: float = Field(0.5, gt=0.0, lt=1.0)
    sequence_file: Optional[str] = None

    # architecture
    enc_hidden: int = Field(64, ge=1)
    dec_hidden: int = Field(128, ge=1)
    depth: int = Field(3, ge=0)
    parallel_hidden: int = Field(64, ge=1)
    pass_through_last: bool = False
    norm_mode: Literal["batch", "running", "per_codeword"] = "batch"
    parallel: bool = False

    # training plan
    batch_size: int = Field(512, ge=1)
    epochs: int = Field(150, ge=0)
    dec_steps: int = Field(100, ge=0)
    enc_steps: int = Field(10, ge=0)
    snr_enc: float = 0.0
    snr_dec: float = -2.0
    lr_enc: float = Field(1e-4, gt=0.0)
    lr_dec: float = Field(1e-4, gt=0.0)
    accumulation: int = Field(1, ge=1)
    loss: Literal["bce", "bler_product"] = "bce"

    # channel (training and evaluation)
    channel: Literal["awgn", "rayleigh_fast", "bursty"] = "awgn"
    burst_prob: float = Field(0.0, ge=0.0, le=1.0)
    burst_std: float = Field(0.0, ge=0.0)
    burst_relative: bool = False

    # curriculum
    stage: Literal["direct", "stage1", "stage2", "curriculum"] = "direct"
    stage1_epochs: int = Field(20, ge=0)
    kernel_store: Optional[str] = None

    # fine-tuning
    method: Literal["ste", "bler", "highsnr", "channel"] = "ste"
    joint: bool = False

    # evaluation
    codec: Literal["neural", "polar_sc", "polar_minsum", "polar_ml", "uncoded"] = "neural"
    feedback: Literal["hard", "soft"] = "hard"
    snrs: list[float] = Field(default_factory=lambda: [-2.0, 0.0, 2.0])
    min_block_errors: int = Field(100, ge=0)
    max_blocks: int = Field(1_000_000, ge=1)
    min_blocks: int = Field(0, ge=0)
    eval_batch: int = Field(10000, ge=1)

    # analysis
    analysis: Literal["distance", "first_errors"] = "distance"
    num_pairs: int = Field(10000, ge=1)
    bins: int = Field(50, ge=1)
    num_blocks: int = Field(100000, ge=1)

    # paths
    checkpoint: Optional[str] = None
    out_dir: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.k > self.n:
            raise ValueError(f"k={self.k} exceeds n={self.n}")
        if self.construction == "file" and not self.sequence_file:
            raise ValueError("construction=file needs sequence_file")
        return self

    # conversions ------------------------------------------------------

    def architecture(self) -> Architecture:
        return Architecture(self.enc_hidden, self.dec_hidden, self.depth, self.parallel_hidden,
                            self.pass_through_last)

    def train_plan(self, **overrides) -> TrainPlan:
        fields = dict(batch_size=self.batch_size, epochs=self.epochs, dec_steps=self.dec_steps,
                      enc_steps=self.enc_steps, snr_enc=self.snr_enc, snr_dec=self.snr_dec,
                      lr_enc=self.lr_enc, lr_dec=self.lr_dec, channel=self.channel,
                      burst_prob=self.burst_prob, burst_std=self.burst_std,
                      burst_relative=self.burst_relative, seed=self.seed,
                      accumulation=self.accumulation, loss=self.loss,
                      decoder="parallel" if self.parallel else "sc")
        fields.update(overrides)
        return TrainPlan(**fields)

    def curriculum_plan(self) -> CurriculumPlan:
        return CurriculumPlan(self.stage1_epochs, self.train_plan(epochs=self.stage1_epochs), self.train_plan())

    def embedded(self) -> dict:
        """The config as stored inside artifacts."""
        return self.model_dump(mode="json", exclude=set(LOCATION_FIELDS))

    def comment(self) -> str:
        return "config " + json.dumps(self.embedded(), sort_keys=True, separators=(",", ":"))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [_parse_value(part) for part in text.split(",")]
    return text


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"expected key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value.strip())
    # a single SNR given without a comma still means a sweep of one point
    if "snrs" in out and not isinstance(out["snrs"], list):
        out["snrs"] = [out["snrs"]]
    return out


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "config"
        lines.append(f"{where}: {err['msg']}")
    return "; ".join(lines)


def load_config(command: str, config_file=None, overrides=()) -> RunConfig:
    """Merge a JSON config file with key=value overrides (overrides win)."""
    data: dict = {}
    if config_file is not None:
        try:
            data = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config file {config_file}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
    data.update(parse_overrides(overrides))
    if data.get("command", command) != command:
        raise ConfigurationError(f"config file is for command {data['command']!r}, not {command!r}")
    data["command"] = command
    try:
        return RunConfig(**data)
    except ValidationError as exc:
        raise ConfigurationError(format_validation_error(exc)) from None
