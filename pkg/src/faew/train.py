"""Training loop, evaluation and the module-toggle ablation."""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, TextIO

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentFlags, augment, to_arrays
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, TrainingDiverged
from .head import ChangeDetector, ModelConfig, loss_ce
from .metrics import Counts, MetricReport, confusion_counts, derive_metrics
from .optim import AdamW, clip_grad_norm, lr_at
from .tensor import Tensor, backward, no_grad

CONFIG_KEY = "__config__"

# Benchmark recipe: 4 px patches give the decoder a 16x16 grid on 64 px tiles.
TOY_ENCODER = EncoderConfig(patch=4)


@dataclass
class TrainRunConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup: int = 100
    schedule: str = "cosine"
    clip_norm: float = 1.0
    seed: int = 7
    flip: bool = True
    photometric: bool = True
    temporal_swap: bool = True
    dafa: bool = True
    msafa: bool = True
    spectral_mode: str = "real"
    dafa_position: Optional[int] = None
    val_every: int = 250
    eval_batch: int = 10

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")

    @property
    def augment_flags(self) -> AugmentFlags:
        return AugmentFlags(flip=self.flip, photometric=self.photometric, temporal_swap=self.temporal_swap)

    def model_config(self, encoder: Optional[EncoderConfig] = None) -> ModelConfig:
        """Map the toggles onto a model. dafa=off and msafa=off gives the baseline topology."""
        enc = dataclasses.replace(encoder or TOY_ENCODER, dafa=self.dafa,
                                  spectral_mode=self.spectral_mode, dafa_position=self.dafa_position)
        return ModelConfig(encoder=enc, msafa=self.msafa)


@dataclass
class TrainResult:
    model: ChangeDetector
    losses: list
    validations: list = field(default_factory=list)  # (step, MetricReport)
    seconds: float = 0.0

    @property
    def final(self) -> Optional[MetricReport]:
        return self.validations[-1][1] if self.validations else None


def _batch_tensors(samples) -> tuple:
    x0, x1, mask = to_arrays(samples)
    return Tensor(x0), Tensor(x1), mask


def predict(model: ChangeDetector, samples, batch: int = 10) -> list:
    out = []
    with no_grad():
        for i in range(0, len(samples), batch):
            x0, x1, _ = _batch_tensors(samples[i:i + batch])
            out.extend(model(x0, x1).prediction())
    return out


def evaluate(model: ChangeDetector, samples, batch: int = 10) -> MetricReport:
    """Micro-averaged metrics of ``model`` over ``samples``."""
    total = Counts()
    for pred, s in zip(predict(model, samples, batch), samples):
        total = total + confusion_counts(pred, s.mask)
    return derive_metrics(total)


def format_step(step: int, loss: float, report: Optional[MetricReport] = None) -> str:
    line = f"{step}\t{loss:.6f}"
    if report is not None:
        line += "\t" + report.row()
    return line


def train(cfg: TrainRunConfig, train_set, val_set=None, encoder: Optional[EncoderConfig] = None,
          trace: Optional[TextIO] = None, checkpoint_path=None,
          batch_hook: Optional[Callable] = None) -> TrainResult:
    """Train a detector with AdamW.

    Deterministic given ``cfg.seed``: model init and data order draw from
    separate child streams of one seed sequence. A non-finite loss raises
    TrainingDiverged with the 1-based step index.
    """
    cfg.validate()
    if not train_set:
        raise DataError("training set is empty")
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    model_cfg = cfg.model_config(encoder)
    model = ChangeDetector(model_cfg, np.random.default_rng(init_seq))
    params = model.state()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(data_seq)
    flags = cfg.augment_flags
    n = len(train_set)
    order, cursor = rng.permutation(n), 0
    losses, validations = [], []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = []
        while len(idx) < cfg.batch_size:
            if cursor == n:
                order, cursor = rng.permutation(n), 0
            idx.append(order[cursor])
            cursor += 1
        seeds = rng.integers(0, 2**63, size=len(idx))
        batch = [augment(train_set[i], flags, int(s)) for i, s in zip(idx, seeds)]
        if batch_hook is not None:
            batch = batch_hook(step, batch)
        x0, x1, mask = _batch_tensors(batch)
        loss = loss_ce(model(x0, x1), mask)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step)
        backward(loss)
        if cfg.clip_norm > 0:
            clip_grad_norm(params, cfg.clip_norm)
        opt.state.lr = lr_at(step, cfg.lr, cfg.steps, cfg.warmup, cfg.schedule)
        opt.step()
        opt.zero_grad()
        losses.append(value)
        report = None
        if val_set and (step % cfg.val_every == 0 or step == cfg.steps):
            report = evaluate(model, val_set, cfg.eval_batch)
            validations.append((step, report))
        if trace is not None:
            trace.write(format_step(step, value, report) + "\n")
    if cfg.steps == 0 and val_set:
        validations.append((0, evaluate(model, val_set, cfg.eval_batch)))
    result = TrainResult(model, losses, validations, time.perf_counter() - start)
    if checkpoint_path is not None:
        save_model(model, checkpoint_path)
    return result


# -- checkpoints carrying their model configuration ---------------------------

def _text_tensor(text: str) -> Tensor:
    return Tensor(np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32))


def _tensor_text(t: Tensor) -> str:
    return bytes(np.asarray(t.data, dtype=np.uint8)).decode("utf-8")


def model_config_text(cfg: ModelConfig) -> str:
    lines = [f"model.{k} = {v}" for k, v in dataclasses.asdict(cfg).items() if k != "encoder"]
    for k, v in dataclasses.asdict(cfg.encoder).items():
        if isinstance(v, tuple):
            v = ",".join(v)
        lines.append(f"encoder.{k} = {v}")
    return "\n".join(lines) + "\n"


def model_config_from_text(text: str) -> ModelConfig:
    from .config import apply_section, parse_text

    entries = parse_text(text, CONFIG_KEY)
    enc = apply_section(EncoderConfig(), entries, "encoder")
    return apply_section(ModelConfig(encoder=enc), {k: v for k, v in entries.items()
                                                    if not k.startswith("encoder.")}, "model")


def save_model(model: ChangeDetector, path) -> None:
    params = dict(model.state())
    params[CONFIG_KEY] = _text_tensor(model_config_text(model.cfg))
    ckpt.checkpoint_save(params, path)


def load_model(path, fallback: Optional[ModelConfig] = None) -> ChangeDetector:
    params = ckpt.checkpoint_load(path)
    cfg = model_config_from_text(_tensor_text(params.pop(CONFIG_KEY))) if CONFIG_KEY in params else fallback
    if cfg is None:
        raise ConfigError(f"{path} carries no model configuration")
    model = ChangeDetector(cfg, np.random.default_rng(0))
    model.load_state(params)
    return model


# -- ablation ------------------------------------------------------------------

# (dafa, msafa) in the order: baseline, +DAFA, +MSAFA, +DAFA +MSAFA
ABLATION_ROWS = (("baseline", False, False), ("+DAFA", True, False),
                 ("+MSAFA", False, True), ("+DAFA +MSAFA", True, True))
SPECTRAL_ROWS = ("real", "imag", "amplitude", "off")


@dataclass
class AblationRow:
    name: str
    reports: list

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.reports]))

    def line(self) -> str:
        return f"{self.name}\t{self.mean('rc'):.2f}\t{self.mean('f1'):.2f}\t{self.mean('iou'):.2f}"


def ablation_configs(base: TrainRunConfig, kind: str = "modules") -> list:
    if kind == "modules":
        return [(name, dataclasses.replace(base, dafa=d, msafa=m)) for name, d, m in ABLATION_ROWS]
    if kind == "spectral":
        return [(mode, dataclasses.replace(base, dafa=True, msafa=True, spectral_mode=mode))
                for mode in SPECTRAL_ROWS]
    raise ConfigError(f"unknown ablation kind {kind!r}")


def ablate(configs, train_set, val_set, seeds=(0, 1, 2), encoder: Optional[EncoderConfig] = None,
           log: Optional[Callable[[str], None]] = None) -> list:
    """Train every (name, config) over every seed; one AblationRow per config, in input order."""
    rows = []
    for name, cfg in configs:
        reports = []
        for seed in seeds:
            res = train(dataclasses.replace(cfg, seed=seed, val_every=max(cfg.steps, 1)),
                        train_set, val_set, encoder)
            report = res.final if res.final is not None else evaluate(res.model, val_set, cfg.eval_batch)
            reports.append(report)
            if log is not None:
                log(f"{name}\tseed={seed}\t{report.row()}")
        rows.append(AblationRow(name, reports))
    return rows


def ablation_table(rows) -> str:
    return "\n".join(["row\tRc\tF1\tIoU"] + [r.line() for r in rows])

