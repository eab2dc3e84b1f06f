"""Joint training of generator and classifier through the rasterizer.

Each step draws random symbol indices, renders them through the generator with
unit-temperature noise, classifies the canvases, and takes one Adam step on
the union of generator and classifier parameters.  Validation runs every
``val_every`` steps on a fixed held-out noise stream; the best-scoring state
is what :func:`train` returns.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .classifier import ClassifierParams, classify, init_classifier
from .generator import ConfigError, GeneratorParams, generate_actions, init_generator, sample_noise
from .optim import Adam, OptimizerError
from .raster import RasterConfig, render_symbol

log = logging.getLogger(__name__)

TRAIN_TEMPERATURE = 1.0


class TrainingError(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    n: int = 10
    strokes: int = 3
    batch: int = 16
    lr: float = 1e-3
    steps: int = 10_000
    canvas: int = 64
    sigma: float = 0.02
    seed: int = 0
    val_every: int = 250
    val_samples: int = 512
    # repo-level knobs, not hyperparameters of the method itself
    tau: float = 100.0
    curve_samples: int = 32
    warmup: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"n must be >= 2, got {self.n}")
        for name in ("strokes", "batch", "canvas", "val_every", "val_samples", "curve_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.steps < 0 or self.warmup < 0:
            raise ConfigError("steps and warmup must be >= 0")
        if self.canvas < 8:
            raise ConfigError(f"canvas must be >= 8 to survive three stride-2 blocks, got {self.canvas}")
        if self.lr <= 0 or self.sigma <= 0:
            raise ConfigError("lr and sigma must be positive")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    @property
    def raster(self) -> RasterConfig:
        return RasterConfig(size=self.canvas, sigma=self.sigma, tau=self.tau, samples=self.curve_samples)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}

    def to_dict(self) -> dict:
        return asdict(self)


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("generator", "classifier", "data", "validation")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


def validation_seed(config: TrainConfig) -> int:
    return int(seed_streams(config.seed)["validation"].generate_state(1)[0])


@dataclass
class ModelState:
    gen: GeneratorParams
    cls: ClassifierParams
    optimizer: Adam = field(repr=False)

    @classmethod
    def create(cls, gen: GeneratorParams, clf: ClassifierParams, lr: float) -> ModelState:
        params = {**gen.named(), **clf.named()}
        return cls(gen, clf, Adam(params, lr=lr))

    def params(self) -> dict[str, Tensor]:
        return {**self.gen.named(), **self.cls.named()}

    def clone(self) -> ModelState:
        return copy.deepcopy(self)


@dataclass
class Checkpoint:
    state: ModelState
    config: TrainConfig
    step: int
    val_acc: float
    rng_state: dict


@dataclass(frozen=True)
class MetricRecord:
    step: int
    loss: float
    val_acc: float

    def to_csv(self) -> str:
        return f"{self.step},{self.loss!r},{self.val_acc!r}"


METRICS_HEADER = "step,loss,val_acc"


def init_state(config: TrainConfig) -> ModelState:
    ad.set_default_dtype(config.dtype)
    streams = seed_streams(config.seed)
    gen = init_generator(config.n, config.strokes, seed=streams["generator"])
    clf = init_classifier(config.n, seed=streams["classifier"])
    return ModelState.create(gen, clf, config.lr)


def make_batch(n: int, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random symbol indices; these are both the input and the target."""
    if n < 2:
        raise ConfigError(f"n must be >= 2, got {n}")
    return rng.integers(0, n, size=batch)


def forward(state: ModelState, indices, noise: Tensor, raster: RasterConfig, detach_generator=False):
    """Return ``(logits, canvases)`` for one batch."""
    actions = generate_actions(indices, noise, state.gen)
    if detach_generator:
        actions = Tensor(actions.data)
    canvases = render_symbol(actions, raster)
    return classify(canvases, state.cls, size=raster.size), canvases


def train_step(state: ModelState, config: TrainConfig, rng: np.random.Generator, classifier_only=False):
    """One joint optimization step; returns ``(loss, batch accuracy)``."""
    idx = make_batch(config.n, config.batch, rng)
    noise = sample_noise(config.batch, TRAIN_TEMPERATURE, rng)
    opt = state.optimizer
    opt.zero_grad()
    with Tape():
        logits, _ = forward(state, idx, noise, config.raster, detach_generator=classifier_only)
        loss = ad.softmax_cross_entropy(logits, idx)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at optimizer step {opt.t + 1}")
        ad.backward(loss)
    try:
        opt.step()
    except OptimizerError as exc:
        raise TrainingError(f"{exc} at optimizer step {opt.t + 1}") from exc
    acc = float(np.mean(logits.data.argmax(axis=1) == idx))
    return value, acc


def evaluate(state: ModelState, config: TrainConfig, samples: int, temperature: float, seed,
             chunk: int = 256):
    """Accuracy, mean loss and confusion matrix on freshly generated samples."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    confusion = np.zeros((config.n, config.n), dtype=np.int64)
    total_loss = 0.0
    with ad.no_tape():
        for start in range(0, samples, chunk):
            b = min(chunk, samples - start)
            idx = make_batch(config.n, b, rng)
            noise = sample_noise(b, temperature, rng)
            logits, _ = forward(state, idx, noise, config.raster)
            total_loss += ad.softmax_cross_entropy(logits, idx).item() * b
            np.add.at(confusion, (idx, logits.data.argmax(axis=1)), 1)
    return float(np.trace(confusion) / samples), total_loss / samples, confusion


def train(config: TrainConfig, metrics: list | None = None,
          progress: Callable[[MetricRecord], None] | None = None) -> Checkpoint:
    """Run ``config.steps`` steps and return the best-validated checkpoint.

    Validation records (``step, validation loss, validation accuracy``) are
    appended to ``metrics`` when given.
    """
    state = init_state(config)
    rng = np.random.default_rng(seed_streams(config.seed)["data"])
    val_seed = validation_seed(config)
    best: Checkpoint | None = None

    def validate(step):
        nonlocal best
        acc, loss, _ = evaluate(state, config, config.val_samples, TRAIN_TEMPERATURE, val_seed)
        rec = MetricRecord(step, loss, acc)
        if metrics is not None:
            metrics.append(rec)
        if progress is not None:
            progress(rec)
        log.debug("step %d val_loss %.4f val_acc %.4f", step, loss, acc)
        if best is None or acc > best.val_acc:
            best = Checkpoint(state.clone(), config, step, acc, copy.deepcopy(rng.bit_generator.state))

    validate(0)
    for step in range(1, config.steps + 1):
        try:
            train_step(state, config, rng, classifier_only=step <= config.warmup)
        except TrainingError as exc:
            exc.checkpoint = best
            raise
        if step % config.val_every == 0 or step == config.steps:
            validate(step)
    return best


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **kw)
