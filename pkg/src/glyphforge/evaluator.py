"""Post-training measurements: accuracy, accuracy-vs-N sweeps, temperature
sweeps and redundant-symbol detection."""

from __future__ import annotations

import io
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .generator import NOISE_DIM, generate_actions
from .raster import render_symbol
from .trainer import Checkpoint, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

TEMPERATURE_GRID = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 4.0)
FULL_NS = (4, 8, 16, 32, 64, 128, 256, 512)
DESK_NS = (4, 16, 64)
EVAL_TEMPERATURE = 1.0


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GLYPHFORGE_THREADS", "1")))
    except ValueError:
        return 1


def measure_accuracy(ckpt: Checkpoint, samples: int = 10_000, temperature: float = EVAL_TEMPERATURE,
                     seed: int = 0) -> float:
    """Top-1 accuracy on ``samples`` fresh (index, noise) draws."""
    acc, _, _ = evaluate(ckpt.state, ckpt.config, samples, temperature, seed)
    return acc


def confusion_matrix(ckpt: Checkpoint, samples: int = 10_000, temperature: float = EVAL_TEMPERATURE,
                     seed: int = 0) -> np.ndarray:
    """``C[true, predicted]`` counts; row sums are the per-class sample counts."""
    return evaluate(ckpt.state, ckpt.config, samples, temperature, seed)[2]


# ---------------------------------------------------------------- N sweep


@dataclass
class NSweepRow:
    n: int
    raw: list[float]

    @property
    def valid(self) -> list[float]:
        return [v for v in self.raw if not math.isnan(v)]

    @property
    def seeds(self) -> int:
        return len(self.valid)

    @property
    def mean(self) -> float:
        v = self.valid
        return float(np.mean(v)) if v else math.nan

    @property
    def std(self) -> float:
        v = self.valid
        return float(np.std(v, ddof=1)) if len(v) > 1 else math.nan


@dataclass
class NSweepReport:
    rows: list[NSweepRow]
    temperature: float = EVAL_TEMPERATURE
    samples: int = 10_000
    steps: int = 10_000
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.rows.sort(key=lambda r: r.n)

    def trend_ok(self) -> bool:
        """Mean accuracy strictly decreasing in N."""
        means = [r.mean for r in self.rows]
        return len(means) > 1 and all(a > b for a, b in zip(means, means[1:]))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(f"# accuracy vs number of symbols; evaluation temperature T={self.temperature!r} "
                  "(assumed equal to the training temperature)\n")
        out.write(f"# samples={self.samples} steps={self.steps}\n")
        for note in self.notes:
            out.write(f"# {note}\n")
        out.write("N,seeds,mean,std,raw\n")
        for r in self.rows:
            raw = ";".join("nan" if math.isnan(v) else repr(v) for v in r.raw)
            out.write(f"{r.n},{r.seeds},{r.mean!r},{r.std!r},{raw}\n")
        verdict = "PASS" if self.trend_ok() else "FAIL"
        out.write(f"# trend: {verdict} (mean accuracy strictly decreasing in N)\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> NSweepReport:
        rows, temperature, samples, steps = [], EVAL_TEMPERATURE, 10_000, 10_000
        for line in text.splitlines():
            if line.startswith("# samples="):
                kv = dict(tok.split("=") for tok in line[2:].split())
                samples, steps = int(kv["samples"]), int(kv["steps"])
            elif "temperature T=" in line:
                temperature = float(line.split("T=")[1].split()[0])
            if not line or line.startswith("#") or line.startswith("N,"):
                continue
            n, _seeds, _mean, _std, raw = line.split(",")
            rows.append(NSweepRow(int(n), [float(v) for v in raw.split(";")]))
        return cls(rows, temperature, samples, steps)


def n_sweep(ns, seeds: int = 3, template: TrainConfig = TrainConfig(), samples: int = 10_000,
            eval_seed: int = 0, workers: int | None = None, progress=None) -> NSweepReport:
    """Train one model per (N, seed) and tabulate its ``samples``-draw accuracy.

    Seeds are ``template.seed + k`` for ``k < seeds``.  A run that raises is
    recorded as NaN rather than aborting the sweep.
    """
    ns = sorted(set(ns))
    if any(n < 2 for n in ns):
        raise ValueError("every N must be >= 2")
    cells = [(n, k) for n in ns for k in range(seeds)]

    def run(cell):
        n, k = cell
        cfg = replace(template, n=n, seed=template.seed + k)
        try:
            acc = measure_accuracy(train(cfg), samples, EVAL_TEMPERATURE, eval_seed)
        except Exception as exc:  # noqa: BLE001 - a failed cell is data, not a crash
            log.warning("sweep cell N=%d seed=%d failed: %s", n, cfg.seed, exc)
            acc = math.nan
        if progress is not None:
            progress(n, cfg.seed, acc)
        return acc

    workers = workers or worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = dict(zip(cells, pool.map(run, cells)))
    else:
        results = {c: run(c) for c in cells}
    rows = [NSweepRow(n, [results[(n, k)] for k in range(seeds)]) for n in ns]
    return NSweepReport(rows, EVAL_TEMPERATURE, samples, template.steps)


# ---------------------------------------------------------------- temperature


@dataclass
class TemperatureSweep:
    temperatures: tuple[float, ...]
    symbols: tuple[int, ...]
    canvases: np.ndarray      # [symbol, temperature, sample, H, W]
    spread: np.ndarray        # [symbol, temperature] mean pairwise L2 distance

    def table(self) -> str:
        head = "symbol," + ",".join(f"T={t:g}" for t in self.temperatures)
        lines = [head] + [
            f"{s}," + ",".join(f"{v:.6f}" for v in row) for s, row in zip(self.symbols, self.spread)
        ]
        return "\n".join(lines) + "\n"


def mean_pairwise_distance(canvases: np.ndarray) -> float:
    flat = canvases.reshape(len(canvases), -1)
    if len(flat) < 2:
        return 0.0
    d = [np.linalg.norm(flat[i] - flat[j]) for i, j in combinations(range(len(flat)), 2)]
    return float(np.mean(d))


def render_samples(ckpt: Checkpoint, symbols, temperatures, per_cell: int, seed: int = 0) -> np.ndarray:
    """Canvases ``[symbol, temperature, sample, H, W]``.

    One standard-normal draw per (symbol, sample) is shared by every
    temperature, so columns differ only by the noise magnitude.
    """
    rng = np.random.default_rng(seed)
    symbols = list(symbols)
    base = rng.standard_normal((len(symbols), per_cell, NOISE_DIM))
    size = ckpt.config.canvas
    out = np.empty((len(symbols), len(temperatures), per_cell, size, size))
    with ad.no_tape():
        for ti, t in enumerate(temperatures):
            idx = np.repeat(symbols, per_cell)
            noise = Tensor(base.reshape(-1, NOISE_DIM) * t)
            actions = generate_actions(idx, noise, ckpt.state.gen)
            out[:, ti] = render_symbol(actions, ckpt.config.raster).data.reshape(
                len(symbols), per_cell, size, size)
    return out


def temperature_sweep(ckpt: Checkpoint, temperatures=TEMPERATURE_GRID, symbols=None,
                      samples_per_cell: int = 16, seed: int = 0) -> TemperatureSweep:
    if symbols is None:
        symbols = range(ckpt.config.n)
    symbols = tuple(int(s) for s in symbols)
    temperatures = tuple(float(t) for t in temperatures)
    canvases = render_samples(ckpt, symbols, temperatures, samples_per_cell, seed)
    spread = np.array([[mean_pairwise_distance(c) for c in row] for row in canvases])
    return TemperatureSweep(temperatures, symbols, canvases, spread)


def non_decreasing(values, rel_tol: float = 0.05) -> bool:
    """True if every drop between neighbours is within ``rel_tol`` of the earlier value."""
    return all(b >= a * (1.0 - rel_tol) for a, b in zip(values, values[1:]))


# ---------------------------------------------------------------- redundancy


def canonical_canvases(ckpt: Checkpoint) -> np.ndarray:
    """T=0 rendering of every symbol, ``[N, H, W]``."""
    n = ckpt.config.n
    with ad.no_tape():
        actions = generate_actions(np.arange(n), Tensor(np.zeros((n, NOISE_DIM))), ckpt.state.gen)
        return render_symbol(actions, ckpt.config.raster).data


def normalized_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L2 distance over the RMS of the two norms: 0 for identical, sqrt(2) for disjoint ink."""
    scale = math.sqrt((np.sum(a * a) + np.sum(b * b)) / 2.0)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def detect_redundancy(ckpt: Checkpoint, threshold: float = 0.05, samples: int = 10_000,
                      confusion_rate: float = 0.10, seed: int = 0) -> list[tuple[int, int]]:
    """Symbol pairs ``(i, j)``, ``i < j``, that look alike or get confused.

    A pair is reported when its canonical canvases are within ``threshold``
    normalized distance, or when either symbol is classified as the other in
    more than ``confusion_rate`` of its samples.
    """
    canon = canonical_canvases(ckpt)
    pairs = set()
    for i, j in combinations(range(len(canon)), 2):
        if normalized_distance(canon[i], canon[j]) < threshold:
            pairs.add((i, j))
    if samples > 0:
        conf = confusion_matrix(ckpt, samples, EVAL_TEMPERATURE, seed)
        rates = conf / np.maximum(conf.sum(axis=1, keepdims=True), 1)
        for i, j in zip(*np.nonzero(rates > confusion_rate)):
            if i != j:
                pairs.add((min(i, j), max(i, j)))
    return sorted((int(i), int(j)) for i, j in pairs)
