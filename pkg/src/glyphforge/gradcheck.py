"""Finite-difference verification of every backward rule.

Three suites: single primitives against central differences, the rasterizer
against directional differences, and the whole
embedding -> MLP -> rasterizer -> CNN -> loss chain on one-sample batches.
Ops are looked up on the :mod:`autodiff` module at call time, so a patched
primitive is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import raster
from .autodiff import Tape, Tensor
from .generator import NOISE_DIM
from .trainer import TrainConfig, forward, init_state

PRIMITIVE_TOL = 1e-5
RASTER_TOL = 1e-3
END_TO_END_TOL = 1e-3
DENOM_FLOOR = 1e-8


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    evaluations: int = 1
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f", {self.skipped} skipped as non-smooth" if self.skipped else ""
        return (f"{status} {self.name:<28} max rel err {self.max_rel_err:.3e} "
                f"(tol {self.tol:.0e}, n={self.evaluations}{extra})")


def rel_err(analytic, numeric, floor: float = DENOM_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arrays: list[np.ndarray], step: float) -> list[np.ndarray]:
    """Central differences of scalar ``f(arrays)`` w.r.t. every element."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(arrays)
            flat[i] = orig - step
            fm = f(arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def _projected(fn, weights):
    """Scalar loss ``sum(fn(xs) * weights)`` built from autodiff ops."""
    def loss(xs):
        out = fn(xs)
        return ad.sum(ad.mul(out, Tensor(weights))) if out.size > 1 else out
    return loss


def check_function(name, fn, arrays, rng, step=1e-5, tol=PRIMITIVE_TOL) -> CheckResult:
    """Analytic gradient of a random projection of ``fn`` vs central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.no_tape():
        probe = fn([Tensor(a) for a in arrays])
    loss_fn = _projected(fn, rng.uniform(-1.0, 1.0, size=probe.shape))
    xs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        ad.backward(loss_fn(xs))
    analytic = [x.grad if x.grad is not None else np.zeros_like(x.data) for x in xs]

    def f(arrs):
        with ad.no_tape():
            return loss_fn([Tensor(a) for a in arrs]).item()

    numeric = numeric_grad(f, arrays, step)
    err = max(float(rel_err(a, n).max()) for a, n in zip(analytic, numeric))
    return CheckResult(name, err, tol, sum(a.size for a in arrays))


def primitive_cases(rng):
    """``(name, fn, input arrays)`` for each differentiable primitive."""
    u = lambda *shape: rng.uniform(-2.0, 2.0, size=shape)  # noqa: E731
    targets = rng.integers(0, 10, size=4)
    rows = rng.integers(0, 5, size=7)
    return [
        ("matmul", lambda x: ad.matmul(x[0], x[1]), [u(4, 5), u(5, 3)]),
        ("conv2d", lambda x: ad.conv2d(x[0], x[1], stride=2, padding=1), [u(2, 3, 8, 8), u(4, 3, 3, 3)]),
        ("conv2d_stride1", lambda x: ad.conv2d(x[0], x[1], stride=1, padding=0), [u(1, 2, 5, 5), u(3, 2, 2, 3)]),
        ("relu", lambda x: ad.relu(x[0]), [u(6, 5)]),
        ("sigmoid", lambda x: ad.sigmoid(x[0]), [u(6, 5)]),
        ("tanh", lambda x: ad.tanh(x[0]), [u(6, 5)]),
        ("add", lambda x: ad.add(x[0], x[1]), [u(3, 4), u(3, 4)]),
        ("add_scalar", lambda x: ad.add(x[0], 0.7), [u(3, 4)]),
        ("mul", lambda x: ad.mul(x[0], x[1]), [u(3, 4), u(3, 4)]),
        ("mul_shared", lambda x: ad.mul(x[0], x[0]), [u(3, 4)]),
        ("scale", lambda x: ad.scale(x[0], -1.7), [u(3, 4)]),
        ("affine_bias", lambda x: ad.affine_bias(x[0], x[1]), [u(3, 4), u(4)]),
        ("affine_bias_4d", lambda x: ad.affine_bias(x[0], x[1]), [u(2, 3, 4, 4), u(3)]),
        ("softmax_cross_entropy", lambda x: ad.softmax_cross_entropy(x[0], targets), [u(4, 10)]),
        ("sum", lambda x: ad.sum(x[0]), [u(3, 5)]),
        ("mean", lambda x: ad.mean(x[0]), [u(3, 5)]),
        ("global_avg_pool", lambda x: ad.global_avg_pool(x[0]), [u(2, 3, 4, 5)]),
        ("concat", lambda x: ad.concat([x[0], x[1]], axis=1), [u(3, 2), u(3, 4)]),
        ("embedding", lambda x: ad.embedding(x[0], rows), [u(5, 3)]),
        ("reshape", lambda x: ad.reshape(x[0], (6, 2)), [u(3, 4)]),
        ("screen", lambda x: raster.screen(ad.sigmoid(x[0])), [u(2, 3, 4, 4)]),
    ]


def check_primitives(seed: int = 0, tol: float = PRIMITIVE_TOL) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [check_function(name, fn, arrays, rng, 1e-5, tol) for name, fn, arrays in primitive_cases(rng)]


def _directional(loss_fn, x: np.ndarray, direction: np.ndarray, step: float) -> float:
    with ad.no_tape():
        fp = loss_fn(Tensor(x + step * direction)).item()
        fm = loss_fn(Tensor(x - step * direction)).item()
    return (fp - fm) / (2.0 * step)


def check_rasterizer(seed: int = 0, configs: int = 50, size: int = 16, tol: float = RASTER_TOL) -> list[CheckResult]:
    """Per-field gradient of single strokes and JVPs of whole symbols."""
    rng = np.random.default_rng(seed)
    cfg = raster.RasterConfig(size=size, sigma=0.05)
    stroke_err, jvp_err = 0.0, 0.0
    for _ in range(configs):
        stroke = rng.uniform(0.1, 0.9, size=raster.N_FIELDS)
        # tau=100 makes the smooth max sharp; a 1e-4 step leaves ~1e-3 truncation error
        r = check_function("render_stroke", lambda x: raster.render_strokes(x[0], cfg), [stroke], rng,
                           step=1e-5, tol=tol)
        stroke_err = max(stroke_err, r.max_rel_err)

        actions = rng.uniform(0.05, 0.95, size=(3, raster.N_FIELDS))
        weights = Tensor(rng.uniform(-1.0, 1.0, size=(size, size)))
        loss_fn = lambda a: ad.sum(ad.mul(raster.render_symbol(a, cfg), weights))  # noqa: E731
        x = Tensor(actions, requires_grad=True)
        with Tape():
            ad.backward(loss_fn(x))
        direction = rng.standard_normal(actions.shape)
        analytic = float(np.sum(x.grad * direction))
        numeric = _directional(loss_fn, actions, direction, 1e-5)
        jvp_err = max(jvp_err, float(rel_err(analytic, numeric)))
    return [
        CheckResult("render_stroke", stroke_err, tol, configs),
        CheckResult("render_symbol_jvp", jvp_err, tol, configs),
    ]


def check_end_to_end(seed: int = 0, configs: int = 50, params_per_config: int = 20,
                     tol: float = END_TO_END_TOL) -> list[CheckResult]:
    """Loss gradient of the full pipeline on one-sample batches.

    Each configuration is a fresh random model, symbol and noise vector; the
    analytic gradient is checked along a random direction over all
    parameters and for ``params_per_config`` individual scalar weights.
    """
    rng = np.random.default_rng(seed)
    jvp_err, scalar_err, checked, skipped = 0.0, 0.0, 0, 0
    for k in range(configs):
        cfg = TrainConfig(n=int(rng.integers(2, 8)), canvas=16, sigma=0.05, seed=seed * 1000 + k)
        state = init_state(cfg)
        params = state.params()
        # zero-initialized biases put blank-canvas activations exactly on the
        # relu kink, where central differences are meaningless
        for name, p in params.items():
            if "_b" in name or "bias" in name:
                p.data[...] = rng.uniform(-0.1, 0.1, size=p.shape)
        idx = rng.integers(0, cfg.n, size=1)
        noise = Tensor(rng.standard_normal((1, NOISE_DIM)))

        def loss_value():
            with ad.no_tape():
                logits, _ = forward(state, idx, noise, cfg.raster)
                return ad.softmax_cross_entropy(logits, idx).item()

        with Tape():
            logits, _ = forward(state, idx, noise, cfg.raster)
            ad.backward(ad.softmax_cross_entropy(logits, idx))
        grads = {k_: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k_, p in params.items()}

        # directional derivative over every parameter at once
        dirs = {k_: rng.standard_normal(p.shape) for k_, p in params.items()}
        analytic = float(sum(np.sum(grads[k_] * dirs[k_]) for k_ in params))
        # tiny step: a joint move of every weight would otherwise push some
        # activations across relu kinks
        h = 1e-7
        for k_, p in params.items():
            p.data += h * dirs[k_]
        fp = loss_value()
        for k_, p in params.items():
            p.data -= 2 * h * dirs[k_]
        fm = loss_value()
        for k_, p in params.items():
            p.data += h * dirs[k_]
        jvp_err = max(jvp_err, float(rel_err(analytic, (fp - fm) / (2 * h))))

        names = list(params)
        for _ in range(params_per_config):
            name = names[rng.integers(len(names))]
            p = params[name].data.reshape(-1)
            g = grads[name].reshape(-1)
            i = int(rng.integers(p.size))
            coarse, fine = (_scalar_difference(loss_value, p, i, step) for step in (1e-5, 1e-6))
            if rel_err(coarse, fine) > tol:
                skipped += 1
                continue
            scalar_err = max(scalar_err, float(rel_err(g[i], coarse)))
            checked += 1
    return [
        CheckResult("end_to_end_jvp", jvp_err, tol, configs),
        CheckResult("end_to_end_scalar", scalar_err, tol, checked, skipped),
    ]


def _scalar_difference(f, flat: np.ndarray, i: int, step: float) -> float:
    orig = flat[i]
    flat[i] = orig + step
    fp = f()
    flat[i] = orig - step
    fm = f()
    flat[i] = orig
    return (fp - fm) / (2.0 * step)


def run_all(tol: float | None = None, seed: int = 0, configs: int = 50) -> list[CheckResult]:
    """Every suite; ``tol`` overrides all three default tolerances."""
    return (
        check_primitives(seed, PRIMITIVE_TOL if tol is None else tol)
        + check_rasterizer(seed, configs, tol=RASTER_TOL if tol is None else tol)
        + check_end_to_end(seed, configs, tol=END_TO_END_TOL if tol is None else tol)
    )
