"""Oracle checks run by ``minimtl verify``.

Each check compares an implementation path against an independent oracle
(finite differences, grid search, brute force) on random inputs and reports
the worst error seen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from . import weighting as wt
from .tensor import Tensor


@dataclass
class CheckResult:
    name: str
    samples: int
    max_error: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<34} samples={self.samples:<5} "
                f"max_error={self.max_error:.3e} tol={self.tolerance:.0e}")


def _result(name, samples, errors, tol, extra_ok=True) -> CheckResult:
    worst = float(max(errors)) if errors else 0.0
    return CheckResult(name, samples, worst, tol, bool(worst <= tol and extra_ok))


# -- random graphs per op kind ------------------------------------------------------

def _away(rng, shape, lo=0.05, hi=2.0):
    """Values with |v| in [lo, hi] so kinks and poles stay out of the stencil."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_graph(kind: str, rng: np.random.Generator) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """A random scalar function of one parameter tensor that exercises ``kind``."""
    n, m, k = (int(v) for v in rng.integers(1, 5, size=3))
    x0 = rng.standard_normal((n, m))
    R = Tensor(rng.standard_normal((n, m)))
    other = Tensor(rng.standard_normal((n, m)))
    mix = rng.standard_normal((2 * n + 2, 2 * m + k + 2))

    def weigh(y: Tensor) -> Tensor:
        # random linear read-out so every output coordinate matters
        w = mix[: y.shape[0], : y.shape[1]] if y.ndim == 2 else mix[0, : y.size].reshape(y.shape)
        return (y * Tensor(w)).sum()

    if kind == "matmul":
        B = Tensor(rng.standard_normal((m, k)))
        return (lambda p: weigh(p @ B)), x0
    if kind == "add":
        row = Tensor(rng.standard_normal((m,)))
        return (lambda p: weigh(p + other + row)), x0
    if kind == "sub":
        col = Tensor(rng.standard_normal((n, 1)))
        return (lambda p: weigh(other - p - col)), x0
    if kind == "mul":
        return (lambda p: weigh(p * other * p)), x0
    if kind == "div":
        den = _away(rng, (n, m), 0.5, 2.0)
        return (lambda p: weigh(other / p + p / Tensor(den))), den
    if kind == "scalar_mul":
        a = float(rng.standard_normal())
        return (lambda p: weigh(p * a)), x0
    if kind == "neg":
        return (lambda p: weigh(-p)), x0
    if kind == "relu":
        return (lambda p: weigh(tn.relu(p))), _away(rng, (n, m))
    if kind == "sigmoid":
        return (lambda p: weigh(tn.sigmoid(p))), x0
    if kind == "tanh":
        return (lambda p: weigh(tn.tanh(p))), x0
    if kind == "exp":
        return (lambda p: weigh(tn.exp(p))), x0
    if kind == "log":
        return (lambda p: weigh(tn.log(p))), rng.uniform(0.2, 3.0, size=(n, m))
    if kind == "abs":
        return (lambda p: weigh(tn.abs_(p))), _away(rng, (n, m))
    if kind == "sum":
        axis = [None, 0, 1][int(rng.integers(3))]
        return (lambda p: weigh(tn.sum_(p * R, axis=axis, keepdims=axis is not None))), x0
    if kind == "mean":
        axis = [None, 0, 1][int(rng.integers(3))]
        return (lambda p: weigh(tn.mean(p * R, axis=axis, keepdims=axis is not None))), x0
    if kind == "softmax_rows":
        return (lambda p: weigh(tn.softmax_rows(p))), x0
    if kind == "log_softmax_rows":
        return (lambda p: weigh(tn.log_softmax_rows(p))), x0
    if kind == "concat_rows":
        return (lambda p: weigh(tn.concat([p, other * p], axis=0))), x0
    if kind == "concat_cols":
        return (lambda p: weigh(tn.concat([other, p * p], axis=1))), x0
    if kind == "slice":
        r, c = int(rng.integers(0, n)), int(rng.integers(0, m))
        return (lambda p: weigh(p[r:, c:] * p[r:, c:])), x0
    if kind == "smooth_step":
        gamma = float(rng.uniform(0.5, 2.0))
        x = rng.uniform(-gamma, gamma, size=(n, m))
        # keep clear of the joints at +-gamma/2
        x = np.where(np.abs(np.abs(x) - gamma / 2) < 0.02, x * 0.8, x)
        return (lambda p: weigh(tn.smooth_step(p, gamma))), x
    raise ValueError(kind)


def check_autodiff(graphs_per_op: int = 50, seed: int = 0, tol: float = 1e-5) -> CheckResult:
    rng = np.random.default_rng(seed)
    errors = []
    for kind in tn.OP_KINDS:
        for _ in range(graphs_per_op):
            f, x0 = op_graph(kind, rng)
            errors.append(tn.finite_diff_check(f, Tensor(x0), 1e-4))
    return _result("autodiff finite differences", len(errors), errors, tol)


def mlp_loss(sizes=(16, 12, 8, 1), seed: int = 0):
    """A random 3-layer MLP loss as a function of its flattened parameters."""
    rng = np.random.default_rng(seed)
    X = Tensor(rng.standard_normal((10, sizes[0])))
    y = Tensor(rng.standard_normal((10, sizes[-1])))
    shapes = []
    for a, b in zip(sizes[:-1], sizes[1:]):
        shapes += [(a, b), (1, b)]
    total = sum(a * b for a, b in shapes)
    theta0 = rng.standard_normal((1, total)) * 0.5

    def f(theta: Tensor) -> Tensor:
        h, off = X, 0
        for i, (a, b) in enumerate(shapes[::2]):
            W = theta[:, off:off + a * b]
            off += a * b
            bias = theta[:, off:off + b]
            off += b
            # unflatten W column by column with slices
            cols = [tn.concat([W[:, r * b + j:r * b + j + 1] for r in range(a)], axis=0) for j in range(b)]
            h = h @ tn.concat(cols, axis=1) + bias
            if i < len(shapes) // 2 - 1:
                h = tn.tanh(h)
        d = h - y
        return (d * d).mean()

    return f, theta0


def check_mlp_gradient(tol: float = 1e-5) -> CheckResult:
    f, theta0 = mlp_loss()
    err = tn.finite_diff_check(f, Tensor(theta0), 1e-4)
    return _result("MLP finite differences", 1, [err], tol)


# -- weighting oracles ------------------------------------------------------------------

def random_bundle(rng, T: int, D: int, losses=None) -> wt.GradientBundle:
    L = rng.uniform(0.5, 2.0, T) if losses is None else losses
    return wt.GradientBundle(rng.standard_normal((T, D)), L)


def mgda_grid_min(g1: np.ndarray, g2: np.ndarray, step: float = 1e-4) -> float:
    gammas = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)[:, None]
    pts = gammas * g1 + (1 - gammas) * g2
    return float(np.min(np.einsum("ij,ij->i", pts, pts)))


def check_mgda(samples: int = 100, seed: int = 1, tol: float = 1e-6) -> CheckResult:
    rng = np.random.default_rng(seed)
    errors, on_simplex = [], True
    for _ in range(samples):
        b = random_bundle(rng, 2, int(rng.integers(1, 9)))
        res = wt.mgda(b, norm_mode="none")
        gamma = res.applied_weights
        on_simplex &= bool(abs(gamma.sum() - 1) <= 1e-9 and gamma.min() >= -1e-9)
        errors.append(max(0.0, res.direction @ res.direction - mgda_grid_min(*b.grads)))
    return _result("MGDA vs grid oracle", samples, errors, tol, on_simplex)


def check_pcgrad(samples: int = 1000, seed: int = 2, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = []
    for s in range(samples):
        T = int(rng.integers(2, 5))
        b = random_bundle(rng, T, int(rng.integers(2, 9)))
        state = wt.WeightingState("PCGrad", T, seed=s)
        res = wt.pcgrad(b, state)
        adjusted = res.diagnostics["adjusted"]
        for i, targets in enumerate(res.diagnostics["projection_targets"]):
            if targets:
                j = targets[-1]
                worst.append(max(0.0, -float(adjusted[i] @ b.grads[j])))
    return _result("PCGrad post-condition", samples, worst, tol)


def nondegenerate_bundle(rng, T: int) -> wt.GradientBundle:
    while True:
        b = random_bundle(rng, T, int(rng.integers(T + 1, 9)))
        s = np.linalg.svd(b.grads, compute_uv=False)
        if s[-1] / s[0] > 0.05:
            return b


def check_imtl(samples: int = 500, seed: int = 3, tol: float = 1e-8) -> CheckResult:
    rng = np.random.default_rng(seed)
    spreads, fallback_ok = [], True
    for _ in range(samples):
        b = nondegenerate_bundle(rng, int(rng.integers(2, 5)))
        res = wt.imtl_g(b)
        u = b.grads / np.linalg.norm(b.grads, axis=1, keepdims=True)
        proj = np.abs(u @ res.direction)
        spreads.append(float(proj.max() - proj.min()))
    g = rng.standard_normal(5)
    for rows in (np.vstack([g, 2 * g]), np.vstack([g, np.zeros(5)])):
        res = wt.imtl_g(wt.GradientBundle(rows, [1.0, 1.0]))
        fallback_ok &= res.degenerate and np.allclose(res.direction, rows.mean(axis=0))
    return _result("IMTL-G equal projections", samples, spreads, tol, fallback_ok)


def check_gradvac(samples: int = 500, seed: int = 4, tol: float = 1e-9) -> CheckResult:
    """T=2 bundles measure the returned rows directly; larger T replays the pair loop."""
    rng = np.random.default_rng(seed)
    errors = []
    for s in range(samples):
        T = 2 if s % 2 == 0 else int(rng.integers(3, 5))
        b = random_bundle(rng, T, int(rng.integers(2, 9)))
        state = wt.WeightingState("GradVac", T, seed=s)
        state.ema_cosine = rng.uniform(-0.9, 0.9, size=(T, T))
        if T == 2:
            targets = state.ema_cosine.copy()
            res = wt.gradvac(b, state)
            adjusted = res.diagnostics["adjusted"]
            for i, j, _ in res.diagnostics["fired"]:
                post = adjusted[i] @ b.grads[j] / (np.linalg.norm(adjusted[i]) * np.linalg.norm(b.grads[j]))
                errors.append(abs(post - targets[i, j]))
        else:
            errors.extend(_gradvac_errors(b, state))
    return _result("GradVac post-cosine", samples, errors, tol)


def _gradvac_errors(bundle: wt.GradientBundle, state: wt.WeightingState) -> list[float]:
    """Replays the pair loop and measures every fired adjustment against its target."""
    grads = bundle.grads
    T = bundle.num_tasks
    targets = state.ema_cosine.copy()
    res = wt.gradvac(bundle, state)
    errors = []
    g = grads.copy()
    fired = {(i, j) for i, j, _ in res.diagnostics["fired"]}
    beta = state.hyperparams["beta"]
    for i in range(T):
        for j in range(T):
            if i == j:
                continue
            c = g[i] @ grads[j] / (np.linalg.norm(g[i]) * np.linalg.norm(grads[j]))
            phi = targets[i, j]
            if (i, j) in fired:
                # any vector in span(g_i, g_j) with cosine phi to g_j, scaled to keep g_i's component
                a = np.linalg.norm(g[i]) * (phi * np.sqrt(1 - c * c) - c * np.sqrt(1 - phi * phi)) / (
                    np.linalg.norm(grads[j]) * np.sqrt(1 - phi * phi))
                g[i] = g[i] + a * grads[j]
                post = g[i] @ grads[j] / (np.linalg.norm(g[i]) * np.linalg.norm(grads[j]))
                errors.append(abs(post - phi))
            targets[i, j] = (1 - beta) * phi + beta * c
    if not np.allclose(g, res.diagnostics["adjusted"], atol=1e-10):
        errors.append(np.inf)
    return errors


def check_cagrad(samples: int = 200, seed: int = 5, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    errors, monotone = [], True
    for _ in range(samples):
        T = int(rng.integers(2, 5))
        b = random_bundle(rng, T, int(rng.integers(2, 9)))
        s0 = wt.WeightingState("CAGrad", T, hyperparams={"c": 0.0})
        errors.append(float(np.max(np.abs(wt.cagrad(b, s0).direction - wt.ew(b).direction))))
        _, history = wt.cagrad_inner(b.grads @ b.grads.T, float(rng.uniform(0.1, 1.0)))
        monotone &= bool(np.all(np.diff(history) <= 1e-15))
    return _result("CAGrad c=0 and monotone inner", samples, errors, tol, monotone)


def simplex_grid(T: int, step: float = 1e-3) -> np.ndarray:
    n = int(round(1 / step))
    if T == 2:
        a = np.arange(n + 1) / n
        return np.column_stack([a, 1 - a])
    if T == 3:
        i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
        keep = i + j <= n
        a, b = i[keep] / n, j[keep] / n
        return np.column_stack([a, b, 1 - a - b])
    raise ValueError("grid oracle only for T in {2, 3}")


def check_simplex(samples: int = 50, seed: int = 6, tol: float = 2e-3) -> CheckResult:
    rng = np.random.default_rng(seed)
    grids = {T: simplex_grid(T) for T in (2, 3)}
    errors = []
    for _ in range(samples):
        T = int(rng.integers(2, 4))
        v = rng.normal(0.3, 1.0, T)
        proj = wt.project_to_simplex(v)
        grid = grids[T]
        brute = grid[np.argmin(((grid - v) ** 2).sum(axis=1))]
        errors.append(float(np.linalg.norm(proj - brute)))
    return _result("simplex projection vs grid", samples, errors, tol)


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "autodiff": check_autodiff,
    "mlp": check_mlp_gradient,
    "mgda": check_mgda,
    "pcgrad": check_pcgrad,
    "imtl": check_imtl,
    "gradvac": check_gradvac,
    "cagrad": check_cagrad,
    "simplex": check_simplex,
}


def run_all(names=None, out=print) -> list[CheckResult]:
    results = []
    for name, check in CHECKS.items():
        if names and name not in names:
            continue
        r = check()
        out(r.line())
        results.append(r)
    return results

