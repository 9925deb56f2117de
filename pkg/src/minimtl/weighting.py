"""Loss weighting strategies.

Two families share one interface. Loss-weighting strategies (EW, UW, DWA,
GLS, RLW) turn the per-task losses into a single scalar before one backward
pass. Gradient-balancing strategies (GradNorm, MGDA, PCGrad, GradDrop, IMTL,
GradVac, CAGrad) look at the per-task gradients of the shared parameters (or
of the shared representation) and produce one update direction.

``aggregate`` works for all twelve on a gradient bundle; for the loss-level
strategies it returns the direction their weighted loss would induce.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as tn

STRATEGIES = ("EW", "GradNorm", "UW", "MGDA", "DWA", "GLS", "PCGrad", "GradDrop",
              "IMTL", "GradVac", "CAGrad", "RLW")
LOSS_STRATEGIES = frozenset({"EW", "UW", "DWA", "GLS", "RLW"})
GRADIENT_STRATEGIES = frozenset(STRATEGIES) - LOSS_STRATEGIES
REP_GRAD_ONLY = frozenset({"GradDrop"})

DEFAULT_HYPERPARAMS = {
    "GradNorm": {"alpha": 1.5, "weight_lr": 0.025},
    "DWA": {"tau": 2.0},
    "GradVac": {"beta": 0.01},
    "CAGrad": {"c": 0.4, "rescale": 1},
    "MGDA": {"norm_mode": "none"},
}

MGDA_NORM_MODES = ("none", "l2", "loss", "loss_plus")


class ConfigurationError(ValueError):
    """Strategy and gradient mode (or hyperparameters) do not fit together."""


@dataclass
class GradientBundle:
    grads: np.ndarray
    task_losses: np.ndarray
    mode: str = "param_grad"

    def __post_init__(self):
        self.grads = np.atleast_2d(np.asarray(self.grads, dtype=np.float64))
        self.task_losses = np.asarray(self.task_losses, dtype=np.float64).reshape(-1)
        if self.mode not in ("param_grad", "rep_grad"):
            raise ValueError(f"unknown gradient mode {self.mode!r}")
        if self.grads.shape[0] != self.task_losses.size:
            raise ValueError(f"{self.grads.shape[0]} gradient rows but "
                             f"{self.task_losses.size} task losses")
        if self.grads.shape[1] < 1:
            raise ValueError("gradient rows are empty")
        if not np.all(np.isfinite(self.grads)):
            raise FloatingPointError("gradient bundle contains non-finite entries")

    @property
    def num_tasks(self) -> int:
        return self.grads.shape[0]


@dataclass
class AggregationResult:
    direction: np.ndarray
    # None means the combination is elementwise (GradDrop) and has no per-task scalar.
    applied_weights: np.ndarray | None
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def degenerate(self) -> bool:
        return bool(self.diagnostics.get("degenerate", False))


@dataclass
class WeightingState:
    strategy: str
    num_tasks: int
    seed: int = 0
    hyperparams: dict[str, Any] = field(default_factory=dict)
    step: int = 0
    loss_history: list[np.ndarray] = field(default_factory=list)
    initial_losses: np.ndarray | None = None
    learnable_weights: np.ndarray | None = None
    log_vars: tn.Tensor | None = None
    ema_cosine: np.ndarray | None = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown weighting {self.strategy!r}; "
                                     f"valid values: {', '.join(STRATEGIES)}")
        if self.num_tasks < 1:
            raise ConfigurationError("need at least one task")
        self.hyperparams = {**DEFAULT_HYPERPARAMS.get(self.strategy, {}), **self.hyperparams}
        self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0x57EA]))
        T = self.num_tasks
        if self.strategy == "GradNorm":
            self.learnable_weights = np.ones(T)
        elif self.strategy == "UW":
            self.log_vars = tn.Tensor(np.zeros(T), requires_grad=True)
        elif self.strategy == "GradVac":
            self.ema_cosine = np.zeros((T, T))
        if self.strategy == "MGDA" and self.hyperparams["norm_mode"] not in MGDA_NORM_MODES:
            raise ConfigurationError(f"MGDA norm_mode must be one of {MGDA_NORM_MODES}")

    def trainable(self) -> list[tn.Tensor]:
        """Weighting parameters trained by the main optimizer (UW log-variances)."""
        return [self.log_vars] if self.log_vars is not None else []

    def end_epoch(self, mean_losses) -> None:
        """Push one epoch's mean per-task training losses (DWA keeps the last two)."""
        self.loss_history.append(np.asarray(mean_losses, dtype=np.float64).copy())
        del self.loss_history[:-2]


def check_mode(strategy: str, mode: str) -> None:
    if strategy in REP_GRAD_ONLY and mode != "rep_grad":
        raise ConfigurationError(f"{strategy} requires rep_grad mode: sign voting needs "
                                 "every task gradient in the shared representation's coordinates")


def _degenerate_tol(grads: np.ndarray) -> float:
    return 1e-12 * max(1.0, float(np.linalg.norm(grads, axis=1).max(initial=0.0)))


def _weighted(grads: np.ndarray, weights: np.ndarray, **diagnostics) -> AggregationResult:
    return AggregationResult(weights @ grads, weights, dict(diagnostics))


# -- loss-level strategies -----------------------------------------------------

def ew(bundle: GradientBundle) -> AggregationResult:
    T = bundle.num_tasks
    return _weighted(bundle.grads, np.full(T, 1.0 / T))


def ew_loss(losses: list[tn.Tensor]) -> tn.Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def uw(losses: list[tn.Tensor], state: WeightingState) -> tn.Tensor:
    """Sum of 0.5 * exp(-s_t) * L_t + 0.5 * s_t, with s_t = log sigma_t^2 on the tape."""
    s = state.log_vars
    total = None
    for t, loss in enumerate(losses):
        s_t = s[t:t + 1].sum()
        term = tn.exp(-s_t) * loss * 0.5 + s_t * 0.5
        total = term if total is None else total + term
    return total


def uw_weights(state: WeightingState) -> np.ndarray:
    return 0.5 * np.exp(-state.log_vars.data)


def dwa(state: WeightingState) -> np.ndarray:
    T = state.num_tasks
    if len(state.loss_history) < 2:
        return np.ones(T)
    prev, prev2 = state.loss_history[-1], state.loss_history[-2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(prev2 != 0, prev / prev2, 1.0)
    ratio = np.where(np.isfinite(ratio), ratio, 1.0)
    z = ratio / state.hyperparams["tau"]
    e = np.exp(z - z.max())
    return T * e / e.sum()


def gls(losses: list[tn.Tensor]) -> tn.Tensor:
    """Geometric mean of the losses, exp(mean(log L_t)). Log clamps at 1e-12."""
    logs = [tn.log(loss) for loss in losses]
    total = logs[0]
    for term in logs[1:]:
        total = total + term
    return tn.exp(total * (1.0 / len(losses)))


def gls_weights(task_losses) -> tuple[np.ndarray, bool]:
    """Implied weights d(total)/dL_t = total / (T * L_t); flag set if any loss was clamped."""
    L = np.asarray(task_losses, dtype=np.float64)
    clamped = bool(np.any(L <= tn.LOG_FLOOR))
    L = np.maximum(L, tn.LOG_FLOOR)
    total = np.exp(np.mean(np.log(L)))
    return total / (L.size * L), clamped


def rlw(state: WeightingState, num_tasks: int | None = None) -> np.ndarray:
    T = state.num_tasks if num_tasks is None else num_tasks
    z = state.rng.standard_normal(T)
    e = np.exp(z - z.max())
    return e / e.sum()


def loss_weights(state: WeightingState, task_losses) -> np.ndarray:
    """Per-task weights a loss-level strategy applies this step (draws RLW randomness)."""
    s = state.strategy
    T = state.num_tasks
    if s == "EW":
        return np.full(T, 1.0 / T)
    if s == "DWA":
        return dwa(state)
    if s == "RLW":
        return rlw(state)
    if s == "UW":
        return uw_weights(state)
    if s == "GLS":
        return gls_weights(task_losses)[0]
    raise ConfigurationError(f"{s} is not a loss-level strategy")


def weighted_loss(losses: list[tn.Tensor], state: WeightingState) -> tuple[tn.Tensor, np.ndarray]:
    """Scalar training loss for a loss-level strategy plus the weights applied."""
    values = np.array([loss.item() for loss in losses])
    s = state.strategy
    if s == "EW":
        return ew_loss(losses), np.full(len(losses), 1.0 / len(losses))
    if s == "UW":
        weights = uw_weights(state)
        return uw(losses, state), weights
    if s == "GLS":
        return gls(losses), gls_weights(values)[0]
    weights = loss_weights(state, values)
    total = losses[0] * float(weights[0])
    for w, loss in zip(weights[1:], losses[1:]):
        total = total + loss * float(w)
    return total, weights


# -- gradient-balancing strategies -----------------------------------------------

def gradnorm_step(bundle: GradientBundle, state: WeightingState,
                  weight_lr: float | None = None) -> AggregationResult:
    G_rows = bundle.grads
    T = bundle.num_tasks
    alpha = state.hyperparams["alpha"]
    lr = state.hyperparams["weight_lr"] if weight_lr is None else weight_lr
    losses = bundle.task_losses
    if state.initial_losses is None:
        state.initial_losses = np.maximum(losses.copy(), 1e-8)
    w = state.learnable_weights
    norms = np.linalg.norm(G_rows, axis=1)
    G = w * norms
    G_bar = G.mean()
    ratio = losses / state.initial_losses
    inverse_rate = ratio / ratio.mean() if ratio.mean() > 0 else np.ones(T)
    target = G_bar * inverse_rate**alpha
    objective = float(np.abs(G - target).sum())
    w = w - lr * np.sign(G - target) * norms
    w = w * (T / w.sum())
    state.learnable_weights = w
    return _weighted(G_rows, w.copy(), gradnorm_objective=objective)


def _normalize_rows(bundle: GradientBundle, norm_mode: str) -> np.ndarray:
    g = bundle.grads
    if norm_mode == "none":
        return g
    norms = np.linalg.norm(g, axis=1)
    losses = bundle.task_losses
    if norm_mode == "l2":
        scale = norms
    elif norm_mode == "loss":
        scale = losses
    elif norm_mode == "loss_plus":
        scale = losses * norms
    else:
        raise ConfigurationError(f"unknown MGDA norm_mode {norm_mode!r}")
    scale = np.where(scale > 1e-12, scale, 1.0)
    return g / scale[:, None]


def min_norm_element(grads: np.ndarray, max_iter: int = 250,
                     tol: float = 1e-6) -> tuple[np.ndarray, int]:
    """Frank-Wolfe for the min-norm point of the convex hull of the rows.

    Returns the convex coefficients and the number of iterations used.
    """
    T = grads.shape[0]
    gram = grads @ grads.T
    gamma = np.full(T, 1.0 / T)
    if T == 1:
        return gamma, 0
    value = gamma @ gram @ gamma
    it = 0
    for it in range(1, max_iter + 1):
        # gram @ gamma holds g_t . d for every vertex
        gd = gram @ gamma
        t = int(np.argmin(gd))
        # d(s) = (1 - s) d + s g_t; minimise |d(s)|^2 over s in [0, 1]
        dd, dv, vv = value, gd[t], gram[t, t]
        denom = dd - 2 * dv + vv
        if denom <= 0:
            break
        s = float(np.clip((dd - dv) / denom, 0.0, 1.0))
        new_gamma = (1 - s) * gamma
        new_gamma[t] += s
        new_value = new_gamma @ gram @ new_gamma
        improvement = value - new_value
        gamma, value = new_gamma, new_value
        if improvement < tol:
            break
    return gamma, it


def mgda(bundle: GradientBundle, state: WeightingState | None = None,
         norm_mode: str | None = None) -> AggregationResult:
    if norm_mode is None:
        norm_mode = state.hyperparams["norm_mode"] if state is not None else "none"
    g = _normalize_rows(bundle, norm_mode)
    if np.all(np.abs(g) == 0):
        T = bundle.num_tasks
        return AggregationResult(np.zeros(g.shape[1]), np.full(T, 1.0 / T),
                                 {"degenerate": True, "min_norm": 0.0, "iterations": 0})
    gamma, iters = min_norm_element(g)
    d = gamma @ g
    min_norm = float(d @ d)
    return AggregationResult(d, gamma, {"min_norm": min_norm, "iterations": iters,
                                        "degenerate": bool(np.sqrt(min_norm) <= _degenerate_tol(g))})


def _project_out(g: np.ndarray, onto: np.ndarray, onto_sq: float) -> tuple[np.ndarray, float]:
    coef = float(g @ onto) / onto_sq
    return g - coef * onto, coef


def pcgrad(bundle: GradientBundle, state: WeightingState) -> AggregationResult:
    grads = bundle.grads
    T = bundle.num_tasks
    sq = np.einsum("ij,ij->i", grads, grads)
    adjusted = grads.copy()
    weights = np.ones(T)
    targets: list[list[int]] = []
    for i in range(T):
        others = [j for j in range(T) if j != i]
        order = state.rng.permutation(others) if others else []
        hit = []
        for j in order:
            j = int(j)
            if sq[j] == 0 or adjusted[i] @ grads[j] >= 0:
                continue
            adjusted[i], coef = _project_out(adjusted[i], grads[j], sq[j])
            weights[j] -= coef
            hit.append(j)
        targets.append(hit)
    direction = adjusted.sum(axis=0)
    return AggregationResult(direction, weights, {"adjusted": adjusted, "projection_targets": targets,
                                                  "projections": sum(map(len, targets))})


def graddrop(bundle: GradientBundle, state: WeightingState,
             uniform: np.ndarray | None = None) -> AggregationResult:
    check_mode("GradDrop", bundle.mode)
    g = bundle.grads
    total = g.sum(axis=0)
    magnitude = np.abs(g).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        P = np.where(magnitude > 0, 0.5 * (1 + total / magnitude), 0.5)
    U = state.rng.random(g.shape[1]) if uniform is None else np.broadcast_to(uniform, P.shape)
    keep_positive = P > U
    # exactly one sign survives per element
    mask = np.where(keep_positive, g > 0, g < 0)
    return AggregationResult((g * mask).sum(axis=0), None,
                             {"kept_fraction": float(mask.mean())})


def imtl_g(bundle: GradientBundle, state: WeightingState | None = None,
           max_condition: float = 1e10) -> AggregationResult:
    g = bundle.grads
    T = bundle.num_tasks
    if T == 1:
        return _weighted(g, np.ones(1), variant="IMTL-G")
    norms = np.linalg.norm(g, axis=1)
    if np.any(norms <= _degenerate_tol(g)):
        return _weighted(g, np.full(T, 1.0 / T), degenerate=True, fallback="EW", variant="IMTL-G")
    u = g / norms[:, None]
    D = g[0] - g[1:]
    U = u[0] - u[1:]
    system = D @ U.T
    if not np.all(np.isfinite(system)) or np.linalg.cond(system) > max_condition:
        return _weighted(g, np.full(T, 1.0 / T), degenerate=True, fallback="EW", variant="IMTL-G")
    # alpha_rest solves alpha_rest @ (D U^T) = g_1 U^T
    alpha_rest = np.linalg.solve(system.T, U @ g[0])
    alpha = np.concatenate([[1.0 - alpha_rest.sum()], alpha_rest])
    return _weighted(g, alpha, variant="IMTL-G")


def gradvac(bundle: GradientBundle, state: WeightingState) -> AggregationResult:
    grads = bundle.grads
    T = bundle.num_tasks
    beta = state.hyperparams["beta"]
    target = state.ema_cosine
    norms = np.linalg.norm(grads, axis=1)
    adjusted = grads.copy()
    weights = np.ones(T)
    fired = []
    for i in range(T):
        for j in range(T):
            if i == j:
                continue
            ni = np.linalg.norm(adjusted[i])
            if ni == 0 or norms[j] == 0:
                continue
            c = float(adjusted[i] @ grads[j] / (ni * norms[j]))
            phi = target[i, j]
            root = np.sqrt(max(0.0, 1 - phi * phi))
            if c < phi and root > 0:
                a = ni * (phi * np.sqrt(max(0.0, 1 - c * c)) - c * root) / (norms[j] * root)
                adjusted[i] = adjusted[i] + a * grads[j]
                weights[j] += a
                fired.append((i, j, phi))
            target[i, j] = (1 - beta) * phi + beta * c
    return AggregationResult(adjusted.sum(axis=0), weights,
                             {"adjusted": adjusted, "fired": fired, "adjustments": len(fired)})


def project_to_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} by sort and threshold."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def cagrad_objective(w: np.ndarray, gram: np.ndarray, c: float) -> float:
    T = gram.shape[0]
    g0_dot = gram @ np.full(T, 1.0 / T)
    g0_norm = np.sqrt(max(0.0, np.full(T, 1.0 / T) @ g0_dot))
    gw_norm = np.sqrt(max(0.0, w @ gram @ w))
    return float(w @ g0_dot + c * g0_norm * gw_norm)


def cagrad_inner(gram: np.ndarray, c: float, step: float = 0.1, max_iter: int = 200,
                 tol: float = 1e-8) -> tuple[np.ndarray, list[float]]:
    """Projected gradient descent on the simplex for the conflict-averse weights.

    A step that would raise the objective is halved until it does not, so the
    returned objective trace never increases.
    """
    T = gram.shape[0]
    mean_w = np.full(T, 1.0 / T)
    g0_dot = gram @ mean_w
    g0_norm = np.sqrt(max(0.0, mean_w @ g0_dot))
    w = mean_w.copy()
    F = cagrad_objective(w, gram, c)
    history = [F]
    for _ in range(max_iter):
        gw_norm = np.sqrt(max(0.0, w @ gram @ w))
        slope = g0_dot.copy()
        if gw_norm > 1e-12:
            slope += c * g0_norm * (gram @ w) / gw_norm
        lr = step
        for _ in range(40):
            cand = project_to_simplex(w - lr * slope)
            F_cand = cagrad_objective(cand, gram, c)
            if F_cand <= F:
                break
            lr *= 0.5
        else:
            break
        delta = F - F_cand
        w, F = cand, F_cand
        history.append(F)
        if delta < tol:
            break
    return w, history


def cagrad(bundle: GradientBundle, state: WeightingState) -> AggregationResult:
    g = bundle.grads
    T = bundle.num_tasks
    c = state.hyperparams["c"]
    rescale = state.hyperparams.get("rescale", 1)
    mean_w = np.full(T, 1.0 / T)
    g0 = mean_w @ g
    g0_norm = np.linalg.norm(g0)
    if g0_norm <= _degenerate_tol(g):
        return AggregationResult(np.zeros(g.shape[1]), np.zeros(T), {"degenerate": True})
    if c == 0 or T == 1:
        # one task has nothing to conflict with
        return _weighted(g, mean_w, inner_iterations=0)
    gram = g @ g.T
    w, history = cagrad_inner(gram, c)
    gw = w @ g
    gw_norm = np.linalg.norm(gw)
    if gw_norm < 1e-12:
        return _weighted(g, mean_w, degenerate=True)
    lam = c * g0_norm / gw_norm
    weights = mean_w + lam * w
    if rescale:
        weights = weights / (1 + c * c)
    # built from the weights so the direction equals sum_t weights_t g_t
    return _weighted(g, weights, inner_iterations=len(history) - 1,
                     inner_objective=history[-1], objective_trace=history)


def aggregate(bundle: GradientBundle, state: WeightingState) -> AggregationResult:
    """Dispatch ``bundle`` to the state's strategy and advance its step counter."""
    s = state.strategy
    check_mode(s, bundle.mode)
    if bundle.num_tasks != state.num_tasks:
        raise ConfigurationError(f"bundle has {bundle.num_tasks} tasks, state expects {state.num_tasks}")
    if s in LOSS_STRATEGIES:
        result = _weighted(bundle.grads, loss_weights(state, bundle.task_losses))
    elif s == "GradNorm":
        result = gradnorm_step(bundle, state)
    elif s == "MGDA":
        result = mgda(bundle, state)
    elif s == "PCGrad":
        result = pcgrad(bundle, state)
    elif s == "GradDrop":
        result = graddrop(bundle, state)
    elif s == "IMTL":
        result = imtl_g(bundle, state)
    elif s == "GradVac":
        result = gradvac(bundle, state)
    else:
        result = cagrad(bundle, state)
    state.step += 1
    if not np.all(np.isfinite(result.direction)):
        raise FloatingPointError(f"{s} produced a non-finite direction")
    return result
