"""The training loop: binds an architecture, a weighting strategy and a data setting."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np

from . import tensor as tn
from . import weighting as wt
from .architecture import ARCHITECTURES, SINGLE_INPUT_ONLY, ArchSpec, MultiTaskModel, build, count_parameters
from .data import Batch, TaskDataset, batches, full_batch, is_single_input, train_val_split
from .tasks import compute_loss, compute_metric
from .tensor import Tensor

__all__ = ["TrainConfig", "RunReport", "Trainer", "collect_task_gradients", "run_experiment",
           "count_parameters", "ConfigError", "RunAborted"]

MODES = ("param_grad", "rep_grad")
OPTIMIZERS = ("sgd", "sgd_momentum", "adam")


class ConfigError(ValueError):
    """A TrainConfig violates one of its invariants."""


class RunAborted(FloatingPointError):
    """A non-finite loss or gradient appeared during training."""


@dataclass
class TrainConfig:
    weighting: str = "EW"
    arch: str = "HPS"
    mode: str = "param_grad"
    multi_input: bool = False
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 50
    seed: int = 0
    hidden_dims: tuple[int, ...] = (32,)
    rep_dim: int = 16
    experts: int = 2
    task_experts: int = 1
    levels: int = 2
    top_k: int = 2
    gamma: float = 1.0
    entropy_reg: float = 0.0
    alpha: float = 1.5
    weight_lr: float = 0.025
    tau: float = 2.0
    c: float = 0.4
    cagrad_rescale: bool = True
    beta: float = 0.01
    mgda_norm: str = "none"
    val_fraction: float = 0.2
    trace_weights: bool = False

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)

    def validate(self) -> None:
        if self.weighting not in wt.STRATEGIES:
            raise ConfigError(f"unknown weighting {self.weighting!r}; valid values: {', '.join(wt.STRATEGIES)}")
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; valid values: {', '.join(ARCHITECTURES)}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; valid values: {', '.join(MODES)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}; valid values: {', '.join(OPTIMIZERS)}")
        if self.weighting in wt.REP_GRAD_ONLY and self.mode != "rep_grad":
            raise ConfigError(f"{self.weighting} requires rep_grad mode (--mode rep)")
        if self.mode == "rep_grad" and self.multi_input:
            raise ConfigError("rep_grad mode requires the single-input setting")
        if self.arch in SINGLE_INPUT_ONLY and self.multi_input:
            raise ConfigError(f"{self.arch} requires the single-input setting")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1, epochs >= 0 and lr > 0")
        if self.mgda_norm not in wt.MGDA_NORM_MODES:
            raise ConfigError(f"unknown MGDA normalisation {self.mgda_norm!r}")
        if self.c < 0:
            raise ConfigError("CAGrad c must be >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")

    def arch_spec(self, input_dim: int, head_dims: Sequence[int]) -> ArchSpec:
        return ArchSpec(kind=self.arch, input_dim=input_dim, hidden_dims=self.hidden_dims,
                        rep_dim=self.rep_dim, task_head_dims=tuple(head_dims),
                        num_shared_experts=self.experts, num_task_experts=self.task_experts,
                        num_levels=self.levels, top_k=min(self.top_k, self.experts),
                        gamma=self.gamma, entropy_reg=self.entropy_reg)

    def weighting_hyperparams(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "weight_lr": self.weight_lr, "tau": self.tau, "c": self.c,
                "rescale": int(self.cagrad_rescale), "beta": self.beta, "norm_mode": self.mgda_norm}

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# -- optimizers --------------------------------------------------------------------

class Optimizer:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p.data = self._update(p, np.asarray(g, dtype=np.float64).reshape(p.shape))
            p.data.setflags(write=False)

    def _update(self, p: Tensor, g: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity: dict[int, np.ndarray] = {}

    def _update(self, p, g):
        if self.momentum:
            v = self.momentum * self.velocity.get(id(p), 0.0) + g
            self.velocity[id(p)] = v
            g = v
        return p.data - self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros(p.shape) for p in self.params}
        self.v = {id(p): np.zeros(p.shape) for p in self.params}

    def step(self, grads):
        self.t += 1
        super().step(grads)

    def _update(self, p, g):
        m = self.m[id(p)] = self.b1 * self.m[id(p)] + (1 - self.b1) * g
        v = self.v[id(p)] = self.b2 * self.v[id(p)] + (1 - self.b2) * g * g
        m_hat = m / (1 - self.b1 ** self.t)
        v_hat = v / (1 - self.b2 ** self.t)
        return p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, params: Sequence[Tensor]) -> Optimizer:
    if config.optimizer == "adam":
        return Adam(params, config.lr, (config.beta1, config.beta2), config.eps)
    if config.optimizer == "sgd_momentum":
        return SGD(params, config.lr, config.momentum)
    return SGD(params, config.lr)


# -- gradient acquisition ------------------------------------------------------------

@dataclass
class TaskGradients:
    bundle: wt.GradientBundle
    head_grads: list[list[np.ndarray]]
    losses: list[Tensor]
    # rep_grad only: live representation tensors, in the order their slices appear in each row
    reps: list[Tensor] = field(default_factory=list)


def task_losses(model: MultiTaskModel, batch: Batch, tasks, cut=None) -> list[Tensor]:
    out = model.forward(batch.model_input, cut=cut)
    return [compute_loss(task, out.outputs[t], batch.targets[t]) for t, task in enumerate(tasks)]


def _check_finite(losses: Sequence[Tensor]) -> np.ndarray:
    values = np.array([loss.item() for loss in losses])
    if not np.all(np.isfinite(values)):
        raise RunAborted(f"non-finite task loss {values.tolist()}")
    return values


def _flat(gmap: dict, params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([gmap[p].reshape(-1) if p in gmap else np.zeros(p.size) for p in params])


def collect_task_gradients(model: MultiTaskModel, batch: Batch, mode: str, tasks) -> TaskGradients:
    """Per-task gradients of the shared parameters (param_grad) or representation (rep_grad).

    Head gradients are always the plain per-task ones.
    """
    T = model.num_tasks
    heads = [model.task_parameters(t) for t in range(T)]
    if mode == "param_grad":
        losses = task_losses(model, batch, tasks)
        values = _check_finite(losses)
        shared = model.shared_parameters()
        rows, head_grads = [], []
        for t in range(T):
            gmap = tn.backward(losses[t], accumulate=False)
            rows.append(_flat(gmap, shared))
            head_grads.append([gmap.get(p, np.zeros(p.shape)) for p in heads[t]])
        return TaskGradients(_bundle(rows, values, mode), head_grads, losses)
    if mode != "rep_grad":
        raise ConfigError(f"unknown mode {mode!r}")
    if not batch.single_input:
        raise ConfigError("rep_grad mode requires the single-input setting")
    live: list[Tensor] = []
    leaves: list[Tensor] = []

    def cut(rep: Tensor) -> Tensor:
        leaf = rep.detach(requires_grad=True)
        live.append(rep)
        leaves.append(leaf)
        return leaf

    losses = task_losses(model, batch, tasks, cut=cut)
    values = _check_finite(losses)
    rows, head_grads = [], []
    for t in range(T):
        gmap = tn.backward(losses[t], accumulate=False)
        rows.append(_flat(gmap, leaves))
        head_grads.append([gmap.get(p, np.zeros(p.shape)) for p in heads[t]])
    return TaskGradients(_bundle(rows, values, mode), head_grads, losses, reps=live)


def _bundle(rows, values, mode) -> wt.GradientBundle:
    grads = np.vstack(rows)
    if not np.all(np.isfinite(grads)):
        raise RunAborted("non-finite task gradient")
    return wt.GradientBundle(grads, values, mode)


def shared_gradients(model: MultiTaskModel, tg: TaskGradients, direction: np.ndarray) -> list[np.ndarray]:
    """Turn an aggregated direction into gradients for every shared parameter."""
    shared = model.shared_parameters()
    if tg.bundle.mode == "param_grad":
        out, offset = [], 0
        for p in shared:
            out.append(direction[offset:offset + p.size].reshape(p.shape))
            offset += p.size
        return out
    # one backward from sum_r <direction slice, rep_r>
    surrogate, offset = None, 0
    for rep in tg.reps:
        piece = Tensor(direction[offset:offset + rep.size].reshape(rep.shape))
        offset += rep.size
        term = (rep * piece).sum()
        surrogate = term if surrogate is None else surrogate + term
    gmap = tn.backward(surrogate, accumulate=False)
    return [gmap.get(p, np.zeros(p.shape)) for p in shared]


# -- steps and runs ----------------------------------------------------------------------

@dataclass
class StepRecord:
    losses: np.ndarray
    weights: np.ndarray | None
    degenerate: bool
    diagnostics: dict[str, Any] = field(default_factory=dict)


class Trainer:
    def __init__(self, config: TrainConfig, model: MultiTaskModel, tasks):
        config.validate()
        self.config = config
        self.model = model
        self.tasks = list(tasks)
        self.state = wt.WeightingState(config.weighting, model.num_tasks, seed=config.seed,
                                       hyperparams=config.weighting_hyperparams())
        self.params = model.parameters() + self.state.trainable()
        self.optimizer = make_optimizer(config, self.params)

    def train_step(self, batch: Batch) -> StepRecord:
        if self.config.weighting in wt.LOSS_STRATEGIES:
            record, grads = self._loss_weighted_grads(batch)
        else:
            record, grads = self._balanced_grads(batch)
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise RunAborted("non-finite parameter gradient")
        self.optimizer.step(grads)
        return record

    def _loss_weighted_grads(self, batch):
        losses = task_losses(self.model, batch, self.tasks)
        values = _check_finite(losses)
        total, weights = wt.weighted_loss(losses, self.state)
        aux = self.model.auxiliary_loss()
        if aux is not None:
            total = total + aux
        self.state.step += 1
        gmap = tn.backward(total, accumulate=False)
        grads = [gmap.get(p, np.zeros(p.shape)) for p in self.params]
        return StepRecord(values, weights, False), grads

    def _balanced_grads(self, batch):
        tg = collect_task_gradients(self.model, batch, self.config.mode, self.tasks)
        result = wt.aggregate(tg.bundle, self.state)
        shared = shared_gradients(self.model, tg, result.direction)
        aux = self.model.auxiliary_loss()
        if aux is not None:
            amap = tn.backward(aux, accumulate=False)
            shared = [g + amap.get(p, 0.0) for g, p in zip(shared, self.model.shared_parameters())]
        grads = list(shared)
        for hg in tg.head_grads:
            grads.extend(hg)
        grads.extend(np.zeros(p.shape) for p in self.state.trainable())
        diagnostics = {k: v for k, v in result.diagnostics.items() if np.isscalar(v)}
        return StepRecord(tg.bundle.task_losses, result.applied_weights, result.degenerate, diagnostics), grads

    def evaluate(self, datasets: Sequence[TaskDataset], single_input: bool) -> tuple[list[float], list[float]]:
        """Full-dataset (loss, metric) per task."""
        batch = full_batch(datasets, single_input)
        out = self.model.forward(batch.model_input)
        losses = [compute_loss(task, out.outputs[t], batch.targets[t]).item()
                  for t, task in enumerate(self.tasks)]
        metrics = [compute_metric(task, out.outputs[t], batch.targets[t])
                   for t, task in enumerate(self.tasks)]
        return losses, metrics


@dataclass
class RunReport:
    config: dict[str, Any]
    task_names: list[str]
    param_count: int
    epochs: list[dict[str, Any]] = field(default_factory=list)
    final_train_losses: list[float] = field(default_factory=list)
    weights_trace: list[list[Any]] = field(default_factory=list)
    steps: int = 0
    wall_seconds: float = 0.0
    aborted: bool = False
    abort_reason: str | None = None
    degenerate_events: int = 0

    def epoch_losses(self) -> np.ndarray:
        """(epochs + 1) x T grid of train losses; row 0 is the initial evaluation."""
        return np.array([[p["train_loss"] for p in e["per_task"]] for e in self.epochs])

    def to_dict(self, include_timing: bool = True) -> dict[str, Any]:
        return {
            "config": self.config,
            "param_count": self.param_count,
            "steps": self.steps,
            "epochs": self.epochs,
            "final_train_losses": self.final_train_losses,
            "weights_trace_path": None,
            "wall_seconds": self.wall_seconds if include_timing else None,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "degenerate_events": self.degenerate_events,
        }


def _epoch_entry(epoch: int, names, train_losses, metrics) -> dict[str, Any]:
    return {"epoch": epoch,
            "per_task": [{"name": n, "train_loss": float(l), "val_metric": float(m)}
                         for n, l, m in zip(names, train_losses, metrics)]}


def prepare(config: TrainConfig, datasets: Sequence[TaskDataset]):
    """Validate, split and build everything a run needs (model seeded from config.seed)."""
    config.validate()
    single = not config.multi_input
    if single and not is_single_input(datasets):
        raise ConfigError("single-input setting needs datasets that share one input matrix")
    train, val = train_val_split(datasets, config.val_fraction)
    tasks = [d.task for d in datasets]
    spec = config.arch_spec(datasets[0].inputs.shape[1], [t.output_dim for t in tasks])
    model = build(spec, seed=config.seed)
    return Trainer(config, model, tasks), train, val


def run_experiment(config: TrainConfig, datasets: Sequence[TaskDataset]) -> RunReport:
    start = time.perf_counter()
    trainer, train, val = prepare(config, datasets)
    single = not config.multi_input
    names = [t.name for t in trainer.tasks]
    report = RunReport(config.to_dict(), names, count_parameters(trainer.model))
    init_losses, _ = trainer.evaluate(train, single)
    _, init_metrics = trainer.evaluate(val, single)
    report.epochs.append(_epoch_entry(0, names, init_losses, init_metrics))
    # divergence is caught by explicit finiteness checks, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            for epoch in range(1, config.epochs + 1):
                sums = np.zeros(len(names))
                counts = np.zeros(len(names))
                for batch in batches(train, config.batch_size, single, (config.seed, epoch)):
                    rec = trainer.train_step(batch)
                    report.steps += 1
                    sums += rec.losses * np.array(batch.sizes)
                    counts += batch.sizes
                    report.degenerate_events += int(rec.degenerate)
                    if config.trace_weights:
                        w = [None] * len(names) if rec.weights is None else [float(v) for v in rec.weights]
                        report.weights_trace.append([report.steps, epoch, *w])
                mean_losses = sums / counts
                trainer.state.end_epoch(mean_losses)
                _, metrics = trainer.evaluate(val, single)
                if not (np.all(np.isfinite(mean_losses)) and np.all(np.isfinite(metrics))):
                    raise RunAborted("non-finite epoch summary")
                report.epochs.append(_epoch_entry(epoch, names, mean_losses, metrics))
            final, _ = trainer.evaluate(train, single)
            if not np.all(np.isfinite(final)):
                raise RunAborted("non-finite final loss")
            report.final_train_losses = [float(v) for v in final]
        except RunAborted as exc:
            report.aborted = True
            report.abort_reason = str(exc)
    report.wall_seconds = time.perf_counter() - start
    return report
