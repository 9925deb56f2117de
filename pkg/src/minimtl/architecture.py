"""Parameter-sharing architectures over small dense backbones.

Every model splits its parameters into a shared encoder (``shared``) and one
linear head per task (``heads``). The encoder maps an input batch to one
representation per task; ``forward`` feeds each representation to its head.
For the single-input HPS model all tasks read the same representation tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor

ARCHITECTURES = ("HPS", "CrossStitch", "MMoE", "MTAN", "CGC", "PLE", "DSelectK")
SINGLE_INPUT_ONLY = frozenset({"CrossStitch"})
DSELECT_FLOOR = 1e-12


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    rep_dim: int = 16
    task_head_dims: tuple[int, ...] = (1, 1)
    num_shared_experts: int = 2
    num_task_experts: int = 1
    num_levels: int = 2
    top_k: int = 2
    gamma: float = 1.0
    entropy_reg: float = 0.0

    @property
    def num_tasks(self) -> int:
        return len(self.task_head_dims)

    def validate(self) -> None:
        if self.kind not in ARCHITECTURES:
            raise ArchitectureError(f"unknown architecture {self.kind!r}; "
                                    f"valid values: {', '.join(ARCHITECTURES)}")
        dims = (self.input_dim, self.rep_dim, *self.hidden_dims, *self.task_head_dims)
        if any(int(d) < 1 for d in dims):
            raise ArchitectureError(f"all layer sizes must be positive, got {dims}")
        if self.num_tasks < 1:
            raise ArchitectureError("need at least one task head")
        k = self.kind
        if k in ("MMoE", "CGC", "PLE", "DSelectK") and self.num_shared_experts < 1:
            raise ArchitectureError(f"{k} needs num_shared_experts >= 1")
        if k in ("CGC", "PLE") and self.num_task_experts < 0:
            raise ArchitectureError(f"{k} needs num_task_experts >= 0")
        if k == "PLE" and self.num_levels < 1:
            raise ArchitectureError("PLE needs num_levels >= 1")
        if k == "DSelectK":
            if not 1 <= self.top_k <= self.num_shared_experts:
                raise ArchitectureError(f"DSelectK needs 1 <= top_k <= num_shared_experts, "
                                        f"got top_k={self.top_k}, experts={self.num_shared_experts}")
            if self.gamma <= 0:
                raise ArchitectureError(f"DSelectK needs gamma > 0, got {self.gamma}")


@dataclass
class ModelOutput:
    outputs: list[Tensor]
    reps: list[Tensor]
    head_inputs: list[Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class MultiTaskModel:
    """Base class: parameter bookkeeping, heads and the forward plan."""

    kind = "base"

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        self.spec = spec
        self.num_tasks = spec.num_tasks
        self.shared: dict[str, Tensor] = {}
        self.heads: list[dict[str, Tensor]] = [{} for _ in range(self.num_tasks)]
        self._rng = rng
        self._last: tuple[object, ModelOutput] | None = None
        self._build()
        for t, out_dim in enumerate(spec.task_head_dims):
            self.heads[t]["weight"] = self._param(_glorot(rng, spec.rep_dim, out_dim))
            self.heads[t]["bias"] = self._param(np.zeros(out_dim))
        del self._rng

    # -- construction helpers ---------------------------------------------------
    @staticmethod
    def _param(value) -> Tensor:
        return Tensor(value, requires_grad=True)

    def _linear(self, prefix: str, fan_in: int, fan_out: int, zero: bool = False) -> None:
        w = np.zeros((fan_in, fan_out)) if zero else _glorot(self._rng, fan_in, fan_out)
        self.shared[f"{prefix}.weight"] = self._param(w)
        self.shared[f"{prefix}.bias"] = self._param(np.zeros(fan_out))

    def _mlp_params(self, prefix: str, dims: Sequence[int]) -> int:
        for i in range(len(dims) - 1):
            self._linear(f"{prefix}.{i}", dims[i], dims[i + 1])
        return len(dims) - 1

    def _apply_linear(self, prefix: str, x: Tensor) -> Tensor:
        return x @ self.shared[f"{prefix}.weight"] + self.shared[f"{prefix}.bias"]

    def _apply_mlp(self, prefix: str, x: Tensor, depth: int) -> Tensor:
        for i in range(depth):
            x = self._apply_linear(f"{prefix}.{i}", x).relu()
        return x

    @property
    def backbone_dims(self) -> list[int]:
        return [self.spec.input_dim, *self.spec.hidden_dims, self.spec.rep_dim]

    def _build(self) -> None:
        raise NotImplementedError

    def encode(self, x: Tensor, tasks: Sequence[int]) -> dict[int, Tensor]:
        raise NotImplementedError

    # -- parameters ---------------------------------------------------------------
    def shared_parameters(self) -> list[Tensor]:
        return list(self.shared.values())

    def task_parameters(self, task: int) -> list[Tensor]:
        return list(self.heads[task].values())

    def parameters(self) -> list[Tensor]:
        params = self.shared_parameters()
        for t in range(self.num_tasks):
            params.extend(self.task_parameters(t))
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        named = {f"shared.{k}": v for k, v in self.shared.items()}
        for t, head in enumerate(self.heads):
            named.update({f"head{t}.{k}": v for k, v in head.items()})
        return named

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.data) for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(state) != set(named):
            raise KeyError(f"parameter names differ: {sorted(set(state) ^ set(named))}")
        for k, v in state.items():
            if np.shape(v) != named[k].shape:
                raise ValueError(f"{k}: shape {np.shape(v)} != {named[k].shape}")
            named[k].data = np.array(v, dtype=np.float64)
            named[k].data.setflags(write=False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def auxiliary_loss(self) -> Tensor | None:
        return None

    # -- forward --------------------------------------------------------------------
    def forward(self, x, cut: Callable[[Tensor], Tensor] | None = None) -> ModelOutput:
        """Run the model.

        ``x`` is one Tensor (single-input: every task reads it) or a list with
        one Tensor per task (multi-input). ``cut`` is applied once to every
        distinct representation before the heads read it.
        """
        raw = x
        if isinstance(x, (Tensor, np.ndarray)):
            x = as_input(x)
            reps_by_task = self.encode(x, range(self.num_tasks))
            reps = [reps_by_task[t] for t in range(self.num_tasks)]
        else:
            if len(x) != self.num_tasks:
                raise ArchitectureError(f"multi-input forward needs {self.num_tasks} inputs, got {len(x)}")
            if self.kind in SINGLE_INPUT_ONLY:
                raise ArchitectureError(f"{self.kind} is single-input only: stitching needs aligned activations")
            reps = [self.encode(as_input(xt), [t])[t] for t, xt in enumerate(x)]
        cut_cache: dict[int, Tensor] = {}
        head_inputs = []
        for rep in reps:
            if cut is None:
                head_inputs.append(rep)
                continue
            if id(rep) not in cut_cache:
                cut_cache[id(rep)] = cut(rep)
            head_inputs.append(cut_cache[id(rep)])
        outputs = [h @ self.heads[t]["weight"] + self.heads[t]["bias"]
                   for t, h in enumerate(head_inputs)]
        out = ModelOutput(outputs, reps, head_inputs)
        self._last = (raw, out)
        return out

    __call__ = forward


def as_input(x) -> Tensor:
    t = tn.as_tensor(x)
    if t.ndim != 2:
        raise ArchitectureError(f"inputs must be (batch, features) matrices, got shape {t.shape}")
    return t


class HPS(MultiTaskModel):
    kind = "HPS"

    def _build(self):
        self.depth = self._mlp_params("encoder", self.backbone_dims)

    def encode(self, x, tasks):
        _check_width(self, x)
        rep = self._apply_mlp("encoder", x, self.depth)
        return {t: rep for t in tasks}


class CrossStitch(MultiTaskModel):
    kind = "CrossStitch"

    def _build(self):
        T = self.num_tasks
        dims = self.backbone_dims
        for t in range(T):
            self.depth = self._mlp_params(f"tower{t}", dims)
        if T == 1:
            init = np.ones((1, 1))
        else:
            off = 0.1 / (T - 1)
            init = np.full((T, T), off) + np.eye(T) * (0.9 - off)
        for i in range(self.depth):
            self.shared[f"stitch{i}"] = self._param(init)

    def encode(self, x, tasks):
        _check_width(self, x)
        T = self.num_tasks
        acts = [x] * T
        for i in range(self.depth):
            acts = [self._apply_linear(f"tower{t}.{i}", acts[t]).relu() for t in range(T)]
            S = self.shared[f"stitch{i}"]
            mixed = []
            for a in range(T):
                total = S[a:a + 1, 0:1] * acts[0]
                for b in range(1, T):
                    total = total + S[a:a + 1, b:b + 1] * acts[b]
                mixed.append(total)
            acts = mixed
        return {t: acts[t] for t in tasks}


def _mix(probs: Tensor, experts: Sequence[Tensor]) -> Tensor:
    total = probs[:, 0:1] * experts[0]
    for k in range(1, len(experts)):
        total = total + probs[:, k:k + 1] * experts[k]
    return total


class MMoE(MultiTaskModel):
    kind = "MMoE"

    def _build(self):
        K = self.spec.num_shared_experts
        for k in range(K):
            self.depth = self._mlp_params(f"expert{k}", self.backbone_dims)
        for t in range(self.num_tasks):
            self._linear(f"gate{t}", self.spec.input_dim, K, zero=True)

    def gate(self, x: Tensor, task: int) -> Tensor:
        return tn.softmax_rows(self._apply_linear(f"gate{task}", x))

    def encode(self, x, tasks):
        _check_width(self, x)
        experts = [self._apply_mlp(f"expert{k}", x, self.depth)
                   for k in range(self.spec.num_shared_experts)]
        return {t: _mix(self.gate(x, t), experts) for t in tasks}


class PLE(MultiTaskModel):
    """Stacked extraction levels; CGC is the single-level case.

    At each level task t's gate mixes its own experts with the shared ones.
    Below the top level a shared gate mixes every expert to feed the next
    level's shared path.
    """

    kind = "PLE"

    def _levels(self) -> int:
        return self.spec.num_levels

    def _build(self):
        s = self.spec
        T, Kt, Ks = self.num_tasks, s.num_task_experts, s.num_shared_experts
        self.depths = []
        for lvl in range(self._levels()):
            dims = self.backbone_dims if lvl == 0 else [s.rep_dim, s.rep_dim]
            in_dim = dims[0]
            for k in range(Ks):
                depth = self._mlp_params(f"level{lvl}.shared_expert{k}", dims)
            for t in range(T):
                for k in range(Kt):
                    self._mlp_params(f"level{lvl}.task{t}_expert{k}", dims)
            self.depths.append(depth)
            for t in range(T):
                self._linear(f"level{lvl}.gate{t}", in_dim, Kt + Ks, zero=True)
            if lvl < self._levels() - 1:
                self._linear(f"level{lvl}.shared_gate", in_dim, T * Kt + Ks, zero=True)

    def gate(self, level: int, name: str, x: Tensor) -> Tensor:
        return tn.softmax_rows(self._apply_linear(f"level{level}.{name}", x))

    def encode(self, x, tasks):
        _check_width(self, x)
        s = self.spec
        T, Kt, Ks = self.num_tasks, s.num_task_experts, s.num_shared_experts
        L = self._levels()
        task_in = [x] * T
        shared_in = x
        for lvl in range(L):
            depth = self.depths[lvl]
            top = lvl == L - 1
            # at the top level only the requested tasks' paths matter
            active = list(tasks) if top else range(T)
            shared_exp = [self._apply_mlp(f"level{lvl}.shared_expert{k}", shared_in, depth)
                          for k in range(Ks)]
            task_exp = {t: [self._apply_mlp(f"level{lvl}.task{t}_expert{k}", task_in[t], depth)
                            for k in range(Kt)] for t in (active if top else range(T))}
            new_task_in = list(task_in)
            for t in active:
                new_task_in[t] = _mix(self.gate(lvl, f"gate{t}", task_in[t]), task_exp[t] + shared_exp)
            if not top:
                everything = [e for t in range(T) for e in task_exp[t]] + shared_exp
                shared_in = _mix(self.gate(lvl, "shared_gate", shared_in), everything)
            task_in = new_task_in
        return {t: task_in[t] for t in tasks}


class CGC(PLE):
    kind = "CGC"

    def _levels(self) -> int:
        return 1


def dselectk_gate(z: Tensor, w_slots: Tensor, num_experts: int, gamma: float) -> Tensor:
    """Differentiable k-sparse expert selection.

    ``z`` holds ``top_k * nbits`` selection logits per row (slot-major) and
    ``w_slots`` one logit per slot. Each slot spreads mass over expert codes
    as a product of smooth-step bit probabilities; slots are combined by a
    softmax over ``w_slots``. When ``num_experts`` is not a power of two the
    unused codes are dropped and each slot is renormalised (after adding
    ``DSELECT_FLOOR`` to every kept code).
    """
    nbits = max(0, math.ceil(math.log2(num_experts))) if num_experts > 1 else 0
    top_k = w_slots.shape[1]
    if z.shape[1] != top_k * nbits:
        raise ArchitectureError(f"dselectk_gate: expected {top_k * nbits} selection logits, got {z.shape[1]}")
    n = z.shape[0]
    slot_mix = tn.softmax_rows(w_slots)
    if nbits == 0:
        return Tensor(np.ones((n, 1)))
    bits = tn.smooth_step(z, gamma)
    gate = None
    for m in range(top_k):
        cols = []
        for code in range(num_experts):
            prob = None
            for b in range(nbits):
                s = bits[:, m * nbits + b:m * nbits + b + 1]
                term = s if (code >> b) & 1 else 1.0 - s
                prob = term if prob is None else prob * term
            cols.append(prob)
        slot = tn.concat(cols, axis=1)
        if num_experts != 2 ** nbits:
            # the floor keeps a slot defined when saturated bits select only unused codes
            slot = slot + DSELECT_FLOOR
            slot = slot / slot.sum(axis=1, keepdims=True)
        weighted = slot_mix[:, m:m + 1] * slot
        gate = weighted if gate is None else gate + weighted
    return gate


class DSelectK(MultiTaskModel):
    kind = "DSelectK"

    def _build(self):
        s = self.spec
        K = s.num_shared_experts
        self.nbits = math.ceil(math.log2(K)) if K > 1 else 0
        for k in range(K):
            self.depth = self._mlp_params(f"expert{k}", self.backbone_dims)
        for t in range(self.num_tasks):
            if self.nbits:
                self._linear(f"gate{t}.z", s.input_dim, s.top_k * self.nbits, zero=True)
            self._linear(f"gate{t}.w", s.input_dim, s.top_k, zero=True)
        self._slot_probs: list[Tensor] = []

    def gate(self, x: Tensor, task: int) -> Tensor:
        s = self.spec
        z = self._apply_linear(f"gate{task}.z", x) if self.nbits else Tensor(np.zeros((x.shape[0], 0)))
        w = self._apply_linear(f"gate{task}.w", x)
        if self.nbits:
            self._slot_probs.append(tn.smooth_step(z, s.gamma))
        return dselectk_gate(z, w, s.num_shared_experts, s.gamma)

    def encode(self, x, tasks):
        _check_width(self, x)
        experts = [self._apply_mlp(f"expert{k}", x, self.depth)
                   for k in range(self.spec.num_shared_experts)]
        return {t: _mix(self.gate(x, t), experts) for t in tasks}

    def forward(self, x, cut=None):
        self._slot_probs = []
        return super().forward(x, cut)

    __call__ = forward

    def auxiliary_loss(self) -> Tensor | None:
        """Binary-entropy penalty pushing selection bits to 0/1; off unless entropy_reg > 0."""
        if self.spec.entropy_reg <= 0 or not self._slot_probs:
            return None
        total = None
        for p in self._slot_probs:
            ent = -(p * tn.log(p) + (1.0 - p) * tn.log(1.0 - p)).mean()
            total = ent if total is None else total + ent
        return total * self.spec.entropy_reg


class MTAN(MultiTaskModel):
    """Dense attention adaptation: per-task sigmoid masks over every shared layer."""

    kind = "MTAN"

    def _build(self):
        dims = self.backbone_dims
        self.depth = self._mlp_params("encoder", dims)
        for t in range(self.num_tasks):
            for i in range(self.depth):
                width = dims[i + 1]
                prev = dims[i] if i > 0 else 0
                self._linear(f"attn{t}.{i}", width + prev, width, zero=True)
                self._linear(f"transform{t}.{i}", width, width)

    def encode(self, x, tasks):
        _check_width(self, x)
        hidden = []
        h = x
        for i in range(self.depth):
            h = self._apply_linear(f"encoder.{i}", h).relu()
            hidden.append(h)
        self.masks: dict[int, list[Tensor]] = {}
        reps = {}
        for t in tasks:
            f = None
            masks = []
            for i, h in enumerate(hidden):
                a_in = h if f is None else tn.concat([h, f], axis=1)
                mask = self._apply_linear(f"attn{t}.{i}", a_in).sigmoid()
                masks.append(mask)
                f = self._apply_linear(f"transform{t}.{i}", mask * h).relu()
            self.masks[t] = masks
            reps[t] = f
        return reps


def _check_width(model: MultiTaskModel, x: Tensor) -> None:
    if x.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise ArchitectureError(f"{model.kind}: expected inputs of shape (batch, {model.spec.input_dim}), "
                                f"got {x.shape}")


_KINDS = {cls.kind: cls for cls in (HPS, CrossStitch, MMoE, MTAN, CGC, PLE, DSelectK)}


def build(spec: ArchSpec, num_tasks: int | None = None, seed: int = 0) -> MultiTaskModel:
    """Build and initialise a model. ``num_tasks`` overrides the head count (one output each)."""
    if num_tasks is not None and num_tasks != spec.num_tasks:
        spec = replace(spec, task_head_dims=(1,) * num_tasks)
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA7C4]))
    return _KINDS[spec.kind](spec, rng)


def shared_representation(model: MultiTaskModel, x, task: int) -> Tensor:
    """The representation feeding ``task``'s head from the last forward on ``x``."""
    if model._last is None or model._last[0] is not x:
        raise RuntimeError("shared_representation: run forward on this input first")
    return model._last[1].reps[task]


def count_parameters(model: MultiTaskModel) -> int:
    return int(sum(p.size for p in model.parameters()))
