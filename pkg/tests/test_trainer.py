import numpy as np
import pytest

from minimtl import data
from minimtl import tensor as tn
from minimtl.architecture import ARCHITECTURES, count_parameters
from minimtl.cli import report_json
from minimtl.tasks import compute_loss
from minimtl.trainer import (ConfigError, TrainConfig, Trainer, collect_task_gradients, prepare,
                             run_experiment, shared_gradients)
from minimtl.weighting import STRATEGIES, ew


def toy(T=2, n=40, d=6, seed=0):
    return data.gen_single_input(T, n, d, seed=seed)


def first_batch(datasets, bs=8, single=True):
    return next(data.batches(datasets, bs, single, 0))


def make(config, datasets):
    trainer, train, _ = prepare(config, datasets)
    return trainer, first_batch(train, single=not config.multi_input)


def small(**kw):
    base = dict(hidden_dims=(8,), rep_dim=4, epochs=2, batch_size=8)
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


# -- config -----------------------------------------------------------------------

@pytest.mark.parametrize("kw, match", [
    (dict(weighting="GradDrop"), "rep_grad"),
    (dict(mode="rep_grad", multi_input=True), "single-input"),
    (dict(arch="CrossStitch", multi_input=True), "single-input"),
    (dict(weighting="Foo"), "valid values"),
    (dict(batch_size=0), "batch_size"),
])
def test_config_invariants(kw, match):
    with pytest.raises(ConfigError, match=match):
        TrainConfig(**kw).validate()


def test_config_dict_round_trip():
    c = small(weighting="CAGrad", c=0.7, hidden_dims=(3, 5))
    assert TrainConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"bogus": 1})


# -- gradient acquisition --------------------------------------------------------------

def test_single_task_row_is_plain_gradient():
    ds = toy(T=1)
    trainer, batch = make(small(), ds)
    tg = collect_task_gradients(trainer.model, batch, "param_grad", trainer.tasks)
    theta = trainer.model.shared_parameters()
    plain = tn.grad(tg.losses[0], theta)
    np.testing.assert_array_equal(tg.bundle.grads[0], np.concatenate([g.ravel() for g in plain]))


@pytest.mark.parametrize("arch", ["HPS", "MMoE", "MTAN"])
def test_param_grad_rows_match_finite_differences(arch):
    ds = toy()
    trainer, batch = make(small(arch=arch), ds)
    model = trainer.model
    tg = collect_task_gradients(model, batch, "param_grad", trainer.tasks)
    theta = model.shared_parameters()
    sizes = [p.size for p in theta]
    offsets = np.cumsum([0] + sizes)
    rng = np.random.default_rng(0)
    h = 1e-5
    for t in range(2):
        for flat in rng.integers(0, offsets[-1], 8):
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p = theta[k]
            idx = np.unravel_index(flat - offsets[k], p.shape)
            orig = p.data.copy()
            vals = []
            for sign in (1, -1):
                bumped = orig.copy()
                bumped[idx] += sign * h
                p.data = bumped
                out = model.forward(batch.model_input)
                vals.append(compute_loss(trainer.tasks[t], out.outputs[t], batch.targets[t]).item())
            p.data = orig
            numeric = (vals[0] - vals[1]) / (2 * h)
            analytic = tg.bundle.grads[t, flat]
            assert abs(analytic - numeric) / max(1.0, abs(analytic)) < 1e-5


def test_rep_grad_dimension():
    ds = toy()
    trainer, batch = make(small(mode="rep_grad"), ds)
    tg = collect_task_gradients(trainer.model, batch, "rep_grad", trainer.tasks)
    # HPS: one representation shared by both tasks
    assert tg.bundle.grads.shape == (2, 8 * 4)
    trainer, batch = make(small(mode="rep_grad", arch="MMoE"), ds)
    tg = collect_task_gradients(trainer.model, batch, "rep_grad", trainer.tasks)
    # MMoE: one representation per task, concatenated
    assert tg.bundle.grads.shape == (2, 2 * 8 * 4)
    assert not np.any(tg.bundle.grads[0, 32:]) and not np.any(tg.bundle.grads[1, :32])


@pytest.mark.parametrize("arch", ["HPS", "MMoE", "PLE", "MTAN"])
def test_rep_grad_matches_param_grad_for_linear_aggregation(arch):
    """The mean direction is linear, so routing it through the representation is exact."""
    ds = toy()
    trainer, batch = make(small(arch=arch), ds)
    model = trainer.model
    exact = collect_task_gradients(model, batch, "param_grad", trainer.tasks)
    ref = shared_gradients(model, exact, ew(exact.bundle).direction)
    rep = collect_task_gradients(model, batch, "rep_grad", trainer.tasks)
    via_rep = shared_gradients(model, rep, ew(rep.bundle).direction)
    for a, b in zip(ref, via_rep):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


# -- train_step ------------------------------------------------------------------------

def test_ew_step_equals_manual_update():
    ds = toy()
    cfg = small(optimizer="sgd", lr=0.05)
    trainer, batch = make(cfg, ds)
    model = trainer.model
    before = snapshot(model)
    out = model.forward(batch.model_input)
    losses = [compute_loss(t, out.outputs[i], batch.targets[i]) for i, t in enumerate(trainer.tasks)]
    params = model.parameters()
    manual = tn.grad((losses[0] + losses[1]) * 0.5, params)
    trainer.train_step(batch)
    names = list(model.named_parameters())
    for name, g in zip(names, manual):
        np.testing.assert_allclose(model.state_dict()[name], before[name] - 0.05 * g, rtol=0, atol=1e-10)


@pytest.mark.parametrize("weighting", ["DWA", "RLW", "GLS"])
def test_loss_weighting_gradient_is_weighted_sum(weighting):
    ds = toy()
    trainer, batch = make(small(weighting=weighting, optimizer="sgd", lr=1.0), ds)
    model = trainer.model
    before = snapshot(model)
    rec = trainer.train_step(batch)
    model.load_state_dict(before)
    out = model.forward(batch.model_input)
    losses = [compute_loss(t, out.outputs[i], batch.targets[i]) for i, t in enumerate(trainer.tasks)]
    theta = model.shared_parameters()
    rows = [np.concatenate([g.ravel() for g in tn.grad(l, theta)]) for l in losses]
    manual = rec.weights @ np.vstack(rows)
    trainer2, _ = make(small(weighting=weighting, optimizer="sgd", lr=1.0), ds)
    trainer2.model.load_state_dict(before)
    trainer2.train_step(batch)
    step = np.concatenate([before[f"shared.{k}"].ravel() - trainer2.model.shared[k].data.ravel()
                           for k in trainer2.model.shared])
    np.testing.assert_allclose(step, manual, rtol=0, atol=1e-10)


def test_cagrad_zero_radius_matches_ew_on_shared_parameters():
    ds = toy()
    a, batch = make(small(optimizer="sgd", lr=1.0), ds)
    b, _ = make(small(weighting="CAGrad", c=0.0, optimizer="sgd", lr=1.0), ds)
    before = snapshot(a.model)
    a.train_step(batch)
    b.train_step(batch)
    for k in a.model.shared:
        np.testing.assert_allclose(a.model.shared[k].data, b.model.shared[k].data, rtol=0, atol=1e-10)
    assert set(before) == set(b.model.state_dict())


def test_uw_updates_log_variances_in_same_step():
    trainer, batch = make(small(weighting="UW"), toy())
    s0 = trainer.state.log_vars.data.copy()
    trainer.train_step(batch)
    assert not np.array_equal(trainer.state.log_vars.data, s0)


@pytest.mark.parametrize("weighting", ["MGDA", "PCGrad", "IMTL", "GradVac", "CAGrad", "GradNorm"])
def test_head_update_depends_only_on_own_loss(weighting):
    ds = toy()
    cfg = small(weighting=weighting, optimizer="sgd", lr=0.1)
    t1, batch = make(cfg, ds)
    t2, _ = make(cfg, ds)
    other = data.Batch(batch.inputs, [batch.targets[0], batch.targets[1] + 3.0], True)
    t1.train_step(batch)
    t2.train_step(other)
    for k in ("weight", "bias"):
        np.testing.assert_array_equal(t1.model.heads[0][k].data, t2.model.heads[0][k].data)
    assert not np.array_equal(t1.model.heads[1]["weight"].data, t2.model.heads[1]["weight"].data)


@pytest.mark.parametrize("weighting", STRATEGIES)
def test_every_strategy_steps_without_changing_parameter_count(weighting):
    mode = "rep_grad" if weighting == "GradDrop" else "param_grad"
    trainer, batch = make(small(weighting=weighting, mode=mode, arch="MMoE"), toy())
    n = count_parameters(trainer.model)
    for _ in range(3):
        rec = trainer.train_step(batch)
        assert np.all(np.isfinite(rec.losses))
    assert count_parameters(trainer.model) == n


def test_dselectk_entropy_regulariser_reaches_gates():
    cfg = small(arch="DSelectK", experts=4, entropy_reg=0.5, optimizer="sgd", lr=0.1)
    trainer, batch = make(cfg, toy())
    trainer.model.forward(batch.model_input)
    z_before = trainer.model.shared["gate0.z.weight"].data.copy()
    trainer.train_step(batch)
    assert not np.array_equal(trainer.model.shared["gate0.z.weight"].data, z_before)


# -- run_experiment ------------------------------------------------------------------------

def test_zero_epochs_reports_initial_evaluation_only():
    r = run_experiment(small(epochs=0), toy())
    assert len(r.epochs) == 1 and r.epochs[0]["epoch"] == 0 and r.steps == 0
    assert len(r.final_train_losses) == 2


def test_report_shape():
    r = run_experiment(small(epochs=3, trace_weights=True), toy())
    assert [e["epoch"] for e in r.epochs] == [0, 1, 2, 3]
    assert r.steps == 3 * 4  # 32 training rows, batches of 8
    assert len(r.weights_trace) == r.steps
    assert r.epoch_losses().shape == (4, 2)


@pytest.mark.parametrize("cfg", [
    dict(weighting="RLW", arch="PLE"),
    dict(weighting="PCGrad", arch="MTAN", multi_input=True),
    dict(weighting="GradDrop", arch="MMoE", mode="rep_grad"),
    dict(weighting="GradNorm", arch="DSelectK", optimizer="sgd_momentum"),
])
def test_identical_runs_give_identical_json(cfg):
    config = small(**cfg)
    gen = data.gen_multi_input if config.multi_input else data.gen_single_input
    a = report_json(run_experiment(config, gen(2, 40, 6, seed=1)), include_timing=False)
    b = report_json(run_experiment(small(**cfg), gen(2, 40, 6, seed=1)), include_timing=False)
    assert a == b


def test_divergence_aborts_with_partial_report():
    r = run_experiment(small(optimizer="sgd", lr=1e12, epochs=5), toy())
    assert r.aborted and r.abort_reason
    assert len(r.epochs) < 6
    assert r.final_train_losses == []


def test_single_input_config_rejects_multi_input_data():
    with pytest.raises(ConfigError):
        prepare(small(), data.gen_multi_input(2, 20, 6, seed=0))


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_training_reduces_loss(arch):
    r = run_experiment(small(arch=arch, epochs=8, lr=5e-3), toy(n=80))
    e = r.epoch_losses()
    assert e[-1].sum() < e[0].sum()


def test_trainer_rejects_invalid_config():
    with pytest.raises(ConfigError):
        Trainer(TrainConfig(weighting="GradDrop"), None, [])
