import math

import numpy as np
import pytest

import snplab.meta as meta
from snplab.core import ModelConfig, ParamVector, init_params, interpolate, loss_and_grad, sgd_step
from snplab.errors import DivergenceError, InsufficientSamplesError, NonFiniteLossError
from snplab.meta import (
    STREAM_INIT,
    HyperParams,
    base_params,
    interpolation_drift_curve,
    measure_subspace_radius,
    radius_from_curve,
    recovery_check,
    sample_drift_profile,
    task_meta_loss,
    train_space,
    with_hyper,
)
from snplab.tasks import Task, make_rng
from snplab.telemetry import Telemetry

import oracles

FAST = HyperParams(K=3, epochs_train=3, lr_base=0.3, lr_meta=0.3, S=2, I=(0.01, 0.1))


@pytest.fixture
def tasks(small_suite):
    return list(small_suite.seen[:3])


@pytest.fixture
def theta(small_model):
    return init_params(small_model, make_rng(0, STREAM_INIT))


@pytest.fixture
def quadratic(monkeypatch):
    """Swap the model loss for 0.5 * ||theta - c||^2 inside the meta module."""
    center = np.array([0.5, -1.0, 2.0])

    def fake(params, config, batch):
        diff = params.values - center
        return 0.5 * float(diff @ diff), params.with_values(diff)

    monkeypatch.setattr(meta, "loss_and_grad", fake)
    return center


def _pv(values):
    return ParamVector(np.asarray(values, dtype=float), (("w", (len(values),)),))


def _task(seed=0, n_cls=3, per_class=6, dim=3):
    rng = make_rng(seed)
    y = np.repeat(np.arange(n_cls), per_class)
    return Task("X", rng.standard_normal((y.size, dim)), y, rng.standard_normal((n_cls * 2, dim)),
                np.repeat(np.arange(n_cls), 2), rng.standard_normal((n_cls, dim)))


def test_hyper_validation_and_fidelity_defaults():
    with pytest.raises(ValueError):
        HyperParams(lr_base=-1.0)
    with pytest.raises(ValueError):
        HyperParams(I=(0.5, 1.5))
    with pytest.raises(ValueError):
        HyperParams(S=0)
    p = HyperParams.paper_fidelity()
    assert (p.epochs_train, p.epochs_expand, p.lr_base, p.S, p.beta_base_default) == (10000, 500, 0.0005, 1000, 0.5)
    assert HyperParams.from_dict(p.to_dict()) == p


# ---------------------------------------------------------------- projection


def test_zero_lr_projection_is_identity(theta, tasks, small_model):
    for b in base_params(theta, tasks, 3, 0.0, small_model):
        assert b == theta


def test_projection_matches_composition_oracle(theta, tasks, small_model):
    got = base_params(theta, tasks, 3, 0.4, small_model)
    for t, b in zip(tasks, got):
        support = t.support_set(3)
        _, g = loss_and_grad(theta, small_model, support)
        assert b == sgd_step(theta, g, 0.4)
        assert np.array_equal(b.values, theta.values - 0.4 * g.values)


def test_projection_names_short_task(theta, small_model, small_spec, tasks):
    with pytest.raises(InsufficientSamplesError) as info:
        base_params(theta, tasks, small_spec.support_per_class + 1, 0.1, small_model)
    assert info.value.task_id == "T0"


# ------------------------------------------------------------- task meta loss


def test_zero_lr_meta_loss_is_plain_loss(theta, tasks, small_model):
    loss, g = task_meta_loss(theta, tasks[0], 0.0, small_model, K=3)
    ref_loss, ref_g = loss_and_grad(theta, small_model, tasks[0].pool_batch())
    assert loss == ref_loss and g == ref_g


def test_quadratic_meta_loss_closed_form(quadratic):
    th = _pv([2.0, 1.0, -1.0])
    for lr in (0.0, 0.25, 0.7):
        loss, g = task_meta_loss(th, _task(), lr, None, K=2)
        diff = th.values - quadratic
        assert loss == pytest.approx(0.5 * (1 - lr) ** 2 * diff @ diff, rel=1e-14)
        assert np.allclose(g.values, (1 - lr) * diff, rtol=1e-14)


@pytest.mark.parametrize("seed", [4, 5, 6])
@pytest.mark.parametrize("lr", [0.0005, 0.01])
def test_first_order_gradient_within_30_degrees_of_exact(seed, lr):
    # the angle grows quickly with the inner step (about 30-60 degrees at lr 0.05 here),
    # so the check runs at small inner learning rates
    cfg = ModelConfig(3, 3, 3, (4,), "tanh", 4.0)
    assert cfg.n_params <= 200
    task = _task(seed=seed)
    th = init_params(cfg, make_rng(8))

    def composite(v):
        return task_meta_loss(th.with_values(v), task, lr, cfg, K=3)[0]

    _, fo = task_meta_loss(th, task, lr, cfg, K=3)
    exact = oracles.central_differences(composite, th.values)
    cos = fo.values @ exact / (np.linalg.norm(fo.values) * np.linalg.norm(exact))
    assert math.degrees(math.acos(min(cos, 1.0))) < 30.0


# ------------------------------------------------------------- drift profile


def test_profile_shape_and_zero_coefficient(theta, tasks, small_model):
    hyper = with_hyper(FAST, S=3, I=(0.0, 0.05))
    ref = base_params(theta, tasks, hyper.K, hyper.lr_base, small_model)
    prof = sample_drift_profile(theta, ref, tasks, hyper, 5, small_model)
    assert len(prof) == 6 and len(prof.entries) == 6
    assert (prof.dist_meta >= 0).all() and (prof.dist_base >= 0).all()
    zero = prof.r == 0.0
    assert (prof.dist_meta[zero] == 0.0).all() and (prof.dist_base[zero] == 0.0).all()


def test_full_interpolation_onto_theta_itself_has_no_drift(small_model, tasks):
    hyper = with_hyper(FAST, S=1, I=(1.0,))
    rand = init_params(small_model, make_rng(42, 0))
    ref = base_params(rand, tasks, hyper.K, hyper.lr_base, small_model)
    prof = sample_drift_profile(rand, ref, tasks, hyper, 42, small_model)
    assert prof.dist_meta.tolist() == [0.0] and prof.dist_base.tolist() == [0.0]


def test_profile_matches_composition_oracle(theta, tasks, small_model):
    hyper = with_hyper(FAST, S=2, I=(0.01, 0.1))
    ref = base_params(theta, tasks, hyper.K, hyper.lr_base, small_model)
    prof = sample_drift_profile(theta, ref, tasks, hyper, (9, 1), small_model)
    k = 0
    for s in range(2):
        rand = init_params(small_model, make_rng(9, 1, s))
        for r in (0.01, 0.1):
            th_int = interpolate(theta, rand, r)
            moved = base_params(th_int, tasks, hyper.K, hyper.lr_base, small_model)
            assert prof.dist_meta[k] == pytest.approx(oracles.cosine(theta.values, th_int.values), abs=1e-12)
            want = sum(oracles.cosine(a.values, b.values) for a, b in zip(ref, moved))
            assert prof.dist_base[k] == pytest.approx(want, abs=1e-12)
            k += 1


def test_profile_euclidean_variant(theta, tasks, small_model):
    ref = base_params(theta, tasks, FAST.K, FAST.lr_base, small_model)
    prof = sample_drift_profile(theta, ref, tasks, FAST, 1, small_model, metric="euclidean")
    rand = init_params(small_model, make_rng(1, 0))
    assert prof.metric == "euclidean"
    assert prof.dist_meta[0] == pytest.approx(0.01 * np.linalg.norm(rand.values - theta.values))


# --------------------------------------------------------------- train_space


def test_zero_epochs_returns_init_and_memory(tasks, small_model):
    th, mem = train_space(tasks, with_hyper(FAST, epochs_train=0), small_model, store_memory=True, rng_seed=3)
    assert th == init_params(small_model, make_rng(3, STREAM_INIT))
    assert mem.task_ids == ["T0", "T1", "T2"]
    for t, e in zip(tasks, mem):
        assert e.shots == FAST.K and e.beta_base == FAST.beta_base_memory
        assert np.array_equal(e.support_inputs, t.support_set(FAST.K).inputs)
    assert train_space(tasks, FAST, small_model)[1] is None


def test_unregularized_training_is_plain_first_order_maml(tasks, small_model):
    hyper = with_hyper(FAST, epochs_train=5, beta_meta=0.0, beta_base_default=0.0)
    got, _ = train_space(tasks, hyper, small_model, rng_seed=2)
    th = init_params(small_model, make_rng(2, STREAM_INIT))
    for _ in range(5):
        g = np.zeros_like(th.values)
        for t in tasks:
            pool = t.pool_batch()
            adapted = sgd_step(th, loss_and_grad(th, small_model, pool)[1], hyper.lr_base)
            g += loss_and_grad(adapted, small_model, pool)[1].values
        th = sgd_step(th, th.with_values(g), hyper.lr_meta)
    assert np.array_equal(got.values, th.values)


def test_update_is_the_sum_of_its_terms(tasks, small_model):
    trace = []
    train_space(tasks, FAST, small_model, rng_seed=1, trace=trace)
    for ep in trace:
        want = ep.theta_before.values - FAST.lr_meta * ep.task_grad - FAST.beta_meta * ep.meta_grad - ep.base_grad
        assert np.allclose(ep.theta_after.values, want, rtol=0, atol=1e-15)


@pytest.mark.parametrize("dropped", ["task", "meta", "base"])
def test_dropping_a_term_removes_exactly_its_contribution(tasks, small_model, dropped):
    hyper = with_hyper(FAST, epochs_train=1)
    full, part = [], []
    train_space(tasks, hyper, small_model, rng_seed=4, trace=full)
    terms = tuple(t for t in ("task", "meta", "base") if t != dropped)
    train_space(tasks, hyper, small_model, rng_seed=4, trace=part, terms=terms)
    f, p = full[0], part[0]
    values = f.theta_before.values.copy()
    if dropped != "task":
        values -= hyper.lr_meta * f.task_grad
    if dropped != "meta":
        values -= hyper.beta_meta * f.meta_grad
    if dropped != "base":
        values -= f.base_grad
    assert np.array_equal(p.theta_after.values, values)


def test_training_telemetry_records(tasks, small_model, tmp_path):
    with Telemetry(tmp_path / "t.jsonl") as tel:
        train_space(tasks, FAST, small_model, rng_seed=0, telemetry=tel)
    recs = tel.of_kind("train_epoch")
    assert [r["epoch"] for r in recs] == [0, 1, 2]
    assert all(len(r["task_losses"]) == 3 and r["L_meta"] > 0 and "radius" in r for r in recs)
    assert len((tmp_path / "t.jsonl").read_text().splitlines()) == 3


def test_non_finite_loss_aborts_with_epoch(tasks, small_model, monkeypatch):
    calls = {"n": 0}
    real = meta.loss_and_grad

    def flaky(params, config, batch):
        calls["n"] += 1
        if calls["n"] > 40:
            raise NonFiniteLossError(0)
        return real(params, config, batch)

    monkeypatch.setattr(meta, "loss_and_grad", flaky)
    hyper = with_hyper(FAST, epochs_train=50, beta_meta=0.0, beta_base_default=0.0)
    with pytest.raises(DivergenceError) as info:
        train_space(tasks, hyper, small_model)
    # nine kernel calls per unregularized epoch: three projections, three adapted losses (two calls each)
    assert info.value.epoch == 40 // 9


def test_training_is_deterministic(tasks, small_model):
    a, _ = train_space(tasks, FAST, small_model, rng_seed=(5, 1))
    b, _ = train_space(tasks, FAST, small_model, rng_seed=(5, 1))
    assert a == b


# ---------------------------------------------------------- radius, recovery


def test_radius_examples(theta, tasks, small_model):
    zero = measure_subspace_radius(theta, tasks, with_hyper(FAST, lr_base=0.0), small_model)
    assert all(e == 0.0 and c == 0.0 for _, e, c in zero.records)
    rep = measure_subspace_radius(theta, tasks, FAST, small_model)
    assert rep.radius_euclidean == max(r[1] for r in rep.records)
    assert rep.radius_cosine == max(r[2] for r in rep.records)
    _, g = loss_and_grad(theta, small_model, tasks[0].support_set(FAST.K))
    assert rep.records[0][1] == pytest.approx(FAST.lr_base * np.linalg.norm(g.values), rel=1e-12)


def test_recovery_with_zero_lr_is_zero(theta, tasks, small_model):
    rep = recovery_check(theta, tasks, with_hyper(FAST, lr_base=0.0), small_model)
    assert not rep.matrix.any() and rep.epsilon == 0.0 and rep.epsilon_max == 0.0


def test_recovery_quadratic_closed_form(quadratic):
    th = _pv([2.0, 1.0, -1.0])
    lr = 0.3
    hyper = HyperParams(K=2, lr_base=lr)
    diff = th.values - quadratic
    once = quadratic + (1 - lr) * diff
    twice = quadratic + (1 - lr) ** 2 * diff
    euc = recovery_check(th, [_task()], hyper, None, metric="euclidean")
    assert euc.matrix[0, 0] == pytest.approx(lr * (1 - lr) * np.linalg.norm(diff), rel=1e-12)
    cos = recovery_check(th, [_task()], hyper, None)
    assert cos.matrix[0, 0] == pytest.approx(oracles.cosine(once, twice), abs=1e-14)
    assert cos.epsilon == cos.matrix[0, 0]


def test_recovery_epsilon_is_max_of_row_means(theta, tasks, small_model):
    rep = recovery_check(theta, tasks, FAST, small_model)
    assert rep.matrix.shape == (3, 3)
    assert rep.epsilon == max(sum(row) / 3 for row in rep.matrix)
    assert rep.epsilon_max == rep.matrix.max()


# ------------------------------------------------------------------- curves


def test_curve_examples(theta, tasks, small_model):
    grid = (0.0, 0.001, 0.01, 0.1, 0.5)
    curve = interpolation_drift_curve(theta, tasks, FAST, small_model, grid, 6, 3)
    assert curve.meta_cosine[0] == curve.base_cosine[0] == 0.0
    assert curve.meta_euclidean[0] == curve.base_euclidean[0] == 0.0
    assert (np.diff(curve.meta_cosine) > 0).all() and (np.diff(curve.meta_euclidean) > 0).all()
    again = interpolation_drift_curve(theta, tasks, FAST, small_model, grid, 6, 3)
    assert curve.rows() == again.rows()
    ref = base_params(theta, tasks, FAST.K, FAST.lr_base, small_model)
    prof = sample_drift_profile(theta, ref, tasks, with_hyper(FAST, S=6, I=grid), 3, small_model)
    assert np.allclose(curve.meta_cosine, [prof.dist_meta[prof.r == r].mean() for r in grid], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        interpolation_drift_curve(theta, tasks, FAST, small_model, (0.1, 0.01), 2, 3)


@pytest.mark.parametrize("seed", range(5))
def test_curve_meta_drift_increases_for_random_theta(small_model, tasks, seed):
    th = init_params(small_model, make_rng(seed, 77))
    curve = interpolation_drift_curve(th, tasks, FAST, small_model, (0.0, 0.05, 0.2, 0.6, 1.0), 5, seed)
    assert (np.diff(curve.meta_cosine) > 0).all()


def test_radius_from_curve_picks_largest_qualifying_point(theta, tasks, small_model):
    curve = interpolation_drift_curve(theta, tasks, FAST, small_model, (0.0, 0.01, 0.1, 0.5), 3, 1)
    eps = float(curve.base_cosine[2])
    assert radius_from_curve(curve, eps) == pytest.approx(max(
        m for m, b in zip(curve.meta_euclidean, curve.base_cosine) if b <= eps))
    assert radius_from_curve(curve, -1.0) == 0.0
