import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from snplab.core import (
    Batch,
    ModelConfig,
    ParamVector,
    embed_inputs,
    forward_logits,
    init_params,
    loss_and_grad,
    sgd_step,
)
from snplab.evaluation import (
    CSV_COLUMNS,
    ComparisonPolicy,
    EvalSettings,
    LedgerRecord,
    ResultLedger,
    bwt_metrics,
    evaluate_tasks,
    few_shot_eval_gradient,
    few_shot_eval_ncm,
    format_report,
    ncm_accuracy,
    run_finetune_baseline,
    run_joint_baseline,
    split_bwt,
    zero_shot_eval,
)
from snplab.meta import HyperParams, project, train_space, with_hyper
from snplab.tasks import SuiteSpec, Task, episode_sampler, generate_task_suite, make_rng

import oracles


def _identity(dim, temperature=10.0):
    cfg = ModelConfig(dim, dim, dim, (), "relu", temperature)
    values = []
    for _ in range(2):
        values += list(np.eye(dim).ravel()) + [0.0] * dim
    return cfg, ParamVector(values, cfg.layout())


def _rec(stage, task, fs, method="m", zs=0.5, ncm=0.5):
    return LedgerRecord(stage, task, zs, fs, ncm, method)


# ----------------------------------------------------------------- zero-shot


def test_top_n_is_always_perfect(small_suite, small_model):
    for seed in range(3):
        params = init_params(small_model, make_rng(seed))
        for task in small_suite.all_tasks():
            assert zero_shot_eval(params, small_model, task, top_k=task.n_classes) == 1.0


def test_perfect_alignment_scores_one():
    cfg, params = _identity(3)
    desc = np.eye(3)
    y = np.array([0, 1, 2, 2])
    task = Task("A", desc[y] * 2.0, y, desc[y] * 3.0, y, desc)
    assert zero_shot_eval(params, cfg, task) == 1.0


def test_zero_shot_matches_sort_oracle(small_suite, small_model):
    task = small_suite.seen[0]
    params = init_params(small_model, make_rng(21))
    z = forward_logits(params, small_model, task.query_batch())
    for k in (1, 2):
        assert zero_shot_eval(params, small_model, task, k) == oracles.topk_accuracy(z, task.query_y, k)
    with pytest.raises(ValueError):
        zero_shot_eval(params, small_model, task, task.n_classes + 1)


def test_zero_shot_ties_go_to_the_lower_class():
    cfg, params = _identity(2)
    desc = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = np.array([[1.0, 1.0], [1.0, 1.0]])  # equally similar to both descriptors
    task = Task("A", x, np.array([0, 1]), x, np.array([0, 1]), desc)
    assert zero_shot_eval(params, cfg, task) == 0.5


# ----------------------------------------------------------------- few-shot


def test_zero_step_few_shot_equals_zero_shot_on_the_query(small_suite, small_model):
    params = init_params(small_model, make_rng(2))
    for task in small_suite.seen:
        for seed in range(3):
            _, query = episode_sampler(task, task.n_classes, 3, seed)
            want = oracles.topk_accuracy(forward_logits(params, small_model, query), query.label_indices, 1)
            assert few_shot_eval_gradient(params, small_model, task, 3, 0.0, seed) == want


def test_few_shot_is_deterministic_and_pure(small_suite, small_model):
    params = init_params(small_model, make_rng(2))
    snapshot = params.values.copy()
    task = small_suite.seen[1]
    a = few_shot_eval_gradient(params, small_model, task, 3, 0.5, 7)
    assert a == few_shot_eval_gradient(params, small_model, task, 3, 0.5, 7)
    few_shot_eval_ncm(params, small_model, task, 3, 7)
    evaluate_tasks(params, small_model, [task], 0, "m", EvalSettings(K=3, episodes=2))
    assert np.array_equal(params.values, snapshot)


def test_few_shot_adapts_with_the_support_step(small_suite, small_model):
    params = init_params(small_model, make_rng(4))
    task = small_suite.seen[2]
    support, query = episode_sampler(task, 3, 3, 5)
    adapted = project(params, support, 0.5, small_model)
    want = oracles.topk_accuracy(forward_logits(adapted, small_model, query), query.label_indices, 1)
    assert few_shot_eval_gradient(params, small_model, task, 3, 0.5, 5) == want


@pytest.mark.slow
def test_full_pool_adaptation_helps_after_snp_training():
    spec = SuiteSpec(n_seen=3)
    cfg = ModelConfig(8, 8, 8, (16,))
    hyper = HyperParams(epochs_train=40, S=2)
    wins = 0
    for seed in range(10):
        suite = generate_task_suite(seed, spec)
        theta, _ = train_space(list(suite.seen), hyper, cfg, rng_seed=seed)
        task = suite.seen[0]
        fs = few_shot_eval_gradient(theta, cfg, task, spec.support_per_class, hyper.lr_base, seed)
        wins += fs >= zero_shot_eval(theta, cfg, task)
    assert wins >= 8


def test_ncm_own_sample_is_classified_to_its_class():
    cfg, params = _identity(3)
    x = np.array([[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.3, 0.0, 1.0]])
    support = Batch(x, np.array([0, 1, 2]), np.eye(3))
    query = Batch(x[[2, 0]], np.array([2, 0]), np.eye(3))
    assert ncm_accuracy(params, cfg, support, query) == 1.0


def test_ncm_identical_means_tie_to_lower_class():
    cfg, params = _identity(2)
    x = np.array([[1.0, 0.5], [1.0, 0.5]])
    support = Batch(x, np.array([0, 1]), np.eye(2))
    assert ncm_accuracy(params, cfg, support, Batch(x[:1], np.array([0]), np.eye(2))) == 1.0
    assert ncm_accuracy(params, cfg, support, Batch(x[:1], np.array([1]), np.eye(2))) == 0.0


@pytest.mark.parametrize("seed", range(4))
def test_ncm_matches_distance_table_oracle(small_suite, small_model, seed):
    params = init_params(small_model, make_rng(seed, 3))
    task = small_suite.seen[seed % 4]
    support, query = episode_sampler(task, 3, 4, seed)
    want = oracles.ncm_accuracy(embed_inputs(params, small_model, support.inputs), support.label_indices,
                                embed_inputs(params, small_model, query.inputs), query.label_indices, 3)
    assert few_shot_eval_ncm(params, small_model, task, 4, seed) == want


def test_evaluate_tasks_averages_episodes(small_suite, small_model):
    params = init_params(small_model, make_rng(0))
    task = small_suite.seen[0]
    led = evaluate_tasks(params, small_model, [task], 3, "m", EvalSettings(K=3, lr_base=0.2, seed=1, episodes=3))
    (r,) = led.records
    seeds = [(1 * 1000 + 0) * 100 + e for e in range(3)]
    assert r.stage == 3 and r.method == "m"
    assert r.few_shot_grad == pytest.approx(np.mean([few_shot_eval_gradient(params, small_model, task, 3, 0.2, s)
                                                     for s in seeds]), abs=1e-15)


# ---------------------------------------------------------------- baselines

HYPER = HyperParams(K=3, epochs_expand=5, lr_base=0.3, lr_meta=0.4)


def test_finetune_zero_epochs_equals_initial_evaluation(small_suite, small_model):
    params = init_params(small_model, make_rng(1))
    settings = EvalSettings(K=3, lr_base=0.3)
    traj, led = run_finetune_baseline(params, [small_suite.seen[3]], with_hyper(HYPER, epochs_expand=0),
                                      small_model, list(small_suite.seen), settings=settings)
    assert traj == [params, params]
    before = evaluate_tasks(params, small_model, list(small_suite.seen), 1, "finetune", settings)
    assert led.records == before.records


def test_finetune_one_task_is_repeated_sgd(small_suite, small_model):
    params = init_params(small_model, make_rng(1))
    task = small_suite.seen[3]
    traj, _ = run_finetune_baseline(params, [task], HYPER, small_model)
    th = params
    for _ in range(HYPER.epochs_expand):
        th = sgd_step(th, loss_and_grad(th, small_model, task.pool_batch())[1], HYPER.lr_meta)
    assert np.array_equal(traj[-1].values, th.values)


def test_joint_on_identical_tasks_equals_finetuning(small_suite, small_model):
    params = init_params(small_model, make_rng(1))
    task = small_suite.seen[2]
    twin = Task("twin", task.support_x, task.support_y, task.query_x, task.query_y, task.descriptors)
    joint, _ = run_joint_baseline(params, [task, twin], HYPER, small_model)
    traj, _ = run_finetune_baseline(params, [task], HYPER, small_model)
    assert np.array_equal(joint.values, traj[-1].values)
    with pytest.raises(ValueError):
        run_joint_baseline(params, [task], HYPER, small_model)


@pytest.mark.slow
def test_finetuning_forgets_on_low_transfer_suites():
    spec = SuiteSpec(n_seen=2, transfer_strength=0.0)
    cfg = ModelConfig(8, 8, 8, (16,))
    hyper = HyperParams(epochs_expand=100, lr_meta=0.5)
    settings = EvalSettings(K=5, lr_base=0.5, episodes=4)
    drops = 0
    for seed in range(5):
        suite = generate_task_suite(seed, spec)
        start = init_params(cfg, make_rng(seed, 1))
        _, led = run_finetune_baseline(start, list(suite.seen), hyper, cfg, [suite.seen[0]], settings=settings)
        drops += led.get(2, "T0", "finetune").few_shot_grad < led.get(1, "T0", "finetune").few_shot_grad
    assert drops >= 4


@pytest.mark.slow
def test_joint_training_beats_sequential_finetuning():
    spec = SuiteSpec()
    cfg = ModelConfig(8, 8, 8, (16,))
    hyper = HyperParams(epochs_expand=100, lr_meta=0.5)
    settings = EvalSettings(K=5, lr_base=0.5, episodes=4)
    wins = 0
    for seed in range(5):
        suite = generate_task_suite(seed, spec)
        tasks = list(suite.seen)
        start = init_params(cfg, make_rng(seed, 1))
        _, ft = run_finetune_baseline(start, tasks, hyper, cfg, tasks, settings=settings)
        _, jt = run_joint_baseline(start, tasks, hyper, cfg, tasks, settings=settings, stage=len(tasks))
        mean = lambda led, m: np.mean([r.few_shot_grad for r in led.select(len(tasks), m)])  # noqa: E731
        wins += mean(jt, "joint") >= mean(ft, "finetune")
    assert wins >= 4


# --------------------------------------------------------------------- BWT


def test_split_examples():
    assert split_bwt([0.0, 0.0]) == (0.0, 0.0)
    assert split_bwt([2.0, -4.0]) == (2.0, -4.0)
    assert split_bwt([1.0, 3.0, -2.0, -2.0]) == (2.0, -2.0)
    assert split_bwt([]) == (0.0, 0.0)


@given(st.lists(st.floats(-100, 100, allow_nan=False), max_size=20))
def test_split_is_complete_and_signed(deltas):
    pos, neg = split_bwt(deltas)
    assert pos >= 0 >= neg
    p, n = oracles.split_means(deltas)
    assert pos == pytest.approx(p) and neg == pytest.approx(n)


def test_bwt_through_the_ledger():
    led = ResultLedger()
    for task, before, after in (("A", 0.5, 0.5), ("B", 0.25, 0.75)):
        led.add(_rec(0, task, before, "finetune"))
        led.add(_rec(0, task, before, "snp"))
        led.add(_rec(1, task, after, "snp"))
        led.add(_rec(1, task, before - 0.125, "finetune"))
    bwt = bwt_metrics(led, ComparisonPolicy(reference_until=0))
    assert bwt[(1, "snp")] == (25.0, 0.0)
    assert bwt[(1, "finetune")] == (0.0, -12.5)


def test_comparison_policy_sources():
    led = ResultLedger()
    led.add(_rec(0, "A", 0.5, "finetune"))
    led.add(_rec(1, "A", 0.25, "finetune"))
    led.add(_rec(1, "A", 0.75, "snp"))
    led.add(_rec(2, "A", 0.5, "snp"))
    led.add(_rec(2, "A", 0.5, "joint"))
    pol = ComparisonPolicy()  # reference method up to stage 1, own previous afterwards
    assert pol.source(1, "snp", led, "A").method == "finetune"
    assert pol.source(2, "snp", led, "A").method == "snp"
    assert pol.source(2, "joint", led, "A").method == "finetune"
    with pytest.raises(KeyError):
        pol.source(1, "snp", led, "B")
    bwt = bwt_metrics(led, pol)
    assert bwt[(2, "snp")] == (0.0, -25.0) and bwt[(2, "joint")] == (25.0, 0.0)


# ------------------------------------------------------------------- ledger


def test_ledger_rejects_duplicates_and_bad_accuracy():
    led = ResultLedger()
    led.add(_rec(0, "A", 0.5))
    with pytest.raises(ValueError):
        led.add(_rec(0, "A", 0.7))
    with pytest.raises(ValueError):
        _rec(0, "A", 1.5)


def test_csv_schema_and_round_trip():
    led = ResultLedger()
    led.add(_rec(1, "B", 0.1 + 0.2, "snp"))
    led.add(_rec(0, "A", 1 / 3, "finetune"))
    text = led.to_csv()
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert text.splitlines()[1].startswith("finetune,0,A")
    back = ResultLedger.from_csv(text)
    assert back.sorted_records() == led.sorted_records()


def test_report_layout():
    led = ResultLedger()
    led.add(_rec(0, "A", 0.5, "finetune"))
    led.add(_rec(1, "A", 0.25, "finetune"))
    text = format_report(led)
    assert "stage 0" in text and "stage 1" in text
    assert "Pos BWT" in text and "Neg BWT" in text and "-25.0" in text
