"""Zero-shot and few-shot evaluation, fine-tuning / joint-training baselines and
positive/negative backward-transfer accounting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    Batch,
    ModelConfig,
    ParamVector,
    _check_model,
    _unit_rows,
    embed_inputs,
    forward_logits,
    loss_and_grad,
)
from .errors import DivergenceError, NonFiniteLossError
from .meta import HyperParams, project
from .tasks import Task, episode_sampler
from .telemetry import NULL, Telemetry

CSV_COLUMNS = ("method", "stage", "eval_task", "zs_topk", "fs_grad", "fs_ncm")


@dataclass(frozen=True)
class LedgerRecord:
    stage: int
    eval_task_id: str
    zero_shot_topk: float
    few_shot_grad: float
    few_shot_ncm: float
    method: str

    def __post_init__(self):
        for name in ("zero_shot_topk", "few_shot_grad", "few_shot_ncm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def metric(self, name: str) -> float:
        return {"zs_topk": self.zero_shot_topk, "fs_grad": self.few_shot_grad,
                "fs_ncm": self.few_shot_ncm}[name]


@dataclass
class ResultLedger:
    records: list[LedgerRecord] = field(default_factory=list)

    def add(self, record: LedgerRecord) -> None:
        key = (record.stage, record.eval_task_id, record.method)
        if any((r.stage, r.eval_task_id, r.method) == key for r in self.records):
            raise ValueError(f"duplicate ledger record for {key}")
        self.records.append(record)

    def extend(self, other: ResultLedger) -> None:
        for r in other.records:
            self.add(r)

    def get(self, stage: int, eval_task_id: str, method: str) -> LedgerRecord | None:
        for r in self.records:
            if r.stage == stage and r.eval_task_id == eval_task_id and r.method == method:
                return r
        return None

    def select(self, stage: int | None = None, method: str | None = None) -> list[LedgerRecord]:
        return [r for r in self.records
                if (stage is None or r.stage == stage) and (method is None or r.method == method)]

    def stages(self, method: str | None = None) -> list[int]:
        return sorted({r.stage for r in self.records if method is None or r.method == method})

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.records))

    def sorted_records(self) -> list[LedgerRecord]:
        return sorted(self.records, key=lambda r: (r.stage, r.eval_task_id, r.method))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.sorted_records():
            w.writerow([r.method, r.stage, r.eval_task_id, repr(r.zero_shot_topk),
                        repr(r.few_shot_grad), repr(r.few_shot_ncm)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ResultLedger:
        rows = list(csv.DictReader(io.StringIO(text)))
        ledger = cls()
        for row in rows:
            ledger.add(LedgerRecord(int(row["stage"]), row["eval_task"], float(row["zs_topk"]),
                                    float(row["fs_grad"]), float(row["fs_ncm"]), row["method"]))
        return ledger


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    # rank of the true class, ties resolved toward the lower class index
    true = logits[np.arange(labels.size), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    ahead = (logits > true) | ((logits == true) & (idx < labels[:, None]))
    return ahead.sum(axis=1) < k


def accuracy(params: ParamVector, config: ModelConfig, batch: Batch, top_k: int = 1) -> float:
    if top_k > batch.n_classes:
        raise ValueError(f"top_k={top_k} exceeds {batch.n_classes} classes")
    if top_k < 1:
        raise ValueError("top_k must be positive")
    logits = forward_logits(params, config, batch)
    return float(_topk_hits(logits, batch.label_indices, top_k).mean())


def zero_shot_eval(params: ParamVector, config: ModelConfig, task: Task, top_k: int = 1) -> float:
    """Fraction of query samples whose class is among the ``top_k`` most similar descriptors."""
    return accuracy(params, config, task.query_batch(), top_k)


def few_shot_eval_gradient(theta: ParamVector, config: ModelConfig, task: Task, K: int,
                           lr_base: float, seed: int, N: int | None = None) -> float:
    support, query = episode_sampler(task, N or task.n_classes, K, seed)
    adapted = project(theta, support, lr_base, config)
    return accuracy(adapted, config, query, 1)


def few_shot_eval_ncm(params: ParamVector, config: ModelConfig, task: Task, K: int, seed: int,
                      N: int | None = None) -> float:
    """Nearest class mean of support embeddings under cosine distance."""
    support, query = episode_sampler(task, N or task.n_classes, K, seed)
    return ncm_accuracy(params, config, support, query)


def ncm_accuracy(params: ParamVector, config: ModelConfig, support: Batch, query: Batch) -> float:
    _check_model(params, config, support)
    emb = embed_inputs(params, config, support.inputs)
    n_cls = support.n_classes
    means = np.stack([emb[support.label_indices == c].mean(axis=0) for c in range(n_cls)])
    q = _unit_rows(embed_inputs(params, config, query.inputs))
    dist = 1.0 - q @ _unit_rows(means).T
    pred = np.argmin(dist, axis=1)  # first minimum = lowest class index
    return float((pred == query.label_indices).mean())


@dataclass(frozen=True)
class EvalSettings:
    K: int = 5
    lr_base: float = 0.5
    top_k: int = 1
    seed: int = 0
    episodes: int = 1  # few-shot scores average this many episodes


def evaluate_tasks(theta: ParamVector, config: ModelConfig, tasks: Sequence[Task], stage: int,
                   method: str, settings: EvalSettings) -> ResultLedger:
    ledger = ResultLedger()
    for i, task in enumerate(tasks):
        seeds = [(settings.seed * 1000 + i) * 100 + e for e in range(settings.episodes)]
        ledger.add(LedgerRecord(
            stage, task.task_id,
            zero_shot_eval(theta, config, task, settings.top_k),
            float(np.mean([few_shot_eval_gradient(theta, config, task, settings.K, settings.lr_base, s)
                           for s in seeds])),
            float(np.mean([few_shot_eval_ncm(theta, config, task, settings.K, s) for s in seeds])),
            method,
        ))
    return ledger


def _plain_steps(theta: ParamVector, config: ModelConfig, batches: Sequence[Batch], lr: float,
                 epochs: int, telemetry: Telemetry, phase: str) -> ParamVector:
    for epoch in range(epochs):
        try:
            grad = np.zeros_like(theta.values)
            losses = []
            for b in batches:
                loss, g = loss_and_grad(theta, config, b)
                grad += g.values
                losses.append(loss)
            theta = theta.with_values(theta.values - lr * (grad / len(batches)))
        except (NonFiniteLossError, FloatingPointError) as exc:
            telemetry.emit("divergence", phase=phase, epoch=epoch, error=str(exc))
            raise DivergenceError(epoch, exc) from exc
    return theta


def run_finetune_baseline(theta: ParamVector, task_stream: Sequence[Task], hyper: HyperParams,
                          config: ModelConfig, eval_tasks: Sequence[Task] = (), *,
                          settings: EvalSettings | None = None, method: str = "finetune",
                          first_stage: int = 1, telemetry: Telemetry | None = None):
    """Sequential plain-loss SGD over the stream; evaluation sweep after each task.

    Returns ``(trajectory, ledger)`` where ``trajectory[0]`` is the starting
    point and ``trajectory[i]`` the parameters after the ``i``-th task.
    """
    telemetry = telemetry or NULL
    settings = settings or EvalSettings(K=hyper.K, lr_base=hyper.lr_base)
    ledger = ResultLedger()
    trajectory = [theta]
    for i, task in enumerate(task_stream):
        theta = _plain_steps(theta, config, [task.pool_batch()], hyper.lr_meta,
                             hyper.epochs_expand, telemetry, f"finetune:{task.task_id}")
        trajectory.append(theta)
        if eval_tasks:
            ledger.extend(evaluate_tasks(theta, config, eval_tasks, first_stage + i, method, settings))
    return trajectory, ledger


def run_joint_baseline(theta: ParamVector, tasks: Sequence[Task], hyper: HyperParams,
                       config: ModelConfig, eval_tasks: Sequence[Task] = (), *,
                       settings: EvalSettings | None = None, stage: int = 0,
                       method: str = "joint", telemetry: Telemetry | None = None):
    """Minimize the mean of all tasks' pool losses at once, then evaluate."""
    if len(tasks) < 2:
        raise ValueError("joint training needs at least 2 tasks")
    telemetry = telemetry or NULL
    settings = settings or EvalSettings(K=hyper.K, lr_base=hyper.lr_base)
    theta = _plain_steps(theta, config, [t.pool_batch() for t in tasks], hyper.lr_meta,
                         hyper.epochs_expand, telemetry, "joint")
    ledger = evaluate_tasks(theta, config, eval_tasks, stage, method, settings) if eval_tasks else ResultLedger()
    return theta, ledger


def split_bwt(deltas: Sequence[float]) -> tuple[float, float]:
    """Mean of the non-negative deltas and mean of the negative ones (0 when empty)."""
    d = np.asarray(list(deltas), dtype=np.float64)
    pos, neg = d[d >= 0], d[d < 0]
    return (float(pos.mean()) if pos.size else 0.0, float(neg.mean()) if neg.size else 0.0)


@dataclass(frozen=True)
class ComparisonPolicy:
    """Which record a stage's accuracy is compared against.

    Stages up to ``reference_until`` compare against ``reference_method`` at
    the previous stage; later stages compare against the method's own
    previous stage, falling back to the reference method when the method has
    no record there (e.g. joint training).
    """

    reference_method: str = "finetune"
    reference_until: int = 1

    def source(self, stage: int, method: str, ledger: ResultLedger, task_id: str) -> LedgerRecord:
        prev = stage - 1
        if stage > self.reference_until:
            own = ledger.get(prev, task_id, method)
            if own is not None:
                return own
        ref = ledger.get(prev, task_id, self.reference_method)
        if ref is None:
            raise KeyError(f"no comparison record for stage {prev}, task {task_id!r}")
        return ref

    def to_dict(self) -> dict:
        return {"reference_method": self.reference_method, "reference_until": self.reference_until}


def bwt_metrics(ledger: ResultLedger, policy: ComparisonPolicy | None = None,
                metric: str = "fs_grad", scale: float = 100.0,
                exclude_tasks: Sequence[str] = ()) -> dict[tuple[int, str], tuple[float, float]]:
    """Positive/negative backward transfer per (stage, method), in ``scale`` units.

    Stages without a preceding stage are skipped.
    """
    policy = policy or ComparisonPolicy()
    out = {}
    for stage in ledger.stages():
        if stage == min(ledger.stages()):
            continue
        for method in ledger.methods():
            recs = [r for r in ledger.select(stage, method) if r.eval_task_id not in exclude_tasks]
            if not recs:
                continue
            deltas = []
            for r in recs:
                ref = policy.source(stage, method, ledger, r.eval_task_id)
                deltas.append(scale * r.metric(metric) - scale * ref.metric(metric))
            out[(stage, method)] = split_bwt(deltas)
    return out


def format_report(ledger: ResultLedger, policy: ComparisonPolicy | None = None,
                  top_k: int = 1) -> str:
    """Plain-text table: one block per stage, tasks as rows, methods as columns,
    cells ``zero-shot / few-shot`` in percent, followed by Avg, Pos BWT and Neg BWT rows."""
    policy = policy or ComparisonPolicy()
    bwt = {m: bwt_metrics(ledger, policy, m) for m in ("zs_topk", "fs_grad")}
    lines = []
    for stage in ledger.stages():
        methods = [m for m in ledger.methods() if ledger.select(stage, m)]
        tasks = list(dict.fromkeys(r.eval_task_id for r in ledger.select(stage)))
        header = [f"stage {stage}"] + methods
        rows = [header]
        for t in tasks:
            row = [t]
            for m in methods:
                r = ledger.get(stage, t, m)
                row.append("-" if r is None else f"{100 * r.zero_shot_topk:.1f} / {100 * r.few_shot_grad:.1f}")
            rows.append(row)
        avg = ["Avg"]
        pos = ["Pos BWT"]
        neg = ["Neg BWT"]
        for m in methods:
            recs = ledger.select(stage, m)
            avg.append(f"{100 * np.mean([r.zero_shot_topk for r in recs]):.1f} / "
                       f"{100 * np.mean([r.few_shot_grad for r in recs]):.1f}")
            zs = bwt["zs_topk"].get((stage, m), (0.0, 0.0))
            fs = bwt["fs_grad"].get((stage, m), (0.0, 0.0))
            pos.append(f"{zs[0]:.1f} / {fs[0]:.1f}")
            neg.append(f"{zs[1]:.1f} / {fs[1]:.1f}")
        rows += [avg, pos, neg]
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        for k, row in enumerate(rows):
            lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)))
            if k == 0 or k == len(rows) - 4:
                lines.append("-+-".join("-" * w for w in widths))
        lines.append("")
    lines.append(f"zero-shot top-{top_k} / few-shot top-1 (gradient step), percent")
    return "\n".join(lines)
