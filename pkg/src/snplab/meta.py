"""Projection to base parameters, the first-order meta loss, drift profiling and
the drift-regularized meta-training loop (``train_space``).

Base parameters of a task are one gradient step from the meta parameters on
that task's stored K-shot support set.  Training adds two cosine-distance
regularizers, computed by interpolating the meta parameters toward fresh
random initializations: the meta drift itself and the summed drift of every
task's recomputed base parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import (
    Batch,
    ModelConfig,
    ParamVector,
    _cosine_distance,
    cosine_distance,
    cosine_distance_grads,
    euclidean_distance,
    init_params,
    interpolate,
    loss_and_grad,
    sgd_step,
)
from .errors import DivergenceError, NonFiniteLossError
from .memory import MemoryBuffer, MemoryEntry
from .tasks import TaskSuite, make_rng
from .telemetry import NULL, Telemetry

# root-seed sub-streams
STREAM_INIT = 1
STREAM_TASKS = 2
STREAM_EPISODES = 3
STREAM_DRIFT = 4

TERMS = ("task", "meta", "base")


@dataclass(frozen=True)
class HyperParams:
    K: int = 5
    epochs_train: int = 300
    epochs_expand: int = 200
    lr_base: float = 0.5
    lr_meta: float = 0.5
    beta_meta: float = 0.5
    beta_base_default: float = 20.0
    beta_base_memory: float = 15.0  # coefficient stored with memory entries, used during expansion
    beta_int_default: float = 1.0
    S: int = 8
    I: tuple[float, ...] = (0.0001, 0.001, 0.01, 0.1)
    epsilon: float | None = 0.001
    disjoint_batches: bool = False
    adaptive_beta_per_epoch: bool = False

    def __post_init__(self):
        object.__setattr__(self, "I", tuple(float(r) for r in self.I))
        if self.K < 1 or self.S < 1:
            raise ValueError("K and S must be at least 1")
        if self.epochs_train < 0 or self.epochs_expand < 0:
            raise ValueError("epoch counts must be non-negative")
        for name in ("lr_base", "lr_meta", "beta_meta", "beta_base_default", "beta_base_memory",
                     "beta_int_default"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if any(not 0.0 <= r <= 1.0 for r in self.I):
            raise ValueError("interpolation coefficients must lie in [0, 1]")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def paper_fidelity(cls, **overrides) -> HyperParams:
        """Defaults as published for the full-scale procedure."""
        values = dict(
            K=5, epochs_train=10000, epochs_expand=500, lr_base=0.0005, lr_meta=0.0005,
            beta_meta=0.5, beta_base_default=0.5, beta_base_memory=0.5, beta_int_default=1.0, S=1000,
            I=(0.0001, 0.001, 0.01, 0.1), epsilon=0.001,
        )
        values.update(overrides)
        return cls(**values)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["I"] = list(self.I)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HyperParams:
        d = dict(d)
        if "I" in d:
            d["I"] = tuple(d["I"])
        return cls(**d)


def _seed_tuple(seed) -> tuple[int, ...]:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def support_batch(task, K: int) -> Batch:
    """Stored K-shot support set of a task, memory entry or ready-made batch."""
    if isinstance(task, Batch):
        return task
    if isinstance(task, MemoryEntry):
        return task.batch()
    return task.support_set(K)


def meta_batches(task, K: int, disjoint: bool = False) -> tuple[Batch, Batch]:
    """(inner, outer) batches for the adapted-loss evaluation."""
    if isinstance(task, (Batch, MemoryEntry)):
        b = support_batch(task, K)
        return b, b
    if disjoint:
        return task.disjoint_batches(K)
    pool = task.pool_batch()
    return pool, pool


def project(theta: ParamVector, support: Batch, lr_base: float, config: ModelConfig) -> ParamVector:
    _, g = loss_and_grad(theta, config, support)
    return sgd_step(theta, g, lr_base)


def base_params(theta: ParamVector, tasks: Sequence, K: int, lr_base: float,
                config: ModelConfig) -> list[ParamVector]:
    """One support-set gradient step from ``theta`` per task, in task order."""
    return [project(theta, support_batch(t, K), lr_base, config) for t in tasks]


def task_meta_loss(theta: ParamVector, task, lr_base: float, config: ModelConfig, K: int = 5,
                   disjoint: bool = False) -> tuple[float, ParamVector]:
    """Outer loss at the inner-step-adapted point and its first-order meta gradient."""
    inner, outer = meta_batches(task, K, disjoint)
    adapted = project(theta, inner, lr_base, config)
    return loss_and_grad(adapted, config, outer)


@dataclass(frozen=True, eq=False)
class DriftProfile:
    s: np.ndarray
    r: np.ndarray
    dist_meta: np.ndarray
    dist_base: np.ndarray
    metric: str = "cosine"

    def __len__(self):
        return int(self.s.size)

    @property
    def entries(self) -> list[dict]:
        return [
            {"s": int(s), "r": float(r), "dist_meta": float(m), "dist_base": float(b)}
            for s, r, m, b in zip(self.s, self.r, self.dist_meta, self.dist_base)
        ]

    def radius(self, epsilon: float) -> float | None:
        """Largest meta drift whose base drift stays within ``epsilon``."""
        ok = self.dist_base <= epsilon
        return float(self.dist_meta[ok].max()) if ok.any() else None

    def mean_by_r(self) -> dict[float, tuple[float, float]]:
        out = {}
        for r in dict.fromkeys(self.r.tolist()):
            sel = self.r == r
            out[r] = (float(self.dist_meta[sel].mean()), float(self.dist_base[sel].mean()))
        return out


@dataclass
class _ProfilePass:
    cosine: DriftProfile
    euclidean: DriftProfile | None
    grad_meta: np.ndarray | None
    grad_base: np.ndarray | None


def _profile_pass(theta, base_ref, supports, config, lr_base, S, I, seed, *,
                  weights=None, grads=False, euclidean=False) -> _ProfilePass:
    seed = _seed_tuple(seed)
    rows = []
    gm = np.zeros_like(theta.values) if grads else None
    gb = np.zeros_like(theta.values) if grads else None
    if weights is None:
        weights = [1.0] * len(supports)
    for s in range(S):
        rand = init_params(config, make_rng(*seed, s))
        for r in I:
            th_int = interpolate(theta, rand, r)
            d_meta = _cosine_distance(theta.values, th_int.values)
            e_meta = euclidean_distance(theta, th_int) if euclidean else 0.0
            d_base = e_base = 0.0
            for ref, sup, w in zip(base_ref, supports, weights):
                b_int = project(th_int, sup, lr_base, config)
                d_base += _cosine_distance(ref.values, b_int.values)
                if euclidean:
                    e_base += euclidean_distance(ref, b_int)
                if grads and w > 0:
                    ga, gi = cosine_distance_grads(ref.values, b_int.values)
                    gb += w * (ga + (1.0 - r) * gi)
            if grads:
                ga, gi = cosine_distance_grads(theta.values, th_int.values)
                gm += ga + (1.0 - r) * gi
            rows.append((s, r, d_meta, d_base, e_meta, e_base))
    arr = np.array(rows, dtype=np.float64).reshape(-1, 6)
    s_idx = arr[:, 0].astype(np.int64)
    cos = DriftProfile(s_idx, arr[:, 1], arr[:, 2], arr[:, 3], "cosine")
    euc = DriftProfile(s_idx, arr[:, 1], arr[:, 4], arr[:, 5], "euclidean") if euclidean else None
    return _ProfilePass(cos, euc, gm, gb)


def sample_drift_profile(theta: ParamVector, base_ref: Sequence[ParamVector], tasks: Sequence,
                         hyper: HyperParams, rng_seed, config: ModelConfig,
                         metric: str = "cosine") -> DriftProfile:
    """Drift of the meta and base parameters under interpolation toward random inits.

    Sample ``s`` draws a fresh initialization from stream ``(*rng_seed, s)``;
    for every coefficient ``r`` the meta drift is measured against the
    interpolant and the base drift is summed over tasks.
    """
    if metric not in ("cosine", "euclidean"):
        raise ValueError(f"unknown metric {metric!r}")
    supports = [support_batch(t, hyper.K) for t in tasks]
    res = _profile_pass(theta, base_ref, supports, config, hyper.lr_base, hyper.S, hyper.I,
                        rng_seed, euclidean=metric == "euclidean")
    return res.cosine if metric == "cosine" else res.euclidean


@dataclass
class EpochTrace:
    epoch: int
    theta_before: ParamVector
    task_losses: list[float]
    task_grad: np.ndarray
    meta_grad: np.ndarray | None
    base_grad: np.ndarray | None
    L_meta: float | None
    L_base: float | None
    profile: DriftProfile | None
    theta_after: ParamVector | None = None


def _as_tasks(tasks) -> list:
    if isinstance(tasks, TaskSuite):
        return list(tasks.seen)
    return list(tasks)


def train_space(tasks, hyper: HyperParams, config: ModelConfig, *, store_memory: bool = False,
                rng_seed=0, theta0: ParamVector | None = None,
                telemetry: Telemetry | None = None, terms: Sequence[str] = TERMS,
                trace: list | None = None, task_betas: Sequence[float] | None = None):
    """Meta-train ``theta`` so that drifting it leaves every task's base parameters in place.

    Each epoch applies
    ``theta - lr_meta * sum_t dL_t - beta_meta * dL_meta - sum_t beta_base_t * dL_base_t``
    with first-order gradients throughout.  ``terms`` can drop any of the
    three contributions; ``trace`` (a list) receives an ``EpochTrace`` per epoch.

    Returns ``(theta, memory)``; memory is ``None`` unless ``store_memory``.
    """
    tasks = _as_tasks(tasks)
    if not tasks:
        raise ValueError("train_space needs at least one task")
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown terms {sorted(unknown)}")
    telemetry = telemetry or NULL
    seed = _seed_tuple(rng_seed)
    theta = theta0 if theta0 is not None else init_params(config, make_rng(*seed, STREAM_INIT))
    K = hyper.K
    supports = [support_batch(t, K) for t in tasks]
    batches = [meta_batches(t, K, hyper.disjoint_batches) for t in tasks]
    betas = list(task_betas) if task_betas is not None else [hyper.beta_base_default] * len(tasks)
    mem_betas = list(task_betas) if task_betas is not None else [hyper.beta_base_memory] * len(tasks)

    memory = None
    if store_memory:
        memory = MemoryBuffer(tuple(
            MemoryEntry(getattr(t, "task_id", f"T{i}"), sup.inputs, sup.label_indices, sup.descriptors, b)
            for i, (t, sup, b) in enumerate(zip(tasks, supports, mem_betas))
        ))

    use_task = "task" in terms
    use_meta = "meta" in terms and hyper.beta_meta > 0
    use_base = "base" in terms and any(b > 0 for b in betas)

    for epoch in range(hyper.epochs_train):
        try:
            base = [project(theta, sup, hyper.lr_base, config) for sup in supports]
            losses = []
            task_grad = np.zeros_like(theta.values)
            for inner, outer in batches:
                adapted = project(theta, inner, hyper.lr_base, config)
                loss, mg = loss_and_grad(adapted, config, outer)
                losses.append(loss)
                task_grad += mg.values
            prof = None
            if use_meta or use_base:
                prof = _profile_pass(theta, base, supports, config, hyper.lr_base, hyper.S, hyper.I,
                                     (*seed, STREAM_DRIFT, epoch), weights=betas, grads=True)
            values = theta.values.copy()
            if use_task:
                values -= hyper.lr_meta * task_grad
            if use_meta:
                values -= hyper.beta_meta * prof.grad_meta
            if use_base:
                values -= prof.grad_base
            new_theta = theta.with_values(values)
        except (NonFiniteLossError, FloatingPointError) as exc:
            telemetry.emit("divergence", phase="train", epoch=epoch, error=str(exc))
            raise DivergenceError(epoch, exc) from exc

        L_meta = float(prof.cosine.dist_meta.sum()) if prof else None
        L_base = float(prof.cosine.dist_base.sum()) if prof else None
        radius = prof.cosine.radius(hyper.epsilon) if prof and hyper.epsilon is not None else None
        telemetry.emit("train_epoch", epoch=epoch, task_losses=losses, L_meta=L_meta,
                       L_base=L_base, radius=radius)
        if trace is not None:
            trace.append(EpochTrace(
                epoch, theta, losses, task_grad,
                prof.grad_meta if prof else None, prof.grad_base if prof else None,
                L_meta, L_base, prof.cosine if prof else None, new_theta,
            ))
        theta = new_theta
    return theta, memory


@dataclass(frozen=True)
class RadiusReport:
    records: list  # (task_id, euclidean, cosine)
    radius_euclidean: float
    radius_cosine: float


def _task_id(task, i: int) -> str:
    return getattr(task, "task_id", f"T{i}")


def measure_subspace_radius(theta: ParamVector, tasks, hyper: HyperParams,
                            config: ModelConfig) -> RadiusReport:
    """Distance from ``theta`` to each task's base parameters; the maximum is the radius."""
    tasks = _as_tasks(tasks)
    base = base_params(theta, tasks, hyper.K, hyper.lr_base, config)
    records = [
        (_task_id(t, i), euclidean_distance(theta, b), cosine_distance(theta, b))
        for i, (t, b) in enumerate(zip(tasks, base))
    ]
    return RadiusReport(
        records,
        max(r[1] for r in records),
        max(r[2] for r in records),
    )


@dataclass(frozen=True, eq=False)
class RecoveryReport:
    matrix: np.ndarray          # [j, t]: drift of task t after moving theta to base_j
    row_mean: np.ndarray
    row_max: np.ndarray
    metric: str = "cosine"

    @property
    def epsilon(self) -> float:
        """Largest mean-over-tasks drift (the epsilon estimate used by adaptive beta)."""
        return float(self.row_mean.max())

    @property
    def epsilon_max(self) -> float:
        return float(self.row_max.max())


def recovery_check(theta: ParamVector, tasks, hyper: HyperParams, config: ModelConfig,
                   metric: str = "cosine") -> RecoveryReport:
    tasks = _as_tasks(tasks)
    dist = _cosine_distance if metric == "cosine" else (lambda a, b: float(np.linalg.norm(a - b)))
    base = base_params(theta, tasks, hyper.K, hyper.lr_base, config)
    n = len(tasks)
    m = np.zeros((n, n))
    for j in range(n):
        moved = base_params(base[j], tasks, hyper.K, hyper.lr_base, config)
        for t in range(n):
            m[j, t] = dist(moved[t].values, base[t].values)
    return RecoveryReport(m, m.mean(axis=1), m.max(axis=1), metric)


@dataclass(frozen=True, eq=False)
class DriftCurve:
    r: np.ndarray
    meta_cosine: np.ndarray
    base_cosine: np.ndarray
    meta_euclidean: np.ndarray
    base_euclidean: np.ndarray
    profile_cosine: DriftProfile = field(repr=False, default=None)
    profile_euclidean: DriftProfile = field(repr=False, default=None)

    def meta(self, metric: str) -> np.ndarray:
        return self.meta_cosine if metric == "cosine" else self.meta_euclidean

    def base(self, metric: str) -> np.ndarray:
        return self.base_cosine if metric == "cosine" else self.base_euclidean

    def rows(self) -> list[dict]:
        return [
            {"r": float(r), "meta_cosine": float(a), "base_cosine": float(b),
             "meta_euclidean": float(c), "base_euclidean": float(d)}
            for r, a, b, c, d in zip(self.r, self.meta_cosine, self.base_cosine,
                                     self.meta_euclidean, self.base_euclidean)
        ]


def interpolation_drift_curve(theta: ParamVector, tasks, hyper: HyperParams, config: ModelConfig,
                              r_grid: Sequence[float], S: int, rng_seed) -> DriftCurve:
    """Mean meta and base drift per interpolation coefficient, in both metrics."""
    r_grid = [float(r) for r in r_grid]
    if any(b < a for a, b in zip(r_grid, r_grid[1:])):
        raise ValueError("r_grid must be sorted ascending")
    tasks = _as_tasks(tasks)
    supports = [support_batch(t, hyper.K) for t in tasks]
    base = [project(theta, sup, hyper.lr_base, config) for sup in supports]
    res = _profile_pass(theta, base, supports, config, hyper.lr_base, S, r_grid, rng_seed,
                        euclidean=True)
    cos, euc = res.cosine.mean_by_r(), res.euclidean.mean_by_r()
    rs = list(cos)
    return DriftCurve(
        np.array(rs),
        np.array([cos[r][0] for r in rs]),
        np.array([cos[r][1] for r in rs]),
        np.array([euc[r][0] for r in rs]),
        np.array([euc[r][1] for r in rs]),
        res.cosine,
        res.euclidean,
    )


def radius_from_curve(curve: DriftCurve, epsilon: float, meta_metric: str = "euclidean",
                      base_metric: str = "cosine") -> float:
    """Largest mean meta drift on the curve whose mean base drift is within ``epsilon``."""
    meta, base = curve.meta(meta_metric), curve.base(base_metric)
    ok = base <= epsilon
    return float(meta[ok].max()) if ok.any() else 0.0


def with_hyper(hyper: HyperParams, **changes) -> HyperParams:
    return replace(hyper, **changes)
