"""Online expansion of a drift-tolerant meta model.

``expand_space`` learns new tasks one at a time.  Without memory it only
regularizes the one-step drift of the meta parameters; with a memory buffer it
also pins every stored task's base parameters to where they were on entry,
and can fold a new task into the nearest existing subnetwork.  Subnetworks are
released by zeroing their coefficient, and ``mode_switch`` relocates one
task's base parameters to a mode that satisfies a user predicate.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (
    ModelConfig,
    ParamVector,
    _cosine_distance,
    cosine_distance_grads,
    loss_and_grad,
)
from .errors import DivergenceError, NonFiniteLossError, RadiusUnresolvedError
from .evaluation import EvalSettings, ResultLedger, evaluate_tasks
from .memory import MemoryBuffer, MemoryEntry
from .meta import (
    STREAM_DRIFT,
    DriftProfile,
    HyperParams,
    RecoveryReport,
    _seed_tuple,
    meta_batches,
    project,
    recovery_check,
    sample_drift_profile,
    support_batch,
)
from .tasks import make_rng
from .telemetry import NULL, Telemetry

log = logging.getLogger(__name__)

MODES = ("snp", "snp_add", "snp_remove", "snp_interpolate", "snp_mode_switch")


def adaptive_beta(beta_meta: float, dist_meta_v: float, epsilon: float | None,
                  drift_profile: DriftProfile, recovery: RecoveryReport | None = None, *,
                  beta_max: float | None = None, telemetry: Telemetry | None = None) -> float:
    """Raise the meta-drift coefficient as the drift approaches the known radius.

    The radius is the largest profiled meta drift whose base drift stays
    within ``epsilon``; with ``epsilon=None`` it is estimated from
    ``recovery``.  The result is ``beta_meta * radius / (radius - dist_meta_v)``
    (never below ``beta_meta``), capped at ``beta_max`` (default
    ``100 * beta_meta``).  A singular or negative ratio returns the cap.
    """
    telemetry = telemetry or NULL
    if dist_meta_v < 0:
        raise ValueError("dist_meta_v must be non-negative")
    if epsilon is None:
        if recovery is None:
            raise ValueError("epsilon is None and no recovery data was supplied")
        epsilon = recovery.epsilon
    radius = drift_profile.radius(epsilon)
    if radius is None:
        raise RadiusUnresolvedError(f"radius unresolved: no profile entry with base drift <= {epsilon}")
    cap = 100.0 * beta_meta if beta_max is None else beta_max
    clamped = dist_meta_v >= radius
    if clamped:
        value = cap
    else:
        value = max(beta_meta, beta_meta * radius / (radius - dist_meta_v))
        if value > cap:
            value, clamped = cap, True
    value = max(beta_meta, value)
    if clamped:
        log.warning("adaptive beta clamped to %g (drift %g vs radius %g)", value, dist_meta_v, radius)
        telemetry.emit("beta_clamp", beta_in=beta_meta, beta_out=value, dist_meta=radius,
                       dist_meta_v=dist_meta_v, epsilon=epsilon)
    return value


def _natural_key(task_id):
    if isinstance(task_id, (int, np.integer)):
        return (int(task_id),)
    return tuple(int(p) if p.isdigit() else p for p in re.split(r"(\d+)", str(task_id)) if p)


def nearest_subnetwork(candidate: ParamVector, references: Sequence[tuple]) -> str:
    """Reference with the smallest cosine distance; ties go to the lowest task id."""
    if not references:
        raise ValueError("no reference subnetworks")
    best = None
    for task_id, ref in references:
        key = (_cosine_distance(candidate.values, ref.values), _natural_key(task_id))
        if best is None or key < best[0]:
            best = (key, task_id)
    return best[1]


def remove_subnetwork(memory: MemoryBuffer, task_id: str, residual_beta: float = 0.0) -> MemoryBuffer:
    """Stop (or partially stop) preserving a task's base parameters; its entry is kept."""
    if not 0.0 <= residual_beta < 1.0:
        raise ValueError("residual_beta must lie in [0, 1)")
    if task_id not in memory:
        raise KeyError(f"task {task_id!r} not in memory")
    return memory.with_beta(task_id, residual_beta)


@dataclass(frozen=True)
class ExpansionConfig:
    hyper: HyperParams
    mode: str = "snp"
    remove_task: str | None = None
    residual_beta: float = 0.0
    beta_int: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if (self.mode == "snp_remove") != (self.remove_task is not None):
            raise ValueError("remove_task is required by, and only by, mode snp_remove")
        if self.mode == "snp_mode_switch":
            raise ValueError("mode switching runs through mode_switch(), not expand_space()")
        if self.beta_int < 0:
            raise ValueError("beta_int must be non-negative")

    @property
    def uses_memory(self) -> bool:
        return self.mode != "snp"

    @property
    def interpolating(self) -> bool:
        return self.mode == "snp_interpolate" and self.beta_int > 0


@dataclass
class ExpandEpochTrace:
    task_id: str
    epoch: int
    theta_before: ParamVector
    loss: float
    task_grad: np.ndarray
    dist_meta_v: float
    meta_grad: np.ndarray
    dist_base: dict
    base_grad: np.ndarray
    target: str | None
    dist_int: float | None
    int_grad: np.ndarray | None
    beta_meta: float
    theta_after: ParamVector


@dataclass
class ExpansionResult:
    theta: ParamVector
    memory: MemoryBuffer | None
    ledger: ResultLedger
    beta_meta: float
    epsilon: float
    profile: DriftProfile
    aborted: list = field(default_factory=list)
    targets: dict = field(default_factory=dict)
    beta_history: list = field(default_factory=list)

    def __iter__(self):
        # (theta, memory, ledger) unpacking
        return iter((self.theta, self.memory, self.ledger))


def expand_space(theta: ParamVector, new_tasks: Sequence, memory: MemoryBuffer | None,
                 config: ExpansionConfig, model: ModelConfig, rng_seed=0, *,
                 profile: DriftProfile | None = None, telemetry: Telemetry | None = None,
                 eval_tasks: Sequence = (), eval_settings: EvalSettings | None = None,
                 first_stage: int = 1, method: str | None = None,
                 trace: list | None = None) -> ExpansionResult:
    """Learn ``new_tasks`` sequentially while bounding meta and base drift.

    Per epoch of task ``v`` the update is
    ``theta - lr_meta dL_v - beta_meta dL_meta - sum_t beta_base_t dL_base_t - beta_int dL_int``
    (first-order gradients).  ``beta_meta`` is revised by ``adaptive_beta``
    when the task ends (or every epoch with ``adaptive_beta_per_epoch``).  An
    unresolved radius rolls the task back to its starting state.
    """
    hyper = config.hyper
    telemetry = telemetry or NULL
    seed = _seed_tuple(rng_seed)
    if config.uses_memory and memory is None:
        raise ValueError(f"mode {config.mode} needs a memory buffer")
    if config.mode == "snp_remove":
        memory = remove_subnetwork(memory, config.remove_task, config.residual_beta)
        telemetry.emit("remove", task_id=config.remove_task, residual_beta=config.residual_beta)

    use_memory = config.uses_memory and memory is not None
    refs: dict[str, ParamVector] = {}
    if use_memory:
        refs = {e.task_id: project(theta, e.batch(), hyper.lr_base, model) for e in memory}

    ref_tasks = list(memory) if use_memory and len(memory) else list(new_tasks)
    epsilon = hyper.epsilon
    recovery = None
    if epsilon is None:
        recovery = recovery_check(theta, ref_tasks, hyper, model)
        epsilon = recovery.epsilon
        telemetry.emit("epsilon_estimate", epsilon=epsilon)
    if profile is None:
        base_ref = [project(theta, support_batch(t, hyper.K), hyper.lr_base, model) for t in ref_tasks]
        profile = sample_drift_profile(theta, base_ref, ref_tasks, hyper, (*seed, STREAM_DRIFT), model)

    beta_meta = hyper.beta_meta
    beta_cap = 100.0 * hyper.beta_meta
    settings = eval_settings or EvalSettings(K=hyper.K, lr_base=hyper.lr_base)
    ledger = ResultLedger()
    label = method or config.mode
    result = ExpansionResult(theta, memory, ledger, beta_meta, epsilon, profile)

    for v_index, task in enumerate(new_tasks):
        start_theta, start_memory = theta, memory
        betas = {e.task_id: e.beta_base for e in memory} if use_memory else {}
        inner, outer = meta_batches(task, hyper.K, hyper.disjoint_batches)
        sup_v = support_batch(task, hyper.K)
        dist_meta_v = 0.0
        target = None
        aborted = False
        for epoch in range(hyper.epochs_expand):
            try:
                _, g_inner = loss_and_grad(theta, model, inner)
                adapted = theta.with_values(theta.values - hyper.lr_base * g_inner.values)
                loss_v, mg = loss_and_grad(adapted, model, outer)
                task_grad = mg.values

                stepped = theta.values - hyper.lr_meta * task_grad
                dist_meta_v = _cosine_distance(theta.values, stepped)
                ga, gb = cosine_distance_grads(theta.values, stepped)
                meta_grad = ga + gb

                b_v = None
                if use_memory and config.interpolating and refs:
                    b_v = project(theta, sup_v, hyper.lr_base, model)
                    target = nearest_subnetwork(b_v, list(refs.items()))

                base_grad = np.zeros_like(theta.values)
                dist_base = {}
                projections = {}
                if use_memory:
                    for entry in memory:
                        w = 0.0 if entry.task_id == target else betas[entry.task_id]
                        if w <= 0 or entry.task_id not in refs:
                            continue
                        b_t = project(theta, entry.batch(), hyper.lr_base, model)
                        projections[entry.task_id] = b_t
                        dist_base[entry.task_id] = _cosine_distance(refs[entry.task_id].values, b_t.values)
                        _, gt = cosine_distance_grads(refs[entry.task_id].values, b_t.values)
                        base_grad += w * gt

                dist_int = None
                int_grad = None
                if target is not None:
                    b_g = projections.get(target)
                    if b_g is None:
                        b_g = project(theta, memory.get(target).batch(), hyper.lr_base, model)
                    dist_int = _cosine_distance(b_v.values, b_g.values)
                    ga, gb = cosine_distance_grads(b_v.values, b_g.values)
                    int_grad = ga + gb

                values = theta.values - hyper.lr_meta * task_grad
                values = values - beta_meta * meta_grad
                if use_memory:
                    values = values - base_grad
                if int_grad is not None:
                    values = values - config.beta_int * int_grad
                new_theta = theta.with_values(values)
            except (NonFiniteLossError, FloatingPointError) as exc:
                telemetry.emit("divergence", phase="expand", task_id=task.task_id, epoch=epoch,
                               error=str(exc))
                raise DivergenceError(epoch, exc) from exc

            telemetry.emit("expand_epoch", task_id=task.task_id, epoch=epoch, loss=loss_v,
                           L_meta=dist_meta_v, L_base=float(sum(dist_base.values())),
                           L_int=dist_int, target=target, beta_meta=beta_meta)
            if trace is not None:
                trace.append(ExpandEpochTrace(
                    task.task_id, epoch, theta, loss_v, task_grad, dist_meta_v, meta_grad,
                    dist_base, base_grad, target, dist_int, int_grad, beta_meta, new_theta,
                ))
            theta = new_theta
            if hyper.adaptive_beta_per_epoch and beta_meta > 0:
                try:
                    beta_meta = _revise_beta(beta_meta, dist_meta_v, epsilon, profile, recovery,
                                             beta_cap, telemetry, task.task_id, epoch, result)
                except RadiusUnresolvedError:
                    aborted = True
                    break

        # a zero coefficient stays zero, so there is nothing to revise
        if not aborted and beta_meta > 0:
            try:
                beta_meta = _revise_beta(beta_meta, dist_meta_v, epsilon, profile, recovery,
                                         beta_cap, telemetry, task.task_id, None, result)
            except RadiusUnresolvedError:
                aborted = True
        if aborted:
            theta, memory = start_theta, start_memory
            result.aborted.append(task.task_id)
            telemetry.emit("rollback", task_id=task.task_id, reason="radius unresolved")
            continue

        if use_memory:
            if config.interpolating and target is not None:
                memory = memory.with_mapping(task.task_id, target)
                result.targets[task.task_id] = target
                telemetry.emit("interpolated", task_id=task.task_id, target=target)
            else:
                entry = MemoryEntry(task.task_id, sup_v.inputs, sup_v.label_indices,
                                    sup_v.descriptors, hyper.beta_base_memory)
                memory = memory.add(entry)
                # later tasks in this call keep the new subnetwork where it ends up
                refs[task.task_id] = project(theta, sup_v, hyper.lr_base, model)
                telemetry.emit("memory_add", task_id=task.task_id, size=len(memory))
        if eval_tasks:
            ledger.extend(evaluate_tasks(theta, model, eval_tasks, first_stage + v_index, label, settings))

    result.theta, result.memory, result.beta_meta = theta, memory, beta_meta
    return result


def _revise_beta(beta_meta, dist_meta_v, epsilon, profile, recovery, cap, telemetry, task_id,
                 epoch, result) -> float:
    try:
        new = adaptive_beta(beta_meta, dist_meta_v, epsilon, profile, recovery,
                            beta_max=cap, telemetry=telemetry)
    except RadiusUnresolvedError as exc:
        telemetry.emit("radius_unresolved", task_id=task_id, epoch=epoch, error=str(exc))
        raise
    telemetry.emit("beta_update", task_id=task_id, epoch=epoch, beta_in=beta_meta, beta_out=new,
                   dist_meta_v=dist_meta_v, clamped=new == cap and new != beta_meta)
    result.beta_history.append(new)
    return new


def interpolate_subnetworks(theta: ParamVector, new_task, memory: MemoryBuffer,
                            config: ExpansionConfig, model: ModelConfig, rng_seed=0, **kwargs):
    """Fold ``new_task`` into its nearest stored subnetwork instead of adding one."""
    if memory is None or not len(memory):
        raise ValueError("interpolation needs a non-empty memory buffer")
    cfg = ExpansionConfig(config.hyper, "snp_interpolate", beta_int=config.beta_int)
    res = expand_space(theta, [new_task], memory, cfg, model, rng_seed, **kwargs)
    return res.theta, res.memory


# ---------------------------------------------------------------- mode switching


@dataclass(frozen=True)
class SearchConfig:
    samples: int = 32
    schedule: tuple[float, ...] | None = None   # absolute cosine drifts, ascending
    multipliers: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    perturbation_scale: float = 0.0             # relative norm jitter of candidates
    consolidation_epochs: int | None = None

    def resolve(self, radius: float | None) -> tuple[float, ...]:
        if self.schedule is not None:
            sched = tuple(float(s) for s in self.schedule)
        else:
            if radius is None:
                raise ValueError("a radius estimate is needed to scale the default schedule")
            sched = tuple(m * radius for m in self.multipliers)
        if any(b < a for a, b in zip(sched, sched[1:])):
            raise ValueError("drift schedule must be ascending")
        if any(not 0.0 <= s <= 2.0 for s in sched):
            raise ValueError("cosine drift targets must lie in [0, 2]")
        return sched


def drifted_candidate(theta: ParamVector, drift: float, rng: np.random.Generator,
                      norm_jitter: float = 0.0) -> ParamVector:
    """Random point at cosine distance ``drift`` from ``theta``."""
    t = theta.values
    n = np.linalg.norm(t)
    th = t / n
    u = rng.standard_normal(t.size)
    u -= (u @ th) * th
    u /= np.linalg.norm(u)
    phi = np.arccos(np.clip(1.0 - drift, -1.0, 1.0))
    scale = n * (1.0 + norm_jitter * rng.standard_normal()) if norm_jitter else n
    return theta.with_values(scale * (np.cos(phi) * th + np.sin(phi) * u))


def flat_basin_predicate(model: ModelConfig, K: int = 5, n_perturb: int = 16, rel_norm: float = 0.01,
                         factor: float = 2.0, seed: int = 0) -> Callable:
    """Loss under ``n_perturb`` random perturbations of relative norm ``rel_norm``
    stays below ``factor`` times the unperturbed loss."""

    def predicate(params: ParamVector, task) -> bool:
        batch = support_batch(task, K)
        base_loss, _ = loss_and_grad(params, model, batch)
        rng = make_rng(seed)
        size = rel_norm * params.norm()
        for _ in range(n_perturb):
            d = rng.standard_normal(params.values.size)
            d *= size / np.linalg.norm(d)
            loss, _ = loss_and_grad(params.with_values(params.values + d), model, batch)
            if not loss < factor * base_loss:
                return False
        return True

    return predicate


@dataclass
class ModeSwitchResult:
    success: bool
    theta: ParamVector | None
    found_meta: ParamVector | None
    found_base: ParamVector | None
    trials: list
    consolidation: dict = field(default_factory=dict)


def mode_switch(theta: ParamVector, memory: MemoryBuffer, task_id: str,
                predicate: Callable, search: SearchConfig, model: ModelConfig,
                hyper: HyperParams, rng_seed=0, *, radius: float | None = None,
                telemetry: Telemetry | None = None) -> ModeSwitchResult:
    """Search graduated meta drifts for base parameters of ``task_id`` satisfying ``predicate``.

    On the first hit the meta parameters are consolidated: the task's
    projection is pulled toward the found base parameters while every other
    stored task's projection is pinned to its current value.
    """
    telemetry = telemetry or NULL
    entry = memory.get(task_id)
    seed = _seed_tuple(rng_seed)
    schedule = search.resolve(radius)
    trials = []
    found = None
    for level, drift in enumerate(schedule):
        for k in range(search.samples):
            cand = drifted_candidate(theta, drift, make_rng(*seed, level, k), search.perturbation_scale)
            base = project(cand, entry.batch(), hyper.lr_base, model)
            ok = bool(predicate(base, entry))
            trials.append({"level": level, "sample": k, "drift": drift, "accepted": ok})
            if ok:
                found = (cand, base)
                break
        if found:
            break
    telemetry.emit("mode_search", task_id=task_id, trials=len(trials), success=found is not None)
    if found is None:
        return ModeSwitchResult(False, None, None, None, trials)

    cand, target_base = found
    refs = {e.task_id: project(theta, e.batch(), hyper.lr_base, model)
            for e in memory if e.task_id != task_id}
    epochs = search.consolidation_epochs if search.consolidation_epochs is not None else hyper.epochs_expand
    current = theta
    for epoch in range(epochs):
        b_task = project(current, entry.batch(), hyper.lr_base, model)
        _, g_target = cosine_distance_grads(target_base.values, b_task.values)
        grad = hyper.beta_int_default * g_target
        for e in memory:
            if e.task_id == task_id or e.beta_base <= 0:
                continue
            b_t = project(current, e.batch(), hyper.lr_base, model)
            _, gt = cosine_distance_grads(refs[e.task_id].values, b_t.values)
            grad = grad + e.beta_base * gt
        current = current.with_values(current.values - grad)
    final_task = project(current, entry.batch(), hyper.lr_base, model)
    others = {tid: _cosine_distance(ref.values, project(current, memory.get(tid).batch(),
                                                         hyper.lr_base, model).values)
              for tid, ref in refs.items()}
    info = {
        "target_distance": _cosine_distance(target_base.values, final_task.values),
        "other_drift": others,
        "predicate_on_found": bool(predicate(target_base, entry)),
        "predicate_after_consolidation": bool(predicate(final_task, entry)),
    }
    telemetry.emit("mode_switch", task_id=task_id, **{k: v for k, v in info.items() if k != "other_drift"},
                   other_drift=others)
    return ModeSwitchResult(True, current, cand, target_base, trials, info)
