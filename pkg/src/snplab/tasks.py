"""Synthetic seen/unseen task suites, episode sampling and distance-based grouping.

Every task is a Gaussian-cluster classification problem.  Class means lie on
the unit sphere of the input space; each class also carries a unit-norm
descriptor vector (the mapped class mean plus noise) used for zero-shot
classification.  A seen task and its unseen companions share a fraction of
their classes, which is what makes zero-shot transfer between them possible.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Batch, ParamVector, check_layouts, _cosine_distance
from .errors import InsufficientSamplesError, ShapeError


def make_rng(*keys: int) -> np.random.Generator:
    """PCG64 generator keyed by a tuple of non-negative integers."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class SuiteSpec:
    n_seen: int = 4
    n_unseen_per_seen: int = 1
    classes_per_task: int = 5
    samples_per_class: int = 30
    query_per_class: int = 10
    input_dim: int = 8
    descriptor_dim: int = 8
    transfer_strength: float = 0.6
    sample_noise: float = 0.15
    descriptor_noise: float = 0.05
    max_rotation: float = 0.5

    def __post_init__(self):
        for name in ("n_seen", "classes_per_task", "samples_per_class", "query_per_class",
                     "input_dim", "descriptor_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_unseen_per_seen < 0:
            raise ValueError("n_unseen_per_seen must be non-negative")
        if self.samples_per_class - self.query_per_class < 1:
            raise ValueError("each class needs at least one support and one query sample")
        if not 0.0 <= self.transfer_strength <= 1.0:
            raise ValueError("transfer_strength must lie in [0, 1]")
        if self.sample_noise < 0 or self.descriptor_noise < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def support_per_class(self) -> int:
        return self.samples_per_class - self.query_per_class

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Task:
    task_id: str
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    descriptors: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        arrays = {}
        for name in ("support_x", "query_x", "descriptors"):
            arrays[name] = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
        for name in ("support_y", "query_y"):
            arrays[name] = np.ascontiguousarray(getattr(self, name), dtype=np.int64).reshape(-1)
        n = arrays["descriptors"].shape[0]
        for split in ("support", "query"):
            y = arrays[f"{split}_y"]
            if y.size != arrays[f"{split}_x"].shape[0]:
                raise ShapeError(f"{split} labels and inputs differ in length")
            if y.size and (y.min() < 0 or y.max() >= n):
                raise ShapeError(f"{split} label outside the class range")
        for name, a in arrays.items():
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_classes(self) -> int:
        return self.descriptors.shape[0]

    def class_counts(self, split: str = "support") -> np.ndarray:
        y = self.support_y if split == "support" else self.query_y
        return np.bincount(y, minlength=self.n_classes)

    def support_indices(self, K: int) -> np.ndarray:
        """Indices of the first ``K`` support samples of every class, class-major."""
        counts = self.class_counts("support")
        if counts.min() < K:
            raise InsufficientSamplesError(
                self.task_id, f"needs {K} support samples per class, has {int(counts.min())}"
            )
        return np.concatenate([np.flatnonzero(self.support_y == c)[:K] for c in range(self.n_classes)])

    def support_set(self, K: int) -> Batch:
        """The task's fixed N-way-K-shot support set."""
        idx = self.support_indices(K)
        return Batch(self.support_x[idx], self.support_y[idx], self.descriptors)

    def pool_batch(self) -> Batch:
        return Batch(self.support_x, self.support_y, self.descriptors)

    def query_batch(self) -> Batch:
        return Batch(self.query_x, self.query_y, self.descriptors)

    def disjoint_batches(self, K: int) -> tuple[Batch, Batch]:
        """(K-shot support set, remainder of the support pool)."""
        idx = self.support_indices(K)
        rest = np.setdiff1d(np.arange(self.support_y.size), idx)
        if rest.size == 0:
            raise InsufficientSamplesError(self.task_id, "no support samples left for an outer batch")
        return (
            Batch(self.support_x[idx], self.support_y[idx], self.descriptors),
            Batch(self.support_x[rest], self.support_y[rest], self.descriptors),
        )


@dataclass(frozen=True, eq=False)
class TaskSuite:
    seen: tuple[Task, ...]
    unseen: dict[int, tuple[Task, ...]]
    spec: SuiteSpec | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.seen:
            raise ValueError("a task suite needs at least one seen task")
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", {int(k): tuple(v) for k, v in self.unseen.items()})

    def all_tasks(self) -> list[Task]:
        out = list(self.seen)
        for t in range(len(self.seen)):
            out.extend(self.unseen.get(t, ()))
        return out

    def task(self, task_id: str) -> Task:
        for t in self.all_tasks():
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    def fingerprint(self) -> str:
        from .persistence import suite_bytes

        manifest, payload = suite_bytes(self)
        return hashlib.sha256(manifest + payload).hexdigest()


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _orthonormal_map(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), max(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q[:rows, :cols]


def _rotate(v: np.ndarray, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate unit vector ``v`` by ``angle`` radians within a random plane containing it."""
    w = rng.standard_normal(v.size)
    w -= (w @ v) * v
    w /= np.linalg.norm(w)
    return np.cos(angle) * v + np.sin(angle) * w


def _descriptors(mapped: np.ndarray, spec: SuiteSpec, rng: np.random.Generator) -> np.ndarray:
    return _unit(mapped + spec.descriptor_noise * rng.standard_normal(mapped.shape))


def _sample_task(task_id, means, descriptors, spec, rng, provenance) -> Task:
    n_cls, dim = means.shape
    xs = means[:, None, :] + spec.sample_noise * rng.standard_normal((n_cls, spec.samples_per_class, dim))
    s = spec.support_per_class
    labels = np.repeat(np.arange(n_cls), spec.samples_per_class).reshape(n_cls, -1)
    return Task(
        task_id=task_id,
        support_x=xs[:, :s].reshape(-1, dim),
        support_y=labels[:, :s].reshape(-1),
        query_x=xs[:, s:].reshape(-1, dim),
        query_y=labels[:, s:].reshape(-1),
        descriptors=descriptors,
        provenance=provenance,
    )


def generate_task_suite(seed: int, spec: SuiteSpec) -> TaskSuite:
    """Build a suite as a pure function of ``(seed, spec)``.

    Seen task ``t`` draws from stream ``(seed, t, 0)``; its ``v``-th unseen
    companion from ``(seed, t, v + 1)``.  The first ``round(transfer_strength
    * N)`` classes of an unseen task are rotations of the seen task's classes
    by ``max_rotation * (1 - transfer_strength)`` radians and reuse its
    descriptor map; the remaining classes and their map are drawn fresh.
    """
    N, dim = spec.classes_per_task, spec.input_dim
    seen, unseen = [], {}
    n_shared = int(round(spec.transfer_strength * N))
    angle = spec.max_rotation * (1.0 - spec.transfer_strength)
    for t in range(spec.n_seen):
        rng = make_rng(seed, t, 0)
        means = _unit(rng.standard_normal((N, dim)))
        dmap = _orthonormal_map(rng, spec.descriptor_dim, dim)
        seen.append(_sample_task(f"T{t}", means, _descriptors(means @ dmap.T, spec, rng), spec, rng,
                                 {"seed": seed, "stream": [t, 0], "kind": "seen"}))
        companions = []
        for v in range(spec.n_unseen_per_seen):
            vr = make_rng(seed, t, v + 1)
            fresh = _unit(vr.standard_normal((N, dim)))
            fresh_map = _orthonormal_map(vr, spec.descriptor_dim, dim)
            v_means = fresh.copy()
            for c in range(n_shared):
                v_means[c] = means[c] if angle == 0.0 else _rotate(means[c], angle, vr)
            # shared classes keep the seen task's descriptor map, fresh ones use their own
            mixed = np.concatenate([v_means[:n_shared] @ dmap.T, v_means[n_shared:] @ fresh_map.T])
            companions.append(_sample_task(
                f"T{t}.V{v}", v_means, _descriptors(mixed, spec, vr), spec, vr,
                {"seed": seed, "stream": [t, v + 1], "kind": "unseen", "parent": t},
            ))
        unseen[t] = tuple(companions)
    return TaskSuite(tuple(seen), unseen, spec, seed)


def episode_sampler(task: Task, N: int, K: int, seed: int) -> tuple[Batch, Batch]:
    """Seeded N-way-K-shot episode: support from the support pool, query from the query pool.

    Classes are drawn without replacement (all classes when ``N`` equals the
    task's class count) and relabelled ``0..N-1`` in ascending original order.
    """
    if N < 1 or K < 1:
        raise ValueError("N and K must be positive")
    if N > task.n_classes:
        raise InsufficientSamplesError(task.task_id, f"{N}-way episode from {task.n_classes} classes")
    rng = make_rng(seed)
    if N == task.n_classes:
        classes = np.arange(N)
    else:
        classes = np.sort(rng.choice(task.n_classes, size=N, replace=False))
    s_idx, s_lab, q_idx, q_lab = [], [], [], []
    for new, c in enumerate(classes):
        pool = np.flatnonzero(task.support_y == c)
        if pool.size < K:
            raise InsufficientSamplesError(task.task_id, f"class {c} has {pool.size} support samples < K={K}")
        query = np.flatnonzero(task.query_y == c)
        if query.size < 1:
            raise InsufficientSamplesError(task.task_id, f"class {c} has no query samples")
        s_idx.append(np.sort(rng.choice(pool, size=K, replace=False)))
        s_lab.append(np.full(K, new))
        q_idx.append(query)
        q_lab.append(np.full(query.size, new))
    desc = task.descriptors[classes]
    support = Batch(task.support_x[np.concatenate(s_idx)], np.concatenate(s_lab), desc)
    query = Batch(task.query_x[np.concatenate(q_idx)], np.concatenate(q_lab), desc)
    return support, query


def pairwise_model_distance(checkpoints: list[ParamVector]) -> np.ndarray:
    n = len(checkpoints)
    for c in checkpoints[1:]:
        check_layouts(checkpoints[0], c)
    m = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = _cosine_distance(checkpoints[i].values, checkpoints[j].values)
    return m


@dataclass(frozen=True)
class Grouping:
    labels: tuple[int, ...]
    relations: dict  # (group_a, group_b) with a < b -> "near" | "far"

    @property
    def groups(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for i, g in enumerate(self.labels):
            out.setdefault(g, []).append(i)
        return out


def group_tasks(matrix, thresholds=(0.1, 0.3)) -> Grouping:
    """Single-linkage grouping of tasks by pairwise distance.

    Tasks within ``thresholds[0]`` of each other (transitively) share a group,
    labelled by its lowest member index.  Two groups whose closest members lie
    within ``thresholds[1]`` are "near", otherwise "far".
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError("distance matrix must be square")
    if not np.allclose(m, m.T):
        raise ValueError("distance matrix must be symmetric")
    lo, hi = thresholds
    n = m.shape[0]
    label = list(range(n))

    def find(i):
        while label[i] != i:
            label[i] = label[label[i]]
            i = label[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if m[i, j] <= lo:
                a, b = find(i), find(j)
                if a != b:
                    label[max(a, b)] = min(a, b)
    labels = tuple(find(i) for i in range(n))
    roots = sorted(set(labels))
    relations = {}
    for ai, a in enumerate(roots):
        for b in roots[ai + 1:]:
            members_a = [i for i in range(n) if labels[i] == a]
            members_b = [j for j in range(n) if labels[j] == b]
            gap = min(m[i, j] for i in members_a for j in members_b)
            relations[(a, b)] = "near" if gap <= hi else "far"
    return Grouping(labels, relations)
