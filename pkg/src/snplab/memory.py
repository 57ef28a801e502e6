"""One-support-set-per-task memory buffer."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import Batch


@dataclass(frozen=True, eq=False)
class MemoryEntry:
    task_id: str
    support_inputs: np.ndarray
    support_labels: np.ndarray
    descriptors: np.ndarray
    beta_base: float = 0.5

    def __post_init__(self):
        if self.beta_base < 0:
            raise ValueError("beta_base must be non-negative")
        x = np.ascontiguousarray(self.support_inputs, dtype=np.float64)
        y = np.ascontiguousarray(self.support_labels, dtype=np.int64).reshape(-1)
        d = np.ascontiguousarray(self.descriptors, dtype=np.float64)
        counts = np.bincount(y, minlength=d.shape[0])
        if counts.size != d.shape[0] or counts.min() < 1 or counts.min() != counts.max():
            raise ValueError(f"task {self.task_id!r}: support set is not N-way-K-shot")
        for a in (x, y, d):
            a.setflags(write=False)
        object.__setattr__(self, "support_inputs", x)
        object.__setattr__(self, "support_labels", y)
        object.__setattr__(self, "descriptors", d)
        object.__setattr__(self, "beta_base", float(self.beta_base))

    @property
    def shots(self) -> int:
        return int(self.support_labels.size // self.descriptors.shape[0])

    def batch(self) -> Batch:
        return Batch(self.support_inputs, self.support_labels, self.descriptors)

    @classmethod
    def from_task(cls, task, K: int, beta_base: float = 0.5) -> MemoryEntry:
        support = task.support_set(K)
        return cls(task.task_id, support.inputs, support.label_indices, support.descriptors, beta_base)

    def same_data(self, other: MemoryEntry) -> bool:
        return (
            self.task_id == other.task_id
            and np.array_equal(self.support_inputs, other.support_inputs)
            and np.array_equal(self.support_labels, other.support_labels)
            and np.array_equal(self.descriptors, other.descriptors)
        )


@dataclass(frozen=True, eq=False)
class MemoryBuffer:
    """Ordered support sets, one per registered task.

    ``mappings`` records tasks that were folded into an existing subnetwork by
    interpolation (new task id -> target task id); they own no entry.
    """

    entries: tuple[MemoryEntry, ...] = ()
    mappings: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [e.task_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task id in memory")
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "mappings", dict(self.mappings))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, task_id):
        return any(e.task_id == task_id for e in self.entries)

    @property
    def task_ids(self) -> list[str]:
        return [e.task_id for e in self.entries]

    def get(self, task_id: str) -> MemoryEntry:
        for e in self.entries:
            if e.task_id == task_id:
                return e
        raise KeyError(f"task {task_id!r} not in memory")

    def add(self, entry: MemoryEntry) -> MemoryBuffer:
        """Register ``entry``; an existing task's entry is replaced in place."""
        if entry.task_id in self:
            entries = tuple(entry if e.task_id == entry.task_id else e for e in self.entries)
        else:
            entries = self.entries + (entry,)
        return MemoryBuffer(entries, self.mappings)

    def with_beta(self, task_id: str, beta: float) -> MemoryBuffer:
        self.get(task_id)
        entries = tuple(replace(e, beta_base=beta) if e.task_id == task_id else e for e in self.entries)
        return MemoryBuffer(entries, self.mappings)

    def with_mapping(self, task_id: str, target: str) -> MemoryBuffer:
        return MemoryBuffer(self.entries, {**self.mappings, task_id: target})

    def identical(self, other: MemoryBuffer) -> bool:
        return (
            len(self) == len(other)
            and all(a.same_data(b) and a.beta_base == b.beta_base for a, b in zip(self, other))
            and self.mappings == other.mappings
        )
