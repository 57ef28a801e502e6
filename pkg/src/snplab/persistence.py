"""Manifest + payload files for checkpoints, memory buffers and task suites.

Every artifact is a pair ``<stem>.json`` (structured description, format tag
and version) and ``<stem>.bin`` (little-endian float64 values in the order the
manifest lists them).  Readers check the element count before decoding.
Integer labels are stored as float64, which is exact far beyond any class count.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelConfig, ParamVector
from .errors import ShapeError
from .memory import MemoryBuffer, MemoryEntry
from .tasks import SuiteSpec, Task, TaskSuite

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def _dump(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode("utf-8")


def _encode(arrays) -> bytes:
    if not arrays:
        return b""
    return np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays]).astype(_DTYPE).tobytes()


def _write(path, manifest: dict, payload: bytes) -> tuple[Path, Path]:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    man, bin_ = stem.with_suffix(".json"), stem.with_suffix(".bin")
    manifest = {**manifest, "payload": bin_.name, "count": len(payload) // _DTYPE.itemsize,
                "sha256": hashlib.sha256(payload).hexdigest()}
    man.write_bytes(_dump(manifest))
    bin_.write_bytes(payload)
    return man, bin_


def _read(path, kind: str) -> tuple[dict, np.ndarray]:
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    if manifest.get("format") != kind:
        raise ValueError(f"{stem}: expected a {kind} manifest, found {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"{stem}: unsupported format version {manifest.get('version')!r}")
    raw = (stem.parent / manifest["payload"]).read_bytes()
    if len(raw) % _DTYPE.itemsize:
        raise ShapeError(f"{stem}: payload length {len(raw)} is not a whole number of float64 values")
    data = np.frombuffer(raw, dtype=_DTYPE).astype(np.float64)
    if data.size != manifest["count"]:
        raise ShapeError(f"{stem}: payload has {data.size} values, manifest declares {manifest['count']}")
    return manifest, data


class _Cursor:
    def __init__(self, data: np.ndarray, where: str):
        self.data, self.pos, self.where = data, 0, where

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if len(shape) else 1
        if self.pos + n > self.data.size:
            raise ShapeError(f"{self.where}: payload ends before all declared arrays")
        out = self.data[self.pos:self.pos + n].reshape(shape)
        self.pos += n
        return out

    def labels(self, n: int) -> np.ndarray:
        y = self.take((n,))
        if not np.array_equal(y, np.round(y)):
            raise ValueError(f"{self.where}: non-integer label in payload")
        return y.astype(np.int64)

    def done(self):
        if self.pos != self.data.size:
            raise ShapeError(f"{self.where}: {self.data.size - self.pos} trailing payload values")


# ------------------------------------------------------------------ checkpoints


@dataclass
class Checkpoint:
    params: ParamVector
    config: ModelConfig
    seed: object = None
    info: dict = field(default_factory=dict)


def save_checkpoint(path, params: ParamVector, config: ModelConfig, seed=None,
                    info: dict | None = None) -> tuple[Path, Path]:
    if params.layout != config.layout():
        raise ShapeError("parameter layout does not match the model config")
    manifest = {
        "format": "snplab-checkpoint",
        "version": FORMAT_VERSION,
        "model": config.to_dict(),
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "seed": seed,
        "info": info or {},
    }
    return _write(path, manifest, _encode([params.values]))


def load_checkpoint(path) -> Checkpoint:
    manifest, data = _read(path, "snplab-checkpoint")
    config = ModelConfig.from_dict(manifest["model"])
    layout = tuple((name, tuple(shape)) for name, shape in manifest["layout"])
    if layout != config.layout():
        raise ShapeError("stored layout does not match the stored model config")
    return Checkpoint(ParamVector(data, layout), config, manifest.get("seed"), manifest.get("info", {}))


# ----------------------------------------------------------------------- memory


def save_memory(path, memory: MemoryBuffer) -> tuple[Path, Path]:
    entries, arrays = [], []
    for e in memory:
        entries.append({
            "task_id": e.task_id,
            "beta_base": e.beta_base,
            "n_support": int(e.support_labels.size),
            "input_dim": int(e.support_inputs.shape[1]),
            "n_classes": int(e.descriptors.shape[0]),
            "descriptor_dim": int(e.descriptors.shape[1]),
        })
        arrays += [e.support_inputs, e.support_labels, e.descriptors]
    manifest = {
        "format": "snplab-memory",
        "version": FORMAT_VERSION,
        "entries": entries,
        "mappings": dict(memory.mappings),
    }
    return _write(path, manifest, _encode(arrays))


def load_memory(path) -> MemoryBuffer:
    manifest, data = _read(path, "snplab-memory")
    cur = _Cursor(data, str(path))
    entries = []
    for m in manifest["entries"]:
        x = cur.take((m["n_support"], m["input_dim"]))
        y = cur.labels(m["n_support"])
        d = cur.take((m["n_classes"], m["descriptor_dim"]))
        entries.append(MemoryEntry(m["task_id"], x, y, d, m["beta_base"]))
    cur.done()
    return MemoryBuffer(tuple(entries), manifest.get("mappings", {}))


# ------------------------------------------------------------------- task suites


def _suite_parts(suite: TaskSuite) -> tuple[dict, list]:
    tasks, arrays = [], []
    for t in suite.all_tasks():
        tasks.append({
            "task_id": t.task_id,
            "provenance": t.provenance,
            "n_support": int(t.support_y.size),
            "n_query": int(t.query_y.size),
            "input_dim": int(t.support_x.shape[1]),
            "n_classes": int(t.n_classes),
            "descriptor_dim": int(t.descriptors.shape[1]),
        })
        arrays += [t.support_x, t.support_y, t.query_x, t.query_y, t.descriptors]
    manifest = {
        "format": "snplab-suite",
        "version": FORMAT_VERSION,
        "seed": suite.seed,
        "spec": suite.spec.to_dict() if suite.spec is not None else None,
        "n_seen": len(suite.seen),
        "unseen": {str(k): [t.task_id for t in v] for k, v in suite.unseen.items()},
        "tasks": tasks,
    }
    return manifest, arrays


def suite_bytes(suite: TaskSuite) -> tuple[bytes, bytes]:
    """Canonical (manifest, payload) encoding of a suite, without file references."""
    manifest, arrays = _suite_parts(suite)
    return _dump(manifest), _encode(arrays)


def save_suite(path, suite: TaskSuite) -> tuple[Path, Path]:
    manifest, arrays = _suite_parts(suite)
    return _write(path, manifest, _encode(arrays))


def load_suite(path) -> TaskSuite:
    manifest, data = _read(path, "snplab-suite")
    cur = _Cursor(data, str(path))
    tasks = {}
    for m in manifest["tasks"]:
        sx = cur.take((m["n_support"], m["input_dim"]))
        sy = cur.labels(m["n_support"])
        qx = cur.take((m["n_query"], m["input_dim"]))
        qy = cur.labels(m["n_query"])
        d = cur.take((m["n_classes"], m["descriptor_dim"]))
        tasks[m["task_id"]] = Task(m["task_id"], sx, sy, qx, qy, d, m.get("provenance", {}))
    cur.done()
    order = [m["task_id"] for m in manifest["tasks"]]
    seen = tuple(tasks[i] for i in order[:manifest["n_seen"]])
    unseen = {int(k): tuple(tasks[i] for i in ids) for k, ids in manifest["unseen"].items()}
    spec = SuiteSpec(**manifest["spec"]) if manifest.get("spec") else None
    return TaskSuite(seen, unseen, spec, manifest.get("seed"))


def file_digest(path) -> str:
    """SHA-256 over a manifest and its payload."""
    stem = _stem(path)
    h = hashlib.sha256()
    h.update(stem.with_suffix(".json").read_bytes())
    h.update(stem.with_suffix(".bin").read_bytes())
    return h.hexdigest()
