"""Exemplar buffers, class prototypes, and effective-buffer assembly.

The buffer keeps up to K stored trigger representations per seen label.
Each class additionally gets a Gaussian prototype (mean, diagonal
covariance, population convention) from which synthetic representations
are drawn during later tasks; buffer plus synthetics form the effective
buffer rehearsed by the replay and distillation losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .numerics import RngState, gaussian_sample

NA = 0


@dataclass
class ReplayConfig:
    memory_per_label: int = 20        # K
    synthetic_ratio: float = 10.0     # r: synthetic count = r x real count
    strategy: str = "closest-to-mean"   # or "random"
    variance_floor: float = 1e-8      # applied when sampling, configurable to 0
    resample_per_epoch: bool = True

    def validate(self) -> None:
        if self.memory_per_label < 1:
            raise ConfigError("memory_per_label must be >= 1")
        if self.synthetic_ratio < 0:
            raise ConfigError("synthetic_ratio must be >= 0")
        if self.strategy not in ("closest-to-mean", "random"):
            raise ConfigError(f"unknown selection strategy {self.strategy!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "ReplayConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class Prototype:
    mean: np.ndarray      # (2D,)
    var: np.ndarray       # (2D,) per-dimension population variance
    count: int


@dataclass
class ReplayState:
    buffer: dict[int, np.ndarray] = field(default_factory=dict)   # label -> (k, 2D)
    prototypes: dict[int, Prototype] = field(default_factory=dict)

    @property
    def labels(self) -> list[int]:
        return sorted(set(self.buffer) | set(self.prototypes))


@dataclass
class EffectiveBuffer:
    """Replay buffer plus synthetic samples, label-major insertion order."""

    features: np.ndarray      # (N, 2D) float64
    labels: np.ndarray        # (N,) int
    is_synthetic: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return self.labels.size


def instance_features(inst) -> np.ndarray:
    """Trigger representation fed to the classifier: [h_start, h_end]."""
    return np.concatenate([
        np.asarray(inst.h_start, dtype=np.float64),
        np.asarray(inst.h_end, dtype=np.float64),
    ])


def _by_label(task_train) -> dict[int, np.ndarray]:
    grouped: dict[int, list[np.ndarray]] = {}
    for inst, label in task_train:
        if label == NA:
            continue
        grouped.setdefault(label, []).append(instance_features(inst))
    return {lab: np.stack(rows) for lab, rows in grouped.items()}


def select_memory(
    task_train, k: int, strategy: str = "closest-to-mean",
    rng: RngState | None = None,
) -> dict[int, np.ndarray]:
    """Pick up to ``k`` exemplars per non-NA label of the task.

    ``closest-to-mean`` greedily keeps the running selected-set mean close
    to the class mean (herding-style, deterministic); ``random`` samples
    uniformly without replacement under the given rng.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    grouped = _by_label(task_train)
    out: dict[int, np.ndarray] = {}
    for label in sorted(grouped):
        X = grouped[label]
        n = X.shape[0]
        if n <= k:
            out[label] = X.copy()
            continue
        if strategy == "random":
            if rng is None:
                raise DomainError("random selection needs an rng")
            idx = rng.child(f"select{label}").generator().choice(n, size=k, replace=False)
            out[label] = X[np.sort(idx)].copy()
        elif strategy == "closest-to-mean":
            mean = X.mean(axis=0)
            chosen: list[int] = []
            acc = np.zeros(X.shape[1])
            remaining = np.ones(n, dtype=bool)
            for step in range(1, k + 1):
                cand = (acc[None, :] + X) / step
                d = np.linalg.norm(cand - mean[None, :], axis=1)
                d[~remaining] = np.inf
                pick = int(np.argmin(d))
                chosen.append(pick)
                remaining[pick] = False
                acc += X[pick]
            out[label] = X[chosen].copy()
        else:
            raise DomainError(f"unknown selection strategy {strategy!r}")
    return out


def update_prototypes(
    store: dict[int, Prototype], task_train
) -> dict[int, Prototype]:
    """Fit per-label mean and population variance (divisor n) over the task."""
    new = dict(store)
    for label, X in sorted(_by_label(task_train).items()):
        mean = X.mean(axis=0)
        var = X.var(axis=0)  # population convention; 0 for single-item classes
        new[label] = Prototype(mean=mean, var=var, count=X.shape[0])
    return new


def generate_synthetic(
    store: dict[int, Prototype],
    labels,
    ratio: float,
    per_label_real: dict[int, int],
    rng: RngState,
    variance_floor: float = 1e-8,
) -> dict[int, np.ndarray]:
    """Draw ``ratio x real-count`` samples per label from its prototype."""
    if ratio < 0:
        raise DomainError("ratio must be >= 0")
    out: dict[int, np.ndarray] = {}
    for label in sorted(labels):
        if label not in store:
            raise DomainError(f"no prototype for label {label}")
        n = int(round(ratio * per_label_real.get(label, 0)))
        if n == 0:
            continue
        proto = store[label]
        var = np.maximum(proto.var, variance_floor)
        out[label] = gaussian_sample(proto.mean, var, n, rng.child(f"synth{label}"))
    return out


def effective_buffer(
    buffer: dict[int, np.ndarray], synthetic: dict[int, np.ndarray]
) -> EffectiveBuffer:
    feats, labels, synth = [], [], []
    for label in sorted(set(buffer) | set(synthetic)):
        real = buffer.get(label)
        if real is not None and real.size:
            feats.append(np.asarray(real, dtype=np.float64))
            labels.extend([label] * real.shape[0])
            synth.extend([False] * real.shape[0])
        gen = synthetic.get(label)
        if gen is not None and gen.size:
            feats.append(np.asarray(gen, dtype=np.float64))
            labels.extend([label] * gen.shape[0])
            synth.extend([True] * gen.shape[0])
    if not feats:
        dim = 0
        return EffectiveBuffer(
            features=np.zeros((0, dim)), labels=np.zeros(0, dtype=int),
            is_synthetic=np.zeros(0, dtype=bool))
    return EffectiveBuffer(
        features=np.concatenate(feats, axis=0),
        labels=np.asarray(labels, dtype=int),
        is_synthetic=np.asarray(synth, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Checkpointing (same binary conventions as the feature format)
# ---------------------------------------------------------------------------

def save_replay_state(state: ReplayState, path) -> None:
    p = Path(path)
    labels = state.labels
    header = {"format_version": 1, "entries": []}
    blobs: list[bytes] = []
    offset = 0
    for label in labels:
        entry: dict = {"label": label}
        buf = state.buffer.get(label)
        if buf is not None:
            arr = np.ascontiguousarray(buf, dtype="<f4")
            entry["buffer"] = {"offset": offset, "rows": arr.shape[0], "dim": arr.shape[1]}
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        proto = state.prototypes.get(label)
        if proto is not None:
            arr = np.ascontiguousarray(
                np.stack([proto.mean, proto.var]), dtype="<f4")
            entry["prototype"] = {"offset": offset, "dim": arr.shape[1], "count": proto.count}
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header["entries"].append(entry)
    p.with_suffix(".manifest.json").write_text(
        json.dumps(header, indent=2) + "\n", encoding="utf-8")
    p.with_suffix(".bin").write_bytes(b"".join(blobs))


def load_replay_state(path) -> ReplayState:
    p = Path(path)
    try:
        header = json.loads(p.with_suffix(".manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("malformed-header", str(exc)) from exc
    blob = p.with_suffix(".bin").read_bytes()
    state = ReplayState()
    for entry in header["entries"]:
        label = int(entry["label"])
        if "buffer" in entry:
            meta = entry["buffer"]
            need = meta["offset"] + meta["rows"] * meta["dim"] * 4
            if need > len(blob):
                raise FormatError("truncated-blob", f"buffer of label {label}")
            arr = np.frombuffer(
                blob, dtype="<f4", count=meta["rows"] * meta["dim"], offset=meta["offset"]
            ).reshape(meta["rows"], meta["dim"])
            state.buffer[label] = arr.astype(np.float64)
        if "prototype" in entry:
            meta = entry["prototype"]
            need = meta["offset"] + 2 * meta["dim"] * 4
            if need > len(blob):
                raise FormatError("truncated-blob", f"prototype of label {label}")
            arr = np.frombuffer(
                blob, dtype="<f4", count=2 * meta["dim"], offset=meta["offset"]
            ).reshape(2, meta["dim"]).astype(np.float64)
            state.prototypes[label] = Prototype(mean=arr[0], var=arr[1], count=meta["count"])
    return state
