"""Trainable span classifier: head, losses, optimizer, task loop.

The network is a one-hidden-layer GELU feed-forward block over the frozen
trigger representation ``[h_start, h_end]`` followed by an expandable
linear head (one NA logit plus one logit per seen class).  Gradients are
hand-derived; every loss here is checked against central finite
differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erf

from .dataset_io import NA, Task, Vocabulary
from .errors import DomainError
from .metrics import micro_f1
from .numerics import RngState, log_softmax, softmax
from .ot import EmbeddingTables, OTConfig, ot_loss_and_grads
from .replay import (
    EffectiveBuffer,
    ReplayConfig,
    ReplayState,
    effective_buffer,
    generate_synthetic,
    instance_features,
    select_memory,
    update_prototypes,
)

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _gelu_grad(x: np.ndarray, cdf2: np.ndarray | None = None) -> np.ndarray:
    """GELU derivative; ``cdf2`` optionally reuses 1 + erf(x / sqrt(2))."""
    if cdf2 is None:
        cdf2 = 1.0 + erf(x / _SQRT2)
    return 0.5 * cdf2 + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


@dataclass
class ClassifierParams:
    W1: np.ndarray   # (H, 2D)
    b1: np.ndarray   # (H,)
    W2: np.ndarray   # (1 + C, H), row 0 is the NA logit
    b2: np.ndarray   # (1 + C,)

    @property
    def num_outputs(self) -> int:
        return self.W2.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2.copy())


@dataclass
class ParamGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    G: np.ndarray | None = None

    @staticmethod
    def zeros(params: ClassifierParams, tables: EmbeddingTables | None = None) -> "ParamGrads":
        return ParamGrads(
            np.zeros_like(params.W1), np.zeros_like(params.b1),
            np.zeros_like(params.W2), np.zeros_like(params.b2),
            None if tables is None else np.zeros_like(tables.G))

    def add_(self, other: "ParamGrads") -> None:
        self.W1 += other.W1
        self.b1 += other.b1
        self.W2 += other.W2
        self.b2 += other.b2
        if other.G is not None:
            if self.G is None:
                self.G = other.G.copy()
            else:
                self.G += other.G


@dataclass
class TeacherSnapshot:
    """Frozen copy of the classifier at the end of the previous task."""

    params: ClassifierParams
    num_outputs: int


@dataclass
class TrainingConfig:
    eta: float = 0.95             # NA reweighting of the classification loss
    alpha: float = 0.5            # class-embedding proximity coefficient
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    batch_size: int = 128
    max_epochs: int = 30
    patience: int = 3
    hidden: int = 256
    init_mode: str = "mapping"    # class-embedding init; falls back to random
    soft_freeze: bool = False     # keep old class embeddings trainable
    enable_ot: bool = True
    enable_embed_reg: bool = True
    enable_replay: bool = True
    enable_prototypes: bool = True
    ot: OTConfig = field(default_factory=OTConfig)

    def validate(self) -> None:
        if not (0.0 <= self.eta <= 1.0):
            raise DomainError("eta must lie in [0, 1]")
        if self.lr <= 0:
            raise DomainError("learning rate must be positive")
        if self.init_mode not in ("mapping", "random"):
            raise DomainError(f"unknown init mode {self.init_mode!r}")
        self.ot.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        ot = OTConfig.from_dict(d.pop("ot", {}))
        cfg = cls(ot=ot, **d)
        cfg.validate()
        return cfg


def init_params(input_dim: int, hidden: int, rng: RngState) -> ClassifierParams:
    """Fresh network with an NA-only head; classes arrive via expansion."""
    g = rng.generator()
    W1 = g.standard_normal((hidden, input_dim)) / np.sqrt(input_dim)
    return ClassifierParams(
        W1=W1,
        b1=np.zeros(hidden),
        W2=np.zeros((1, hidden)),
        b2=np.zeros(1),
    )


def forward(params: ClassifierParams, H) -> np.ndarray:
    """Logits over 1 + C classes; accepts one vector or a batch."""
    X = np.asarray(H, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != params.W1.shape[1]:
        raise DomainError(
            f"feature dim {X.shape[1]} != expected {params.W1.shape[1]}")
    logits = _gelu(X @ params.W1.T + params.b1) @ params.W2.T + params.b2
    return logits[0] if single else logits


def _forward_cached(params: ClassifierParams, X: np.ndarray):
    A = X @ params.W1.T + params.b1
    cdf2 = 1.0 + erf(A / _SQRT2)
    Z = 0.5 * A * cdf2
    logits = Z @ params.W2.T + params.b2
    return logits, (X, A, cdf2, Z)


def _backward(params: ClassifierParams, cache, d_logits: np.ndarray) -> ParamGrads:
    X, A, cdf2, Z = cache
    dW2 = d_logits.T @ Z
    db2 = d_logits.sum(axis=0)
    dZ = d_logits @ params.W2
    dA = dZ * _gelu_grad(A, cdf2)
    return ParamGrads(W1=dA.T @ X, b1=dA.sum(axis=0), W2=dW2, b2=db2)


def expand_head(
    params: ClassifierParams,
    tables: EmbeddingTables,
    n_new: int,
    init_mode: str,
    anchors: list[int | None],
    vocab: Vocabulary,
    rng: RngState,
    soft_freeze: bool = False,
) -> tuple[ClassifierParams, EmbeddingTables]:
    """Grow the head and the class-embedding table for a new task.

    New head rows are zero-initialized so old-class logits are untouched.
    ``mapping`` copies each class anchor's vocabulary embedding into its
    new G row (falling back to a random unit row when a class has no
    anchor); the pre-expansion table is snapshotted into ``G_prev``.
    """
    if n_new < 1:
        raise DomainError("n_new must be >= 1")
    if len(anchors) != n_new:
        raise DomainError("one anchor entry per new class required")
    H = params.W1.shape[0]
    new_params = ClassifierParams(
        W1=params.W1.copy(),
        b1=params.b1.copy(),
        W2=np.vstack([params.W2, np.zeros((n_new, H))]),
        b2=np.concatenate([params.b2, np.zeros(n_new)]),
    )
    g = rng.generator()
    rows = []
    for anchor in anchors:
        if init_mode == "mapping" and anchor is not None:
            rows.append(vocab.embeddings[anchor].astype(np.float64))
        else:
            row = g.standard_normal(tables.G.shape[1] if tables.G.size else vocab.embed_dim)
            rows.append(row / np.linalg.norm(row))
    new_tables = EmbeddingTables(
        G=np.vstack([tables.G, np.stack(rows)]) if tables.G.size else np.stack(rows),
        G_prev=tables.G.copy(),
        trainable=np.concatenate([
            tables.trainable if soft_freeze else np.zeros_like(tables.trainable),
            np.ones(n_new, dtype=bool),
        ]),
    )
    return new_params, new_tables


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _nll(logits: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Weighted negative log-likelihood and its logit gradient."""
    logp = log_softmax(logits)
    n = y.size
    loss = float(-(weights * logp[np.arange(n), y]).sum())
    d = softmax(logits) * weights[:, None]
    d[np.arange(n), y] -= weights
    return loss, d


def loss_classification(H, y, params: ClassifierParams, eta: float):
    """NA-reweighted cross-entropy: eta on the NA mean, (1-eta) on the rest."""
    X = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        raise DomainError("empty batch")
    logits, cache = _forward_cached(params, X)
    weights = np.zeros(y.size)
    na = y == NA
    if na.any():
        weights[na] = eta / na.sum()
    if (~na).any():
        weights[~na] = (1.0 - eta) / (~na).sum()
    loss, d_logits = _nll(logits, y, weights)
    return loss, _backward(params, cache, d_logits)


def loss_replay(H, y, params: ClassifierParams):
    """Mean cross-entropy over the effective buffer, unweighted."""
    X = np.asarray(H, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if y.size == 0:
        return 0.0, ParamGrads.zeros(params)
    logits, cache = _forward_cached(params, X)
    loss, d_logits = _nll(logits, y, np.full(y.size, 1.0 / y.size))
    return loss, _backward(params, cache, d_logits)


def loss_distill(H, params: ClassifierParams, teacher: TeacherSnapshot | None):
    """Cross-entropy to the previous model over its own class set.

    The student distribution is the current logits restricted to the
    teacher's outputs (NA + old classes) and renormalized.  Summed, not
    averaged, over items.
    """
    if teacher is None:
        return 0.0, ParamGrads.zeros(params)
    X = np.asarray(H, dtype=np.float64)
    if X.shape[0] == 0:
        return 0.0, ParamGrads.zeros(params)
    k = teacher.num_outputs
    if k > params.num_outputs:
        raise DomainError("teacher has more outputs than the student")
    t_probs = softmax(forward(teacher.params, X)[:, :k])
    logits, cache = _forward_cached(params, X)
    logq = log_softmax(logits[:, :k])
    loss = float(-(t_probs * logq).sum())
    d_restricted = softmax(logits[:, :k]) - t_probs  # row teacher mass is 1
    d_logits = np.zeros_like(logits)
    d_logits[:, :k] = d_restricted
    return loss, _backward(params, cache, d_logits)


def loss_embed_reg(tables: EmbeddingTables):
    """Squared Frobenius distance of overlapping rows to the snapshot."""
    overlap = tables.G_prev.shape[0]
    d_G = np.zeros_like(tables.G)
    if overlap == 0:
        return 0.0, d_G
    diff = tables.G[:overlap] - tables.G_prev
    d_G[:overlap] = 2.0 * diff
    d_G[~tables.trainable] = 0.0
    return float(np.sum(diff * diff)), d_G


@dataclass
class ModelState:
    params: ClassifierParams
    tables: EmbeddingTables
    teacher: TeacherSnapshot | None = None


@dataclass
class StepBreakdown:
    classification: float = 0.0
    replay: float = 0.0
    distill: float = 0.0
    ot: float = 0.0
    embed_reg: float = 0.0
    sinkhorn_nonconverged: int = 0

    def total(self, alpha: float) -> float:
        return (self.classification + self.replay + self.distill
                + self.ot + alpha * self.embed_reg)


def total_loss(
    cur_H: np.ndarray,
    cur_y: np.ndarray,
    cur_insts: list,
    buf: EffectiveBuffer | None,
    state: ModelState,
    cfg: TrainingConfig,
    vocab: Vocabulary,
) -> tuple[float, ParamGrads, StepBreakdown]:
    """One optimization step's loss: L_C + L_R + L_D + L_OT + alpha L_G.

    The current batch is forwarded once and shared by the classification
    and transport terms; the buffer batch once for replay and
    distillation.  The transport term sees only non-NA instances and only
    non-NA logits.
    """
    params, tables = state.params, state.tables
    bd = StepBreakdown()
    X = np.asarray(cur_H, dtype=np.float64)
    y = np.asarray(cur_y, dtype=int)
    logits, cache = _forward_cached(params, X)

    weights = np.zeros(y.size)
    na = y == NA
    if na.any():
        weights[na] = cfg.eta / na.sum()
    if (~na).any():
        weights[~na] = (1.0 - cfg.eta) / (~na).sum()
    bd.classification, d_logits = _nll(logits, y, weights)

    d_G = np.zeros_like(tables.G)
    if cfg.enable_ot and tables.num_classes > 0:
        idx = np.flatnonzero(y != NA)
        if idx.size:
            sub = [cur_insts[i] for i in idx]
            res = ot_loss_and_grads(sub, logits[idx, 1:], tables, vocab, cfg.ot)
            bd.ot = res.loss
            bd.sinkhorn_nonconverged = res.n_nonconverged
            d_logits[idx, 1:] += res.d_logits
            d_G += res.d_G
    grads = _backward(params, cache, d_logits)
    grads.G = d_G

    if buf is not None and len(buf):
        b_logits, b_cache = _forward_cached(params, buf.features)
        n = buf.labels.size
        bd.replay, d_b = _nll(b_logits, buf.labels, np.full(n, 1.0 / n))
        if state.teacher is not None:
            k = state.teacher.num_outputs
            t_probs = softmax(forward(state.teacher.params, buf.features)[:, :k])
            logq = log_softmax(b_logits[:, :k])
            bd.distill = float(-(t_probs * logq).sum())
            d_b[:, :k] += softmax(b_logits[:, :k]) - t_probs
        grads.add_(_backward(params, b_cache, d_b))

    if cfg.enable_embed_reg:
        bd.embed_reg, d_reg = loss_embed_reg(tables)
        grads.G += cfg.alpha * d_reg

    return bd.total(cfg.alpha), grads, bd


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @staticmethod
    def init(params: ClassifierParams, tables: EmbeddingTables) -> "AdamWState":
        shapes = {
            "W1": params.W1, "b1": params.b1, "W2": params.W2, "b2": params.b2,
            "G": tables.G,
        }
        return AdamWState(
            m={k: np.zeros_like(a) for k, a in shapes.items()},
            v={k: np.zeros_like(a) for k, a in shapes.items()},
        )


def adamw_step(
    params: ClassifierParams,
    tables: EmbeddingTables,
    grads: ParamGrads,
    opt: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Decoupled-weight-decay Adam update with bias correction, in place.

    Frozen class-embedding rows are never touched, by decay or by moments.
    """
    b1, b2 = betas
    opt.t += 1
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    named = [
        ("W1", params.W1, grads.W1), ("b1", params.b1, grads.b1),
        ("W2", params.W2, grads.W2), ("b2", params.b2, grads.b2),
    ]
    if grads.G is not None and tables.G.size:
        named.append(("G", tables.G, grads.G))
    for key, value, grad in named:
        m = opt.m[key]
        v = opt.v[key]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps) + lr * weight_decay * value
        if key == "G":
            update[~tables.trainable] = 0.0
        value -= update


# ---------------------------------------------------------------------------
# Task training
# ---------------------------------------------------------------------------

@dataclass
class TaskLog:
    epochs: int = 0
    steps: int = 0
    best_epoch: int = 0
    dev_f1: list[float] = field(default_factory=list)
    loss_terms: dict[str, list[float]] = field(default_factory=dict)
    sinkhorn_nonconverged: int = 0


def _pack(split) -> tuple[np.ndarray, np.ndarray, list]:
    insts = [inst for inst, _ in split]
    labels = np.asarray([lab for _, lab in split], dtype=int)
    if not insts:
        return np.zeros((0, 0)), labels, insts
    H = np.stack([instance_features(inst) for inst in insts])
    return H, labels, insts


def predict(params: ClassifierParams, H: np.ndarray) -> np.ndarray:
    if H.shape[0] == 0:
        return np.zeros(0, dtype=int)
    return np.argmax(forward(params, H), axis=1)


def _epoch_buffer(
    replay_state: ReplayState, cfg: TrainingConfig, rcfg: ReplayConfig,
    rng: RngState,
) -> EffectiveBuffer | None:
    real = replay_state.buffer if cfg.enable_replay else {}
    synth: dict[int, np.ndarray] = {}
    if cfg.enable_prototypes and replay_state.prototypes:
        # without a buffer (replay disabled) each prototype contributes as
        # if a full memory slot of real items backed it
        per_real = {
            lab: (real[lab].shape[0] if lab in real else rcfg.memory_per_label)
            for lab in replay_state.prototypes
        }
        synth = generate_synthetic(
            replay_state.prototypes, list(replay_state.prototypes), rcfg.synthetic_ratio,
            per_real, rng, variance_floor=rcfg.variance_floor)
    if not real and not synth:
        return None
    return effective_buffer(real, synth)


def train_task(
    state: ModelState,
    task: Task,
    vocab: Vocabulary,
    cfg: TrainingConfig,
    rcfg: ReplayConfig,
    replay_state: ReplayState,
    rng: RngState,
) -> TaskLog:
    """Mini-batch training on one task with rehearsal and early stopping.

    Each step draws one current-task batch and one effective-buffer batch
    and sums their losses.  Training stops after ``patience`` epochs
    without a dev-F1 improvement; the best-dev parameters are restored.
    End-of-task bookkeeping (teacher snapshot, buffer/prototype updates,
    embedding freeze) happens here as well.
    """
    cfg.validate()
    rcfg.validate()
    log = TaskLog(loss_terms={k: [] for k in
                              ("classification", "replay", "distill", "ot", "embed_reg")})
    Htr, ytr, insts = _pack(task.train)
    Hdev, ydev, _ = _pack(task.dev)
    n = ytr.size
    opt = AdamWState.init(state.params, state.tables)
    g_shuffle = rng.child("shuffle").generator()
    g_buf = rng.child("buffer-order").generator()

    best_f1 = -1.0
    best = (state.params.copy(), state.tables.G.copy())
    stale = 0
    eff: EffectiveBuffer | None = None
    for epoch in range(1, cfg.max_epochs + 1):
        if epoch == 1 or rcfg.resample_per_epoch:
            eff = _epoch_buffer(replay_state, cfg, rcfg, rng.child(f"synth-e{epoch}"))
        buf_chunks: list[np.ndarray] = []
        if eff is not None and len(eff):
            perm = g_buf.permutation(len(eff))
            bs = min(cfg.batch_size, len(eff))
            buf_chunks = [perm[i:i + bs] for i in range(0, len(eff) - bs + 1, bs)]
        sums = dict.fromkeys(log.loss_terms, 0.0)
        steps_this = 0
        order = g_shuffle.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            buf = None
            if buf_chunks:
                chunk = buf_chunks[steps_this % len(buf_chunks)]
                buf = EffectiveBuffer(
                    features=eff.features[chunk], labels=eff.labels[chunk],
                    is_synthetic=eff.is_synthetic[chunk])
            _, grads, bd = total_loss(
                Htr[idx], ytr[idx], [insts[i] for i in idx], buf, state, cfg, vocab)
            adamw_step(
                state.params, state.tables, grads, opt, cfg.lr, cfg.weight_decay,
                (cfg.beta1, cfg.beta2), cfg.eps_adam)
            for key in sums:
                sums[key] += getattr(bd, key)
            log.sinkhorn_nonconverged += bd.sinkhorn_nonconverged
            steps_this += 1
        log.steps += steps_this
        log.epochs = epoch
        for key, total in sums.items():
            log.loss_terms[key].append(total / max(steps_this, 1))

        f1 = micro_f1(predict(state.params, Hdev), ydev) if ydev.size else 0.0
        log.dev_f1.append(f1)
        if f1 > best_f1:
            best_f1 = f1
            best = (state.params.copy(), state.tables.G.copy())
            log.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale > cfg.patience:
                break

    state.params = best[0]
    state.tables.G = best[1]

    # end-of-task bookkeeping
    state.teacher = TeacherSnapshot(
        params=state.params.copy(), num_outputs=state.params.num_outputs)
    if cfg.enable_replay:
        replay_state.buffer.update(select_memory(
            task.train, rcfg.memory_per_label, rcfg.strategy, rng.child("select")))
    if cfg.enable_prototypes:
        replay_state.prototypes = update_prototypes(replay_state.prototypes, task.train)
    if not cfg.soft_freeze:
        state.tables.trainable[:] = False
    return log
