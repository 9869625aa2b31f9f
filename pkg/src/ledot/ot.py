"""Optimal-transport alignment between classifier outputs and LM-head mass.

The trigger's LM-head logits induce a distribution x over a candidate
vocabulary; the classifier induces p over non-NA classes.  An entropically
regularized transport problem with ground cost ``m_vc = 1 - cos(e_v, g_c)``
couples the two; its value plus a vocabulary-space cross-entropy term forms
the alignment loss.  Gradients come from the envelope theorem: the optimal
plan differentiates the value with respect to the cost, the (centered)
column dual potentials with respect to the class marginal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .dataset_io import FeatureInstance, Vocabulary
from .errors import DegenerateVectorError, DomainError
from .numerics import softmax

# scaling-domain Sinkhorn falls back to log-domain iterations when a
# scaling factor leaves this range
_SCALE_LO, _SCALE_HI = 1e-100, 1e100
_ANNEAL_BELOW = 0.05  # warm-start duals through a lambda ladder under this


@dataclass
class OTConfig:
    lam: float = 1.0          # entropic regularization strength
    tau: float = 1.0          # LM-head temperature
    epsilon: float = 1.0      # weight of the vocabulary cross-entropy term
    kappa: float = 1.0        # temperature of the class-to-vocabulary mixture
    tol: float = 1e-6         # max marginal violation at convergence
    max_iter: int = 500
    support_mode: str = "batch-union"   # or "full-candidate"

    def validate(self) -> None:
        if self.lam <= 0 or self.tau <= 0 or self.kappa <= 0 or self.tol <= 0:
            raise DomainError("lam, tau, kappa, tol must be positive")
        if self.support_mode not in ("batch-union", "full-candidate"):
            raise DomainError(f"unknown support mode {self.support_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "OTConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class VocabDistribution:
    support: np.ndarray   # candidate-vocabulary indices, unique
    probs: np.ndarray     # strictly positive, sums to 1
    tau: float


@dataclass
class EmbeddingTables:
    """Class-embedding matrix with its previous-task snapshot."""

    G: np.ndarray                        # (C, D_e) float64, row c-1 for class c
    G_prev: np.ndarray                   # (C_prev, D_e), aligned with G's first rows
    trainable: np.ndarray                # (C,) bool

    @property
    def num_classes(self) -> int:
        return self.G.shape[0]

    @staticmethod
    def empty(embed_dim: int) -> "EmbeddingTables":
        return EmbeddingTables(
            G=np.zeros((0, embed_dim)),
            G_prev=np.zeros((0, embed_dim)),
            trainable=np.zeros(0, dtype=bool),
        )


@dataclass
class CostMatrix:
    values: np.ndarray          # (S, C), entries in [0, 2]
    support: np.ndarray         # vocabulary indices of the rows
    word_embeddings: np.ndarray   # (S, D_e) float64 rows backing the matrix
    class_embeddings: np.ndarray  # (C, D_e) float64 columns backing the matrix


@dataclass
class TransportPlan:
    plan: np.ndarray        # (S, C), nonnegative (may underflow at tiny lam)
    dual_row: np.ndarray    # (S,)
    dual_col: np.ndarray    # (C,)
    iterations: int
    converged: bool
    transport_cost: float   # <P, M>
    objective: float        # <P, M> + lam * sum P (log P - 1)


# keeps vocabulary distributions strictly positive when extreme
# temperatures underflow softmax entries to exact zeros
_PROB_FLOOR = 1e-12


def _positive_rows(rows: np.ndarray) -> np.ndarray:
    rows = np.maximum(rows, _PROB_FLOOR)
    return rows / rows.sum(axis=-1, keepdims=True)


def lm_head_distribution(
    inst: FeatureInstance, tau: float, support: np.ndarray
) -> VocabDistribution:
    """Average of the start/end LM-head softmaxes restricted to ``support``.

    Entries are floored at 1e-12 (and renormalized) so the result stays a
    strictly positive distribution even at temperatures where the softmax
    underflows; invisible above the distribution's own 1e-10 tolerance.
    """
    support = np.asarray(support, dtype=np.int64)
    if support.size == 0:
        raise DomainError("empty support")
    xs = softmax(np.asarray(inst.lm_logits_start, dtype=np.float64)[support], tau)
    xe = softmax(np.asarray(inst.lm_logits_end, dtype=np.float64)[support], tau)
    probs = (xs + xe) / 2.0
    if probs.min() < _PROB_FLOOR:
        probs = _positive_rows(probs)
    return VocabDistribution(support=support, probs=probs, tau=tau)


def _lm_distribution_rows(
    batch: list[FeatureInstance], tau: float, support: np.ndarray
) -> np.ndarray:
    """Stacked x rows for a batch; one softmax call instead of 2B."""
    ls = np.stack([inst.lm_logits_start for inst in batch]).astype(np.float64)[:, support]
    le = np.stack([inst.lm_logits_end for inst in batch]).astype(np.float64)[:, support]
    rows = (softmax(ls, tau) + softmax(le, tau)) / 2.0
    if rows.min() < _PROB_FLOOR:
        rows = _positive_rows(rows)
    return rows


def batch_support(
    batch: list[FeatureInstance], vocab: Vocabulary, mode: str = "batch-union"
) -> np.ndarray:
    """Vocabulary indices the transport source ranges over.

    ``full-candidate`` is the verb subset alone; ``batch-union`` adds every
    token id occurring in the batch's sentences.
    """
    verbs = np.flatnonzero(vocab.is_verb)
    if mode == "full-candidate":
        return verbs.astype(np.int64)
    if mode != "batch-union":
        raise DomainError(f"unknown support mode {mode!r}")
    extra = [np.asarray(inst.token_ids, dtype=np.int64) for inst in batch]
    return np.unique(np.concatenate([verbs.astype(np.int64), *extra]))


def build_cost_matrix(
    vocab: Vocabulary, support: np.ndarray, tables: EmbeddingTables
) -> CostMatrix:
    support = np.asarray(support, dtype=np.int64)
    E = vocab.embeddings[support].astype(np.float64)
    G = tables.G
    e_norm = np.linalg.norm(E, axis=1)
    g_norm = np.linalg.norm(G, axis=1)
    if np.any(e_norm == 0.0) or np.any(g_norm == 0.0):
        raise DegenerateVectorError("zero-norm embedding in cost matrix")
    cos = (E / e_norm[:, None]) @ (G / g_norm[:, None]).T
    values = np.clip(1.0 - cos, 0.0, 2.0)
    return CostMatrix(values=values, support=support, word_embeddings=E, class_embeddings=G)


# ---------------------------------------------------------------------------
# Solvers
# ---------------------------------------------------------------------------

def _check_marginals(x: np.ndarray, name: str) -> None:
    if x.ndim != 1 or x.size == 0:
        raise DomainError(f"{name} must be a nonempty vector")
    if np.any(x <= 0):
        raise DomainError(f"{name} must be strictly positive")
    if abs(float(x.sum()) - 1.0) > 1e-8:
        raise DomainError(f"{name} must sum to 1")


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _sinkhorn_scaling(X, P, K, tol, max_iter):
    """Plain Sinkhorn-Knopp on a batch sharing the kernel K.

    Returns (U, V, iterations, converged_mask) or None when a scaling
    factor leaves the stable range.
    """
    B = X.shape[0]
    V = np.ones((B, K.shape[1]))
    T = V @ K.T  # (B, S), reused between the update and the marginal check
    converged = np.zeros(B, dtype=bool)
    for it in range(1, max_iter + 1):
        U = X / T
        V = P / (U @ K)
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(V))):
            return None
        umin, vmin = U.min(), V.min()
        if umin <= 0 or vmin <= 0:
            return None
        if max(U.max(), V.max()) > _SCALE_HI or min(umin, vmin) < _SCALE_LO:
            return None
        T = V @ K.T
        converged = np.max(np.abs(U * T - X), axis=1) < tol
        if np.all(converged):
            return U, V, it, converged
    return U, V, max_iter, converged


def _sinkhorn_log(X, P, M, lam, tol, max_iter, F=None, G=None):
    """Log-domain iterations; warm-startable through dual potentials."""
    B, S = X.shape
    C = P.shape[1]
    LX, LP = np.log(X), np.log(P)
    if F is None:
        F = np.zeros((B, S))
    if G is None:
        G = np.zeros((B, C))
    converged = np.zeros(B, dtype=bool)
    Mb = M[None, :, :]
    lse_g = _logsumexp((G[:, None, :] - Mb) / lam, axis=2)  # (B, S)
    for it in range(1, max_iter + 1):
        F = lam * (LX - lse_g)
        G = lam * (LP - _logsumexp((F[:, :, None] - Mb) / lam, axis=1))
        lse_g = _logsumexp((G[:, None, :] - Mb) / lam, axis=2)
        converged = np.max(np.abs(np.exp(F / lam + lse_g) - X), axis=1) < tol
        if np.all(converged):
            return F, G, it, converged
    return F, G, max_iter, converged


def sinkhorn_batch(X, P, M, lam, tol, max_iter, anneal: bool | None = None):
    """Solve a batch of transport problems sharing one cost matrix.

    Minimizes ``<P, M> + lam * sum P_ij (log P_ij - 1)`` over couplings of
    each (X[b], P[b]) pair.  Returns per-problem plans (B, S, C), dual
    potentials F (B, S) and G (B, C), total sweep count, and a converged
    mask.  Starts in scaling space and drops to log-domain iterations when
    a scaling factor leaves ``[1e-100, 1e100]``; for small lam the duals
    are warm-started through a geometric lambda ladder (same fixed point,
    far fewer sweeps).
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if lam <= 0 or tol <= 0:
        raise DomainError("lam and tol must be positive")
    for arr, name in ((X, "source marginal"), (P, "target marginal")):
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise DomainError(f"{name} batch must be 2-d and nonempty")
        if arr.min() <= 0:
            raise DomainError(f"{name} must be strictly positive")
        if np.max(np.abs(arr.sum(axis=1) - 1.0)) > 1e-8:
            raise DomainError(f"{name} must sum to 1")

    if anneal is None:
        anneal = lam < _ANNEAL_BELOW

    iterations = 0
    F = G = None
    if anneal:
        ladder = []
        cur = 1.0
        while cur > lam * (1 + 1e-12):
            ladder.append(cur)
            cur *= 0.1
        for l_mid in ladder:
            F, G, it, _ = _sinkhorn_log(
                X, P, M, l_mid, max(tol, 1e-4), max(20, max_iter // 10), F, G)
            iterations += it
        F, G, it, converged = _sinkhorn_log(X, P, M, lam, tol, max_iter, F, G)
        iterations += it
    else:
        K = np.exp(-M / lam)
        out = None if K.min() == 0.0 else _sinkhorn_scaling(X, P, K, tol, max_iter)
        if out is not None:
            U, V, iterations, converged = out
            F = lam * np.log(U)
            G = lam * np.log(V)
        else:
            F, G, iterations, converged = _sinkhorn_log(X, P, M, lam, tol, max_iter)

    log_plan = (F[:, :, None] + G[:, None, :] - M[None, :, :]) / lam
    plans = np.exp(log_plan)
    return plans, F, G, iterations, converged


def _reg_objective(plan: np.ndarray, M: np.ndarray, lam: float) -> tuple[float, float]:
    cost = float(np.sum(plan * M))
    ent = np.where(plan > 0, plan * (np.log(np.where(plan > 0, plan, 1.0)) - 1.0), 0.0)
    return cost, cost + lam * float(np.sum(ent))


def sinkhorn(
    x_tilde, p, M, lam: float = 1.0, tol: float = 1e-9,
    max_iter: int = 10000, anneal: bool | None = None,
) -> TransportPlan:
    """Entropically regularized transport between two histograms.

    Hitting ``max_iter`` is not an error; the last iterate is returned
    with ``converged=False``.
    """
    x = np.asarray(x_tilde, dtype=np.float64)
    pv = np.asarray(p, dtype=np.float64)
    Mv = np.asarray(M, dtype=np.float64)
    if Mv.shape != (x.size, pv.size):
        raise DomainError("cost matrix shape does not match marginals")
    plans, F, G, iterations, conv = sinkhorn_batch(
        x[None, :], pv[None, :], Mv, lam, tol, max_iter, anneal=anneal)
    cost, objective = _reg_objective(plans[0], Mv, lam)
    return TransportPlan(
        plan=plans[0], dual_row=F[0], dual_col=G[0], iterations=iterations,
        converged=bool(conv[0]), transport_cost=cost, objective=objective,
    )


def exact_ot_lp(x_tilde, p, M) -> float:
    """Exact transport distance by LP on the transportation polytope.

    Test oracle for small instances; the simplex solve is exact up to LP
    tolerances and independent of the Sinkhorn path.
    """
    x = np.asarray(x_tilde, dtype=np.float64)
    pv = np.asarray(p, dtype=np.float64)
    Mv = np.asarray(M, dtype=np.float64)
    if abs(float(x.sum()) - float(pv.sum())) > 1e-9:
        raise DomainError("marginal sums differ; transport problem infeasible")
    S, C = Mv.shape
    if (S, C) != (x.size, pv.size):
        raise DomainError("cost matrix shape does not match marginals")
    # row-sum and column-sum constraints; the last column constraint is
    # redundant given equal masses and is dropped to keep the system full rank
    n = S * C
    A = np.zeros((S + C - 1, n))
    b = np.zeros(S + C - 1)
    for i in range(S):
        A[i, i * C:(i + 1) * C] = 1.0
        b[i] = x[i]
    for j in range(C - 1):
        A[S + j, j::C] = 1.0
        b[S + j] = pv[j]
    res = linprog(Mv.ravel(), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if not res.success:
        raise DomainError(f"exact OT solve failed: {res.message}")
    return float(res.fun)


# ---------------------------------------------------------------------------
# Mixed objective and gradients
# ---------------------------------------------------------------------------

def _col_softmax(M: np.ndarray, kappa: float) -> np.ndarray:
    """Per-class softmax of -M/kappa over the support axis."""
    Z = -M / kappa
    Z = Z - Z.max(axis=0, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=0, keepdims=True)


def phi_map(p, M, kappa: float = 1.0) -> np.ndarray:
    """Class-to-vocabulary mixture: phi(p)_v = sum_c p_c colsoftmax(-M/kappa)_vc."""
    if kappa <= 0:
        raise DomainError("kappa must be positive")
    pv = np.asarray(p, dtype=np.float64)
    _check_marginals(pv, "class distribution")
    return _col_softmax(np.asarray(M, dtype=np.float64), kappa) @ pv


@dataclass
class OTBatchResult:
    loss: float
    d_logits: np.ndarray      # (B, C) gradient wrt non-NA class logits
    d_G: np.ndarray           # (C, D_e) gradient wrt class embeddings
    support: np.ndarray
    n_nonconverged: int
    iterations: int
    per_instance: np.ndarray = field(default_factory=lambda: np.zeros(0))


def ot_loss_and_grads(
    batch: list[FeatureInstance],
    logits: np.ndarray,
    tables: EmbeddingTables,
    vocab: Vocabulary,
    cfg: OTConfig,
) -> OTBatchResult:
    """Alignment loss averaged over a batch of non-NA trigger instances.

    ``logits`` has one column per non-NA class (NA excluded upstream).
    The per-instance loss is the regularized transport value plus
    ``-epsilon * x^T log phi(p)``; both terms are differentiated
    analytically through the class softmax and the cosine ground cost.
    Sinkhorn non-convergence is reported, not raised: the last iterate
    still yields usable gradients.
    """
    cfg.validate()
    if not batch:
        raise DomainError("empty batch")
    logits = np.asarray(logits, dtype=np.float64)
    B = len(batch)
    C = tables.num_classes
    if logits.shape != (B, C):
        raise DomainError(f"logits shape {logits.shape} != ({B}, {C})")
    for inst in batch:
        if inst.label_id == 0:
            raise DomainError("OT loss applies to non-NA instances only")

    support = batch_support(batch, vocab, cfg.support_mode)
    cost = build_cost_matrix(vocab, support, tables)
    M = cost.values

    X = _lm_distribution_rows(batch, cfg.tau, support)
    P = softmax(logits)  # rows on the simplex over non-NA classes
    if P.min() < _PROB_FLOOR:
        P = _positive_rows(P)

    plans, F, Gd, iterations, conv = sinkhorn_batch(
        X, P, M, cfg.lam, cfg.tol, cfg.max_iter)

    cost_terms = np.einsum("bsc,sc->b", plans, M)
    safe = np.where(plans > 0, plans, 1.0)
    ent_terms = np.sum(np.where(plans > 0, plans * (np.log(safe) - 1.0), 0.0), axis=(1, 2))
    s_vals = cost_terms + cfg.lam * ent_terms

    # vocabulary cross-entropy through the class-to-vocabulary mixture
    Smat = _col_softmax(M, cfg.kappa)            # (S, C)
    Phi = P @ Smat.T                             # (B, S)
    ce_vals = -cfg.epsilon * np.sum(X * np.log(Phi), axis=1)
    per_instance = s_vals + ce_vals
    loss = float(per_instance.mean())

    # d/dp: centered column duals (envelope) plus the mixture term
    g_centered = Gd - Gd.mean(axis=1, keepdims=True)
    R = X / Phi                                  # (B, S)
    d_p = g_centered - cfg.epsilon * (R @ Smat)  # (B, C)
    inner = np.sum(d_p * P, axis=1, keepdims=True)
    d_logits = P * (d_p - inner) / B

    # d/dM: transport plans (envelope) plus the mixture term, then chain
    # through m_vc = 1 - cos(e_v, g_c)
    q = R @ Smat                                 # (B, C)
    A = plans.sum(axis=0)
    A += (cfg.epsilon / cfg.kappa) * Smat * np.einsum(
        "bc,bs->sc", P, R, optimize=True) \
        - (cfg.epsilon / cfg.kappa) * Smat * (P * q).sum(axis=0)[None, :]
    A /= B

    E = cost.word_embeddings
    Gm = cost.class_embeddings
    e_norm = np.linalg.norm(E, axis=1)
    g_norm = np.linalg.norm(Gm, axis=1)
    Ehat = E / e_norm[:, None]
    Ghat = Gm / g_norm[:, None]
    cosM = Ehat @ Ghat.T
    d_G = (-(Ehat.T @ A).T + Ghat * np.sum(A * cosM, axis=0)[:, None]) / g_norm[:, None]
    d_G[~tables.trainable] = 0.0

    return OTBatchResult(
        loss=loss,
        d_logits=d_logits,
        d_G=d_G,
        support=support,
        n_nonconverged=int(np.sum(~conv)),
        iterations=iterations,
        per_instance=per_instance,
    )
