"""Joint feature/label optimal transport with soft partial coupling weights.

The alignment loss between a labeled source batch and an unlabeled target
batch is built in three stages:

1. a joint ground cost ``C_ij = ||zs_i - zt_j||^2 + alpha * ||ys_i - yhat_j||^2``;
2. coupling weights ``w_ij`` that suppress expensive (likely cross-class)
   pairs, either a hard threshold at ``tau`` or ``sigmoid(-beta (C_ij - tau))``;
3. an entropic transport plan for the effective cost ``C * w`` with uniform
   marginals, after which the loss is ``sum(C * w * plan)``.

For training, the plan and weights are held fixed and only ``C`` is
differentiated, see :func:`joint_cost_grad`.
"""

import csv
import itertools
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from ._validation import (
    check_matrix,
    check_one_hot,
    check_probability_rows,
    check_same_width,
)
from .exceptions import ConfigError, DegenerateAlignmentError, InputError

WEIGHT_MODES = ("soft", "hard", "none")
LOSS_EVALS = ("weighted", "unweighted")
PLAN_COSTS = ("weighted", "raw")


class SinkhornConvergenceWarning(UserWarning):
    pass


@dataclass
class AlignConfig:
    """Hyper-parameters of the coupling-weighted transport loss.

    ``epsilon`` is relative to the mean effective cost when
    ``normalize_cost`` is set (the default), absolute otherwise.
    """

    alpha: float = 0.001
    beta: float = 5.0
    tau: float = 1.0
    epsilon: float = 0.05
    max_iter: int = 10000
    stop_tol: float = 1e-9
    weight_mode: str = "soft"
    loss_eval: str = "weighted"
    plan_cost: str = "weighted"
    normalize_cost: bool = True

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ConfigError("must be >= 0", "align.alpha")
        if not self.beta > 0:
            raise ConfigError("must be > 0", "align.beta")
        if not self.epsilon > 0:
            raise ConfigError("must be > 0", "align.epsilon")
        if int(self.max_iter) < 1:
            raise ConfigError("must be >= 1", "align.max_iter")
        if not self.stop_tol > 0:
            raise ConfigError("must be > 0", "align.stop_tol")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"must be one of {WEIGHT_MODES}", "align.weight_mode")
        if self.loss_eval not in LOSS_EVALS:
            raise ConfigError(f"must be one of {LOSS_EVALS}", "align.loss_eval")
        if self.plan_cost not in PLAN_COSTS:
            raise ConfigError(f"must be one of {PLAN_COSTS}", "align.plan_cost")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "align")
        return cls(**d)


@dataclass
class Coupling:
    """A transport plan together with the marginals it was solved for."""

    plan: np.ndarray
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    converged: bool = True
    n_iter: int = 0
    violation: float = 0.0

    def cost(self, C):
        return float(np.sum(C * self.plan))


# ground cost and weights ---------------------------------------------


def sq_euclidean(A, B):
    """Pairwise squared Euclidean distances, clipped at zero."""
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def joint_cost_matrix(Zs, Ys, Zt, Yhat_t, alpha=0.001):
    """Joint feature/label ground cost between a source and a target batch.

    Parameters
    ----------
    Zs : ndarray of shape (n, d)
        Source latents.
    Ys : ndarray of shape (n, C)
        One-hot source labels.
    Zt : ndarray of shape (m, d)
        Target latents.
    Yhat_t : ndarray of shape (m, C)
        Predicted target posteriors, standing in for the unknown labels.
    alpha : float
        Weight of the label term.

    Returns
    -------
    C : ndarray of shape (n, m)
    """
    Zs = check_matrix(Zs, "Zs")
    Zt = check_matrix(Zt, "Zt")
    Ys = check_one_hot(Ys, "Ys")
    Yhat_t = check_probability_rows(Yhat_t, "Yhat_t")
    check_same_width(Zs, Zt, ("Zs", "Zt"))
    check_same_width(Ys, Yhat_t, ("Ys", "Yhat_t"))
    if Zs.shape[0] != Ys.shape[0] or Zt.shape[0] != Yhat_t.shape[0]:
        raise InputError("latent and label batches have different lengths")
    if alpha < 0:
        raise InputError("alpha must be >= 0")
    C = sq_euclidean(Zs, Zt)
    if alpha > 0:
        C = C + alpha * sq_euclidean(Ys, Yhat_t)
    return C


def soft_coupling_weights(C, beta=5.0, tau=1.0):
    """``sigmoid(-beta * (C - tau))`` elementwise."""
    if not beta > 0:
        raise InputError("beta must be > 0")
    return expit(-beta * (np.asarray(C, dtype=np.float64) - tau))


def hard_coupling_weights(C, tau=1.0):
    return (np.asarray(C, dtype=np.float64) <= tau).astype(np.float64)


def coupling_weights(C, cfg):
    if cfg.weight_mode == "soft":
        return soft_coupling_weights(C, cfg.beta, cfg.tau)
    if cfg.weight_mode == "hard":
        return hard_coupling_weights(C, cfg.tau)
    return np.ones_like(C)


# solvers ------------------------------------------------------------


def _check_marginal(a, n, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.shape != (n,):
        raise InputError(f"{name} has length {a.size}, expected {n}")
    if np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise InputError(f"{name} must be strictly positive")
    if abs(a.sum() - 1.0) > 1e-9:
        raise InputError(f"{name} must sum to 1 (got {a.sum():.12g})")
    return a


def sinkhorn(C, a=None, b=None, epsilon=0.05, max_iter=10000, stop_tol=1e-9, absorb_at=1e30):
    """Entropic OT plan by Sinkhorn scaling with log-domain absorption.

    Minimizes ``<C, P> + epsilon * sum(P * (log P - 1))`` over plans with
    row sums ``a`` and column sums ``b`` (uniform when omitted). The
    scalings are folded into dual potentials whenever they exceed
    ``absorb_at``, so the kernel never under- or overflows even for
    ``epsilon`` far below the cost scale.

    Returns
    -------
    Coupling
        ``converged`` is False (and a :class:`SinkhornConvergenceWarning`
        issued) when the marginal violation is still above ``stop_tol``
        after ``max_iter`` iterations.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.size == 0 or not np.all(np.isfinite(C)):
        raise InputError("cost must be a finite non-empty matrix")
    n, m = C.shape
    a = np.full(n, 1.0 / n) if a is None else _check_marginal(a, n, "a")
    b = np.full(m, 1.0 / m) if b is None else _check_marginal(b, m, "b")
    if not epsilon > 0:
        raise InputError("epsilon must be > 0")

    # Potentials start at row/column minima so every row and column of the
    # kernel holds at least one entry equal to 1.
    f = C.min(axis=1)
    g = (C - f[:, None]).min(axis=0)

    def kernel():
        K = np.exp(-(C - f[:, None] - g[None, :]) / epsilon)
        return K, np.ascontiguousarray(K.T)

    def out_of_range(u, v):
        return not (
            np.all(np.isfinite(u))
            and np.all(np.isfinite(v))
            and 1.0 / absorb_at < u.min() <= u.max() < absorb_at
            and 1.0 / absorb_at < v.min() <= v.max() < absorb_at
        )

    K, KT = kernel()
    u = np.ones(n)
    v = np.ones(m)
    it = 0
    check_every = 10
    while it < max_iter:
        steps = min(check_every, max_iter - it)
        u0, v0 = u, v
        with np.errstate(all="ignore"):
            for _ in range(steps):
                u = a / K.dot(v)
                v = b / KT.dot(u)
        if out_of_range(u, v):
            # Replay the chunk one step at a time, folding the scalings
            # into the potentials before they leave the safe range.
            u, v = u0, v0
            for _ in range(steps):
                u = a / K.dot(v)
                v = b / KT.dot(u)
                if out_of_range(u, v):
                    if not (np.all(u > 0) and np.all(v > 0) and np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
                        raise FloatingPointError("Sinkhorn scaling left the representable range")
                    f = f + epsilon * np.log(u)
                    g = g + epsilon * np.log(v)
                    K, KT = kernel()
                    u = np.ones(n)
                    v = b / KT.dot(u)
        it += steps
        row = u * K.dot(v)
        if np.max(np.abs(row - a)) <= stop_tol:
            break
    P = u[:, None] * K * v[None, :]
    violation = float(
        max(np.max(np.abs(P.sum(axis=1) - a)), np.max(np.abs(P.sum(axis=0) - b)))
    )
    converged = violation <= stop_tol
    if not converged:
        warnings.warn(
            f"Sinkhorn stopped after {it} iterations with marginal violation {violation:.3e}",
            SinkhornConvergenceWarning,
            stacklevel=2,
        )
    return Coupling(P, a, b, converged=converged, n_iter=it, violation=violation)


def exact_ot_oracle(C, max_n=8):
    """Exact OT value for a square cost with uniform marginals.

    With equal uniform marginals the transport polytope is the Birkhoff
    polytope scaled by ``1/n``, whose vertices are permutations; this
    enumerates all of them.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InputError("oracle needs a square cost matrix")
    n = C.shape[0]
    if n > max_n:
        raise InputError(f"n={n} exceeds the enumeration guard {max_n} ({math.factorial(n)} permutations)")
    rows = np.arange(n)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, C[rows, list(perm)].sum())
    return float(best / n)


# alignment loss -----------------------------------------------------


@dataclass
class AlignResult:
    loss: float
    coupling: Coupling
    weights: np.ndarray
    cost: np.ndarray

    @property
    def effective_coupling(self):
        """Plan entries scaled by their coupling weights."""
        return self.coupling.plan * self.weights


def pot_align_loss(Zs, Ys, Zt, Yhat_t, cfg=None):
    """Coupling-weighted transport loss between a source and a target batch.

    Solves for the plan on the effective cost ``C * w`` and evaluates
    ``sum(C * w * plan)`` (or ``sum(C * plan)`` with
    ``cfg.loss_eval == "unweighted"``).

    Returns
    -------
    AlignResult
    """
    cfg = AlignConfig() if cfg is None else cfg
    C = joint_cost_matrix(Zs, Ys, Zt, Yhat_t, cfg.alpha)
    W = coupling_weights(C, cfg)
    if cfg.weight_mode == "hard" and not np.any(W):
        raise DegenerateAlignmentError(
            f"every pair costs more than tau={cfg.tau}; no admissible coupling"
        )
    C_eff = C * W
    C_plan = C_eff if cfg.plan_cost == "weighted" else C
    eps = cfg.epsilon
    if cfg.normalize_cost:
        scale = C_plan.mean()
        eps = cfg.epsilon * scale if scale > 0 else cfg.epsilon
    coupling = sinkhorn(C_plan, epsilon=eps, max_iter=cfg.max_iter, stop_tol=cfg.stop_tol)
    if cfg.loss_eval == "weighted":
        loss = float(np.sum(C_eff * coupling.plan))
    else:
        loss = float(np.sum(C * coupling.plan))
    return AlignResult(loss, coupling, W, C)


def joint_cost_grad(Zs, Ys, Zt, Yhat_t, G, alpha):
    """Gradients of ``sum(G * C)`` w.r.t. ``Zs``, ``Zt`` and ``Yhat_t``.

    ``G`` is the frozen per-pair multiplier (plan times weights).
    """
    rs = G.sum(axis=1)[:, None]
    cs = G.sum(axis=0)[:, None]
    dZs = 2.0 * (rs * Zs - G @ Zt)
    dZt = 2.0 * (cs * Zt - G.T @ Zs)
    dYt = 2.0 * alpha * (cs * Yhat_t - G.T @ Ys)
    return dZs, dZt, dYt


def align_grad(result, Zs, Ys, Zt, Yhat_t, cfg):
    """Frozen-coupling gradient of the loss returned by :func:`pot_align_loss`."""
    G = result.coupling.plan
    if cfg.loss_eval == "weighted":
        G = G * result.weights
    return joint_cost_grad(Zs, Ys, Zt, Yhat_t, G, cfg.alpha)


# export ---------------------------------------------------------------


def write_matrix_csv(M, path, value_name="value"):
    """Write ``M`` in long form: ``row,col,value`` with a header line."""
    M = np.asarray(M, dtype=np.float64)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", value_name])
        for i in range(M.shape[0]):
            for j in range(M.shape[1]):
                w.writerow([i, j, repr(float(M[i, j]))])


def read_matrix_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    if not rows:
        return np.zeros((0, 0))
    n = max(int(r[0]) for r in rows) + 1
    m = max(int(r[1]) for r in rows) + 1
    M = np.zeros((n, m))
    for r in rows:
        M[int(r[0]), int(r[1])] = float(r[2])
    return M
