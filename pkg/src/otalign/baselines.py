"""Comparison alignment losses: MMD, CMD, DANN and WDGRL.

Every loss can also return its gradient with respect to the source and
target latents, so the training loop can push it through the backbone.
"""

import numpy as np

from ._validation import check_matrix, check_same_width
from .exceptions import InputError
from .nn import PROB_CLAMP, DenseLayer, sigmoid
from .transport import sq_euclidean


def _pair(Zs, Zt):
    Zs = check_matrix(Zs, "Zs")
    Zt = check_matrix(Zt, "Zt")
    check_same_width(Zs, Zt, ("Zs", "Zt"))
    return Zs, Zt


def median_bandwidth(Zs, Zt):
    """Median of the pooled pairwise Euclidean distances (off-diagonal)."""
    Z = np.vstack([Zs, Zt])
    D = np.sqrt(sq_euclidean(Z, Z))
    iu = np.triu_indices(Z.shape[0], k=1)
    d = D[iu]
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def mmd_loss(Zs, Zt, bandwidth="median", return_grad=False):
    """Biased (V-statistic) squared MMD with an RBF kernel.

    ``k(a, b) = exp(-||a - b||^2 / (2 sigma^2))``. ``bandwidth="median"``
    picks ``sigma`` from the pooled batch; it is treated as a constant when
    differentiating.
    """
    Zs, Zt = _pair(Zs, Zt)
    if isinstance(bandwidth, str):
        if bandwidth != "median":
            raise InputError(f"unknown bandwidth rule {bandwidth!r}")
        sigma = median_bandwidth(Zs, Zt)
    else:
        sigma = float(bandwidth)
        if not sigma > 0:
            raise InputError("bandwidth must be positive")
    s2 = 2.0 * sigma * sigma
    n, m = Zs.shape[0], Zt.shape[0]
    Kss = np.exp(-sq_euclidean(Zs, Zs) / s2)
    Ktt = np.exp(-sq_euclidean(Zt, Zt) / s2)
    Kst = np.exp(-sq_euclidean(Zs, Zt) / s2)
    loss = float(Kss.mean() + Ktt.mean() - 2.0 * Kst.mean())
    loss = max(loss, 0.0)
    if not return_grad:
        return loss
    # d k(a,b) / da = -k (a - b) / sigma^2
    inv = 2.0 / s2
    dZs = (-2.0 / n**2) * inv * (Kss.sum(1)[:, None] * Zs - Kss @ Zs)
    dZs += (2.0 / (n * m)) * inv * (Kst.sum(1)[:, None] * Zs - Kst @ Zt)
    dZt = (-2.0 / m**2) * inv * (Ktt.sum(1)[:, None] * Zt - Ktt @ Zt)
    dZt += (2.0 / (n * m)) * inv * (Kst.sum(0)[:, None] * Zt - Kst.T @ Zs)
    return loss, dZs, dZt


def _central_moment_grad(Z, k):
    """Central moment ``c_k`` per dimension and its Jacobian rows."""
    n = Z.shape[0]
    Dv = Z - Z.mean(axis=0)
    ck = np.mean(Dv**k, axis=0)
    # d c_k / d z_i = (k/n) (d_i^(k-1) - mean(d^(k-1)))
    J = (k / n) * (Dv ** (k - 1) - np.mean(Dv ** (k - 1), axis=0))
    return ck, J


def cmd_loss(Zs, Zt, order=5, bounds=(-1.0, 1.0), return_grad=False):
    """Central moment discrepancy up to ``order``.

    ``||mean_s - mean_t|| / r + sum_{k>=2} ||c_k(Zs) - c_k(Zt)|| / r^k``
    with ``r = bounds[1] - bounds[0]``.
    """
    Zs, Zt = _pair(Zs, Zt)
    lo, hi = bounds
    if not hi > lo:
        raise InputError("bounds must satisfy a_min < a_max")
    tol = 1e-9
    for name, Z in (("Zs", Zs), ("Zt", Zt)):
        if Z.min() < lo - tol or Z.max() > hi + tol:
            raise InputError(
                f"{name} range [{Z.min():.6g}, {Z.max():.6g}] lies outside bounds [{lo}, {hi}]"
            )
    r = hi - lo
    n, m = Zs.shape[0], Zt.shape[0]
    delta = Zs.mean(0) - Zt.mean(0)
    nd = np.linalg.norm(delta)
    loss = nd / r
    dZs = np.zeros_like(Zs)
    dZt = np.zeros_like(Zt)
    if nd > 0:
        dZs += delta / (nd * r * n)
        dZt -= delta / (nd * r * m)
    for k in range(2, order + 1):
        cs, Js = _central_moment_grad(Zs, k)
        ct, Jt = _central_moment_grad(Zt, k)
        diff = cs - ct
        nk = np.linalg.norm(diff)
        loss += nk / r**k
        if nk > 0:
            u = diff / (nk * r**k)
            dZs += Js * u
            dZt -= Jt * u
    loss = float(loss)
    if not return_grad:
        return loss
    return loss, dZs, dZt


class _TwoLayerHead:
    """``latent -> hidden (relu) -> 1`` network shared by critic and discriminator."""

    def __init__(self, latent_dim, hidden=64, seed=0):
        rng = np.random.default_rng(seed)
        self.hidden = DenseLayer.init(rng, latent_dim, hidden, "relu")
        self.out = DenseLayer.init(rng, hidden, 1, "linear")

    def params(self):
        return {
            "hidden.weights": self.hidden.weights,
            "hidden.bias": self.hidden.bias,
            "out.weights": self.out.weights,
            "out.bias": self.out.bias,
        }

    def set_params(self, p):
        self.hidden.weights = np.array(p["hidden.weights"], dtype=np.float64)
        self.hidden.bias = np.array(p["hidden.bias"], dtype=np.float64)
        self.out.weights = np.array(p["out.weights"], dtype=np.float64)
        self.out.bias = np.array(p["out.bias"], dtype=np.float64)

    def score(self, Z):
        """Raw scalar output per row plus cached intermediates."""
        A1, H = self.hidden.forward(Z)
        A2 = self.out.preactivation(H)
        return A2[:, 0], (Z, A1, H)

    def score_backward(self, cache, dscore):
        Z, A1, H = cache
        dA2 = np.asarray(dscore, dtype=np.float64).reshape(-1, 1)
        dH, dW2, db2 = self.out.backward(H, dA2, dA2)
        dZ, dW1, db1 = self.hidden.backward(Z, A1, dH)
        grads = {
            "hidden.weights": dW1,
            "hidden.bias": db1,
            "out.weights": dW2,
            "out.bias": db2,
        }
        return dZ, grads


class Critic(_TwoLayerHead):
    """Wasserstein critic ``h(z)``: relu hidden layer then a linear output."""

    def __call__(self, Z):
        return self.score(Z)[0]

    def input_gradient(self, Z):
        """``grad_z h(z)`` for every row, with the relu pattern at ``z``."""
        A1 = self.hidden.preactivation(Z)
        M = (A1 > 0).astype(np.float64)
        return (M * self.out.weights[:, 0]) @ self.hidden.weights.T, M


class DomainDiscriminator(_TwoLayerHead):
    """Probability that a latent came from the source domain."""

    def __call__(self, Z):
        return sigmoid(self.score(Z)[0])


def _bce_from_logits(logit, d):
    """BCE on sigmoid probabilities clamped to ``[1e-12, 1 - 1e-12]``."""
    p = sigmoid(logit)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(d * np.log(pc) + (1 - d) * np.log(1 - pc))
    live = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dlogit = np.where(live, p - d, 0.0)
    return loss, dlogit


def dann_domain_loss(disc, Zs, Zt, grl_lambda=1.0):
    """Domain-classification loss and both sides of the min-max gradient.

    Source latents carry domain label 1, target latents 0. The loss is the
    mean binary cross-entropy over the pooled batch.

    Returns
    -------
    loss : float
    disc_grads : dict
        Gradient of the loss w.r.t. the discriminator parameters; the
        discriminator *descends* this (it maximizes the task objective,
        which subtracts the domain loss).
    dZs, dZt : ndarray
        Gradient-reversed latent gradients, ``-grl_lambda * dloss/dz``,
        to be added to the feature extractor's objective gradient.
    """
    Zs, Zt = _pair(Zs, Zt)
    Z = np.vstack([Zs, Zt])
    d = np.concatenate([np.ones(Zs.shape[0]), np.zeros(Zt.shape[0])])
    logit, cache = disc.score(Z)
    per, dlogit = _bce_from_logits(logit, d)
    N = Z.shape[0]
    loss = float(per.mean())
    dZ, grads = disc.score_backward(cache, dlogit / N)
    dZ = -grl_lambda * dZ
    return loss, grads, dZ[: Zs.shape[0]], dZ[Zs.shape[0]:]


def wdgrl_losses(critic, Zs, Zt, eta=20.0, rng=None, return_grads=False):
    """Empirical Wasserstein estimate and gradient penalty of a critic.

    ``wd = mean h(Zs) - mean h(Zt)``; the penalty is the mean of
    ``(||grad h(z~)|| - 1)^2`` over interpolates ``z~ = u zs + (1-u) zt``
    paired by batch index (the shorter batch sets the pair count).

    With ``return_grads`` the result also holds the critic-parameter
    gradient of ``-(wd - eta * gp)`` (what the critic descends) and the
    latent gradients of ``wd`` (what the features descend).
    """
    Zs, Zt = _pair(Zs, Zt)
    if eta < 0:
        raise InputError("eta must be >= 0")
    rng = np.random.default_rng(0) if rng is None else rng
    n, m = Zs.shape[0], Zt.shape[0]
    hs, cache_s = critic.score(Zs)
    ht, cache_t = critic.score(Zt)
    wd = float(hs.mean() - ht.mean())
    k = min(n, m)
    u = rng.uniform(0.0, 1.0, size=(k, 1))
    Zi = u * Zs[:k] + (1.0 - u) * Zt[:k]
    G, M = critic.input_gradient(Zi)
    norms = np.linalg.norm(G, axis=1)
    gp = float(np.mean((norms - 1.0) ** 2))
    if not return_grads:
        return wd, gp

    dZs_wd, gs = critic.score_backward(cache_s, np.full(n, 1.0 / n))
    dZt_wd, gt = critic.score_backward(cache_t, np.full(m, -1.0 / m))
    # penalty gradient: the relu pattern is locally constant
    safe = np.where(norms > 0, norms, 1.0)
    dG = (2.0 / k) * ((norms - 1.0) / safe)[:, None] * G
    W1 = critic.hidden.weights
    w2 = critic.out.weights[:, 0]
    gp_grads = {
        "hidden.weights": dG.T @ (M * w2),
        "hidden.bias": np.zeros_like(critic.hidden.bias),
        "out.weights": ((dG @ W1) * M).sum(axis=0)[:, None],
        "out.bias": np.zeros_like(critic.out.bias),
    }
    critic_grads = {key: -(gs[key] + gt[key]) + eta * gp_grads[key] for key in gs}
    return {
        "wd": wd,
        "gp": gp,
        "critic_grads": critic_grads,
        "dZs": dZs_wd,
        "dZt": dZt_wd,
    }
