"""Dense-network engine for the adaptation backbone.

The backbone is ``x -> normalize(x W1 + b1) = z -> softmax(z W2 + b2) = yhat``:
a linear projection followed by L2 length normalization, and a softmax
classifier on top. Gradients are written out by hand; there is no autodiff.
Parameters are addressed by flat names such as ``"projection.weights"`` so
that losses computed on different batches can be summed as plain dicts.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._validation import check_matrix, check_one_hot, check_probability_rows
from .exceptions import ConfigError, InputError, UsageError

NORM_EPS = 1e-12
PROB_CLAMP = 1e-12
NET_FORMAT = "otalign-net-v1"

ACTIVATIONS = ("linear", "relu", "sigmoid")


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x):
    return expit(np.asarray(x, dtype=np.float64))


def length_normalize(U, eps=NORM_EPS):
    """Scale each row to unit L2 norm, dividing by ``max(||u||, eps)``."""
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    return U / np.maximum(norms, eps)


def length_normalize_backward(U, dZ, eps=NORM_EPS):
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    Z = U / denom
    live = norms >= eps
    # Below the guard the map is linear (u / eps) so the projection term drops.
    radial = np.where(live, np.sum(Z * dZ, axis=1, keepdims=True), 0.0)
    return (dZ - Z * radial) / denom


def glorot_uniform(rng, in_dim, out_dim):
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(in_dim, out_dim))


@dataclass
class DenseLayer:
    """Affine map ``X @ weights + bias`` followed by an elementwise activation."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "linear"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}", "activation")
        if self.weights.shape[0] < 1 or self.weights.shape[1] < 1:
            raise ConfigError("in_dim and out_dim must be >= 1")
        if self.bias.shape != (self.weights.shape[1],):
            raise ConfigError(
                f"bias shape {self.bias.shape} does not match out_dim {self.weights.shape[1]}"
            )

    @classmethod
    def init(cls, rng, in_dim, out_dim, activation="linear"):
        return cls(glorot_uniform(rng, in_dim, out_dim), np.zeros(out_dim), activation)

    @classmethod
    def zeros(cls, in_dim, out_dim, activation="linear"):
        return cls(np.zeros((in_dim, out_dim)), np.zeros(out_dim), activation)

    @property
    def in_dim(self):
        return self.weights.shape[0]

    @property
    def out_dim(self):
        return self.weights.shape[1]

    def preactivation(self, X):
        return X @ self.weights + self.bias

    def activate(self, A):
        if self.activation == "relu":
            return np.maximum(A, 0.0)
        if self.activation == "sigmoid":
            return sigmoid(A)
        return A

    def forward(self, X):
        A = self.preactivation(X)
        return A, self.activate(A)

    def backward(self, X, A, dOut):
        """Return ``(dX, dW, db)`` given the cached input and preactivation."""
        if self.activation == "relu":
            dA = dOut * (A > 0)
        elif self.activation == "sigmoid":
            s = sigmoid(A)
            dA = dOut * s * (1.0 - s)
        else:
            dA = dOut
        return dA @ self.weights.T, X.T @ dA, dA.sum(axis=0)

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        layer = cls(d["weights"], d["bias"], d.get("activation", "linear"))
        if layer.in_dim != d.get("in_dim", layer.in_dim) or layer.out_dim != d.get(
            "out_dim", layer.out_dim
        ):
            raise ConfigError("declared dimensions disagree with weight array")
        return layer


@dataclass
class ForwardPass:
    """Intermediates of one forward pass, needed by :func:`backward`."""

    X: np.ndarray
    U: np.ndarray  # projection output before normalization
    Z: np.ndarray
    logits: np.ndarray
    Yhat: np.ndarray


class AdaptationNetwork:
    """Projection + length normalization + softmax classifier.

    Parameters
    ----------
    projection : DenseLayer
        ``input_dim -> latent_dim`` linear layer.
    classifier : DenseLayer
        ``latent_dim -> num_classes`` linear layer; softmax is applied on top.
    """

    PARAM_NAMES = (
        "projection.weights",
        "projection.bias",
        "classifier.weights",
        "classifier.bias",
    )

    def __init__(self, projection, classifier):
        if projection.out_dim != classifier.in_dim:
            raise ConfigError(
                f"projection out_dim {projection.out_dim} != classifier in_dim {classifier.in_dim}"
            )
        if projection.activation != "linear" or classifier.activation != "linear":
            raise ConfigError("both backbone layers must be linear")
        self.projection = projection
        self.classifier = classifier

    @classmethod
    def init(cls, input_dim, latent_dim, num_classes, seed=0):
        rng = np.random.default_rng(seed)
        return cls(
            DenseLayer.init(rng, input_dim, latent_dim),
            DenseLayer.init(rng, latent_dim, num_classes),
        )

    @property
    def input_dim(self):
        return self.projection.in_dim

    @property
    def latent_dim(self):
        return self.projection.out_dim

    @property
    def num_classes(self):
        return self.classifier.out_dim

    def forward(self, X):
        X = check_matrix(X)
        if X.shape[1] != self.input_dim:
            raise ConfigError(
                f"input has {X.shape[1]} features, network expects {self.input_dim}"
            )
        U = self.projection.preactivation(X)
        Z = length_normalize(U)
        logits = self.classifier.preactivation(Z)
        return ForwardPass(X, U, Z, logits, softmax(logits))

    def backward(self, fp, dZ=None, dYhat=None):
        return backward(self, fp, dZ=dZ, dYhat=dYhat)

    # parameter access -------------------------------------------------

    def params(self):
        return {
            "projection.weights": self.projection.weights,
            "projection.bias": self.projection.bias,
            "classifier.weights": self.classifier.weights,
            "classifier.bias": self.classifier.bias,
        }

    def set_params(self, params):
        self.projection.weights = np.array(params["projection.weights"], dtype=np.float64)
        self.projection.bias = np.array(params["projection.bias"], dtype=np.float64)
        self.classifier.weights = np.array(params["classifier.weights"], dtype=np.float64)
        self.classifier.bias = np.array(params["classifier.bias"], dtype=np.float64)

    def num_parameters(self):
        return sum(p.size for p in self.params().values())

    def copy(self):
        return AdaptationNetwork(
            DenseLayer(self.projection.weights.copy(), self.projection.bias.copy()),
            DenseLayer(self.classifier.weights.copy(), self.classifier.bias.copy()),
        )

    def snapshot(self):
        return {k: v.copy() for k, v in self.params().items()}

    # serialization ----------------------------------------------------

    def to_dict(self):
        return {
            "format": NET_FORMAT,
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "projection": self.projection.to_dict(),
            "classifier": self.classifier.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != NET_FORMAT:
            raise ConfigError(f"unsupported network format {d.get('format')!r}", "format")
        return cls(DenseLayer.from_dict(d["projection"]), DenseLayer.from_dict(d["classifier"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def network_forward(net, X):
    """Return ``(Z, Yhat)``: normalized latents and class posteriors."""
    fp = net.forward(X)
    return fp.Z, fp.Yhat


def backward(net, fp, dZ=None, dYhat=None):
    """Back-propagate upstream gradients w.r.t. ``Z`` and/or ``Yhat``.

    ``dZ`` is the gradient reaching the latent directly (e.g. from an
    alignment loss); the classifier path contributes on top of it.
    Returns a dict of parameter gradients keyed like :meth:`AdaptationNetwork.params`.
    """
    if not isinstance(fp, ForwardPass):
        raise UsageError("backward needs the ForwardPass returned by net.forward")
    dZ_total = np.zeros_like(fp.Z) if dZ is None else np.array(dZ, dtype=np.float64)
    if dZ_total.shape != fp.Z.shape:
        raise UsageError(f"dZ shape {dZ_total.shape} != Z shape {fp.Z.shape}")
    grads = {
        "classifier.weights": np.zeros_like(net.classifier.weights),
        "classifier.bias": np.zeros_like(net.classifier.bias),
    }
    if dYhat is not None:
        dYhat = np.asarray(dYhat, dtype=np.float64)
        if dYhat.shape != fp.Yhat.shape:
            raise UsageError(f"dYhat shape {dYhat.shape} != Yhat shape {fp.Yhat.shape}")
        P = fp.Yhat
        dlogits = P * (dYhat - np.sum(dYhat * P, axis=1, keepdims=True))
        dZc, dW2, db2 = net.classifier.backward(fp.Z, fp.logits, dlogits)
        dZ_total = dZ_total + dZc
        grads["classifier.weights"] = dW2
        grads["classifier.bias"] = db2
    dU = length_normalize_backward(fp.U, dZ_total)
    _, dW1, db1 = net.projection.backward(fp.X, fp.U, dU)
    grads["projection.weights"] = dW1
    grads["projection.bias"] = db1
    return grads


def add_grads(*grad_dicts):
    out = {}
    for g in grad_dicts:
        for k, v in g.items():
            out[k] = out[k] + v if k in out else v.copy()
    return out


# losses -------------------------------------------------------------


def cross_entropy_loss(Y, Yhat, return_grad=False):
    """Mean multiclass cross-entropy with probabilities clamped at 1e-12.

    Returns ``loss`` or ``(loss, dYhat)`` when ``return_grad`` is set.
    """
    Y = check_one_hot(Y, "Y")
    Yhat = check_probability_rows(Yhat)
    if Y.shape != Yhat.shape:
        raise InputError(f"Y shape {Y.shape} != Yhat shape {Yhat.shape}")
    n = Y.shape[0]
    clamped = np.maximum(Yhat, PROB_CLAMP)
    loss = float(-np.sum(Y * np.log(clamped)) / n)
    if not return_grad:
        return loss
    dYhat = np.where(Yhat >= PROB_CLAMP, -Y / clamped, 0.0) / n
    return loss, dYhat


def target_entropy(Yhat, reduction="sum", return_grad=False):
    """Shannon entropy (nats) of the predicted target posteriors.

    ``reduction="sum"`` gives the total over samples, ``"mean"`` the
    per-sample average used by the training objective.
    """
    Yhat = check_probability_rows(Yhat)
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}", "reduction")
    clamped = np.maximum(Yhat, PROB_CLAMP)
    logp = np.log(clamped)
    scale = 1.0 if reduction == "sum" else 1.0 / Yhat.shape[0]
    H = float(-np.sum(Yhat * logp) * scale)
    if not return_grad:
        return H
    dYhat = -(logp + (Yhat >= PROB_CLAMP)) * scale
    return H, dYhat


# optimizer ----------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a dict of named parameters."""

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive", "optimizer.learning_rate")
        for name in ("beta1", "beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)", f"optimizer.{name}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive", "optimizer.epsilon")


def adam_step(state, params, grads):
    """Apply one Adam update; returns ``(new_params, state)``.

    ``params`` is not modified; the returned dict holds fresh arrays.
    """
    if set(params) != set(grads):
        raise UsageError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    new_params = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if g.shape != p.shape:
            raise UsageError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, state


# gradient checking ----------------------------------------------------


def gradient_check(model, loss_builder, h=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``model`` is anything with a ``params()`` method returning live arrays
    (or such a dict itself). ``loss_builder(model)`` must return
    ``(loss, grads)``; entries are perturbed in place and restored.
    """
    params = model.params() if hasattr(model, "params") else model
    _, analytic = loss_builder(model)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp, _ = loss_builder(model)
            flat[k] = orig - h
            lm, _ = loss_builder(model)
            flat[k] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(a_flat[k] - numeric) / max(abs(a_flat[k]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
