"""Input validation helpers built on top of ``sklearn.utils.validation``."""

import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import InputError

PROB_ATOL = 1e-6


def check_matrix(X, name="X", allow_empty=False):
    """Return ``X`` as a finite 2-D float64 array or raise :class:`InputError`."""
    try:
        X = check_array(
            X,
            dtype=np.float64,
            ensure_2d=True,
            ensure_all_finite=True,
            ensure_min_samples=0 if allow_empty else 1,
            ensure_min_features=0 if allow_empty else 1,
        )
    except ValueError as exc:
        raise InputError(f"{name}: {exc}") from exc
    return X


def check_same_width(A, B, names=("A", "B")):
    if A.shape[1] != B.shape[1]:
        raise InputError(
            f"{names[0]} has {A.shape[1]} columns but {names[1]} has {B.shape[1]}"
        )


def check_probability_rows(P, name="Yhat", atol=PROB_ATOL):
    P = check_matrix(P, name)
    if np.any(P < -atol) or np.any(np.abs(P.sum(axis=1) - 1.0) > atol):
        raise InputError(f"{name}: rows must be probability vectors")
    return P


def check_one_hot(Y, name="Y"):
    Y = check_matrix(Y, name)
    ok = np.all((Y == 0.0) | (Y == 1.0), axis=1) & (Y.sum(axis=1) == 1.0)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise InputError(f"{name}: row {bad} is not one-hot")
    return Y


def one_hot(labels, num_classes):
    """Encode integer ``labels`` as a float one-hot matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise InputError("labels must be 1-D")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes})")
    Y = np.zeros((labels.size, num_classes))
    Y[np.arange(labels.size), labels] = 1.0
    return Y
