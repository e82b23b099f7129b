"""Language-recognition scoring: EER, Cavg and accuracy.

A trial set is a score matrix ``[num_utterances, num_languages]`` plus the
true language of every utterance. Each utterance yields one target trial
(its own language column) and ``num_languages - 1`` non-target trials.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .exceptions import InputError


@dataclass
class TrialSet:
    scores: np.ndarray
    true_labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64).reshape(-1)
        if self.scores.ndim != 2:
            raise InputError("scores must be a 2-D matrix")
        if self.scores.shape[0] != self.true_labels.size:
            raise InputError("one true label per score row is required")
        if not np.all(np.isfinite(self.scores)):
            raise InputError("scores must be finite")
        if self.true_labels.size and (
            self.true_labels.min() < 0 or self.true_labels.max() >= self.scores.shape[1]
        ):
            raise InputError("true labels must index score columns")

    @property
    def num_languages(self):
        return self.scores.shape[1]

    def split(self):
        """Return pooled ``(target_scores, nontarget_scores)``."""
        mask = np.zeros(self.scores.shape, dtype=bool)
        mask[np.arange(self.true_labels.size), self.true_labels] = True
        return self.scores[mask], self.scores[~mask]


def operating_points(target_scores, nontarget_scores):
    """False-alarm and miss rates over every distinct decision threshold.

    A trial is accepted when ``score >= threshold``. Thresholds run over the
    sorted unique scores followed by ``+inf`` (reject all), so the first
    point is ``(FAR, FRR) = (1, 0)`` and the last ``(0, 1)``.

    Returns
    -------
    thresholds, far, frr : ndarray
    """
    tar = np.asarray(target_scores, dtype=np.float64).reshape(-1)
    non = np.asarray(nontarget_scores, dtype=np.float64).reshape(-1)
    if tar.size == 0 or non.size == 0:
        raise InputError("need at least one target and one non-target trial")
    thresholds = np.append(np.unique(np.concatenate([tar, non])), np.inf)
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    frr = np.searchsorted(tar_sorted, thresholds, side="left") / tar.size
    far = 1.0 - np.searchsorted(non_sorted, thresholds, side="left") / non.size
    return thresholds, far, frr


def eer_from_scores(target_scores, nontarget_scores):
    _, far, frr = operating_points(target_scores, nontarget_scores)
    diff = far - frr  # starts at +1, ends at -1, nonincreasing
    k = int(np.flatnonzero(diff <= 0)[0])
    if diff[k] == 0:
        return float(far[k])
    # Crossing lies on the segment between points k-1 and k.
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    far_x = far[k - 1] + t * (far[k] - far[k - 1])
    frr_x = frr[k - 1] + t * (frr[k] - frr[k - 1])
    return float(0.5 * (far_x + frr_x))


def equal_error_rate(trials):
    """Pooled-threshold EER of a :class:`TrialSet`, in ``[0, 1]``."""
    return eer_from_scores(*trials.split())


def _pair_rates(trials, threshold):
    """``P_miss[Lt]`` and ``P_fa[Lt, Ln]`` at one threshold (accept if ``>``)."""
    S, y = trials.scores, trials.true_labels
    N = trials.num_languages
    present = np.zeros(N, dtype=bool)
    present[y] = True
    accept = S > threshold
    counts = np.bincount(y, minlength=N).astype(np.float64)
    p_miss = np.full(N, np.nan)
    p_fa = np.full((N, N), np.nan)
    for lt in np.flatnonzero(present):
        p_miss[lt] = 1.0 - accept[y == lt, lt].mean()
    for ln in np.flatnonzero(present):
        rows = accept[y == ln]
        p_fa[:, ln] = rows.sum(axis=0) / counts[ln]
    return p_miss, p_fa, present


def c_avg_at(trials, threshold, p_target=0.5):
    """Cavg at a fixed decision threshold.

    Only languages with at least one utterance take part, both as target
    models and as non-target sources, so ``N`` is the number of languages
    present in ``trials``.
    """
    if not 0.0 < p_target < 1.0:
        raise InputError("p_target must lie in (0, 1)")
    p_miss, p_fa, present = _pair_rates(trials, threshold)
    langs = np.flatnonzero(present)
    N = langs.size
    if N < 2:
        raise InputError("Cavg needs at least two languages with trials")
    total = 0.0
    for lt in langs:
        others = langs[langs != lt]
        fa = p_fa[lt, others].sum()
        total += p_target * p_miss[lt] + (1.0 - p_target) / (N - 1) * fa
    return float(total / N)


def c_avg(trials, p_target=0.5, mode="min_over_threshold", threshold=None):
    """Average detection cost with ``C_miss = C_fa = 1``.

    ``mode="min_over_threshold"`` sweeps one global threshold over every
    distinct score (and below the minimum) and returns the smallest cost;
    ``mode="fixed_threshold"`` evaluates at ``threshold``.
    """
    if not 0.0 < p_target < 1.0:
        raise InputError("p_target must lie in (0, 1)")
    if mode == "fixed_threshold":
        if threshold is None:
            raise InputError("fixed_threshold mode needs a threshold")
        return c_avg_at(trials, threshold, p_target)
    if mode != "min_over_threshold":
        raise InputError(f"unknown Cavg mode {mode!r}")
    present = np.unique(trials.true_labels)
    cols = trials.scores[:, present]
    # Acceptance is "score > threshold": distinct scores plus one point
    # below everything cover all distinct decision patterns.
    cands = np.unique(cols)
    cands = np.concatenate([[cands[0] - 1.0], cands])
    return float(min(c_avg_at(trials, t, p_target) for t in cands))


def accuracy(Yhat, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    Yhat = np.asarray(Yhat, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1)
    if Yhat.ndim != 2 or Yhat.shape[0] == 0 or Yhat.shape[0] != labels.size:
        raise InputError("Yhat must be a non-empty matrix with one row per label")
    return float(np.mean(np.argmax(Yhat, axis=1) == labels))


def per_class_accuracy(Yhat, labels):
    pred = np.argmax(Yhat, axis=1)
    return {int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)}


def trials_from_posteriors(Yhat, labels):
    """Build a :class:`TrialSet` over the languages present in ``labels``.

    Columns are the posteriors of those languages, relabelled ``0..k-1`` in
    sorted order. Labels outside the posterior matrix get an all-zero
    score column and a warning.
    """
    Yhat = np.asarray(Yhat, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    langs = np.unique(labels)
    cols = []
    for c in langs:
        if c < Yhat.shape[1]:
            cols.append(Yhat[:, c])
        else:
            warnings.warn(f"class {c} is outside the model's label space; scored as zero")
            cols.append(np.zeros(Yhat.shape[0]))
    remap = {int(c): k for k, c in enumerate(langs)}
    y = np.array([remap[int(c)] for c in labels], dtype=np.int64)
    return TrialSet(np.column_stack(cols), y)


def write_det_csv(trials, path):
    """Write ``threshold,far,frr`` rows for external DET plotting."""
    thr, far, frr = operating_points(*trials.split())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thr, far, frr):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(r))])
