"""Synthetic domain-shift benchmark and feature-file I/O.

Source classes are isotropic Gaussian blobs whose means sit on a sphere.
The target domain draws from a subset of those classes and passes every
sample through a fixed affine "channel" ``x -> scale * R x + t``.
"""

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import ConfigError, InputError, ParseError

DOMAINS = ("source", "target")


@dataclass
class Dataset:
    """Feature matrix with optional per-row labels (``-1`` = unlabeled)."""

    features: np.ndarray
    labels: np.ndarray = None
    domain: str = "source"
    ids: list = None
    class_space: list = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise InputError("features must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(self.features)):
            raise InputError("features must be finite")
        n = self.features.shape[0]
        if self.labels is None:
            self.labels = np.full(n, -1, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.size != n:
            raise InputError(f"{self.labels.size} labels for {n} rows")
        if np.any(self.labels < -1):
            raise InputError("labels must be >= 0, or -1 for unlabeled")
        if self.domain not in DOMAINS:
            raise InputError(f"domain must be one of {DOMAINS}")
        if self.ids is None:
            prefix = "s" if self.domain == "source" else "t"
            self.ids = [f"{prefix}{i}" for i in range(n)]
        self.ids = [str(i) for i in self.ids]
        if len(self.ids) != n:
            raise InputError("one id per row is required")
        present = sorted(int(c) for c in np.unique(self.labels[self.labels >= 0]))
        if self.class_space is None:
            self.class_space = present
        else:
            self.class_space = sorted(int(c) for c in self.class_space)
            if not set(present) <= set(self.class_space):
                raise InputError("labels outside the declared class_space")

    @property
    def n_samples(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]

    @property
    def is_labeled(self):
        return bool(np.all(self.labels >= 0))

    @property
    def is_unlabeled(self):
        return bool(np.all(self.labels < 0))

    @property
    def is_partially_labeled(self):
        return not self.is_labeled and not self.is_unlabeled

    def unlabeled(self):
        return Dataset(self.features.copy(), None, self.domain, list(self.ids), [])

    def require_labeled(self, role="source"):
        if not self.is_labeled:
            raise InputError(f"{role} dataset must be fully labeled")
        return self

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            self.domain,
            [self.ids[i] for i in idx],
        )

    def equals(self, other):
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and self.ids == other.ids
        )


@dataclass
class ShiftConfig:
    num_classes_source: int = 10
    num_classes_target: int = 6
    dim: int = 16
    samples_per_class: int = 50
    class_separation: float = 6.0
    within_class_std: float = 1.0
    shift_rotation_angle: float = 0.0
    shift_translation_norm: float = 0.0
    shift_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes_source < 2:
            raise ConfigError("must be >= 2", "num_classes_source")
        if not 1 <= self.num_classes_target <= self.num_classes_source:
            raise ConfigError(
                "must lie in [1, num_classes_source]", "num_classes_target"
            )
        if self.dim < 2:
            raise ConfigError("must be >= 2", "dim")
        if self.samples_per_class < 1:
            raise ConfigError("must be >= 1", "samples_per_class")
        if not self.class_separation > 0:
            raise ConfigError("must be > 0", "class_separation")
        if not self.within_class_std > 0:
            raise ConfigError("must be > 0", "within_class_std")
        if not self.shift_translation_norm >= 0:
            raise ConfigError("must be >= 0", "shift_translation_norm")
        if not self.shift_scale > 0:
            raise ConfigError("must be > 0", "shift_scale")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "shift")
        return cls(**d)


@dataclass
class Channel:
    """Affine map ``x -> scale * x @ R.T + t`` applied to target rows."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, X):
        return self.scale * X @ self.rotation.T + self.translation

    def invert(self, Y):
        return ((Y - self.translation) / self.scale) @ self.rotation


def plane_rotation(rng, dim, angle):
    """Rotation by ``angle`` inside a random 2-plane of ``R^dim``."""
    Q, _ = np.linalg.qr(rng.standard_normal((dim, 2)))
    e1, e2 = Q[:, 0], Q[:, 1]
    c, s = np.cos(angle), np.sin(angle)
    R = np.eye(dim) + (c - 1.0) * (np.outer(e1, e1) + np.outer(e2, e2)) + s * (
        np.outer(e2, e1) - np.outer(e1, e2)
    )
    return R


def sample_class_means(rng, k, dim, radius, max_tries=10000):
    """``k`` points on the sphere of ``radius`` with pairwise distance >= radius."""
    for _ in range(max_tries):
        M = rng.standard_normal((k, dim))
        M *= radius / np.linalg.norm(M, axis=1, keepdims=True)
        d = np.sqrt(((M[:, None, :] - M[None, :, :]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        if d.min() >= radius:
            return M
    raise ConfigError(
        f"could not place {k} class means with separation {radius} in {dim} dims",
        "class_separation",
    )


def generate_shift_benchmark(cfg, return_channel=False):
    """Build the labeled source, unlabeled target and labeled target-eval sets.

    Returns
    -------
    source, target_unlabeled, target_eval : Dataset
    channel : Channel
        Only when ``return_channel`` is set.
    """
    if cfg.num_classes_target > cfg.num_classes_source:
        raise ConfigError("num_classes_target exceeds num_classes_source", "num_classes_target")
    ss = np.random.SeedSequence(cfg.seed)
    mean_rng, src_rng, tgt_rng, chan_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    means = sample_class_means(mean_rng, cfg.num_classes_source, cfg.dim, cfg.class_separation)
    k = cfg.samples_per_class

    def draw(rng, classes):
        X = np.vstack([means[c] + cfg.within_class_std * rng.standard_normal((k, cfg.dim)) for c in classes])
        y = np.repeat(np.asarray(classes, dtype=np.int64), k)
        return X, y

    Xs, ys = draw(src_rng, range(cfg.num_classes_source))
    Xt_clean, yt = draw(tgt_rng, range(cfg.num_classes_target))

    R = plane_rotation(chan_rng, cfg.dim, cfg.shift_rotation_angle)
    direction = chan_rng.standard_normal(cfg.dim)
    t = cfg.shift_translation_norm * direction / np.linalg.norm(direction)
    channel = Channel(R, t, float(cfg.shift_scale))
    Xt = channel.apply(Xt_clean)

    source = Dataset(Xs, ys, "source", [f"s{i}" for i in range(len(ys))])
    ids_t = [f"t{i}" for i in range(len(yt))]
    target_eval = Dataset(Xt, yt, "target", ids_t)
    target_unlabeled = Dataset(Xt.copy(), None, "target", list(ids_t), [])
    if return_channel:
        return source, target_unlabeled, target_eval, channel
    return source, target_unlabeled, target_eval


# feature files --------------------------------------------------------


def _format_float(x):
    # repr() is the shortest string that round-trips exactly (<= 17 digits)
    return repr(float(x))


def dumps_features(dataset):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"f{j}" for j in range(dataset.n_features)])
    for i in range(dataset.n_samples):
        w.writerow(
            [dataset.ids[i], int(dataset.labels[i])]
            + [_format_float(x) for x in dataset.features[i]]
        )
    return buf.getvalue()


def save_features(dataset, path):
    """Write ``dataset`` in the ``id,label,f0,...`` CSV schema."""
    if not path:
        raise InputError("an output path is required")
    text = dumps_features(dataset)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc


def load_features(path, domain="source"):
    """Parse a feature CSV; ``label == -1`` marks an unlabeled row.

    Raises :class:`ParseError` naming the offending line for ragged rows,
    non-numeric fields or a malformed header.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().split("\n")
    except OSError as exc:
        raise OSError(f"cannot read features from {path}: {exc}") from exc
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", path, 1)
    header = lines[0].split(",")
    d = len(header) - 2
    if header[:2] != ["id", "label"] or d < 1 or header[2:] != [f"f{j}" for j in range(d)]:
        raise ParseError("header must be id,label,f0,...,f{d-1}", path, 1)
    ids, labels, rows = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise ParseError(f"expected {d + 2} fields, found {len(parts)}", path, lineno)
        try:
            lab = int(parts[1])
        except ValueError:
            raise ParseError(f"label {parts[1]!r} is not an integer", path, lineno) from None
        if lab < -1:
            raise ParseError(f"label {lab} must be >= 0 or -1", path, lineno)
        try:
            vals = [float(x) for x in parts[2:]]
        except ValueError:
            raise ParseError("non-numeric feature value", path, lineno) from None
        if not all(np.isfinite(vals)):
            raise ParseError("non-finite feature value", path, lineno)
        ids.append(parts[0])
        labels.append(lab)
        rows.append(vals)
    if not rows:
        raise ParseError("no data rows", path, 2)
    return Dataset(np.array(rows), np.array(labels, dtype=np.int64), domain, ids)


def load_source(path):
    ds = load_features(path, "source")
    if not ds.is_labeled:
        bad = [ds.ids[i] for i in np.flatnonzero(ds.labels < 0)[:3]]
        raise InputError(f"{path}: source data must be fully labeled (unlabeled rows e.g. {bad})")
    return ds


def load_target(path):
    return load_features(path, "target")


def write_shift_config(cfg, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
