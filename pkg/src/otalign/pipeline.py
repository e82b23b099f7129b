"""Source pretraining, unsupervised adaptation, evaluation and exports.

Adaptation alternates, for every pair of mini-batches, between solving
the inner problem (a transport plan, or an adversary update) with the
network frozen and taking one Adam step on the network with the inner
solution frozen.
"""

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import baselines
from ._validation import one_hot
from .exceptions import ConfigError, InputError
from .metrics import (
    accuracy,
    c_avg,
    equal_error_rate,
    per_class_accuracy,
    trials_from_posteriors,
)
from .nn import (
    AdamState,
    AdaptationNetwork,
    add_grads,
    adam_step,
    backward,
    cross_entropy_loss,
    target_entropy,
)
from .transport import AlignConfig, align_grad, pot_align_loss, write_matrix_csv

METHODS = ("none", "npot", "not", "mmd", "cmd", "dann", "wdgrl")

# Alignment weights used for each comparison method unless overridden.
DEFAULT_LAMBDA = {
    "none": 0.0,
    "npot": 1.0,
    "not": 1.0,
    "mmd": 5.0,
    "cmd": 5.0,
    "dann": 0.5,
    "wdgrl": 0.1,
}

ALPHA_GRID = (0.0, 1e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1)


@dataclass
class TrainConfig:
    method: str = "npot"
    lambda_align: float = None
    entropy_weight: float = 0.05
    batch_size: int = 128
    max_epochs: int = 100
    pretrain_epochs: int = 200
    patience: int = 10
    latent_dim: int = 32
    align: AlignConfig = field(default_factory=AlignConfig)
    optimizer: dict = field(default_factory=lambda: {"learning_rate": 0.001})
    val_fraction: float = 0.1
    seed: int = 0
    wdgrl_eta: float = 20.0
    critic_steps: int = 5
    critic_hidden: int = 64
    mmd_bandwidth: object = "median"
    cmd_order: int = 5

    def __post_init__(self):
        if isinstance(self.align, dict):
            self.align = AlignConfig.from_dict(self.align)
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}", "method")
        if self.lambda_align is None:
            self.lambda_align = DEFAULT_LAMBDA[self.method]
        if self.lambda_align < 0:
            raise ConfigError("must be >= 0", "lambda_align")
        if self.entropy_weight < 0:
            raise ConfigError("must be >= 0", "entropy_weight")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "batch_size")
        if self.max_epochs < 0 or self.pretrain_epochs < 0:
            raise ConfigError("epoch counts must be >= 0", "max_epochs")
        if self.patience < 1:
            raise ConfigError("must be >= 1", "patience")
        if self.latent_dim < 1:
            raise ConfigError("must be >= 1", "latent_dim")
        if not 0.0 < self.val_fraction <= 0.5:
            raise ConfigError("must lie in (0, 0.5]", "val_fraction")
        if self.method == "wdgrl" and (self.critic_steps < 1 or self.wdgrl_eta < 0):
            raise ConfigError("wdgrl needs critic_steps >= 1 and wdgrl_eta >= 0", "critic_steps")
        if self.method in ("dann", "wdgrl") and self.critic_hidden < 1:
            raise ConfigError("must be >= 1", "critic_hidden")
        unknown = set(self.optimizer) - {"learning_rate", "beta1", "beta2", "epsilon"}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "optimizer")
        AdamState(**self.optimizer)

    def new_optimizer(self):
        return AdamState(**self.optimizer)

    def to_dict(self):
        d = asdict(self)
        d["align"] = self.align.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "train")
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)


@dataclass
class EpochRecord:
    epoch: int
    source_ce: float
    align_loss: float
    target_entropy: float
    val_criterion: float
    wall_clock: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    phase: str = "adapt"

    def append(self, rec):
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch indices must be consecutive")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    HISTORY_FIELDS = ("epoch", "source_ce", "align_loss", "target_entropy", "val_criterion")

    def write_csv(self, path):
        """Per-epoch losses; wall-clock times are kept out so reruns match byte for byte."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.HISTORY_FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in self.HISTORY_FIELDS[1:]])

    def write_timing_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "wall_clock"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.wall_clock:.6f}"])


@dataclass
class MetricsReport:
    eer: float
    cavg: float
    cavg_fixed: float
    accuracy: float
    num_trials: int
    mean_entropy: float
    per_class_accuracy: dict

    def to_dict(self):
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        return d

    def write_json(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# batching -------------------------------------------------------------


def _rngs(seed):
    """Independent streams: split, source batches, target batches, init, adversary."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(5)]


def split_indices(n, val_fraction, rng):
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n - n_val < 1:
        raise InputError(f"dataset of {n} rows is too small for a validation split")
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def epoch_batches(n, batch_size, steps, rng):
    """``steps`` batches of ``batch_size`` indices over fresh permutations of ``range(n)``."""
    need = steps * batch_size
    reps = math.ceil(need / n)
    idx = np.concatenate([rng.permutation(n) for _ in range(reps)])[:need]
    return idx.reshape(steps, batch_size)


def init_network(input_dim, num_classes, cfg):
    init_rng = _rngs(cfg.seed)[3]
    return AdaptationNetwork.init(input_dim, cfg.latent_dim, num_classes, seed=init_rng)


def _num_classes(source):
    return int(max(source.class_space)) + 1


# pretraining ----------------------------------------------------------


def pretrain_source(net, source, cfg):
    """Fit ``net`` on labeled source data with early stopping on validation CE.

    Returns ``(net, history)``; ``net`` holds the best-validation snapshot.
    """
    if not source.is_labeled:
        raise InputError("source dataset must be fully labeled")
    history = RunHistory(phase="pretrain")
    if cfg.pretrain_epochs == 0:
        return net, history
    split_rng, src_rng, _, _, _ = _rngs(cfg.seed)
    tr, va = split_indices(source.n_samples, cfg.val_fraction, split_rng)
    X, Y = source.features, one_hot(source.labels, net.num_classes)
    bs = min(cfg.batch_size, tr.size)
    steps = math.ceil(tr.size / bs)
    opt = cfg.new_optimizer()
    best, best_params, wait = np.inf, net.snapshot(), 0
    t0 = time.perf_counter()
    for epoch in range(cfg.pretrain_epochs):
        ce_sum = 0.0
        for batch in epoch_batches(tr.size, bs, steps, src_rng):
            idx = tr[batch]
            fp = net.forward(X[idx])
            ce, dY = cross_entropy_loss(Y[idx], fp.Yhat, return_grad=True)
            grads = backward(net, fp, dYhat=dY)
            new, _ = adam_step(opt, net.params(), grads)
            net.set_params(new)
            ce_sum += ce
        val = cross_entropy_loss(Y[va], net.forward(X[va]).Yhat)
        history.append(EpochRecord(epoch, ce_sum / steps, 0.0, 0.0, val, time.perf_counter() - t0))
        if val < best:
            best, best_params, wait = val, net.snapshot(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                history.stopped_early = True
                break
    net.set_params(best_params)
    return net, history


# adaptation -----------------------------------------------------------


class _Aligner:
    """Per-method alignment loss, gradients and adversary state."""

    def __init__(self, cfg, latent_dim, rng):
        self.cfg = cfg
        self.method = cfg.method
        self.lam = cfg.lambda_align
        self.rng = rng
        if self.method == "not":
            self.align_cfg = AlignConfig(**{**cfg.align.to_dict(), "weight_mode": "none"})
        else:
            self.align_cfg = cfg.align
        self.adversary = None
        if self.method == "dann":
            self.adversary = baselines.DomainDiscriminator(
                latent_dim, cfg.critic_hidden, seed=rng
            )
        elif self.method == "wdgrl":
            self.adversary = baselines.Critic(latent_dim, cfg.critic_hidden, seed=rng)
        if self.adversary is not None:
            self.adv_opt = cfg.new_optimizer()

    @property
    def active(self):
        return self.method != "none" and self.lam > 0

    def update_adversary(self, Zs, Zt):
        if self.method == "dann":
            _, grads, _, _ = baselines.dann_domain_loss(self.adversary, Zs, Zt, self.lam)
            new, _ = adam_step(self.adv_opt, self.adversary.params(), grads)
            self.adversary.set_params(new)
        elif self.method == "wdgrl":
            for _ in range(self.cfg.critic_steps):
                out = baselines.wdgrl_losses(
                    self.adversary, Zs, Zt, self.cfg.wdgrl_eta, self.rng, return_grads=True
                )
                new, _ = adam_step(self.adv_opt, self.adversary.params(), out["critic_grads"])
                self.adversary.set_params(new)

    def loss(self, fs, Ys, ft, with_grad=True):
        """Return ``(value, dZs, dZt, dYhat_t)`` already scaled by lambda."""
        lam = self.lam
        if self.method in ("npot", "not"):
            res = pot_align_loss(fs.Z, Ys, ft.Z, ft.Yhat, self.align_cfg)
            if not with_grad:
                return res.loss, None, None, None
            dZs, dZt, dYt = align_grad(res, fs.Z, Ys, ft.Z, ft.Yhat, self.align_cfg)
            return res.loss, lam * dZs, lam * dZt, lam * dYt
        if self.method == "mmd":
            v, dZs, dZt = baselines.mmd_loss(fs.Z, ft.Z, self.cfg.mmd_bandwidth, return_grad=True)
            return v, lam * dZs, lam * dZt, None
        if self.method == "cmd":
            v, dZs, dZt = baselines.cmd_loss(fs.Z, ft.Z, self.cfg.cmd_order, return_grad=True)
            return v, lam * dZs, lam * dZt, None
        if self.method == "dann":
            bce, _, dZs, dZt = baselines.dann_domain_loss(self.adversary, fs.Z, ft.Z, lam)
            # features minimize -bce; value reported in the same sign
            return -bce, dZs, dZt, None
        if self.method == "wdgrl":
            out = baselines.wdgrl_losses(
                self.adversary, fs.Z, ft.Z, self.cfg.wdgrl_eta, self.rng, return_grads=True
            )
            return out["wd"], lam * out["dZs"], lam * out["dZt"], None
        return 0.0, None, None, None


def adapt(net, source, target, cfg):
    """Adapt ``net`` to unlabeled ``target`` data with ``cfg.method``.

    Each step draws a source and a target batch, solves the inner problem
    with the network frozen, then takes one Adam step on
    ``CE + lambda * align + entropy_weight * mean_entropy(target)``.
    Early stopping watches source validation CE plus ``lambda`` times the
    alignment loss between the held-out source and target slices (no
    target labels involved).

    Returns ``(net, history)``.
    """
    if not source.is_labeled:
        raise InputError("source dataset must be fully labeled")
    if source.n_features != target.n_features:
        raise InputError("source and target feature dimensions differ")
    history = RunHistory(phase="adapt")
    if cfg.max_epochs == 0:
        return net, history
    split_rng, src_rng, tgt_rng, _, adv_rng = _rngs(cfg.seed)
    tr_s, va_s = split_indices(source.n_samples, cfg.val_fraction, split_rng)
    tr_t, va_t = split_indices(target.n_samples, cfg.val_fraction, split_rng)
    Xs, Ys = source.features, one_hot(source.labels, net.num_classes)
    Xt = target.features
    if cfg.batch_size > min(tr_s.size, tr_t.size):
        raise ConfigError(
            f"{cfg.batch_size} exceeds the smaller training split ({min(tr_s.size, tr_t.size)} rows)",
            "batch_size",
        )
    bs = cfg.batch_size
    steps = math.ceil(max(tr_s.size, tr_t.size) / bs)
    aligner = _Aligner(cfg, net.latent_dim, adv_rng)
    use_entropy = cfg.method != "none" and cfg.entropy_weight > 0
    opt = cfg.new_optimizer()

    def val_criterion():
        fs = net.forward(Xs[va_s])
        ce = cross_entropy_loss(Ys[va_s], fs.Yhat)
        if not aligner.active:
            return ce
        ft = net.forward(Xt[va_t])
        v, *_ = aligner.loss(fs, Ys[va_s], ft, with_grad=False)
        return ce + cfg.lambda_align * v

    best, best_params, wait = np.inf, net.snapshot(), 0
    t0 = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        sb = epoch_batches(tr_s.size, bs, steps, src_rng)
        tb = epoch_batches(tr_t.size, bs, steps, tgt_rng)
        sums = np.zeros(3)
        for bs_idx, bt_idx in zip(sb, tb):
            i_s, i_t = tr_s[bs_idx], tr_t[bt_idx]
            fs = net.forward(Xs[i_s])
            ce, dYs = cross_entropy_loss(Ys[i_s], fs.Yhat, return_grad=True)
            if not aligner.active and not use_entropy:
                grads = backward(net, fs, dYhat=dYs)
                sums += (ce, 0.0, 0.0)
            else:
                ft = net.forward(Xt[i_t])
                if aligner.active:
                    aligner.update_adversary(fs.Z, ft.Z)
                    v, dZs, dZt, dYt = aligner.loss(fs, Ys[i_s], ft)
                else:
                    v, dZs, dZt, dYt = 0.0, None, None, None
                H, dH = target_entropy(ft.Yhat, "mean", return_grad=True)
                dYt_total = cfg.entropy_weight * dH if use_entropy else np.zeros_like(ft.Yhat)
                if dYt is not None:
                    dYt_total = dYt_total + dYt
                grads = add_grads(
                    backward(net, fs, dZ=dZs, dYhat=dYs),
                    backward(net, ft, dZ=dZt, dYhat=dYt_total),
                )
                sums += (ce, v, H)
            new, _ = adam_step(opt, net.params(), grads)
            net.set_params(new)
        val = val_criterion()
        m = sums / steps
        history.append(EpochRecord(epoch, m[0], m[1], m[2], val, time.perf_counter() - t0))
        if val < best:
            best, best_params, wait = val, net.snapshot(), 0
            history.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                history.stopped_early = True
                break
    net.set_params(best_params)
    return net, history


def fit_pipeline(source, target, cfg, net=None):
    """Pretrain (unless ``net`` is given) and adapt; returns ``(net, pre_hist, hist)``."""
    if net is None:
        net = init_network(source.n_features, _num_classes(source), cfg)
        net, pre = pretrain_source(net, source, cfg)
    else:
        pre = RunHistory(phase="pretrain")
    net, hist = adapt(net, source, target, cfg)
    return net, pre, hist


# evaluation -----------------------------------------------------------


def evaluate(net, labeled_eval, fixed_threshold=0.5):
    """EER, Cavg (min and fixed-threshold), accuracy and per-class accuracy."""
    if not labeled_eval.is_labeled:
        raise InputError("evaluation dataset must be fully labeled")
    fp = net.forward(labeled_eval.features)
    y = labeled_eval.labels
    trials = trials_from_posteriors(fp.Yhat, y)
    return MetricsReport(
        eer=equal_error_rate(trials),
        cavg=c_avg(trials),
        cavg_fixed=c_avg(trials, mode="fixed_threshold", threshold=fixed_threshold),
        accuracy=accuracy(fp.Yhat, y),
        num_trials=int(trials.scores.size),
        mean_entropy=target_entropy(fp.Yhat, "mean"),
        per_class_accuracy=per_class_accuracy(fp.Yhat, y),
    )


# coupling inspection ----------------------------------------------------


@dataclass
class BatchCoupling:
    """A frozen source/target batch pair and its solved plan, label-sorted."""

    source_labels: np.ndarray
    target_labels: np.ndarray
    target_pred: np.ndarray
    plan: np.ndarray
    weights: np.ndarray

    @property
    def effective(self):
        return self.plan * self.weights

    def absent_class_mass(self, target_classes):
        """Share of weighted transport mass leaving source classes the target lacks."""
        E = self.effective
        absent = ~np.isin(self.source_labels, list(target_classes))
        return float(E[absent].sum() / E.sum())

    def same_class_mass(self, use_true_target=True):
        E = self.effective
        tl = self.target_labels if use_true_target else self.target_pred
        same = self.source_labels[:, None] == tl[None, :]
        return float(E[same].sum() / E.sum())


def sample_frozen_batch(source, target, batch_size, seed):
    """Index sets of one frozen batch pair, independent of any training stream."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    k = min(batch_size, source.n_samples, target.n_samples)
    return np.sort(rng.choice(source.n_samples, k, replace=False)), np.sort(
        rng.choice(target.n_samples, k, replace=False)
    )


def batch_coupling(net, source, target, idx_s, idx_t, align_cfg, target_labels=None):
    """Solve the transport plan for one batch pair and sort it by label.

    Rows are sorted by true source label, columns by the target labels
    (true ones when given, else predicted).
    """
    fs = net.forward(source.features[idx_s])
    ft = net.forward(target.features[idx_t])
    Ys = one_hot(source.labels[idx_s], net.num_classes)
    res = pot_align_loss(fs.Z, Ys, ft.Z, ft.Yhat, align_cfg)
    pred = np.argmax(ft.Yhat, axis=1)
    tl = pred if target_labels is None else np.asarray(target_labels)[idx_t]
    rs = np.argsort(source.labels[idx_s], kind="stable")
    cs = np.argsort(tl, kind="stable")
    return BatchCoupling(
        source.labels[idx_s][rs],
        tl[cs],
        pred[cs],
        res.coupling.plan[np.ix_(rs, cs)],
        res.weights[np.ix_(rs, cs)],
    )


def export_artifacts(out_dir, history, net, source, target, align_cfg, seed=0, batch_size=64, target_labels=None):
    """Write history, label-sorted coupling matrices and latent embeddings.

    Files: ``history.csv`` (skipped when ``history`` is None), ``coupling.csv`` (plan), ``coupling_weights.csv``,
    ``coupling_effective.csv`` (plan times weights), ``coupling_labels.csv``
    and ``embeddings.csv`` (``id,domain,label,z0..``).
    """
    os.makedirs(out_dir, exist_ok=True)
    if history is not None:
        history.write_csv(os.path.join(out_dir, "history.csv"))
    idx_s, idx_t = sample_frozen_batch(source, target, batch_size, seed)
    bc = batch_coupling(net, source, target, idx_s, idx_t, align_cfg, target_labels)
    write_matrix_csv(bc.plan, os.path.join(out_dir, "coupling.csv"))
    write_matrix_csv(bc.weights, os.path.join(out_dir, "coupling_weights.csv"))
    write_matrix_csv(bc.effective, os.path.join(out_dir, "coupling_effective.csv"))
    with open(os.path.join(out_dir, "coupling_labels.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "index", "label"])
        for i, lab in enumerate(bc.source_labels):
            w.writerow(["row", i, int(lab)])
        for j, lab in enumerate(bc.target_labels):
            w.writerow(["col", j, int(lab)])
    write_embeddings(os.path.join(out_dir, "embeddings.csv"), net, source, target)
    return bc


def write_embeddings(path, net, source, target):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "domain", "label"] + [f"z{j}" for j in range(net.latent_dim)])
        for ds in (source, target):
            Z = net.forward(ds.features).Z
            for i in range(ds.n_samples):
                w.writerow([ds.ids[i], ds.domain, int(ds.labels[i])] + [repr(float(x)) for x in Z[i]])


# alpha sweep ------------------------------------------------------------


def alpha_sweep(source, target, labeled_eval, cfg, grid=ALPHA_GRID, net=None):
    """Rerun adaptation from the same pretrained network for every ``alpha``.

    Returns one dict per grid point with ``alpha``, ``eer``, ``cavg`` and
    ``accuracy``.
    """
    if net is None:
        net = init_network(source.n_features, _num_classes(source), cfg)
        net, _ = pretrain_source(net, source, cfg)
    rows = []
    for a in grid:
        run_cfg = cfg.replace(align={**cfg.align.to_dict(), "alpha": float(a)})
        adapted, _ = adapt(net.copy(), source, target, run_cfg)
        rep = evaluate(adapted, labeled_eval)
        rows.append({"alpha": float(a), "eer": rep.eer, "cavg": rep.cavg, "accuracy": rep.accuracy})
    return rows
