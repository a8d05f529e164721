"""Training loop, stratified k-fold cross-validation, metrics and reports."""
import csv
import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .engine import Schedule, backward, lr_at_epoch, sgd_momentum_step
from .formats import Dataset, load_dataset
from .model import (
    ModelConfig,
    N_GRADES,
    build_model,
    canonical_variant,
    forward,
    predict,
    save_model,
    total_loss,
)
from .pipeline import FatCalib, fat_to_grade
from .reference import PCA_VARIANT, fit_pca_linreg, predict_pca_linreg

logger = logging.getLogger(__name__)

LOSS_KEYS = ("total", "reg", "att_reg", "att_cls", "att")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch: int = 32
    schedule: Schedule = field(default_factory=Schedule)
    seed: int = 0
    variant: str = "proposed"
    folds: int = 5
    stratified: bool = True
    threads: int = 1
    standardize: bool = True  # regress fat in training-fold standard units

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", Schedule(**self.schedule))
        if self.epochs < 1 or self.batch < 1 or self.folds < 1 or self.threads < 1:
            raise ValueError("epochs, batch, folds and threads must all be >= 1")

    def to_dict(self):
        return asdict(self)


# ---- metrics ---------------------------------------------------------------

def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {target.size} targets")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    return pred, target


def rmse(pred, target):
    pred, target = _pair(pred, target)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def r_squared(pred, target):
    pred, target = _pair(pred, target)
    ss_tot = float(np.sum((target - target.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("R-squared undefined: target variance is zero")
    return 1.0 - float(np.sum((pred - target) ** 2)) / ss_tot


def confusion_matrix(pred_grades, true_grades):
    """``(counts[true, pred], accuracy_percent)``."""
    p = np.asarray(pred_grades).ravel()
    t = np.asarray(true_grades).ravel()
    if p.shape != t.shape:
        raise ValueError("length mismatch between predicted and true grades")
    if p.size == 0:
        raise ValueError("confusion matrix of an empty set")
    for g in (p, t):
        if g.min() < 0 or g.max() >= N_GRADES or np.any(g != np.round(g)):
            raise ValueError(f"grades must be integers in 0..{N_GRADES - 1}")
    cm = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    np.add.at(cm, (t.astype(int), p.astype(int)), 1)
    return cm, 100.0 * np.trace(cm) / cm.sum()


@dataclass
class MetricsReport:
    method: str
    rmse: float
    r2: float
    grade_accuracy: float
    confusion: np.ndarray
    pred: np.ndarray
    true: np.ndarray
    true_grade: np.ndarray
    fold: object = "pooled"


def metrics_report(method, pred, true, true_grade, calib=FatCalib(), fold="pooled"):
    """Metrics on predictions clamped to [0, 100]; grades binned under ``calib``."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), 0.0, 100.0)
    true = np.asarray(true, dtype=np.float64)
    pred_grade = np.array([fat_to_grade(v, calib) for v in pred], dtype=np.int64)
    cm, acc = confusion_matrix(pred_grade, true_grade)
    return MetricsReport(method, rmse(pred, true), r_squared(pred, true), acc, cm, pred, true,
                         np.asarray(true_grade, dtype=np.int64), fold)


# ---- folds -----------------------------------------------------------------

def stratified_kfold(grades, k=5, seed=0, stratified=True):
    """``k`` disjoint test index arrays covering ``range(n)``.

    Each grade's shuffled members are dealt round-robin, continuing where the
    previous grade stopped, so per-grade and total fold sizes differ by <= 1.
    """
    grades = np.asarray(grades)
    n = grades.size
    if k < 1 or n < k:
        raise ValueError(f"need n >= k >= 1, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in range(k)]
    groups = np.unique(grades) if stratified else [None]
    offset = 0
    for g in groups:
        idx = np.flatnonzero(grades == g) if stratified else np.arange(n)
        if stratified and idx.size < k:
            warnings.warn(f"grade {g} has {idx.size} samples, fewer than {k} folds; stratification is best-effort")
        idx = rng.permutation(idx)
        for i, j in enumerate(idx):
            buckets[(offset + i) % k].append(int(j))
        offset += idx.size
    return [np.sort(np.array(b, dtype=np.int64)) for b in buckets]


def fold_hash(folds):
    h = hashlib.sha256()
    for f in folds:
        h.update(np.asarray(f, dtype="<i8").tobytes())
        h.update(b"|")
    return h.hexdigest()[:16]


# ---- training --------------------------------------------------------------

def target_stats(fat):
    """Mean and standard deviation used to standardize regression targets."""
    fat = np.asarray(fat, dtype=np.float64)
    sd = float(fat.std())
    return float(fat.mean()), (sd if sd > 0 else 1.0)


def _as_dataset(data):
    return load_dataset(data) if isinstance(data, (str, os.PathLike)) else data


def train_model(config, data, train_idx=None, model_config=ModelConfig(), fold=0, checkpoint=None, meta=None):
    """Train one network; returns ``(ModelParams, history)``.

    ``history`` holds one dict per epoch with the learning rate and the
    sample-weighted mean of every loss component.
    """
    data = _as_dataset(data)
    idx = np.arange(len(data)) if train_idx is None else np.asarray(train_idx)
    mcfg = replace(model_config, variant=config.variant, input_size=data.size)
    mp = build_model(mcfg, seed=int(np.random.default_rng([config.seed, fold, 0]).integers(2**31)))
    if config.standardize:
        mp.target_mean, mp.target_scale = target_stats(data.fat[idx])
    shuffle_rng = np.random.default_rng([config.seed, fold, 1])
    weights = mcfg.loss_weights
    history = []
    with threadpool_limits(config.threads):
        for epoch in range(config.epochs):
            lr = lr_at_epoch(config.schedule, epoch)
            order = idx[shuffle_rng.permutation(idx.size)]
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            for step, start in enumerate(range(0, order.size, config.batch)):
                b = order[start:start + config.batch]
                out = forward(mp, data.frontal[b], data.lateral[b], train=True)
                l_total, l_reg, l_ar, l_ac = total_loss(out, data.fat[b], data.grade[b], weights,
                                                        mp.target_scale)
                value = l_total.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss {value} at epoch {epoch}, step {step}, lr {lr:g} "
                        f"(variant {mcfg.variant}, fold {fold})")
                backward(l_total)
                sgd_momentum_step(mp.params, lr, config.schedule.momentum)
                parts = {
                    "total": value,
                    "reg": l_reg.item(),
                    "att_reg": l_ar.item() if l_ar is not None else 0.0,
                    "att_cls": l_ac.item() if l_ac is not None else 0.0,
                }
                parts["att"] = weights.att_reg * parts["att_reg"] + weights.att_cls * parts["att_cls"]
                for key in LOSS_KEYS:
                    sums[key] += parts[key] * b.size
            history.append({"epoch": epoch, "lr": lr, **{k: v / idx.size for k, v in sums.items()}})
    mp.trained = True
    if checkpoint:
        save_model(mp, checkpoint, extra={"train": config.to_dict(), "fold": fold, **(meta or {})})
    return mp, history


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "lr"] + [f"loss_{k}" for k in LOSS_KEYS])
        for h in history:
            w.writerow([h["epoch"], repr(h["lr"])] + [repr(float(h[k])) for k in LOSS_KEYS])


def read_history(path):
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


# ---- cross-validation ------------------------------------------------------

_WORKER_DATA = None


def _init_worker(data):
    global _WORKER_DATA
    _WORKER_DATA = data


def _cv_job(job):
    variant, fold, train_idx, test_idx, config, model_config, calib, out_dir, meta = job
    data = _WORKER_DATA
    if variant == PCA_VARIANT:
        with threadpool_limits(config.threads):
            model = fit_pca_linreg(data.frontal[train_idx], data.lateral[train_idx], data.fat[train_idx])
            pred = predict_pca_linreg(model, data.frontal[test_idx], data.lateral[test_idx])
        return variant, fold, pred, None, {"n_components": model.pca.n_components}
    cfg = replace(config, variant=variant)
    ckpt = os.path.join(out_dir, f"{variant}_f{fold}.sfp") if out_dir else None
    mp, history = train_model(cfg, data, train_idx, model_config, fold=fold, checkpoint=ckpt,
                              meta={**meta, "test_indices": [int(i) for i in test_idx]})
    with threadpool_limits(config.threads):
        pred, _ = predict(mp, data.frontal[test_idx], data.lateral[test_idx], calib)
    return variant, fold, pred, history, {}


def run_cv(config, data, variants, out_dir=None, model_config=ModelConfig(), calib=FatCalib(),
           jobs=1, extra_meta=None):
    """Train and evaluate every variant on identical folds.

    Returns ``{variant: MetricsReport}`` computed on the concatenated test
    predictions. With ``out_dir`` the comparison, scatter, confusion and
    history CSVs, checkpoints and ``run.json`` are written there.
    """
    meta = {"data": os.path.abspath(data)} if isinstance(data, (str, os.PathLike)) else {}
    data = _as_dataset(data)
    variants = [v if v == PCA_VARIANT else canonical_variant(v) for v in variants]
    if len(set(variants)) != len(variants):
        raise ValueError(f"duplicate variants in {variants}")
    folds = stratified_kfold(data.grade, config.folds, config.seed, config.stratified)
    fhash = fold_hash(folds)
    logger.info("fold hash %s (%d folds, n=%d)", fhash, len(folds), len(data))
    everything = np.arange(len(data))
    work = []
    for v in variants:
        for f, test_idx in enumerate(folds):
            train_idx = np.setdiff1d(everything, test_idx) if len(folds) > 1 else everything
            work.append((v, f, train_idx, test_idx, config, model_config, calib, out_dir, meta))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(data,)) as pool:
            results = list(pool.map(_cv_job, work))
    else:
        _init_worker(data)
        results = [_cv_job(j) for j in work]

    preds = {v: np.zeros(len(data)) for v in variants}
    info = {v: {} for v in variants}
    for variant, fold, pred, history, extra in results:
        preds[variant][folds[fold]] = pred
        if extra:
            info[variant][f"fold{fold}"] = extra
        if out_dir and history is not None:
            write_history(history, os.path.join(out_dir, f"history_{variant}_{fold}.csv"))
    reports = {v: metrics_report(v, preds[v], data.fat, data.grade, calib) for v in variants}
    for v, r in reports.items():
        logger.info("%s: RMSE %.3f  R2 %.4f  accuracy %.1f%%", v, r.rmse, r.r2, r.grade_accuracy)
    if out_dir:
        write_reports(reports, data, out_dir)
        run_meta = {
            "version": __version__,
            "train": config.to_dict(),
            "model": model_config.to_dict(),
            "calib": calib.as_list(),
            "variants": variants,
            "folds": len(folds),
            "fold_hash": fhash,
            "metrics_aggregation": "pooled",
            "n_subjects": len(data),
            "variant_info": info,
        }
        run_meta.update(meta)
        run_meta.update(extra_meta or {})
        with open(os.path.join(out_dir, "run.json"), "w") as f:
            json.dump(run_meta, f, indent=2, sort_keys=True)
    return reports


def write_reports(reports, data, out_dir):
    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["method", "rmse", "r2", "grade_accuracy"])
        for v, r in reports.items():
            w.writerow([v, f"{r.rmse:.6f}", f"{r.r2:.6f}", f"{r.grade_accuracy:.4f}"])
    for v, r in reports.items():
        with open(os.path.join(out_dir, f"scatter_{v}.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["id", "pred", "true", "grade"])
            for sid, p, t, g in zip(data.ids, r.pred, r.true, r.true_grade):
                w.writerow([sid, repr(float(p)), repr(float(t)), int(g)])
        with open(os.path.join(out_dir, f"confusion_{v}.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["true\\pred"] + [f"grade{g}" for g in range(N_GRADES)])
            for g in range(N_GRADES):
                w.writerow([f"grade{g}"] + [int(c) for c in r.confusion[g]])


def read_comparison(path):
    with open(path, newline="") as f:
        return {r["method"]: {k: float(r[k]) for k in ("rmse", "r2", "grade_accuracy")}
                for r in csv.DictReader(f)}
