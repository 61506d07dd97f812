"""L1 linear probes on pooled embeddings under nested subject-level CV.

Probes consume the pooled pre-projection embedding only. Outer folds score,
inner folds pick the L1 weight from a log grid; both levels partition by
subject so no person leaks across train/validation. Features are z-scored
per dimension with outer-train statistics. Accuracy is raw per-trial
accuracy (unadjusted for class balance); a per-subject majority-vote
accuracy is reported as a secondary column.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    Diagnosis,
    GaitTrial,
    Laterality,
    NormStats,
    Subject,
    center_window,
    eligible_trials,
    make_subject_folds,
)
from .errors import DataError
from .model import Checkpoint, forward_batch

_EMBED_BATCH = 64


@dataclass(frozen=True)
class EmbeddingRecord:
    subject_id: str
    trial_id: str
    session_day: int
    pooled: np.ndarray  # (H,) pre-projection
    projected: np.ndarray  # (P,) unit norm


@dataclass(frozen=True)
class ProbeTask:
    name: str
    positive: str

    def include(self, subject: Subject) -> bool:
        raise NotImplementedError

    def label(self, subject: Subject) -> int:
        raise NotImplementedError


@dataclass(frozen=True)
class _DiagnosisTask(ProbeTask):
    positive_diagnosis: Diagnosis = Diagnosis.STROKE

    def include(self, subject: Subject) -> bool:
        return subject.diagnosis in (self.positive_diagnosis, Diagnosis.CONTROL)

    def label(self, subject: Subject) -> int:
        return int(subject.diagnosis is self.positive_diagnosis)


@dataclass(frozen=True)
class _LateralityTask(ProbeTask):
    def include(self, subject: Subject) -> bool:
        return subject.laterality in (Laterality.LEFT, Laterality.RIGHT)

    def label(self, subject: Subject) -> int:
        return int(subject.laterality is Laterality.RIGHT)


PROBE_TASKS: dict[str, ProbeTask] = {
    "stroke_vs_control": _DiagnosisTask(
        name="stroke_vs_control", positive="stroke", positive_diagnosis=Diagnosis.STROKE
    ),
    "llpu_vs_control": _DiagnosisTask(
        name="llpu_vs_control", positive="prosthesis", positive_diagnosis=Diagnosis.PROSTHESIS
    ),
    "laterality": _LateralityTask(name="laterality", positive="right"),
}


def default_l1_grid(low: float = 1e-6, high: float = 1e-3, count: int = 7) -> np.ndarray:
    return np.logspace(np.log10(low), np.log10(high), count)


# --- embedding extraction ---------------------------------------------------


def embed_dataset(ckpt: Checkpoint, trials: list[GaitTrial]):
    """Eval-mode center-crop embeddings for every eligible trial.

    Returns (records, skipped). Standardization uses the training-split
    statistics stored in the checkpoint metadata.
    """
    meta = ckpt.metadata
    if "norm_mean" not in meta or "norm_std" not in meta:
        raise DataError("checkpoint metadata lacks normalization statistics")
    stats = NormStats(mean=np.asarray(meta["norm_mean"]), std=np.asarray(meta["norm_std"]))
    usable, skipped = eligible_trials(trials)
    records: list[EmbeddingRecord] = []
    for lo in range(0, len(usable), _EMBED_BATCH):
        chunk = usable[lo : lo + _EMBED_BATCH]
        windows = [center_window(t) for t in chunk]
        x = np.stack([stats.standardize(w.data).astype(np.float32) for w in windows])
        out = forward_batch(ckpt.params, ckpt.config, x, mode="eval")
        for trial, pooled, projected in zip(chunk, out.pooled.data, out.projected.data):
            records.append(
                EmbeddingRecord(
                    subject_id=trial.subject_id,
                    trial_id=trial.trial_id,
                    session_day=trial.session_day,
                    pooled=pooled.copy(),
                    projected=projected.copy(),
                )
            )
    return records, skipped


def write_embeddings_csv(records: list[EmbeddingRecord], path) -> None:
    if not records:
        raise DataError("no embedding records to write")
    h = records[0].pooled.shape[0]
    p = records[0].projected.shape[0]
    header = (
        ["subject_id", "trial_id", "session_day"]
        + [f"e_{i}" for i in range(h)]
        + [f"z_{i}" for i in range(p)]
    )
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in records:
            writer.writerow(
                [r.subject_id, r.trial_id, r.session_day]
                + [repr(float(v)) for v in r.pooled]
                + [repr(float(v)) for v in r.projected]
            )


def read_embeddings_csv(path) -> list[EmbeddingRecord]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["subject_id", "trial_id", "session_day"]:
            raise DataError(f"{path}: not an embeddings CSV")
        h = sum(1 for c in header if c.startswith("e_"))
        p = sum(1 for c in header if c.startswith("z_"))
        records = []
        for row in reader:
            vals = np.array([float(v) for v in row[3:]], dtype=np.float32)
            records.append(
                EmbeddingRecord(
                    subject_id=row[0],
                    trial_id=row[1],
                    session_day=int(row[2]),
                    pooled=vals[:h],
                    projected=vals[h : h + p],
                )
            )
    return records


# --- L1-regularized logistic regression --------------------------------------


def _logistic_smooth(X, y, w, b):
    s = X @ w + b
    # mean log(1 + e^s) - y*s, stable for large |s|
    return float(np.mean(np.logaddexp(0.0, s) - y * s))


def fit_l1_logistic(
    X: np.ndarray,
    y: np.ndarray,
    l1_weight: float,
    max_iter: int = 10_000,
    tol: float = 1e-8,
) -> tuple[np.ndarray, float]:
    """Minimize mean logistic loss + l1*||w||_1 (bias unpenalized).

    Proximal gradient (ISTA) with backtracking line search; converged when the
    objective decrease drops below `tol`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"bad probe design: X {X.shape}, y {y.shape}")
    classes = np.unique(y)
    if X.shape[0] < 2 or classes.size < 2:
        raise DataError("logistic fit needs >= 2 samples with both classes present")
    if l1_weight < 0:
        raise DataError("l1_weight must be >= 0")

    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    f = _logistic_smooth(X, y, w, b)
    objective = f + l1_weight * np.abs(w).sum()
    step = 1.0
    for _ in range(max_iter):
        p = 1.0 / (1.0 + np.exp(-(X @ w + b)))
        resid = p - y
        gw = X.T @ resid / n
        gb = float(resid.mean())
        while True:
            w_new = w - step * gw
            w_new = np.sign(w_new) * np.maximum(np.abs(w_new) - step * l1_weight, 0.0)
            b_new = b - step * gb
            f_new = _logistic_smooth(X, y, w_new, b_new)
            dw = w_new - w
            db = b_new - b
            bound = f + gw @ dw + gb * db + (dw @ dw + db * db) / (2.0 * step)
            if f_new <= bound + 1e-15:
                break
            step *= 0.5
            if step < 1e-18:
                return w, b
        new_objective = f_new + l1_weight * np.abs(w_new).sum()
        w, b, f = w_new, float(b_new), f_new
        if objective - new_objective < tol:
            objective = new_objective
            break
        objective = new_objective
        step = min(step * 1.25, 100.0)
    return w, b


def l1_objective(X, y, w, b, l1_weight: float) -> float:
    return _logistic_smooth(np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.float64), w, b) + float(
        l1_weight
    ) * float(np.abs(w).sum())


# --- nested cross-validation --------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    n_subjects: int
    n_trials: int
    chosen_l1: float
    accuracy: float
    subject_accuracy: float
    predictions: list[dict] = field(default_factory=list)


@dataclass
class ProbeResult:
    task: str
    folds: list[FoldOutcome]
    mean: float
    std: float
    max: float
    warnings: list[str] = field(default_factory=list)


def permuted_labels(subjects: list[Subject], task: ProbeTask, rng: np.random.Generator) -> dict[str, int]:
    """Shuffle the task labels among the task's eligible subjects (permutation control)."""
    eligible = sorted((s for s in subjects if task.include(s)), key=lambda s: s.subject_id)
    labels = [task.label(s) for s in eligible]
    order = rng.permutation(len(labels))
    return {s.subject_id: labels[int(i)] for s, i in zip(eligible, order)}


def nested_cv_probe(
    records: list[EmbeddingRecord],
    subjects: list[Subject],
    task: ProbeTask,
    outer_k: int = 3,
    inner_k: int = 4,
    l1_grid: np.ndarray | None = None,
    seed: int = 0,
    label_override: dict[str, int] | None = None,
) -> ProbeResult:
    """Outer folds score, inner folds select the L1 weight (ties -> larger)."""
    grid = default_l1_grid() if l1_grid is None else np.asarray(l1_grid, dtype=np.float64)
    by_subject: dict[str, list[EmbeddingRecord]] = {}
    for r in records:
        by_subject.setdefault(r.subject_id, []).append(r)

    def label_of(subject: Subject) -> int:
        if label_override is not None:
            return label_override[subject.subject_id]
        return task.label(subject)

    eligible = sorted(
        (s for s in subjects if task.include(s) and s.subject_id in by_subject),
        key=lambda s: s.subject_id,
    )
    if not eligible:
        raise DataError(f"task '{task.name}': no eligible subjects with embeddings")
    labels = {s.subject_id: label_of(s) for s in eligible}

    warnings: list[str] = []
    outer = make_subject_folds(
        eligible, outer_k, np.random.default_rng([seed, 0]), group_key=lambda s: labels[s.subject_id]
    )
    warnings.extend(f"outer: {w}" for w in outer.warnings)

    def design(sids: list[str]) -> tuple[np.ndarray, np.ndarray, list[EmbeddingRecord]]:
        rec = [r for sid in sids for r in by_subject[sid]]
        X = np.stack([r.pooled for r in rec]).astype(np.float64)
        y = np.array([labels[r.subject_id] for r in rec], dtype=np.float64)
        return X, y, rec

    outcomes: list[FoldOutcome] = []
    for fold in range(outer_k):
        val_sids = outer.members(fold)
        train_subjects = [s for s in eligible if outer.fold_of(s.subject_id) != fold]
        train_sids = [s.subject_id for s in train_subjects]
        train_label_set = {labels[sid] for sid in train_sids}
        if len(train_label_set) < 2:
            raise DataError(f"task '{task.name}': a class is absent from outer training fold {fold}")
        for cls in (0, 1):
            if sum(1 for sid in val_sids if labels[sid] == cls) < 2:
                warnings.append(f"outer fold {fold}: fewer than 2 class-{cls} subjects in validation")

        X_train, y_train, _ = design(train_sids)
        mu = X_train.mean(axis=0)
        sd = X_train.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)

        inner = make_subject_folds(
            train_subjects,
            inner_k,
            np.random.default_rng([seed, 1, fold]),
            group_key=lambda s: labels[s.subject_id],
        )
        best_l1 = float(grid[0])
        best_acc = -1.0
        for weight in grid:
            accs = []
            for ifold in range(inner_k):
                fit_sids = [sid for sid in train_sids if inner.fold_of(sid) != ifold]
                hold_sids = [sid for sid in train_sids if inner.fold_of(sid) == ifold]
                if not hold_sids:
                    continue
                Xf, yf, _ = design(fit_sids)
                if np.unique(yf).size < 2:
                    warnings.append(f"outer fold {fold} inner fold {ifold}: single-class fit set, skipped")
                    continue
                Xh, yh, _ = design(hold_sids)
                w, b = fit_l1_logistic((Xf - mu) / sd, yf, float(weight))
                pred = ((Xh - mu) / sd @ w + b > 0).astype(np.float64)
                accs.append(float(np.mean(pred == yh)))
            mean_acc = float(np.mean(accs)) if accs else -1.0
            if mean_acc >= best_acc:  # ties -> larger weight (grid ascends)
                best_acc = mean_acc
                best_l1 = float(weight)

        w, b = fit_l1_logistic((X_train - mu) / sd, y_train, best_l1)
        X_val, y_val, val_records = design(val_sids)
        pred = ((X_val - mu) / sd @ w + b > 0).astype(np.float64)
        accuracy = float(np.mean(pred == y_val))

        subj_correct = []
        for sid in val_sids:
            idx = [i for i, r in enumerate(val_records) if r.subject_id == sid]
            vote = int(np.mean(pred[idx]) > 0.5)
            subj_correct.append(int(vote == labels[sid]))
        predictions = [
            {
                "trial_id": r.trial_id,
                "subject_id": r.subject_id,
                "fold": fold,
                "label": int(y_val[i]),
                "prediction": int(pred[i]),
            }
            for i, r in enumerate(val_records)
        ]
        outcomes.append(
            FoldOutcome(
                fold=fold,
                n_subjects=len(val_sids),
                n_trials=len(val_records),
                chosen_l1=best_l1,
                accuracy=accuracy,
                subject_accuracy=float(np.mean(subj_correct)),
                predictions=predictions,
            )
        )

    accs = np.array([o.accuracy for o in outcomes])
    return ProbeResult(
        task=task.name,
        folds=outcomes,
        mean=float(accs.mean()),
        std=float(accs.std()),
        max=float(accs.max()),
        warnings=warnings,
    )


# --- report files -------------------------------------------------------------


def write_probe_report(results: list[ProbeResult], path) -> None:
    """Per-fold rows plus mean/std/max summary rows per task."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task", "fold", "n_subjects", "n_trials", "chosen_l1", "accuracy", "subject_accuracy"])
        for res in results:
            for o in res.folds:
                writer.writerow(
                    [res.task, o.fold, o.n_subjects, o.n_trials, repr(o.chosen_l1), repr(o.accuracy), repr(o.subject_accuracy)]
                )
            writer.writerow([res.task, "mean", "", "", "", repr(res.mean), ""])
            writer.writerow([res.task, "std", "", "", "", repr(res.std), ""])
            writer.writerow([res.task, "max", "", "", "", repr(res.max), ""])


def write_predictions_csv(result: ProbeResult, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["trial_id", "subject_id", "fold", "label", "prediction"])
        for o in result.folds:
            for p in o.predictions:
                writer.writerow([p["trial_id"], p["subject_id"], p["fold"], p["label"], p["prediction"]])
