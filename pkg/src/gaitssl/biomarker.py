"""Embedding-space analytics: similarity matrices, geometric-median control
reference, and longitudinal similarity-to-control series.

All functions consume the 16-dim projected embeddings. The control reference
is the geometric median of control-trial embeddings (or of per-subject mean
embeddings), renormalized to unit length afterward so similarity stays a pure
dot product.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import DIAGNOSIS_ORDER, Diagnosis, Subject
from .errors import DataError
from .probe import EmbeddingRecord

UNIT_NORM_TOL = 1e-4


@dataclass
class SimilarityMatrix:
    matrix: np.ndarray  # (n, n) cosine similarities
    records: list[EmbeddingRecord]  # row order
    same_subject: np.ndarray  # (n, n) uint8
    same_diagnosis: np.ndarray  # (n, n) uint8
    diagnoses: list[str]  # per row


@dataclass
class BiomarkerSeries:
    subject_id: str
    points: list[tuple[int, float]]  # (session_day, median similarity), days ascending
    reference: np.ndarray  # (P,) unit norm


def _unit_projected(records: list[EmbeddingRecord]) -> np.ndarray:
    z = np.stack([r.projected for r in records]).astype(np.float64)
    norms = np.linalg.norm(z, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off > UNIT_NORM_TOL):
        bad = records[int(np.argmax(off))].trial_id
        raise DataError(f"projected embedding of trial '{bad}' is not unit norm (|1-||z||| > {UNIT_NORM_TOL})")
    return z / norms[:, None]


def similarity_matrix(records: list[EmbeddingRecord], subjects: list[Subject]) -> SimilarityMatrix:
    """Cosine similarities with rows ordered by (diagnosis, subject, day, trial)."""
    if len(records) < 2:
        raise DataError("similarity matrix needs at least 2 records")
    diag_of = {s.subject_id: s.diagnosis for s in subjects}
    missing = [r.trial_id for r in records if r.subject_id not in diag_of]
    if missing:
        raise DataError(f"record '{missing[0]}' references a subject missing from subjects.csv")
    ordered = sorted(
        records,
        key=lambda r: (DIAGNOSIS_ORDER[diag_of[r.subject_id]], r.subject_id, r.session_day, r.trial_id),
    )
    z = _unit_projected(ordered)
    matrix = z @ z.T
    sids = np.array([r.subject_id for r in ordered])
    diags = np.array([diag_of[r.subject_id].value for r in ordered])
    same_subject = (sids[:, None] == sids[None, :]).astype(np.uint8)
    same_diagnosis = (diags[:, None] == diags[None, :]).astype(np.uint8)
    return SimilarityMatrix(
        matrix=matrix,
        records=ordered,
        same_subject=same_subject,
        same_diagnosis=same_diagnosis,
        diagnoses=[str(d) for d in diags],
    )


def geometric_median(
    points: np.ndarray,
    tol: float = 1e-9,
    max_iter: int = 1000,
    return_history: bool = False,
):
    """Weiszfeld iteration for the point minimizing the summed euclidean distance.

    Starts at the coordinate-wise mean. An iterate landing on a data point
    (within 1e-12) is nudged 1e-9 toward the mean to keep the weights finite.
    Converges when the step norm falls below `tol`.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise DataError(f"geometric median needs an (n, d) point set, got shape {pts.shape}")
    if tol <= 0:
        raise DataError("geometric median tol must be > 0")
    mean = pts.mean(axis=0)
    if pts.shape[0] == 1:
        m = pts[0].copy()
        return (m, [0.0]) if return_history else m
    m = mean.copy()
    history = [float(np.linalg.norm(pts - m, axis=1).sum())]
    for _ in range(max_iter):
        dist = np.linalg.norm(pts - m, axis=1)
        if np.any(dist < 1e-12):
            direction = mean - m
            norm = np.linalg.norm(direction)
            if norm < 1e-12:
                direction = np.zeros_like(m)
                direction[0] = 1.0
                norm = 1.0
            m = m + 1e-9 * direction / norm
            dist = np.linalg.norm(pts - m, axis=1)
        weights = 1.0 / dist
        candidate = (weights[:, None] * pts).sum(axis=0) / weights.sum()
        step = float(np.linalg.norm(candidate - m))
        m = candidate
        if return_history:
            history.append(float(np.linalg.norm(pts - m, axis=1).sum()))
        if step < tol:
            break
    return (m, history) if return_history else m


def control_reference(
    records: list[EmbeddingRecord],
    subjects: list[Subject],
    mode: str = "per_trial",
) -> np.ndarray:
    """Unit-norm geometric-median embedding of the control participants.

    per_trial pools every control trial embedding; per_subject_mean first
    averages each control subject's trials.
    """
    if mode not in ("per_trial", "per_subject_mean"):
        raise DataError(f"control reference mode must be per_trial or per_subject_mean, got '{mode}'")
    control_ids = {s.subject_id for s in subjects if s.diagnosis is Diagnosis.CONTROL}
    control_records = [r for r in records if r.subject_id in control_ids]
    if not control_records:
        raise DataError("no control-subject embeddings available for the reference")
    z = _unit_projected(control_records)
    if mode == "per_subject_mean":
        sids = sorted({r.subject_id for r in control_records})
        rows = []
        for sid in sids:
            idx = [i for i, r in enumerate(control_records) if r.subject_id == sid]
            rows.append(z[idx].mean(axis=0))
        z = np.stack(rows)
    median = geometric_median(z)
    norm = np.linalg.norm(median)
    if norm < 1e-12:
        raise DataError("degenerate control reference (zero geometric median)")
    return median / norm


def response_series(
    records: list[EmbeddingRecord],
    reference: np.ndarray,
    subject_id: str,
) -> BiomarkerSeries:
    """Per session day, the median cosine similarity of the subject's trials
    to the control reference; days ascending."""
    reference = np.asarray(reference, dtype=np.float64)
    mine = [r for r in records if r.subject_id == subject_id]
    if not mine:
        raise DataError(f"subject '{subject_id}' has no embedding records")
    z = _unit_projected(mine)
    sims = z @ reference
    by_day: dict[int, list[float]] = {}
    for r, s in zip(mine, sims):
        by_day.setdefault(r.session_day, []).append(float(s))
    points = [(day, float(np.median(by_day[day]))) for day in sorted(by_day)]
    return BiomarkerSeries(subject_id=subject_id, points=points, reference=reference)


# --- report files -------------------------------------------------------------


def write_similarity_csvs(sim: SimilarityMatrix, out_dir) -> None:
    def dump_matrix(name, matrix, fmt):
        with open(out_dir / name, "w", newline="\n", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in matrix:
                writer.writerow([fmt(v) for v in row])

    dump_matrix("similarity_matrix.csv", sim.matrix, lambda v: repr(float(v)))
    dump_matrix("same_subject.csv", sim.same_subject, lambda v: int(v))
    dump_matrix("same_diagnosis.csv", sim.same_diagnosis, lambda v: int(v))
    with open(out_dir / "similarity_rows.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "subject_id", "trial_id", "session_day", "diagnosis"])
        for i, (r, d) in enumerate(zip(sim.records, sim.diagnoses)):
            writer.writerow([i, r.subject_id, r.trial_id, r.session_day, d])


def write_biomarker_csv(series: list[BiomarkerSeries], path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "session_day", "median_similarity"])
        for s in series:
            for day, value in s.points:
                writer.writerow([s.subject_id, day, repr(value)])
