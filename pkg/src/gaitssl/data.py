"""Canonical gait data model: subjects, trials, windows, folds, and dataset IO.

A dataset on disk is a directory with `subjects.csv`
(subject_id,diagnosis,laterality), `trials.ndjson` (one record per line:
{trial_id, subject_id, session_day, condition, frames}), and an optional
`channels.json` declaring the column order of `frames`; when absent the
canonical order is assumed. UTF-8, LF line endings.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError

JOINT_CHANNELS = (
    "hip_flex_L",
    "hip_flex_R",
    "knee_flex_L",
    "knee_flex_R",
    "ankle_flex_L",
    "ankle_flex_R",
    "back_flex",
    "elbow_flex_L",
    "elbow_flex_R",
)
NUM_CHANNELS = len(JOINT_CHANNELS)
WINDOW_LEN = 90
SAMPLE_RATE_HZ = 30


class Diagnosis(str, Enum):
    CONTROL = "control"
    STROKE = "stroke"
    PROSTHESIS = "prosthesis"
    OTHER = "other"


class Laterality(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    NONE = "none"


SCOREABLE_DIAGNOSES = (Diagnosis.CONTROL, Diagnosis.STROKE, Diagnosis.PROSTHESIS)
# Row/grouping order used wherever records are sorted by diagnosis.
DIAGNOSIS_ORDER = {d: i for i, d in enumerate(Diagnosis)}


@dataclass(frozen=True)
class Subject:
    subject_id: str
    diagnosis: Diagnosis
    laterality: Laterality

    def __post_init__(self):
        unilateral = self.diagnosis in (Diagnosis.STROKE, Diagnosis.PROSTHESIS)
        if unilateral and self.laterality not in (Laterality.LEFT, Laterality.RIGHT):
            raise DataError(
                f"subject '{self.subject_id}': diagnosis {self.diagnosis.value} requires laterality left/right"
            )
        if not unilateral and self.laterality is not Laterality.NONE:
            raise DataError(
                f"subject '{self.subject_id}': diagnosis {self.diagnosis.value} requires laterality none"
            )


@dataclass(frozen=True)
class GaitTrial:
    """One walking trial: (len, 9) sagittal joint angles in degrees at 30 Hz."""

    trial_id: str
    subject_id: str
    session_day: int
    condition: str
    frames: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != NUM_CHANNELS:
            raise DataError(
                f"trial '{self.trial_id}': frames must be (len, {NUM_CHANNELS}), got {frames.shape}"
            )
        if frames.shape[0] < 1:
            raise DataError(f"trial '{self.trial_id}': empty frame matrix")
        bad = ~np.isfinite(frames)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise DataError(f"trial '{self.trial_id}': non-finite sample at frame {row}")
        if self.sample_rate_hz != SAMPLE_RATE_HZ:
            raise DataError(f"trial '{self.trial_id}': sample rate must be {SAMPLE_RATE_HZ} Hz")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class TrialWindow:
    """A 90-frame crop; target is the crop shifted one step into the future."""

    trial_id: str
    start_frame: int
    data: np.ndarray
    target: np.ndarray

    @classmethod
    def from_trial(cls, trial: GaitTrial, start: int) -> "TrialWindow":
        if start < 0 or start + WINDOW_LEN > len(trial):
            raise DataError(
                f"trial '{trial.trial_id}': window [{start}, {start + WINDOW_LEN}) outside 0..{len(trial)}"
            )
        data = trial.frames[start : start + WINDOW_LEN]
        return cls(trial_id=trial.trial_id, start_frame=start, data=data, target=data[1:])


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and population standard deviation of training frames."""

    mean: np.ndarray
    std: np.ndarray

    def standardize(self, frames: np.ndarray) -> np.ndarray:
        return (frames - self.mean) / self.std


@dataclass
class FoldSplit:
    assignments: dict[str, int]
    k: int
    warnings: list[str] = field(default_factory=list)

    def fold_of(self, subject_id: str) -> int:
        return self.assignments[subject_id]

    def members(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignments.items() if f == fold)


# --- dataset IO -----------------------------------------------------------


def _read_subjects(path: Path) -> list[Subject]:
    subjects = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        expected = {"subject_id", "diagnosis", "laterality"}
        if reader.fieldnames is None or set(reader.fieldnames) != expected:
            raise DataError(f"{path}: expected header subject_id,diagnosis,laterality")
        for row in reader:
            sid = row["subject_id"]
            if sid in seen:
                raise DataError(f"{path}: duplicate subject_id '{sid}'")
            seen.add(sid)
            try:
                diagnosis = Diagnosis(row["diagnosis"])
                laterality = Laterality(row["laterality"])
            except ValueError as e:
                raise DataError(f"{path}: subject '{sid}': {e}") from None
            subjects.append(Subject(sid, diagnosis, laterality))
    return subjects


def _read_channels(dataset_dir: Path) -> list[str]:
    path = dataset_dir / "channels.json"
    if not path.exists():
        return list(JOINT_CHANNELS)
    channels = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(channels, list):
        raise DataError(f"{path}: expected a JSON array of channel names")
    unknown = [c for c in channels if c not in JOINT_CHANNELS]
    if unknown:
        raise DataError(f"{path}: unknown channel name '{unknown[0]}'")
    if len(channels) != NUM_CHANNELS or len(set(channels)) != NUM_CHANNELS:
        raise DataError(f"{path}: expected {NUM_CHANNELS} distinct channel names, got {len(channels)}")
    return channels


def load_dataset(path) -> tuple[list[GaitTrial], list[Subject]]:
    """Load a dataset directory; trials sorted by (subject_id, session_day, trial_id)."""
    dataset_dir = Path(path)
    subjects_path = dataset_dir / "subjects.csv"
    trials_path = dataset_dir / "trials.ndjson"
    if not subjects_path.exists() or not trials_path.exists():
        raise DataError(f"{dataset_dir}: missing subjects.csv or trials.ndjson")
    subjects = _read_subjects(subjects_path)
    subject_ids = {s.subject_id for s in subjects}

    channels = _read_channels(dataset_dir)
    # column permutation: canonical index -> file column
    col_of = [channels.index(name) for name in JOINT_CHANNELS]

    trials = []
    seen = set()
    with open(trials_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{trials_path}:{lineno}: invalid JSON ({e})") from None
            missing = {"trial_id", "subject_id", "session_day", "condition", "frames"} - set(rec)
            if missing:
                raise DataError(f"{trials_path}:{lineno}: missing field '{sorted(missing)[0]}'")
            tid = rec["trial_id"]
            if tid in seen:
                raise DataError(f"{trials_path}:{lineno}: duplicate trial_id '{tid}'")
            seen.add(tid)
            if rec["subject_id"] not in subject_ids:
                raise DataError(
                    f"{trials_path}:{lineno}: trial '{tid}' references unknown subject '{rec['subject_id']}'"
                )
            frames = np.asarray(rec["frames"], dtype=np.float64)
            if frames.ndim != 2 or frames.shape[1] != NUM_CHANNELS:
                raise DataError(
                    f"{trials_path}:{lineno}: trial '{tid}' has wrong channel count "
                    f"(expected {NUM_CHANNELS}, got {frames.shape[1] if frames.ndim == 2 else 'ragged'})"
                )
            frames = frames[:, col_of]
            trials.append(
                GaitTrial(
                    trial_id=tid,
                    subject_id=rec["subject_id"],
                    session_day=int(rec["session_day"]),
                    condition=str(rec["condition"]),
                    frames=frames,
                )
            )
    trials.sort(key=lambda t: (t.subject_id, t.session_day, t.trial_id))
    subjects.sort(key=lambda s: s.subject_id)
    return trials, subjects


def save_dataset(path, trials: list[GaitTrial], subjects: list[Subject]) -> None:
    """Write the canonical dataset layout (channels implied canonical)."""
    dataset_dir = Path(path)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    with open(dataset_dir / "subjects.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "diagnosis", "laterality"])
        for s in sorted(subjects, key=lambda s: s.subject_id):
            writer.writerow([s.subject_id, s.diagnosis.value, s.laterality.value])
    with open(dataset_dir / "trials.ndjson", "w", newline="\n", encoding="utf-8") as fh:
        for t in sorted(trials, key=lambda t: (t.subject_id, t.session_day, t.trial_id)):
            rec = {
                "trial_id": t.trial_id,
                "subject_id": t.subject_id,
                "session_day": t.session_day,
                "condition": t.condition,
                "frames": [[float(v) for v in row] for row in t.frames],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def eligible_trials(trials: list[GaitTrial], min_len: int = WINDOW_LEN):
    """Split trials into (usable, skipped); short trials are skipped with a reason."""
    kept, skipped = [], []
    for t in trials:
        if len(t) < min_len:
            skipped.append({"trial_id": t.trial_id, "reason": f"len {len(t)} < {min_len}"})
        else:
            kept.append(t)
    return kept, skipped


def write_skip_report(path, skipped: list[dict]) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for rec in skipped:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# --- statistics and windowing ----------------------------------------------


def compute_norm_stats(trials: list[GaitTrial]) -> NormStats:
    """Per-channel mean/std over all frames of the given (training) trials.

    Population std (divide by count) by convention so every oracle agrees.
    """
    total = sum(len(t) for t in trials)
    if total < 2:
        raise DataError("norm stats need at least 2 frames in the training split")
    stacked = np.concatenate([t.frames for t in trials], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # ddof=0
    for j, s in enumerate(std):
        if not s > 0:
            raise DataError(f"zero-variance channel '{JOINT_CHANNELS[j]}' in training split")
    return NormStats(mean=mean, std=std)


def standardize_window(window: TrialWindow, stats: NormStats) -> TrialWindow:
    return TrialWindow(
        trial_id=window.trial_id,
        start_frame=window.start_frame,
        data=stats.standardize(window.data),
        target=stats.standardize(window.target),
    )


def sample_positive_pair(trial: GaitTrial, rng: np.random.Generator) -> tuple[TrialWindow, TrialWindow]:
    """Two windows with starts drawn independently and uniformly; overlap allowed."""
    if len(trial) < WINDOW_LEN:
        raise DataError(f"trial '{trial.trial_id}' shorter than {WINDOW_LEN} frames")
    hi = len(trial) - WINDOW_LEN
    s1 = int(rng.integers(0, hi + 1))
    s2 = int(rng.integers(0, hi + 1))
    return TrialWindow.from_trial(trial, s1), TrialWindow.from_trial(trial, s2)


def center_window(trial: GaitTrial) -> TrialWindow:
    if len(trial) < WINDOW_LEN:
        raise DataError(f"trial '{trial.trial_id}' shorter than {WINDOW_LEN} frames")
    return TrialWindow.from_trial(trial, (len(trial) - WINDOW_LEN) // 2)


# --- folds ------------------------------------------------------------------


def make_subject_folds(
    subjects: list[Subject],
    k: int,
    rng: np.random.Generator,
    group_key=None,
) -> FoldSplit:
    """Stratified subject-level folds: shuffle each group, deal round-robin.

    Groups (by default the diagnosis) are dealt in sorted key order with a
    fold pointer continuing across groups, so per-group counts AND total fold
    sizes each differ by at most one.
    """
    if k < 2:
        raise DataError(f"fold count must be >= 2, got {k}")
    if len(subjects) < k:
        raise DataError(f"need at least {k} subjects for {k} folds, got {len(subjects)}")
    if group_key is None:
        group_key = lambda s: s.diagnosis.value
    groups: dict[str, list[Subject]] = {}
    for s in subjects:
        groups.setdefault(str(group_key(s)), []).append(s)

    assignments: dict[str, int] = {}
    warnings = []
    pointer = 0
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda s: s.subject_id)
        if len(members) < k:
            warnings.append(f"group '{key}' has {len(members)} subjects for {k} folds")
        order = rng.permutation(len(members))
        for i in order:
            assignments[members[int(i)].subject_id] = pointer % k
            pointer += 1
    return FoldSplit(assignments=assignments, k=k, warnings=warnings)
