"""Deterministic synthetic gait cohorts used as verification ground truth.

Each subject gets a Fourier-series signature over the gait cycle (per-channel
harmonic amplitudes/phases, baselines, cadence). Right-side channels mirror
the left with a half-cycle delay. Impairment is modeled as amplitude
asymmetry: stroke scales affected knee/ankle amplitudes by
(1 - knee_ankle_factor * severity) and offsets the affected elbow baseline;
prosthesis users scale the affected ankle amplitude. Generation is a pure
function of (spec, seed): per-subject and per-trial RNG streams are derived
from the master seed, so datasets are byte-identical across reruns.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    JOINT_CHANNELS,
    NUM_CHANNELS,
    SAMPLE_RATE_HZ,
    Diagnosis,
    GaitTrial,
    Laterality,
    Subject,
    save_dataset,
)
from .errors import ConfigError

# family -> (left channel, right channel); back has no side
_SIDED_FAMILIES = {
    "hip": (0, 1),
    "knee": (2, 3),
    "ankle": (4, 5),
    "elbow": (7, 8),
}
_BACK_CHANNEL = 6

# family -> (baseline mean, baseline sd, fundamental amplitude lo/hi), degrees
_FAMILY_PARAMS = {
    "hip": (10.0, 3.0, 20.0, 30.0),
    "knee": (22.0, 4.0, 25.0, 35.0),
    "ankle": (0.0, 2.0, 10.0, 16.0),
    "back": (5.0, 2.0, 2.0, 5.0),
    "elbow": (15.0, 4.0, 6.0, 12.0),
}

_DIAG_CODE = {
    Diagnosis.CONTROL: "c",
    Diagnosis.STROKE: "s",
    Diagnosis.PROSTHESIS: "p",
    Diagnosis.OTHER: "o",
}

# RNG stream tags (domain separation under one master seed)
_SIG_STREAM = 7
_TRIAL_STREAM = 11


@dataclass
class CohortSpec:
    controls: int = 0
    stroke: int = 0
    prosthesis: int = 0
    other: int = 0
    severity_range: tuple[float, float] = (0.5, 1.0)
    sessions_per_subject: int = 1
    trials_per_session: int = 3
    trial_length_range: tuple[int, int] = (150, 240)
    cycle_freq_range: tuple[float, float] = (0.8, 1.2)
    harmonics: int = 3
    noise_std_deg: float = 0.8
    seed: int | None = None  # None = inherit the run's global seed
    recovery: bool = False
    recovery_final_severity: float = 0.1
    stroke_knee_ankle_factor: float = 0.7
    prosthesis_ankle_factor: float = 0.9
    stroke_elbow_offset_deg: float = 20.0
    id_prefix: str = ""

    def validate(self) -> None:
        if self.seed is None or self.seed < 0:
            raise ConfigError("cohort.seed must be a non-negative integer (set it or pass a global seed)")
        for name in ("controls", "stroke", "prosthesis", "other"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cohort.{name} must be >= 0")
        lo, hi = self.severity_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ConfigError(f"cohort.severity_range must satisfy 0 <= lo <= hi <= 1, got {self.severity_range}")
        if self.sessions_per_subject < 1 or self.trials_per_session < 1:
            raise ConfigError("cohort sessions/trials per subject must be >= 1")
        llo, lhi = self.trial_length_range
        if not (1 <= llo <= lhi):
            raise ConfigError(f"cohort.trial_length_range invalid: {self.trial_length_range}")
        flo, fhi = self.cycle_freq_range
        if not (0.5 <= flo <= fhi <= 1.5):
            raise ConfigError(f"cohort.cycle_freq_range must lie in [0.5, 1.5] Hz, got {self.cycle_freq_range}")
        if self.harmonics < 1:
            raise ConfigError("cohort.harmonics must be >= 1")
        if self.noise_std_deg < 0:
            raise ConfigError("cohort.noise_std_deg must be >= 0")
        if not (0.0 <= self.recovery_final_severity <= 1.0):
            raise ConfigError("cohort.recovery_final_severity must lie in [0, 1]")
        for name in ("stroke_knee_ankle_factor", "prosthesis_ankle_factor"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ConfigError(f"cohort.{name} must lie in [0, 1]")
        if self.stroke_elbow_offset_deg < 0:
            raise ConfigError("cohort.stroke_elbow_offset_deg must be >= 0")


@dataclass(frozen=True)
class SubjectSignature:
    """Diagnosis-independent waveform identity of one subject."""

    baselines: np.ndarray  # (9,)
    amplitudes: np.ndarray  # (9, harmonics)
    phases: np.ndarray  # (9, harmonics)
    cadence_hz: float
    severity: float
    affected: Laterality


def make_signature(spec: CohortSpec, subject_index: int) -> SubjectSignature:
    """Deterministic function of (master seed, subject index).

    The draw order is fixed and diagnosis-independent, so a severity-0
    impaired subject reproduces the control waveform of the same index.
    """
    rng = np.random.default_rng([spec.seed, _SIG_STREAM, subject_index])
    nh = spec.harmonics
    baselines = np.zeros(NUM_CHANNELS)
    amplitudes = np.zeros((NUM_CHANNELS, nh))
    phases = np.zeros((NUM_CHANNELS, nh))
    h = np.arange(1, nh + 1)
    for family in ("hip", "knee", "ankle", "back", "elbow"):
        mu, sd, amp_lo, amp_hi = _FAMILY_PARAMS[family]
        baseline = rng.normal(mu, sd)
        a1 = rng.uniform(amp_lo, amp_hi)
        decay = rng.uniform(0.15, 0.35)
        phi = rng.uniform(0.0, 2.0 * np.pi, size=nh)
        amps = a1 * decay ** (h - 1)
        if family == "back":
            baselines[_BACK_CHANNEL] = baseline
            amplitudes[_BACK_CHANNEL] = amps
            phases[_BACK_CHANNEL] = phi
        else:
            left, right = _SIDED_FAMILIES[family]
            baselines[left] = baselines[right] = baseline
            amplitudes[left] = amplitudes[right] = amps
            phases[left] = phi
            phases[right] = phi + h * np.pi  # half-cycle delay
    cadence = rng.uniform(*spec.cycle_freq_range)
    severity = rng.uniform(*spec.severity_range)
    affected = Laterality.LEFT if rng.random() < 0.5 else Laterality.RIGHT
    return SubjectSignature(
        baselines=baselines,
        amplitudes=amplitudes,
        phases=phases,
        cadence_hz=float(cadence),
        severity=float(severity),
        affected=affected,
    )


def severity_at_session(spec: CohortSpec, base_severity: float, session_index: int) -> float:
    """Linear decay toward recovery_final_severity when recovery is enabled."""
    if not spec.recovery or spec.sessions_per_subject == 1:
        return base_severity
    frac = session_index / (spec.sessions_per_subject - 1)
    return base_severity + (spec.recovery_final_severity - base_severity) * frac


def render_trial(
    sig: SubjectSignature,
    spec: CohortSpec,
    diagnosis: Diagnosis,
    session_index: int,
    length: int,
    rng: np.random.Generator,
    noiseless: bool = False,
) -> np.ndarray:
    """Noisy (len, 9) frame matrix for one trial of this subject."""
    severity = severity_at_session(spec, sig.severity, session_index)
    amplitudes = sig.amplitudes.copy()
    baselines = sig.baselines.copy()
    side = 0 if sig.affected is Laterality.LEFT else 1
    if diagnosis is Diagnosis.STROKE:
        factor = 1.0 - spec.stroke_knee_ankle_factor * severity
        amplitudes[_SIDED_FAMILIES["knee"][side]] *= factor
        amplitudes[_SIDED_FAMILIES["ankle"][side]] *= factor
        baselines[_SIDED_FAMILIES["elbow"][side]] += spec.stroke_elbow_offset_deg * severity
    elif diagnosis is Diagnosis.PROSTHESIS:
        amplitudes[_SIDED_FAMILIES["ankle"][side]] *= 1.0 - spec.prosthesis_ankle_factor * severity

    phase0 = rng.uniform(0.0, 2.0 * np.pi)  # random time origin per trial
    freq = sig.cadence_hz * (1.0 + rng.uniform(-0.02, 0.02))
    t = np.arange(length) / SAMPLE_RATE_HZ
    h = np.arange(1, spec.harmonics + 1)
    # angle[n, j, k] = 2*pi*h_k*f*t_n + phi[j, k] + h_k*phase0
    angle = (
        2.0 * np.pi * freq * t[:, None, None] * h[None, None, :]
        + sig.phases[None, :, :]
        + phase0 * h[None, None, :]
    )
    frames = baselines[None, :] + np.sum(amplitudes[None, :, :] * np.sin(angle), axis=2)
    if not noiseless and spec.noise_std_deg > 0:
        frames = frames + rng.normal(0.0, spec.noise_std_deg, size=frames.shape)
    return frames


def generate_cohort(spec: CohortSpec, out_dir=None, noiseless: bool = False):
    """Build the cohort; optionally write the dataset layout plus cohort_summary.csv."""
    spec.validate()
    subjects: list[Subject] = []
    trials: list[GaitTrial] = []
    plan = (
        [Diagnosis.CONTROL] * spec.controls
        + [Diagnosis.STROKE] * spec.stroke
        + [Diagnosis.PROSTHESIS] * spec.prosthesis
        + [Diagnosis.OTHER] * spec.other
    )
    per_diag_counter: dict[Diagnosis, int] = {}
    for index, diagnosis in enumerate(plan):
        sig = make_signature(spec, index)
        n = per_diag_counter.get(diagnosis, 0)
        per_diag_counter[diagnosis] = n + 1
        subject_id = f"{spec.id_prefix}{_DIAG_CODE[diagnosis]}{n:03d}"
        unilateral = diagnosis in (Diagnosis.STROKE, Diagnosis.PROSTHESIS)
        subjects.append(
            Subject(
                subject_id=subject_id,
                diagnosis=diagnosis,
                laterality=sig.affected if unilateral else Laterality.NONE,
            )
        )
        for session in range(spec.sessions_per_subject):
            day = session * 7
            for trial_index in range(spec.trials_per_session):
                rng = np.random.default_rng([spec.seed, _TRIAL_STREAM, index, session, trial_index])
                length = int(rng.integers(spec.trial_length_range[0], spec.trial_length_range[1] + 1))
                frames = render_trial(sig, spec, diagnosis, session, length, rng, noiseless=noiseless)
                trials.append(
                    GaitTrial(
                        trial_id=f"{subject_id}_d{day:03d}_t{trial_index:02d}",
                        subject_id=subject_id,
                        session_day=day,
                        condition="self_selected",
                        frames=frames,
                    )
                )
    if out_dir is not None:
        out = Path(out_dir)
        save_dataset(out, trials, subjects)
        write_cohort_summary(describe_cohort(trials, subjects), out / "cohort_summary.csv")
    return trials, subjects


def describe_cohort(trials: list[GaitTrial], subjects: list[Subject]) -> list[dict]:
    """Per-diagnosis subject/trial counts, length stats, per-channel range stats."""
    rows = []
    for diagnosis in Diagnosis:
        subject_ids = {s.subject_id for s in subjects if s.diagnosis is diagnosis}
        group = [t for t in trials if t.subject_id in subject_ids]
        lengths = np.array([len(t) for t in group]) if group else np.array([])
        row = {
            "diagnosis": diagnosis.value,
            "subjects": len(subject_ids),
            "trials": len(group),
            "len_min": int(lengths.min()) if group else 0,
            "len_mean": float(lengths.mean()) if group else 0.0,
            "len_max": int(lengths.max()) if group else 0,
        }
        for j, name in enumerate(JOINT_CHANNELS):
            if group:
                pp = [float(t.frames[:, j].max() - t.frames[:, j].min()) for t in group]
                row[f"range_mean_{name}"] = float(np.mean(pp))
            else:
                row[f"range_mean_{name}"] = 0.0
        rows.append(row)
    return rows


def write_cohort_summary(rows: list[dict], path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
