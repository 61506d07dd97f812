import numpy as np
import pytest

from gaitssl.data import GaitTrial, Subject, Diagnosis, Laterality, save_dataset


def make_trial(trial_id="t0", subject_id="c000", length=120, seed=0, session_day=0):
    rng = np.random.default_rng(seed)
    frames = rng.normal(10.0, 5.0, size=(length, 9))
    return GaitTrial(
        trial_id=trial_id,
        subject_id=subject_id,
        session_day=session_day,
        condition="self_selected",
        frames=frames,
    )


def make_subject(subject_id="c000", diagnosis=Diagnosis.CONTROL, laterality=Laterality.NONE):
    return Subject(subject_id=subject_id, diagnosis=diagnosis, laterality=laterality)


@pytest.fixture
def two_subject_dataset(tmp_path):
    """Well-formed fixture: 2 subjects, 4 trials, each (len, 9)."""
    subjects = [
        make_subject("c000"),
        make_subject("s000", Diagnosis.STROKE, Laterality.LEFT),
    ]
    trials = [
        make_trial("c000_t0", "c000", 100, seed=1),
        make_trial("c000_t1", "c000", 110, seed=2),
        make_trial("s000_t0", "s000", 120, seed=3),
        make_trial("s000_t1", "s000", 130, seed=4),
    ]
    path = tmp_path / "dataset"
    save_dataset(path, trials, subjects)
    return path, trials, subjects
