"""Command-line entry point.

Subcommands: generate | pretrain | train | embed | probe | simmatrix |
biomarker | sweep. Every invocation owns a fresh run directory, freezes its
fully-resolved config there, and removes partial outputs on failure. Exit
codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

Report subcommands render PNG figures next to their delimited outputs.
Heavy imports are deferred until after ``--threads`` is applied so the BLAS
thread count can still be pinned.
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import shutil
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

__version__ = "0.1.0"

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitssl",
        description="Self-supervised gait representation pipeline on synthetic cohorts.",
    )
    parser.add_argument("--version", action="version", version=f"gaitssl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("generate", "generate a synthetic cohort dataset"),
        ("pretrain", "SSL-train on the pretraining corpus"),
        ("train", "SSL-train on the main corpus (optionally from a pretrained checkpoint)"),
        ("embed", "embed every eligible trial with a checkpoint"),
        ("probe", "nested-CV linear probes on pooled embeddings"),
        ("simmatrix", "trial similarity matrix and indicator matrices"),
        ("biomarker", "geometric-median control reference and response series"),
        ("sweep", "hyperparameter grid over model/training axes"),
    ):
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="path to the YAML run config")
        p.add_argument("--run-dir", default=None, help="fresh directory for this run's outputs")
        p.add_argument("--seed", type=int, default=None, help="override the global seed")
        p.add_argument("--threads", type=int, default=None, help="BLAS thread count")
        if name == "generate":
            p.add_argument("--noiseless", action="store_true", help="omit measurement noise")
    return parser


def main(argv=None) -> int:
    raw_argv = list(sys.argv[1:]) if argv is None else list(argv)
    args = _build_parser().parse_args(raw_argv)
    threads = args.threads if args.threads is not None else os.environ.get("GAITSSL_THREADS")
    if threads is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)

    from .errors import ConfigError, DataError, NumericalError

    try:
        return _dispatch(args, raw_argv)
    except ConfigError as e:
        return _fail(2, "config", e)
    except DataError as e:
        return _fail(3, "data", e)
    except NumericalError as e:
        return _fail(4, "numerical", e)
    except Exception as e:  # noqa: BLE001 - single-line contract on any failure
        return _fail(1, "internal", e)


def _fail(code: int, kind: str, err: Exception) -> int:
    msg = str(err).replace('"', "'").replace("\n", " ")
    print(f'gaitssl: error code={code} kind={kind} msg="{msg}"', file=sys.stderr)
    return code


def _dispatch(args, raw_argv: list[str]) -> int:
    from .config import load_run_config
    from .errors import ConfigError

    config = load_run_config(args.config)
    seed = args.seed if args.seed is not None else config.seed
    if seed < 0:
        raise ConfigError("seed must be non-negative")

    run_dir_arg = args.run_dir or os.environ.get("GAITSSL_RUN_DIR") or config.run_dir
    if run_dir_arg is None:
        raise ConfigError("no run directory: pass --run-dir, set GAITSSL_RUN_DIR, or set run_dir in the config")
    run_dir = Path(run_dir_arg)
    pre_existing = run_dir.exists()
    if pre_existing and any(run_dir.iterdir()):
        raise ConfigError(f"run directory {run_dir} already exists and is not empty")
    run_dir.mkdir(parents=True, exist_ok=True)

    handler = {
        "generate": _cmd_generate,
        "pretrain": _cmd_train,
        "train": _cmd_train,
        "embed": _cmd_embed,
        "probe": _cmd_probe,
        "simmatrix": _cmd_simmatrix,
        "biomarker": _cmd_biomarker,
        "sweep": _cmd_sweep,
    }[args.command]
    started = time.time()
    try:
        outputs = handler(args, config, seed, run_dir)
        _freeze(config, seed, run_dir)
    except BaseException:
        if pre_existing:
            for child in run_dir.iterdir():
                shutil.rmtree(child) if child.is_dir() else child.unlink()
        else:
            shutil.rmtree(run_dir, ignore_errors=True)
        raise
    manifest = {
        "command": args.command,
        "argv": raw_argv,
        "config": str(args.config),
        "seed": seed,
        "package_version": __version__,
        "outputs": sorted(outputs),
        "elapsed_s": round(time.time() - started, 3),
        "status": "ok",
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def _freeze(config, seed: int, run_dir: Path) -> None:
    from .config import dump_resolved_config

    frozen = replace(config, seed=seed, run_dir=str(run_dir))
    dump_resolved_config(frozen, run_dir / "config.resolved.yaml")


def _require(section, name: str):
    from .errors import ConfigError

    if section is None:
        raise ConfigError(f"config section '{name}' is required for this subcommand")
    return section


def _resolve_embeddings_path(path_str: str):
    from .errors import DataError

    path = Path(path_str)
    if path.is_dir():
        candidate = path / "embeddings.csv"
        if not candidate.exists():
            raise DataError(f"{path}: no embeddings.csv in directory")
        return candidate
    if not path.exists():
        raise DataError(f"embeddings file not found: {path}")
    return path


# --- subcommands --------------------------------------------------------------


def _cmd_generate(args, config, seed: int, run_dir: Path) -> list[str]:
    from .data import JOINT_CHANNELS
    from .plots import plot_cohort_channels
    from .synth import generate_cohort

    cohort = _require(config.cohort, "cohort")
    if cohort.seed is None:
        cohort = replace(cohort, seed=seed)
    config.cohort = cohort
    dataset_dir = run_dir / "dataset"
    trials, _subjects = generate_cohort(cohort, out_dir=dataset_dir, noiseless=getattr(args, "noiseless", False))
    outputs = ["dataset/subjects.csv", "dataset/trials.ndjson", "dataset/cohort_summary.csv"]
    if trials:
        plot_cohort_channels(trials[0].frames, JOINT_CHANNELS, run_dir / "sample_trial.png")
        outputs.append("sample_trial.png")
    return outputs


def _train_common(config, seed: int, run_dir: Path, section_name: str):
    from .data import load_dataset
    from .errors import ConfigError
    from .model import ModelConfig
    from .training import train

    cfg = _require(getattr(config, section_name), section_name)
    if cfg.dataset is None:
        raise ConfigError(f"config key '{section_name}.dataset' is required")
    if cfg.seed is None:
        cfg = replace(cfg, seed=seed)
        setattr(config, section_name, cfg)
    model_config = config.model if config.model is not None else ModelConfig()
    trials, subjects = load_dataset(cfg.dataset)
    return train(trials, subjects, model_config, cfg, run_dir)


def _cmd_train(args, config, seed: int, run_dir: Path) -> list[str]:
    from .plots import plot_training

    section = "pretrain" if args.command == "pretrain" else "train"
    result = _train_common(config, seed, run_dir, section)
    plot_training(result.metrics, run_dir / "loss_curves.png")
    return ["checkpoint.bin", "metrics.ndjson", "timing.ndjson", "skip_report.ndjson", "loss_curves.png"]


def _cmd_embed(args, config, seed: int, run_dir: Path) -> list[str]:
    from .data import load_dataset, write_skip_report
    from .errors import ConfigError
    from .model import load_checkpoint
    from .probe import embed_dataset, write_embeddings_csv

    cfg = _require(config.embed, "embed")
    if cfg.checkpoint is None or cfg.dataset is None:
        raise ConfigError("config keys 'embed.checkpoint' and 'embed.dataset' are required")
    ckpt = load_checkpoint(cfg.checkpoint)
    trials, _subjects = load_dataset(cfg.dataset)
    records, skipped = embed_dataset(ckpt, trials)
    write_embeddings_csv(records, run_dir / "embeddings.csv")
    write_skip_report(run_dir / "skip_report.ndjson", skipped)
    manifest = {
        "checkpoint": str(cfg.checkpoint),
        "dataset": str(cfg.dataset),
        "train_subject_ids": ckpt.metadata.get("train_subject_ids", []),
        "model_config": asdict(ckpt.config),
    }
    (run_dir / "embed_manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return ["embeddings.csv", "skip_report.ndjson", "embed_manifest.json"]


def _cmd_probe(args, config, seed: int, run_dir: Path) -> list[str]:
    from .data import load_dataset
    from .errors import ConfigError
    from .plots import plot_probe
    from .probe import (
        PROBE_TASKS,
        default_l1_grid,
        nested_cv_probe,
        read_embeddings_csv,
        write_predictions_csv,
        write_probe_report,
    )

    cfg = _require(config.probe, "probe")
    cfg.validate()
    if cfg.embeddings is None or cfg.dataset is None:
        raise ConfigError("config keys 'probe.embeddings' and 'probe.dataset' are required")
    records = read_embeddings_csv(_resolve_embeddings_path(cfg.embeddings))
    _trials, subjects = load_dataset(cfg.dataset)
    grid = default_l1_grid(cfg.l1_low, cfg.l1_high, cfg.l1_count)
    probe_seed = cfg.seed if cfg.seed is not None else seed
    results = []
    for name in cfg.tasks:
        if name not in PROBE_TASKS:
            raise ConfigError(f"unknown probe task '{name}' (choose from {', '.join(PROBE_TASKS)})")
        result = nested_cv_probe(
            records,
            subjects,
            PROBE_TASKS[name],
            outer_k=cfg.outer_folds,
            inner_k=cfg.inner_folds,
            l1_grid=grid,
            seed=probe_seed,
        )
        results.append(result)
        write_predictions_csv(result, run_dir / f"predictions_{name}.csv")
    write_probe_report(results, run_dir / "probe_report.csv")
    plot_probe(results, run_dir / "probe_accuracy.png")
    return ["probe_report.csv", "probe_accuracy.png"] + [f"predictions_{r.task}.csv" for r in results]


def _cmd_simmatrix(args, config, seed: int, run_dir: Path) -> list[str]:
    from .biomarker import similarity_matrix, write_similarity_csvs
    from .data import load_dataset
    from .errors import ConfigError
    from .plots import plot_similarity
    from .probe import read_embeddings_csv

    cfg = _require(config.simmatrix, "simmatrix")
    if cfg.embeddings is None or cfg.dataset is None:
        raise ConfigError("config keys 'simmatrix.embeddings' and 'simmatrix.dataset' are required")
    records = read_embeddings_csv(_resolve_embeddings_path(cfg.embeddings))
    _trials, subjects = load_dataset(cfg.dataset)
    sim = similarity_matrix(records, subjects)
    write_similarity_csvs(sim, run_dir)
    plot_similarity(sim, run_dir / "similarity_matrix.png")
    return [
        "similarity_matrix.csv",
        "similarity_rows.csv",
        "same_subject.csv",
        "same_diagnosis.csv",
        "similarity_matrix.png",
    ]


def _cmd_biomarker(args, config, seed: int, run_dir: Path) -> list[str]:
    import csv

    from .biomarker import control_reference, response_series, write_biomarker_csv
    from .data import Diagnosis, load_dataset
    from .errors import ConfigError, DataError
    from .plots import plot_biomarker
    from .probe import read_embeddings_csv

    cfg = _require(config.biomarker, "biomarker")
    cfg.validate()
    if cfg.embeddings is None or cfg.dataset is None:
        raise ConfigError("config keys 'biomarker.embeddings' and 'biomarker.dataset' are required")
    embeddings_path = _resolve_embeddings_path(cfg.embeddings)
    records = read_embeddings_csv(embeddings_path)
    _trials, subjects = load_dataset(cfg.dataset)

    wanted = {Diagnosis(d) for d in cfg.series_diagnoses}
    with_records = {r.subject_id for r in records}
    series_subjects = sorted(
        s.subject_id for s in subjects if s.diagnosis in wanted and s.subject_id in with_records
    )
    if cfg.overlap == "forbid":
        manifest_path = embeddings_path.parent / "embed_manifest.json"
        if manifest_path.exists():
            trained_on = set(json.loads(manifest_path.read_text(encoding="utf-8")).get("train_subject_ids", []))
            control_ids = {
                s.subject_id for s in subjects if s.diagnosis is Diagnosis.CONTROL and s.subject_id in with_records
            }
            overlap = sorted((set(series_subjects) | control_ids) & trained_on)
            if overlap:
                raise DataError(
                    f"held-out mode: {len(overlap)} analyzed subject(s) were in the checkpoint's training set "
                    f"(e.g. {overlap[0]}); set biomarker.overlap: allow to permit this"
                )
        else:
            print("gaitssl: warning: no embed_manifest.json next to embeddings; cannot verify held-out mode", file=sys.stderr)

    reference = control_reference(records, subjects, mode=cfg.reference)
    series = [response_series(records, reference, sid) for sid in series_subjects]
    write_biomarker_csv(series, run_dir / "biomarker_series.csv")
    with open(run_dir / "control_reference.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"z_{i}" for i in range(reference.shape[0])])
        writer.writerow([repr(float(v)) for v in reference])
    plot_biomarker(series, run_dir / "biomarker_series.png")
    return ["biomarker_series.csv", "control_reference.csv", "biomarker_series.png"]


def _cmd_sweep(args, config, seed: int, run_dir: Path) -> list[str]:
    import csv

    from .config import SWEEP_AXES
    from .data import load_dataset
    from .errors import ConfigError, DataError
    from .model import Checkpoint, ModelConfig
    from .probe import PROBE_TASKS, default_l1_grid, embed_dataset, nested_cv_probe
    from .training import train

    cfg = _require(config.sweep, "sweep")
    cfg.validate()
    train_cfg = _require(config.train, "train")
    if train_cfg.dataset is None:
        raise ConfigError("config key 'train.dataset' is required for sweep")
    if train_cfg.seed is None:
        train_cfg = replace(train_cfg, seed=seed)
        config.train = train_cfg
    base_model = config.model if config.model is not None else ModelConfig()
    probe_cfg = config.probe
    tasks = probe_cfg.tasks if probe_cfg is not None else ["stroke_vs_control", "llpu_vs_control", "laterality"]
    grid = (
        default_l1_grid(probe_cfg.l1_low, probe_cfg.l1_high, probe_cfg.l1_count)
        if probe_cfg is not None
        else default_l1_grid()
    )
    probe_seed = probe_cfg.seed if probe_cfg is not None and probe_cfg.seed is not None else seed

    trials, subjects = load_dataset(train_cfg.dataset)
    pre_trials = pre_subjects = None
    if cfg.pretrain_dataset is not None:
        pre_trials, pre_subjects = load_dataset(cfg.pretrain_dataset)

    axes = [(name, cfg.axes[name]) for name in SWEEP_AXES if name in cfg.axes]
    rows = []
    for values in itertools.product(*(v for _, v in axes)):
        point = dict(zip((n for n, _ in axes), values))
        model_cfg = replace(base_model, **{k: v for k, v in point.items() if k not in ("prediction_weight", "pretrain")})
        point_train = replace(train_cfg, prediction_weight=point.get("prediction_weight", train_cfg.prediction_weight))
        payload = {"axes": point, "model": asdict(model_cfg), "train": {k: v for k, v in asdict(point_train).items() if k != "dataset"}}
        point_hash = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:12]
        point_dir = run_dir / "points" / point_hash

        if point.get("pretrain", False):
            if pre_trials is None:
                raise ConfigError("sweep point requests pretrain but sweep.pretrain_dataset is unset")
            pre_cfg = replace(
                point_train,
                epochs=cfg.pretrain_epochs if cfg.pretrain_epochs is not None else point_train.epochs,
                pretrain_checkpoint=None,
            )
            pre_result = train(pre_trials, pre_subjects, model_cfg, pre_cfg, point_dir / "pretrain")
            point_train = replace(point_train, pretrain_checkpoint=str(pre_result.checkpoint_path))
        result = train(trials, subjects, model_cfg, point_train, point_dir / "train")

        ckpt = Checkpoint(
            params=result.params,
            config=model_cfg,
            metadata={
                "norm_mean": [float(v) for v in result.norm_stats.mean],
                "norm_std": [float(v) for v in result.norm_stats.std],
            },
        )
        records, _ = embed_dataset(ckpt, trials)
        final = result.metrics[-1]
        row = {"config_hash": point_hash, **{name: point[name] for name, _ in axes}}
        row.update(
            {
                "contrastive_loss": final["contrastive_loss"],
                "prediction_loss": final["prediction_loss"],
                "total_loss": final["total_loss"],
            }
        )
        for name in tasks:
            try:
                res = nested_cv_probe(records, subjects, PROBE_TASKS[name], l1_grid=grid, seed=probe_seed)
                row[f"acc_{name}"] = res.mean
            except DataError:
                row[f"acc_{name}"] = ""
        rows.append(row)

    fieldnames = (
        ["config_hash"]
        + [n for n, _ in axes]
        + ["contrastive_loss", "prediction_loss", "total_loss"]
        + [f"acc_{t}" for t in tasks]
    )
    with open(run_dir / "sweep_results.csv", "w", newline="\n", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return ["sweep_results.csv"]


if __name__ == "__main__":
    sys.exit(main())
