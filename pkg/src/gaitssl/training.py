"""SSL objectives, AdamW, and the pretrain/fine-tune training loop.

Per epoch: shuffle eligible trials, group into batches of `batch_trials`,
sample a positive pair of 90-frame crops per trial, forward all 2N windows
in train mode, compute contrastive + weighted prediction loss, backprop,
AdamW step. Metrics stream to `metrics.ndjson` ({epoch, contrastive_loss,
prediction_loss, total_loss}) and per-epoch wall time to `timing.ndjson`,
keeping the metrics log bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import (
    GaitTrial,
    NormStats,
    Subject,
    TrialWindow,
    WINDOW_LEN,
    compute_norm_stats,
    eligible_trials,
    sample_positive_pair,
    write_skip_report,
)
from .errors import ConfigError, DataError, NumericalError
from .model import (
    HEAD_PARAM_NAMES,
    ModelConfig,
    forward_batch,
    init_params,
    is_decayed_param,
    load_checkpoint,
    save_checkpoint,
)

_ARCH_FIELDS = (
    "hidden_dim",
    "num_layers",
    "num_heads",
    "ffn_expansion",
    "positional",
    "use_cls_token",
    "projection_dim",
    "seq_len",
    "input_dim",
)


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_trials: int = 32
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    prediction_weight: float = 1.0  # lambda in the total loss
    seed: int | None = None  # None = inherit the run's global seed
    pretrain_checkpoint: str | None = None
    checkpoint_every: int = 100
    dataset: str | None = None  # CLI plumbing; the loop itself takes trials

    def validate(self) -> None:
        if self.seed is None or self.seed < 0:
            raise ConfigError("train.seed must be a non-negative integer (set it or pass a global seed)")
        if self.batch_trials < 2:
            raise ConfigError("train.batch_trials must be >= 2 (contrastive loss needs a negative)")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.learning_rate <= 0 or self.eps <= 0:
            raise ConfigError("train.learning_rate and train.eps must be > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1/beta2 must lie in [0, 1)")
        if self.weight_decay < 0 or self.prediction_weight < 0:
            raise ConfigError("train.weight_decay and train.prediction_weight must be >= 0")
        if self.checkpoint_every < 1:
            raise ConfigError("train.checkpoint_every must be >= 1")


@dataclass
class ContrastiveBatch:
    """2N unit-norm projected embeddings plus the crop pairing involution."""

    embeddings: Tensor  # (2N, D)
    pair_index: np.ndarray  # (2N,) ints, pair_index[pair_index[i]] == i

    def __post_init__(self):
        idx = np.asarray(self.pair_index)
        n = self.embeddings.data.shape[0]
        if idx.shape != (n,) or not np.array_equal(idx[idx], np.arange(n)) or np.any(idx == np.arange(n)):
            raise ValueError("pair_index must be a fixed-point-free involution over the batch")


def adjacent_pair_index(n_pairs: int) -> np.ndarray:
    """Pairing for batches laid out [a0, b0, a1, b1, ...]."""
    idx = np.arange(2 * n_pairs)
    return idx ^ 1


def contrastive_loss(batch: ContrastiveBatch, temperature: float) -> Tensor:
    """InfoNCE over all 2N anchors: mean of -log softmax(sim/tau) at the partner.

    The denominator runs over every other embedding in the batch (k != i),
    log-sum-exp stabilized. With a single pair (2N = 2) the denominator holds
    only the positive term and the loss is exactly 0.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = batch.embeddings
    if not np.isfinite(z.data).all():
        raise NumericalError("contrastive loss: non-finite embedding")
    n = z.data.shape[0]
    sims = ad.scale(ad.matmul(z, ad.transpose(z, (1, 0))), 1.0 / float(temperature))
    eye = np.eye(n, dtype=bool)
    masked = ad.masked_fill(sims, eye, -np.inf)
    m_const = np.max(masked.data, axis=1, keepdims=True)  # detached row max
    shifted = ad.exp(ad.sub(masked, m_const))
    lse = ad.add(ad.log(ad.reduce_sum(shifted, axis=1, keepdims=True)), m_const)
    pairing = np.zeros((n, n), dtype=z.data.dtype)
    pairing[np.arange(n), batch.pair_index] = 1.0
    positive = ad.reduce_sum(ad.mul(sims, pairing), axis=1, keepdims=True)
    return ad.reduce_mean(ad.sub(lse, positive))


def prediction_loss(y_hat, window: TrialWindow) -> Tensor:
    """MSE of next-step predictions against the window's shifted target.

    `y_hat` is (T, J); the last row predicts past the window end and is
    excluded, giving (T-1)*J scored terms. Standardized units throughout.
    """
    y_hat = ad.as_tensor(y_hat)
    t, j = y_hat.data.shape
    if window.target.shape != (t - 1, j):
        raise DataError(
            f"prediction target shape {window.target.shape} incompatible with predictions {(t, j)}"
        )
    return _prediction_loss_batch(ad.reshape(y_hat, (1, t, j)), window.target[None, :, :])


def _prediction_loss_batch(y_hat: Tensor, targets: np.ndarray) -> Tensor:
    t = y_hat.data.shape[1]
    diff = ad.sub(ad.slice_axis(y_hat, 1, 0, t - 1), targets.astype(y_hat.data.dtype))
    return ad.reduce_mean(ad.mul(diff, diff))


def total_loss(contrastive: Tensor, prediction: Tensor, weight: float) -> Tensor:
    """Contrastive term plus `weight` times the prediction term."""
    if weight == 0.0:
        return contrastive
    return ad.add(contrastive, ad.scale(prediction, float(weight)))


# --- AdamW ------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def initial(cls, params: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            step=0,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{n}": a for n, a in self.m.items()}
        out.update({f"v.{n}": a for n, a in self.v.items()})
        return out


def adamw_step(params: dict[str, Tensor], state: AdamWState, config: TrainConfig) -> AdamWState:
    """One AdamW update in place: bias-corrected moments + decoupled decay.

    Decay touches weight matrices only. Missing gradients count as zero, so
    unused heads shrink by exactly (1 - lr*wd) per step and nothing else.
    """
    state.step += 1
    t = state.step
    lr = config.learning_rate
    bc1 = 1.0 - config.beta1**t
    bc2 = 1.0 - config.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter '{name}'")
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        if config.weight_decay > 0 and is_decayed_param(name):
            update = update + config.weight_decay * p.data
        p.data -= lr * update
    return state


# --- training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics: list[dict]
    params: dict[str, Tensor]
    model_config: ModelConfig
    norm_stats: NormStats
    skipped: list[dict] = field(default_factory=list)


def _load_pretrained(path, model_config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    ckpt = load_checkpoint(path)
    for name in _ARCH_FIELDS:
        want, got = getattr(model_config, name), getattr(ckpt.config, name)
        if want != got:
            raise DataError(
                f"pretrain checkpoint architecture mismatch: {name}={got}, current config wants {want}"
            )
    params = ckpt.params
    fresh = init_params(model_config, rng, dtype=np.float32)
    for name in HEAD_PARAM_NAMES:
        params[name] = fresh[name]
    return params


def train(
    trials: list[GaitTrial],
    subjects: list[Subject],
    model_config: ModelConfig,
    train_config: TrainConfig,
    run_dir,
) -> TrainResult:
    """Full SSL training run; writes metrics, timing, skip report, checkpoints."""
    model_config.validate()
    train_config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    usable, skipped = eligible_trials(trials)
    write_skip_report(run_dir / "skip_report.ndjson", skipped)
    if len(usable) < 2:
        raise DataError(f"need at least 2 trials of >= {WINDOW_LEN} frames, got {len(usable)}")
    stats = compute_norm_stats(usable)
    standardized = [stats.standardize(t.frames).astype(np.float32) for t in usable]

    rng_init = np.random.default_rng([train_config.seed, 0])
    rng_loop = np.random.default_rng([train_config.seed, 1])
    if train_config.pretrain_checkpoint:
        params = _load_pretrained(train_config.pretrain_checkpoint, model_config, rng_init)
    else:
        params = init_params(model_config, rng_init, dtype=np.float32)
    opt = AdamWState.initial(params)

    metadata_base = {
        "norm_mean": [float(v) for v in stats.mean],
        "norm_std": [float(v) for v in stats.std],
        "train_subject_ids": sorted({t.subject_id for t in usable}),
        "train_config": {k: v for k, v in asdict(train_config).items() if k != "dataset"},
    }

    def write_checkpoint(path, epoch):
        meta = dict(metadata_base, epoch=epoch, opt_step=opt.step)
        save_checkpoint(path, params, model_config, opt_arrays=opt.arrays(), metadata=meta)

    metrics: list[dict] = []
    n = len(usable)
    batch_size = train_config.batch_trials
    lam = train_config.prediction_weight
    with open(run_dir / "metrics.ndjson", "w", newline="\n", encoding="utf-8") as metrics_fh, open(
        run_dir / "timing.ndjson", "w", newline="\n", encoding="utf-8"
    ) as timing_fh:
        for epoch in range(1, train_config.epochs + 1):
            t0 = time.perf_counter()
            order = rng_loop.permutation(n)
            sums = np.zeros(3)
            count = 0
            for lo in range(0, n, batch_size):
                chunk = order[lo : lo + batch_size]
                if len(chunk) < 2:
                    continue  # a lone trial has no negative
                xs, ts = [], []
                for i in chunk:
                    trial = usable[int(i)]
                    wa, wb = sample_positive_pair(trial, rng_loop)
                    cache = standardized[int(i)]
                    for w in (wa, wb):
                        xs.append(cache[w.start_frame : w.start_frame + WINDOW_LEN])
                        ts.append(cache[w.start_frame + 1 : w.start_frame + WINDOW_LEN])
                x = np.stack(xs)
                targets = np.stack(ts)
                pairing = adjacent_pair_index(len(chunk))
                for p in params.values():
                    p.grad = None
                with Tape() as tape:
                    out = forward_batch(params, model_config, x, mode="train", rng=rng_loop)
                    c_loss = contrastive_loss(
                        ContrastiveBatch(out.projected, pairing), model_config.temperature
                    )
                    p_loss = _prediction_loss_batch(out.predictions, targets)
                    loss = total_loss(c_loss, p_loss, lam)
                    values = (float(c_loss.data), float(p_loss.data), float(loss.data))
                    if not all(np.isfinite(values)):
                        raise NumericalError(f"non-finite loss at epoch {epoch}: {values}")
                    tape.backward(loss)
                adamw_step(params, opt, train_config)
                sums += np.asarray(values) * len(x)
                count += len(x)
            if count == 0:
                raise DataError("every batch was dropped; need >= 2 trials per epoch")
            means = sums / count
            record = {
                "epoch": epoch,
                "contrastive_loss": float(means[0]),
                "prediction_loss": float(means[1]),
                "total_loss": float(means[2]),
            }
            metrics.append(record)
            metrics_fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            timing_fh.write(
                json.dumps({"epoch": epoch, "wall_time": time.perf_counter() - t0}, separators=(",", ":"))
                + "\n"
            )
            if epoch % train_config.checkpoint_every == 0 and epoch != train_config.epochs:
                write_checkpoint(run_dir / f"checkpoint_ep{epoch:05d}.bin", epoch)

    final_path = run_dir / "checkpoint.bin"
    write_checkpoint(final_path, train_config.epochs)
    return TrainResult(
        checkpoint_path=final_path,
        metrics=metrics,
        params=params,
        model_config=model_config,
        norm_stats=stats,
        skipped=skipped,
    )
