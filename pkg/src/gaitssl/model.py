"""Decoder-only causal transformer over 90-frame joint-angle windows.

Pipeline: linear input projection -> (train) noise augmentation on the
standardized channels -> (train) forgetful causal masking of token embeddings
-> optional [CLS] token appended at the sequence end -> positions (learned
table, or rotary rotation of Q/K inside attention) -> pre-norm blocks
(LN -> causal MHA -> residual; LN -> gelu FFN -> residual) -> final LN.
The prediction head maps the first T token states back to joint space; the
pooled embedding is the final state of the last position ([CLS] when enabled,
else the last temporal token); the projected embedding is
l2_normalize(project(l2_normalize(pooled))).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

ROTARY_BASE = 10000.0
LAYER_NORM_EPS = 1e-5
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"GAITSSL\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ffn_expansion: int = 4
    positional: str = "rotary"  # "learned" | "rotary"
    use_cls_token: bool = True
    fcm_mask_prob: float = 0.0
    noise_aug_scale: float = 0.0
    projection_dim: int = 16
    seq_len: int = 90
    input_dim: int = 9
    temperature: float = 0.1

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.num_layers < 1 or self.num_heads < 1:
            raise ConfigError("model dims must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.positional not in ("learned", "rotary"):
            raise ConfigError(f"model.positional must be 'learned' or 'rotary', got '{self.positional}'")
        if self.positional == "rotary" and (self.hidden_dim // self.num_heads) % 2 != 0:
            raise ConfigError("rotary positions need an even head dimension")
        if not (0.0 <= self.fcm_mask_prob < 1.0):
            raise ConfigError(f"model.fcm_mask_prob must lie in [0, 1), got {self.fcm_mask_prob}")
        if self.noise_aug_scale < 0:
            raise ConfigError("model.noise_aug_scale must be >= 0")
        if self.ffn_expansion < 1 or self.projection_dim < 1 or self.seq_len < 2 or self.input_dim < 1:
            raise ConfigError("model.ffn_expansion/projection_dim/seq_len/input_dim out of range")
        if self.temperature <= 0:
            raise ConfigError("model.temperature must be > 0")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass
class BatchForward:
    """Forward outputs as graph tensors (batched)."""

    token_states: Tensor  # (B, T', H)
    predictions: Tensor  # (B, T, J)
    pooled: Tensor  # (B, H)
    projected: Tensor  # (B, projection_dim), unit norm
    fcm_masked: np.ndarray | None = None  # (B, T) bool, train mode with fcm only


@dataclass
class ForwardOutput:
    """Single-window forward outputs as plain arrays."""

    token_states: np.ndarray  # (T', H)
    predictions: np.ndarray  # (T, J)
    pooled: np.ndarray  # (H,)
    projected: np.ndarray  # (projection_dim,)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Named array shapes, in fixed creation order."""
    h, j = config.hidden_dim, config.input_dim
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj_w": (j, h),
        "in_proj_b": (h,),
    }
    if config.positional == "learned":
        shapes["pos_table"] = (config.seq_len + 1, h)
    if config.use_cls_token:
        shapes["cls"] = (h,)
    f = config.ffn_expansion * h
    for i in range(config.num_layers):
        shapes[f"h{i}.ln1_g"] = (h,)
        shapes[f"h{i}.ln1_b"] = (h,)
        shapes[f"h{i}.qkv_w"] = (h, 3 * h)
        shapes[f"h{i}.qkv_b"] = (3 * h,)
        shapes[f"h{i}.attn_out_w"] = (h, h)
        shapes[f"h{i}.attn_out_b"] = (h,)
        shapes[f"h{i}.ln2_g"] = (h,)
        shapes[f"h{i}.ln2_b"] = (h,)
        shapes[f"h{i}.ffn1_w"] = (h, f)
        shapes[f"h{i}.ffn1_b"] = (f,)
        shapes[f"h{i}.ffn2_w"] = (f, h)
        shapes[f"h{i}.ffn2_b"] = (h,)
    shapes["ln_f_g"] = (h,)
    shapes["ln_f_b"] = (h,)
    shapes["pred_w"] = (h, j)
    shapes["pred_b"] = (j,)
    shapes["proj_w"] = (h, config.projection_dim)
    shapes["proj_b"] = (config.projection_dim,)
    return shapes


HEAD_PARAM_NAMES = ("pred_w", "pred_b", "proj_w", "proj_b")


def is_decayed_param(name: str) -> bool:
    """AdamW weight decay applies to weight matrices only (not layer-norm
    affines, biases, or the [CLS]/position embeddings)."""
    return name.endswith("_w")


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    """GPT-2-style init: weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1."""
    config.validate()
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_g"):
            data = np.ones(shape)
        elif name.endswith("_b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        params[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    return params


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


# --- rotary encoding --------------------------------------------------------


def rotary_cos_sin(head_dim: int, positions: np.ndarray, base: float = ROTARY_BASE, dtype=np.float64):
    """cos/sin tables of shape (len(positions), head_dim/2)."""
    if head_dim % 2 != 0:
        raise ConfigError(f"rotary requires an even head dimension, got {head_dim}")
    d = np.arange(head_dim // 2, dtype=np.float64)
    inv_freq = base ** (-2.0 * d / head_dim)
    angle = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angle).astype(dtype), np.sin(angle).astype(dtype)


def apply_rotary(x: np.ndarray, positions, base: float = ROTARY_BASE) -> np.ndarray:
    """Rotate consecutive pairs (2d, 2d+1) of `x` by position * base^(-2d/hd).

    `x` has shape (..., len(positions), head_dim). Position 0 is the identity.
    """
    x = np.asarray(x)
    positions = np.atleast_1d(np.asarray(positions))
    head_dim = x.shape[-1]
    cos, sin = rotary_cos_sin(head_dim, positions, base=base, dtype=x.dtype)
    pairs = x.reshape(x.shape[:-1] + (head_dim // 2, 2))
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(x.shape)


def _rotary_ops(t: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Autodiff version over (B, nh, T, hd) tensors."""
    b, nh, tlen, hd = t.data.shape
    pairs = ad.reshape(t, (b, nh, tlen, hd // 2, 2))
    even = ad.reshape(ad.slice_axis(pairs, 4, 0, 1), (b, nh, tlen, hd // 2))
    odd = ad.reshape(ad.slice_axis(pairs, 4, 1, 2), (b, nh, tlen, hd // 2))
    even2 = ad.sub(ad.mul(even, cos), ad.mul(odd, sin))
    odd2 = ad.add(ad.mul(even, sin), ad.mul(odd, cos))
    out = ad.concat(
        [ad.reshape(even2, (b, nh, tlen, hd // 2, 1)), ad.reshape(odd2, (b, nh, tlen, hd // 2, 1))],
        axis=4,
    )
    return ad.reshape(out, (b, nh, tlen, hd))


# --- forgetful causal masking -----------------------------------------------


def fcm_mask(token_embeddings, prob: float, rng: np.random.Generator):
    """Zero each temporal token embedding i.i.d. with probability `prob`.

    Input-side only; prediction targets are untouched. Returns the masked
    embeddings and the boolean mask record (True = zeroed).
    """
    if not (0.0 <= prob < 1.0):
        raise ConfigError(f"fcm probability must lie in [0, 1), got {prob}")
    emb = ad.as_tensor(token_embeddings)
    b, tlen = emb.data.shape[0], emb.data.shape[1]
    masked = rng.random((b, tlen)) < prob
    keep = (~masked)[:, :, None].astype(emb.data.dtype)
    return ad.mul(emb, keep), masked


# --- forward ----------------------------------------------------------------


def _affine_ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x, axis=-1, eps=LAYER_NORM_EPS), gain), bias)


def forward_batch(
    params: dict[str, Tensor],
    config: ModelConfig,
    x: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> BatchForward:
    """Run the model on a batch of standardized windows (B, T, J)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    train = mode == "train"
    if train and rng is None:
        raise ValueError("train-mode forward requires an rng")
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1] != config.seq_len or x.shape[2] != config.input_dim:
        raise DataError(
            f"input must be (B, {config.seq_len}, {config.input_dim}), got {x.shape}"
        )
    batch, tlen = x.shape[0], config.seq_len
    dtype = x.dtype

    if train and config.noise_aug_scale > 0:
        x = x + rng.normal(0.0, config.noise_aug_scale, size=x.shape).astype(dtype)

    h = ad.add(ad.matmul(ad.as_tensor(x), params["in_proj_w"]), params["in_proj_b"])

    fcm_record = None
    if train and config.fcm_mask_prob > 0:
        h, fcm_record = fcm_mask(h, config.fcm_mask_prob, rng)

    if config.use_cls_token:
        cls_row = ad.add(
            np.zeros((batch, 1, config.hidden_dim), dtype=dtype),
            ad.reshape(params["cls"], (1, 1, config.hidden_dim)),
        )
        h = ad.concat([h, cls_row], axis=1)
    seq = tlen + (1 if config.use_cls_token else 0)
    positions = np.arange(seq)

    if config.positional == "learned":
        h = ad.add(h, ad.embedding_select(params["pos_table"], positions))
        rot_cos = rot_sin = None
    else:
        rot_cos, rot_sin = rotary_cos_sin(config.head_dim, positions, dtype=dtype)

    causal = np.triu(np.ones((seq, seq), dtype=bool), k=1)
    nh, hd = config.num_heads, config.head_dim
    att_scale = 1.0 / float(np.sqrt(hd))

    for i in range(config.num_layers):
        hn = _affine_ln(h, params[f"h{i}.ln1_g"], params[f"h{i}.ln1_b"])
        qkv = ad.add(ad.matmul(hn, params[f"h{i}.qkv_w"]), params[f"h{i}.qkv_b"])
        qkv = ad.reshape(qkv, (batch, seq, 3, nh, hd))
        q = ad.transpose(ad.reshape(ad.slice_axis(qkv, 2, 0, 1), (batch, seq, nh, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.slice_axis(qkv, 2, 1, 2), (batch, seq, nh, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(ad.slice_axis(qkv, 2, 2, 3), (batch, seq, nh, hd)), (0, 2, 1, 3))
        if rot_cos is not None:
            q = _rotary_ops(q, rot_cos, rot_sin)
            k = _rotary_ops(k, rot_cos, rot_sin)
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), att_scale)
        scores = ad.masked_fill(scores, causal, -np.inf)
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (batch, seq, config.hidden_dim))
        h = ad.add(h, ad.add(ad.matmul(ctx, params[f"h{i}.attn_out_w"]), params[f"h{i}.attn_out_b"]))

        hn2 = _affine_ln(h, params[f"h{i}.ln2_g"], params[f"h{i}.ln2_b"])
        ff = ad.gelu(ad.add(ad.matmul(hn2, params[f"h{i}.ffn1_w"]), params[f"h{i}.ffn1_b"]))
        ff = ad.add(ad.matmul(ff, params[f"h{i}.ffn2_w"]), params[f"h{i}.ffn2_b"])
        h = ad.add(h, ff)

    states = _affine_ln(h, params["ln_f_g"], params["ln_f_b"])
    predictions = ad.add(
        ad.matmul(ad.slice_axis(states, 1, 0, tlen), params["pred_w"]), params["pred_b"]
    )
    pooled = ad.reshape(ad.slice_axis(states, 1, seq - 1, seq), (batch, config.hidden_dim))
    projected = ad.add(ad.matmul(ad.l2_normalize(pooled, axis=-1), params["proj_w"]), params["proj_b"])
    projected = ad.l2_normalize(projected, axis=-1)
    return BatchForward(
        token_states=states,
        predictions=predictions,
        pooled=pooled,
        projected=projected,
        fcm_masked=fcm_record,
    )


def forward(
    params: dict[str, Tensor],
    config: ModelConfig,
    window: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ForwardOutput:
    """Single standardized window (T, J) -> plain-array outputs."""
    window = np.asarray(window)
    out = forward_batch(params, config, window[None, :, :], mode=mode, rng=rng)
    return ForwardOutput(
        token_states=out.token_states.data[0],
        predictions=out.predictions.data[0],
        pooled=out.pooled.data[0],
        projected=out.projected.data[0],
    )


# --- checkpoint container ---------------------------------------------------


def _write_array(fh, name: str, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.tobytes())


def save_checkpoint(
    path,
    params: dict[str, Tensor],
    config: ModelConfig,
    opt_arrays: dict[str, np.ndarray] | None = None,
    metadata: dict | None = None,
) -> None:
    """Versioned binary container: named little-endian float32 arrays + config."""
    arrays: dict[str, np.ndarray] = {f"model.{n}": p.data for n, p in params.items()}
    for n, a in (opt_arrays or {}).items():
        arrays[f"opt.{n}"] = a
    blob = json.dumps(
        {"model_config": asdict(config), "metadata": metadata or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_array(fh, name, arrays[name])


@dataclass
class Checkpoint:
    params: dict[str, Tensor]
    config: ModelConfig
    opt_arrays: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if bytes(view[:8]) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a gaitssl checkpoint (bad magic)")
    off = 8
    (version,) = struct.unpack_from("<I", view, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack_from("<I", view, off)
    off += 4
    header = json.loads(bytes(view[off : off + blob_len]).decode("utf-8"))
    off += blob_len
    try:
        config = ModelConfig(**header["model_config"])
    except TypeError as e:
        raise DataError(f"{path}: bad model config in checkpoint ({e})") from None
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    params: dict[str, Tensor] = {}
    opt_arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", view, off)
        off += 4
        name = bytes(view[off : off + name_len]).decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", view, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
        if name.startswith("model."):
            params[name[len("model.") :]] = Tensor(arr, requires_grad=True)
        elif name.startswith("opt."):
            opt_arrays[name[len("opt.") :]] = arr
        else:
            raise DataError(f"{path}: unknown array namespace '{name}'")
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DataError(f"{path}: checkpoint/config shape mismatch (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if params[name].data.shape != shape:
            raise DataError(
                f"{path}: array '{name}' has shape {params[name].data.shape}, config wants {shape}"
            )
    return Checkpoint(params=params, config=config, opt_arrays=opt_arrays, metadata=header["metadata"])
