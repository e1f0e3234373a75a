"""Pre-norm transformer encoder with a code-embedding or speech-feature front-end."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import format_flat, parse_flat
from .errors import CheckpointError, ConfigError, DimensionError, VocabularyError
from .masking import MaskPlan

FRONTENDS = ("code", "speech")


@dataclass
class EncoderConfig:
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    frontend: str = "code"
    vocab_size: int = 17  # K codes + mask symbol
    input_dim: int = 12
    downsample: int = 1
    max_positions: int = 512
    pos_init: str = "sinusoid"  # or "normal"
    init_std: float = 0.02
    embed_std: float = 1.0  # code embeddings start at the same unit scale as the speech front-end
    layer_norm_eps: float = 1e-5
    dtype: str = "float64"

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"{key}: {why}", key=key)

        if self.num_layers < 1:
            bad("num_layers", f"need at least one layer, got {self.num_layers}")
        if self.model_dim < 1 or self.num_heads < 1 or self.model_dim % self.num_heads:
            bad("num_heads", f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}")
        if self.ffn_dim < 1:
            bad("ffn_dim", "must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            bad("dropout", f"must lie in [0, 1), got {self.dropout}")
        if self.frontend not in FRONTENDS:
            bad("frontend", f"must be one of {FRONTENDS}, got {self.frontend!r}")
        if self.frontend == "code" and self.vocab_size < 2:
            bad("vocab_size", "need at least one code plus the mask symbol")
        if self.frontend == "speech" and self.input_dim < 1:
            bad("input_dim", "must be >= 1")
        if self.downsample < 1:
            bad("downsample", f"must be >= 1, got {self.downsample}")
        if self.pos_init not in ("sinusoid", "normal"):
            bad("pos_init", f"must be sinusoid or normal, got {self.pos_init!r}")
        if self.dtype not in ("float64", "float32"):
            bad("dtype", f"must be float64 or float32, got {self.dtype!r}")

    @property
    def mask_symbol(self) -> int:
        return self.vocab_size - 1

    def to_flat(self) -> dict:
        return asdict(self)

    @classmethod
    def from_flat(cls, values: dict) -> "EncoderConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in kinds:
                continue
            t = kinds[k]
            out[k] = int(v) if t == "int" else float(v) if t == "float" else str(v)
        return cls(**out)


@dataclass
class LayerStack:
    layers: list[Tensor]  # a^1 .. a^N, each (..., T, model_dim)
    final: Tensor  # final layer norm applied to a^N

    def __len__(self) -> int:
        return len(self.layers)


@dataclass
class TargetRepresentation:
    R: np.ndarray
    L: int


class Head:
    """Linear projection applied on top of the encoder output."""

    def __init__(self, weight: Tensor, bias: Tensor):
        self.weight = weight
        self.bias = bias

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


def trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_head(in_dim: int, out_dim: int, seed, std: float = 0.02, dtype="float64") -> Head:
    rng = np.random.default_rng(seed)
    return Head(
        Tensor(trunc_normal(rng, (in_dim, out_dim), std, dtype), requires_grad=True),
        Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True),
    )


class Encoder:
    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if arrays[k].shape != p.shape:
                raise DimensionError(f"{k}: expected shape {p.shape}, got {arrays[k].shape}")
            p.data = np.array(arrays[k], dtype=p.data.dtype, copy=True)

    def copy(self, requires_grad: bool = False) -> "Encoder":
        return Encoder(
            self.config,
            {k: Tensor(p.data.copy(), requires_grad=requires_grad) for k, p in self.params.items()},
        )

    def freeze(self) -> "Encoder":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self


def parameter_count(config: EncoderConfig) -> int:
    """Closed-form parameter count of :func:`build_encoder`'s architecture."""
    d, f, n = config.model_dim, config.ffn_dim, config.num_layers
    if config.frontend == "code":
        front = config.vocab_size * d
    else:
        front = config.downsample * config.input_dim * d + d + 2 * d + d
    block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    return front + config.max_positions * d + n * block + 2 * d


def sinusoid_table(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2) / d)
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: d // 2])
    return table


def build_encoder(config: EncoderConfig, seed=0) -> Encoder:
    config.validate()
    rng = np.random.default_rng(seed)
    d, f, std, dt = config.model_dim, config.ffn_dim, config.init_std, config.dtype
    params: dict[str, np.ndarray] = {}

    def w(name, *shape):
        params[name] = trunc_normal(rng, shape, std, dt)

    def zeros(name, n):
        params[name] = np.zeros(n, dtype=dt)

    def ones(name, n):
        params[name] = np.ones(n, dtype=dt)

    if config.frontend == "code":
        params["embed.codes"] = trunc_normal(rng, (config.vocab_size, d), config.embed_std, dt)
    else:
        w("frontend.proj.weight", config.downsample * config.input_dim, d)
        zeros("frontend.proj.bias", d)
        ones("frontend.norm.gamma", d)
        zeros("frontend.norm.beta", d)
        w("frontend.mask", d)
    w("pos", config.max_positions, d)
    if config.pos_init == "sinusoid":
        # still a learned table; the sinusoid start lets attention find local context early
        params["pos"] = sinusoid_table(config.max_positions, d).astype(dt)
    for i in range(config.num_layers):
        pre = f"layers.{i}."
        ones(pre + "ln1.gamma", d)
        zeros(pre + "ln1.beta", d)
        w(pre + "attn.qkv.weight", d, 3 * d)
        zeros(pre + "attn.qkv.bias", 3 * d)
        w(pre + "attn.out.weight", d, d)
        zeros(pre + "attn.out.bias", d)
        ones(pre + "ln2.gamma", d)
        zeros(pre + "ln2.beta", d)
        w(pre + "ffn.in.weight", d, f)
        zeros(pre + "ffn.in.bias", f)
        w(pre + "ffn.out.weight", f, d)
        zeros(pre + "ffn.out.bias", d)
    ones("final_ln.gamma", d)
    zeros("final_ln.beta", d)
    return Encoder(config, {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()})


def _positions(encoder: Encoder, T: int) -> Tensor:
    if T > encoder.config.max_positions:
        raise DimensionError(f"sequence length {T} exceeds max_positions={encoder.config.max_positions}")
    return encoder["pos"][:T]


def embed_codes(encoder: Encoder, codes) -> Tensor:
    """Embedding row per code (mask symbol M = vocab_size - 1 included) plus positions."""
    if encoder.config.frontend != "code":
        raise ConfigError("embed_codes needs a code front-end encoder", key="frontend")
    ids = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    V = encoder.config.vocab_size
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise VocabularyError(f"codes must lie in [0, {V}), got range [{ids.min()}, {ids.max()}]")
    return ad.embedding(encoder["embed.codes"], ids) + _positions(encoder, ids.shape[-1])


def _mask_array(mask, length: int) -> np.ndarray | None:
    if mask is None:
        return None
    if isinstance(mask, MaskPlan):
        mask = mask.mask
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != length:
        raise DimensionError(f"mask covers {mask.shape[-1]} positions, front-end produced {length}")
    return mask


def speech_frontend(encoder: Encoder, frames, mask=None) -> Tensor:
    """Strided projection (kernel = stride = S) + layer norm; masked rows become the mask vector."""
    cfg = encoder.config
    if cfg.frontend != "speech":
        raise ConfigError("speech_frontend needs a speech front-end encoder", key="frontend")
    x = np.asarray(frames, dtype=encoder["pos"].data.dtype)
    if x.shape[-1] != cfg.input_dim:
        raise DimensionError(f"frames have {x.shape[-1]} features, encoder expects {cfg.input_dim}")
    S, T = cfg.downsample, x.shape[-2]
    Tp = -(-T // S)
    if Tp * S != T:
        pad = [(0, 0)] * x.ndim
        pad[-2] = (0, Tp * S - T)
        x = np.pad(x, pad)
    x = x.reshape(*x.shape[:-2], Tp, S * cfg.input_dim)
    h = Tensor(x) @ encoder["frontend.proj.weight"] + encoder["frontend.proj.bias"]
    h = ad.layer_norm(h, encoder["frontend.norm.gamma"], encoder["frontend.norm.beta"], cfg.layer_norm_eps)
    m = _mask_array(mask, Tp)
    if m is not None and m.any():
        h = ad.replace_rows(h, np.broadcast_to(m, h.shape[:-1]), encoder["frontend.mask"])
    return h


def embed_speech(encoder: Encoder, frames, mask=None) -> Tensor:
    """Front-end states plus positional embeddings; output length ceil(T / S)."""
    h = speech_frontend(encoder, frames, mask)
    return h + _positions(encoder, h.shape[-2])


def _block(x: Tensor, p: dict[str, Tensor], pre: str, cfg: EncoderConfig, rng) -> Tensor:
    B, T, d = x.shape
    H = cfg.num_heads
    dh = d // H
    h = ad.layer_norm(x, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], cfg.layer_norm_eps)
    qkv = h @ p[pre + "attn.qkv.weight"] + p[pre + "attn.qkv.bias"]
    qkv = qkv.reshape(B, T, 3, H, dh).transpose(2, 0, 3, 1, 4)  # 3 x B x H x T x dh
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
    att = ad.softmax(scores, axis=-1) @ v  # B x H x T x dh
    att = att.transpose(0, 2, 1, 3).reshape(B, T, d)
    att = att @ p[pre + "attn.out.weight"] + p[pre + "attn.out.bias"]
    x = x + ad.dropout(att, cfg.dropout, rng)
    h = ad.layer_norm(x, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], cfg.layer_norm_eps)
    h = ad.gelu(h @ p[pre + "ffn.in.weight"] + p[pre + "ffn.in.bias"])
    h = h @ p[pre + "ffn.out.weight"] + p[pre + "ffn.out.bias"]
    return x + ad.dropout(h, cfg.dropout, rng)


def encode(encoder: Encoder, states: Tensor, rng: np.random.Generator | None = None) -> LayerStack:
    """Run all blocks; dropout is active only when ``rng`` is given."""
    cfg = encoder.config
    squeeze = states.ndim == 2
    x = states.reshape(1, *states.shape) if squeeze else states
    if rng is not None and cfg.dropout > 0:
        x = ad.dropout(x, cfg.dropout, rng)
    layers = []
    for i in range(cfg.num_layers):
        x = _block(x, encoder.params, f"layers.{i}.", cfg, rng)
        layers.append(x)
    final = ad.layer_norm(x, encoder["final_ln.gamma"], encoder["final_ln.beta"], cfg.layer_norm_eps)
    if squeeze:
        layers = [a.reshape(a.shape[1:]) for a in layers]
        final = final.reshape(final.shape[1:])
    return LayerStack(layers, final)


def instance_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Per-channel normalization over time (axis -2), no affine.

    ``eps`` floors the variance rather than being added to it, so a channel
    with variance above ``eps`` is normalized exactly and rescaling it is a
    no-op; a constant channel maps to zeros.
    """
    x = np.asarray(x)
    centered = x - x.mean(axis=-2, keepdims=True)
    var = (centered * centered).mean(axis=-2, keepdims=True)
    return centered / np.sqrt(np.maximum(var, eps))


def target_representation(stack: LayerStack | list, L: int, eps: float = 1e-5) -> TargetRepresentation:
    """R = (1/L) * sum of the instance-normalized top-L layer outputs."""
    layers = stack.layers if isinstance(stack, LayerStack) else list(stack)
    N = len(layers)
    if not 1 <= L <= N:
        raise ConfigError(f"top_layers L={L} must lie in [1, {N}]", key="top_layers")
    acc = None
    for a in layers[N - L :]:
        normed = instance_norm(a.data if isinstance(a, Tensor) else a, eps)
        acc = normed if acc is None else acc + normed
    return TargetRepresentation(acc / L, L)


# --- checkpoints -----------------------------------------------------------


def save_tensors(directory: Path, arrays: dict[str, np.ndarray]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        ad.save_tensor(directory / f"{name}.tnsr", arr)


def load_tensors(directory: Path, names) -> dict[str, np.ndarray]:
    out = {}
    for name in names:
        path = directory / f"{name}.tnsr"
        if not path.is_file():
            raise CheckpointError(f"checkpoint tensor {path} is missing")
        out[name] = ad.load_tensor(path)
    return out


def save_encoder(directory: str | Path, encoder: Encoder) -> None:
    directory = Path(directory)
    save_tensors(directory, encoder.state_arrays())
    (directory / "config.txt").write_text(format_flat(encoder.config.to_flat()))


def load_encoder(directory: str | Path) -> Encoder:
    directory = Path(directory)
    cfg_path = directory / "config.txt"
    if not cfg_path.is_file():
        raise CheckpointError(f"no encoder config at {cfg_path}")
    config = EncoderConfig.from_flat(parse_flat(cfg_path.read_text(), source=str(cfg_path)))
    encoder = build_encoder(config, seed=0)
    encoder.load_arrays(load_tensors(directory, encoder.params))
    return encoder
