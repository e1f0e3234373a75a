"""Training procedures: code teachers, the speech MLM model, cross-modal distillation.

Every random draw is keyed by ``(seed, stream, step, ...)`` so a run can be
resumed from any checkpoint and reproduce the uninterrupted run bit for bit,
and so switching a loss branch on or off never perturbs the other streams.
"""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .config import Key, format_flat, parse_flat, write_flat
from .encoder import (
    Encoder,
    EncoderConfig,
    Head,
    build_encoder,
    embed_codes,
    embed_speech,
    encode,
    init_head,
    load_tensors,
    save_encoder,
    save_tensors,
    load_encoder,
    target_representation,
)
from .errors import AlignmentError, CheckpointError, ConfigError, ManifestError
from .masking import span_mask
from .metrics import QualityReport, joint_counts, phone_probe, quality_report
from .objectives import (
    LR_KINDS,
    PAPER_ALPHA,
    PAPER_PEAK_LR,
    EmaState,
    LossReport,
    MetricsLog,
    combine_losses,
    ema_update,
    lr_schedule,
    mlm_loss,
    regression_loss,
)
from .quantizer import Codebook, assign_codes, kmeans_fit, save_codebook
from .storage import write_ints

log = logging.getLogger(__name__)

# RNG stream tags
_INIT, _HEAD, _BATCH, _CROP, _MASK, _DROPOUT = range(1, 7)

OBJECTIVES = ("mlm", "self_distill", "cobert")

# Paper settings per training mode.
MODES = {
    "teacher1": dict(objective="mlm", frontend="code", mask_prob=0.08, lr_schedule="warmup_linear"),
    "teacher2": dict(objective="self_distill", frontend="code", mask_prob=0.065, lr_schedule="tri_stage"),
    "hubert-like": dict(objective="mlm", frontend="speech", mask_prob=0.08, lr_schedule="warmup_linear"),
    "cobert": dict(objective="cobert", frontend="speech", mask_prob=0.065, lr_schedule="tri_stage"),
}


@dataclass
class TrainConfig:
    objective: str = "mlm"
    frontend: str = "code"
    num_layers: int = 4
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    downsample: int = 1
    max_positions: int = 512
    pos_init: str = "sinusoid"
    dtype: str = "float64"
    mask_prob: float = 0.065
    mask_span: int = 10
    top_layers: int = 0  # 0 -> num_layers // 2
    alpha: float = PAPER_ALPHA
    self_distill: bool = True
    code_branch: bool = True
    total_updates: int = 2000
    batch_frames: int = 1600
    max_crop: int = 0  # 0 -> no extra cap beyond the batch minimum
    lr_schedule: str = "tri_stage"
    peak_lr: float = PAPER_PEAK_LR
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-6
    ema_tau_start: float = 0.999
    ema_tau_end: float = 0.9999
    ema_anneal_frac: float = 0.3
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    teacher_checkpoint: str = ""

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ConfigError(f"unknown training mode {mode!r}; choose from {sorted(MODES)}", key="mode")
        return cls(**{**MODES[mode], **overrides})

    @property
    def resolved_top_layers(self) -> int:
        return self.top_layers or max(1, self.num_layers // 2)

    @property
    def effective_alpha(self) -> float:
        if not self.self_distill:
            return 1.0
        if not self.code_branch:
            return 0.0
        return self.alpha

    def validate(self) -> None:
        def bad(key, why):
            raise ConfigError(f"{key}: {why}", key=key)

        if self.objective not in OBJECTIVES:
            bad("objective", f"must be one of {OBJECTIVES}")
        if self.frontend not in ("code", "speech"):
            bad("frontend", "must be code or speech")
        if self.objective == "cobert" and self.frontend != "speech":
            bad("frontend", "cross-modal distillation trains a speech-input student")
        if not 0.0 <= self.mask_prob <= 1.0:
            bad("mask_prob", f"must lie in [0, 1], got {self.mask_prob}")
        if self.mask_span < 1:
            bad("mask_span", "must be >= 1")
        if not 0 <= self.top_layers <= self.num_layers:
            bad("top_layers", f"must lie in [1, num_layers={self.num_layers}] (0 = half)")
        if not 0.0 <= self.alpha <= 1.0:
            bad("alpha", f"must lie in [0, 1], got {self.alpha}")
        if self.objective == "cobert" and not (self.self_distill or self.code_branch):
            bad("code_branch", "at least one of code_branch / self_distill must be enabled")
        if self.total_updates < 1:
            bad("total_updates", "must be >= 1")
        if self.batch_frames < 1:
            bad("batch_frames", "must be >= 1")
        if self.lr_schedule not in LR_KINDS:
            bad("lr_schedule", f"must be one of {LR_KINDS}")
        if not 0.0 <= self.ema_tau_start <= self.ema_tau_end <= 1.0:
            bad("ema_tau_start", "need 0 <= ema_tau_start <= ema_tau_end <= 1")
        self.encoder_config(vocab_size=2, input_dim=1).validate()

    def encoder_config(self, vocab_size: int, input_dim: int) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            model_dim=self.model_dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            dropout=self.dropout,
            frontend=self.frontend,
            vocab_size=vocab_size,
            input_dim=input_dim,
            downsample=self.downsample,
            max_positions=self.max_positions,
            pos_init=self.pos_init,
            dtype=self.dtype,
        )


_DOCS = {
    "objective": "mlm | self_distill | cobert (set by --mode)",
    "frontend": "student front-end: code | speech (set by --mode)",
    "mask_prob": "probability a position starts a mask span",
    "mask_span": "mask span length",
    "top_layers": "number of top layers averaged into targets (0 = num_layers // 2)",
    "alpha": "weight of the code-teacher loss; 1 - alpha weights self-distillation",
    "self_distill": "cobert: add the EMA self-distillation branch",
    "code_branch": "cobert: keep the code-teacher branch",
    "lr_schedule": "warmup_linear (8% warmup, linear decay) | tri_stage (3% / 90% / 7%)",
    "teacher_checkpoint": "cobert: frozen teacher checkpoint directory",
    "batch_frames": "frame budget per batch (utterances cropped to the batch minimum)",
    "max_crop": "upper bound on the per-batch crop length (0 = none)",
    "ema_anneal_frac": "fraction of updates over which tau moves from start to end",
    "pos_init": "sinusoid | normal start for the learned position table",
    "num_layers": "transformer blocks",
    "model_dim": "residual width",
    "num_heads": "attention heads (must divide model_dim)",
    "ffn_dim": "feed-forward hidden width",
    "dropout": "dropout rate inside blocks",
    "downsample": "speech front-end stride S (frames per encoder step)",
    "max_positions": "length of the learned position table",
    "dtype": "float64 | float32",
    "total_updates": "optimizer steps",
    "peak_lr": "learning rate at the top of the schedule",
    "adam_beta1": "Adam first-moment decay",
    "adam_beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "ema_tau_start": "EMA decay at step 0",
    "ema_tau_end": "EMA decay after annealing",
    "seed": "seed for initialization, batching, masks and dropout",
    "log_every": "metrics.log row interval in updates",
    "checkpoint_every": "checkpoint interval in updates (0 = final only)",
}

TRAIN_KEYS = [
    Key(f.name, {"int": int, "float": float, "bool": bool, "str": str}[f.type], f.default, _DOCS.get(f.name, ""))
    for f in fields(TrainConfig)
]


# --- networks and checkpoints ------------------------------------------------


@dataclass
class Network:
    encoder: Encoder
    heads: dict[str, Head] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        for name, head in self.heads.items():
            out[f"head.{name}.weight"] = head.weight
            out[f"head.{name}.bias"] = head.bias
        return out

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def freeze(self) -> "Network":
        for p in self.parameters().values():
            p.requires_grad = False
            p.grad = None
        return self


def save_network(directory: str | Path, net: Network) -> None:
    directory = Path(directory)
    save_encoder(directory / "encoder", net.encoder)
    arrays = {}
    for name, head in net.heads.items():
        arrays[f"{name}.weight"] = head.weight.data
        arrays[f"{name}.bias"] = head.bias.data
    save_tensors(directory / "heads", arrays)
    meta = dict(net.meta)
    meta["heads"] = ",".join(net.heads)
    write_flat(directory / "meta.txt", meta)


def load_network(directory: str | Path, trainable: bool = False) -> Network:
    directory = resolve_checkpoint(directory)
    meta_path = directory / "network" / "meta.txt"
    if not meta_path.is_file():
        raise CheckpointError(f"no network checkpoint at {directory}")
    meta = parse_flat(meta_path.read_text(), source=str(meta_path))
    encoder = load_encoder(directory / "network" / "encoder")
    heads = {}
    names = [h for h in meta.pop("heads", "").split(",") if h]
    arrays = load_tensors(directory / "network" / "heads", [f"{h}.{p}" for h in names for p in ("weight", "bias")])
    for h in names:
        heads[h] = Head(Tensor(arrays[f"{h}.weight"]), Tensor(arrays[f"{h}.bias"]))
    net = Network(encoder, heads, meta)
    if not trainable:
        net.freeze()
    return net


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a step directory, a ``checkpoints`` directory, or a run directory."""
    path = Path(path)
    if (path / "network").is_dir():
        return path
    for base in (path / "checkpoints", path):
        if base.is_dir():
            steps = sorted(
                (int(p.name.split("_", 1)[1]), p) for p in base.glob("step_*") if p.name.split("_", 1)[1].isdigit()
            )
            if steps:
                return steps[-1][1]
    raise CheckpointError(f"no checkpoint found at {path}")


# --- data ------------------------------------------------------------------------


@dataclass
class Example:
    utt_id: str
    frames: np.ndarray | None = None
    codes: np.ndarray | None = None
    phones: np.ndarray | None = None


@dataclass(frozen=True)
class AlignmentMap:
    speech_frames: int
    code_frames: int
    downsample: int = 1

    @property
    def length(self) -> int:
        """Common length after truncating both streams to the shorter one."""
        down = math.ceil(self.speech_frames / self.downsample)
        if abs(down - self.code_frames) > 1:
            raise AlignmentError(
                f"{self.speech_frames} frames (downsampled to {down}) vs {self.code_frames} codes"
            )
        return min(down, self.code_frames)


def aligned_length(ex: Example, uses_frames: bool, uses_codes: bool, downsample: int) -> int:
    if uses_frames and ex.frames is None:
        raise ManifestError(f"{ex.utt_id}: frames required")
    if uses_codes and ex.codes is None:
        raise ManifestError(f"{ex.utt_id}: codes required")
    if uses_frames and uses_codes:
        try:
            return AlignmentMap(len(ex.frames), len(ex.codes), downsample).length
        except AlignmentError as exc:
            raise AlignmentError(str(exc), utt_id=ex.utt_id) from None
    if uses_frames:
        return math.ceil(len(ex.frames) / downsample)
    return len(ex.codes)


def make_batches(lengths: Sequence[int], batch_frames: int) -> list[list[int]]:
    """Bucket by length: consecutive (sorted) utterances while count * shortest <= budget."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    batches, cur = [], []
    for i in order:
        if cur and (len(cur) + 1) * lengths[cur[0]] > batch_frames:
            batches.append(cur)
            cur = []
        cur.append(int(i))
    if cur:
        batches.append(cur)
    return batches


@dataclass
class Batch:
    utt_ids: list[str]
    codes: np.ndarray | None  # B x L
    frames: np.ndarray | None  # B x L*S x F
    mask: np.ndarray  # B x L

    @property
    def length(self) -> int:
        return self.mask.shape[1]


class BatchSampler:
    def __init__(self, examples, config: TrainConfig, uses_frames: bool, uses_codes: bool):
        self.examples = list(examples)
        if not self.examples:
            raise ManifestError("no training examples")
        self.config = config
        self.uses_frames = uses_frames
        self.uses_codes = uses_codes
        S = config.downsample
        self.lengths = [aligned_length(ex, uses_frames, uses_codes, S) for ex in self.examples]
        self.batches = make_batches(self.lengths, config.batch_frames)

    def batch(self, step: int) -> Batch:
        cfg = self.config
        nb = len(self.batches)
        epoch, pos = divmod(step, nb)
        order = np.random.default_rng([cfg.seed, _BATCH, epoch]).permutation(nb)
        members = self.batches[order[pos]]
        L = min(self.lengths[i] for i in members)
        L = min(L, cfg.max_positions)
        if cfg.max_crop:
            L = min(L, cfg.max_crop)
        rng = np.random.default_rng([cfg.seed, _CROP, step])
        S = cfg.downsample
        codes, frames = [], []
        for i in members:
            ex = self.examples[i]
            off = int(rng.integers(self.lengths[i] - L + 1))
            if self.uses_codes:
                codes.append(ex.codes[off : off + L])
            if self.uses_frames:
                seg = ex.frames[off * S : (off + L) * S]
                if len(seg) < L * S:
                    seg = np.pad(seg, ((0, L * S - len(seg)), (0, 0)))
                frames.append(seg)
        mask = np.stack(
            [span_mask(L, cfg.mask_prob, cfg.mask_span, np.random.default_rng([cfg.seed, _MASK, step, b]))
             for b in range(len(members))]
        )
        return Batch(
            [self.examples[i].utt_id for i in members],
            np.stack(codes) if codes else None,
            np.stack(frames) if frames else None,
            mask,
        )


# --- forward helpers ---------------------------------------------------------------


def network_inputs(net: Network | Encoder, codes=None, frames=None, mask=None) -> Tensor:
    enc = net.encoder if isinstance(net, Network) else net
    if enc.config.frontend == "code":
        if codes is None:
            raise ManifestError("a code-input network needs code sequences")
        ids = np.array(codes, dtype=np.int64, copy=True)
        if mask is not None:
            ids[np.asarray(mask, dtype=bool)] = enc.config.mask_symbol
        return embed_codes(enc, ids)
    return embed_speech(enc, frames, mask)


def teacher_targets(net: Network | Encoder, L: int, codes=None, frames=None):
    enc = net.encoder if isinstance(net, Network) else net
    with ad.no_grad():
        stack = encode(enc, network_inputs(enc, codes=codes, frames=frames))
    return target_representation(stack, L)


# --- trainer ---------------------------------------------------------------------


class Trainer:
    """One training run for any of the three objectives."""

    def __init__(
        self,
        config: TrainConfig,
        examples: Sequence[Example],
        num_codes: int,
        teacher: Network | None = None,
        out_dir: str | Path | None = None,
    ):
        config.validate()
        self.config = config
        self.num_codes = num_codes
        self.out_dir = Path(out_dir) if out_dir is not None else None
        obj = config.objective
        uses_frames = config.frontend == "speech"
        uses_codes = obj == "mlm" or config.frontend == "code" or (
            obj == "cobert" and config.code_branch and teacher is not None and teacher.config.frontend == "code"
        )
        if obj == "cobert" and config.code_branch and teacher is None:
            raise CheckpointError("cross-modal distillation needs a frozen teacher checkpoint")
        self.sampler = BatchSampler(examples, config, uses_frames, uses_codes)
        input_dim = 1
        if uses_frames:
            input_dim = int(np.asarray(self.sampler.examples[0].frames).shape[1])
        enc_cfg = config.encoder_config(vocab_size=num_codes + 1, input_dim=input_dim)
        with ad.default_dtype(config.dtype):
            encoder = build_encoder(enc_cfg, seed=[config.seed, _INIT])
            heads = {}
            d = config.model_dim
            if obj == "mlm":
                heads["mlm"] = init_head(d, num_codes, [config.seed, _HEAD, 0], dtype=config.dtype)
            elif obj == "self_distill":
                heads["regression"] = init_head(d, d, [config.seed, _HEAD, 1], dtype=config.dtype)
            else:
                if config.code_branch:
                    heads["code"] = init_head(d, teacher.config.model_dim, [config.seed, _HEAD, 2], dtype=config.dtype)
                if config.self_distill:
                    heads["speech"] = init_head(d, d, [config.seed, _HEAD, 3], dtype=config.dtype)
        self.network = Network(
            encoder,
            heads,
            {"objective": obj, "num_codes": num_codes, "top_layers": config.resolved_top_layers},
        )
        self.teacher = teacher.freeze() if teacher is not None else None
        if self.teacher is not None:
            if config.resolved_top_layers > self.teacher.config.num_layers:
                raise ConfigError("top_layers exceeds the teacher's depth", key="top_layers")
        self.ema: EmaState | None = None
        if obj == "self_distill" or (obj == "cobert" and config.self_distill):
            self.ema = EmaState.from_params(
                encoder.params,
                tau_start=config.ema_tau_start,
                tau_end=config.ema_tau_end,
                anneal_steps=int(round(config.ema_anneal_frac * config.total_updates)),
            )
        self.adam = AdamState(lr=config.peak_lr, beta1=config.adam_beta1, beta2=config.adam_beta2, eps=config.adam_eps)
        self.step = 0

    # -- pieces -------------------------------------------------------------

    def ema_encoder(self) -> Encoder:
        return Encoder(self.network.encoder.config, {k: Tensor(v) for k, v in self.ema.teacher.items()})

    def loss(self, batch: Batch, step: int) -> tuple[Tensor, LossReport]:
        cfg = self.config
        net = self.network
        L = cfg.resolved_top_layers
        dropout_rng = np.random.default_rng([cfg.seed, _DROPOUT, step]) if cfg.dropout > 0 else None
        states = network_inputs(net, codes=batch.codes, frames=batch.frames, mask=batch.mask)
        stack = encode(net.encoder, states, dropout_rng)
        report = LossReport(masked=int(batch.mask.sum()))
        if cfg.objective == "mlm":
            loss = mlm_loss(net.heads["mlm"](stack.final), batch.codes, batch.mask).value
            report.L_mlm = loss.item()
            return loss, report
        if cfg.objective == "self_distill":
            target = teacher_targets(self.ema_encoder(), L, codes=batch.codes)
            loss = regression_loss(net.heads["regression"](stack.final), target, batch.mask).value
            report.L_sd = loss.item()
            return loss, report

        branches = {}
        if cfg.code_branch:
            target = teacher_targets(self.teacher, L, codes=batch.codes, frames=batch.frames)
            branches["code"] = regression_loss(net.heads["code"](stack.final), target, batch.mask).value
            report.L_code = branches["code"].item()
        if cfg.self_distill:
            target = teacher_targets(self.ema_encoder(), L, frames=batch.frames)
            branches["speech"] = regression_loss(net.heads["speech"](stack.final), target, batch.mask).value
            report.L_speech = branches["speech"].item()
        if len(branches) == 2:
            report.alpha = cfg.alpha
            loss = combine_losses(branches["code"], branches["speech"], cfg.alpha)
        else:
            (loss,) = branches.values()
            report.alpha = 1.0 if "code" in branches else 0.0
        report.L_CoBERT = loss.item()
        return loss, report

    def gradients(self, step: int | None = None) -> tuple[dict[str, np.ndarray | None], LossReport]:
        """Loss and gradients for one step without updating anything."""
        step = self.step if step is None else step
        params = self.network.parameters()
        for p in params.values():
            p.grad = None
        with ad.default_dtype(self.config.dtype):
            loss, report = self.loss(self.sampler.batch(step), step)
            loss.backward()
        return {k: p.grad for k, p in params.items()}, report

    def train_step(self) -> LossReport:
        cfg = self.config
        grads, report = self.gradients(self.step)
        lr = lr_schedule(self.step + 1, cfg.total_updates, cfg.lr_schedule, cfg.peak_lr)
        adam_step(self.network.parameters(), grads, self.adam, lr=lr)
        if self.ema is not None:
            ema_update(self.ema, self.network.encoder.params)
        self.step += 1
        report.lr = lr
        return report

    # -- loop --------------------------------------------------------------

    def run(self, resume_from: str | Path | None = None) -> Network:
        cfg = self.config
        metrics = None
        if resume_from is not None:
            self.load_state(resume_from)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            snapshot = asdict(cfg)
            snapshot["top_layers"] = cfg.resolved_top_layers
            write_flat(self.out_dir / "config.snapshot", snapshot)
            metrics = MetricsLog(self.out_dir / "metrics.log")
            _truncate_log(metrics, self.step)
        while self.step < cfg.total_updates:
            report = self.train_step()
            done = self.step
            if metrics is not None and (done % cfg.log_every == 0 or done == cfg.total_updates):
                row = {"loss": _main_loss(report)}
                row.update(dict(report.items()))
                row["lr"] = report.lr
                metrics.write_many(done, row)
            if done % 100 == 0:
                log.info("step %d loss %.5f", done, _main_loss(report))
            if self.out_dir is not None and (
                done == cfg.total_updates or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0)
            ):
                self.save_state(self.out_dir / "checkpoints" / f"step_{done}")
        return self.network

    def save_state(self, directory: str | Path) -> Path:
        directory = Path(directory)
        if directory.exists():
            shutil.rmtree(directory)
        save_network(directory / "network", self.network)
        save_tensors(directory / "optimizer", {f"m.{k}": v for k, v in self.adam.m.items()})
        save_tensors(directory / "optimizer", {f"v.{k}": v for k, v in self.adam.v.items()})
        write_flat(directory / "optimizer" / "adam.txt", {"t": self.adam.t, "names": ",".join(self.adam.m)})
        if self.ema is not None:
            save_tensors(directory / "ema", self.ema.teacher)
            write_flat(directory / "ema" / "ema.txt", {"counter": self.ema.counter})
        write_flat(directory / "state.txt", {"step": self.step})
        return directory

    def load_state(self, directory: str | Path) -> None:
        directory = resolve_checkpoint(directory)
        saved = load_network(directory, trainable=True)
        params = self.network.parameters()
        for k, p in saved.parameters().items():
            if k not in params or params[k].shape != p.shape:
                raise CheckpointError(f"checkpoint parameter {k!r} does not match this run's network")
            params[k].data = np.array(p.data, copy=True)
        adam_meta = parse_flat((directory / "optimizer" / "adam.txt").read_text())
        names = [n for n in adam_meta.get("names", "").split(",") if n]
        self.adam.t = int(adam_meta["t"])
        arrays = load_tensors(directory / "optimizer", [f"{mv}.{n}" for n in names for mv in "mv"])
        self.adam.m = {n: arrays[f"m.{n}"] for n in names}
        self.adam.v = {n: arrays[f"v.{n}"] for n in names}
        if self.ema is not None:
            self.ema.teacher = load_tensors(directory / "ema", self.ema.teacher)
            self.ema.counter = int(parse_flat((directory / "ema" / "ema.txt").read_text())["counter"])
        self.step = int(parse_flat((directory / "state.txt").read_text())["step"])


def _main_loss(report: LossReport) -> float:
    for name in ("L_CoBERT", "L_sd", "L_mlm"):
        value = getattr(report, name)
        if value is not None:
            return value
    return float("nan")


def _truncate_log(metrics: MetricsLog, step: int) -> None:
    if not metrics.path.exists():
        return
    keep = [line for line in metrics.path.read_text().splitlines(True) if int(line.split("\t", 1)[0]) <= step]
    metrics.path.write_text("".join(keep))


# --- procedures ------------------------------------------------------------------------


def train_code_teacher1(examples, num_codes: int, config: TrainConfig | None = None, out_dir=None, **kw) -> Network:
    """Masked code prediction on a code-embedding encoder."""
    config = config or TrainConfig.for_mode("teacher1", **kw)
    return Trainer(config, examples, num_codes, out_dir=out_dir).run()


def train_code_teacher2(examples, num_codes: int, config: TrainConfig | None = None, out_dir=None, **kw) -> Network:
    """Self-distillation on codes against an EMA teacher's top-L average."""
    config = config or TrainConfig.for_mode("teacher2", **kw)
    return Trainer(config, examples, num_codes, out_dir=out_dir).run()


def train_speech_mlm(examples, num_codes: int, config: TrainConfig | None = None, out_dir=None, **kw) -> Network:
    """Speech-input masked prediction of codes (the HuBERT-style model)."""
    config = config or TrainConfig.for_mode("hubert-like", **kw)
    return Trainer(config, examples, num_codes, out_dir=out_dir).run()


def distill_cobert(
    examples, teacher: Network, config: TrainConfig | None = None, out_dir=None, num_codes: int | None = None, **kw
) -> Network:
    """Distill a frozen teacher into a speech student, optionally with EMA self-distillation."""
    config = config or TrainConfig.for_mode("cobert", **kw)
    if num_codes is None:
        num_codes = int(teacher.meta.get("num_codes", 0)) or 1
    return Trainer(config, examples, num_codes, teacher=teacher, out_dir=out_dir).run()


# --- representations and probing ------------------------------------------------------


def layer_features(net: Network | Encoder, example: Example, layer="final") -> np.ndarray:
    """Frozen features of one utterance: ``layer`` is 0 (inputs), 1..N, or 'final'."""
    enc = net.encoder if isinstance(net, Network) else net
    with ad.no_grad():
        try:
            states = network_inputs(enc, codes=example.codes, frames=example.frames)
        except ManifestError as exc:
            raise ManifestError(f"{example.utt_id}: {exc}") from None
        if layer == 0:
            return states.data
        stack = encode(enc, states)
    if layer == "final":
        return stack.final.data
    if not 1 <= int(layer) <= len(stack.layers):
        raise ConfigError(f"layer {layer} outside [0, {len(stack.layers)}]", key="layer")
    return stack.layers[int(layer) - 1].data


def probe_network(net: Network | Encoder, examples: Sequence[Example], seed: int = 0, layer="final", **kw):
    feats, labels, groups = [], [], []
    for ex in examples:
        f = layer_features(net, ex, layer)
        n = min(len(f), len(ex.phones))
        feats.append(f[:n])
        labels.append(ex.phones[:n])
        groups.extend([ex.utt_id] * n)
    return phone_probe(np.concatenate(feats), np.concatenate(labels), seed=seed, groups=groups, **kw)


def fresh_student(examples: Sequence[Example], config: TrainConfig) -> Encoder:
    """Randomly initialized speech encoder with the same geometry and seed as a distillation student."""
    cfg = replace(config, frontend="speech")
    input_dim = int(np.asarray(examples[0].frames).shape[1])
    with ad.default_dtype(cfg.dtype):
        return build_encoder(cfg.encoder_config(vocab_size=2, input_dim=input_dim), seed=[cfg.seed, _INIT])


# --- bootstrap ----------------------------------------------------------------


@dataclass
class BootstrapConfig:
    K: int = 16
    layer: int = 2
    kmeans_iters: int = 100
    kmeans_tol: float = 1e-6
    kmeans_stride: int = 1
    seed: int = 0
    # small random positions: a sinusoid start makes middle layers cluster by position
    train: TrainConfig = field(default_factory=lambda: TrainConfig.for_mode("hubert-like", pos_init="normal"))


@dataclass
class BootstrapResult:
    codes1: dict[str, np.ndarray]
    codes2: dict[str, np.ndarray]
    codebook1: Codebook
    codebook2: Codebook
    model: Network
    quality1: QualityReport | None = None
    quality2: QualityReport | None = None


def _fit_and_assign(feats: dict[str, np.ndarray], K: int, cfg: BootstrapConfig, source: str):
    pooled = np.concatenate(list(feats.values()))
    codebook = kmeans_fit(pooled, K, cfg.kmeans_iters, cfg.kmeans_tol, cfg.seed, cfg.kmeans_stride, source=source)
    codes = {u: assign_codes(codebook, f).codes for u, f in feats.items()}
    return codebook, codes


def bootstrap_codes(examples: Sequence[Example], config: BootstrapConfig | None = None, out_dir=None) -> BootstrapResult:
    """Two clustering iterations: k-means on input features, a speech MLM on those
    codes, then k-means on one intermediate layer of that model."""
    cfg = config or BootstrapConfig()
    out_dir = Path(out_dir) if out_dir is not None else None
    frames = {ex.utt_id: np.asarray(ex.frames) for ex in examples}
    codebook1, codes1 = _fit_and_assign(frames, cfg.K, cfg, "mfcc")
    train_examples = [replace(ex, codes=codes1[ex.utt_id]) for ex in examples]
    model = Trainer(
        cfg.train, train_examples, cfg.K, out_dir=None if out_dir is None else out_dir / "hubert_it1"
    ).run()
    feats = {ex.utt_id: layer_features(model, ex, cfg.layer) for ex in train_examples}
    codebook2, codes2 = _fit_and_assign(feats, cfg.K, cfg, f"model:{cfg.layer}")

    result = BootstrapResult(codes1, codes2, codebook1, codebook2, model)
    if all(ex.phones is not None for ex in examples):
        phones = [ex.phones for ex in examples]
        ids = [ex.utt_id for ex in examples]
        result.quality1 = quality_report(
            joint_counts([codes1[u] for u in ids], phones, utt_ids=ids), model="kmeans", feature="mfcc", K=cfg.K
        )
        result.quality2 = quality_report(
            joint_counts([codes2[u] for u in ids], phones, utt_ids=ids),
            model="hubert-like-it1",
            feature=f"L{cfg.layer}",
            K=cfg.K,
        )
    if out_dir is not None:
        (out_dir / "codebooks").mkdir(parents=True, exist_ok=True)
        save_codebook(out_dir / "codebooks" / "it1.tnsr", codebook1)
        save_codebook(out_dir / "codebooks" / "it2.tnsr", codebook2)
        for tag, codes in (("it1", codes1), ("it2", codes2)):
            (out_dir / "codes" / tag).mkdir(parents=True, exist_ok=True)
            for u, c in codes.items():
                write_ints(out_dir / "codes" / tag / f"{u}.txt", c)
    return result


# --- teacher ablation -------------------------------------------------------------------


@dataclass
class AblationRow:
    teacher: str
    self_distill: bool
    probe_accuracy: float
    final_losses: dict

    HEADER = ("teacher", "self_distill", "probe_accuracy", "L_code", "L_speech", "L_CoBERT")

    def tsv_row(self) -> str:
        def fmt(name):
            v = self.final_losses.get(name)
            return "" if v is None else f"{v:.6f}"

        return "\t".join(
            [self.teacher, "yes" if self.self_distill else "no", f"{self.probe_accuracy:.4f}"]
            + [fmt(n) for n in ("L_code", "L_speech", "L_CoBERT")]
        )


def ablation_matrix(
    examples: Sequence[Example],
    teachers: dict[str, Network],
    config: TrainConfig | None = None,
    probe_seed: int = 0,
    out_dir=None,
) -> list[AblationRow]:
    """Distill every teacher with and without the self-distillation branch, same seeds and budget."""
    base = config or TrainConfig.for_mode("cobert")
    rows = []
    for self_distill in (False, True):
        for name, teacher in teachers.items():
            cfg = replace(base, self_distill=self_distill, code_branch=True)
            cell_dir = None if out_dir is None else Path(out_dir) / f"{name}_{'sd' if self_distill else 'nosd'}"
            trainer = Trainer(cfg, examples, int(teacher.meta.get("num_codes", 1)), teacher=teacher, out_dir=cell_dir)
            student = trainer.run()
            grads, report = trainer.gradients(cfg.total_updates - 1)
            acc = probe_network(student, examples, seed=probe_seed).accuracy
            rows.append(AblationRow(name, self_distill, acc, dict(report.items())))
    return rows
