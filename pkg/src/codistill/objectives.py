"""Masked prediction and regression losses, EMA teacher updates, learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import TargetRepresentation
from .errors import ConfigError, DimensionError
from .masking import MaskPlan

PAPER_ALPHA = 0.5
PAPER_PEAK_LR = 5e-4
LR_KINDS = ("warmup_linear", "tri_stage")
_LR_ALIASES = {"A": "warmup_linear", "B": "tri_stage"}


class MaskedLoss(NamedTuple):
    value: Tensor
    count: int  # number of masked positions contributing

    @property
    def empty(self) -> bool:
        return self.count == 0


def _mask_index(mask, lead_shape) -> tuple[np.ndarray, ...]:
    if isinstance(mask, MaskPlan):
        mask = mask.mask
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(lead_shape):
        raise DimensionError(f"mask shape {mask.shape} does not match positions {tuple(lead_shape)}")
    return np.nonzero(mask)


def _zero_like(x: Tensor) -> Tensor:
    # keeps the graph connected so every parameter receives an explicit zero gradient
    return x.sum() * 0.0


def mlm_loss(logits: Tensor, codes, mask) -> MaskedLoss:
    """Mean over masked positions of -log softmax(logits_t)[c_t]."""
    codes = np.asarray(getattr(codes, "codes", codes), dtype=np.int64)
    if logits.shape[:-1] != codes.shape:
        raise DimensionError(f"logits {logits.shape} do not match codes {codes.shape}")
    idx = _mask_index(mask, codes.shape)
    n = int(idx[0].size)
    if n == 0:
        return MaskedLoss(_zero_like(logits), 0)
    logp = ad.log_softmax(ad.take(logits, idx), axis=-1)
    picked = ad.take(logp, (np.arange(n), codes[idx]))
    return MaskedLoss(picked.mean() * -1.0, n)


def regression_loss(pred: Tensor, target, mask) -> MaskedLoss:
    """(1/2) * mean over masked positions and channels of (pred - target)^2."""
    target = target.R if isinstance(target, TargetRepresentation) else np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} does not match target {target.shape}")
    idx = _mask_index(mask, pred.shape[:-1])
    n = int(idx[0].size)
    if n == 0:
        return MaskedLoss(_zero_like(pred), 0)
    diff = ad.take(pred, idx) - target[idx]
    return MaskedLoss((diff * diff).mean() * 0.5, n)


def combine_losses(loss_code, loss_speech, alpha: float = PAPER_ALPHA):
    """alpha * L_code + (1 - alpha) * L_speech."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}", key="alpha")
    if isinstance(loss_code, Tensor) or isinstance(loss_speech, Tensor):
        return ad.add(ad.mul(loss_code, alpha), ad.mul(loss_speech, 1.0 - alpha))
    return alpha * loss_code + (1.0 - alpha) * loss_speech


# --- EMA teacher -----------------------------------------------------------


def tau_schedule(step: int, tau_start: float, tau_end: float, anneal_steps: int) -> float:
    """Linear from tau_start to tau_end over anneal_steps, then constant."""
    if anneal_steps <= 0 or step >= anneal_steps:
        return tau_end
    return tau_start + (tau_end - tau_start) * step / anneal_steps


@dataclass
class EmaState:
    teacher: dict[str, np.ndarray]
    tau_start: float = 0.999
    tau_end: float = 0.9999
    anneal_steps: int = 0
    counter: int = 0

    def __post_init__(self):
        if not 0.0 <= self.tau_start <= self.tau_end <= 1.0:
            raise ConfigError(
                f"need 0 <= tau_start ({self.tau_start}) <= tau_end ({self.tau_end}) <= 1", key="ema_tau_start"
            )

    @classmethod
    def from_params(cls, params: Mapping[str, Tensor], **kw) -> "EmaState":
        return cls({k: np.array(p.data, copy=True) for k, p in params.items()}, **kw)

    @property
    def tau(self) -> float:
        return tau_schedule(self.counter, self.tau_start, self.tau_end, self.anneal_steps)


def ema_update(state: EmaState, student: Mapping[str, Tensor | np.ndarray]) -> EmaState:
    """theta_t <- tau * theta_t + (1 - tau) * theta_s, tau from the schedule."""
    tau = state.tau
    for name, t in state.teacher.items():
        s = student[name]
        s = s.data if isinstance(s, Tensor) else np.asarray(s)
        if s.shape != t.shape:
            raise DimensionError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            t[...] = s
        else:
            t *= tau
            t += (1.0 - tau) * s
    state.counter += 1
    return state


# --- learning rate ---------------------------------------------------------


def lr_schedule(
    step: float,
    total: int,
    kind: str = "tri_stage",
    peak: float = PAPER_PEAK_LR,
    warmup_frac: float | None = None,
    hold_frac: float | None = None,
) -> float:
    """Piecewise-linear learning rate; both kinds warm up from 0 and decay to 0 at ``total``.

    ``warmup_linear``: warm up over 8% of updates, then linear decay.
    ``tri_stage``: warm up 3%, hold 90%, linear decay over the rest.
    """
    kind = _LR_ALIASES.get(kind, kind)
    if kind not in LR_KINDS:
        raise ConfigError(f"unknown lr schedule kind {kind!r}", key="lr_schedule")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if kind == "warmup_linear":
        warm = total * (0.08 if warmup_frac is None else warmup_frac)
        hold_end = warm
    else:
        warm = total * (0.03 if warmup_frac is None else warmup_frac)
        hold_end = warm + total * (0.90 if hold_frac is None else hold_frac)
    if step < warm:
        return peak * step / warm
    if step <= hold_end:
        return peak
    return peak * (total - step) / (total - hold_end)


@dataclass
class LossReport:
    alpha: float | None = None
    masked: int = 0
    L_mlm: float | None = None
    L_sd: float | None = None
    L_code: float | None = None
    L_speech: float | None = None
    L_CoBERT: float | None = None

    def items(self):
        for name in ("L_mlm", "L_sd", "L_code", "L_speech", "L_CoBERT"):
            value = getattr(self, name)
            if value is not None:
                yield name, value


class MetricsLog:
    """Append-only ``step<TAB>name<TAB>value`` text log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def append(self, step: int, name: str, value: float) -> None:
        with open(self.path, "a") as fh:
            fh.write(f"{step}\t{name}\t{float(value):.17g}\n")

    def write_many(self, step: int, values: Mapping[str, float]) -> None:
        with open(self.path, "a") as fh:
            for name, value in values.items():
                fh.write(f"{step}\t{name}\t{float(value):.17g}\n")

    def read(self) -> list[tuple[int, str, float]]:
        if not self.path.exists():
            return []
        rows = []
        for line in self.path.read_text().splitlines():
            step, name, value = line.split("\t")
            rows.append((int(step), name, float(value)))
        return rows
