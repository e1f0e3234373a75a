"""Span masking: independent span starts with probability p, fixed span length."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ConfigError
from .quantizer import CodeSequence


@dataclass(frozen=True)
class MaskPlan:
    T: int
    p: float
    span: int
    indices: np.ndarray  # sorted, unique
    seed: object = None

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.T, dtype=bool)
        m[self.indices] = True
        return m

    @property
    def empty(self) -> bool:
        return self.indices.size == 0

    def __len__(self) -> int:
        return int(self.indices.size)


def span_mask(T: int, p: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean length-T mask; each position starts a span with probability p."""
    starts = np.flatnonzero(rng.random(T) < p)
    mask = np.zeros(T, dtype=bool)
    for offset in range(span):
        pos = starts + offset
        mask[pos[pos < T]] = True
    return mask


def sample_mask(T: int, p: float, span: int, seed=0) -> MaskPlan:
    if T < 1:
        raise ConfigError(f"sequence length must be >= 1, got {T}", key="T")
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"mask probability must lie in [0, 1], got {p}", key="mask_prob")
    if span < 1:
        raise ConfigError(f"mask span must be >= 1, got {span}", key="mask_span")
    mask = span_mask(T, p, span, np.random.default_rng(seed))
    return MaskPlan(T, p, span, np.flatnonzero(mask), seed)


def expected_mask_fraction(p: float, span: int) -> float:
    """Probability an interior position (t >= span-1) is covered by some span."""
    return 1.0 - (1.0 - p) ** span


def apply_mask_codes(codes: CodeSequence, plan: MaskPlan) -> CodeSequence:
    """Replace masked positions with the mask symbol M = K."""
    if plan.T != len(codes.codes):
        raise AlignmentError(f"mask plan covers {plan.T} positions, code sequence has {len(codes.codes)}")
    out = np.array(codes.codes, dtype=np.int64, copy=True)
    out[plan.indices] = codes.K
    return CodeSequence(out, codes.K, codes.frame_rate)


def apply_mask_frames(frames: np.ndarray, plan: MaskPlan, downsample: int = 1):
    """Validate a plan against frames; replacement happens inside the speech front-end.

    The plan indexes the downsampled sequence, so its length must be
    ``ceil(T / downsample)``.  Frames are returned untouched.
    """
    expected = math.ceil(len(frames) / downsample)
    if plan.T != expected:
        raise AlignmentError(
            f"mask plan covers {plan.T} positions, frames give {expected} after downsampling by {downsample}"
        )
    return frames, plan
