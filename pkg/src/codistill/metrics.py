"""Clustering quality of codes against frame-level phone labels, and a linear phone probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor, adam_step
from .errors import AlignmentError, DataError, UndefinedMetricError


@dataclass
class JointCounts:
    counts: np.ndarray  # P x K, rows phones, columns codes

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def joint(self) -> np.ndarray:
        total = self.total
        if total <= 0:
            raise UndefinedMetricError("joint counts are empty")
        return self.counts / total


@dataclass
class QualityReport:
    phone_purity: float
    cluster_purity: float
    pnmi: float
    model: str = ""
    feature: str = ""
    K: int | None = None
    corpus: str = ""

    HEADER = ("model", "feature", "phone purity", "cluster purity", "PNMI")

    def tsv_row(self) -> str:
        return "\t".join(
            [self.model, self.feature, f"{self.phone_purity:.3f}", f"{self.cluster_purity:.3f}", f"{self.pnmi:.3f}"]
        )


def joint_counts(codes, phones, num_phones: int | None = None, num_codes: int | None = None, utt_ids=None) -> JointCounts:
    """Co-occurrence counts over all frames.

    ``codes`` and ``phones`` are per-utterance sequences (or a single pair of
    sequences).  Lengths that differ by one frame are truncated to the
    shorter; larger mismatches raise :class:`AlignmentError`.
    """
    if len(codes) and np.ndim(codes[0]) == 0:
        codes, phones = [codes], [phones]
    if len(codes) != len(phones):
        raise AlignmentError(f"{len(codes)} code sequences vs {len(phones)} phone sequences")
    cs, ys = [], []
    for i, (c, y) in enumerate(zip(codes, phones)):
        c = np.asarray(c, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        if abs(len(c) - len(y)) > 1:
            uid = utt_ids[i] if utt_ids is not None else f"utterance {i}"
            raise AlignmentError(f"{len(c)} codes vs {len(y)} phones", utt_id=uid)
        n = min(len(c), len(y))
        cs.append(c[:n])
        ys.append(y[:n])
    c = np.concatenate(cs) if cs else np.zeros(0, dtype=np.int64)
    y = np.concatenate(ys) if ys else np.zeros(0, dtype=np.int64)
    P = max(num_phones or 0, int(y.max()) + 1 if y.size else 0)
    K = max(num_codes or 0, int(c.max()) + 1 if c.size else 0)
    counts = np.zeros((P, K), dtype=np.int64)
    np.add.at(counts, (y, c), 1)
    return JointCounts(counts)


def _joint(counts) -> np.ndarray:
    return counts.joint if isinstance(counts, JointCounts) else JointCounts(np.asarray(counts)).joint


def phone_purity(counts) -> float:
    """sum_c max_y p(y, c): accuracy of predicting the phone from the code."""
    return float(_joint(counts).max(axis=0).sum())


def cluster_purity(counts) -> float:
    """sum_y max_c p(y, c): accuracy of predicting the code from the phone."""
    return float(_joint(counts).max(axis=1).sum())


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def pnmi(counts) -> float:
    """Phone-normalized mutual information I(phone; code) / H(phone)."""
    pyc = _joint(counts)
    py = pyc.sum(axis=1)
    pc = pyc.sum(axis=0)
    h_y = _entropy(py)
    if h_y <= 0:
        raise UndefinedMetricError("PNMI is undefined for a single-phone corpus (H(phone) = 0)")
    nz = pyc > 0
    outer = np.outer(py, pc)
    mi = float((pyc[nz] * np.log(pyc[nz] / outer[nz])).sum())
    return min(max(mi / h_y, 0.0), 1.0)


def quality_report(counts, **provenance) -> QualityReport:
    return QualityReport(phone_purity(counts), cluster_purity(counts), pnmi(counts), **provenance)


# --- phone probe -----------------------------------------------------------


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    num_train: int
    num_test: int


def _split(n: int, groups, test_frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    if groups is None:
        perm = rng.permutation(n)
        n_test = max(1, int(round(n * test_frac)))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    if len(uniq) < 2:
        raise DataError("a grouped probe split needs at least two groups")
    perm = rng.permutation(uniq)
    n_test = min(len(uniq) - 1, max(1, int(round(len(uniq) * test_frac))))
    test = np.isin(groups, perm[:n_test])
    return np.flatnonzero(~test), np.flatnonzero(test)


def phone_probe(
    representations,
    phones,
    seed: int = 0,
    groups=None,
    test_frac: float = 0.2,
    steps: int = 300,
    lr: float = 0.05,
) -> ProbeResult:
    """Multinomial logistic regression on frozen features, scored on a held-out split.

    Features are standardized with training-split statistics; the classifier
    is trained full-batch with Adam.  ``groups`` (e.g. utterance ids) keeps
    whole groups on one side of the split.
    """
    x = np.asarray(representations, dtype=np.float64)
    y = np.asarray(phones, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise AlignmentError(f"{len(x)} representation rows vs {len(y)} phone labels")
    P = int(y.max()) + 1
    if len(np.unique(y)) < 2:
        raise DataError("phone probe needs at least two distinct phones")
    rng = np.random.default_rng(seed)
    train, test = _split(len(x), groups, test_frac, rng)
    if len(train) == 0 or len(test) == 0:
        raise DataError("degenerate probe split")
    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0)
    sd[sd < 1e-8] = 1.0
    z = (x - mu) / sd
    W = Tensor(np.zeros((x.shape[1], P)), requires_grad=True)
    b = Tensor(np.zeros(P), requires_grad=True)
    params = {"W": W, "b": b}
    state = AdamState(lr=lr, beta2=0.999, eps=1e-8)
    xt, yt = Tensor(z[train]), y[train]
    rows = np.arange(len(train))
    for _ in range(steps):
        logp = ad.log_softmax(xt @ W + b, axis=-1)
        loss = ad.take(logp, (rows, yt)).mean() * -1.0
        W.grad = b.grad = None
        loss.backward()
        adam_step(params, {"W": W.grad, "b": b.grad}, state)
    scores = z @ W.data + b.data
    pred = scores.argmax(axis=1)
    return ProbeResult(
        float((pred[test] == y[test]).mean()),
        float((pred[train] == y[train]).mean()),
        len(train),
        len(test),
    )
