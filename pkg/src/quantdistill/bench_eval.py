"""Verification-style evaluation and activation-range comparison.

Evaluation follows the usual embedding-verification protocol: cosine
similarity between normalized embeddings of sample pairs, accuracy at the
best threshold from an exhaustive sweep, and the true acceptance rate at a
fixed false acceptance rate taken from the imposter-score quantile. At
desk scale the imposter pool is a few thousand pairs, so the default FAR
target is 1e-2; smaller quantiles are not estimable from that pool.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .graph import EmbeddingNet, forward_embed
from .synth import IdentitySpace, derive_seed, sample_for_identities
from .tensor_core import Tensor

DEFAULT_PAIR_COUNT = 2000
DEFAULT_FAR_TARGETS = (0.01,)


@dataclass(frozen=True)
class PairSet:
    """Balanced genuine/imposter input pairs with ground-truth flags."""

    first: Tensor
    second: Tensor
    same: np.ndarray  # bool per pair

    def __post_init__(self):
        same = np.ascontiguousarray(self.same, dtype=bool)
        same.flags.writeable = False
        object.__setattr__(self, "same", same)
        if self.first.shape != self.second.shape:
            raise DimensionError(f"pair sides differ: {self.first.shape} vs {self.second.shape}")
        if same.shape != (self.first.shape[0],):
            raise DimensionError(f"{same.shape} flags for {self.first.shape[0]} pairs")

    @property
    def n_pairs(self) -> int:
        return self.first.shape[0]


@dataclass(frozen=True)
class VerificationReport:
    """Accuracy at the best threshold plus TAR at the requested FAR targets."""

    accuracy: float
    threshold: float
    tar_at_far: dict[float, float]
    genuine_mean: float
    imposter_mean: float
    n_genuine: int
    n_imposter: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "tar_at_far": {f"{far:g}": tar for far, tar in sorted(self.tar_at_far.items())},
            "genuine_mean": self.genuine_mean,
            "imposter_mean": self.imposter_mean,
            "n_genuine": self.n_genuine,
            "n_imposter": self.n_imposter,
        }


@dataclass(frozen=True)
class RangeCorrelationReport:
    """Interval overlap of two calibrations, per activation depth."""

    intervals_a: tuple[tuple[float, float], ...]
    intervals_b: tuple[tuple[float, float], ...]
    iou: tuple[float, ...]
    mean_iou: float

    def as_dict(self) -> dict:
        return {
            "per_depth": [
                {"depth": i, "a": list(self.intervals_a[i]), "b": list(self.intervals_b[i]),
                 "iou": self.iou[i]}
                for i in range(len(self.iou))
            ],
            "mean_iou": self.mean_iou,
        }


def build_pairs(space: IdentitySpace, n_pairs: int, seed: int) -> PairSet:
    """n_pairs/2 genuine pairs (same identity, independent noise) and
    n_pairs/2 imposter pairs (distinct identities), deterministic per seed."""
    if n_pairs < 2 or n_pairs % 2 != 0:
        raise DomainError(f"n_pairs must be even and >= 2, got {n_pairs}")
    if space.n_identities < 2:
        raise DomainError("need at least 2 identities to build imposter pairs")
    half = n_pairs // 2
    rng = np.random.default_rng(derive_seed(seed, "pair-ids"))
    genuine_ids = rng.integers(0, space.n_identities, size=half)
    imp_a = rng.integers(0, space.n_identities, size=half)
    shift = rng.integers(1, space.n_identities, size=half)
    imp_b = (imp_a + shift) % space.n_identities

    first_ids = np.concatenate([genuine_ids, imp_a])
    second_ids = np.concatenate([genuine_ids, imp_b])
    first = sample_for_identities(space, first_ids, derive_seed(seed, "pair-first"))
    second = sample_for_identities(space, second_ids, derive_seed(seed, "pair-second"))
    same = np.concatenate([np.ones(half, dtype=bool), np.zeros(half, dtype=bool)])
    return PairSet(first=first, second=second, same=same)


def _embed(net: EmbeddingNet, x: Tensor, quantized: bool) -> np.ndarray:
    out, _ = forward_embed(net, x, quantized=quantized)
    return out.data.astype(np.float64)


def pair_scores(net: EmbeddingNet, pairs: PairSet,
                quantized: bool | None = None) -> np.ndarray:
    """Cosine similarity per pair; quantized mode defaults to the net's state."""
    if quantized is None:
        quantized = net.is_calibrated
    a = _embed(net, pairs.first, quantized)
    b = _embed(net, pairs.second, quantized)
    return np.sum(a * b, axis=1)


def best_threshold_accuracy(scores: np.ndarray, same: np.ndarray) -> tuple[float, float]:
    """Exhaustive sweep over midpoints of adjacent sorted scores.

    Returns (accuracy, threshold) where a pair is called genuine when its
    score is >= threshold; ties in accuracy resolve to the lowest threshold.
    """
    order = np.sort(np.unique(scores))
    candidates = [order[0] - 1.0]
    candidates += [float((order[i] + order[i + 1]) / 2.0) for i in range(len(order) - 1)]
    candidates.append(order[-1] + 1.0)
    best_acc, best_thr = -1.0, candidates[0]
    n = scores.size
    for thr in candidates:
        acc = float(np.count_nonzero((scores >= thr) == same)) / n
        if acc > best_acc:
            best_acc, best_thr = acc, thr
    return best_acc, best_thr


def tar_at_far(scores: np.ndarray, same: np.ndarray, far: float) -> float:
    """TAR with the acceptance threshold set at the FAR quantile of imposters."""
    imposter = np.sort(scores[~same])[::-1]
    genuine = scores[same]
    if imposter.size == 0 or genuine.size == 0:
        raise DomainError("both genuine and imposter scores are required")
    k = int(np.floor(far * imposter.size))
    if k >= imposter.size:
        return 1.0
    threshold = imposter[k]
    return float(np.count_nonzero(genuine > threshold)) / genuine.size


def verify(net: EmbeddingNet, pairs: PairSet,
           far_targets=DEFAULT_FAR_TARGETS,
           quantized: bool | None = None) -> VerificationReport:
    """Score all pairs and report accuracy and TAR@FAR."""
    if pairs.n_pairs == 0:
        raise DomainError("empty pair set")
    scores = pair_scores(net, pairs, quantized)
    acc, thr = best_threshold_accuracy(scores, pairs.same)
    tars = {float(f): tar_at_far(scores, pairs.same, float(f)) for f in far_targets}
    genuine = scores[pairs.same]
    imposter = scores[~pairs.same]
    return VerificationReport(
        accuracy=acc,
        threshold=thr,
        tar_at_far=tars,
        genuine_mean=float(genuine.mean()),
        imposter_mean=float(imposter.mean()),
        n_genuine=int(genuine.size),
        n_imposter=int(imposter.size),
    )


def interval_iou(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Intersection-over-union of two closed intervals.

    Identical zero-length intervals count as fully overlapping (IoU 1).
    """
    overlap = min(a[1], b[1]) - max(a[0], b[0])
    union = max(a[1], b[1]) - min(a[0], b[0])
    if union == 0.0:
        return 1.0 if a == b else 0.0
    return max(overlap, 0.0) / union


def range_correlation(net_a: EmbeddingNet, net_b: EmbeddingNet) -> RangeCorrelationReport:
    """Compare the calibrated activation intervals of two same-architecture nets."""
    if not net_a.same_architecture(net_b):
        raise DimensionError("nets have different architectures")
    if net_a.activation_params is None or net_b.activation_params is None:
        raise StateError("both nets must be calibrated")
    ia = tuple((p.range_lo, p.range_hi) for p in net_a.activation_params)
    ib = tuple((p.range_lo, p.range_hi) for p in net_b.activation_params)
    ious = tuple(interval_iou(a, b) for a, b in zip(ia, ib))
    return RangeCorrelationReport(intervals_a=ia, intervals_b=ib, iou=ious,
                                  mean_iou=float(np.mean(ious)))


def write_range_csv(path, report: RangeCorrelationReport,
                    source_a: str = "a", source_b: str = "b") -> None:
    """Export intervals as `depth,lo,hi,source` rows for external plotting."""
    lines = ["depth,lo,hi,source"]
    for depth, (lo, hi) in enumerate(report.intervals_a):
        lines.append(f"{depth},{lo:.9g},{hi:.9g},{source_a}")
    for depth, (lo, hi) in enumerate(report.intervals_b):
        lines.append(f"{depth},{lo:.9g},{hi:.9g},{source_b}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
