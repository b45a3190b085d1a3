"""Embedding cosine scoring and adaptive per-group thresholds.

Each generated image is scored by the cosine similarity between its
embedding and its prompt's text embedding.  Scores are grouped by prompt;
each group's mean and population standard deviation define an adaptive
threshold tau = mean - alpha * stddev under the default lower-tail rule
(keep scores at or above tau).  The literal upper-tail rule
(tau = mean + alpha * stddev) is available via config for comparison; with
alpha around 1.5 it rejects most in-distribution samples, so lower-tail
rejection is the default that matches observed retention in practice.

Groups smaller than ``min_group_size`` are pooled into a global fallback
group, since a standard deviation over a handful of samples is noise.
Boundary ties (score == tau) are kept.  Group statistics use plain
left-to-right sums, so an independent recomputation with the same formulas
reproduces them bit-for-bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

GLOBAL_GROUP_KEY = "__global__"
LOWER_TAIL = "lower-tail"
UPPER_TAIL = "upper-tail"
_SCORE_SLACK = 1e-9


class ScoringError(ValueError):
    """Raised when an embedding pair cannot be scored (zero norm, bad shape)."""


class FilterError(ValueError):
    """Raised when filtering cannot resolve its inputs (unknown group, bad config)."""


class CalibrationError(ValueError):
    """Raised when alpha calibration has no feasible answer."""


@dataclass(frozen=True)
class EmbeddingPair:
    """Raw image and text embeddings for one sample; normalized at scoring time."""

    image_embedding: tuple[float, ...]
    text_embedding: tuple[float, ...]


@dataclass(frozen=True)
class ScoredSample:
    """One sample's cosine score, tagged with its prompt group."""

    sample_id: str
    prompt_id: str
    score: float
    severity: str | None = None

    def __post_init__(self) -> None:
        if abs(self.score) > 1.0 + _SCORE_SLACK:
            raise FilterError(f"score {self.score} outside [-1, 1] for {self.sample_id}")


@dataclass(frozen=True)
class PromptGroupStats:
    """Per-group score statistics and the threshold under the configured rule."""

    group_key: str
    n: int
    mean: float
    stddev: float
    threshold: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "group_key": self.group_key,
            "n": self.n,
            "mean": self.mean,
            "stddev": self.stddev,
            "threshold": self.threshold,
        }


@dataclass(frozen=True)
class FilterConfig:
    """Threshold rule parameters.

    ``alpha_by_severity`` optionally overrides alpha per severity tag; group
    statistics always use the base alpha, per-sample decisions use the
    override when the sample carries a matching severity.
    """

    alpha: float = 1.5
    rule: str = LOWER_TAIL
    min_group_size: int = 5
    stddev_mode: str = "population"
    alpha_by_severity: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise FilterError(f"alpha must be >= 0, got {self.alpha}")
        if self.rule not in (LOWER_TAIL, UPPER_TAIL):
            raise FilterError(f"rule must be {LOWER_TAIL!r} or {UPPER_TAIL!r}, got {self.rule!r}")
        if self.min_group_size < 2:
            raise FilterError(f"min_group_size must be >= 2, got {self.min_group_size}")
        if self.stddev_mode != "population":
            raise FilterError(f"unsupported stddev_mode {self.stddev_mode!r}")
        for sev, a in self.alpha_by_severity.items():
            if a < 0:
                raise FilterError(f"alpha for severity {sev!r} must be >= 0, got {a}")

    def alpha_for(self, severity: str | None) -> float:
        if severity is not None and severity in self.alpha_by_severity:
            return self.alpha_by_severity[severity]
        return self.alpha

    def to_dict(self) -> dict[str, Any]:
        return {
            "alpha": self.alpha,
            "rule": self.rule,
            "min_group_size": self.min_group_size,
            "stddev_mode": self.stddev_mode,
            "alpha_by_severity": dict(self.alpha_by_severity),
        }


@dataclass(frozen=True)
class FilterDecision:
    """The audited outcome for one sample."""

    sample_id: str
    prompt_id: str
    group_key: str
    score: float
    mean: float
    stddev: float
    threshold: float
    alpha: float
    rule: str
    kept: bool
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "prompt_id": self.prompt_id,
            "group_key": self.group_key,
            "score": self.score,
            "mean": self.mean,
            "stddev": self.stddev,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "rule": self.rule,
            "kept": self.kept,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class FilterResult:
    """Partition of the scored samples plus per-sample decisions."""

    selected: tuple[ScoredSample, ...]
    rejected: tuple[ScoredSample, ...]
    decisions: tuple[FilterDecision, ...]

    @property
    def retention(self) -> float:
        total = len(self.selected) + len(self.rejected)
        return len(self.selected) / total if total else 0.0


def cosine_score(pair: EmbeddingPair) -> float:
    """dot(u, v) / (|u| * |v|), clamped into [-1, 1].

    Raw (unnormalized) vectors are accepted; normalization happens here so
    there is exactly one place it can go wrong.
    """
    u = np.asarray(pair.image_embedding, dtype=np.float64)
    v = np.asarray(pair.text_embedding, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise ScoringError(f"embedding shapes disagree: {u.shape} vs {v.shape}")
    norm_u = float(np.linalg.norm(u))
    norm_v = float(np.linalg.norm(v))
    if norm_u == 0.0:
        raise ScoringError("image embedding has zero norm")
    if norm_v == 0.0:
        raise ScoringError("text embedding has zero norm")
    value = float(np.dot(u, v) / (norm_u * norm_v))
    return max(-1.0, min(1.0, value))


def _grouped(
    scores: Sequence[ScoredSample], min_group_size: int
) -> dict[str, list[ScoredSample]]:
    """Group by prompt_id, pooling undersized groups under the fallback key.

    Input order is preserved within every group so that statistics are
    reproducible sums over a well-defined sequence.
    """
    counts: dict[str, int] = {}
    for sample in scores:
        counts[sample.prompt_id] = counts.get(sample.prompt_id, 0) + 1
    groups: dict[str, list[ScoredSample]] = {}
    for sample in scores:
        key = (
            sample.prompt_id
            if counts[sample.prompt_id] >= min_group_size
            else GLOBAL_GROUP_KEY
        )
        groups.setdefault(key, []).append(sample)
    return groups


def _mean_stddev(values: Iterable[float]) -> tuple[float, float, int]:
    values = list(values)
    n = len(values)
    # A constant group has mean exactly that constant and stddev 0; the
    # accumulated sum can land one ulp off, which would push the mean above
    # every member and break the inclusive >= comparison at alpha = 0.
    if min(values) == max(values):
        return values[0], 0.0, n
    mean = sum(values) / n
    variance = sum((v - mean) ** 2 for v in values) / n
    return mean, math.sqrt(variance), n


def threshold_for(mean: float, stddev: float, alpha: float, rule: str) -> float:
    if rule == LOWER_TAIL:
        return mean - alpha * stddev
    if rule == UPPER_TAIL:
        return mean + alpha * stddev
    raise FilterError(f"unknown rule {rule!r}")


def group_stats(scores: Sequence[ScoredSample], cfg: FilterConfig) -> list[PromptGroupStats]:
    """One stats record per resolved group, sorted by group key."""
    if not scores:
        raise FilterError("cannot compute statistics over an empty score list")
    out: list[PromptGroupStats] = []
    for key, members in _grouped(scores, cfg.min_group_size).items():
        mean, stddev, n = _mean_stddev(s.score for s in members)
        out.append(
            PromptGroupStats(
                group_key=key,
                n=n,
                mean=mean,
                stddev=stddev,
                threshold=threshold_for(mean, stddev, cfg.alpha, cfg.rule),
            )
        )
    out.sort(key=lambda g: g.group_key)
    return out


def resolve_group(
    sample: ScoredSample, stats_by_key: dict[str, PromptGroupStats]
) -> PromptGroupStats:
    stats = stats_by_key.get(sample.prompt_id)
    if stats is None:
        stats = stats_by_key.get(GLOBAL_GROUP_KEY)
    if stats is None:
        raise FilterError(
            f"sample {sample.sample_id} (prompt {sample.prompt_id}) resolves to no stats group"
        )
    return stats


def apply_filter(
    scores: Sequence[ScoredSample],
    stats: Sequence[PromptGroupStats],
    cfg: FilterConfig,
) -> FilterResult:
    """Partition scores into selected and rejected against group thresholds.

    A sample is kept iff score >= mean - alpha * stddev (lower-tail rule,
    inclusive) or score >= mean + alpha * stddev (upper-tail rule) of its
    resolved group.  Input order is preserved in all outputs.
    """
    stats_by_key = {g.group_key: g for g in stats}
    if len(stats_by_key) != len(stats):
        raise FilterError("duplicate group keys in stats")
    selected: list[ScoredSample] = []
    rejected: list[ScoredSample] = []
    decisions: list[FilterDecision] = []
    for sample in scores:
        group = resolve_group(sample, stats_by_key)
        alpha = cfg.alpha_for(sample.severity)
        tau = threshold_for(group.mean, group.stddev, alpha, cfg.rule)
        kept = sample.score >= tau
        op = ">=" if kept else "<"
        decisions.append(
            FilterDecision(
                sample_id=sample.sample_id,
                prompt_id=sample.prompt_id,
                group_key=group.group_key,
                score=sample.score,
                mean=group.mean,
                stddev=group.stddev,
                threshold=tau,
                alpha=alpha,
                rule=cfg.rule,
                kept=kept,
                reason=f"score {sample.score:.6f} {op} threshold {tau:.6f} ({cfg.rule})",
            )
        )
        (selected if kept else rejected).append(sample)
    return FilterResult(tuple(selected), tuple(rejected), tuple(decisions))


def filter_scores(scores: Sequence[ScoredSample], cfg: FilterConfig) -> FilterResult:
    """Convenience: compute stats then apply the filter in one call."""
    return apply_filter(scores, group_stats(scores, cfg), cfg)


def calibrate_alpha(
    scores: Sequence[ScoredSample],
    target_retention: float,
    cfg: FilterConfig | None = None,
    precision: float = 1e-4,
) -> float:
    """Smallest alpha whose lower-tail filter retains >= target_retention.

    Retention is monotone nondecreasing in alpha under the lower-tail rule,
    so a bisection over alpha converges; the result is snapped up to the
    requested precision grid.
    """
    if not scores:
        raise CalibrationError("cannot calibrate on an empty score list")
    if not 0.0 < target_retention < 1.0:
        raise CalibrationError(f"target_retention must be in (0, 1), got {target_retention}")
    base = cfg or FilterConfig()
    probe_cfg = FilterConfig(
        alpha=base.alpha, rule=LOWER_TAIL, min_group_size=base.min_group_size
    )
    stats = group_stats(scores, probe_cfg)
    stats_by_key = {g.group_key: g for g in stats}
    total = len(scores)

    def retention(alpha: float) -> float:
        kept = 0
        for sample in scores:
            group = resolve_group(sample, stats_by_key)
            if sample.score >= group.mean - alpha * group.stddev:
                kept += 1
        return kept / total

    if retention(0.0) >= target_retention:
        return 0.0
    hi = 1.0
    while retention(hi) < target_retention:
        hi *= 2.0
        if hi > 1e6:
            raise CalibrationError(
                f"target retention {target_retention} unreachable at any alpha"
            )
    lo = 0.0
    while hi - lo > precision / 4:
        mid = (lo + hi) / 2
        if retention(mid) >= target_retention:
            hi = mid
        else:
            lo = mid
    snapped = math.ceil(hi / precision) * precision
    if retention(snapped) < target_retention:
        snapped += precision
    return round(snapped, 12)


def build_filter_report(
    result: FilterResult,
    stats: Sequence[PromptGroupStats],
    cfg: FilterConfig,
    invalid: Sequence[dict[str, str]] = (),
) -> dict[str, Any]:
    """The machine-readable filter report consumed by the dataset store.

    ``invalid`` lists samples excluded before scoring (for example zero-norm
    embeddings) as {sample_id, reason} entries.
    """
    total = len(result.selected) + len(result.rejected)
    return {
        "config": cfg.to_dict(),
        "counts": {
            "total": total,
            "kept": len(result.selected),
            "rejected": len(result.rejected),
            "invalid": len(invalid),
        },
        "retention": result.retention,
        "groups": [g.to_dict() for g in stats],
        "decisions": [d.to_dict() for d in result.decisions],
        "invalid": list(invalid),
    }
