"""ICC(1,1) computation and the repeatability analysis suite.

The intraclass correlation for a two-timepoint test-retest design is
(BMS - WMS) / (BMS + WMS), the one-way random-effects single-measurement
form. It is invariant under linear scaling and shifting of the feature
values, which is what makes features with different units comparable;
features are judged against the Volume ICC of the same image/structure
rather than against absolute thresholds.

Analyses operate on :class:`RepeatabilityTable` objects keyed by full
feature-column names (``[filter]_[class]_[name]``). Subjects with an
undefined value for a feature are dropped for that feature only; the
retained subject count is reported alongside every ICC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import RadrepError

VOLUME_REFERENCE_FEATURE = "original_shape_Volume"
MIN_SUBJECTS = 3


class RepeatabilityError(RadrepError):
    pass


class DegenerateData(RepeatabilityError):
    """All measurements identical; ICC is 0/0."""


class InsufficientSubjects(RepeatabilityError):
    """Fewer than 3 subjects with both timepoints."""


class MissingVolumeReference(RepeatabilityError):
    """The reference feature column is absent or undefined."""


class FeatureSetMismatch(RepeatabilityError):
    """Tables being compared do not share an identical feature set."""


class DegenerateSamples(RepeatabilityError):
    """KDE input has fewer than 2 samples or zero variance."""


class InsufficientFeatures(RepeatabilityError):
    """A feature class has fewer defined features than requested."""


class NoSharedFeatures(RepeatabilityError):
    """Two tables have no feature key in common."""


@dataclass(frozen=True)
class PairedMeasurements:
    """Per-subject (timepoint1, timepoint2) values; k is fixed at 2."""

    subjects: tuple[tuple[str, float, float], ...]

    def __post_init__(self):
        if len(self.subjects) < MIN_SUBJECTS:
            raise InsufficientSubjects(
                f"need >= {MIN_SUBJECTS} subjects, got {len(self.subjects)}"
            )


@dataclass(frozen=True)
class IccResult:
    icc: float
    bms: float
    wms: float
    n: int


def icc_1_1(data: PairedMeasurements) -> IccResult:
    """One-way random-effects single-measurement ICC for two timepoints.

    BMS = k * sum_i (mean_i - grand)^2 / (n - 1) and
    WMS = sum_ij (y_ij - mean_i)^2 / (n * (k - 1)) with k = 2.
    """
    y = np.array([[v1, v2] for _, v1, v2 in data.subjects], dtype=np.float64)
    n, k = y.shape
    subject_means = y.mean(axis=1)
    grand_mean = y.mean()
    bms = k * float(np.sum((subject_means - grand_mean) ** 2)) / (n - 1)
    wms = float(np.sum((y - subject_means[:, None]) ** 2)) / (n * (k - 1))
    if bms + wms == 0.0:
        raise DegenerateData("all measurements identical; ICC undefined")
    return IccResult(icc=(bms - wms) / (bms + wms), bms=bms, wms=wms, n=n)


@dataclass(frozen=True)
class ConfigKey:
    """One cell of the extraction configuration space."""

    image_type: str
    structure: str
    normalization: str
    bin_width: float
    dimensionality: str
    registered: bool = False

    def code(self) -> str:
        norm = {"none": "noNormalization",
                "wholeImage": "wholeImageNorm",
                "referenceRegion": "MuscleRefNorm"}[self.normalization]
        parts = [self.image_type, self.structure, norm, self.dimensionality,
                 f"bin{self.bin_width:g}"]
        if self.registered:
            parts.append("TP2Registered")
        return "_".join(parts)


@dataclass(frozen=True)
class SubjectRow:
    """One extracted row: a subject/timepoint's feature values."""

    subject: str
    timepoint: int
    values: dict[str, float | None]


@dataclass(frozen=True)
class RepeatabilityTable:
    """Per-feature ICC results for one configuration cell.

    ``rows`` maps feature-column names to results; features whose ICC
    could not be computed are listed in ``dropped`` with a reason. The
    Volume reference for the same image/structure is always attached.
    """

    key: ConfigKey
    rows: dict[str, IccResult]
    volume_reference: IccResult
    dropped: dict[str, str] = field(default_factory=dict)


def _feature_pairs(rows: list[SubjectRow], feature: str):
    by_subject: dict[str, dict[int, float | None]] = {}
    for row in rows:
        by_subject.setdefault(row.subject, {})[row.timepoint] = row.values.get(feature)
    pairs = []
    for subject in sorted(by_subject):
        tps = by_subject[subject]
        v1, v2 = tps.get(1), tps.get(2)
        if v1 is not None and v2 is not None:
            pairs.append((subject, float(v1), float(v2)))
    return pairs


def build_table(rows: list[SubjectRow], key: ConfigKey,
                reference_feature: str = VOLUME_REFERENCE_FEATURE,
                ) -> RepeatabilityTable:
    """Compute one ICC per feature column and attach the Volume reference.

    Subjects missing either timepoint, or with an undefined value at
    either timepoint, are dropped for that feature only; the retained n
    is recorded in each result.
    """
    features: list[str] = sorted({f for row in rows for f in row.values})
    if reference_feature not in features:
        raise MissingVolumeReference(
            f"reference feature {reference_feature!r} not among extracted columns"
        )
    results: dict[str, IccResult] = {}
    dropped: dict[str, str] = {}
    for feature in features:
        pairs = _feature_pairs(rows, feature)
        if len(pairs) < MIN_SUBJECTS:
            dropped[feature] = f"only {len(pairs)} subjects with both timepoints"
            continue
        try:
            results[feature] = icc_1_1(PairedMeasurements(tuple(pairs)))
        except DegenerateData:
            dropped[feature] = "all values identical"
    if reference_feature not in results:
        raise MissingVolumeReference(
            f"reference feature {reference_feature!r}: "
            + dropped.get(reference_feature, "no defined ICC")
        )
    return RepeatabilityTable(key=key, rows=results,
                              volume_reference=results[reference_feature],
                              dropped=dropped)


def _shared_features(tables: dict[float, RepeatabilityTable]) -> list[str]:
    if len(tables) < 2:
        raise FeatureSetMismatch("need tables for >= 2 bin widths")
    sets = {w: set(t.rows) for w, t in tables.items()}
    first = next(iter(sets.values()))
    if any(s != first for s in sets.values()):
        raise FeatureSetMismatch(
            "tables disagree on the feature set: "
            + str({w: sorted(s ^ first)[:5] for w, s in sets.items() if s != first})
        )
    return sorted(first)


def binwidth_spread(tables: dict[float, RepeatabilityTable]) -> dict[str, float]:
    """Per feature, max(ICC) - min(ICC) across bin widths."""
    spread = {}
    for feature in _shared_features(tables):
        iccs = [t.rows[feature].icc for t in tables.values()]
        spread[feature] = max(iccs) - min(iccs)
    return spread


@dataclass(frozen=True)
class DensityCurve:
    """Gaussian-kernel density estimate sampled on a regular grid."""

    abscissa: np.ndarray
    density: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.abscissa.setflags(write=False)
        self.density.setflags(write=False)


def silverman_bandwidth(samples: np.ndarray) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5) (sample std, linear-interp IQR)."""
    n = samples.size
    std = float(np.std(samples, ddof=1))
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = float(q75 - q25)
    candidates = [c for c in (std, iqr / 1.34) if c > 0]
    if not candidates:
        raise DegenerateSamples("samples have zero spread")
    return 0.9 * min(candidates) * n ** (-0.2)


def gaussian_kde_density(samples: np.ndarray, x: np.ndarray,
                         bandwidth: float) -> np.ndarray:
    """Evaluate the Gaussian KDE of ``samples`` at points ``x``."""
    z = (np.atleast_1d(x)[:, None] - samples[None, :]) / bandwidth
    return np.exp(-0.5 * z ** 2).sum(axis=1) / (
        samples.size * bandwidth * math.sqrt(2.0 * math.pi)
    )


def kde(samples, bandwidth: float | None = None,
        grid_points: int = 256) -> DensityCurve:
    """Gaussian KDE on a regular grid spanning [min - 3h, max + 3h].

    The bandwidth defaults to Silverman's rule and can be overridden.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        raise DegenerateSamples("need >= 2 samples")
    if np.ptp(samples) == 0.0:
        raise DegenerateSamples("samples have zero variance")
    h = silverman_bandwidth(samples) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be > 0")
    grid = np.linspace(samples.min() - 3 * h, samples.max() + 3 * h, grid_points)
    return DensityCurve(abscissa=grid,
                        density=gaussian_kde_density(samples, grid, h),
                        bandwidth=h)


def rank_distribution(tables: dict[float, RepeatabilityTable],
                      ) -> dict[float, dict[float, int]]:
    """Histogram of per-feature ICC ranks for each bin width.

    Bin widths are ranked per feature by ICC descending (rank 1 = highest
    ICC); ties get the average rank. Returns binWidth -> {rank: count}.
    """
    features = _shared_features(tables)
    widths = sorted(tables)
    histograms: dict[float, dict[float, int]] = {w: {} for w in widths}
    for feature in features:
        iccs = np.array([tables[w].rows[feature].icc for w in widths])
        ranks = rankdata(-iccs, method="average")
        for width, rank in zip(widths, ranks):
            hist = histograms[width]
            hist[float(rank)] = hist.get(float(rank), 0) + 1
    return histograms


def split_feature_key(feature_key: str) -> tuple[str, str, str]:
    """Split '[filter]_[class]_[name]' into its three parts."""
    from .features import FEATURE_CLASSES  # cycle-free late import

    for cls in FEATURE_CLASSES:
        token = f"_{cls}_"
        pos = feature_key.find(token)
        if pos > 0:
            return feature_key[:pos], cls, feature_key[pos + len(token):]
    raise ValueError(f"feature key {feature_key!r} does not match "
                     "'[filter]_[class]_[name]'")


def top_k_per_class(table: RepeatabilityTable, k: int = 3,
                    ) -> dict[str, list[tuple[str, float]]]:
    """The k most repeatable features per class, over all filter variants.

    A feature (class + name) is scored by its maximum ICC across filters;
    ties break lexicographically on the feature name.
    """
    best: dict[str, dict[str, float]] = {}
    for feature_key, result in table.rows.items():
        _, cls, name = split_feature_key(feature_key)
        per_class = best.setdefault(cls, {})
        if name not in per_class or result.icc > per_class[name]:
            per_class[name] = result.icc
    out: dict[str, list[tuple[str, float]]] = {}
    for cls in sorted(best):
        scored = sorted(best[cls].items(), key=lambda kv: (-kv[1], kv[0]))
        if len(scored) < k:
            raise InsufficientFeatures(
                f"class {cls!r} has {len(scored)} features with defined ICC, need {k}"
            )
        out[cls] = [(f"{cls}_{name}", icc) for name, icc in scored[:k]]
    return out


@dataclass(frozen=True)
class FilterFrequency:
    """How often each filter exceeds the Volume reference ICC."""

    counts: dict[str, int]
    total_above_reference: int


def filter_frequency(table: RepeatabilityTable) -> FilterFrequency:
    """Count (feature, filter) cells with ICC above the Volume reference.

    ``total_above_reference`` is the number of distinct features (class +
    name) with at least one above-reference filter variant; one feature
    can contribute to several filters.
    """
    reference = table.volume_reference.icc
    counts: dict[str, int] = {}
    features_above: set[tuple[str, str]] = set()
    for feature_key, result in table.rows.items():
        if result.icc > reference:
            flt, cls, name = split_feature_key(feature_key)
            counts[flt] = counts.get(flt, 0) + 1
            features_above.add((cls, name))
    return FilterFrequency(counts=dict(sorted(counts.items())),
                           total_above_reference=len(features_above))


@dataclass(frozen=True)
class ConfigDelta:
    """Per-feature ICC change between two configurations (b minus a)."""

    shared: dict[str, tuple[float, float, float]]
    only_a: tuple[str, ...]
    only_b: tuple[str, ...]


def config_delta(a: RepeatabilityTable, b: RepeatabilityTable) -> ConfigDelta:
    """ICC deltas for shared features; disjoint features are listed, not dropped."""
    keys_a, keys_b = set(a.rows), set(b.rows)
    shared_keys = keys_a & keys_b
    if not shared_keys:
        raise NoSharedFeatures("tables share no feature key")
    shared = {
        key: (a.rows[key].icc, b.rows[key].icc, b.rows[key].icc - a.rows[key].icc)
        for key in sorted(shared_keys)
    }
    return ConfigDelta(shared=shared,
                       only_a=tuple(sorted(keys_a - keys_b)),
                       only_b=tuple(sorted(keys_b - keys_a)))
