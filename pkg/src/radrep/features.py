"""First-order, shape, and texture feature computation.

Every operation returns a :class:`FeatureMap` whose entries are either
finite floats or ``None`` for features that are undefined on the given
input (constant ROI, single gray level, degenerate axis). ``None`` is an
explicit flag: it serializes to an empty CSV cell and is never silently
reported as NaN or zero.

The emitted name set is fixed by :data:`FEATURE_ROSTER`; names on the
exclusion list (features directly correlated with retained ones, or
meaningless on single-slice ROIs) are never computed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .discretize import DiscretizationSpec, discretize_roi
from .texture_matrices import GlcMatrix, GlrlMatrix, GlszMatrix
from .volume_io import RoiMask, VolumeGrid

FEATURE_CLASSES = ("firstorder", "shape", "glcm", "glrlm", "glszm")

FEATURE_ROSTER: dict[str, tuple[str, ...]] = {
    "firstorder": (
        "10Percentile", "90Percentile", "Energy", "Entropy", "Kurtosis",
        "Maximum", "Mean", "MeanAbsoluteDeviation", "Median", "Minimum",
        "Range", "RootMeanSquared", "Skewness", "StandardDeviation",
        "Uniformity", "Variance",
    ),
    "shape": (
        "Elongation", "MajorAxisLength", "Maximum2DDiameterColumn",
        "Maximum2DDiameterRow", "Maximum2DDiameterSlice", "Maximum3DDiameter",
        "MinorAxisLength", "Sphericity", "SurfaceArea", "SurfaceVolumeRatio",
        "Volume",
    ),
    "glcm": (
        "Autocorrelation", "ClusterProminence", "ClusterShade",
        "ClusterTendency", "Contrast", "Correlation", "DifferenceAverage",
        "DifferenceEntropy", "Id", "Idm", "InverseVariance", "JointAverage",
        "JointEnergy", "JointEntropy", "MaximumProbability", "SumEntropy",
    ),
    "glrlm": (
        "GrayLevelNonUniformity", "GrayLevelVariance",
        "HighGrayLevelRunEmphasis", "LongRunEmphasis",
        "LongRunHighGrayLevelEmphasis", "LongRunLowGrayLevelEmphasis",
        "LowGrayLevelRunEmphasis", "RunEntropy", "RunLengthNonUniformity",
        "RunPercentage", "RunVariance", "ShortRunEmphasis",
        "ShortRunHighGrayLevelEmphasis", "ShortRunLowGrayLevelEmphasis",
    ),
    "glszm": (
        "GrayLevelNonUniformity", "GrayLevelVariance",
        "HighGrayLevelZoneEmphasis", "LargeAreaEmphasis",
        "LargeAreaHighGrayLevelEmphasis", "LargeAreaLowGrayLevelEmphasis",
        "LowGrayLevelZoneEmphasis", "SizeZoneNonUniformity",
        "SmallAreaEmphasis", "SmallAreaHighGrayLevelEmphasis",
        "SmallAreaLowGrayLevelEmphasis", "ZoneEntropy", "ZonePercentage",
        "ZoneVariance",
    ),
}

# Dropped for direct correlation with retained features, or because some
# tumor ROIs are defined on a single slice.
EXCLUDED_FEATURES: frozenset[tuple[str, str]] = frozenset({
    ("shape", "Compactness1"),
    ("shape", "Compactness2"),
    ("shape", "SphericalDisproportion"),
    ("shape", "Flatness"),
    ("shape", "LeastAxisLength"),
    ("glcm", "SumAverage"),
    ("glcm", "Homogeneity1"),
    ("glcm", "Homogeneity2"),
})


@dataclass(frozen=True)
class FeatureMap:
    """Named feature values: (class, name) -> float or None (undefined)."""

    entries: dict[tuple[str, str], float | None] = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.entries.items():
            if key in EXCLUDED_FEATURES:
                raise ValueError(f"excluded feature {key} must not be emitted")
            if key[1] not in FEATURE_ROSTER.get(key[0], ()):
                raise ValueError(f"unknown feature {key}")
            if value is not None and not math.isfinite(value):
                raise ValueError(f"non-finite value for {key}: {value}")

    def get(self, feature_class: str, name: str) -> float | None:
        return self.entries[(feature_class, name)]

    def names(self) -> set[tuple[str, str]]:
        return set(self.entries)


def _entropy_bits(p: np.ndarray) -> float:
    """Shannon entropy in bits with the 0*log0 := 0 convention."""
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum()) + 0.0  # normalizes -0.0


def _nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    # round kills float fuzz in q*N before the ceiling
    rank = max(1, math.ceil(round(q * sorted_values.size, 12)))
    return float(sorted_values[rank - 1])


def firstorder_features(volume: VolumeGrid, mask: RoiMask,
                        spec: DiscretizationSpec) -> FeatureMap:
    """Intensity statistics over the raw in-ROI values.

    Median uses the lower middle element on even counts; percentiles use
    the nearest-rank rule rank = ceil(q * N). Variance and standard
    deviation are population (divide-by-N) statistics; Kurtosis is
    non-excess (Gaussian -> 3). Entropy and Uniformity are computed on
    the fixed-bin-width gray levels of :func:`discretize_roi`.
    """
    x = volume.values[mask.labels > 0].astype(np.float64)
    n = x.size
    srt = np.sort(x)
    mean = float(x.mean())
    dev = x - mean
    # a constant ROI is min == max exactly; mean() rounding would
    # otherwise leave a ~1e-31 residual variance
    m2 = 0.0 if srt[0] == srt[-1] else float(np.mean(dev ** 2))
    entries: dict[tuple[str, str], float | None] = {}

    entries[("firstorder", "Mean")] = mean
    entries[("firstorder", "Median")] = float(srt[(n - 1) // 2])
    entries[("firstorder", "10Percentile")] = _nearest_rank(srt, 0.10)
    entries[("firstorder", "90Percentile")] = _nearest_rank(srt, 0.90)
    entries[("firstorder", "Minimum")] = float(srt[0])
    entries[("firstorder", "Maximum")] = float(srt[-1])
    entries[("firstorder", "Range")] = float(srt[-1] - srt[0])
    entries[("firstorder", "Variance")] = m2
    entries[("firstorder", "StandardDeviation")] = math.sqrt(m2)
    entries[("firstorder", "Energy")] = float(np.sum(x ** 2))
    entries[("firstorder", "RootMeanSquared")] = math.sqrt(float(np.mean(x ** 2)))
    entries[("firstorder", "MeanAbsoluteDeviation")] = float(np.mean(np.abs(dev)))
    if m2 > 0:
        entries[("firstorder", "Skewness")] = float(np.mean(dev ** 3)) / m2 ** 1.5
        entries[("firstorder", "Kurtosis")] = float(np.mean(dev ** 4)) / m2 ** 2
    else:
        entries[("firstorder", "Skewness")] = None
        entries[("firstorder", "Kurtosis")] = None

    disc = discretize_roi(volume, mask, spec)
    hist = np.bincount(disc.levels[disc.levels > 0], minlength=disc.num_gray_levels + 1)[1:]
    p = hist / n
    entries[("firstorder", "Entropy")] = _entropy_bits(p)
    entries[("firstorder", "Uniformity")] = float(np.sum(p ** 2))
    return FeatureMap(entries)


def _surface_face_counts(inside: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis exposed-face counts and the surface-voxel mask."""
    face_counts = np.zeros(3, dtype=np.int64)
    surface = np.zeros_like(inside)
    for axis in range(3):
        padded = np.pad(inside, [(1, 1) if a == axis else (0, 0) for a in range(3)])
        lo = np.take(padded, range(0, inside.shape[axis]), axis=axis)
        hi = np.take(padded, range(2, inside.shape[axis] + 2), axis=axis)
        exposed_lo = inside & ~lo.astype(bool)
        exposed_hi = inside & ~hi.astype(bool)
        face_counts[axis] = exposed_lo.sum() + exposed_hi.sum()
        surface |= exposed_lo | exposed_hi
    return face_counts, surface


def _max_pairwise_distance(points: np.ndarray) -> float:
    """Largest pairwise Euclidean distance; hull-accelerated when large."""
    if len(points) < 2:
        return 0.0
    if len(points) > 1200:
        centered = points - points.mean(axis=0)
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        keep = s > 1e-9 * s[0] if s[0] > 0 else s > np.inf
        proj = centered @ vt[keep].T
        if proj.shape[1] == 0:
            return 0.0
        if proj.shape[1] == 1:
            return float(proj[:, 0].max() - proj[:, 0].min())
        try:
            hull = ConvexHull(proj)
            points = points[hull.vertices]
        except QhullError:
            pass
    return float(pdist(points).max())


def shape_features(mask: RoiMask) -> FeatureMap:
    """Geometry of the binary mask; independent of any intensity volume.

    Surface area counts exposed voxel faces (each face weighted by the
    product of its two spanning spacings). Diameters are maximum pairwise
    distances between surface-voxel centers, in 3D and per principal
    plane. Axis lengths derive from the population covariance of in-ROI
    voxel center coordinates in mm; Elongation is undefined (None) when
    the major eigenvalue is zero (single voxel).
    """
    inside = mask.labels > 0
    spacing = np.asarray(mask.spacing, dtype=np.float64)
    n = int(inside.sum())
    voxel_volume = float(spacing.prod())
    volume = n * voxel_volume

    face_counts, surface = _surface_face_counts(inside)
    face_areas = np.array([
        spacing[1] * spacing[2], spacing[0] * spacing[2], spacing[0] * spacing[1],
    ])
    area = float(np.dot(face_counts, face_areas))

    coords = np.argwhere(inside).astype(np.float64) * spacing
    surface_coords = np.argwhere(surface).astype(np.float64) * spacing

    cov = np.zeros((3, 3))
    if n > 1:
        centered = coords - coords.mean(axis=0)
        cov = centered.T @ centered / n
    eigvals = np.clip(np.linalg.eigvalsh(cov)[::-1], 0.0, None)

    entries: dict[tuple[str, str], float | None] = {
        ("shape", "Volume"): volume,
        ("shape", "SurfaceArea"): area,
        ("shape", "SurfaceVolumeRatio"): area / volume,
        ("shape", "Sphericity"): (36.0 * math.pi * volume ** 2) ** (1.0 / 3.0) / area,
        ("shape", "Maximum3DDiameter"): _max_pairwise_distance(surface_coords),
        ("shape", "Maximum2DDiameterSlice"):
            _max_pairwise_distance(surface_coords[:, (0, 1)]),
        ("shape", "Maximum2DDiameterColumn"):
            _max_pairwise_distance(surface_coords[:, (1, 2)]),
        ("shape", "Maximum2DDiameterRow"):
            _max_pairwise_distance(surface_coords[:, (0, 2)]),
        ("shape", "MajorAxisLength"): 4.0 * math.sqrt(eigvals[0]),
        ("shape", "MinorAxisLength"): 4.0 * math.sqrt(eigvals[1]),
        ("shape", "Elongation"):
            math.sqrt(eigvals[1] / eigvals[0]) if eigvals[0] > 0 else None,
    }
    return FeatureMap(entries)


def glcm_features(m: GlcMatrix) -> FeatureMap:
    """Statistics over the joint co-occurrence probabilities."""
    p = m.probs
    ng = m.ng
    i = np.arange(1, ng + 1, dtype=np.float64)
    px = p.sum(axis=1)
    mu = float(np.dot(i, px))  # symmetric matrix: mu_x == mu_y
    sigma2 = float(np.dot((i - mu) ** 2, px))
    ii, jj = np.meshgrid(i, i, indexing="ij")

    diff = np.abs(ii - jj)
    # p_{x-y}(k), k = 0..Ng-1 and p_{x+y}(k), k = 2..2Ng
    p_diff = np.bincount(diff.astype(np.int64).ravel(), weights=p.ravel(),
                         minlength=ng)
    k_diff = np.arange(ng, dtype=np.float64)
    p_sum = np.bincount((ii + jj).astype(np.int64).ravel(), weights=p.ravel(),
                        minlength=2 * ng + 1)[2:]

    autocorr = float(np.sum(ii * jj * p))
    if sigma2 > 0:
        correlation = (autocorr - mu * mu) / sigma2
    else:
        correlation = None

    off_diag = diff > 0
    entries: dict[tuple[str, str], float | None] = {
        ("glcm", "Autocorrelation"): autocorr,
        ("glcm", "ClusterProminence"): float(np.sum((ii + jj - 2 * mu) ** 4 * p)),
        ("glcm", "ClusterShade"): float(np.sum((ii + jj - 2 * mu) ** 3 * p)),
        ("glcm", "ClusterTendency"): float(np.sum((ii + jj - 2 * mu) ** 2 * p)),
        ("glcm", "Contrast"): float(np.sum((ii - jj) ** 2 * p)),
        ("glcm", "Correlation"): correlation,
        ("glcm", "DifferenceAverage"): float(np.dot(k_diff, p_diff)),
        ("glcm", "DifferenceEntropy"): _entropy_bits(p_diff),
        ("glcm", "Id"): float(np.sum(p / (1.0 + diff))),
        ("glcm", "Idm"): float(np.sum(p / (1.0 + diff ** 2))),
        ("glcm", "InverseVariance"):
            float(np.sum(p[off_diag] / diff[off_diag] ** 2)),
        ("glcm", "JointAverage"): mu,
        ("glcm", "JointEnergy"): float(np.sum(p ** 2)),
        ("glcm", "JointEntropy"): _entropy_bits(p),
        ("glcm", "MaximumProbability"): float(p.max()),
        ("glcm", "SumEntropy"): _entropy_bits(p_sum),
    }
    return FeatureMap(entries)


def glrlm_features(m: GlrlMatrix) -> FeatureMap:
    """Statistics over normalized run counts r(i, j) = counts / totalRuns."""
    r = m.counts / m.total_runs
    i = np.arange(1, m.ng + 1, dtype=np.float64)
    j = np.arange(1, m.max_run_length + 1, dtype=np.float64)
    p_level = r.sum(axis=1)
    p_length = r.sum(axis=0)
    mu_level = float(np.dot(i, p_level))
    mu_length = float(np.dot(j, p_length))
    level_sums = m.counts.sum(axis=1).astype(np.float64)
    length_sums = m.counts.sum(axis=0).astype(np.float64)

    entries: dict[tuple[str, str], float | None] = {
        ("glrlm", "ShortRunEmphasis"): float(np.sum(r / j ** 2)),
        ("glrlm", "LongRunEmphasis"): float(np.sum(r * j ** 2)),
        ("glrlm", "GrayLevelNonUniformity"):
            float(np.sum(level_sums ** 2) / m.total_runs),
        ("glrlm", "RunLengthNonUniformity"):
            float(np.sum(length_sums ** 2) / m.total_runs),
        ("glrlm", "RunPercentage"):
            m.total_runs / (m.num_roi_voxels * m.num_directions),
        ("glrlm", "GrayLevelVariance"):
            float(np.dot((i - mu_level) ** 2, p_level)),
        ("glrlm", "RunVariance"): float(np.dot((j - mu_length) ** 2, p_length)),
        ("glrlm", "RunEntropy"): _entropy_bits(r.ravel()),
        ("glrlm", "LowGrayLevelRunEmphasis"):
            float(np.sum(r / i[:, None] ** 2)),
        ("glrlm", "HighGrayLevelRunEmphasis"):
            float(np.sum(r * i[:, None] ** 2)),
        ("glrlm", "ShortRunLowGrayLevelEmphasis"):
            float(np.sum(r / (i[:, None] ** 2 * j ** 2))),
        ("glrlm", "ShortRunHighGrayLevelEmphasis"):
            float(np.sum(r * i[:, None] ** 2 / j ** 2)),
        ("glrlm", "LongRunLowGrayLevelEmphasis"):
            float(np.sum(r * j ** 2 / i[:, None] ** 2)),
        ("glrlm", "LongRunHighGrayLevelEmphasis"):
            float(np.sum(r * i[:, None] ** 2 * j ** 2)),
    }
    return FeatureMap(entries)


def glszm_features(m: GlszMatrix) -> FeatureMap:
    """Mirror of the run-length family with connected zones for runs."""
    z = m.counts / m.total_zones
    i = np.arange(1, m.ng + 1, dtype=np.float64)
    s = np.arange(1, m.max_zone_size + 1, dtype=np.float64)
    p_level = z.sum(axis=1)
    p_size = z.sum(axis=0)
    mu_level = float(np.dot(i, p_level))
    mu_size = float(np.dot(s, p_size))
    level_sums = m.counts.sum(axis=1).astype(np.float64)
    size_sums = m.counts.sum(axis=0).astype(np.float64)

    entries: dict[tuple[str, str], float | None] = {
        ("glszm", "SmallAreaEmphasis"): float(np.sum(z / s ** 2)),
        ("glszm", "LargeAreaEmphasis"): float(np.sum(z * s ** 2)),
        ("glszm", "GrayLevelNonUniformity"):
            float(np.sum(level_sums ** 2) / m.total_zones),
        ("glszm", "SizeZoneNonUniformity"):
            float(np.sum(size_sums ** 2) / m.total_zones),
        ("glszm", "ZonePercentage"): m.total_zones / m.num_roi_voxels,
        ("glszm", "GrayLevelVariance"):
            float(np.dot((i - mu_level) ** 2, p_level)),
        ("glszm", "ZoneVariance"): float(np.dot((s - mu_size) ** 2, p_size)),
        ("glszm", "ZoneEntropy"): _entropy_bits(z.ravel()),
        ("glszm", "LowGrayLevelZoneEmphasis"):
            float(np.sum(z / i[:, None] ** 2)),
        ("glszm", "HighGrayLevelZoneEmphasis"):
            float(np.sum(z * i[:, None] ** 2)),
        ("glszm", "SmallAreaLowGrayLevelEmphasis"):
            float(np.sum(z / (i[:, None] ** 2 * s ** 2))),
        ("glszm", "SmallAreaHighGrayLevelEmphasis"):
            float(np.sum(z * i[:, None] ** 2 / s ** 2)),
        ("glszm", "LargeAreaLowGrayLevelEmphasis"):
            float(np.sum(z * s ** 2 / i[:, None] ** 2)),
        ("glszm", "LargeAreaHighGrayLevelEmphasis"):
            float(np.sum(z * i[:, None] ** 2 * s ** 2)),
    }
    return FeatureMap(entries)
