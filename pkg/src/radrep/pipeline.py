"""Batch extraction over a run manifest and the analysis report driver.

``extract_run`` executes the configuration matrix (normalization modes x
bin widths, at one texture dimensionality) over every cohort entry and
writes one feature CSV per (image type, configuration cell). Outputs are
deterministic: fixed column order, rows sorted by (study, series,
structure), and 17-significant-digit float formatting, so identical
inputs produce byte-identical files. Per-row failures go to an errors
sidecar and never abort the run.

``analyze_run`` parses extraction CSVs back into repeatability tables
and emits the report suite: per-feature ICC tables, bin-width spread
with its KDE curve, rank distributions, top-3 per feature class, filter
frequency above the Volume reference, and configuration deltas.
"""

from __future__ import annotations

import csv
import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
from scipy import ndimage

from . import RadrepError, __version__
from .discretize import DiscretizationSpec, GeometryMismatch, discretize_roi
from .features import (FEATURE_ROSTER, firstorder_features,
                       glcm_features, glrlm_features, glszm_features,
                       shape_features)
from .preprocess import (LOG_SIGMAS_MM, WAVELET_SUBBANDS_2D,
                         WAVELET_SUBBANDS_3D, FilterKind, FilterSpec,
                         NormalizationSpec, apply_filter, filter_wavelet,
                         normalize)
from .repeatability import (VOLUME_REFERENCE_FEATURE, ConfigKey,
                            DegenerateSamples, InsufficientFeatures,
                            InsufficientSubjects, MIN_SUBJECTS,
                            RepeatabilityTable, SubjectRow, binwidth_spread,
                            build_table, config_delta, filter_frequency, kde,
                            rank_distribution, split_feature_key,
                            top_k_per_class)
from .texture_matrices import build_glcm, build_glrlm, build_glszm
from .volume_io import (RoiMask, Structure, VolumeGrid, check_geometry,
                        read_mask, read_volume)

IMAGE_TYPES = ("T2AX", "ADC", "SUB")
NORMALIZATION_MODES = ("none", "wholeImage", "referenceRegion")
META_COLUMNS = ("study", "series", "canonicalType", "segmentedStructure")
GENERAL_INFO_COLUMNS = (
    "general_info_BoundingBox", "general_info_EnabledImageTypes",
    "general_info_GeneralSettings", "general_info_ImageHash",
    "general_info_ImageSpacing", "general_info_MaskHash",
    "general_info_VersionTags", "general_info_VolumeNum",
    "general_info_VoxelNum",
)


class PipelineError(RadrepError):
    pass


class ManifestError(PipelineError):
    """The run manifest is malformed or references missing files."""


class SchemaMismatch(PipelineError):
    """A CSV column or value does not match the expected schema."""


class MissingReport(PipelineError):
    """plotdata input directory holds no analysis reports."""


def format_value(value) -> str:
    """CSV cell formatting: 17 significant digits, empty for undefined."""
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskRef:
    structure: Structure
    path: Path


@dataclass(frozen=True)
class CohortEntry:
    subject_id: str
    timepoint: int
    image_type: str
    image_path: Path
    masks: tuple[MaskRef, ...]
    reference_mask_path: Path | None = None

    @property
    def study(self) -> str:
        return f"{self.subject_id}_tp{self.timepoint}"


@dataclass(frozen=True)
class RunSettings:
    normalization_modes: tuple[str, ...]
    bin_widths: tuple[float, ...]
    dimensionality: str
    filters: tuple[FilterSpec, ...]
    registered_masks: bool = False
    bias_corrected: bool = False


@dataclass(frozen=True)
class RunManifest:
    cohort: tuple[CohortEntry, ...]
    settings: RunSettings


def default_filters(dimensionality: str) -> tuple[FilterSpec, ...]:
    """The full filter catalog at the given texture dimensionality."""
    subbands = WAVELET_SUBBANDS_2D if dimensionality == "2D" else WAVELET_SUBBANDS_3D
    wavelet_kind = (FilterKind.WAVELET_2D if dimensionality == "2D"
                    else FilterKind.WAVELET_3D)
    specs = [FilterSpec(FilterKind.ORIGINAL)]
    specs += [FilterSpec(FilterKind.LOG, sigma_mm=s) for s in LOG_SIGMAS_MM]
    specs += [FilterSpec(wavelet_kind, subband=b) for b in subbands]
    specs += [FilterSpec(k) for k in (FilterKind.SQUARE, FilterKind.SQUARE_ROOT,
                                      FilterKind.LOGARITHM, FilterKind.EXPONENTIAL)]
    return tuple(specs)


def _expand_filter_names(names, dimensionality: str) -> tuple[FilterSpec, ...]:
    subbands = WAVELET_SUBBANDS_2D if dimensionality == "2D" else WAVELET_SUBBANDS_3D
    wavelet_kind = (FilterKind.WAVELET_2D if dimensionality == "2D"
                    else FilterKind.WAVELET_3D)
    specs: list[FilterSpec] = []
    for name in names:
        if name == "wavelet":
            specs += [FilterSpec(wavelet_kind, subband=b) for b in subbands]
        elif name == "log":
            specs += [FilterSpec(FilterKind.LOG, sigma_mm=s) for s in LOG_SIGMAS_MM]
        else:
            try:
                specs.append(FilterSpec.from_name(name))
            except ValueError as exc:
                raise ManifestError(str(exc)) from None
    seen = set()
    unique = []
    for spec in specs:
        if spec.name not in seen:
            seen.add(spec.name)
            unique.append(spec)
    return tuple(unique)


def load_manifest(path) -> RunManifest:
    """Parse and validate a JSON run manifest."""
    path = Path(path)
    base = path.parent
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    settings_doc = doc.get("settings", {})
    dimensionality = settings_doc.get("dimensionality", "3D")
    if dimensionality not in ("2D", "3D"):
        raise ManifestError(f"dimensionality must be 2D or 3D, got {dimensionality!r}")
    modes = tuple(settings_doc.get("normalizationModes", ["none"]))
    for mode in modes:
        if mode not in NORMALIZATION_MODES:
            raise ManifestError(f"unknown normalization mode {mode!r}")
    bin_widths = tuple(float(w) for w in settings_doc.get("binWidths", [15.0]))
    if any(w <= 0 for w in bin_widths):
        raise ManifestError("bin widths must be > 0")
    filter_names = settings_doc.get("filters")
    if filter_names is None:
        filters = default_filters(dimensionality)
    else:
        filters = _expand_filter_names(filter_names, dimensionality)
    settings = RunSettings(
        normalization_modes=modes,
        bin_widths=bin_widths,
        dimensionality=dimensionality,
        filters=filters,
        registered_masks=bool(settings_doc.get("registeredMasks", False)),
        bias_corrected=bool(settings_doc.get("biasCorrected", False)),
    )

    entries: list[CohortEntry] = []
    for item in doc.get("cohort", []):
        try:
            structure_masks = tuple(
                MaskRef(Structure(m["structure"]), base / m["path"])
                for m in item["masks"]
            )
            entry = CohortEntry(
                subject_id=str(item["subjectId"]),
                timepoint=int(item["timepoint"]),
                image_type=str(item["imageType"]),
                image_path=base / item["imagePath"],
                masks=structure_masks,
                reference_mask_path=(base / item["referenceMaskPath"])
                if item.get("referenceMaskPath") else None,
            )
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"malformed cohort entry {item!r}: {exc}") from exc
        if entry.timepoint not in (1, 2):
            raise ManifestError(f"timepoint must be 1 or 2, got {entry.timepoint}")
        if entry.image_type not in IMAGE_TYPES:
            raise ManifestError(f"unknown image type {entry.image_type!r}")
        entries.append(entry)
    if not entries:
        raise ManifestError("manifest cohort is empty")

    by_key: dict[tuple[str, str], set[int]] = {}
    for entry in entries:
        by_key.setdefault((entry.subject_id, entry.image_type), set()).add(
            entry.timepoint)
    for (subject, image_type), tps in sorted(by_key.items()):
        if tps != {1, 2}:
            raise ManifestError(
                f"subject {subject!r} has timepoints {sorted(tps)} for "
                f"{image_type}; both 1 and 2 are required"
            )

    for entry in entries:
        paths = [entry.image_path] + [m.path for m in entry.masks]
        if entry.reference_mask_path:
            paths.append(entry.reference_mask_path)
        for p in paths:
            if not p.is_file():
                raise ManifestError(f"missing input file: {p}")
    return RunManifest(cohort=tuple(entries), settings=settings)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------

def config_csv_name(image_type: str, normalization: str, bin_width: float,
                    settings: RunSettings) -> str:
    """Filename encoding the configuration cell via its code words."""
    parts = ["FullStudySettings"]
    if normalization == "none":
        parts.append("noNormalization")
    elif normalization == "referenceRegion":
        parts.append("MuscleRefNorm")
    parts.append(settings.dimensionality)
    if settings.bias_corrected:
        parts.append("biasCorrected")
    if settings.registered_masks:
        parts.append("TP2Registered")
    parts.append(image_type)
    parts.append(f"bin{bin_width:g}")
    return "_".join(parts) + ".csv"


def feature_columns(filters: tuple[FilterSpec, ...]) -> list[str]:
    """Fixed column order: shape under 'original', then per-filter classes."""
    columns = [f"original_shape_{name}" for name in FEATURE_ROSTER["shape"]]
    for spec in filters:
        for cls in ("firstorder", "glcm", "glrlm", "glszm"):
            columns += [f"{spec.name}_{cls}_{name}" for name in FEATURE_ROSTER[cls]]
    return columns


class _VolumeCache:
    """Memoizes loaded, normalized, and filtered volumes across tasks.

    All cached transforms are pure functions of immutable inputs, so a
    duplicated computation under thread contention would be harmless;
    the lock just avoids wasted work.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._store: dict = {}

    def _get(self, key, compute):
        with self._lock:
            if key in self._store:
                return self._store[key]
        value = compute()
        with self._lock:
            self._store.setdefault(key, value)
            return self._store[key]

    def image(self, path: Path) -> VolumeGrid:
        return self._get(("image", str(path)), lambda: read_volume(path))

    def mask(self, path: Path, structure: Structure) -> RoiMask:
        return self._get(("mask", str(path), structure.value),
                         lambda: read_mask(path, structure))

    def normalized(self, entry: CohortEntry, mode: str) -> VolumeGrid:
        def compute():
            image = self.image(entry.image_path)
            if mode == "none":
                return image
            if mode == "wholeImage":
                return normalize(image, NormalizationSpec.whole_image())
            if entry.reference_mask_path is None:
                from .preprocess import MissingReferenceMask
                raise MissingReferenceMask(
                    f"{entry.study}: referenceRegion normalization requires "
                    "referenceMaskPath"
                )
            reference = self.mask(entry.reference_mask_path,
                                  Structure.MUSCLE_REFERENCE)
            return normalize(image, NormalizationSpec.reference_region(reference))
        return self._get(("norm", str(entry.image_path),
                          str(entry.reference_mask_path), mode), compute)

    def filtered(self, entry: CohortEntry, mode: str,
                 spec: FilterSpec) -> VolumeGrid:
        base_key = ("filt", str(entry.image_path), str(entry.reference_mask_path),
                    mode, spec.name)
        if spec.kind in (FilterKind.WAVELET_2D, FilterKind.WAVELET_3D):
            dim = "2D" if spec.kind is FilterKind.WAVELET_2D else "3D"
            def compute_all():
                return filter_wavelet(self.normalized(entry, mode), dim)
            bands = self._get(("wavelet", str(entry.image_path),
                               str(entry.reference_mask_path), mode, dim),
                              compute_all)
            return bands[spec.subband]
        return self._get(base_key,
                         lambda: apply_filter(self.normalized(entry, mode), spec))


@dataclass
class ExtractionFailure:
    study: str
    structure: str
    filter_name: str
    error: str
    detail: str


def _filter_task(cache: _VolumeCache, entry: CohortEntry, mask: RoiMask,
                 mode: str, spec: FilterSpec, bin_width: float,
                 dimensionality: str):
    """Feature values for one (image, mask, filter) cell.

    Returns (column -> value, failures); a failing feature class blanks
    its columns and is reported, other classes still compute.
    """
    values: dict[str, float | None] = {}
    failures: list[ExtractionFailure] = []

    def record(exc: Exception, cls: str):
        failures.append(ExtractionFailure(
            study=entry.study, structure=mask.structure.value,
            filter_name=spec.name, error=type(exc).__name__,
            detail=f"{cls}: {exc}"))

    try:
        volume = cache.filtered(entry, mode, spec)
    except Exception as exc:  # filter itself failed: all classes blank
        record(exc, "all")
        return values, failures

    disc_spec = DiscretizationSpec(bin_width)
    try:
        fmap = firstorder_features(volume, mask, disc_spec)
        for (_, name), v in fmap.entries.items():
            values[f"{spec.name}_firstorder_{name}"] = v
    except Exception as exc:
        record(exc, "firstorder")
    try:
        disc = discretize_roi(volume, mask, disc_spec)
    except Exception as exc:
        record(exc, "texture")
        return values, failures
    for cls, build, compute in (
        ("glcm", build_glcm, glcm_features),
        ("glrlm", build_glrlm, glrlm_features),
        ("glszm", build_glszm, glszm_features),
    ):
        try:
            fmap = compute(build(disc, dimensionality))
            for (_, name), v in fmap.entries.items():
                values[f"{spec.name}_{cls}_{name}"] = v
        except Exception as exc:
            record(exc, cls)
    return values, failures


def _bounding_box(mask: RoiMask) -> str:
    idx = np.argwhere(mask.labels > 0)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    return " ".join(str(int(v)) for v in (*lo, *hi))


def _general_info(entry: CohortEntry, image: VolumeGrid, mask: RoiMask,
                  mode: str, bin_width: float, settings: RunSettings) -> dict:
    general_settings = (
        f"normalization={mode};binWidth={bin_width:g};"
        f"dimensionality={settings.dimensionality};"
        f"registeredMasks={str(settings.registered_masks).lower()};"
        f"biasCorrected={str(settings.bias_corrected).lower()}"
    )
    volume_num = int(ndimage.label(mask.labels > 0,
                                   structure=np.ones((3, 3, 3), dtype=bool))[1])
    return {
        "general_info_BoundingBox": _bounding_box(mask),
        "general_info_EnabledImageTypes":
            ";".join(s.name for s in settings.filters),
        "general_info_GeneralSettings": general_settings,
        "general_info_ImageHash": image.payload_hash(),
        "general_info_ImageSpacing":
            " ".join(format_value(s) for s in image.spacing),
        "general_info_MaskHash": mask.payload_hash(),
        "general_info_VersionTags":
            f"radrep={__version__};numpy={np.__version__};scipy={scipy.__version__}",
        "general_info_VolumeNum": volume_num,
        "general_info_VoxelNum": mask.voxel_count,
    }


def extract_run(manifest: RunManifest, out_dir, jobs: int = 1,
                ) -> tuple[list[Path], list[ExtractionFailure]]:
    """Run the full configuration matrix; returns (csv paths, failures).

    One CSV per (image type, normalization mode, bin width); rows per
    (cohort entry, structure) sorted by (study, series, structure).
    Failures are also written to ``extraction_errors.csv`` when any occur.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    settings = manifest.settings
    cache = _VolumeCache()
    all_failures: list[ExtractionFailure] = []
    csv_paths: list[Path] = []

    image_types = sorted({e.image_type for e in manifest.cohort})
    columns = (list(GENERAL_INFO_COLUMNS) + feature_columns(settings.filters)
               + list(META_COLUMNS))

    for image_type in image_types:
        entries = [e for e in manifest.cohort if e.image_type == image_type]
        for mode in settings.normalization_modes:
            for bin_width in settings.bin_widths:
                rows, failures = _extract_cell(
                    cache, entries, mode, bin_width, settings, jobs)
                all_failures.extend(failures)
                name = config_csv_name(image_type, mode, bin_width, settings)
                path = out_dir / name
                _write_feature_csv(path, columns, rows)
                csv_paths.append(path)

    if all_failures:
        _write_failures(out_dir / "extraction_errors.csv", all_failures)
    return csv_paths, all_failures


def _extract_cell(cache: _VolumeCache, entries: list[CohortEntry], mode: str,
                  bin_width: float, settings: RunSettings, jobs: int):
    """All rows of one configuration cell (one output CSV)."""
    failures: list[ExtractionFailure] = []
    row_specs = []  # (sort key, entry, mask or None)
    for entry in entries:
        for mask_ref in entry.masks:
            sort_key = (entry.study, entry.image_path.stem,
                        mask_ref.structure.value)
            try:
                image = cache.image(entry.image_path)
                mask = cache.mask(mask_ref.path, mask_ref.structure)
                if not check_geometry(image, mask):
                    raise GeometryMismatch(
                        f"mask {mask_ref.path.name} does not match image grid")
            except Exception as exc:
                failures.append(ExtractionFailure(
                    study=entry.study, structure=mask_ref.structure.value,
                    filter_name="*", error=type(exc).__name__, detail=str(exc)))
                continue
            row_specs.append((sort_key, entry, mask))
    row_specs.sort(key=lambda item: item[0])

    tasks = [(i, spec) for i, (_, entry, mask) in enumerate(row_specs)
             for spec in settings.filters]

    def run_task(task):
        i, spec = task
        _, entry, mask = row_specs[i]
        return i, _filter_task(cache, entry, mask, mode, spec, bin_width,
                               settings.dimensionality)

    results: dict[int, dict[str, float | None]] = {i: {} for i in
                                                   range(len(row_specs))}
    if jobs > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(run_task, tasks))
    else:
        outputs = [run_task(t) for t in tasks]
    for i, (values, task_failures) in outputs:
        results[i].update(values)
        failures.extend(task_failures)

    rows = []
    for i, (sort_key, entry, mask) in enumerate(row_specs):
        study, series, structure = sort_key
        row = dict(results[i])
        try:
            shape_map = shape_features(mask)
            for (_, name), v in shape_map.entries.items():
                row[f"original_shape_{name}"] = v
            image = cache.image(entry.image_path)
            row.update(_general_info(entry, image, mask, mode, bin_width,
                                     settings))
        except Exception as exc:
            failures.append(ExtractionFailure(
                study=study, structure=structure, filter_name="*",
                error=type(exc).__name__, detail=str(exc)))
        row["study"] = study
        row["series"] = series
        row["canonicalType"] = entry.image_type
        row["segmentedStructure"] = structure
        rows.append(row)
    return rows, failures


def _write_feature_csv(path: Path, columns: list[str], rows: list[dict]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([
                row.get(col, "") if isinstance(row.get(col, ""), str)
                else format_value(row.get(col))
                for col in columns
            ])


def _write_failures(path: Path, failures: list[ExtractionFailure]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["study", "segmentedStructure", "filter", "error",
                         "detail"])
        for f in sorted(failures, key=lambda f: (f.study, f.structure,
                                                 f.filter_name, f.error)):
            writer.writerow([f.study, f.structure, f.filter_name, f.error,
                             f.detail])


# ---------------------------------------------------------------------------
# Schema validation
# ---------------------------------------------------------------------------

def validate_feature_csv(path) -> None:
    """Check the emitted-CSV column grammar; raises SchemaMismatch.

    Layout: general_info_* columns first, then feature columns named
    ``[pre-filter]_[feature group]_[feature name]`` with known groups,
    names, and parseable filter prefixes, then exactly the four meta
    columns.
    """
    with open(path, newline="") as handle:
        header = next(csv.reader(handle))
    if len(header) < len(META_COLUMNS) + 1:
        raise SchemaMismatch(f"{path}: too few columns")
    if tuple(header[-4:]) != META_COLUMNS:
        raise SchemaMismatch(
            f"{path}: last four columns must be {META_COLUMNS}, got {header[-4:]}")
    body = header[:-4]
    i = 0
    while i < len(body) and body[i].startswith("general_info_"):
        i += 1
    if i == 0:
        raise SchemaMismatch(f"{path}: no general_info_ columns at the front")
    for column in body[i:]:
        if column.startswith("general_info_"):
            raise SchemaMismatch(
                f"{path}: general_info column {column!r} after feature columns")
        try:
            flt, cls, name = split_feature_key(column)
        except ValueError as exc:
            raise SchemaMismatch(f"{path}: {exc}") from None
        if name not in FEATURE_ROSTER[cls]:
            raise SchemaMismatch(f"{path}: unknown feature {column!r}")
        try:
            FilterSpec.from_name(flt)
        except ValueError as exc:
            raise SchemaMismatch(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Analysis driver
# ---------------------------------------------------------------------------

_STUDY_PATTERN = re.compile(r"^(?P<subject>.+?)[_-][tT][pP](?P<timepoint>\d+)$")


def _parse_study(study: str, mapping: dict | None) -> tuple[str, int]:
    if mapping and study in mapping:
        subject, timepoint = mapping[study]
        return str(subject), int(timepoint)
    match = _STUDY_PATTERN.match(study)
    if not match:
        raise SchemaMismatch(
            f"study value {study!r} is not '<subject>_tp<N>' and no "
            "timepoint map entry covers it"
        )
    return match.group("subject"), int(match.group("timepoint"))


@dataclass(frozen=True)
class ParsedConfig:
    """Configuration cell recovered from an extraction CSV filename."""

    stem: str
    image_type: str
    normalization: str
    bin_width: float
    dimensionality: str
    registered: bool

    def key(self, structure: str) -> ConfigKey:
        return ConfigKey(image_type=self.image_type, structure=structure,
                         normalization=self.normalization,
                         bin_width=self.bin_width,
                         dimensionality=self.dimensionality,
                         registered=self.registered)

    def group(self) -> tuple:
        """Identity ignoring bin width (for cross-bin-width analyses)."""
        return (self.image_type, self.normalization, self.dimensionality,
                self.registered)


def parse_config_from_name(path) -> ParsedConfig:
    stem = Path(path).stem
    tokens = stem.split("_")
    normalization = "wholeImage"
    if "noNormalization" in tokens:
        normalization = "none"
    elif "MuscleRefNorm" in tokens:
        normalization = "referenceRegion"
    dimensionality = "2D" if ("2D" in tokens or "2d" in tokens) else "3D"
    bin_width = None
    image_type = None
    for token in tokens:
        if re.fullmatch(r"bin\d+(\.\d+)?", token):
            bin_width = float(token[3:])
        elif token in IMAGE_TYPES:
            image_type = token
    if bin_width is None or image_type is None:
        raise SchemaMismatch(
            f"{stem}: filename lacks a binNN or image-type code")
    return ParsedConfig(stem=stem, image_type=image_type,
                        normalization=normalization, bin_width=bin_width,
                        dimensionality=dimensionality,
                        registered="TP2Registered" in tokens)


_INFO_PREFIXES = ("general_info_", "diagnostics_")


def read_feature_csv(path, timepoint_map: dict | None = None,
                     ) -> dict[str, list[SubjectRow]]:
    """Parse an extraction CSV into rows grouped by structure."""
    by_structure: dict[str, list[SubjectRow]] = {}
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise SchemaMismatch(f"{path}: empty file")
        feature_cols = []
        for column in reader.fieldnames:
            # "" tolerates a leading unnamed index column in foreign files
            if column in META_COLUMNS or column == "" or \
                    column.startswith(_INFO_PREFIXES):
                continue
            try:
                split_feature_key(column)
            except ValueError:
                raise SchemaMismatch(
                    f"{path}: unknown column pattern {column!r}") from None
            feature_cols.append(column)
        if "study" not in reader.fieldnames:
            raise SchemaMismatch(f"{path}: no 'study' meta column")
        for record in reader:
            subject, timepoint = _parse_study(record["study"], timepoint_map)
            values: dict[str, float | None] = {}
            for column in feature_cols:
                cell = record[column]
                values[column] = float(cell) if cell not in ("", None) else None
            structure = record.get("segmentedStructure", "")
            by_structure.setdefault(structure, []).append(
                SubjectRow(subject=subject, timepoint=timepoint, values=values))
    return by_structure


def _check_cohort_size(rows: list[SubjectRow], context: str):
    complete = {
        subject
        for subject in {r.subject for r in rows}
        if {r.timepoint for r in rows if r.subject == subject} >= {1, 2}
    }
    if len(complete) < MIN_SUBJECTS:
        raise InsufficientSubjects(
            f"{context}: {len(complete)} subject(s) with both timepoints; "
            f"need >= {MIN_SUBJECTS}"
        )


def _write_csv(path: Path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_icc_table(path: Path, table: RepeatabilityTable):
    reference = table.volume_reference.icc
    rows = []
    for feature_key in sorted(table.rows):
        flt, cls, name = split_feature_key(feature_key)
        result = table.rows[feature_key]
        rows.append([
            cls, name, flt, format_value(table.key.bin_width),
            format_value(result.icc), format_value(result.bms),
            format_value(result.wms), str(result.n),
            "1" if result.icc > reference else "0",
        ])
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    _write_csv(path, ["featureClass", "featureName", "filter", "binWidth",
                      "icc", "bms", "wms", "n", "aboveVolumeReference"], rows)


def analyze_run(csv_paths, out_dir, reference: str = VOLUME_REFERENCE_FEATURE,
                compare: tuple[str, str] | None = None,
                timepoint_map_path=None) -> list[Path]:
    """Build repeatability tables from extraction CSVs and write reports.

    Emits per-table ICC CSVs, top-3 and filter-frequency JSON, bin-width
    spread + KDE + rank-distribution files for groups of tables that
    differ only in bin width, and (optionally) a config-delta report for
    the two named configurations.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timepoint_map = None
    if timepoint_map_path:
        raw = json.loads(Path(timepoint_map_path).read_text())
        timepoint_map = {k: (v[0], v[1]) for k, v in raw.items()}

    tables: dict[tuple[str, str], RepeatabilityTable] = {}
    configs: dict[str, ParsedConfig] = {}
    written: list[Path] = []
    for path in sorted(Path(p) for p in csv_paths):
        config = parse_config_from_name(path)
        configs[config.stem] = config
        for structure, rows in sorted(read_feature_csv(path, timepoint_map).items()):
            _check_cohort_size(rows, f"{config.stem}/{structure}")
            table = build_table(rows, config.key(structure),
                                reference_feature=reference)
            tables[(config.stem, structure)] = table

            icc_path = out_dir / f"icc__{config.stem}__{structure}.csv"
            _write_icc_table(icc_path, table)
            written.append(icc_path)

            try:
                top = top_k_per_class(table, k=3)
                payload = {cls: [[feature, icc] for feature, icc in pairs]
                           for cls, pairs in top.items()}
            except InsufficientFeatures as exc:
                payload = {"error": str(exc)}
            top_path = out_dir / f"top3__{config.stem}__{structure}.json"
            _write_json(top_path, payload)
            written.append(top_path)

            freq = filter_frequency(table)
            freq_path = out_dir / f"filterfreq__{config.stem}__{structure}.json"
            _write_json(freq_path, {
                "counts": freq.counts,
                "totalAboveReference": freq.total_above_reference,
                "volumeReferenceIcc": table.volume_reference.icc,
            })
            written.append(freq_path)

    written += _binwidth_reports(tables, configs, out_dir)
    if compare:
        written += _delta_reports(tables, compare, out_dir)
    return written


def _binwidth_reports(tables, configs, out_dir: Path) -> list[Path]:
    """Spread, KDE, and rank-distribution files per cross-bin-width group.

    Features whose ICC is defined at some bin widths but not others (the
    per-feature subject-dropping rule makes this possible) are excluded
    from the cross-width comparison and listed in a notes file rather
    than silently vanishing.
    """
    written: list[Path] = []
    groups: dict[tuple, dict[float, tuple[str, RepeatabilityTable]]] = {}
    for (stem, structure), table in tables.items():
        config = configs[stem]
        groups.setdefault((config.group(), structure), {})[config.bin_width] = (
            stem, table)
    for (group, structure), by_width in sorted(
            groups.items(), key=lambda kv: str(kv[0])):
        if len(by_width) < 2:
            continue
        image_type, normalization, dimensionality, registered = group
        code = "_".join([
            image_type,
            {"none": "noNormalization", "wholeImage": "wholeImageNorm",
             "referenceRegion": "MuscleRefNorm"}[normalization],
            dimensionality] + (["TP2Registered"] if registered else []))

        feature_sets = [set(t.rows) for _, t in by_width.values()]
        shared = set.intersection(*feature_sets)
        excluded = sorted(set.union(*feature_sets) - shared)
        if not shared:
            continue
        if excluded:
            notes_path = out_dir / f"binwidth_notes__{code}__{structure}.json"
            _write_json(notes_path, {"excludedFeatures": excluded})
            written.append(notes_path)
        width_tables = {
            w: RepeatabilityTable(
                key=t.key,
                rows={k: t.rows[k] for k in sorted(shared)},
                volume_reference=t.volume_reference,
                dropped=t.dropped)
            for w, (_, t) in by_width.items()
        }

        spread = binwidth_spread(width_tables)
        spread_path = out_dir / f"spread__{code}__{structure}.csv"
        _write_csv(spread_path, ["featureKey", "maxDeltaIcc"],
                   [[k, format_value(v)] for k, v in sorted(spread.items())])
        written.append(spread_path)

        try:
            curve = kde(np.array(list(spread.values())))
        except DegenerateSamples:
            curve = None
        if curve is not None:
            kde_path = out_dir / f"kde_spread__{code}__{structure}.csv"
            _write_csv(kde_path, ["maxDeltaIcc", "density"],
                       [[format_value(x), format_value(d)]
                        for x, d in zip(curve.abscissa, curve.density)])
            written.append(kde_path)

        histograms = rank_distribution(width_tables)
        rank_rows = []
        for width in sorted(histograms):
            for rank in sorted(histograms[width]):
                rank_rows.append([format_value(width), format_value(rank),
                                  str(histograms[width][rank])])
        rank_path = out_dir / f"rankdist__{code}__{structure}.csv"
        _write_csv(rank_path, ["binWidth", "rank", "count"], rank_rows)
        written.append(rank_path)
    return written


def _delta_reports(tables, compare: tuple[str, str], out_dir: Path
                   ) -> list[Path]:
    stem_a, stem_b = compare
    structures = sorted({
        structure for (stem, structure) in tables
        if stem in (stem_a, stem_b)
    })
    written: list[Path] = []
    for structure in structures:
        if (stem_a, structure) not in tables or (stem_b, structure) not in tables:
            continue
        delta = config_delta(tables[(stem_a, structure)],
                             tables[(stem_b, structure)])
        improved = sum(1 for _, _, d in delta.shared.values() if d > 0)
        payload = {
            "configA": stem_a,
            "configB": stem_b,
            "shared": {k: {"iccA": a, "iccB": b, "delta": d}
                       for k, (a, b, d) in delta.shared.items()},
            "onlyA": list(delta.only_a),
            "onlyB": list(delta.only_b),
            "improvedCount": improved,
            "sharedCount": len(delta.shared),
        }
        path = out_dir / f"delta__{stem_a}__vs__{stem_b}__{structure}.json"
        _write_json(path, payload)
        written.append(path)
    if not written:
        raise MissingReport(
            f"no structure is present in both {stem_a!r} and {stem_b!r}")
    return written


# ---------------------------------------------------------------------------
# Plot-data emission
# ---------------------------------------------------------------------------

def plotdata_run(in_dir, out_dir) -> list[Path]:
    """Convert analysis reports into plot-ready long/two-column CSVs."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for path in sorted(in_dir.glob("icc__*.csv")):
        rows = []
        with open(path, newline="") as handle:
            for record in csv.DictReader(handle):
                rows.append([
                    f"{record['featureClass']}_{record['featureName']}",
                    record["filter"], record["binWidth"], record["icc"],
                ])
        out = out_dir / f"plot_{path.stem}.csv"
        _write_csv(out, ["feature", "filter", "binWidth", "icc"], rows)
        written.append(out)

    for pattern in ("kde_spread__*.csv", "rankdist__*.csv", "spread__*.csv"):
        for path in sorted(in_dir.glob(pattern)):
            out = out_dir / f"plot_{path.stem}.csv"
            out.write_bytes(path.read_bytes())
            written.append(out)

    for path in sorted(in_dir.glob("top3__*.json")):
        payload = json.loads(path.read_text())
        rows = []
        if "error" not in payload:
            for cls in sorted(payload):
                for feature, icc in payload[cls]:
                    rows.append([cls, feature, format_value(icc)])
        out = out_dir / f"plot_{path.stem}.csv"
        _write_csv(out, ["featureClass", "feature", "icc"], rows)
        written.append(out)

    for path in sorted(in_dir.glob("filterfreq__*.json")):
        payload = json.loads(path.read_text())
        rows = [[name, str(count)]
                for name, count in sorted(payload["counts"].items())]
        rows.append(["TOTAL_ABOVE_REFERENCE",
                     str(payload["totalAboveReference"])])
        out = out_dir / f"plot_{path.stem}.csv"
        _write_csv(out, ["filterName", "count"], rows)
        written.append(out)

    for path in sorted(in_dir.glob("delta__*.json")):
        payload = json.loads(path.read_text())
        rows = [[k, format_value(v["iccA"]), format_value(v["iccB"]),
                 format_value(v["delta"])]
                for k, v in sorted(payload["shared"].items())]
        out = out_dir / f"plot_{path.stem}.csv"
        _write_csv(out, ["feature", "iccA", "iccB", "delta"], rows)
        written.append(out)

    if not written:
        raise MissingReport(f"no analysis reports found under {in_dir}")
    return written
