"""From raw cohort records to model-ready night instances.

The chain is: collapse raw readings to an hourly grid, derive mean arterial
pressure and drop systolic pressure, forward-fill gaps, find the infection
onset from cultures and organ-dysfunction scores, cut one 9-hour window per
eligible night (22:00 through 06:00) for hospital days 3 to 14, label each
window by whether the first onset falls in the following 24 hours, and drop
windows that still contain gaps or that lie past the first onset.

Feature-subset selection, min-max scaling fitted on training folds only,
stratified fold assignment and the per-class resampling used for training
live here too, along with the instances.csv round trip.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from datetime import datetime, timedelta

import numpy as np

from .cohort import (
    CUMULATIVE_FIELDS,
    HOUR,
    STATIC_FEATURES,
    PatientRecord,
    day_start,
)
from .errors import FormatError, InputError
from .model import FeatureSchema
from .util import derive_rng

# Temporal feature order is fixed: the six hourly vitals (with MAP derived and
# SBP dropped), then the five cumulative exposures.
SUBSET1_FEATURES = ("heart_rate", "dbp", "map", "resp_rate", "temperature", "fio2")
SUBSET3_FEATURES = CUMULATIVE_FIELDS
SUBSET2_FEATURES = STATIC_FEATURES
TEMPORAL_FEATURES = SUBSET1_FEATURES + SUBSET3_FEATURES

FIRST_DAY = 3
LAST_DAY = 14
NIGHT_START_HOUR = 22  # on the prior calendar day
NIGHT_END_HOUR = 6
SOFA_LOOKBACK = timedelta(hours=72)
SOFA_LOOKAHEAD = timedelta(hours=72)


def full_schema() -> FeatureSchema:
    return FeatureSchema(TEMPORAL_FEATURES, SUBSET2_FEATURES)


def subset_of(name: str) -> int:
    if name in SUBSET1_FEATURES:
        return 1
    if name in SUBSET2_FEATURES:
        return 2
    if name in SUBSET3_FEATURES:
        return 3
    raise InputError(f"unknown feature {name!r}")


@dataclass
class NightInstance:
    patient_id: str
    day_index: int
    instance_index: int
    temporal: np.ndarray  # (9, T) float64, gap-free
    statics: np.ndarray  # (S,) float64
    label: int


@dataclass(frozen=True)
class ClassStats:
    n: int
    n_pos: int
    n_neg: int
    n_classes: int = 2

    @classmethod
    def from_instances(cls, instances: list[NightInstance]) -> "ClassStats":
        n_pos = sum(1 for inst in instances if inst.label == 1)
        return cls(n=len(instances), n_pos=n_pos, n_neg=len(instances) - n_pos)


# ---------------------------------------------------------------------------
# Cleaning
# ---------------------------------------------------------------------------


def derive_map(dbp: float | None, sbp: float | None) -> float | None:
    """Mean arterial pressure (2*DBP + SBP) / 3; missing if either input is."""
    if dbp is None or sbp is None:
        return None
    if dbp <= 0.0 or sbp <= 0.0:
        raise InputError(f"blood pressures must be positive, got dbp={dbp}, sbp={sbp}")
    return (2.0 * dbp + sbp) / 3.0


def locf_impute(series: list[float | None]) -> list[float | None]:
    """Forward-fill: each gap takes the latest earlier value; leading gaps stay."""
    out: list[float | None] = []
    last: float | None = None
    for v in series:
        if v is not None:
            last = v
        out.append(last)
    return out


@dataclass
class CleanRecord:
    """Hourly grid after MAP derivation and forward filling; NaN marks a gap."""

    patient_id: str
    admit_ts: datetime
    statics: np.ndarray
    hours: list[datetime]
    values: np.ndarray  # (n_hours, len(TEMPORAL_FEATURES))
    row_of: dict[datetime, int]


def clean_record(record: PatientRecord) -> CleanRecord:
    # Multiple readings within one hour collapse to the last one of that hour.
    by_hour: dict[datetime, dict[str, float | None]] = {}
    order: list[datetime] = []
    for obs in record.hourly:
        slot = obs.ts.replace(minute=0, second=0, microsecond=0)
        if slot not in by_hour:
            by_hour[slot] = {}
            order.append(slot)
        row = by_hour[slot]
        for name in ("heart_rate", "sbp", "dbp", "resp_rate", "temperature", "fio2") + CUMULATIVE_FIELDS:
            value = getattr(obs, name)
            if value is not None or name not in row:
                row[name] = value

    columns: dict[str, list[float | None]] = {name: [] for name in TEMPORAL_FEATURES}
    for slot in order:
        row = by_hour[slot]
        for name in TEMPORAL_FEATURES:
            if name == "map":
                columns[name].append(derive_map(row.get("dbp"), row.get("sbp")))
            else:
                columns[name].append(row.get(name))

    values = np.full((len(order), len(TEMPORAL_FEATURES)), np.nan)
    for j, name in enumerate(TEMPORAL_FEATURES):
        filled = locf_impute(columns[name])
        values[:, j] = [np.nan if v is None else v for v in filled]

    return CleanRecord(
        patient_id=record.patient_id,
        admit_ts=record.admit_ts,
        statics=np.asarray(record.statics, dtype=np.float64),
        hours=order,
        values=values,
        row_of={ts: i for i, ts in enumerate(order)},
    )


# ---------------------------------------------------------------------------
# Labeling
# ---------------------------------------------------------------------------


def _hospital_day(ts: datetime, admit_ts: datetime) -> int:
    return (ts.date() - admit_ts.date()).days + 1


def derive_sepsis_labels(record: PatientRecord) -> datetime | None:
    """Earliest qualifying onset, or None.

    A positive culture drawn in hospital days 3 to 14 qualifies when the
    organ-dysfunction score rises by at least 2 points around it: the maximum
    score within 72 hours after the draw exceeds the minimum within the 72
    hours up to and including it by 2 or more. Onset time is the draw time.
    """
    if not record.sofa:
        raise InputError(f"patient {record.patient_id!r} has no organ-dysfunction scores")
    for ts, positive in sorted(record.cultures, key=lambda c: c[0]):
        if not positive:
            continue
        if not FIRST_DAY <= _hospital_day(ts, record.admit_ts) <= LAST_DAY:
            continue
        before = [s for t, s in record.sofa if ts - SOFA_LOOKBACK <= t <= ts]
        after = [s for t, s in record.sofa if ts < t <= ts + SOFA_LOOKAHEAD]
        if before and after and max(after) - min(before) >= 2:
            return ts
    return None


def onset_day_index(onset: datetime, admit_ts: datetime) -> int:
    """The day d whose prediction window (06:00 day d, 06:00 day d+1] holds onset."""
    first_boundary = day_start(admit_ts, 1) + timedelta(hours=NIGHT_END_HOUR)
    seconds = (onset - first_boundary).total_seconds()
    if seconds <= 0:
        return 0
    return int(np.ceil(seconds / 86400.0))


# ---------------------------------------------------------------------------
# Window extraction
# ---------------------------------------------------------------------------


def extract_night_instances(
    clean: CleanRecord, onset: datetime | None, schema: FeatureSchema
) -> list[NightInstance]:
    """One instance per eligible night; instance_index is stamped later."""
    col_idx = []
    for name in schema.temporal_names:
        try:
            col_idx.append(TEMPORAL_FEATURES.index(name))
        except ValueError:
            raise InputError(f"unknown temporal feature {name!r}")
    statics = clean.statics[: len(schema.static_names)]
    onset_day = onset_day_index(onset, clean.admit_ts) if onset is not None else None

    instances = []
    for day in range(FIRST_DAY, LAST_DAY + 1):
        if onset_day is not None and day > onset_day:
            break  # nights past the first onset are excluded
        window_start = day_start(clean.admit_ts, day - 1) + timedelta(hours=NIGHT_START_HOUR)
        rows = []
        for k in range(schema.window_len):
            row = clean.row_of.get(window_start + k * HOUR)
            if row is None:
                break
            rows.append(row)
        if len(rows) < schema.window_len:
            continue  # window extends outside the stay
        temporal = clean.values[np.asarray(rows)][:, col_idx]
        if np.isnan(temporal).any():
            continue  # gaps survived forward filling (leading-gap nights)
        label = 1 if onset_day is not None and day == onset_day else 0
        instances.append(
            NightInstance(
                patient_id=clean.patient_id,
                day_index=day,
                instance_index=-1,
                temporal=temporal.copy(),
                statics=statics.copy(),
                label=label,
            )
        )
    return instances


def extract_instances(
    records: list[PatientRecord], schema: FeatureSchema | None = None
) -> list[NightInstance]:
    """Label and window every record; indices are dataset-unique and stable."""
    schema = schema or full_schema()
    out: list[NightInstance] = []
    for record in records:
        onset = derive_sepsis_labels(record)
        for inst in extract_night_instances(clean_record(record), onset, schema):
            inst.instance_index = len(out)
            out.append(inst)
    return out


# ---------------------------------------------------------------------------
# Feature subsets
# ---------------------------------------------------------------------------


def select_features(
    instances: list[NightInstance], schema: FeatureSchema, subsets: set[int]
) -> tuple[list[NightInstance], FeatureSchema]:
    """Restrict instances to the requested feature subsets.

    Subset 1 (hourly vitals) is mandatory and anchors the window; subset 3
    adds the cumulative exposures; subset 2 toggles the static features.
    """
    if 1 not in subsets:
        raise InputError("feature subset 1 is required")
    if not subsets <= {1, 2, 3}:
        raise InputError(f"unknown subsets {sorted(subsets - {1, 2, 3})}")
    temporal_names = tuple(
        n for n in schema.temporal_names if subset_of(n) == 1 or (subset_of(n) == 3 and 3 in subsets)
    )
    static_names = schema.static_names if 2 in subsets else ()
    cols = [schema.temporal_names.index(n) for n in temporal_names]
    new_schema = FeatureSchema(temporal_names, static_names)
    reduced = [
        replace(
            inst,
            temporal=inst.temporal[:, cols].copy(),
            statics=inst.statics.copy() if 2 in subsets else np.empty(0),
        )
        for inst in instances
    ]
    return reduced, new_schema


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingParams:
    temporal_min: np.ndarray
    temporal_max: np.ndarray
    static_min: np.ndarray
    static_max: np.ndarray
    clamp_lo: float = -0.5
    clamp_hi: float = 1.5


def fit_minmax(instances: list[NightInstance]) -> ScalingParams:
    """Per-feature min and max; call on training folds only."""
    if not instances:
        raise InputError("cannot fit scaling on an empty instance list")
    temporal = np.concatenate([inst.temporal for inst in instances], axis=0)
    statics = np.stack([inst.statics for inst in instances], axis=0)
    return ScalingParams(
        temporal_min=temporal.min(axis=0),
        temporal_max=temporal.max(axis=0),
        static_min=statics.min(axis=0) if statics.shape[1] else np.empty(0),
        static_max=statics.max(axis=0) if statics.shape[1] else np.empty(0),
    )


def _scale(values: np.ndarray, lo: np.ndarray, hi: np.ndarray, params: ScalingParams) -> np.ndarray:
    span = hi - lo
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = np.where(span > 0.0, (values - lo) / np.where(span > 0.0, span, 1.0), 0.0)
    return np.clip(scaled, params.clamp_lo, params.clamp_hi)


def apply_minmax(instances: list[NightInstance], params: ScalingParams) -> list[NightInstance]:
    """Map to [0, 1] by the fitted ranges; constant features go to 0; values
    outside the fitted range (test folds) are clamped to [-0.5, 1.5]."""
    out = []
    for inst in instances:
        out.append(
            replace(
                inst,
                temporal=_scale(inst.temporal, params.temporal_min, params.temporal_max, params),
                statics=_scale(inst.statics, params.static_min, params.static_max, params)
                if inst.statics.size
                else inst.statics.copy(),
            )
        )
    return out


# ---------------------------------------------------------------------------
# Folds and resampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    fold_of: dict[int, int]  # instance_index -> fold id
    k: int


def stratified_kfold(instances: list[NightInstance], k: int = 5, seed: int = 0) -> DatasetSplit:
    """Shuffle each class separately and deal round-robin into k folds."""
    if k < 2:
        raise InputError(f"k must be at least 2, got {k}")
    pos = [inst.instance_index for inst in instances if inst.label == 1]
    neg = [inst.instance_index for inst in instances if inst.label == 0]
    if len(pos) < k:
        raise InputError(f"need at least {k} positive instances, got {len(pos)}")
    fold_of: dict[int, int] = {}
    for class_name, indices in (("pos", pos), ("neg", neg)):
        rng = derive_rng(seed, "kfold", class_name)
        shuffled = [indices[i] for i in rng.permutation(len(indices))]
        for i, idx in enumerate(shuffled):
            fold_of[idx] = i % k
    return DatasetSplit(fold_of=fold_of, k=k)


def resample_training(
    instances: list[NightInstance], target_per_class: int = 2600, seed: int = 0
) -> list[NightInstance]:
    """Balance a training set to ``target_per_class`` per class.

    Negatives are sampled without replacement down to the target (all kept if
    fewer); positives are drawn with replacement up to the target when scarce,
    without replacement otherwise. The output order is a seeded shuffle.
    """
    pos = [inst for inst in instances if inst.label == 1]
    neg = [inst for inst in instances if inst.label == 0]
    if not pos or not neg:
        raise InputError("resampling needs both classes present")
    rng = derive_rng(seed, "resample")
    neg_take = min(target_per_class, len(neg))
    neg_sample = [neg[i] for i in rng.choice(len(neg), size=neg_take, replace=False)]
    pos_sample = [
        pos[i]
        for i in rng.choice(len(pos), size=target_per_class, replace=len(pos) < target_per_class)
    ]
    combined = neg_sample + pos_sample
    return [combined[i] for i in rng.permutation(len(combined))]


def undersample_negatives(
    instances: list[NightInstance], target: int = 2600, seed: int = 0
) -> list[NightInstance]:
    """Cut the majority class to ``target``, leaving positives untouched."""
    pos = [inst for inst in instances if inst.label == 1]
    neg = [inst for inst in instances if inst.label == 0]
    rng = derive_rng(seed, "undersample")
    take = min(target, len(neg))
    neg_sample = [neg[i] for i in rng.choice(len(neg), size=take, replace=False)]
    combined = neg_sample + pos
    return [combined[i] for i in rng.permutation(len(combined))]


# ---------------------------------------------------------------------------
# instances.csv round trip
# ---------------------------------------------------------------------------


def _temporal_columns(schema: FeatureSchema) -> list[str]:
    return [
        f"{name}_h{hour}" for hour in range(schema.window_len) for name in schema.temporal_names
    ]


def write_instances(
    instances: list[NightInstance],
    schema: FeatureSchema,
    csv_path,
    sidecar_path,
    header_comment: str | None = None,
) -> None:
    """instances.csv plus a key=value sidecar describing columns and subsets."""
    header = (
        ["instance_index", "patient_id", "day_index", "label"]
        + _temporal_columns(schema)
        + list(schema.static_names)
    )
    with open(csv_path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for inst in instances:
            writer.writerow(
                [inst.instance_index, inst.patient_id, inst.day_index, inst.label]
                + [repr(float(v)) for v in inst.temporal.reshape(-1)]
                + [repr(float(v)) for v in inst.statics]
            )
    with open(sidecar_path, "w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write(f"window_len={schema.window_len}\n")
        fh.write(f"temporal_names={','.join(schema.temporal_names)}\n")
        fh.write(f"static_names={','.join(schema.static_names)}\n")
        for name in schema.temporal_names + schema.static_names:
            fh.write(f"subset.{name}={subset_of(name)}\n")


def read_instances(csv_path, sidecar_path) -> tuple[list[NightInstance], FeatureSchema]:
    keys: dict[str, str] = {}
    with open(sidecar_path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{sidecar_path}: bad line {line!r}")
            key, value = line.split("=", 1)
            keys[key] = value
    try:
        schema = FeatureSchema(
            temporal_names=tuple(n for n in keys["temporal_names"].split(",") if n),
            static_names=tuple(n for n in keys["static_names"].split(",") if n),
            window_len=int(keys["window_len"]),
        )
    except KeyError as exc:
        raise FormatError(f"{sidecar_path}: missing key {exc}")

    expected = (
        ["instance_index", "patient_id", "day_index", "label"]
        + _temporal_columns(schema)
        + list(schema.static_names)
    )
    t = schema.n_temporal
    instances = []
    with open(csv_path, newline="") as fh:
        header_seen = False
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                continue
            row = next(csv.reader([line]))
            if not header_seen:
                if row != expected:
                    raise FormatError(f"{csv_path}:{lineno}: header does not match sidecar")
                header_seen = True
                continue
            if len(row) != len(expected):
                raise FormatError(f"{csv_path}:{lineno}: wrong cell count")
            try:
                temporal = np.array([float(v) for v in row[4 : 4 + 9 * t]]).reshape(9, t)
                statics = np.array([float(v) for v in row[4 + 9 * t :]])
                instances.append(
                    NightInstance(
                        patient_id=row[1],
                        day_index=int(row[2]),
                        instance_index=int(row[0]),
                        temporal=temporal,
                        statics=statics,
                        label=int(row[3]),
                    )
                )
            except ValueError as exc:
                raise FormatError(f"{csv_path}:{lineno}: {exc}")
    return instances, schema
