"""Seeded synthetic EHR cohort generator and its CSV round trip.

Stands in for real trauma-ICU admissions: hourly vitals follow AR(1)
processes around per-vital baselines, cumulative exposures accumulate
monotonically, organ-dysfunction scores follow a bounded walk, and a
configured fraction of patients receives a planted infection story (one
positive culture plus a score rise shortly after) with a pre-onset
physiology drift over the preceding day. Missing values are injected last
so forward-filling downstream can restore everything but leading gaps.

Every patient is generated from a child seed derived from the master seed
and the patient's position, so generation is order-independent and
bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta

import numpy as np

from .errors import FormatError, InputError
from .util import derive_rng

VITAL_FIELDS = ("heart_rate", "sbp", "dbp", "resp_rate", "temperature", "fio2")
CUMULATIVE_FIELDS = (
    "iv_bolus_cum",
    "rbc_units_cum",
    "vent_days_cum",
    "surgeries_cum",
    "surgery_duration_cum",
)
HOURLY_FIELDS = VITAL_FIELDS + CUMULATIVE_FIELDS

# The fifteen admission-level features, in the column order of patients.csv.
STATIC_FEATURES = (
    "age",
    "sex",
    "mechanism",
    "transferred",
    "head_injury",
    "first_sbp_ed",
    "reverse_shock_index",
    "max_base_deficit_48h",
    "max_lactate_48h",
    "rbc_units_48h",
    "crystalloid_l_48h",
    "apache2",
    "antibiotic_48h",
    "surgeries_48h",
    "ed_disposition",
)

BASE_TS = datetime(2024, 1, 1, 0, 0)
HOUR = timedelta(hours=1)


@dataclass
class HourlyObservation:
    ts: datetime
    heart_rate: float | None = None
    sbp: float | None = None
    dbp: float | None = None
    resp_rate: float | None = None
    temperature: float | None = None
    fio2: float | None = None
    iv_bolus_cum: float | None = None
    rbc_units_cum: float | None = None
    vent_days_cum: float | None = None
    surgeries_cum: float | None = None
    surgery_duration_cum: float | None = None


@dataclass
class PatientRecord:
    patient_id: str
    admit_ts: datetime
    los_hours: int
    hourly: list[HourlyObservation]
    statics: list[float]
    sofa: list[tuple[datetime, int]]
    cultures: list[tuple[datetime, bool]]


@dataclass(frozen=True)
class VitalParams:
    """AR(1) model for one vital: x_t = baseline + ar * (x_{t-1} - baseline) + noise."""

    baseline: float
    ar_coeff: float
    noise_scale: float
    lo: float
    hi: float
    onset_drift: float = 0.0  # added linearly over the final drift_hours before onset


def default_vitals() -> dict[str, VitalParams]:
    return {
        "heart_rate": VitalParams(85.0, 0.90, 2.5, 30.0, 200.0, onset_drift=20.0),
        "sbp": VitalParams(120.0, 0.90, 3.0, 60.0, 220.0),
        "dbp": VitalParams(70.0, 0.90, 2.0, 30.0, 140.0),
        "resp_rate": VitalParams(18.0, 0.85, 1.0, 5.0, 50.0, onset_drift=6.0),
        "temperature": VitalParams(37.0, 0.95, 0.08, 34.0, 41.0, onset_drift=1.2),
        "fio2": VitalParams(0.40, 0.95, 0.02, 0.21, 1.0),
    }


@dataclass(frozen=True)
class GeneratorConfig:
    n_patients: int
    sepsis_fraction: float = 0.17
    onset_day_range: tuple[int, int] = (3, 14)
    missing_rate: float = 0.05
    seed: int = 0
    los_day_range: tuple[int, int] = (5, 20)
    vitals: dict[str, VitalParams] = field(default_factory=default_vitals)
    drift_hours: int = 24  # pre-onset ramp length
    sofa_rise: int = 4  # planted organ-dysfunction jump after onset
    sofa_ramp_hours: int = 12
    sofa_interval_hours: int = 6

    def __post_init__(self):
        if not 0.0 <= self.sepsis_fraction <= 1.0:
            raise InputError(f"sepsis_fraction must be in [0, 1], got {self.sepsis_fraction}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise InputError(f"missing_rate must be in [0, 1), got {self.missing_rate}")
        if self.los_day_range[0] < 5:
            raise InputError("minimum length of stay is 5 days so night windows exist")
        if set(self.vitals) != set(VITAL_FIELDS):
            raise InputError(f"vitals config must cover exactly {VITAL_FIELDS}")


def day_start(admit_ts: datetime, day: int) -> datetime:
    """Midnight opening hospital day ``day``; the admission calendar day is day 1."""
    first = datetime(admit_ts.year, admit_ts.month, admit_ts.day)
    return first + timedelta(days=day - 1)


def _septic_quota(config: GeneratorConfig) -> int:
    # floor(x + 0.5): a fixed rounding rule, independent of banker's rounding
    return int(np.floor(config.sepsis_fraction * config.n_patients + 0.5))


def _gen_patient(position: int, septic: bool, config: GeneratorConfig) -> PatientRecord:
    rng = derive_rng(config.seed, "patient", position)
    admit = BASE_TS + int(rng.integers(0, 24 * 365)) * HOUR
    los_days = int(rng.integers(config.los_day_range[0], config.los_day_range[1] + 1))
    los_hours = 24 * los_days

    onset: datetime | None = None
    if septic:
        day_lo = max(3, config.onset_day_range[0])
        day_hi = min(config.onset_day_range[1], los_days - 2)
        onset_day = int(rng.integers(day_lo, day_hi + 1))
        # Onset strictly after 06:00 of day 3 so one night window precedes it.
        first_hour = 7 if onset_day == 3 else 0
        onset = day_start(admit, onset_day) + int(rng.integers(first_hour, 24)) * HOUR

    hours = [admit + k * HOUR for k in range(los_hours)]

    vitals: dict[str, np.ndarray] = {}
    for name in VITAL_FIELDS:
        vp = config.vitals[name]
        series = np.empty(los_hours)
        level = vp.baseline + vp.noise_scale * rng.standard_normal()
        shocks = vp.noise_scale * rng.standard_normal(los_hours)
        for k in range(los_hours):
            level = vp.baseline + vp.ar_coeff * (level - vp.baseline) + shocks[k]
            series[k] = level
        if onset is not None and vp.onset_drift != 0.0:
            ages = np.array([(ts - onset) / HOUR for ts in hours])  # hours after onset
            ramp = np.clip((ages + config.drift_hours) / config.drift_hours, 0.0, 1.0)
            series = series + vp.onset_drift * ramp
        vitals[name] = np.clip(series, vp.lo, vp.hi)

    # Cumulative exposures: sparse random events, monotone by construction.
    iv = np.cumsum(np.where(rng.random(los_hours) < 0.10, rng.exponential(0.5, los_hours), 0.0))
    rbc = np.cumsum(np.where(rng.random(los_hours) < 0.02, rng.integers(1, 3, los_hours), 0))
    vent_span = int(rng.integers(0, los_hours + 1))
    vent = np.cumsum(np.where(np.arange(los_hours) < vent_span, 1.0 / 24.0, 0.0))
    surgery_events = rng.random(los_hours) < 0.01
    surgeries = np.cumsum(surgery_events.astype(float))
    surgery_dur = np.cumsum(np.where(surgery_events, rng.uniform(1.0, 4.0, los_hours), 0.0))

    hourly = [
        HourlyObservation(
            ts=hours[k],
            heart_rate=float(vitals["heart_rate"][k]),
            sbp=float(vitals["sbp"][k]),
            dbp=float(vitals["dbp"][k]),
            resp_rate=float(vitals["resp_rate"][k]),
            temperature=float(vitals["temperature"][k]),
            fio2=float(vitals["fio2"][k]),
            iv_bolus_cum=float(iv[k]),
            rbc_units_cum=float(rbc[k]),
            vent_days_cum=float(vent[k]),
            surgeries_cum=float(surgeries[k]),
            surgery_duration_cum=float(surgery_dur[k]),
        )
        for k in range(los_hours)
    ]

    # Organ-dysfunction score: bounded wiggle around a patient baseline, plus a
    # planted post-onset rise large enough to satisfy the labeling rule even
    # when the pre-onset minimum sits at the top of the wiggle band.
    sofa_base = int(rng.integers(2, 9))
    sofa: list[tuple[datetime, int]] = []
    level = sofa_base
    for k in range(0, los_hours, config.sofa_interval_hours):
        ts = hours[k]
        level = int(np.clip(level + rng.choice((-1, 0, 0, 0, 1)), max(0, sofa_base - 1), min(24, sofa_base + 1)))
        score = level
        if onset is not None and ts > onset:
            frac = min(1.0, (ts - onset) / HOUR / config.sofa_ramp_hours)
            score = min(24, level + int(round(config.sofa_rise * frac)))
        sofa.append((ts, score))

    cultures: list[tuple[datetime, bool]] = []
    if onset is not None:
        cultures.append((onset, True))
    if rng.random() < 0.3:  # incidental negative culture, ignored by labeling
        cultures.append((admit + int(rng.integers(0, los_hours)) * HOUR, False))
    cultures.sort(key=lambda c: c[0])

    statics = [
        float(rng.integers(16, 91)),  # age
        float(rng.integers(0, 2)),  # sex
        float(rng.integers(0, 5)),  # mechanism of injury, coded
        float(rng.integers(0, 2)),  # transferred
        float(rng.integers(0, 2)),  # head injury
        float(np.clip(rng.normal(120.0, 25.0), 60.0, 220.0)),  # first ED systolic
        float(np.clip(rng.normal(1.4, 0.3), 0.3, 3.0)),  # reverse shock index
        float(rng.exponential(4.0)),  # max base deficit, first 48h
        float(rng.exponential(2.0)),  # max lactate, first 48h
        float(rng.integers(0, 11)),  # RBC units, first 48h
        float(rng.exponential(3.0)),  # crystalloid litres, first 48h
        float(rng.integers(0, 41)),  # APACHE II
        float(rng.integers(0, 2)),  # antibiotic exposure, first 48h
        float(rng.integers(0, 4)),  # surgeries, first 48h
        float(rng.integers(0, 3)),  # ED disposition, coded
    ]

    return PatientRecord(
        patient_id=f"p{position:05d}",
        admit_ts=admit,
        los_hours=los_hours,
        hourly=hourly,
        statics=statics,
        sofa=sofa,
        cultures=cultures,
    )


def generate_cohort(config: GeneratorConfig) -> list[PatientRecord]:
    """Generate the full cohort; exactly the configured septic quota, then
    missingness injected at the configured rate."""
    if config.n_patients <= 0:
        raise InputError(f"n_patients must be positive, got {config.n_patients}")
    quota = _septic_quota(config)
    order = derive_rng(config.seed, "assignment").permutation(config.n_patients)
    septic_positions = set(int(i) for i in order[:quota])
    records = [
        _gen_patient(i, i in septic_positions, config) for i in range(config.n_patients)
    ]
    if config.missing_rate > 0.0:
        records = inject_missingness(records, config.missing_rate, config.seed)
    return records


def planted_onset(record: PatientRecord) -> datetime | None:
    """The generator's ground-truth onset: the single positive culture, if any."""
    for ts, positive in record.cultures:
        if positive:
            return ts
    return None


def inject_missingness(
    records: list[PatientRecord], rate: float, seed: int
) -> list[PatientRecord]:
    """Blank hourly cells independently with probability ``rate``.

    The first hourly row is never touched, so forward filling can always
    restore cumulative series to a monotone state.
    """
    if not 0.0 <= rate < 1.0:
        raise InputError(f"rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return records
    out: list[PatientRecord] = []
    for position, record in enumerate(records):
        rng = derive_rng(seed, "missing", position)
        mask = rng.random((len(record.hourly), len(HOURLY_FIELDS))) < rate
        new_hourly = []
        for i, obs in enumerate(record.hourly):
            if i == 0:
                new_hourly.append(replace(obs))
                continue
            values = {
                name: (None if mask[i, j] else getattr(obs, name))
                for j, name in enumerate(HOURLY_FIELDS)
            }
            new_hourly.append(HourlyObservation(ts=obs.ts, **values))
        out.append(replace(record, hourly=new_hourly))
    return out


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

PATIENTS_HEADER = ("patient_id", "admit_ts") + STATIC_FEATURES
HOURLY_HEADER = ("patient_id", "ts") + HOURLY_FIELDS
SOFA_HEADER = ("patient_id", "ts", "sofa")
CULTURES_HEADER = ("patient_id", "ts", "positive")


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_cohort(records: list[PatientRecord], directory, header_comment: str | None = None) -> None:
    """Write patients/hourly/sofa/cultures CSVs; empty cell means missing."""
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def open_csv(name, header):
        fh = open(d / name, "w", newline="")
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        return fh, writer

    fh_p, w_p = open_csv("patients.csv", PATIENTS_HEADER)
    fh_h, w_h = open_csv("hourly.csv", HOURLY_HEADER)
    fh_s, w_s = open_csv("sofa.csv", SOFA_HEADER)
    fh_c, w_c = open_csv("cultures.csv", CULTURES_HEADER)
    try:
        for r in records:
            w_p.writerow([r.patient_id, r.admit_ts.isoformat()] + [_fmt(v) for v in r.statics])
            for obs in r.hourly:
                w_h.writerow(
                    [r.patient_id, obs.ts.isoformat()]
                    + [_fmt(getattr(obs, name)) for name in HOURLY_FIELDS]
                )
            for ts, score in r.sofa:
                w_s.writerow([r.patient_id, ts.isoformat(), str(int(score))])
            for ts, positive in r.cultures:
                w_c.writerow([r.patient_id, ts.isoformat(), "1" if positive else "0"])
    finally:
        for fh in (fh_p, fh_h, fh_s, fh_c):
            fh.close()


def _read_rows(path, expected_header) -> list[tuple[int, list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        header_seen = False
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                continue
            row = next(csv.reader([line]))
            if not row:
                continue
            if not header_seen:
                if tuple(row) != tuple(expected_header):
                    raise FormatError(f"{path}:{lineno}: unexpected header {row}")
                header_seen = True
                continue
            if len(row) != len(expected_header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(expected_header)} cells, got {len(row)}"
                )
            rows.append((lineno, row))
        if not header_seen:
            raise FormatError(f"{path}: missing header row")
    return rows


def _parse_ts(raw: str, path, lineno: int) -> datetime:
    try:
        return datetime.fromisoformat(raw)
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad timestamp {raw!r}") from exc


def _parse_opt(raw: str, path, lineno: int) -> float | None:
    if raw == "":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: bad number {raw!r}") from exc


def read_cohort(directory) -> list[PatientRecord]:
    """Parse the four cohort CSVs back into records, validating row order."""
    from pathlib import Path

    d = Path(directory)
    patients: dict[str, PatientRecord] = {}
    order: list[str] = []
    for lineno, row in _read_rows(d / "patients.csv", PATIENTS_HEADER):
        pid = row[0]
        if pid in patients:
            raise FormatError(f"patients.csv:{lineno}: duplicate patient {pid!r}")
        admit = _parse_ts(row[1], "patients.csv", lineno)
        statics = []
        for raw in row[2:]:
            v = _parse_opt(raw, "patients.csv", lineno)
            if v is None:
                raise FormatError(f"patients.csv:{lineno}: missing static value")
            statics.append(v)
        patients[pid] = PatientRecord(pid, admit, 0, [], statics, [], [])
        order.append(pid)

    for lineno, row in _read_rows(d / "hourly.csv", HOURLY_HEADER):
        pid = row[0]
        if pid not in patients:
            raise FormatError(f"hourly.csv:{lineno}: unknown patient {pid!r}")
        ts = _parse_ts(row[1], "hourly.csv", lineno)
        if ts.minute or ts.second or ts.microsecond:
            raise FormatError(f"hourly.csv:{lineno}: timestamp not on the hour")
        rec = patients[pid]
        if rec.hourly and ts <= rec.hourly[-1].ts:
            raise FormatError(f"hourly.csv:{lineno}: out-of-order hourly row for {pid!r}")
        values = {
            name: _parse_opt(raw, "hourly.csv", lineno)
            for name, raw in zip(HOURLY_FIELDS, row[2:])
        }
        rec.hourly.append(HourlyObservation(ts=ts, **values))

    for lineno, row in _read_rows(d / "sofa.csv", SOFA_HEADER):
        pid = row[0]
        if pid not in patients:
            raise FormatError(f"sofa.csv:{lineno}: unknown patient {pid!r}")
        score = int(row[2])
        if not 0 <= score <= 24:
            raise FormatError(f"sofa.csv:{lineno}: score {score} outside [0, 24]")
        patients[pid].sofa.append((_parse_ts(row[1], "sofa.csv", lineno), score))

    for lineno, row in _read_rows(d / "cultures.csv", CULTURES_HEADER):
        pid = row[0]
        if pid not in patients:
            raise FormatError(f"cultures.csv:{lineno}: unknown patient {pid!r}")
        if row[2] not in ("0", "1"):
            raise FormatError(f"cultures.csv:{lineno}: positive flag must be 0 or 1")
        patients[pid].cultures.append((_parse_ts(row[1], "cultures.csv", lineno), row[2] == "1"))

    records = []
    for pid in order:
        rec = patients[pid]
        if not rec.hourly:
            raise FormatError(f"patient {pid!r} has no hourly rows")
        rec.los_hours = int((rec.hourly[-1].ts - rec.admit_ts) / HOUR) + 1
        records.append(rec)
    return records
