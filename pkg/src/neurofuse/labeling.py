"""EHR visits to per-scan stage labels.

Pipeline order: age gate, per-patient running-max correction over the full
diagnosed history, per-scan +/-180 day window, then the mode with ties going
to the more severe stage.
"""

from __future__ import annotations

import csv
import datetime as dt
from collections import Counter
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Sequence

MIN_AGE = 55
WINDOW_DAYS = 180


class Label(IntEnum):
    CN = 0
    MCI = 1
    AD = 2

    @classmethod
    def parse(cls, text: str) -> "Label | None":
        text = text.strip()
        if not text:
            return None
        try:
            return cls[text.upper()]
        except KeyError:
            raise ValueError(f"unknown diagnosis {text!r}") from None


@dataclass(frozen=True)
class EhrVisit:
    patient_id: str
    visit_date: dt.date
    age_at_scan: float
    diagnosis: Label | None

    def __post_init__(self):
        if self.age_at_scan < 0:
            raise ValueError(f"negative age {self.age_at_scan}")


@dataclass(frozen=True)
class ScanRecord:
    patient_id: str
    session_id: str
    scan_date: dt.date


@dataclass(frozen=True)
class LabeledScan:
    patient_id: str
    session_id: str
    scan_date: dt.date
    label: Label


@dataclass(frozen=True)
class Exclusion:
    session_id: str
    reason: str


def filter_age(visits: Iterable[EhrVisit], min_age: float = MIN_AGE) -> list[EhrVisit]:
    return [v for v in visits if v.age_at_scan > min_age]


def filter_window(visits: Iterable[EhrVisit], scan_date: dt.date, days: int = WINDOW_DAYS) -> list[EhrVisit]:
    return [
        v for v in visits
        if v.diagnosis is not None and abs((v.visit_date - scan_date).days) <= days
    ]


def enforce_temporal_consistency(visits: Sequence[EhrVisit]) -> list[EhrVisit]:
    """Raise each diagnosis to the most severe one seen so far.

    Undiagnosed visits pass through unchanged and do not affect the running
    maximum.
    """
    for a, b in zip(visits, visits[1:]):
        if b.visit_date < a.visit_date:
            raise ValueError(
                f"visits for patient {b.patient_id} are not date-ascending ({a.visit_date} then {b.visit_date})"
            )
    worst = None
    out = []
    for v in visits:
        if v.diagnosis is None:
            out.append(v)
            continue
        worst = v.diagnosis if worst is None else max(worst, v.diagnosis)
        out.append(v if v.diagnosis == worst else replace(v, diagnosis=worst))
    return out


def mode_label(visits: Iterable[EhrVisit | Label]) -> Label | None:
    labels = [v.diagnosis if isinstance(v, EhrVisit) else v for v in visits]
    counts = Counter(l for l in labels if l is not None)
    if not counts:
        return None
    return max(counts, key=lambda l: (counts[l], l))


def label_dataset(
    visits: Iterable[EhrVisit], scans: Iterable[ScanRecord]
) -> tuple[list[LabeledScan], list[Exclusion]]:
    by_patient: dict[str, list[EhrVisit]] = {}
    for v in filter_age(visits):
        by_patient.setdefault(v.patient_id, []).append(v)
    corrected = {
        pid: enforce_temporal_consistency(sorted(vs, key=lambda v: v.visit_date))
        for pid, vs in by_patient.items()
    }
    labeled, excluded = [], []
    for scan in scans:
        history = corrected.get(scan.patient_id, [])
        label = mode_label(filter_window(history, scan.scan_date))
        if label is None:
            excluded.append(Exclusion(scan.session_id, "no in-window diagnosis"))
            continue
        labeled.append(LabeledScan(scan.patient_id, scan.session_id, scan.scan_date, label))
    return labeled, excluded


# ---------------------------------------------------------------------------
# CSV


EHR_FIELDS = ("patient_id", "visit_date", "age_at_scan", "diagnosis")
LABEL_FIELDS = ("patient_id", "session_id", "scan_date", "label")


def read_ehr_csv(path) -> tuple[list[EhrVisit], list[str]]:
    """Parse visits; malformed rows are returned as messages instead of raising."""
    visits, problems = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(EHR_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                visits.append(
                    EhrVisit(
                        row["patient_id"].strip(),
                        dt.date.fromisoformat(row["visit_date"].strip()),
                        float(row["age_at_scan"]),
                        Label.parse(row["diagnosis"] or ""),
                    )
                )
            except (ValueError, TypeError, AttributeError) as exc:
                problems.append(f"malformed EHR row {lineno}: {exc}")
    return visits, problems


def read_scans(rows: Iterable[dict]) -> tuple[list[ScanRecord], list[Exclusion]]:
    scans, bad = [], []
    for row in rows:
        try:
            scans.append(ScanRecord(row["patient_id"], row["session_id"], dt.date.fromisoformat(row["scan_date"].strip())))
        except ValueError as exc:
            bad.append(Exclusion(row.get("session_id", ""), f"malformed scan_date: {exc}"))
    return scans, bad


def write_labels(path, labeled: Iterable[LabeledScan]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_FIELDS)
        for s in labeled:
            w.writerow([s.patient_id, s.session_id, s.scan_date.isoformat(), s.label.name])


def read_labels(path) -> list[LabeledScan]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LABEL_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [
            LabeledScan(r["patient_id"], r["session_id"], dt.date.fromisoformat(r["scan_date"]), Label[r["label"]])
            for r in reader
        ]


def write_exclusions(path, exclusions: Iterable[Exclusion]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("session_id", "reason"))
        for e in exclusions:
            w.writerow((e.session_id, e.reason))
