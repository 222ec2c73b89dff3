"""IoU records, hierarchical mIoU aggregation, oracles, and diff rankings.

Aggregation follows the benchmark convention: per class, intersections and
unions accumulate across images before dividing; a dataset's mIoU is the
mean over its classes; a domain's score is the mean over its datasets; the
overall score is the mean over domains.  Records where both masks were
empty (union 0) are vacuous and never enter the accumulation.

The two oracle ensembles bound what a perfect chooser between two methods
could score: per dataset (pick the better mIoU) and per image (pick the
better prediction, then re-aggregate).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AlignmentMismatch,
    DatasetMismatch,
    DimensionMismatch,
    NoRecords,
)
from .tensor_core import BinaryMask

RECORD_HEADER = ("dataset", "domain", "class", "image", "method", "intersection", "union")


@dataclass(frozen=True)
class IoURecord:
    dataset_id: str
    domain: str
    class_id: str
    image_id: str
    method_id: str
    intersection: int
    union: int

    def __post_init__(self) -> None:
        if not 0 <= self.intersection <= self.union:
            raise ValueError(
                f"need 0 <= intersection <= union, got ({self.intersection}, {self.union})"
            )

    @property
    def vacuous(self) -> bool:
        """True when both masks were empty; excluded from accumulation."""
        return self.union == 0

    @property
    def iou(self) -> float:
        return 1.0 if self.vacuous else self.intersection / self.union


@dataclass(frozen=True)
class AggregateReport:
    method_id: str
    per_class: dict[str, dict[str, float]]   # dataset -> class -> accumulated IoU
    per_dataset: dict[str, float]            # dataset -> mIoU
    dataset_domains: dict[str, str]
    per_domain: dict[str, float]
    overall: float


# ---------------------------------------------------------------------------
# Pixel-level IoU
# ---------------------------------------------------------------------------

def iou_counts(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int]:
    """(intersection, union) pixel counts for one prediction."""
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter = int(np.count_nonzero(pred.data & gt.data))
    union = int(np.count_nonzero(pred.data | gt.data))
    return inter, union


def iou(pred: BinaryMask, gt: BinaryMask) -> float:
    """Intersection over union; both-empty pairs score 1.0 (vacuous)."""
    inter, union = iou_counts(pred, gt)
    return 1.0 if union == 0 else inter / union


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _accumulate_classes(records: Sequence[IoURecord]) -> dict[str, float]:
    """class -> sum(intersection)/sum(union), vacuous records skipped."""
    sums: dict[str, list[int]] = {}
    for rec in records:
        if rec.vacuous:
            continue
        acc = sums.setdefault(rec.class_id, [0, 0])
        acc[0] += rec.intersection
        acc[1] += rec.union
    return {cid: inter / union for cid, (inter, union) in sums.items()}


def dataset_miou(records: Sequence[IoURecord]) -> float:
    """Mean over classes of accumulated IoU, for one dataset and method."""
    if not records:
        raise NoRecords("no records to aggregate")
    datasets = {rec.dataset_id for rec in records}
    methods = {rec.method_id for rec in records}
    if len(datasets) > 1 or len(methods) > 1:
        raise DatasetMismatch(
            f"records span datasets {sorted(datasets)} and methods {sorted(methods)}"
        )
    per_class = _accumulate_classes(records)
    if not per_class:
        raise NoRecords("every record is vacuous; nothing to accumulate")
    return float(np.mean(sorted(per_class.values())))


def aggregate(records: Sequence[IoURecord], method_id: str | None = None) -> AggregateReport:
    """Roll records up class -> dataset -> domain -> overall."""
    if not records:
        raise NoRecords("no records to aggregate")
    methods = {rec.method_id for rec in records}
    if method_id is None:
        if len(methods) > 1:
            raise DatasetMismatch(f"records mix methods {sorted(methods)}; pass method_id")
        method_id = next(iter(methods))
    else:
        records = [rec for rec in records if rec.method_id == method_id]
        if not records:
            raise NoRecords(f"no records for method {method_id!r}")

    by_dataset: dict[str, list[IoURecord]] = {}
    domains: dict[str, str] = {}
    for rec in records:
        by_dataset.setdefault(rec.dataset_id, []).append(rec)
        if domains.setdefault(rec.dataset_id, rec.domain) != rec.domain:
            raise DatasetMismatch(
                f"dataset {rec.dataset_id!r} appears under two domains"
            )

    per_class: dict[str, dict[str, float]] = {}
    per_dataset: dict[str, float] = {}
    for dataset_id in sorted(by_dataset):
        classes = _accumulate_classes(by_dataset[dataset_id])
        if not classes:
            continue  # all vacuous: the dataset contributes nothing
        per_class[dataset_id] = classes
        per_dataset[dataset_id] = float(np.mean(sorted(classes.values())))
    if not per_dataset:
        raise NoRecords("every record is vacuous; nothing to aggregate")
    return _report_from_datasets(method_id, per_class, per_dataset, domains)


def _report_from_datasets(
    method_id: str,
    per_class: dict[str, dict[str, float]],
    per_dataset: dict[str, float],
    domains: dict[str, str],
) -> AggregateReport:
    domain_values: dict[str, list[float]] = {}
    for dataset_id, value in per_dataset.items():
        domain_values.setdefault(domains[dataset_id], []).append(value)
    per_domain = {
        name: float(np.mean(values)) for name, values in sorted(domain_values.items())
    }
    overall = float(np.mean(sorted(per_domain.values())))
    return AggregateReport(
        method_id=method_id,
        per_class=per_class,
        per_dataset=dict(per_dataset),
        dataset_domains={ds: domains[ds] for ds in per_dataset},
        per_domain=per_domain,
        overall=overall,
    )


# ---------------------------------------------------------------------------
# Oracle ensembles
# ---------------------------------------------------------------------------

def oracle_ensemble(report_a: AggregateReport, report_b: AggregateReport) -> AggregateReport:
    """Per dataset, take the better method's mIoU; re-aggregate upward."""
    if set(report_a.per_dataset) != set(report_b.per_dataset):
        raise DatasetMismatch(
            f"methods cover different datasets: {sorted(report_a.per_dataset)} "
            f"vs {sorted(report_b.per_dataset)}"
        )
    per_dataset: dict[str, float] = {}
    per_class: dict[str, dict[str, float]] = {}
    for dataset_id, value_a in report_a.per_dataset.items():
        value_b = report_b.per_dataset[dataset_id]
        winner = report_a if value_a >= value_b else report_b
        per_dataset[dataset_id] = max(value_a, value_b)
        per_class[dataset_id] = dict(winner.per_class.get(dataset_id, {}))
        if report_a.dataset_domains[dataset_id] != report_b.dataset_domains[dataset_id]:
            raise DatasetMismatch(f"dataset {dataset_id!r} appears under two domains")
    method_id = f"oracle({report_a.method_id}|{report_b.method_id})"
    return _report_from_datasets(
        method_id, per_class, per_dataset, dict(report_a.dataset_domains)
    )


def oracle_ensemble_plus(
    records_a: Sequence[IoURecord], records_b: Sequence[IoURecord]
) -> AggregateReport:
    """Keep the better method's record per (dataset, class, image); re-aggregate.

    Ties keep method A's record, so pass the text-prompt method first to
    match the documented tie rule.  Both record sets must cover exactly the
    same (dataset, class, image) keys.
    """
    keyed_a = {(r.dataset_id, r.class_id, r.image_id): r for r in records_a}
    keyed_b = {(r.dataset_id, r.class_id, r.image_id): r for r in records_b}
    if len(keyed_a) != len(records_a) or len(keyed_b) != len(records_b):
        raise AlignmentMismatch("duplicate (dataset, class, image) keys in a record set")
    if set(keyed_a) != set(keyed_b):
        missing = set(keyed_a) ^ set(keyed_b)
        raise AlignmentMismatch(
            f"record sets cover different episodes; {len(missing)} unmatched keys, "
            f"e.g. {sorted(missing)[0]}"
        )
    winners = []
    for key in sorted(keyed_a):
        rec_a, rec_b = keyed_a[key], keyed_b[key]
        if rec_a.domain != rec_b.domain:
            raise AlignmentMismatch(f"episode {key} appears under two domains")
        winners.append(rec_a if rec_a.iou >= rec_b.iou else rec_b)
    method_id = "oracle+({}|{})".format(
        records_a[0].method_id if records_a else "a",
        records_b[0].method_id if records_b else "b",
    )
    rebadged = [
        IoURecord(
            dataset_id=r.dataset_id,
            domain=r.domain,
            class_id=r.class_id,
            image_id=r.image_id,
            method_id=method_id,
            intersection=r.intersection,
            union=r.union,
        )
        for r in winners
    ]
    return aggregate(rebadged, method_id)


# ---------------------------------------------------------------------------
# Per-class diff ranking
# ---------------------------------------------------------------------------

def class_diff_ranking(
    per_class_tp: dict[str, float], per_class_vp: dict[str, float]
) -> list[tuple[str, float, float, float]]:
    """Rank classes by how far the two prompting modes disagree.

    Returns (class, iou_tp, iou_vp, diff) with diff = iou_vp - iou_tp,
    sorted by absolute diff descending; ties keep the input order of the
    text-prompt table.
    """
    if set(per_class_tp) != set(per_class_vp):
        missing = set(per_class_tp) ^ set(per_class_vp)
        raise AlignmentMismatch(
            f"class tables disagree; {len(missing)} unmatched, e.g. {sorted(missing)[0]!r}"
        )
    rows = [
        (name, per_class_tp[name], per_class_vp[name], per_class_vp[name] - per_class_tp[name])
        for name in per_class_tp
    ]
    rows.sort(key=lambda row: -abs(row[3]))  # sort is stable: ties keep input order
    return rows


# ---------------------------------------------------------------------------
# CSV boundary
# ---------------------------------------------------------------------------

def write_records(records: Iterable[IoURecord], path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RECORD_HEADER)
        for rec in records:
            writer.writerow(
                (rec.dataset_id, rec.domain, rec.class_id, rec.image_id,
                 rec.method_id, rec.intersection, rec.union)
            )


def read_records(path: str | Path) -> list[IoURecord]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_HEADER:
            raise AlignmentMismatch(
                f"{path}: expected header {','.join(RECORD_HEADER)}, got {header}"
            )
        records = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(RECORD_HEADER):
                raise AlignmentMismatch(f"{path}: malformed row {row}")
            records.append(
                IoURecord(
                    dataset_id=row[0], domain=row[1], class_id=row[2],
                    image_id=row[3], method_id=row[4],
                    intersection=int(row[5]), union=int(row[6]),
                )
            )
    return records


def sort_records(records: Iterable[IoURecord]) -> list[IoURecord]:
    """Canonical record order for reproducible files."""
    return sorted(
        records,
        key=lambda r: (r.dataset_id, r.image_id, r.class_id, r.method_id),
    )


def format_float(value: float, places: int = 4) -> str:
    """Fixed-point with trailing zeros trimmed: 80.8, 34.07, 0."""
    text = f"{value:.{places}f}".rstrip("0").rstrip(".")
    return text if text not in ("", "-0") else "0"


def write_report_csv(report: AggregateReport, path: str | Path) -> None:
    """Three-level report: dataset rows, domain rows, one overall row.

    mIoU values are written as percentages, matching the benchmark tables.
    """
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("level", "name", "domain", "miou"))
        for dataset_id in sorted(report.per_dataset):
            writer.writerow(
                ("dataset", dataset_id, report.dataset_domains[dataset_id],
                 format_float(100 * report.per_dataset[dataset_id]))
            )
        for domain in sorted(report.per_domain):
            writer.writerow(
                ("domain", domain, domain, format_float(100 * report.per_domain[domain]))
            )
        writer.writerow(("overall", report.method_id, "", format_float(100 * report.overall)))


DOMAIN_COLUMNS = ("General", "Earth", "Medical", "Engineering", "Agriculture")


def format_report_table(reports: Sequence[AggregateReport]) -> str:
    """One row per method: the five domain means plus their average, in percent."""
    header = ("Method", *DOMAIN_COLUMNS, "Average")
    rows = [header]
    for report in reports:
        rows.append(
            (
                report.method_id,
                *(
                    f"{100 * report.per_domain[d]:.1f}" if d in report.per_domain else "-"
                    for d in DOMAIN_COLUMNS
                ),
                f"{100 * report.overall:.1f}",
            )
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for index, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if index == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
