"""Patient manifest CSV: ``patient_id,left,right,L0..L7``.

Label columns follow the ODIR code order N, D, G, C, A, H, M, O.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

LABEL_NAMES = ("N", "D", "G", "C", "A", "H", "M", "O")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    patient_id: str
    left_path: Optional[str]
    right_path: Optional[str]
    labels: tuple

    def __post_init__(self):
        if not self.left_path and not self.right_path:
            raise ManifestError(f"patient {self.patient_id}: record has no eye image")
        if any(v not in (0, 1) for v in self.labels):
            raise ManifestError(f"patient {self.patient_id}: labels must be 0/1, got {self.labels}")

    @property
    def paths(self) -> List[str]:
        return [p for p in (self.left_path, self.right_path) if p]


@dataclass(frozen=True)
class ExpandedSample:
    patient_id: str
    path: str
    labels: tuple
    split: str


def header(num_classes: int = 8) -> List[str]:
    return ["patient_id", "left", "right"] + [f"L{i}" for i in range(num_classes)]


def parse_manifest(path, num_classes: int = 8) -> List[SampleRecord]:
    """Read and validate a manifest; errors name the offending line."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in head] != header(num_classes):
            raise ManifestError(f"{path}:1: expected header {','.join(header(num_classes))}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            records.append(parse_row(row, lineno, num_classes))
    return records


def parse_row(row: Sequence[str], lineno: int = 0, num_classes: int = 8) -> SampleRecord:
    if len(row) != 3 + num_classes:
        raise ManifestError(f"line {lineno}: expected {3 + num_classes} fields, got {len(row)}")
    pid, left, right = (c.strip() for c in row[:3])
    if not pid:
        raise ManifestError(f"line {lineno}: empty patient_id")
    labels = []
    for c in row[3:]:
        c = c.strip()
        if c not in ("0", "1"):
            raise ManifestError(f"line {lineno}: label value {c!r} is not 0 or 1")
        labels.append(int(c))
    if not left and not right:
        raise ManifestError(f"line {lineno}: no eye image path")
    return SampleRecord(pid, left or None, right or None, tuple(labels))


def write_manifest(path, records: Sequence[SampleRecord]) -> None:
    n = len(records[0].labels) if records else 8
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header(n))
        for r in records:
            w.writerow([r.patient_id, r.left_path or "", r.right_path or ""] + list(r.labels))


def expand_eyes(records: Sequence[SampleRecord], split_map: dict) -> List[ExpandedSample]:
    """One sample per present eye image, inheriting the patient's split tag."""
    out = []
    for r in records:
        tag = split_map[r.patient_id]
        out.extend(ExpandedSample(r.patient_id, p, r.labels, tag) for p in r.paths)
    return out


def label_matrix(samples) -> np.ndarray:
    return np.array([s.labels for s in samples], dtype=np.float32).reshape(len(samples), -1)


def resolve(path: str, root) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(root) / p
