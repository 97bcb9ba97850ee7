"""Feature catalog and diagnosis label definitions for the synthetic anemia domain.

The catalog fixes the order of the 17 laboratory/demographic features and the
integer codes of the 8 diagnosis classes. Everything downstream (environment
action encoding, CSV columns, network input layout) keys off this module, so
the order here is load-bearing and must stay stable.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "DiagnosisClass",
    "Feature",
    "FeatureCatalog",
    "PatientRecord",
    "Dataset",
    "DEFAULT_CATALOG",
    "FEATURE_COUNT",
    "CLASS_COUNT",
    "MISSING_SENTINEL",
    "QUERIED_MISSING_SENTINEL",
]

FEATURE_COUNT = 17
CLASS_COUNT = 8

# Sentinel encodings used wherever a feature slot has no measured value.
# Lab values are non-negative, so both are unambiguous. The environment
# emits MISSING_SENTINEL for never-queried slots and QUERIED_MISSING_SENTINEL
# once a query came back empty; whole-record classifiers impute
# MISSING_SENTINEL for absent measurements.
MISSING_SENTINEL = -1.0
QUERIED_MISSING_SENTINEL = -2.0


class DiagnosisClass(IntEnum):
    """Diagnosis outcomes, with stable integer codes used as action offsets."""

    NO_ANEMIA = 0
    VITAMIN_B12_FOLATE_DEFICIENCY = 1
    UNSPECIFIED = 2
    CHRONIC_DISEASE = 3
    IRON_DEFICIENCY = 4
    HEMOLYTIC = 5
    APLASTIC = 6
    INCONCLUSIVE = 7

    @property
    def label(self) -> str:
        """Human-readable dataset label, used verbatim in CSV files."""
        return _CLASS_LABELS[self]

    @property
    def slug(self) -> str:
        """Lowercase identifier used on the command line and in JSON payloads."""
        return _CLASS_SLUGS[self]

    @classmethod
    def from_label(cls, label: str) -> "DiagnosisClass":
        try:
            return _LABEL_TO_CLASS[label]
        except KeyError:
            raise ValueError(f"unknown diagnosis label: {label!r}") from None

    @classmethod
    def from_slug(cls, slug: str) -> "DiagnosisClass":
        try:
            return _SLUG_TO_CLASS[slug.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown diagnosis slug: {slug!r}") from None


_CLASS_LABELS = {
    DiagnosisClass.NO_ANEMIA: "No anemia",
    DiagnosisClass.VITAMIN_B12_FOLATE_DEFICIENCY: "Vitamin B12/Folate deficiency anemia",
    DiagnosisClass.UNSPECIFIED: "Unspecified anemia",
    DiagnosisClass.CHRONIC_DISEASE: "Anemia of chronic disease",
    DiagnosisClass.IRON_DEFICIENCY: "Iron deficiency anemia",
    DiagnosisClass.HEMOLYTIC: "Hemolytic anemia",
    DiagnosisClass.APLASTIC: "Aplastic anemia",
    DiagnosisClass.INCONCLUSIVE: "Inconclusive diagnosis",
}

_CLASS_SLUGS = {
    DiagnosisClass.NO_ANEMIA: "no_anemia",
    DiagnosisClass.VITAMIN_B12_FOLATE_DEFICIENCY: "vitamin_b12_folate_deficiency",
    DiagnosisClass.UNSPECIFIED: "unspecified",
    DiagnosisClass.CHRONIC_DISEASE: "chronic_disease",
    DiagnosisClass.IRON_DEFICIENCY: "iron_deficiency",
    DiagnosisClass.HEMOLYTIC: "hemolytic",
    DiagnosisClass.APLASTIC: "aplastic",
    DiagnosisClass.INCONCLUSIVE: "inconclusive",
}

_LABEL_TO_CLASS = {label: cls for cls, label in _CLASS_LABELS.items()}
_SLUG_TO_CLASS = {slug: cls for cls, slug in _CLASS_SLUGS.items()}


@dataclass(frozen=True)
class Feature:
    """One catalog entry: a measurable quantity with unit and overall value range."""

    name: str
    unit: str
    lower: float
    upper: float


class FeatureCatalog:
    """Ordered collection of the features a record carries.

    Index positions double as environment action indices for value queries.
    """

    def __init__(self, features: Sequence[Feature]):
        self.features: tuple[Feature, ...] = tuple(features)
        self._index = {f.name: i for i, f in enumerate(self.features)}
        if len(self._index) != len(self.features):
            raise ValueError("duplicate feature names in catalog")

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[Feature]:
        return iter(self.features)

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValueError(f"unknown feature: {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._index

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def content_hash(self) -> str:
        """Stable hash of feature order plus class labels, stored in checkpoints."""
        h = hashlib.sha256()
        for f in self.features:
            h.update(f.name.encode())
            h.update(b"\0")
        for cls in DiagnosisClass:
            h.update(cls.label.encode())
            h.update(b"\0")
        return h.hexdigest()


# Order matters: value-query action k targets feature k.
DEFAULT_CATALOG = FeatureCatalog(
    [
        Feature("hemoglobin", "g/dL", 6.0, 17.14),
        Feature("ferritin", "ng/mL", 0.0, 500.0),
        Feature("reticulocyte_count", "%", 0.0, 6.0),
        Feature("segmented_neutrophils", "10^3/uL", 0.0, 7.0),
        Feature("tibc", "ug/dL", 100.0, 520.0),
        Feature("mcv", "fL", 75.0, 105.0),
        Feature("serum_iron", "ug/dL", 20.0, 250.0),
        Feature("rbc", "10^6/uL", 1.71, 6.86),
        Feature("gender", "0=female,1=male", 0.0, 1.0),
        Feature("creatinine", "mg/dL", 0.2, 2.0),
        Feature("cholesterol", "mg/dL", 0.0, 150.0),
        Feature("copper", "ug/dL", 30.0, 130.0),
        Feature("ethanol", "mg/dL", 0.0, 80.0),
        Feature("folate", "ng/mL", 0.5, 30.0),
        Feature("glucose", "mg/dL", 40.0, 140.0),
        Feature("hematocrit", "%", 18.0, 51.42),
        Feature("tsat", "%", 3.8, 250.0),
    ]
)

GENDER_FEMALE = 0.0
GENDER_MALE = 1.0


@dataclass
class PatientRecord:
    """A single synthetic patient: feature values (NaN = missing) plus a label.

    All present laboratory values are non-negative and gender is 0 or 1; the
    validator enforces both.
    """

    values: np.ndarray
    label: DiagnosisClass
    record_id: int = -1

    def value(self, feature: str, catalog: FeatureCatalog = DEFAULT_CATALOG) -> float:
        return float(self.values[catalog.index_of(feature)])

    def is_missing(self, feature, catalog: FeatureCatalog = DEFAULT_CATALOG) -> bool:
        index = feature if isinstance(feature, int) else catalog.index_of(feature)
        return bool(np.isnan(self.values[index]))

    def validate(self, catalog: FeatureCatalog = DEFAULT_CATALOG) -> None:
        if self.values.shape != (len(catalog),):
            raise ValueError(
                f"record has {self.values.shape} values, expected ({len(catalog)},)"
            )
        present = ~np.isnan(self.values)
        if np.any(self.values[present] < 0):
            raise ValueError("present feature values must be non-negative")
        g = self.values[catalog.index_of("gender")]
        if not math.isnan(g) and g not in (GENDER_FEMALE, GENDER_MALE):
            raise ValueError(f"gender must be 0 or 1 when present, got {g!r}")


class Dataset:
    """Columnar record collection: an (n, 17) float matrix plus integer labels.

    Missing entries are NaN. Iteration yields PatientRecord views; bulk code
    should work on .values / .labels directly.
    """

    def __init__(self, values: np.ndarray, labels: np.ndarray,
                 catalog: FeatureCatalog = DEFAULT_CATALOG):
        values = np.asarray(values, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if values.ndim != 2 or values.shape[1] != len(catalog):
            raise ValueError(f"values must be (n, {len(catalog)}), got {values.shape}")
        if labels.shape != (values.shape[0],):
            raise ValueError("labels length must match values")
        self.values = values
        self.labels = labels
        self.catalog = catalog

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> PatientRecord:
        return PatientRecord(self.values[i], DiagnosisClass(int(self.labels[i])), record_id=i)

    def __iter__(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.values[indices].copy(), self.labels[indices].copy(), self.catalog)

    def copy(self) -> "Dataset":
        return Dataset(self.values.copy(), self.labels.copy(), self.catalog)

    def class_counts(self) -> dict[DiagnosisClass, int]:
        return {cls: int(np.sum(self.labels == cls.value)) for cls in DiagnosisClass}

    def validate(self) -> None:
        present = ~np.isnan(self.values)
        if np.any(self.values[present] < 0):
            raise ValueError("present feature values must be non-negative")
        gcol = self.values[:, self.catalog.index_of("gender")]
        if np.any(np.isnan(gcol)) or not np.all(np.isin(gcol, (0.0, 1.0))):
            raise ValueError("gender must be present and 0/1 in every record")
        if np.any(self.labels < 0) or np.any(self.labels >= CLASS_COUNT):
            raise ValueError("labels out of range")

    # CSV round-trip. Floats are written with repr so that read(write(x)) is
    # bit-exact; missing values are empty cells; labels use the display names.

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(self.catalog.names) + ["label"])
            for i in range(len(self)):
                row = [
                    "" if np.isnan(v) else repr(float(v))
                    for v in self.values[i]
                ]
                row.append(DiagnosisClass(int(self.labels[i])).label)
                writer.writerow(row)

    @classmethod
    def read_csv(cls, path, catalog: FeatureCatalog = DEFAULT_CATALOG) -> "Dataset":
        with open(path, "r", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            expected = list(catalog.names) + ["label"]
            if header != expected:
                raise ValueError(f"unexpected CSV header: {header[:4]}...")
            values: list[list[float]] = []
            labels: list[int] = []
            for row in reader:
                if not row:
                    continue
                vals = [float("nan") if cell == "" else float(cell) for cell in row[:-1]]
                values.append(vals)
                labels.append(DiagnosisClass.from_label(row[-1]).value)
        return cls(np.array(values, dtype=np.float64).reshape(len(labels), len(catalog)),
                   np.array(labels, dtype=np.int64), catalog)
