"""Clinical reference decision tree that defines ground-truth labels.

The tree mirrors a standard anemia work-up: a gender-dependent hemoglobin
screen, then mean corpuscular volume (MCV) to pick the microcytic,
normocytic or macrocytic branch, then one or two confirmatory tests.

The microcytic branch uses the classic two-stage ferritin rule: ferritin
at or above 100 ng/mL means anemia of chronic disease, below 30 ng/mL means
iron deficiency outright, and the indeterminate 30..100 band is resolved by
total iron-binding capacity (high TIBC confirms iron deficiency, otherwise
chronic disease).

A record missing a value the walk needs is labeled Inconclusive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .catalog import DEFAULT_CATALOG, DiagnosisClass, FeatureCatalog

__all__ = [
    "Leaf",
    "Split",
    "HemoglobinGate",
    "ReferenceTree",
    "DEFAULT_TREE",
    "FEMALE_HGB_THRESHOLD",
    "MALE_HGB_THRESHOLD",
]

FEMALE_HGB_THRESHOLD = 12.0
MALE_HGB_THRESHOLD = 13.0
MCV_MICROCYTIC = 80.0
MCV_MACROCYTIC = 100.0
FERRITIN_HIGH = 100.0
FERRITIN_LOW = 30.0
TIBC_HIGH = 450.0
RETICULOCYTE_HIGH = 2.0
# Segmented neutrophils are generated either as exactly zero or >= 0.1, so any
# cut strictly between those separates "absent" from "present".
NEUTROPHILS_PRESENT = 0.05


@dataclass(frozen=True)
class Leaf:
    diagnosis: DiagnosisClass


@dataclass(frozen=True)
class Split:
    """Binary test: value < threshold goes low, value >= threshold goes high."""

    feature: str
    threshold: float
    low: "Node"
    high: "Node"


@dataclass(frozen=True)
class HemoglobinGate:
    """Root screen with a gender-dependent hemoglobin threshold.

    Below the female threshold every patient is anemic and gender is not
    consulted; at or above the male threshold nobody is. Only the band in
    between needs gender to resolve, which keeps gender queries lazy.
    """

    female_threshold: float
    male_threshold: float
    low: "Node"   # anemic work-up
    high: "Node"  # no anemia

    @property
    def feature(self) -> str:
        return "hemoglobin"


Node = Union[Leaf, Split, HemoglobinGate]


class ReferenceTree:
    """Walks records through the diagnostic tree.

    The single walk primitive returns either a diagnosis or the index of the
    feature whose value is needed next; labeling and the rule-following agent
    are both thin layers over it.
    """

    def __init__(self, root: Node = None, catalog: FeatureCatalog = DEFAULT_CATALOG):
        self.root = root if root is not None else _default_root()
        self.catalog = catalog
        self._hgb = catalog.index_of("hemoglobin")
        self._gender = catalog.index_of("gender")

    def walk(self, values) -> Union[DiagnosisClass, int]:
        """Advance as far as the known values allow.

        `values` is a length-17 vector with NaN for unknown entries. Returns
        the leaf diagnosis if one is reached, otherwise the index of the
        first feature blocking the walk.
        """
        node = self.root
        while True:
            if isinstance(node, Leaf):
                return node.diagnosis
            if isinstance(node, HemoglobinGate):
                hgb = values[self._hgb]
                if math.isnan(hgb):
                    return self._hgb
                if hgb < node.female_threshold:
                    node = node.low
                elif hgb >= node.male_threshold:
                    node = node.high
                else:
                    gender = values[self._gender]
                    if math.isnan(gender):
                        return self._gender
                    node = node.low if gender == 1.0 else node.high
                continue
            idx = self.catalog.index_of(node.feature)
            v = values[idx]
            if math.isnan(v):
                return idx
            node = node.low if v < node.threshold else node.high

    def label_values(self, values) -> DiagnosisClass:
        """Diagnose a record; any missing value needed on the way is Inconclusive."""
        outcome = self.walk(values)
        if isinstance(outcome, DiagnosisClass):
            return outcome
        return DiagnosisClass.INCONCLUSIVE

    def label_matrix(self, values) -> np.ndarray:
        """Vectorized label_values over an (n, 17) matrix. Returns int64 labels."""
        n = values.shape[0]
        labels = np.full(n, DiagnosisClass.INCONCLUSIVE.value, dtype=np.int64)

        def descend(node: Node, rows: "np.ndarray") -> None:
            if rows.size == 0:
                return
            if isinstance(node, Leaf):
                labels[rows] = node.diagnosis.value
                return
            if isinstance(node, HemoglobinGate):
                hgb = values[rows, self._hgb]
                known = ~np.isnan(hgb)
                rows, hgb = rows[known], hgb[known]
                low = hgb < node.female_threshold
                high = hgb >= node.male_threshold
                band = ~(low | high)
                gender = values[rows, self._gender]
                band &= ~np.isnan(gender)
                descend(node.low, rows[low | (band & (gender == 1.0))])
                descend(node.high, rows[high | (band & (gender == 0.0))])
                return
            idx = self.catalog.index_of(node.feature)
            v = values[rows, idx]
            known = ~np.isnan(v)
            rows, v = rows[known], v[known]
            descend(node.low, rows[v < node.threshold])
            descend(node.high, rows[v >= node.threshold])

        descend(self.root, np.arange(n))
        return labels

    def class_branch_thresholds(self) -> dict[DiagnosisClass, dict[str, list[float]]]:
        """Per class, the features tested on any path to its leaves with their cuts.

        Hemoglobin appears with both gender thresholds; callers that perturb
        values around thresholds must pick the one matching the record's
        gender.
        """
        result: dict[DiagnosisClass, dict[str, list[float]]] = {}

        def visit(node: Node, trail: list[tuple[str, float]]) -> None:
            if isinstance(node, Leaf):
                per_class = result.setdefault(node.diagnosis, {})
                for feature, threshold in trail:
                    cuts = per_class.setdefault(feature, [])
                    if threshold not in cuts:
                        cuts.append(threshold)
                return
            if isinstance(node, HemoglobinGate):
                step = [("hemoglobin", node.female_threshold),
                        ("hemoglobin", node.male_threshold)]
                visit(node.low, trail + step)
                visit(node.high, trail + step)
                return
            visit(node.low, trail + [(node.feature, node.threshold)])
            visit(node.high, trail + [(node.feature, node.threshold)])

        visit(self.root, [])
        for per_class in result.values():
            for cuts in per_class.values():
                cuts.sort()
        return result

    def gender_thresholds(self) -> dict[float, float]:
        """Map gender code to the applicable hemoglobin threshold."""
        root = self.root
        if not isinstance(root, HemoglobinGate):
            raise TypeError("tree root is not a hemoglobin gate")
        return {0.0: root.female_threshold, 1.0: root.male_threshold}


def _default_root() -> Node:
    microcytic = Split(
        "ferritin", FERRITIN_HIGH,
        low=Split(
            "ferritin", FERRITIN_LOW,
            low=Leaf(DiagnosisClass.IRON_DEFICIENCY),
            high=Split(
                "tibc", TIBC_HIGH,
                low=Leaf(DiagnosisClass.CHRONIC_DISEASE),
                high=Leaf(DiagnosisClass.IRON_DEFICIENCY),
            ),
        ),
        high=Leaf(DiagnosisClass.CHRONIC_DISEASE),
    )
    normocytic = Split(
        "reticulocyte_count", RETICULOCYTE_HIGH,
        low=Leaf(DiagnosisClass.APLASTIC),
        high=Leaf(DiagnosisClass.HEMOLYTIC),
    )
    macrocytic = Split(
        "segmented_neutrophils", NEUTROPHILS_PRESENT,
        low=Leaf(DiagnosisClass.UNSPECIFIED),
        high=Leaf(DiagnosisClass.VITAMIN_B12_FOLATE_DEFICIENCY),
    )
    anemic = Split(
        "mcv", MCV_MICROCYTIC,
        low=microcytic,
        high=Split("mcv", MCV_MACROCYTIC, low=normocytic, high=macrocytic),
    )
    return HemoglobinGate(
        female_threshold=FEMALE_HGB_THRESHOLD,
        male_threshold=MALE_HGB_THRESHOLD,
        low=anemic,
        high=Leaf(DiagnosisClass.NO_ANEMIA),
    )


DEFAULT_TREE = ReferenceTree()
