"""Synthetic patient-record generation.

Records are drawn per diagnosis class from uniform feature ranges, with
three derived quantities computed (never sampled) and gender chosen to stay
consistent with the reference tree's gender-dependent hemoglobin screen.
The Inconclusive class is then carved out of the clean pool by deleting a
fraction of each removable feature's values and relabeling through the tree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

import numpy as np
import yaml

from .catalog import CLASS_COUNT, DEFAULT_CATALOG, Dataset, DiagnosisClass, FeatureCatalog
from .reference_tree import DEFAULT_TREE, ReferenceTree

__all__ = [
    "ClassProfile",
    "ClassSpec",
    "GenerationConfig",
    "SplitConfig",
    "load_dataset_config",
    "generate_dataset",
    "derive_correlated",
    "make_inconclusive",
    "split_dataset",
]

# Features whose values are functions of other features.
DERIVED_FEATURES = ("hematocrit", "tsat", "rbc")
# Sampling skips gender (handled by the consistency rule) and derived features.
NON_SAMPLED = DERIVED_FEATURES + ("gender",)
# The inconclusive carve-out may not delete these: hemoglobin and gender anchor
# the screen, MCV anchors the branch choice.
INCONCLUSIVE_EXEMPT = ("hemoglobin", "gender", "mcv")

GENERATED_CLASSES = tuple(c for c in DiagnosisClass if c != DiagnosisClass.INCONCLUSIVE)


@dataclass(frozen=True)
class ClassProfile:
    """One weighted presentation of a class; ranges override the class/background."""

    weight: float
    ranges: dict[str, tuple[float, float]]


@dataclass
class ClassSpec:
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)
    profiles: list[ClassProfile] = field(default_factory=list)


@dataclass
class GenerationConfig:
    records_per_class: int = 10000
    inconclusive_fraction: float = 0.10
    background: dict[str, tuple[float, float]] = field(default_factory=dict)
    classes: dict[DiagnosisClass, ClassSpec] = field(default_factory=dict)
    catalog: FeatureCatalog = DEFAULT_CATALOG

    def validate(self) -> None:
        if self.records_per_class < 0:
            raise ValueError("records_per_class must be nonnegative")
        if not 0.0 <= self.inconclusive_fraction < 1.0:
            raise ValueError("inconclusive_fraction must be in [0, 1)")
        for cls in GENERATED_CLASSES:
            if cls not in self.classes:
                raise ValueError(f"missing class spec for {cls.slug}")
        for name, rng_ in self.background.items():
            _check_range(name, rng_, self.catalog)
        for cls, spec in self.classes.items():
            for name, rng_ in spec.ranges.items():
                _check_range(name, rng_, self.catalog)
            if spec.profiles:
                total = sum(p.weight for p in spec.profiles)
                if not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-9):
                    raise ValueError(f"{cls.slug}: profile weights sum to {total}, not 1")
                for p in spec.profiles:
                    if p.weight <= 0:
                        raise ValueError(f"{cls.slug}: profile weights must be positive")
                    for name, rng_ in p.ranges.items():
                        _check_range(name, rng_, self.catalog)

    def range_for(self, cls: DiagnosisClass, feature: str,
                  profile: Optional[ClassProfile] = None) -> tuple[float, float]:
        if profile is not None and feature in profile.ranges:
            return profile.ranges[feature]
        spec = self.classes[cls]
        if feature in spec.ranges:
            return spec.ranges[feature]
        if feature in self.background:
            return self.background[feature]
        raise ValueError(f"no range for feature {feature!r} of class {cls.slug}")


def _check_range(name: str, rng_: tuple[float, float], catalog: FeatureCatalog) -> None:
    if name not in catalog:
        raise ValueError(f"range given for unknown feature {name!r}")
    if name in NON_SAMPLED:
        raise ValueError(f"feature {name!r} is not sampled and cannot take a range")
    low, high = rng_
    if not (low <= high):
        raise ValueError(f"{name}: range low {low} exceeds high {high}")
    if low < 0:
        raise ValueError(f"{name}: laboratory values cannot be negative")


@dataclass
class SplitConfig:
    test_fraction: float = 0.2
    validation_fraction: float = 0.1
    stratified: bool = True


def _as_range(value) -> tuple[float, float]:
    low, high = value
    return (float(low), float(high))


def load_dataset_config(path: Optional[str] = None):
    """Load generation, split and corruption settings from one YAML document.

    Returns (GenerationConfig, SplitConfig, raw corruption mapping); the
    corruption mapping is interpreted by the corruption module.
    """
    if path is None:
        text = (resources.files("anemia_pathways") / "data/dataset_config.yaml").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or "generation" not in doc:
        raise ValueError("dataset config must contain a 'generation' section")

    gen = doc["generation"]
    classes: dict[DiagnosisClass, ClassSpec] = {}
    for slug, body in gen.get("classes", {}).items():
        cls = DiagnosisClass.from_slug(slug)
        spec = ClassSpec()
        for key, value in body.items():
            if key == "profiles":
                for pbody in value:
                    weight = float(pbody["weight"])
                    ranges = {k: _as_range(v) for k, v in pbody.items() if k != "weight"}
                    spec.profiles.append(ClassProfile(weight, ranges))
            else:
                spec.ranges[key] = _as_range(value)
        classes[cls] = spec

    config = GenerationConfig(
        records_per_class=int(gen.get("records_per_class", 10000)),
        inconclusive_fraction=float(gen.get("inconclusive_fraction", 0.10)),
        background={k: _as_range(v) for k, v in gen.get("background", {}).items()},
        classes=classes,
    )
    config.validate()

    sp = doc.get("splits", {})
    split = SplitConfig(
        test_fraction=float(sp.get("test_fraction", 0.2)),
        validation_fraction=float(sp.get("validation_fraction", 0.1)),
        stratified=bool(sp.get("stratified", True)),
    )
    return config, split, doc.get("corruption", {})


def derive_correlated(values: np.ndarray, catalog: FeatureCatalog = DEFAULT_CATALOG) -> np.ndarray:
    """Fill derived features in place: hematocrit, transferrin saturation, RBC.

    hematocrit = 3 * hemoglobin, tsat = 100 * serum_iron / tibc,
    rbc = 10 * hematocrit / mcv. Works on a single record (17,) or a matrix.
    """
    single = values.ndim == 1
    m = values.reshape(1, -1) if single else values
    i = catalog.index_of
    m[:, i("hematocrit")] = 3.0 * m[:, i("hemoglobin")]
    with np.errstate(divide="ignore", invalid="ignore"):
        m[:, i("tsat")] = 100.0 * m[:, i("serum_iron")] / m[:, i("tibc")]
        m[:, i("rbc")] = 10.0 * m[:, i("hematocrit")] / m[:, i("mcv")]
    return values


def _sample_class(cls: DiagnosisClass, config: GenerationConfig,
                  tree: ReferenceTree, rng: np.random.Generator) -> np.ndarray:
    n = config.records_per_class
    catalog = config.catalog
    values = np.full((n, len(catalog)), np.nan)
    spec = config.classes[cls]

    if spec.profiles:
        weights = np.array([p.weight for p in spec.profiles])
        assignment = np.searchsorted(np.cumsum(weights), rng.random(n), side="right")
        assignment = np.minimum(assignment, len(spec.profiles) - 1)
    else:
        assignment = np.zeros(n, dtype=np.int64)

    for feature in catalog.names:
        if feature in NON_SAMPLED:
            continue
        col = catalog.index_of(feature)
        if spec.profiles:
            for p_idx, profile in enumerate(spec.profiles):
                rows = np.flatnonzero(assignment == p_idx)
                low, high = config.range_for(cls, feature, profile)
                values[rows, col] = _uniform(rng, low, high, rows.size)
        else:
            low, high = config.range_for(cls, feature)
            values[:, col] = _uniform(rng, low, high, n)

    _assign_gender(cls, values, tree, catalog, rng)
    derive_correlated(values, catalog)

    labels = tree.label_matrix(values)
    if not np.all(labels == cls.value):
        bad = int(np.sum(labels != cls.value))
        raise ValueError(
            f"generation ranges for {cls.slug} are inconsistent with the "
            f"reference tree for {bad} of {n} records"
        )
    return values


def _uniform(rng: np.random.Generator, low: float, high: float, n: int) -> np.ndarray:
    if low == high:
        return np.full(n, low)
    return rng.uniform(low, high, n)


def _assign_gender(cls: DiagnosisClass, values: np.ndarray, tree: ReferenceTree,
                   catalog: FeatureCatalog, rng: np.random.Generator) -> None:
    """Pick a gender per record uniformly among those consistent with the label.

    Hemoglobin in the band between the female and male thresholds is anemic
    only for men and normal only for women, so the band forces gender; outside
    it a fair coin is used. Ranges that leave no consistent gender are invalid.
    """
    thresholds = tree.gender_thresholds()
    female_thr, male_thr = thresholds[0.0], thresholds[1.0]
    hgb = values[:, catalog.index_of("hemoglobin")]
    anemic = cls != DiagnosisClass.NO_ANEMIA
    if anemic and np.any(hgb >= male_thr):
        raise ValueError(f"{cls.slug}: hemoglobin range reaches non-anemic values")
    if not anemic and np.any(hgb < female_thr):
        raise ValueError(f"{cls.slug}: hemoglobin range reaches anemic values")
    coin = rng.integers(0, 2, hgb.shape[0]).astype(np.float64)
    in_band = (hgb >= female_thr) & (hgb < male_thr)
    forced = 1.0 if anemic else 0.0
    values[:, catalog.index_of("gender")] = np.where(in_band, forced, coin)


def generate_dataset(config: Optional[GenerationConfig] = None,
                     seed: int = 42,
                     tree: ReferenceTree = DEFAULT_TREE,
                     rng: Optional[np.random.Generator] = None) -> Dataset:
    """Generate the clean per-class dataset (no inconclusive records yet).

    Classes are emitted in label-code order, records_per_class each; every
    record's stored label equals the tree's diagnosis of its values.
    """
    if config is None:
        config, _, _ = load_dataset_config()
    config.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    blocks = []
    labels = []
    for cls in GENERATED_CLASSES:
        block = _sample_class(cls, config, tree, rng)
        blocks.append(block)
        labels.append(np.full(block.shape[0], cls.value, dtype=np.int64))
    dataset = Dataset(np.vstack(blocks), np.concatenate(labels), config.catalog)
    dataset.validate()
    return dataset


def make_inconclusive(dataset: Dataset, fraction: float = 0.10,
                      seed: int = 42,
                      tree: ReferenceTree = DEFAULT_TREE,
                      rng: Optional[np.random.Generator] = None) -> Dataset:
    """Delete a fraction of each removable feature's values, then relabel.

    For every feature except hemoglobin, gender and MCV, exactly
    floor(fraction * present_count) values are removed uniformly at random.
    Labels are recomputed through the tree, so records that lost a value on
    their diagnostic path become Inconclusive; nothing else changes label.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(seed)
    values = dataset.values.copy()
    catalog = dataset.catalog
    for feature in catalog.names:
        if feature in INCONCLUSIVE_EXEMPT:
            continue
        col = catalog.index_of(feature)
        present = np.flatnonzero(~np.isnan(values[:, col]))
        k = int(math.floor(fraction * present.size))
        if k:
            chosen = rng.choice(present, size=k, replace=False)
            values[chosen, col] = np.nan
    labels = tree.label_matrix(values)
    out = Dataset(values, labels, catalog)
    out.validate()
    return out


def _stratified_take(labels: np.ndarray, fraction: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Pick a stratified sample of round(fraction * n) indices.

    Per-class counts use largest-remainder apportionment so the total is
    exact and each class's share is within one record of proportional.
    """
    n = labels.shape[0]
    total = int(round(fraction * n))
    classes = np.unique(labels)
    targets = {}
    floors = 0
    for cls in classes:
        t = fraction * int(np.sum(labels == cls))
        targets[int(cls)] = t
        floors += int(math.floor(t))
    leftover = total - floors
    order = sorted(classes, key=lambda c: (-(targets[int(c)] % 1.0), int(c)))
    take_counts = {int(c): int(math.floor(targets[int(c)])) for c in classes}
    for c in order[:leftover]:
        take_counts[int(c)] += 1
    picked = []
    for cls in classes:
        rows = np.flatnonzero(labels == cls)
        perm = rng.permutation(rows.size)
        picked.append(rows[perm[: take_counts[int(cls)]]])
    return np.sort(np.concatenate(picked))


def split_dataset(dataset: Dataset, split: Optional[SplitConfig] = None,
                  seed: int = 42,
                  rng: Optional[np.random.Generator] = None) -> tuple[Dataset, Dataset, Dataset]:
    """Split into (train, validation, test).

    The test fraction comes off the whole set first, then the validation
    fraction comes off the remaining training pool. Stratified splitting
    keeps per-class proportions within one record of exact.
    """
    if split is None:
        split = SplitConfig()
    if rng is None:
        rng = np.random.default_rng(seed)
    n = len(dataset)
    all_idx = np.arange(n)
    if split.stratified:
        test_idx = _stratified_take(dataset.labels, split.test_fraction, rng)
    else:
        perm = rng.permutation(n)
        k = int(round(split.test_fraction * n))
        test_idx = np.sort(perm[:k])
    train_pool = np.setdiff1d(all_idx, test_idx, assume_unique=True)
    pool_labels = dataset.labels[train_pool]
    if split.stratified:
        val_local = _stratified_take(pool_labels, split.validation_fraction, rng)
    else:
        perm = rng.permutation(train_pool.size)
        k = int(round(split.validation_fraction * train_pool.size))
        val_local = np.sort(perm[:k])
    val_idx = train_pool[val_local]
    train_idx = np.setdiff1d(train_pool, val_idx, assume_unique=True)
    return dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx)
