"""Training-set corruption: missing values and threshold-centered noise.

Both operations return a new dataset and are meant for training splits only;
evaluation data stays clean. Noise replaces a fraction of each affected
class's branch-feature values with draws centered on the decision threshold
that feature is tested against, which makes the feature uninformative near
the boundary while the stored label keeps the original diagnosis. On top of
that, a fixed fraction of anemic records is relabeled healthy at every noise
level, including zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .catalog import Dataset, DiagnosisClass
from .reference_tree import DEFAULT_TREE, ReferenceTree

__all__ = [
    "CorruptionConfig",
    "inject_missingness",
    "inject_noise",
]

# Features that stay fully observed under missingness injection.
MISSINGNESS_EXEMPT = ("hemoglobin", "gender")
# Classes whose feature values are never noised; NoAnemia is the flip target
# and Inconclusive has no single branch to center noise on.
NOISE_EXEMPT_CLASSES = (DiagnosisClass.NO_ANEMIA, DiagnosisClass.INCONCLUSIVE)
ANEMIC_CLASSES = tuple(
    c for c in DiagnosisClass
    if c not in (DiagnosisClass.NO_ANEMIA, DiagnosisClass.INCONCLUSIVE)
)


@dataclass
class CorruptionConfig:
    """Noise parameters: per-(feature, threshold) sigma plus the flip rate."""

    noise_sigmas: dict[tuple[str, float], float] = field(default_factory=dict)
    label_flip_fraction: float = 0.10
    missingness_level: float = 0.0
    noise_level: float = 0.0

    def validate(self) -> None:
        for (feature, threshold), sigma in self.noise_sigmas.items():
            if sigma <= 0:
                raise ValueError(f"sigma for ({feature}, {threshold}) must be positive")
        if not 0.0 <= self.label_flip_fraction <= 1.0:
            raise ValueError("label_flip_fraction must be in [0, 1]")
        for name in ("missingness_level", "noise_level"):
            level = getattr(self, name)
            if not 0.0 <= level <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    def sigma_for(self, feature: str, threshold: float) -> float:
        try:
            return self.noise_sigmas[(feature, threshold)]
        except KeyError:
            raise ValueError(
                f"no noise sigma configured for feature {feature!r} "
                f"at threshold {threshold}"
            ) from None

    @classmethod
    def from_mapping(cls, doc: dict) -> "CorruptionConfig":
        """Build from the parsed 'corruption' section of the dataset config."""
        sigmas = {}
        for entry in doc.get("noise_sigmas", []):
            key = (str(entry["feature"]), float(entry["threshold"]))
            sigmas[key] = float(entry["sigma"])
        config = cls(
            noise_sigmas=sigmas,
            label_flip_fraction=float(doc.get("label_flip_fraction", 0.10)),
            missingness_level=float(doc.get("missingness_level", 0.0)),
            noise_level=float(doc.get("noise_level", 0.0)),
        )
        config.validate()
        return config


def default_corruption_config() -> CorruptionConfig:
    from .generation import load_dataset_config

    _, _, raw = load_dataset_config()
    return CorruptionConfig.from_mapping(raw)


def inject_missingness(dataset: Dataset, level: float, seed: int = 42,
                       rng: Optional[np.random.Generator] = None) -> Dataset:
    """Hide a fraction `level` of each feature's present values.

    Hemoglobin and gender always stay observed. Labels are unchanged, so a
    record can lose a feature its label depends on; resolving that tension
    is the learner's problem, not the data's.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError("missingness level must be in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(seed)
    values = dataset.values.copy()
    for feature in dataset.catalog.names:
        if feature in MISSINGNESS_EXEMPT:
            continue
        col = dataset.catalog.index_of(feature)
        present = np.flatnonzero(~np.isnan(values[:, col]))
        k = int(math.floor(level * present.size))
        if k:
            chosen = rng.choice(present, size=k, replace=False)
            values[chosen, col] = np.nan
    return Dataset(values, dataset.labels.copy(), dataset.catalog)


def inject_noise(dataset: Dataset, level: float,
                 config: Optional[CorruptionConfig] = None,
                 seed: int = 42,
                 tree: ReferenceTree = DEFAULT_TREE,
                 rng: Optional[np.random.Generator] = None) -> Dataset:
    """Blur branch features toward their decision thresholds and flip labels.

    For every class except NoAnemia and Inconclusive, each feature tested on
    the class's tree branch has a fraction `level` of its present values
    resampled from N(threshold, sigma^2). A feature tested against k
    thresholds on the branch splits the fraction evenly (level/k per
    threshold, disjoint rows). Hemoglobin is the exception: its threshold is
    the record's own gender cutoff, so the full fraction applies with the
    per-gender center. Derived features are left stale on purpose; noise is
    measurement error, not a coherent alternative patient.

    Finally label_flip_fraction of all anemic records (uniformly across the
    six anemia classes) are relabeled NoAnemia, at every level including 0.
    """
    if not 0.0 <= level <= 1.0:
        raise ValueError("noise level must be in [0, 1]")
    if config is None:
        config = default_corruption_config()
    config.validate()
    if rng is None:
        rng = np.random.default_rng(seed)
    catalog = dataset.catalog
    values = dataset.values.copy()
    labels = dataset.labels.copy()
    branch_map = tree.class_branch_thresholds()
    gender_thresholds = tree.gender_thresholds()
    gender_col = catalog.index_of("gender")

    for cls in DiagnosisClass:
        if cls in NOISE_EXEMPT_CLASSES or cls not in branch_map:
            continue
        class_rows = np.flatnonzero(labels == cls.value)
        if class_rows.size == 0:
            continue
        branch = branch_map[cls]
        for feature in catalog.names:
            if feature not in branch:
                continue
            col = catalog.index_of(feature)
            present = class_rows[~np.isnan(values[class_rows, col])]
            if present.size == 0:
                continue
            perm = present[rng.permutation(present.size)]
            if feature == "hemoglobin":
                k = int(math.floor(level * perm.size))
                chosen = perm[:k]
                if k:
                    centers = np.array([
                        gender_thresholds[g] for g in values[chosen, gender_col]
                    ])
                    sigmas = np.array([
                        config.sigma_for(feature, c) for c in centers
                    ])
                    draws = rng.normal(0.0, 1.0, k) * sigmas + centers
                    values[chosen, col] = np.maximum(draws, 0.0)
            else:
                thresholds = sorted(branch[feature])
                per = level / len(thresholds)
                offset = 0
                for threshold in thresholds:
                    sigma = config.sigma_for(feature, threshold)
                    k = int(math.floor(per * perm.size))
                    chosen = perm[offset:offset + k]
                    offset += k
                    if k:
                        draws = rng.normal(threshold, sigma, k)
                        values[chosen, col] = np.maximum(draws, 0.0)

    anemic_rows = np.flatnonzero(np.isin(labels, [c.value for c in ANEMIC_CLASSES]))
    flips = int(math.floor(config.label_flip_fraction * anemic_rows.size))
    if flips:
        chosen = rng.choice(anemic_rows, size=flips, replace=False)
        labels[chosen] = DiagnosisClass.NO_ANEMIA.value
    return Dataset(values, labels, catalog)
