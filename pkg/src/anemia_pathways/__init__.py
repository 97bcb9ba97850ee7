"""Learning step-by-step anemia diagnosis pathways with reinforcement learning.

The package generates synthetic patient records from a clinical decision
tree, trains Q-learning agents that decide which lab value to request next
and when to commit to a diagnosis, evaluates them against tree, random,
supervised-tree and feed-forward baselines, and aggregates greedy-policy
trajectories into flow graphs for inspection.
"""

__version__ = "1.0.0"

from .catalog import (
    CLASS_COUNT,
    DEFAULT_CATALOG,
    FEATURE_COUNT,
    Dataset,
    DiagnosisClass,
    Feature,
    FeatureCatalog,
    PatientRecord,
)
from .reference_tree import DEFAULT_TREE, ReferenceTree

__all__ = [
    "CLASS_COUNT",
    "DEFAULT_CATALOG",
    "DEFAULT_TREE",
    "FEATURE_COUNT",
    "Dataset",
    "DiagnosisClass",
    "Feature",
    "FeatureCatalog",
    "PatientRecord",
    "ReferenceTree",
    "__version__",
]
