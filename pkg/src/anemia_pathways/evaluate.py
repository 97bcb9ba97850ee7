"""Evaluation protocol: greedy rollouts, metrics, classification report.

Episodes roll out greedily in lockstep over a whole dataset. Metrics follow
the multiclass conventions used throughout: accuracy as a percentage,
macro-F1 over the eight diagnosis classes, one-vs-rest ROC-AUC from
per-class score vectors (rank-based with tie correction), and mean episode
length. Episodes that end without a committed diagnosis (repeat query or
timeout) count as incorrect and as a no-positive prediction for every
class; they occupy a ninth confusion column excluded from macro averages.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .catalog import CLASS_COUNT, Dataset, DiagnosisClass
from .dqn import Policy
from .env import DEFAULT_MAX_STEPS, BatchEnv, TerminalCause

__all__ = [
    "EpisodeOutcome", "MetricsReport", "ClassRow", "PolicyAgent",
    "run_episodes", "rl_scores", "compute_metrics", "classification_report",
    "format_classification_report", "rank_auc",
]


@dataclass
class EpisodeOutcome:
    """One finished episode: truth, prediction, length, class scores."""

    true_class: int
    predicted: Optional[int]  # None when the episode ended undiagnosed
    length: int
    scores: Optional[np.ndarray]
    cause: TerminalCause

    def __eq__(self, other):
        if not isinstance(other, EpisodeOutcome):
            return NotImplemented
        same_scores = (self.scores is None) == (other.scores is None) and (
            self.scores is None or np.array_equal(self.scores, other.scores))
        return (self.true_class, self.predicted, self.length, self.cause) == \
            (other.true_class, other.predicted, other.length, other.cause) \
            and same_scores


class PolicyAgent:
    """Greedy adapter putting a trained policy behind the agent protocol."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def begin(self, n: int) -> None:
        pass

    def act(self, observations: np.ndarray) -> np.ndarray:
        return self.policy.act_greedy(observations)

    def scores(self, final_observations: np.ndarray) -> np.ndarray:
        return rl_scores(self.policy, final_observations)


def rl_scores(policy: Policy, final_obs: np.ndarray) -> np.ndarray:
    """Softmax over the diagnostic Q-values at a terminal observation."""
    q = policy.q_values(final_obs)
    diag_q = np.atleast_2d(q)[:, len(policy.catalog):]
    z = diag_q - diag_q.max(axis=1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=1, keepdims=True)
    return out[0] if np.ndim(q) == 1 else out


def _one_hot_scores(predicted: np.ndarray) -> np.ndarray:
    scores = np.zeros((predicted.shape[0], CLASS_COUNT))
    diagnosed = predicted >= 0
    scores[np.flatnonzero(diagnosed), predicted[diagnosed]] = 1.0
    return scores


def run_episodes(agent, data: Dataset,
                 max_steps: int = DEFAULT_MAX_STEPS) -> list:
    """Roll every record to termination; one outcome per record, in order."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    env = BatchEnv(data, max_steps)
    agent.begin(len(data))
    for _ in range(max_steps + 1):
        if np.all(env.done):
            break
        env.step(agent.act(env.observations))
    if hasattr(agent, "scores"):
        scores = np.asarray(agent.scores(env.observations))
    else:
        scores = _one_hot_scores(env.diagnoses)
    return [
        EpisodeOutcome(
            true_class=int(env.labels[i]),
            predicted=int(env.diagnoses[i]) if env.diagnoses[i] >= 0 else None,
            length=int(env.t[i]),
            scores=scores[i],
            cause=env.cause_of(i),
        )
        for i in range(len(data))
    ]


def rank_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """One-vs-rest ROC-AUC via the rank statistic, ties averaged."""
    n_pos = int(np.count_nonzero(positives))
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positives and negatives")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1)
    sorted_scores = scores[order]
    # average ranks across tie groups
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.size]])
    for s, e in zip(starts, ends):
        if e - s > 1:
            ranks[order[s:e]] = 0.5 * (s + 1 + e)
    rank_sum = float(np.sum(ranks[positives]))
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


@dataclass
class ClassRow:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    """Aggregate evaluation results for one agent on one dataset."""

    accuracy: float
    mean_episode_length: float
    macro_f1: float
    macro_auc: Optional[float]
    per_class: list
    confusion: list  # 8 true rows x 9 predicted columns (last = NoDiagnosis)
    total: int
    no_diagnosis_count: int
    auc_skipped: list = field(default_factory=list)
    seed: Optional[int] = None
    train_wall_time_s: Optional[float] = None
    inference_time_per_record_s: Optional[float] = None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["per_class"] = [dict(r.__dict__) for r in self.per_class]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class"] = [ClassRow(**r) for r in d["per_class"]]
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _confusion(outcomes: Sequence[EpisodeOutcome]) -> np.ndarray:
    matrix = np.zeros((CLASS_COUNT, CLASS_COUNT + 1), dtype=np.int64)
    for o in outcomes:
        col = CLASS_COUNT if o.predicted is None else o.predicted
        matrix[o.true_class, col] += 1
    return matrix


def compute_metrics(outcomes: Sequence[EpisodeOutcome],
                    seed: Optional[int] = None) -> MetricsReport:
    if not outcomes:
        raise ValueError("no outcomes to score")
    n = len(outcomes)
    matrix = _confusion(outcomes)
    correct = int(np.trace(matrix[:, :CLASS_COUNT]))
    accuracy = 100.0 * correct / n
    mean_length = float(np.mean([o.length for o in outcomes]))
    no_diag = int(matrix[:, CLASS_COUNT].sum())

    rows = []
    for c in range(CLASS_COUNT):
        tp = float(matrix[c, c])
        fp = float(matrix[:, c].sum() - tp)
        fn = float(matrix[c].sum() - tp)
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) \
            if precision + recall > 0 else 0.0
        rows.append(ClassRow(DiagnosisClass(c).label, precision, recall, f1,
                             int(matrix[c].sum())))
    macro_f1 = 100.0 * float(np.mean([r.f1 for r in rows]))

    macro_auc = None
    skipped = []
    if all(o.scores is not None for o in outcomes):
        score_matrix = np.vstack([o.scores for o in outcomes])
        truths = np.array([o.true_class for o in outcomes])
        aucs = []
        for c in range(CLASS_COUNT):
            positives = truths == c
            pos = int(np.count_nonzero(positives))
            if pos == 0 or pos == n:
                skipped.append(DiagnosisClass(c).label)
                warnings.warn(
                    f"ROC-AUC undefined for {DiagnosisClass(c).label}: "
                    "no positives (or no negatives) in the evaluation set")
                continue
            aucs.append(rank_auc(score_matrix[:, c], positives))
        if aucs:
            macro_auc = 100.0 * float(np.mean(aucs))

    return MetricsReport(
        accuracy=accuracy, mean_episode_length=mean_length,
        macro_f1=macro_f1, macro_auc=macro_auc, per_class=rows,
        confusion=matrix.tolist(), total=n, no_diagnosis_count=no_diag,
        auc_skipped=skipped, seed=seed,
    )


def classification_report(outcomes: Sequence[EpisodeOutcome]) -> list:
    """Per-class precision/recall/F1/support rows, in class-code order."""
    return compute_metrics(outcomes).per_class


def format_classification_report(rows: Sequence[ClassRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'class':<{width}}  precision  recall  f1-score  support"]
    for r in rows:
        lines.append(f"{r.label:<{width}}  {r.precision:9.2f}  {r.recall:6.2f}"
                     f"  {r.f1:8.2f}  {r.support:7d}")
    total = sum(r.support for r in rows)
    lines.append(f"{'total':<{width}}  {'':9}  {'':6}  {'':8}  {total:7d}")
    return "\n".join(lines)
