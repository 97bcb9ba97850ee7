"""Episodic diagnosis environment.

One episode walks one patient record. The agent either queries a feature
(actions 0..16) or commits to a diagnosis (actions 17..24, one per class).
Observation slots hold -1.0 until queried; a query reveals the recorded
value, or -2.0 when the record has no measurement. Lab values are all
non-negative, so both sentinels stay unambiguous, and the two must differ:
with a single sentinel a memoryless policy could never distinguish "not
asked yet" from "asked, not available" and would either re-query (which
terminates) or misread incomplete records as complete ones. Rewards: +1
correct diagnosis, -1 wrong diagnosis, -1 and termination for re-querying
a feature (present or not), 0 for a fresh query. Episodes also end at
max_steps without a diagnosis (reward 0).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .catalog import (
    DEFAULT_CATALOG, CLASS_COUNT, Dataset, DiagnosisClass, FeatureCatalog,
    MISSING_SENTINEL, PatientRecord, QUERIED_MISSING_SENTINEL,
)

__all__ = [
    "MISSING_SENTINEL",
    "QUERIED_MISSING_SENTINEL",
    "TerminalCause",
    "EnvState",
    "StepResult",
    "DiagnosisEnv",
    "BatchEnv",
    "value_action",
    "diag_action",
    "is_diag_action",
    "action_label",
]

DEFAULT_MAX_STEPS = 20


def value_action(feature_index: int) -> int:
    return feature_index


def diag_action(cls: DiagnosisClass, catalog: FeatureCatalog = DEFAULT_CATALOG) -> int:
    return len(catalog) + int(cls)


def is_diag_action(action: int, catalog: FeatureCatalog = DEFAULT_CATALOG) -> bool:
    return action >= len(catalog)


def action_label(action: int, catalog: FeatureCatalog = DEFAULT_CATALOG) -> str:
    """Human-readable action name used in pathway graphs and session logs."""
    if action < 0 or action >= len(catalog) + CLASS_COUNT:
        raise ValueError(f"action {action} outside the {len(catalog) + CLASS_COUNT}-action space")
    if action < len(catalog):
        return catalog.names[action]
    return DiagnosisClass(action - len(catalog)).label


class TerminalCause(enum.Enum):
    DIAGNOSED = "diagnosed"
    REPEAT_QUERY = "repeat-query"
    TIMEOUT = "timeout"


@dataclass
class EnvState:
    """Mutable per-episode state owned by one environment."""

    values: np.ndarray
    label: DiagnosisClass
    queried: np.ndarray
    observation: np.ndarray
    t: int = 0
    done: bool = False
    cause: Optional[TerminalCause] = None
    diagnosis: Optional[DiagnosisClass] = None


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class DiagnosisEnv:
    """Single-episode environment over one record at a time."""

    def __init__(self, catalog: FeatureCatalog = DEFAULT_CATALOG,
                 max_steps: int = DEFAULT_MAX_STEPS):
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        self.catalog = catalog
        self.max_steps = max_steps
        self._state: Optional[EnvState] = None

    def action_space(self) -> int:
        return len(self.catalog) + CLASS_COUNT

    def observation_size(self) -> int:
        return len(self.catalog)

    @property
    def state(self) -> EnvState:
        if self._state is None:
            raise RuntimeError("environment has not been reset")
        return self._state

    def reset(self, record: PatientRecord) -> np.ndarray:
        m = len(self.catalog)
        if record.values.shape != (m,):
            raise ValueError(f"record has {record.values.shape} values, expected ({m},)")
        self._state = EnvState(
            values=record.values,
            label=record.label,
            queried=np.zeros(m, dtype=bool),
            observation=np.full(m, MISSING_SENTINEL),
        )
        return self._state.observation.copy()

    def step(self, action: int) -> StepResult:
        state = self.state
        if state.done:
            raise RuntimeError("cannot step a finished episode; call reset")
        m = len(self.catalog)
        if not 0 <= action < m + CLASS_COUNT:
            raise ValueError(f"action {action} outside the {m + CLASS_COUNT}-action space")

        state.t += 1
        reward = 0.0
        if action >= m:
            diagnosis = DiagnosisClass(action - m)
            state.diagnosis = diagnosis
            state.done = True
            state.cause = TerminalCause.DIAGNOSED
            reward = 1.0 if diagnosis == state.label else -1.0
        elif state.queried[action]:
            state.done = True
            state.cause = TerminalCause.REPEAT_QUERY
            reward = -1.0
        else:
            state.queried[action] = True
            value = state.values[action]
            state.observation[action] = \
                QUERIED_MISSING_SENTINEL if np.isnan(value) else value
            if state.t >= self.max_steps:
                state.done = True
                state.cause = TerminalCause.TIMEOUT
        info = {
            "cause": state.cause,
            "label": state.label,
            "diagnosis": state.diagnosis,
            "t": state.t,
        }
        return StepResult(state.observation.copy(), reward, state.done, info)


class BatchEnv:
    """Many episodes advanced in lockstep; rows finish independently.

    Used for evaluation and bulk policy rollouts where the per-episode
    Python loop would dominate runtime. Finished rows ignore their action.
    """

    def __init__(self, dataset: Dataset, max_steps: int = DEFAULT_MAX_STEPS):
        if max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        self.catalog = dataset.catalog
        self.max_steps = max_steps
        self.values = dataset.values
        self.labels = dataset.labels
        n, m = dataset.values.shape
        self.n = n
        self.queried = np.zeros((n, m), dtype=bool)
        self.observations = np.full((n, m), MISSING_SENTINEL)
        self.t = np.zeros(n, dtype=np.int64)
        self.done = np.zeros(n, dtype=bool)
        self.rewards = np.zeros(n)
        # -1 = still running / no diagnosis committed.
        self.diagnoses = np.full(n, -1, dtype=np.int64)
        self.causes = np.full(n, -1, dtype=np.int8)  # index into _CAUSES

    _CAUSES = (TerminalCause.DIAGNOSED, TerminalCause.REPEAT_QUERY, TerminalCause.TIMEOUT)

    def step(self, actions: np.ndarray) -> None:
        """Advance all unfinished rows by one action; rewards overwritten."""
        m = self.values.shape[1]
        active = ~self.done
        acts = np.asarray(actions, dtype=np.int64)
        if acts.shape != (self.n,):
            raise ValueError(f"actions must have shape ({self.n},)")
        if np.any((acts[active] < 0) | (acts[active] >= m + CLASS_COUNT)):
            raise ValueError("action outside the action space")
        self.rewards.fill(0.0)
        self.t[active] += 1

        rows = np.flatnonzero(active)
        a = acts[rows]
        diag = a >= m
        drows, dact = rows[diag], a[diag] - m
        self.diagnoses[drows] = dact
        self.done[drows] = True
        self.causes[drows] = 0
        self.rewards[drows] = np.where(dact == self.labels[drows], 1.0, -1.0)

        vrows, vact = rows[~diag], a[~diag]
        repeat = self.queried[vrows, vact]
        rrows = vrows[repeat]
        self.done[rrows] = True
        self.causes[rrows] = 1
        self.rewards[rrows] = -1.0

        frows, fact = vrows[~repeat], vact[~repeat]
        self.queried[frows, fact] = True
        vals = self.values[frows, fact]
        self.observations[frows, fact] = \
            np.where(np.isnan(vals), QUERIED_MISSING_SENTINEL, vals)
        timeout = frows[self.t[frows] >= self.max_steps]
        self.done[timeout] = True
        self.causes[timeout] = 2

    def cause_of(self, row: int) -> Optional[TerminalCause]:
        c = self.causes[row]
        return None if c < 0 else self._CAUSES[c]
