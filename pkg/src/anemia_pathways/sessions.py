"""Interactive diagnosis sessions driven by a trained policy.

A session walks one patient through the same decision process the
environment enforces during training: the policy greedily suggests the
next lab test, the caller supplies the measured value (or reports it
missing), and the walk ends when the policy commits to a diagnosis, when
it suggests a test that was already answered, or when the step budget is
exhausted.  The terminal CLI and the HTTP service both drive this engine,
which guarantees that identical observation sequences produce identical
suggestion sequences across every interface — and identical to a greedy
rollout of the same policy inside the environment.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .catalog import (
    MISSING_SENTINEL,
    QUERIED_MISSING_SENTINEL,
    DiagnosisClass,
    FeatureCatalog,
)
from .env import DEFAULT_MAX_STEPS, TerminalCause, action_label, is_diag_action

__all__ = [
    "DiagnosisSession",
    "InvalidValueError",
    "MISSING_TOKEN",
    "SessionStatus",
    "SessionTerminalError",
    "SessionView",
    "TranscriptStep",
    "WrongFeatureError",
    "parse_value",
]

MISSING_TOKEN = "missing"


class SessionStatus(enum.Enum):
    """Lifecycle of a session; terminal states are immutable."""

    ACTIVE = "active"
    DIAGNOSED = "diagnosed"
    ABORTED = "aborted"


class SessionTerminalError(RuntimeError):
    """Raised when a finished session receives another observation."""


class WrongFeatureError(ValueError):
    """Raised when the supplied feature is not the current suggestion."""


class InvalidValueError(ValueError):
    """Raised when a supplied value is neither numeric nor ``missing``."""


def parse_value(text: str) -> Optional[float]:
    """Interpret user-supplied text as a lab value.

    Returns the parsed float, or ``None`` for the literal ``missing``
    token (case-insensitive).  Anything else raises
    :class:`InvalidValueError` so interactive callers can re-prompt and
    HTTP callers can reject the request.
    """
    stripped = text.strip()
    if stripped.lower() == MISSING_TOKEN:
        return None
    try:
        value = float(stripped)
    except ValueError:
        raise InvalidValueError(f"expected a number or {MISSING_TOKEN!r}, "
                                f"got {text!r}") from None
    if math.isnan(value):
        return None
    return value


@dataclass(frozen=True)
class TranscriptStep:
    """One suggested action and, for feature queries, the supplied value.

    ``value`` is ``None`` for values reported missing and for terminal
    suggestion rows (a diagnosis or a repeated suggestion), which take no
    answer.
    """

    action: int
    label: str
    value: Optional[float]


@dataclass(frozen=True)
class SessionView:
    """Immutable snapshot of a session, safe to hand across interfaces."""

    status: SessionStatus
    steps: tuple[TranscriptStep, ...]
    step_count: int
    suggestion: Optional[str] = None
    suggestion_action: Optional[int] = None
    diagnosis: Optional[DiagnosisClass] = None
    cause: Optional[TerminalCause] = None

    @property
    def done(self) -> bool:
        return self.status is not SessionStatus.ACTIVE


@dataclass
class DiagnosisSession:
    """A single policy-guided diagnosis walk.

    The policy must expose ``act_greedy(observation) -> int`` over the
    combined query/diagnosis action space and a ``catalog`` attribute; a
    trained checkpoint satisfies this directly.  The first suggestion is
    computed on construction from the all-unqueried observation, so a
    policy whose initial greedy action is already diagnostic produces a
    session that is complete before the first observation arrives.
    """

    policy: "PolicyLike"
    max_steps: int = DEFAULT_MAX_STEPS
    _catalog: FeatureCatalog = field(init=False)
    _observation: np.ndarray = field(init=False)
    _queried: np.ndarray = field(init=False)
    _steps: list[TranscriptStep] = field(init=False, default_factory=list)
    _t: int = field(init=False, default=0)
    _status: SessionStatus = field(init=False, default=SessionStatus.ACTIVE)
    _suggestion: Optional[int] = field(init=False, default=None)
    _diagnosis: Optional[DiagnosisClass] = field(init=False, default=None)
    _cause: Optional[TerminalCause] = field(init=False, default=None)

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        self._catalog = self.policy.catalog
        m = len(self._catalog)
        self._observation = np.full(m, MISSING_SENTINEL)
        self._queried = np.zeros(m, dtype=bool)
        self._suggest_next()

    # -- read-only state ------------------------------------------------

    @property
    def status(self) -> SessionStatus:
        return self._status

    @property
    def done(self) -> bool:
        return self._status is not SessionStatus.ACTIVE

    @property
    def suggestion(self) -> Optional[str]:
        """Feature name the policy wants answered next, if any."""
        if self._suggestion is None:
            return None
        return action_label(self._suggestion, self._catalog)

    @property
    def diagnosis(self) -> Optional[DiagnosisClass]:
        return self._diagnosis

    @property
    def cause(self) -> Optional[TerminalCause]:
        return self._cause

    @property
    def observation(self) -> np.ndarray:
        return self._observation.copy()

    def view(self) -> SessionView:
        return SessionView(
            status=self._status,
            steps=tuple(self._steps),
            step_count=self._t,
            suggestion=self.suggestion,
            suggestion_action=self._suggestion,
            diagnosis=self._diagnosis,
            cause=self._cause,
        )

    # -- transitions ----------------------------------------------------

    def observe(self, feature: Union[str, int],
                value: Optional[float]) -> SessionView:
        """Answer the current suggestion and advance the session.

        ``feature`` must name the currently suggested feature (by name or
        index); ``value`` is the measured value, or ``None`` when the lab
        is unavailable.  Returns the post-transition snapshot.
        """
        if self.done:
            raise SessionTerminalError(
                f"session is {self._status.value}; terminal sessions are "
                "immutable")
        index = self._feature_index(feature)
        assert self._suggestion is not None
        if index != self._suggestion:
            raise WrongFeatureError(
                f"current suggestion is "
                f"{action_label(self._suggestion, self._catalog)!r}, "
                f"not {action_label(index, self._catalog)!r}")
        supplied = self._coerce_value(value)
        self._t += 1
        self._queried[index] = True
        self._observation[index] = (QUERIED_MISSING_SENTINEL
                                    if supplied is None else supplied)
        self._steps.append(TranscriptStep(
            index, action_label(index, self._catalog), supplied))
        self._suggestion = None
        if self._t >= self.max_steps:
            self._status = SessionStatus.ABORTED
            self._cause = TerminalCause.TIMEOUT
        else:
            self._suggest_next()
        return self.view()

    # -- internals ------------------------------------------------------

    def _suggest_next(self) -> None:
        action = int(self.policy.act_greedy(self._observation))
        if is_diag_action(action, self._catalog):
            self._t += 1
            self._steps.append(TranscriptStep(
                action, action_label(action, self._catalog), None))
            self._diagnosis = DiagnosisClass(action - len(self._catalog))
            self._status = SessionStatus.DIAGNOSED
            self._cause = TerminalCause.DIAGNOSED
        elif self._queried[action]:
            self._t += 1
            self._steps.append(TranscriptStep(
                action, action_label(action, self._catalog), None))
            self._status = SessionStatus.ABORTED
            self._cause = TerminalCause.REPEAT_QUERY
        else:
            self._suggestion = action

    def _feature_index(self, feature: Union[str, int]) -> int:
        if isinstance(feature, str):
            if feature not in self._catalog:
                raise WrongFeatureError(f"unknown feature {feature!r}")
            return self._catalog.index_of(feature)
        index = int(feature)
        if not 0 <= index < len(self._catalog):
            raise WrongFeatureError(f"feature index {index} outside the "
                                    f"{len(self._catalog)}-feature catalog")
        return index

    @staticmethod
    def _coerce_value(value: Optional[float]) -> Optional[float]:
        if value is None:
            return None
        if isinstance(value, str):
            return parse_value(value)
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise InvalidValueError(f"expected a number or None, got "
                                    f"{value!r}") from None
        return None if math.isnan(out) else out


class PolicyLike:
    """Structural protocol: anything with ``catalog`` and ``act_greedy``."""

    catalog: FeatureCatalog

    def act_greedy(self, observation: np.ndarray) -> int:  # pragma: no cover
        raise NotImplementedError


def replay(policy: "PolicyLike", answers: Sequence[tuple[str, Optional[float]]],
           max_steps: int = DEFAULT_MAX_STEPS) -> SessionView:
    """Drive a fresh session with scripted (feature, value) answers.

    Answers must match the policy's suggestions in order; surplus answers
    after the session terminates are ignored.  Useful for deterministic
    transcript tests and cross-interface equivalence checks.
    """
    session = DiagnosisSession(policy, max_steps=max_steps)
    for feature, value in answers:
        if session.done:
            break
        session.observe(feature, value)
    return session.view()
