"""HTTP service for interactive diagnosis sessions and pathway graphs.

Exposes trained policy checkpoints over a small JSON API: create a
session, answer the suggested lab tests one by one, and read the final
diagnosis with its full trace; or fetch aggregated decision-flow graphs
for a policy over a dataset split.  Policies are loaded once at startup
and never mutated, so inference is lock-free; sessions live in a
TTL-evicted in-memory store guarded for concurrent access.  Identical
observation sequences yield exactly the suggestion sequence the terminal
session command and a greedy environment rollout produce, because all
three share one session engine.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel

from .baselines import TreeAgent
from .catalog import Dataset, DiagnosisClass
from .dqn import Policy
from .env import DEFAULT_MAX_STEPS
from .evaluate import PolicyAgent
from .pathways import aggregate, export_sankey, run_traced
from .sessions import (
    DiagnosisSession,
    InvalidValueError,
    SessionView,
    parse_value,
)

__all__ = [
    "DEFAULT_TTL_SECONDS",
    "PolicyStore",
    "SessionStore",
    "create_app",
    "main",
]

DEFAULT_TTL_SECONDS = 3600.0
DATASET_SPLITS = ("train", "validation", "test")
TREE_POLICY_ID = "tree"


class ApiError(Exception):
    """Error surfaced to clients as {code, message} with an HTTP status."""

    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


# --------------------------------------------------------------------------
# policy store


@dataclass(frozen=True)
class PolicyEntry:
    policy_id: str
    policy: Policy
    config_hash: str
    path: str

    def describe(self) -> dict:
        training = self.policy.metadata or {}
        return {
            "id": self.policy_id,
            "variant": self.policy.config.variant_name,
            "flags": {
                "double": self.policy.config.double,
                "dueling": self.policy.config.dueling,
                "prioritized": self.policy.config.prioritized,
            },
            "configHash": self.config_hash,
            "totalTimesteps": training.get("total_timesteps"),
            "seed": training.get("seed"),
            "selectedStep": training.get("selected_step"),
            "validationAccuracy": training.get("validation_accuracy"),
        }


class PolicyStore:
    """Checkpoints loaded once; reads need no lock because nothing mutates."""

    def __init__(self) -> None:
        self._entries: dict[str, PolicyEntry] = {}

    @classmethod
    def from_dir(cls, policy_dir: Optional[str]) -> "PolicyStore":
        store = cls()
        if policy_dir is None:
            return store
        for path in sorted(Path(policy_dir).glob("*.ckpt")):
            store.add(path.stem, Policy.load(path), str(path))
        return store

    def add(self, policy_id: str, policy: Policy,
            path: str = "<memory>") -> None:
        snapshot = policy.config.snapshot()
        config_hash = hashlib.sha256(
            json.dumps(snapshot, sort_keys=True).encode()).hexdigest()
        self._entries[policy_id] = PolicyEntry(
            policy_id, policy, config_hash, path)

    def get(self, policy_id: str) -> PolicyEntry:
        try:
            return self._entries[policy_id]
        except KeyError:
            raise ApiError(404, "unknown-policy",
                           f"no policy named {policy_id!r} is loaded")

    def __contains__(self, policy_id: str) -> bool:
        return policy_id in self._entries

    def list(self) -> list[dict]:
        return [self._entries[pid].describe()
                for pid in sorted(self._entries)]


# --------------------------------------------------------------------------
# session store


@dataclass
class StoredSession:
    session: DiagnosisSession
    policy_id: str
    touched: float
    lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory session map with idle-TTL eviction.

    The clock is injectable so tests can drive expiry without sleeping.
    """

    def __init__(self, ttl_seconds: float = DEFAULT_TTL_SECONDS,
                 clock=time.monotonic):
        if ttl_seconds <= 0:
            raise ValueError("ttl_seconds must be positive")
        self.ttl_seconds = ttl_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._items: dict[str, StoredSession] = {}

    def create(self, session: DiagnosisSession, policy_id: str) -> str:
        session_id = uuid.uuid4().hex
        now = self._clock()
        with self._lock:
            self._evict_locked(now)
            self._items[session_id] = StoredSession(session, policy_id, now)
        return session_id

    def get(self, session_id: str) -> StoredSession:
        now = self._clock()
        with self._lock:
            self._evict_locked(now)
            entry = self._items.get(session_id)
            if entry is None:
                raise ApiError(404, "unknown-session",
                               f"no active session {session_id!r}")
            entry.touched = now
            return entry

    def _evict_locked(self, now: float) -> None:
        expired = [sid for sid, entry in self._items.items()
                   if now - entry.touched > self.ttl_seconds]
        for sid in expired:
            del self._items[sid]

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)


# --------------------------------------------------------------------------
# pathway sources


class TraceProvider:
    """Lazily traces (policy, split) pairs once and caches the episodes."""

    def __init__(self, policies: PolicyStore, data_dir: Optional[str],
                 max_steps: int = DEFAULT_MAX_STEPS):
        self.policies = policies
        self.data_dir = data_dir
        self.max_steps = max_steps
        self._lock = threading.Lock()
        self._datasets: dict[str, Dataset] = {}
        self._traces: dict[tuple[str, str], list] = {}

    def dataset(self, name: str) -> Dataset:
        if name not in DATASET_SPLITS:
            raise ApiError(404, "unknown-dataset",
                           f"dataset must be one of {', '.join(DATASET_SPLITS)}")
        with self._lock:
            if name not in self._datasets:
                if self.data_dir is None:
                    raise ApiError(404, "unknown-dataset",
                                   "service is running without a data dir")
                path = Path(self.data_dir) / f"{name}.csv"
                if not path.exists():
                    raise ApiError(404, "unknown-dataset",
                                   f"no {name}.csv under {self.data_dir}")
                self._datasets[name] = Dataset.read_csv(path)
            return self._datasets[name]

    def traces(self, policy_id: str, dataset_name: str) -> list:
        data = self.dataset(dataset_name)
        if policy_id == TREE_POLICY_ID:
            agent = TreeAgent()
        else:
            agent = PolicyAgent(self.policies.get(policy_id).policy)
        key = (policy_id, dataset_name)
        with self._lock:
            if key not in self._traces:
                self._traces[key] = run_traced(agent, data, self.max_steps)
            return self._traces[key]


# --------------------------------------------------------------------------
# request/response shapes


class CreateSessionRequest(BaseModel):
    policyId: str


class ObserveRequest(BaseModel):
    feature: str
    value: Union[float, str, None] = None


def _coerce_observed_value(raw: Union[float, str, None]) -> Optional[float]:
    if raw is None:
        return None
    if isinstance(raw, str):
        return parse_value(raw)
    return float(raw)


def _session_payload(session_id: str, view: SessionView) -> dict:
    return {
        "sessionId": session_id,
        "status": view.status.value,
        "suggestion": view.suggestion,
        "diagnosis": view.diagnosis.label if view.diagnosis is not None else None,
        "cause": view.cause.value if view.cause is not None else None,
        "stepCount": view.step_count,
        "trace": [
            {"action": step.label, "value": step.value}
            for step in view.steps
        ],
    }


def _parse_class_filter(text: Optional[str]):
    if text is None or text == "":
        return None
    classes = []
    for slug in text.split(","):
        slug = slug.strip()
        if not slug:
            continue
        try:
            classes.append(DiagnosisClass.from_slug(slug))
        except (KeyError, ValueError):
            valid = ", ".join(cls.slug for cls in DiagnosisClass)
            raise ApiError(422, "invalid-class",
                           f"unknown class {slug!r}; valid classes: {valid}")
    return classes or None


# --------------------------------------------------------------------------
# application


def create_app(policy_dir: Optional[str] = None,
               data_dir: Optional[str] = None,
               ttl_seconds: float = DEFAULT_TTL_SECONDS,
               max_steps: int = DEFAULT_MAX_STEPS,
               static_dir: Optional[str] = None,
               clock=time.monotonic) -> FastAPI:
    """Build the service; stores hang off ``app.state`` for tests."""
    app = FastAPI(title="anemia-pathways", docs_url=None, redoc_url=None)
    policies = PolicyStore.from_dir(policy_dir)
    sessions = SessionStore(ttl_seconds, clock=clock)
    provider = TraceProvider(policies, data_dir, max_steps)
    app.state.policies = policies
    app.state.sessions = sessions
    app.state.traces = provider
    app.state.max_steps = max_steps

    @app.exception_handler(ApiError)
    async def handle_api_error(request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code,
                                     "message": exc.message})

    @app.exception_handler(RequestValidationError)
    async def handle_validation_error(request, exc: RequestValidationError):
        return JSONResponse(status_code=422,
                            content={"code": "invalid-request",
                                     "message": str(exc.errors()[:1])})

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz() -> str:
        return "ok"

    @app.get("/api/policies")
    def list_policies() -> list:
        return policies.list()

    @app.post("/api/sessions", status_code=201)
    def create_session(body: CreateSessionRequest) -> dict:
        entry = policies.get(body.policyId)
        session = DiagnosisSession(entry.policy, max_steps=max_steps)
        session_id = sessions.create(session, body.policyId)
        return _session_payload(session_id, session.view())

    @app.post("/api/sessions/{session_id}/observe")
    def observe(session_id: str, body: ObserveRequest) -> dict:
        entry = sessions.get(session_id)
        try:
            value = _coerce_observed_value(body.value)
        except InvalidValueError as exc:
            raise ApiError(422, "invalid-value", str(exc))
        with entry.lock:
            if entry.session.done:
                raise ApiError(409, "terminal-session",
                               "terminal sessions are immutable")
            if body.feature != entry.session.suggestion:
                raise ApiError(
                    409, "wrong-feature",
                    f"current suggestion is {entry.session.suggestion!r}, "
                    f"not {body.feature!r}")
            view = entry.session.observe(body.feature, value)
        return _session_payload(session_id, view)

    @app.get("/api/pathways")
    def pathways(policy: str, dataset: str = "test",
                 classes: Optional[str] = None) -> JSONResponse:
        class_filter = _parse_class_filter(classes)
        traces = provider.traces(policy, dataset)
        graph = aggregate(traces, class_filter=class_filter)
        return JSONResponse(content=json.loads(export_sankey(graph)))

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="ui")

    return app


# --------------------------------------------------------------------------
# entry point


def _env(name: str, fallback):
    return os.environ.get(f"ANEMIA_PATHWAYS_{name}", fallback)


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="anemia-pathways-service",
        description="Serve trained policies for interactive diagnosis "
                    "sessions and pathway graphs.")
    parser.add_argument("--host", default=_env("HOST", "127.0.0.1"))
    parser.add_argument("--port", type=int,
                        default=int(_env("PORT", "8000")))
    parser.add_argument("--policy-dir",
                        default=_env("POLICY_DIR", None),
                        help="directory of *.ckpt policy checkpoints")
    parser.add_argument("--data-dir", default=_env("DATA_DIR", None),
                        help="directory with split CSVs for pathway graphs")
    parser.add_argument("--ttl", type=float,
                        default=float(_env("TTL", str(DEFAULT_TTL_SECONDS))),
                        help="idle seconds before sessions are evicted")
    parser.add_argument("--static-dir",
                        default=_env("STATIC_DIR", None),
                        help="built web UI to serve at /")
    args = parser.parse_args(argv)

    import uvicorn

    app = create_app(policy_dir=args.policy_dir, data_dir=args.data_dir,
                     ttl_seconds=args.ttl, static_dir=args.static_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
