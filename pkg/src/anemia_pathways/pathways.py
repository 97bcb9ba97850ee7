"""Per-patient diagnosis traces and their aggregation into flow graphs.

A trace is the ordered transcript of one episode: which tests the agent
ordered, what came back, and the final call. Aggregating many traces gives
a Sankey-style graph: nodes are actions at a depth, links carry how many
patients flowed between them, broken down by true class. Two aggregation
modes exist: the default merges nodes by (depth, action) the way the flow
diagrams draw one box per column, while prefix mode keeps distinct query
histories apart for exact-path analysis.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .catalog import CLASS_COUNT, DEFAULT_CATALOG, Dataset, DiagnosisClass, FeatureCatalog, PatientRecord
from .env import DEFAULT_MAX_STEPS, QUERIED_MISSING_SENTINEL, BatchEnv, action_label

__all__ = [
    "TraceStep", "EpisodeTrace", "PathwayNode", "PathwayLink", "PathwayGraph",
    "run_traced", "extract_trace", "aggregate", "export_sankey", "parse_sankey",
    "write_traces_csv", "read_traces_csv", "SANKEY_VERSION", "NO_DIAGNOSIS",
]

SANKEY_VERSION = 1
NO_DIAGNOSIS = "no-diagnosis"


@dataclass(frozen=True)
class TraceStep:
    """One action in an episode; value is the observation it produced.

    Value queries carry the number that came back, or None when the record
    has no measurement (and for the repeat query that ends an episode).
    Diagnostic steps always carry None.
    """

    action: int
    label: str
    value: Optional[float]


@dataclass
class EpisodeTrace:
    record_id: int
    steps: list
    outcome: Optional[int]  # DiagnosisClass code, or None when undiagnosed
    true_class: int

    @property
    def length(self) -> int:
        return len(self.steps)


def run_traced(agent, data: Dataset,
               max_steps: int = DEFAULT_MAX_STEPS) -> list:
    """Greedy rollouts over a dataset, returning one trace per record."""
    if len(data) == 0:
        raise ValueError("cannot trace an empty dataset")
    env = BatchEnv(data, max_steps)
    agent.begin(len(data))
    m = len(data.catalog)
    steps: list = [[] for _ in range(len(data))]
    for _ in range(max_steps + 1):
        if np.all(env.done):
            break
        active = np.flatnonzero(~env.done)
        actions = np.asarray(agent.act(env.observations), dtype=np.int64)
        feature = np.minimum(actions, m - 1)  # safe index for diag actions
        fresh = ~env.queried[np.arange(env.n), feature]
        env.step(actions)
        for row in active:
            a = int(actions[row])
            value: Optional[float] = None
            if a < m and fresh[row]:
                v = env.observations[row, a]
                if v != QUERIED_MISSING_SENTINEL:
                    value = float(v)
            steps[row].append(TraceStep(a, action_label(a, data.catalog), value))
    return [
        EpisodeTrace(
            record_id=int(i),
            steps=steps[i],
            outcome=int(env.diagnoses[i]) if env.diagnoses[i] >= 0 else None,
            true_class=int(env.labels[i]),
        )
        for i in range(len(data))
    ]


def extract_trace(agent, record: PatientRecord, record_id: int = 0,
                  max_steps: int = DEFAULT_MAX_STEPS,
                  catalog: FeatureCatalog = DEFAULT_CATALOG):
    """Trace a single record through one full episode."""
    data = Dataset(record.values[None, :], np.array([int(record.label)]),
                   catalog)
    trace = run_traced(agent, data, max_steps)[0]
    trace.record_id = record_id
    return trace


@dataclass
class PathwayNode:
    id: str
    label: str
    depth: int
    support: int


@dataclass
class PathwayLink:
    source: str
    target: str
    value: int
    class_counts: dict
    value_range: Optional[tuple] = None


@dataclass
class PathwayGraph:
    nodes: list = field(default_factory=list)
    links: list = field(default_factory=list)
    total: int = 0

    def node_by_id(self, node_id: str) -> PathwayNode:
        for node in self.nodes:
            if node.id == node_id:
                return node
        raise KeyError(node_id)


def _coerce_filter(class_filter) -> Optional[set]:
    if class_filter is None:
        return None
    out = set()
    for c in class_filter:
        if isinstance(c, str):
            out.add(int(DiagnosisClass.from_slug(c)))
        else:
            out.add(int(c))
    return out


def aggregate(traces: Sequence[EpisodeTrace],
              class_filter: Optional[Iterable] = None,
              merge: bool = True,
              value_ranges: bool = False) -> PathwayGraph:
    """Fold traces into a flow graph.

    Traces sharing an action prefix share nodes and links. `class_filter`
    keeps only traces whose TRUE class is in the set (passing all 8 classes
    is a no-op); an empty selection yields an empty graph. With
    `merge=False` nodes are keyed by their full query history instead of
    (depth, action), so distinct prefixes never share a node.
    """
    allowed = _coerce_filter(class_filter)
    if allowed is not None:
        traces = [t for t in traces if t.true_class in allowed]
    if not traces:
        return PathwayGraph()

    node_stats: dict = {}  # key -> [label, depth, support]
    link_stats: dict = {}  # (src key, dst key) -> [value, counts, lo, hi]
    for trace in traces:
        slug = DiagnosisClass(trace.true_class).slug
        prev_key = None
        prev_step = None
        path: list = []
        for depth, step in enumerate(trace.steps):
            path.append(step.action)
            key = (depth, step.action) if merge else (depth, tuple(path))
            node = node_stats.setdefault(key, [step.label, depth, 0])
            node[2] += 1
            if prev_key is not None:
                link = link_stats.setdefault((prev_key, key),
                                             [0, {}, None, None])
                link[0] += 1
                link[1][slug] = link[1].get(slug, 0) + 1
                if value_ranges and prev_step.value is not None:
                    lo, hi = link[2], link[3]
                    v = prev_step.value
                    link[2] = v if lo is None else min(lo, v)
                    link[3] = v if hi is None else max(hi, v)
            prev_key, prev_step = key, step

    ids = _assign_ids(node_stats, merge)
    nodes = [PathwayNode(ids[key], label, depth, support)
             for key, (label, depth, support) in node_stats.items()]
    nodes.sort(key=lambda n: (n.depth, -n.support, n.label, n.id))
    order = {n.id: i for i, n in enumerate(nodes)}
    links = [
        PathwayLink(
            source=ids[src], target=ids[dst], value=value,
            class_counts=dict(sorted(counts.items())),
            value_range=None if lo is None else (lo, hi),
        )
        for (src, dst), (value, counts, lo, hi) in link_stats.items()
    ]
    links.sort(key=lambda l: (order[l.source], order[l.target]))
    return PathwayGraph(nodes=nodes, links=links, total=len(traces))


def _assign_ids(node_stats: dict, merge: bool) -> dict:
    if merge:
        return {key: f"d{depth}:{label}"
                for key, (label, depth, _) in node_stats.items()}
    # prefix mode: same (depth, label) may appear for different histories
    groups: dict = {}
    for key, (label, depth, support) in node_stats.items():
        groups.setdefault((depth, label), []).append((-support, key[1], key))
    ids = {}
    for (depth, label), members in groups.items():
        members.sort()
        for i, (_, _, key) in enumerate(members):
            suffix = f"#{i}" if len(members) > 1 else ""
            ids[key] = f"d{depth}:{label}{suffix}"
    return ids


def export_sankey(graph: PathwayGraph) -> str:
    """Serialize a graph to the versioned JSON flow-diagram document."""
    links = []
    for link in graph.links:
        entry = {
            "source": link.source,
            "target": link.target,
            "value": link.value,
            "classCounts": link.class_counts,
        }
        if link.value_range is not None:
            entry["valueRange"] = [link.value_range[0], link.value_range[1]]
        links.append(entry)
    doc = {
        "nodes": [{"id": n.id, "label": n.label, "depth": n.depth,
                   "support": n.support} for n in graph.nodes],
        "links": links,
        "total": graph.total,
        "version": SANKEY_VERSION,
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_sankey(text: str) -> PathwayGraph:
    doc = json.loads(text)
    nodes = [PathwayNode(n["id"], n["label"], n["depth"], n.get("support", 0))
             for n in doc["nodes"]]
    links = [
        PathwayLink(
            source=l["source"], target=l["target"], value=l["value"],
            class_counts=l["classCounts"],
            value_range=tuple(l["valueRange"]) if "valueRange" in l else None,
        )
        for l in doc["links"]
    ]
    return PathwayGraph(nodes=nodes, links=links, total=doc["total"])


def _action_by_label(catalog: FeatureCatalog) -> dict:
    count = len(catalog) + CLASS_COUNT
    return {action_label(a, catalog): a for a in range(count)}


def write_traces_csv(traces: Sequence[EpisodeTrace], path) -> None:
    """One row per step: record id, step index, action, value, outcome."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "step_index", "action", "value",
                         "outcome", "true_class"])
        for trace in traces:
            outcome = NO_DIAGNOSIS if trace.outcome is None else \
                DiagnosisClass(trace.outcome).slug
            true = DiagnosisClass(trace.true_class).slug
            for i, step in enumerate(trace.steps):
                value = "" if step.value is None else repr(step.value)
                writer.writerow([trace.record_id, i, step.label, value,
                                 outcome, true])


def read_traces_csv(path, catalog: FeatureCatalog = DEFAULT_CATALOG) -> list:
    actions = _action_by_label(catalog)
    traces: dict = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rid = int(row["record_id"])
            if rid not in traces:
                outcome = None if row["outcome"] == NO_DIAGNOSIS else \
                    int(DiagnosisClass.from_slug(row["outcome"]))
                true = int(DiagnosisClass.from_slug(row["true_class"]))
                traces[rid] = EpisodeTrace(rid, [], outcome, true)
            action = actions[row["action"]]
            value = float(row["value"]) if row["value"] else None
            step = TraceStep(action, row["action"], value)
            trace = traces[rid]
            if int(row["step_index"]) != len(trace.steps):
                raise ValueError(
                    f"trace rows for record {rid} are out of order")
            trace.steps.append(step)
    return list(traces.values())
