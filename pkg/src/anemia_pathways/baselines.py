"""Reference agents and supervised baselines.

Four comparison points for the learned agents: an oracle agent that follows
the labeling tree, a uniform-random agent, a greedy gini decision tree, and
a softmax feed-forward classifier built on the same network core as the
Q-agents. The classifiers read full records with missing values imputed to
the environment's -1 sentinel, so all baselines consume the same encoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .catalog import CLASS_COUNT, DEFAULT_CATALOG, Dataset, DiagnosisClass, \
    FeatureCatalog
from .env import MISSING_SENTINEL, diag_action, value_action
from .neural import Adam, FeatureScaler, MlpParams, backward, forward, \
    init_mlp, load_checkpoint, save_checkpoint
from .reference_tree import DEFAULT_TREE, ReferenceTree

__all__ = [
    "TreeAgent", "RandomAgent", "CartConfig", "CartNode", "CartModel",
    "cart_train", "FfnnConfig", "FfnnModel", "ffnn_train", "impute_missing",
]


def impute_missing(values: np.ndarray) -> np.ndarray:
    """Replace NaN with the observation sentinel; returns a copy."""
    out = np.array(values, dtype=np.float64)
    out[np.isnan(out)] = MISSING_SENTINEL
    return out


class TreeAgent:
    """Follows the labeling tree, querying each needed feature once.

    The episode cursor is the pair (walk position implied by the revealed
    values, set of features already requested). A feature that stays at the
    sentinel after being requested is missing, which sends the walk to the
    Inconclusive leaf.
    """

    def __init__(self, tree: ReferenceTree = DEFAULT_TREE,
                 catalog: FeatureCatalog = DEFAULT_CATALOG):
        self.tree = tree
        self.catalog = catalog
        self.asked: Optional[np.ndarray] = None

    def begin(self, n: int) -> None:
        self.asked = np.zeros((n, len(self.catalog)), dtype=bool)

    def act(self, observations: np.ndarray) -> np.ndarray:
        if self.asked is None or self.asked.shape[0] != observations.shape[0]:
            raise RuntimeError("call begin(n) before acting")
        actions = np.empty(observations.shape[0], dtype=np.int64)
        # both sentinels (unqueried, queried-but-absent) read as unknown
        values = np.where(observations < 0, np.nan, observations)
        for i in range(observations.shape[0]):
            actions[i] = self._act_row(values[i], self.asked[i])
        return actions

    def _act_row(self, values: np.ndarray, asked: np.ndarray) -> int:
        outcome = self.tree.walk(values)
        if isinstance(outcome, DiagnosisClass):
            return diag_action(outcome, self.catalog)
        if asked[outcome]:
            return diag_action(DiagnosisClass.INCONCLUSIVE, self.catalog)
        asked[outcome] = True
        return value_action(outcome)


class RandomAgent:
    """Uniform over the full action space, value queries and diagnoses alike."""

    def __init__(self, seed: int = 0,
                 catalog: FeatureCatalog = DEFAULT_CATALOG):
        self.rng = np.random.default_rng(seed)
        self.n_actions = len(catalog) + CLASS_COUNT

    def begin(self, n: int) -> None:
        pass

    def act(self, observations: np.ndarray) -> np.ndarray:
        return self.rng.integers(0, self.n_actions, observations.shape[0])


# --- greedy gini decision tree ----------------------------------------------

@dataclass
class CartConfig:
    max_depth: int = 12
    min_samples_leaf: int = 5

    def validate(self) -> None:
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")


@dataclass
class CartNode:
    """Internal split (feature, threshold) or leaf (class counts)."""

    counts: np.ndarray
    feature: int = -1
    threshold: float = 0.0
    left: Optional["CartNode"] = None
    right: Optional["CartNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def scores(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted gini over all (feature, midpoint) cuts, or None."""
    n, m = x.shape
    onehot = np.zeros((n, CLASS_COUNT))
    onehot[np.arange(n), y] = 1.0
    total = onehot.sum(axis=0)
    best = None  # (gini, feature, threshold)
    for j in range(m):
        order = np.argsort(x[:, j], kind="stable")
        vals = x[order, j]
        left = np.cumsum(onehot[order], axis=0)
        # split after position i puts i+1 rows left; boundaries need a value change
        counts = np.arange(1, n + 1, dtype=np.float64)
        cut = np.flatnonzero(vals[1:] > vals[:-1]) if n > 1 else np.array([], int)
        cut = cut[(cut + 1 >= min_leaf) & (n - cut - 1 >= min_leaf)]
        if cut.size == 0:
            continue
        nl = counts[cut]
        nr = n - nl
        gl = 1.0 - np.sum(np.square(left[cut] / nl[:, None]), axis=1)
        gr = 1.0 - np.sum(np.square((total - left[cut]) / nr[:, None]), axis=1)
        weighted = (nl * gl + nr * gr) / n
        k = int(np.argmin(weighted))
        if best is None or weighted[k] < best[0] - 1e-12:
            thr = 0.5 * (vals[cut[k]] + vals[cut[k] + 1])
            best = (float(weighted[k]), j, float(thr))
    return best


def _grow(x: np.ndarray, y: np.ndarray, depth: int,
          config: CartConfig) -> CartNode:
    counts = np.bincount(y, minlength=CLASS_COUNT).astype(np.float64)
    node = CartNode(counts)
    if depth >= config.max_depth or np.max(counts) == len(y) \
            or len(y) < 2 * config.min_samples_leaf:
        return node
    split = _best_split(x, y, config.min_samples_leaf)
    if split is None:
        return node
    _, node.feature, node.threshold = split
    mask = x[:, node.feature] < node.threshold
    node.left = _grow(x[mask], y[mask], depth + 1, config)
    node.right = _grow(x[~mask], y[~mask], depth + 1, config)
    return node


@dataclass
class CartModel:
    root: CartNode
    config: CartConfig
    catalog: FeatureCatalog = field(default_factory=lambda: DEFAULT_CATALOG)

    def predict(self, values: np.ndarray):
        """Classes and leaf-frequency scores for raw (possibly NaN) rows."""
        x = impute_missing(np.atleast_2d(values))
        scores = np.empty((x.shape[0], CLASS_COUNT))
        self._route(self.root, x, np.arange(x.shape[0]), scores)
        return np.argmax(scores, axis=1), scores

    def _route(self, node, x, rows, scores) -> None:
        if rows.size == 0:
            return
        if node.is_leaf:
            scores[rows] = node.scores
            return
        mask = x[rows, node.feature] < node.threshold
        self._route(node.left, x, rows[mask], scores)
        self._route(node.right, x, rows[~mask], scores)

    def node_count(self) -> int:
        def count(node):
            return 1 if node.is_leaf else 1 + count(node.left) + count(node.right)
        return count(self.root)

    def max_depth(self) -> int:
        def depth(node):
            return 0 if node.is_leaf else 1 + max(depth(node.left), depth(node.right))
        return depth(self.root)

    def save(self, path) -> None:
        lines = [
            f"cart-model version=1 max_depth={self.config.max_depth} "
            f"min_samples_leaf={self.config.min_samples_leaf} "
            f"catalog={self.catalog.content_hash()}"
        ]

        def emit(node, indent):
            pad = "  " * indent
            counts = ",".join(repr(float(c)) for c in node.counts)
            if node.is_leaf:
                lines.append(f"{pad}leaf counts={counts}")
            else:
                name = self.catalog.names[node.feature]
                lines.append(f"{pad}split feature={name} "
                             f"threshold={node.threshold!r} counts={counts}")
                emit(node.left, indent + 1)
                emit(node.right, indent + 1)

        emit(self.root, 0)
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path,
             catalog: FeatureCatalog = DEFAULT_CATALOG) -> "CartModel":
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or not lines[0].startswith("cart-model version=1"):
            raise ValueError(f"{path} is not a serialized decision tree")
        header = dict(part.split("=", 1) for part in lines[0].split()[1:])
        if header["catalog"] != catalog.content_hash():
            raise ValueError("model was trained against a different feature catalog")
        config = CartConfig(int(header["max_depth"]),
                            int(header["min_samples_leaf"]))
        pos = 1

        def parse(indent):
            nonlocal pos
            line = lines[pos]
            pos += 1
            body = line.strip()
            fields = dict(part.split("=", 1) for part in body.split()[1:])
            counts = np.array([float(c) for c in fields["counts"].split(",")])
            if body.startswith("leaf"):
                return CartNode(counts)
            node = CartNode(counts,
                            feature=catalog.index_of(fields["feature"]),
                            threshold=float(fields["threshold"]))
            node.left = parse(indent + 1)
            node.right = parse(indent + 1)
            return node

        root = parse(0)
        return cls(root, config, catalog)


def cart_train(data: Dataset, config: Optional[CartConfig] = None) -> CartModel:
    """Greedy gini induction on sentinel-imputed records."""
    config = config if config is not None else CartConfig()
    config.validate()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    x = impute_missing(data.values)
    root = _grow(x, data.labels, 0, config)
    return CartModel(root, config, data.catalog)


# --- feed-forward classifier -------------------------------------------------

@dataclass
class FfnnConfig:
    hidden_sizes: tuple = (64, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 40

    def validate(self) -> None:
        if not self.hidden_sizes or any(int(h) < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive widths")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate, batch_size, epochs must be positive")


@dataclass
class FfnnModel:
    params: MlpParams
    scaler: FeatureScaler
    catalog: FeatureCatalog = field(default_factory=lambda: DEFAULT_CATALOG)

    def predict(self, values: np.ndarray):
        """Classes and softmax probabilities for raw (possibly NaN) rows."""
        x = self.scaler.apply(impute_missing(np.atleast_2d(values)))
        logits = forward(self.params, x)
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        probs = ez / ez.sum(axis=1, keepdims=True)
        return np.argmax(probs, axis=1), probs

    def save(self, path) -> None:
        save_checkpoint(path, self.params, header_extra={
            "kind": "ffnn", "catalog_hash": self.catalog.content_hash(),
            "scaler": self.scaler.to_dict()})

    @classmethod
    def load(cls, path,
             catalog: FeatureCatalog = DEFAULT_CATALOG) -> "FfnnModel":
        params, extra, _ = load_checkpoint(path)
        if extra.get("kind") != "ffnn":
            raise ValueError(f"{path} is not a classifier checkpoint")
        if extra.get("catalog_hash") != catalog.content_hash():
            raise ValueError("model was trained against a different feature catalog")
        return cls(params, FeatureScaler.from_dict(extra["scaler"]), catalog)


def ffnn_train(data: Dataset, config: Optional[FfnnConfig] = None,
               seed: int = 0) -> FfnnModel:
    """Minibatch softmax cross-entropy training on sentinel-imputed records."""
    config = config if config is not None else FfnnConfig()
    config.validate()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    scaler = FeatureScaler.fit(data.values)
    x = scaler.apply(impute_missing(data.values))
    y = data.labels
    n = len(data)
    params = init_mlp(x.shape[1], tuple(config.hidden_sizes), CLASS_COUNT,
                      False, rng)
    optimizer = Adam(params, config.learning_rate)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            logits, cache = forward(params, x[rows], cache=True)
            z = logits - logits.max(axis=1, keepdims=True)
            ez = np.exp(z)
            probs = ez / ez.sum(axis=1, keepdims=True)
            dlogits = probs.copy()
            dlogits[np.arange(rows.size), y[rows]] -= 1.0
            dlogits /= rows.size
            grads = backward(params, cache, dlogits)
            optimizer.step(params, grads)
    return FfnnModel(params, scaler, data.catalog)
