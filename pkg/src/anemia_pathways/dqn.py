"""Q-learning agents for sequential diagnosis.

One trainer covers the whole agent family: a base deep Q-network plus three
independently switchable extensions (double bootstrap targets, a dueling
value/advantage head, proportional prioritized replay). Episodes draw
training records uniformly with replacement, exploration follows a linear
epsilon decay, and checkpoint selection keeps the parameters with the best
greedy accuracy on a held-out validation split.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from .catalog import CLASS_COUNT, DEFAULT_CATALOG, Dataset, FeatureCatalog
from .env import DEFAULT_MAX_STEPS, MISSING_SENTINEL, BatchEnv, DiagnosisEnv
from .neural import Adam, FeatureScaler, MlpParams, backward, clip_grad_norm, forward, \
    init_mlp, load_checkpoint, save_checkpoint
from .replay import PERBuffer, ReplayBuffer

__all__ = [
    "VARIANTS", "AgentConfig", "Policy", "TrainResult", "td_target",
    "epsilon_at", "beta_at", "train", "greedy_accuracy", "metadata_path",
    "write_training_log", "EpisodeRow", "fit_observation_scaler",
]

POLICY_FORMAT = "anemia-pathways-policy"
POLICY_FORMAT_VERSION = 1

# variant name -> constructor flag overrides
VARIANTS = {
    "dqn": {},
    "dqn-per": {"prioritized": True},
    "ddqn": {"double": True},
    "ddqn-per": {"double": True, "prioritized": True},
    "dueling": {"dueling": True},
    "dueling-per": {"dueling": True, "prioritized": True},
    "dueling-ddqn": {"double": True, "dueling": True},
    "dueling-ddqn-per": {"double": True, "dueling": True, "prioritized": True},
}


@dataclass
class AgentConfig:
    """Hyperparameters and extension switches for one training run."""

    double: bool = False
    dueling: bool = False
    prioritized: bool = False
    total_timesteps: int = 1_000_000
    buffer_size: int = 1_000_000
    learning_rate: float = 1e-4
    gamma: float = 0.99
    batch_size: int = 32
    train_frequency: int = 4
    learning_starts: int = 50_000
    target_update_interval: int = 10_000
    exploration_fraction: float = 0.1
    epsilon_final: float = 0.05
    hidden_sizes: tuple = (64, 64)
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_final: float = 1.0
    per_eps: float = 1e-6
    eval_interval: int = 50_000
    max_steps: int = DEFAULT_MAX_STEPS
    # squared TD error by default; "huber" switches to the unit-quadratic
    # zone with linear tails, which caps the gradient of outlier errors
    loss: str = "mse"
    grad_norm_clip: Optional[float] = None

    @classmethod
    def for_variant(cls, name: str, **overrides) -> "AgentConfig":
        if name not in VARIANTS:
            raise ValueError(
                f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
        return cls(**{**VARIANTS[name], **overrides})

    @property
    def variant_name(self) -> str:
        if self.dueling:
            name = "dueling-ddqn" if self.double else "dueling"
        else:
            name = "ddqn" if self.double else "dqn"
        return name + "-per" if self.prioritized else name

    def validate(self) -> None:
        positive = {
            "total_timesteps": self.total_timesteps,
            "buffer_size": self.buffer_size,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "train_frequency": self.train_frequency,
            "target_update_interval": self.target_update_interval,
            "eval_interval": self.eval_interval,
            "max_steps": self.max_steps,
            "per_eps": self.per_eps,
        }
        for label, value in positive.items():
            if value <= 0:
                raise ValueError(f"{label} must be positive, got {value}")
        if self.learning_starts < 0:
            raise ValueError("learning_starts cannot be negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 < self.exploration_fraction <= 1.0:
            raise ValueError("exploration_fraction must be in (0, 1]")
        if not 0.0 <= self.epsilon_final <= 1.0:
            raise ValueError("epsilon_final must be in [0, 1]")
        if not self.hidden_sizes or any(int(h) < 1 for h in self.hidden_sizes):
            raise ValueError("hidden_sizes must be positive widths")
        if not 0.0 <= self.per_alpha <= 1.0:
            raise ValueError("per_alpha must be in [0, 1]")
        if not 0.0 <= self.per_beta_start <= self.per_beta_final <= 1.0:
            raise ValueError("per beta schedule must satisfy 0 <= start <= final <= 1")
        if self.loss not in ("mse", "huber"):
            raise ValueError(f"loss must be 'mse' or 'huber', got {self.loss!r}")
        if self.grad_norm_clip is not None and self.grad_norm_clip <= 0:
            raise ValueError("grad_norm_clip must be positive when set")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "AgentConfig":
        d = dict(d)
        d["hidden_sizes"] = tuple(d["hidden_sizes"])
        return cls(**d)


def epsilon_at(step: int, config: AgentConfig) -> float:
    """Linear decay from 1.0 to the floor over the exploration window."""
    horizon = config.exploration_fraction * config.total_timesteps
    frac = min(1.0, step / horizon)
    return 1.0 + frac * (config.epsilon_final - 1.0)


def beta_at(step: int, config: AgentConfig) -> float:
    """Importance-weight exponent annealed linearly over the whole run."""
    frac = min(1.0, step / config.total_timesteps)
    return config.per_beta_start + frac * (config.per_beta_final
                                           - config.per_beta_start)


def td_target(rewards, q_next_target, dones, gamma, q_next_policy=None):
    """One-step bootstrapped targets for a batch of transitions.

    Without `q_next_policy` the bootstrap value is the target network's own
    maximum. With it, the online network chooses the action and the target
    network prices it (the double estimator). Terminal transitions reduce
    to the reward.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    q_next_target = np.atleast_2d(np.asarray(q_next_target, dtype=np.float64))
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    if q_next_policy is None:
        bootstrap = q_next_target.max(axis=1)
    else:
        q_next_policy = np.atleast_2d(np.asarray(q_next_policy, dtype=np.float64))
        greedy = np.argmax(q_next_policy, axis=1)
        bootstrap = q_next_target[np.arange(len(greedy)), greedy]
    return rewards + gamma * bootstrap * live


def metadata_path(path) -> str:
    return str(path) + ".meta.json"


def fit_observation_scaler(data: Dataset) -> FeatureScaler:
    """Input conditioning fitted on the measured values of a training set."""
    return FeatureScaler.fit(data.values)


@dataclass
class Policy:
    """A trained (or freshly initialized) greedy diagnosis policy."""

    params: MlpParams
    config: AgentConfig
    catalog: FeatureCatalog = field(default_factory=lambda: DEFAULT_CATALOG)
    metadata: dict = field(default_factory=dict)
    scaler: Optional[FeatureScaler] = None

    def __post_init__(self):
        if self.scaler is None:
            self.scaler = FeatureScaler.identity(len(self.catalog))

    @property
    def action_count(self) -> int:
        return len(self.catalog) + CLASS_COUNT

    def q_values(self, obs: np.ndarray) -> np.ndarray:
        return forward(self.params, self.scaler.apply(obs))

    def act_greedy(self, obs: np.ndarray):
        """Highest-value action; ties resolve to the lowest action index."""
        q = self.q_values(obs)
        if q.ndim == 1:
            return int(np.argmax(q))
        return np.argmax(q, axis=1)

    def act_epsilon(self, obs: np.ndarray, epsilon: float,
                    rng: np.random.Generator) -> int:
        if rng.random() < epsilon:
            return int(rng.integers(0, self.action_count))
        return self.act_greedy(obs)

    def save(self, path) -> None:
        """Binary network checkpoint plus a JSON metadata sidecar."""
        save_checkpoint(path, self.params, header_extra={
            "kind": "policy", "variant": self.config.variant_name,
        })
        meta = {
            "format": POLICY_FORMAT,
            "format_version": POLICY_FORMAT_VERSION,
            "variant": self.config.variant_name,
            "flags": {
                "double": self.config.double,
                "dueling": self.config.dueling,
                "prioritized": self.config.prioritized,
            },
            "catalog_hash": self.catalog.content_hash(),
            "observation_size": len(self.catalog),
            "action_count": self.action_count,
            "scaler": self.scaler.to_dict(),
            "config": self.config.snapshot(),
            "training": self.metadata,
        }
        with open(metadata_path(path), "w") as fh:
            fh.write(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, catalog: FeatureCatalog = DEFAULT_CATALOG) -> "Policy":
        params, _, _ = load_checkpoint(path)
        with open(metadata_path(path)) as fh:
            meta = json.load(fh)
        if meta.get("format") != POLICY_FORMAT:
            raise ValueError(f"{path} is not a policy checkpoint")
        if meta["catalog_hash"] != catalog.content_hash():
            raise ValueError("policy was trained against a different feature catalog")
        config = AgentConfig.from_snapshot(meta["config"])
        scaler = FeatureScaler.from_dict(meta["scaler"])
        return cls(params, config, catalog, meta.get("training", {}), scaler)


@dataclass
class EpisodeRow:
    """One line of the training log."""

    step: int
    episode: int
    reward: float
    length: int
    epsilon: float
    loss: Optional[float]


def write_training_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "episode", "reward", "length", "epsilon", "loss"])
        for r in rows:
            writer.writerow([
                r.step, r.episode, repr(r.reward), r.length, repr(r.epsilon),
                "" if r.loss is None else repr(r.loss),
            ])


@dataclass
class TrainResult:
    """Everything a finished run produces.

    `evaluations` rows are (step, validation accuracy %, mean episode
    length) triples, one per periodic greedy evaluation.
    """
    policy: Policy
    final_policy: Policy
    episodes: list
    losses: np.ndarray
    evaluations: list
    gradient_steps: int
    target_updates: int
    best_step: int
    best_validation_accuracy: Optional[float]
    seed: int

    def write_log(self, path) -> None:
        write_training_log(self.episodes, path)


def greedy_eval(params: MlpParams, dataset: Dataset,
                max_steps: int = DEFAULT_MAX_STEPS,
                scaler: Optional[FeatureScaler] = None) -> Tuple[float, float]:
    """Greedy-policy (accuracy %, mean episode length) over a dataset."""
    env = BatchEnv(dataset, max_steps)
    for _ in range(max_steps + 1):
        if np.all(env.done):
            break
        x = env.observations if scaler is None else scaler.apply(env.observations)
        env.step(np.argmax(forward(params, x), axis=1))
    accuracy = 100.0 * float(np.mean(env.diagnoses == env.labels))
    return accuracy, float(np.mean(env.t))


def greedy_accuracy(params: MlpParams, dataset: Dataset,
                    max_steps: int = DEFAULT_MAX_STEPS,
                    scaler: Optional[FeatureScaler] = None) -> float:
    """Percent of records the greedy policy diagnoses correctly."""
    return greedy_eval(params, dataset, max_steps, scaler)[0]


class Trainer:
    """Mutable training state; `run` drives it to the step budget."""

    def __init__(self, data: Dataset, config: Optional[AgentConfig] = None,
                 seed: int = 0, validation: Optional[Dataset] = None):
        if len(data) == 0:
            raise ValueError("cannot train on an empty dataset")
        self.config = config if config is not None else AgentConfig()
        self.config.validate()
        self.data = data
        self.validation = validation
        self.seed = seed
        self.catalog = data.catalog
        self.rng = np.random.default_rng(seed)
        self.scaler = fit_observation_scaler(data)
        m = len(self.catalog)
        self.n_actions = m + CLASS_COUNT
        cfg = self.config
        self.params = init_mlp(m, tuple(cfg.hidden_sizes), self.n_actions,
                               cfg.dueling, self.rng)
        self.target = self.params.clone()
        self.optimizer = Adam(self.params, cfg.learning_rate)
        capacity = min(cfg.buffer_size, cfg.total_timesteps)
        if cfg.prioritized:
            self.buffer = PERBuffer(capacity, m, cfg.per_alpha, cfg.per_eps)
        else:
            self.buffer = ReplayBuffer(capacity, m)
        self.env = DiagnosisEnv(self.catalog, cfg.max_steps)
        self.global_step = 0
        self.gradient_steps = 0
        self.target_updates = 0
        self.episodes: list[EpisodeRow] = []
        self.losses: list[float] = []
        self.evaluations: list[tuple[int, float]] = []
        self.last_loss: Optional[float] = None
        self.best_params: Optional[MlpParams] = None
        self.best_accuracy: Optional[float] = None
        self.best_step = 0

    def _act(self, obs: np.ndarray, epsilon: float) -> int:
        if self.rng.random() < epsilon:
            return int(self.rng.integers(0, self.n_actions))
        return int(np.argmax(forward(self.params, self.scaler.apply(obs))))

    def _gradient_step(self) -> float:
        cfg = self.config
        beta = beta_at(self.global_step, cfg) if cfg.prioritized else 0.0
        batch = self.buffer.sample(cfg.batch_size, self.rng, beta)
        next_x = self.scaler.apply(batch.next_observations)
        q_next_target = forward(self.target, next_x)
        q_next_policy = forward(self.params, next_x) if cfg.double else None
        targets = td_target(batch.rewards, q_next_target, batch.dones,
                            cfg.gamma, q_next_policy)
        q_all, cache = forward(self.params, self.scaler.apply(batch.observations),
                               cache=True)
        rows = np.arange(cfg.batch_size)
        delta = q_all[rows, batch.actions] - targets
        if cfg.loss == "huber":
            small = np.abs(delta) <= 1.0
            loss_terms = np.where(small, 0.5 * delta * delta,
                                  np.abs(delta) - 0.5)
            dloss = np.clip(delta, -1.0, 1.0)
        else:
            loss_terms = delta * delta
            dloss = 2.0 * delta
        loss = float(np.mean(batch.weights * loss_terms))
        dq = np.zeros_like(q_all)
        dq[rows, batch.actions] = batch.weights * dloss / cfg.batch_size
        grads = backward(self.params, cache, dq)
        if cfg.grad_norm_clip is not None:
            clip_grad_norm(grads, cfg.grad_norm_clip)
        self.optimizer.step(self.params, grads)
        self.buffer.update_priorities(batch.indices, delta)
        return loss

    def _evaluate(self) -> None:
        acc, mean_len = greedy_eval(self.params, self.validation,
                                    self.config.max_steps, self.scaler)
        self.evaluations.append((self.global_step, acc, mean_len))
        if self.best_accuracy is None or acc > self.best_accuracy:
            self.best_accuracy = acc
            self.best_params = self.params.clone()
            self.best_step = self.global_step

    def run(self, callback: Optional[Callable] = None) -> TrainResult:
        cfg = self.config
        n = len(self.data)
        episode_idx = len(self.episodes)
        while self.global_step < cfg.total_timesteps:
            record = self.data[int(self.rng.integers(0, n))]
            obs = self.env.reset(record)
            ep_reward, ep_len, eps = 0.0, 0, epsilon_at(self.global_step, cfg)
            done = False
            while not done and self.global_step < cfg.total_timesteps:
                eps = epsilon_at(self.global_step, cfg)
                action = self._act(obs, eps)
                result = self.env.step(action)
                self.buffer.add(obs, action, result.reward,
                                result.observation, result.done)
                obs = result.observation
                ep_reward += result.reward
                ep_len += 1
                self.global_step += 1
                done = result.done
                if (self.global_step >= cfg.learning_starts
                        and self.global_step % cfg.train_frequency == 0):
                    self.last_loss = self._gradient_step()
                    self.losses.append(self.last_loss)
                    self.gradient_steps += 1
                if self.global_step % cfg.target_update_interval == 0:
                    self.target.copy_from(self.params)
                    self.target_updates += 1
                if (self.validation is not None
                        and self.global_step % cfg.eval_interval == 0):
                    self._evaluate()
                if callback is not None:
                    callback(self)
            self.episodes.append(EpisodeRow(
                self.global_step, episode_idx, ep_reward, ep_len, eps,
                self.last_loss))
            episode_idx += 1
        if self.validation is not None and (
                not self.evaluations
                or self.evaluations[-1][0] != self.global_step):
            self._evaluate()
        return self._result()

    def _result(self) -> TrainResult:
        selected = self.best_params if self.best_params is not None else self.params
        meta = {
            "seed": self.seed,
            "variant": self.config.variant_name,
            "total_timesteps": self.global_step,
            "gradient_steps": self.gradient_steps,
            "selected_step": self.best_step if self.best_params is not None
            else self.global_step,
            "validation_accuracy": self.best_accuracy,
        }
        policy = Policy(selected.clone(), self.config, self.catalog, meta,
                        self.scaler)
        final_meta = dict(meta)
        final_meta["selected_step"] = self.global_step
        final_meta["validation_accuracy"] = (
            self.evaluations[-1][1] if self.evaluations else None)
        final = Policy(self.params.clone(), self.config, self.catalog,
                       final_meta, self.scaler)
        return TrainResult(
            policy=policy, final_policy=final, episodes=self.episodes,
            losses=np.asarray(self.losses), evaluations=self.evaluations,
            gradient_steps=self.gradient_steps, target_updates=self.target_updates,
            best_step=meta["selected_step"],
            best_validation_accuracy=self.best_accuracy, seed=self.seed,
        )


def train(data: Dataset, config: Optional[AgentConfig] = None, seed: int = 0,
          validation: Optional[Dataset] = None, log_path=None,
          callback: Optional[Callable] = None) -> TrainResult:
    """Train one agent; same data, config, and seed give identical results."""
    trainer = Trainer(data, config, seed, validation)
    result = trainer.run(callback)
    if log_path is not None:
        result.write_log(log_path)
    return result
