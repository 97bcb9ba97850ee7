"""Baseline agent and classifier tests."""

import numpy as np
import pytest

from anemia_pathways.baselines import (
    CartConfig, CartModel, FfnnConfig, FfnnModel, RandomAgent, TreeAgent,
    cart_train, ffnn_train, impute_missing)
from anemia_pathways.catalog import (
    DEFAULT_CATALOG, Dataset, DiagnosisClass, GENDER_MALE, PatientRecord)
from anemia_pathways.corruption import inject_missingness
from anemia_pathways.env import BatchEnv, DiagnosisEnv, TerminalCause, \
    diag_action, value_action


def rollout(agent, data, max_steps=20):
    """Run every record to termination; returns (env, total rewards)."""
    env = BatchEnv(data, max_steps)
    agent.begin(len(data))
    total = np.zeros(len(data))
    for _ in range(max_steps + 1):
        if np.all(env.done):
            break
        env.step(agent.act(env.observations))
        total += env.rewards
    assert np.all(env.done)
    return env, total


def record(**named):
    values = np.full(17, np.nan)
    for name, v in named.items():
        values[DEFAULT_CATALOG.index_of(name)] = v
    return PatientRecord(values, DiagnosisClass.NO_ANEMIA)


# --- tree agent --------------------------------------------------------------

def test_tree_agent_is_perfect_on_clean_test_split(splits):
    _, _, test = splits
    env, rewards = rollout(TreeAgent(), test)
    assert np.array_equal(env.diagnoses, test.labels)
    assert np.all(rewards == 1.0)
    assert np.mean(env.t) == pytest.approx(3.975, abs=0.05)


def test_tree_agent_shortest_branch():
    agent = TreeAgent()
    agent.begin(1)
    env = DiagnosisEnv()
    obs = env.reset(record(hemoglobin=14.0, gender=GENDER_MALE))
    first = int(agent.act(obs[None])[0])
    assert first == value_action(DEFAULT_CATALOG.index_of("hemoglobin"))
    obs = env.step(first).observation
    second = int(agent.act(obs[None])[0])
    assert second == diag_action(DiagnosisClass.NO_ANEMIA)
    assert env.step(second).done


def test_tree_agent_queries_gender_only_in_band():
    agent = TreeAgent()
    agent.begin(1)
    env = DiagnosisEnv()
    obs = env.reset(record(hemoglobin=12.5, gender=GENDER_MALE, mcv=90.0,
                           reticulocyte_count=3.0))
    trace = []
    done = False
    while not done:
        action = int(agent.act(obs[None])[0])
        trace.append(action)
        result = env.step(action)
        obs, done = result.observation, result.done
    names = ["hemoglobin", "gender", "mcv", "reticulocyte_count"]
    expected = [value_action(DEFAULT_CATALOG.index_of(n)) for n in names]
    assert trace == expected + [diag_action(DiagnosisClass.HEMOLYTIC)]


def test_tree_agent_missing_required_feature_is_inconclusive():
    agent = TreeAgent()
    agent.begin(1)
    env = DiagnosisEnv()
    obs = env.reset(record(hemoglobin=9.0, mcv=90.0))  # reticulocyte missing
    actions = []
    done = False
    while not done:
        action = int(agent.act(obs[None])[0])
        actions.append(action)
        result = env.step(action)
        obs, done = result.observation, result.done
    assert len(actions) == 4  # hgb, mcv, retic, diagnose
    assert actions[-1] == diag_action(DiagnosisClass.INCONCLUSIVE)
    assert result.info["cause"] is TerminalCause.DIAGNOSED


def test_tree_agent_never_repeats_even_with_missing_values(splits):
    _, _, test = splits
    sample = test.subset(np.arange(0, len(test), 40))
    hidden = inject_missingness(sample, 0.4, rng=np.random.default_rng(3))
    env, _ = rollout(TreeAgent(), hidden)
    causes = [env.cause_of(i) for i in range(len(hidden))]
    assert all(c is TerminalCause.DIAGNOSED for c in causes)
    assert np.max(env.t) <= 6


def test_tree_agent_requires_begin():
    with pytest.raises(RuntimeError, match="begin"):
        TreeAgent().act(np.full((1, 17), -1.0))


# --- random agent ------------------------------------------------------------

def test_random_agent_uniform_histogram():
    agent = RandomAgent(seed=11)
    agent.begin(1000)
    obs = np.full((1000, 17), -1.0)
    counts = np.zeros(25)
    for _ in range(100):
        counts += np.bincount(agent.act(obs), minlength=25)
    freq = counts / 100_000
    assert np.all(np.abs(freq - 0.04) < 0.002)


def test_random_agent_matches_analytic_episode_statistics(splits):
    # accuracy 2.6615/25 and mean length 2.6615 follow from uniform play:
    # survival to step k needs k-1 distinct value queries in a row
    _, _, test = splits
    accs, lengths = [], []
    for seed in range(10):
        env, _ = rollout(RandomAgent(seed=seed), test)
        accs.append(100.0 * np.mean(env.diagnoses == test.labels))
        lengths.append(np.mean(env.t))
    assert np.mean(accs) == pytest.approx(10.646, abs=0.5)
    assert np.mean(lengths) == pytest.approx(2.6615, abs=0.05)


# --- decision tree -----------------------------------------------------------

def toy_dataset(x_col, labels):
    values = np.zeros((len(labels), 17))
    values[:, 0] = x_col
    return Dataset(values, np.asarray(labels, dtype=np.int64))


def test_cart_single_class_collapses_to_one_leaf():
    data = toy_dataset(np.linspace(0, 10, 40), np.full(40, 3))
    model = cart_train(data)
    assert model.root.is_leaf
    classes, scores = model.predict(data.values)
    assert np.all(classes == 3)
    assert np.all(scores[:, 3] == 1.0)


def test_cart_learns_simple_threshold():
    x = np.linspace(0.0, 10.0, 200)
    data = toy_dataset(x, (x > 5.0).astype(int))
    model = cart_train(data)
    assert not model.root.is_leaf
    assert model.root.feature == 0
    assert model.root.threshold == pytest.approx(5.0, abs=0.1)
    classes, _ = model.predict(data.values)
    assert np.mean(classes == data.labels) == 1.0


def test_cart_accuracy_on_clean_splits(splits):
    train, _, test = splits
    model = cart_train(train)
    classes, scores = model.predict(test.values)
    accuracy = 100.0 * np.mean(classes == test.labels)
    assert accuracy >= 99.5
    assert model.max_depth() <= 12
    assert np.allclose(scores.sum(axis=1), 1.0, atol=1e-12)


def test_cart_respects_min_leaf(splits):
    train, _, _ = splits
    model = cart_train(train.subset(np.arange(0, len(train), 7)),
                       CartConfig(max_depth=12, min_samples_leaf=5))

    def check(node):
        if node.is_leaf:
            assert node.counts.sum() >= 5
        else:
            check(node.left)
            check(node.right)

    check(model.root)


def test_cart_serialization_round_trip(tmp_path, splits):
    train, _, test = splits
    model = cart_train(train.subset(np.arange(0, len(train), 9)))
    path = tmp_path / "tree.txt"
    model.save(path)
    loaded = CartModel.load(path)
    probe = test.values[:500]
    c1, s1 = model.predict(probe)
    c2, s2 = loaded.predict(probe)
    assert np.array_equal(c1, c2)
    assert np.array_equal(s1, s2)
    again = tmp_path / "tree2.txt"
    loaded.save(again)
    assert path.read_bytes() == again.read_bytes()


def test_cart_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.txt"
    path.write_text("not a model\n")
    with pytest.raises(ValueError, match="not a serialized"):
        CartModel.load(path)


def test_cart_training_is_deterministic(splits):
    train, _, _ = splits
    sub = train.subset(np.arange(0, len(train), 11))
    a, b = cart_train(sub), cart_train(sub)

    def spine(node):
        if node.is_leaf:
            return ("leaf", tuple(node.counts))
        return ("split", node.feature, node.threshold,
                spine(node.left), spine(node.right))

    assert spine(a.root) == spine(b.root)


def test_cart_empty_training_set_rejected():
    with pytest.raises(ValueError, match="empty"):
        cart_train(toy_dataset(np.array([]), np.array([], dtype=np.int64)))


def test_impute_missing_uses_sentinel():
    values = np.array([[1.0, np.nan, 3.0]])
    out = impute_missing(values)
    assert np.array_equal(out, [[1.0, -1.0, 3.0]])
    assert np.isnan(values[0, 1])  # original untouched


# --- feed-forward classifier -------------------------------------------------

def test_ffnn_scores_are_probabilities(splits):
    train, _, test = splits
    model = ffnn_train(train.subset(np.arange(256)),
                       FfnnConfig(epochs=1), seed=0)
    _, probs = model.predict(test.values[:200])
    assert np.all(np.abs(probs.sum(axis=1) - 1.0) <= 1e-9)
    assert np.all(probs >= 0.0)


def test_ffnn_zero_epochs_is_chance_level(splits):
    train, _, test = splits
    model = ffnn_train(train, FfnnConfig(epochs=0), seed=1)
    classes, _ = model.predict(test.values)
    accuracy = 100.0 * np.mean(classes == test.labels)
    assert accuracy < 25.0


def test_ffnn_reaches_strong_accuracy(splits):
    train, _, test = splits
    model = ffnn_train(train, FfnnConfig(), seed=0)
    classes, _ = model.predict(test.values)
    accuracy = 100.0 * np.mean(classes == test.labels)
    assert accuracy >= 96.0


def test_ffnn_save_load_round_trip(tmp_path, splits):
    train, _, test = splits
    model = ffnn_train(train.subset(np.arange(512)),
                       FfnnConfig(epochs=2), seed=5)
    path = tmp_path / "ffnn.bin"
    model.save(path)
    loaded = FfnnModel.load(path)
    c1, p1 = model.predict(test.values[:300])
    c2, p2 = loaded.predict(test.values[:300])
    assert np.array_equal(c1, c2)
    assert np.array_equal(p1, p2)


def test_ffnn_rejects_policy_checkpoint(tmp_path, splits):
    from anemia_pathways.dqn import AgentConfig, Policy
    from anemia_pathways.neural import init_mlp

    params = init_mlp(17, (8,), 25, False, np.random.default_rng(0))
    policy = Policy(params, AgentConfig())
    path = tmp_path / "p.bin"
    policy.save(path)
    with pytest.raises(ValueError, match="not a classifier"):
        FfnnModel.load(path)


def test_ffnn_training_is_deterministic(splits):
    train, _, _ = splits
    sub = train.subset(np.arange(1024))
    m1 = ffnn_train(sub, FfnnConfig(epochs=2), seed=9)
    m2 = ffnn_train(sub, FfnnConfig(epochs=2), seed=9)
    for a, b in zip(m1.params.arrays(), m2.params.arrays()):
        assert np.array_equal(a, b)
