import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexafford.env import ManipulationEnv, decode_action, default_task
from dexafford.policy import (
    MlpParams,
    ObsNormalizer,
    TrainConfig,
    TrajectoryBatch,
    absorbing_tail,
    cem_optimize,
    compute_advantages,
    elite_indices,
    format_checkpoint,
    format_normalizer,
    gaussian_log_prob,
    init_params,
    parse_checkpoint,
    parse_normalizer,
    policy_forward,
    policy_gradient,
    reward_to_go,
    surrogate_loss,
    train_seed,
)
from dexafford.robot import default_robot
from dexafford.semantic_maps import make_cube

ROBOT = default_robot()


def _random_params(rng, sizes):
    Ws = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(size=o) for o in sizes[1:]]
    return MlpParams(Ws, bs, rng.normal(size=sizes[-1]) * 0.3)


def oracle_forward(params, x):
    h = [float(v) for v in x]
    L = len(params.weights)
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = [sum(W[r][c] * h[c] for c in range(len(h))) + b[r] for r in range(W.shape[0])]
        h = z if k == L - 1 else [math.tanh(v) for v in z]
    return np.array(h)


def test_zero_params_zero_mean():
    sizes = (44, 64, 64, 26)
    p = MlpParams([np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                  [np.zeros(o) for o in sizes[1:]], np.zeros(26))
    mean, std = policy_forward(p, np.random.default_rng(0).normal(size=44))
    assert np.array_equal(mean, np.zeros(26)) and np.array_equal(std, np.ones(26))


def test_output_length_and_std_positive():
    p = init_params(44, 26)
    for x in np.random.default_rng(1).normal(size=(10, 44)) * 10:
        mean, std = policy_forward(p, x)
        assert mean.shape == (26,) and np.all(std > 0)
    assert policy_forward(p, np.zeros((5, 44)))[0].shape == (5, 26)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        policy_forward(init_params(44, 26), np.zeros(43))


def test_forward_vs_matrix_oracle():
    rng = np.random.default_rng(2)
    for sizes in [(44, 64, 64, 26), (3, 4, 2), (5, 7, 3, 2)]:
        p = _random_params(rng, sizes)
        for _ in range(5):
            x = rng.normal(size=sizes[0])
            got = policy_forward(p, x)[0]
            want = oracle_forward(p, x)
            assert np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-300)) < 1e-12 or \
                np.max(np.abs(got - want)) < 1e-15


def test_flat_round_trip():
    rng = np.random.default_rng(3)
    p = _random_params(rng, (6, 5, 4, 3))
    q = MlpParams.from_flat(p.sizes, p.flat())
    assert np.array_equal(q.flat(), p.flat())
    with pytest.raises(ValueError):
        MlpParams.from_flat(p.sizes, p.flat()[:-1])


def test_log_prob_matches_scipy_style_formula():
    rng = np.random.default_rng(4)
    mean, log_std, a = rng.normal(size=3), rng.normal(size=3) * 0.2, rng.normal(size=3)
    s = np.exp(log_std)
    want = sum(-0.5 * ((a[i] - mean[i]) / s[i]) ** 2 - math.log(s[i]) - 0.5 * math.log(2 * math.pi) for i in range(3))
    assert gaussian_log_prob(mean, log_std, a) == pytest.approx(want, rel=1e-13)


# ---------------------------------------------------------------- gradient

def _tiny_batch(rng, n=40, adv=None, spread=0.1):
    p = _random_params(rng, (3, 4, 2))
    obs = rng.normal(size=(n, 3))
    mean, _ = policy_forward(p, obs)
    actions = mean + np.exp(p.log_std) * rng.normal(size=(n, 2))
    # old log-probs offset so ratios spread around 1 without touching the clip edges
    offs = rng.uniform(-spread, spread, n)
    logp_old = gaussian_log_prob(mean, p.log_std, actions) + offs
    advantages = rng.normal(size=n) if adv is None else adv
    b = TrajectoryBatch(obs, actions, np.zeros(n), np.zeros(n, int), np.array([0, n]),
                        np.zeros((1, 3), bool), logp_old, advantages)
    return p, b


def pg_fd_max_rel_error(trials=10, seed=5, h=1e-5) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        p, b = _tiny_batch(rng)
        g = policy_gradient(p, b, clip=0.2).flat()
        theta = p.flat()
        fd = np.zeros_like(theta)
        for i in range(len(theta)):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += h
            tm[i] -= h
            lp = surrogate_loss(MlpParams.from_flat(p.sizes, tp), b.obs, b.actions, b.logp_old, b.advantages)
            lm = surrogate_loss(MlpParams.from_flat(p.sizes, tm), b.obs, b.actions, b.logp_old, b.advantages)
            fd[i] = (lp - lm) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / np.linalg.norm(fd)))
    return worst


def test_gradient_vs_finite_differences():
    assert pg_fd_max_rel_error() < 1e-4


def test_gradient_respects_clipping():
    # every ratio well outside the clip range with advantages pushing it further: zero gradient
    rng = np.random.default_rng(6)
    p, b = _tiny_batch(rng, spread=0.0)
    b.logp_old = b.logp_old - 1.0          # ratio = e > 1.2
    b.advantages = np.abs(b.advantages)     # positive advantage, clipped branch active
    g = policy_gradient(p, b).flat()
    assert np.array_equal(g, np.zeros_like(g))


def test_zero_advantage_zero_gradient():
    rng = np.random.default_rng(7)
    p, b = _tiny_batch(rng, adv=np.zeros(40))
    assert np.array_equal(policy_gradient(p, b).flat(), np.zeros(len(p.flat())))


def test_duplicated_trajectories_same_gradient():
    rng = np.random.default_rng(8)
    p, b = _tiny_batch(rng)
    d = TrajectoryBatch(np.vstack([b.obs, b.obs]), np.vstack([b.actions, b.actions]), np.zeros(80),
                        np.zeros(80, int), np.array([0, 40, 80]), np.zeros((2, 3), bool),
                        np.concatenate([b.logp_old, b.logp_old]), np.concatenate([b.advantages] * 2))
    assert np.allclose(policy_gradient(p, d).flat(), policy_gradient(p, b).flat(), rtol=1e-12, atol=1e-15)


def test_advantages_unchanged_by_duplication():
    rng = np.random.default_rng(9)
    lens = [5, 7, 3]
    rewards = rng.normal(size=sum(lens))
    starts = np.concatenate([[0], np.cumsum(lens)])
    a = compute_advantages(rewards, starts, 0.9)
    starts2 = np.concatenate([[0], np.cumsum(lens + lens)])
    a2 = compute_advantages(np.concatenate([rewards, rewards]), starts2, 0.9)
    assert np.allclose(a2, np.concatenate([a, a]), atol=1e-12)


def test_empty_batch_rejected():
    p = init_params(3, 2, (4,))
    with pytest.raises(ValueError):
        policy_gradient(p, TrajectoryBatch(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros(0, int),
                                           np.array([0]), np.zeros((0, 3), bool)))


def test_batch_boundaries_validated():
    with pytest.raises(ValueError):
        TrajectoryBatch(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros(3), np.zeros(3), np.array([0, 2]),
                        np.zeros((1, 3)))


def test_reward_to_go_and_tail():
    assert reward_to_go(np.array([1.0, 1.0, 1.0]), 0.5).tolist() == [1.75, 1.5, 1.0]
    assert reward_to_go(np.array([1.0]), 0.5, tail=2.0).tolist() == [2.0]
    assert absorbing_tail(2.0, 3, 0.5) == 2.0 * (1 + 0.5 + 0.25)
    assert absorbing_tail(2.0, 0, 0.5) == 0.0


def test_advantage_baseline_time_indexed():
    rewards = np.array([1.0, 0.0, 3.0, 0.0])
    a = compute_advantages(rewards, np.array([0, 2, 4]), 0.0, normalize=False)
    # gamma 0: reward-to-go is the reward; baseline is the mean at each time step
    assert a.tolist() == [-1.0, 0.0, 1.0, 0.0]


# ---------------------------------------------------------------- CEM

def cem_bandit_error(seed=0, iterations=200) -> float:
    target = np.array([0.3, -0.7, 0.5])
    mean, _ = cem_optimize(lambda a: -float(np.sum((a - target) ** 2)), np.zeros(3), 1.0, iterations,
                           population=32, elite_frac=0.2, rng=np.random.default_rng(seed))
    return float(np.max(np.abs(mean - target)))


def test_cem_bandit_converges():
    assert cem_bandit_error() < 0.05


def test_elite_permutation_invariant():
    rng = np.random.default_rng(10)
    for _ in range(50):
        n = int(rng.integers(2, 30))
        cands = rng.normal(size=(n, 3))
        scores = np.round(rng.normal(size=n), 1)      # coarse scores create ties
        k = int(rng.integers(1, n + 1))
        base = {tuple(cands[i]) for i in elite_indices(scores, cands, k)}
        perm = rng.permutation(n)
        again = {tuple(cands[perm][i]) for i in elite_indices(scores[perm], cands[perm], k)}
        assert again == base


@settings(max_examples=50)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20))
def test_elite_picks_top_scores(scores):
    cands = np.arange(len(scores), dtype=float)[:, None]
    k = max(1, len(scores) // 3)
    idx = elite_indices(scores, cands, k)
    chosen = sorted(scores[i] for i in idx)
    assert chosen == sorted(scores)[-k:]


# ---------------------------------------------------------------- training

def _small_env():
    return ManipulationEnv(default_task(1, horizon=4), ROBOT, make_cube(n_points=200), guided=False)


def _decode(u):
    return decode_action(u, ROBOT)


def test_epochs_zero_initial_checkpoint_only():
    run = train_seed(_small_env(), TrainConfig(epochs=0, hidden=(8,)), 0, _decode)
    assert run.metrics == [] and list(run.checkpoints) == [0]


@pytest.mark.parametrize("algorithm", ["clipped-pg", "cem"])
def test_training_deterministic(algorithm):
    cfg = TrainConfig(algorithm=algorithm, epochs=2, episodes_per_epoch=2, eval_episodes=2, hidden=(8,),
                      cem_population=3, update_passes=1)
    a = train_seed(_small_env(), cfg, 3, _decode)
    b = train_seed(_small_env(), cfg, 3, _decode)
    assert repr(a.metrics) == repr(b.metrics)  # NaN-safe exact comparison
    assert np.array_equal(a.params.flat(), b.params.flat())
    assert len(a.metrics) == 2 and a.metrics[0]["epoch"] == 1
    assert np.isnan(a.metrics[0]["orient_sr"])


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(algorithm="sac")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_checkpoint_round_trip():
    p = _random_params(np.random.default_rng(11), (44, 64, 64, 26))
    q = parse_checkpoint(format_checkpoint(p))
    assert np.array_equal(p.flat(), q.flat()) and q.sizes == p.sizes
    with pytest.raises(ValueError):
        parse_checkpoint("garbage\n")


def test_normalizer_round_trip_and_stats():
    rng = np.random.default_rng(12)
    n = ObsNormalizer.create(4)
    X1, X2 = rng.normal(size=(10, 4)), rng.normal(size=(7, 4)) + 3
    n.update(X1)
    n.update(X2)
    allx = np.vstack([X1, X2])
    assert np.allclose(n.mean, allx.mean(0), atol=1e-12) and np.allclose(n.var, allx.var(0), atol=1e-12)
    n.frozen = True
    n.update(X1 * 100)
    assert np.allclose(n.mean, allx.mean(0), atol=1e-12)
    back = parse_normalizer(format_normalizer(n))
    assert np.array_equal(back.mean, n.mean) and np.array_equal(back.var, n.var)
    assert back.frozen and back.count == n.count
