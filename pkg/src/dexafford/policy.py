"""Gaussian MLP policies trained by clipped policy gradient or the cross-entropy method.

Parameter layout (checkpoint order): for each layer ``W`` (out x in, row
major) then ``b``; the state-independent log standard deviation comes last.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

CHECKPOINT_HEADER = "dexafford-policy v1"
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------- parameters

@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log_std: np.ndarray

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {k}: bias shape {b.shape} does not match weight {W.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise ValueError(f"layer {k} input {W.shape[1]} != previous output {self.weights[k - 1].shape[0]}")
        if self.log_std.shape != (self.weights[-1].shape[0],):
            raise ValueError("log_std length must equal the action size")

    @property
    def obs_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def act_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.obs_dim,) + tuple(W.shape[0] for W in self.weights)

    def flat(self) -> np.ndarray:
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts += [W.ravel(), b]
        parts.append(self.log_std)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, sizes, theta) -> MlpParams:
        theta = np.asarray(theta, dtype=float)
        Ws, bs, k = [], [], 0
        for i, o in zip(sizes[:-1], sizes[1:]):
            Ws.append(theta[k:k + o * i].reshape(o, i).copy())
            k += o * i
            bs.append(theta[k:k + o].copy())
            k += o
        log_std = theta[k:k + sizes[-1]].copy()
        if k + sizes[-1] != len(theta):
            raise ValueError(f"expected {k + sizes[-1]} parameters, got {len(theta)}")
        return cls(Ws, bs, log_std)

    def copy(self) -> MlpParams:
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.log_std.copy())


def init_params(obs_dim: int, act_dim: int, hidden=(64, 64), rng=None,
                init_log_std: float = -0.5, out_scale: float = 0.01) -> MlpParams:
    """Scaled-normal hidden layers and a near-zero output layer."""
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = (obs_dim, *hidden, act_dim)
    Ws, bs = [], []
    for k, (i, o) in enumerate(zip(sizes[:-1], sizes[1:])):
        scale = out_scale if k == len(sizes) - 2 else 1.0
        Ws.append(rng.normal(0.0, scale / math.sqrt(i), (o, i)))
        bs.append(np.zeros(o))
    return MlpParams(Ws, bs, np.full(act_dim, float(init_log_std)))


def _forward(params: MlpParams, X: np.ndarray) -> list[np.ndarray]:
    acts = [X]
    h = X
    last = len(params.weights) - 1
    for k, (W, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ W.T + b
        h = z if k == last else np.tanh(z)
        acts.append(h)
    return acts


def policy_forward(params: MlpParams, observation) -> tuple[np.ndarray, np.ndarray]:
    """Action mean and standard deviation for one observation or a (B, D) batch."""
    obs = np.asarray(observation, dtype=float)
    if obs.shape[-1] != params.obs_dim:
        raise ValueError(f"observation has {obs.shape[-1]} entries, policy expects {params.obs_dim}")
    mean = _forward(params, obs)[-1]
    return mean, np.exp(params.log_std)


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    z = (np.asarray(actions) - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * mean.shape[-1] * LOG_2PI


# ---------------------------------------------------------------- batches

@dataclass
class TrajectoryBatch:
    obs: np.ndarray            # (N, D) policy inputs (already normalised)
    actions: np.ndarray        # (N, A) raw Gaussian samples
    rewards: np.ndarray        # (N,)
    stages: np.ndarray         # (N,) stage index before the step
    starts: np.ndarray         # (E+1,) episode boundaries into the step arrays
    successes: np.ndarray      # (E, S) per-episode sub-task success
    logp_old: np.ndarray | None = None
    advantages: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.obs)
        if not (len(self.actions) == len(self.rewards) == len(self.stages) == n):
            raise ValueError("per-step arrays differ in length")
        s = np.asarray(self.starts)
        if s[0] != 0 or s[-1] != n or np.any(np.diff(s) < 0):
            raise ValueError("episode boundaries must partition the steps")

    @property
    def n_episodes(self) -> int:
        return len(self.starts) - 1


def reward_to_go(rewards: np.ndarray, gamma: float, tail: float = 0.0) -> np.ndarray:
    """Discounted reward-to-go of one episode; ``tail`` is the value after the last step."""
    out = np.empty(len(rewards))
    acc = tail
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def absorbing_tail(last_reward: float, remaining: int, gamma: float) -> float:
    """Discounted value of repeating ``last_reward`` for ``remaining`` further steps."""
    if remaining <= 0:
        return 0.0
    return last_reward * sum(gamma ** k for k in range(remaining))


def compute_advantages(rewards, starts, gamma: float, tails=None, normalize: bool = True) -> np.ndarray:
    """Reward-to-go minus the epoch's mean reward-to-go at the same time step."""
    rewards = np.asarray(rewards, dtype=float)
    starts = np.asarray(starts)
    E = len(starts) - 1
    tails = np.zeros(E) if tails is None else np.asarray(tails, dtype=float)
    rtg = np.concatenate([reward_to_go(rewards[a:b], gamma, t) for a, b, t in zip(starts[:-1], starts[1:], tails)]) \
        if E else np.zeros(0)
    tpos = np.concatenate([np.arange(b - a) for a, b in zip(starts[:-1], starts[1:])]) if E else np.zeros(0, int)
    if len(rtg) == 0:
        return rtg
    T = int(tpos.max()) + 1
    sums = np.bincount(tpos, weights=rtg, minlength=T)
    counts = np.bincount(tpos, minlength=T)
    adv = rtg - sums[tpos] / counts[tpos]
    if normalize:
        sd = adv.std()
        adv = adv / sd if sd > 1e-12 else np.zeros_like(adv)
    return adv


# ---------------------------------------------------------------- gradient

def surrogate_loss(params: MlpParams, obs, actions, logp_old, advantages, clip: float = 0.2) -> float:
    """Mean clipped surrogate objective (to be maximised)."""
    mean, _ = policy_forward(params, obs)
    ratio = np.exp(gaussian_log_prob(mean, params.log_std, actions) - logp_old)
    adv = np.asarray(advantages, dtype=float)
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)))


def _surrogate_grad(params, obs, actions, logp_old, adv, clip):
    acts = _forward(params, obs)
    mean = acts[-1]
    std = np.exp(params.log_std)
    logp = gaussian_log_prob(mean, params.log_std, actions)
    ratio = np.exp(logp - logp_old)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - clip, 1 + clip) * adv
    # gradient flows only where the unclipped branch is the active minimum
    active = (unclipped <= clipped).astype(float)
    n = len(adv)
    dlogp = active * ratio * adv / n
    diff = np.asarray(actions) - mean
    g_mean = dlogp[:, None] * diff / (std * std)
    g_logstd = np.sum(dlogp[:, None] * (diff * diff / (std * std) - 1.0), axis=0)
    gW, gb = [None] * len(params.weights), [None] * len(params.weights)
    delta = g_mean
    for k in range(len(params.weights) - 1, -1, -1):
        gW[k] = delta.T @ acts[k]
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.weights[k]) * (1.0 - acts[k] ** 2)
    return MlpParams(gW, gb, g_logstd)


def policy_gradient(params: MlpParams, batch: TrajectoryBatch, clip: float = 0.2) -> MlpParams:
    """Reverse-mode gradient of the clipped surrogate over ``batch``."""
    if len(batch.obs) == 0:
        raise ValueError("empty batch")
    logp_old = batch.logp_old
    if logp_old is None:
        mean, _ = policy_forward(params, batch.obs)
        logp_old = gaussian_log_prob(mean, params.log_std, batch.actions)
    adv = batch.advantages if batch.advantages is not None else np.zeros(len(batch.obs))
    return _surrogate_grad(params, np.asarray(batch.obs, dtype=float), batch.actions, logp_old,
                           np.asarray(adv, dtype=float), clip)


class Adam:
    def __init__(self, size: int, lr: float = 3e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def ascend(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mh = self.m / (1 - self.b1 ** self.t)
        vh = self.v / (1 - self.b2 ** self.t)
        return theta + self.lr * mh / (np.sqrt(vh) + self.eps)


# ---------------------------------------------------------------- CEM

def elite_indices(scores, candidates, n_elite: int) -> np.ndarray:
    """Indices of the best ``n_elite`` candidates; ties broken by candidate values, not position."""
    scores = np.asarray(scores, dtype=float)
    cand = np.asarray(candidates, dtype=float).reshape(len(scores), -1)
    keys = [cand[:, j] for j in range(cand.shape[1] - 1, -1, -1)] + [-scores]
    order = np.lexsort(keys)
    return order[:n_elite]


def cem_optimize(objective: Callable[[np.ndarray], float], mean, std, iterations: int,
                 population: int = 32, elite_frac: float = 0.2, rng=None,
                 min_std: float = 1e-3, callback=None) -> tuple[np.ndarray, np.ndarray]:
    """Maximise ``objective`` with a diagonal Gaussian cross-entropy search."""
    rng = rng if rng is not None else np.random.default_rng(0)
    mean = np.array(mean, dtype=float)
    std = np.array(std, dtype=float) * np.ones_like(mean)
    n_elite = max(1, int(round(population * elite_frac)))
    for it in range(iterations):
        cands = mean + std * rng.standard_normal((population, len(mean)))
        scores = np.array([objective(c) for c in cands])
        elite = cands[elite_indices(scores, cands, n_elite)]
        mean = elite.mean(axis=0)
        std = np.maximum(elite.std(axis=0), min_std)
        if callback is not None:
            callback(it, mean, scores)
    return mean, std


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "clipped-pg"
    gamma: float = 0.97
    epochs: int = 100
    episodes_per_epoch: int = 16
    eval_episodes: int = 8
    batch_size: int = 32
    clip: float = 0.2
    learning_rate: float = 3e-3
    update_passes: int = 4
    hidden: tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5
    cem_population: int = 16
    cem_elite_frac: float = 0.25
    cem_init_std: float = 0.05
    seeds: tuple[int, ...] = (0, 1, 2)
    guided: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.algorithm not in ("cem", "clipped-pg"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.episodes_per_epoch < 1 or self.eval_episodes < 1:
            raise ValueError("episode counts must be >= 1")


METRIC_COLUMNS = ("epoch", "grasp_sr", "lift_sr", "orient_sr", "overall_sr", "mean_return",
                  "train_success", "zero_weight_episodes", "steps")


@dataclass
class ObsNormalizer:
    mean: np.ndarray
    var: np.ndarray
    count: float = 0.0
    frozen: bool = False

    @classmethod
    def create(cls, dim: int) -> ObsNormalizer:
        return cls(np.zeros(dim), np.ones(dim), 0.0)

    def update(self, X: np.ndarray) -> None:
        if self.frozen or len(X) == 0:
            return
        X = np.asarray(X, dtype=float)
        n = len(X)
        m = X.mean(axis=0)
        v = X.var(axis=0)
        tot = self.count + n
        delta = m - self.mean
        self.var = (self.var * self.count + v * n + delta * delta * self.count * n / tot) / tot
        self.mean = self.mean + delta * n / tot
        self.count = tot

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / np.sqrt(self.var + 1e-8)


@dataclass
class SeedRun:
    seed: int
    params: MlpParams
    normalizer: ObsNormalizer
    metrics: list[dict] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    checkpoints: dict[int, MlpParams] = field(default_factory=dict)


def episode_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def rollout(env, params: MlpParams, normalizer: ObsNormalizer, seed: int,
            rng: np.random.Generator | None, decode) -> dict:
    """One episode; ``rng=None`` acts with the mean action."""
    state = env.reset(seed)
    raw_obs, acts, rews, stages = [], [], [], []
    std = np.exp(params.log_std)
    info = {}
    last = None
    while not state.done:
        o = env.observe(state)
        mean = _forward(params, normalizer(o)[None])[-1][0]
        a = mean if rng is None else mean + std * rng.standard_normal(len(mean))
        stages.append(state.stage)
        res = env.step(state, decode(a))
        raw_obs.append(o)
        acts.append(a)
        rews.append(res.reward.total)
        info = res.info
        last = res
        state = res.state
    stages_n = len(env.task.stages)
    succ = [bool(info.get(f"{s}_success", False)) for s in env.task.stages]
    finished = bool(info.get("success", False))
    remaining = env.task.horizon - state.step
    return dict(obs=np.array(raw_obs), actions=np.array(acts), rewards=np.array(rews),
                stages=np.array(stages), successes=succ + [False] * (3 - stages_n),
                success=finished, zero_weight=state.zero_weight,
                tail_reward=last.reward.total if (finished and last is not None) else 0.0,
                remaining=remaining if finished else 0)


def _sr(flags) -> float:
    return 100.0 * float(np.mean(flags)) if len(flags) else 0.0


def evaluate_policy(env, params, normalizer, seeds, decode) -> dict:
    eps = [rollout(env, params, normalizer, s, None, decode) for s in seeds]
    names = list(env.task.stages)
    row = {}
    for key, stage in (("grasp_sr", "grasp"), ("lift_sr", "lift"), ("orient_sr", "orient")):
        if stage in names:
            k = names.index(stage)
            row[key] = _sr([e["successes"][k] for e in eps])
        else:
            row[key] = float("nan")
    row["overall_sr"] = _sr([e["success"] for e in eps])
    row["eval_flags"] = [int(e["success"]) for e in eps]
    return row


def train_seed(env, config: TrainConfig, seed: int, decode, log=None) -> SeedRun:
    """Train one seed; a pure function of (environment, config, seed)."""
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    params = init_params(env.obs_dim, env.action_dim, config.hidden, init_rng, config.init_log_std)
    norm = ObsNormalizer.create(env.obs_dim)
    run = SeedRun(seed, params, norm)
    run.checkpoints[0] = params.copy()
    theta = params.flat()
    opt = Adam(len(theta), config.learning_rate)
    eval_seeds = [episode_seed(seed, 1_000_003, k) for k in range(config.eval_episodes)]
    sizes = params.sizes
    cem_mean, cem_std = theta.copy(), np.full(len(theta), config.cem_init_std)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        if config.algorithm == "clipped-pg":
            eps = []
            for i in range(config.episodes_per_epoch):
                rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, i]))
                eps.append(rollout(env, params, norm, episode_seed(seed, epoch, i), rng, decode))
            if epoch == 1:
                norm.update(np.vstack([e["obs"] for e in eps if len(e["obs"])]))
                norm.frozen = True
            params, theta = _pg_update(params, theta, eps, norm, config, opt,
                                       np.random.default_rng(np.random.SeedSequence([seed, epoch, 99])))
            returns = [float(e["rewards"].sum()) for e in eps]
            train_success = _sr([e["success"] for e in eps])
            zero = sum(e["zero_weight"] for e in eps)
            steps = sum(len(e["rewards"]) for e in eps)
        else:
            pop_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 77]))
            if epoch == 1:
                probe = [rollout(env, params, norm, episode_seed(seed, 0, i), None, decode)
                         for i in range(config.episodes_per_epoch)]
                norm.update(np.vstack([e["obs"] for e in probe if len(e["obs"])]))
                norm.frozen = True
            cands = cem_mean + cem_std * pop_rng.standard_normal((config.cem_population, len(theta)))
            scores, eps = [], []
            for j, c in enumerate(cands):
                p = MlpParams.from_flat(sizes, c)
                e = rollout(env, p, norm, episode_seed(seed, epoch, j), None, decode)
                eps.append(e)
                scores.append(float(e["rewards"].sum()))
            n_elite = max(1, int(round(config.cem_population * config.cem_elite_frac)))
            elite = cands[elite_indices(scores, cands, n_elite)]
            cem_mean = elite.mean(axis=0)
            cem_std = np.maximum(elite.std(axis=0), 1e-3)
            theta = cem_mean.copy()
            params = MlpParams.from_flat(sizes, theta)
            returns = scores
            train_success = _sr([e["success"] for e in eps])
            zero = sum(e["zero_weight"] for e in eps)
            steps = sum(len(e["rewards"]) for e in eps)
        ev = evaluate_policy(env, params, norm, eval_seeds, decode)
        row = {"epoch": epoch, "grasp_sr": ev["grasp_sr"], "lift_sr": ev["lift_sr"],
               "orient_sr": ev["orient_sr"], "overall_sr": ev["overall_sr"],
               "mean_return": float(np.mean(returns)), "train_success": train_success,
               "zero_weight_episodes": int(zero), "steps": int(steps)}
        run.metrics.append(row)
        run.epoch_seconds.append(time.perf_counter() - t0)
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            run.checkpoints[epoch] = params.copy()
        if log is not None:
            log(seed, row)
    run.params = params
    run.checkpoints[config.epochs] = params.copy()
    return run


def _pg_update(params, theta, eps, norm, config: TrainConfig, opt: Adam, rng):
    eps = [e for e in eps if len(e["rewards"])]
    if not eps:
        return params, theta
    obs = norm(np.vstack([e["obs"] for e in eps]))
    actions = np.vstack([e["actions"] for e in eps])
    rewards = np.concatenate([e["rewards"] for e in eps])
    starts = np.concatenate([[0], np.cumsum([len(e["rewards"]) for e in eps])])
    tails = [absorbing_tail(e["tail_reward"], e["remaining"], config.gamma) for e in eps]
    adv = compute_advantages(rewards, starts, config.gamma, tails)
    mean, _ = policy_forward(params, obs)
    logp_old = gaussian_log_prob(mean, params.log_std, actions)
    n = len(obs)
    sizes = params.sizes
    for _ in range(config.update_passes):
        order = rng.permutation(n)
        for k in range(0, n, config.batch_size):
            idx = order[k:k + config.batch_size]
            g = _surrogate_grad(params, obs[idx], actions[idx], logp_old[idx], adv[idx], config.clip)
            theta = opt.ascend(theta, g.flat())
            params = MlpParams.from_flat(sizes, theta)
    return params, theta


# ---------------------------------------------------------------- files

def format_checkpoint(params: MlpParams) -> str:
    sizes = ",".join(str(s) for s in params.sizes)
    lines = [CHECKPOINT_HEADER, f"sizes={sizes}"]
    lines += [repr(float(v)) for v in params.flat()]
    return "\n".join(lines) + "\n"


def parse_checkpoint(text: str) -> MlpParams:
    lines = text.splitlines()
    if not lines or lines[0].strip() != CHECKPOINT_HEADER:
        raise ValueError("not a policy checkpoint (bad header)")
    if len(lines) < 2 or not lines[1].startswith("sizes="):
        raise ValueError("checkpoint line 2: expected sizes=")
    sizes = tuple(int(s) for s in lines[1][6:].split(","))
    try:
        values = [float(v) for v in lines[2:] if v.strip()]
    except ValueError as exc:
        raise ValueError(f"checkpoint value: {exc}") from None
    return MlpParams.from_flat(sizes, values)


def save_checkpoint(params: MlpParams, path) -> None:
    Path(path).write_text(format_checkpoint(params), encoding="utf-8")


def load_checkpoint(path) -> MlpParams:
    return parse_checkpoint(Path(path).read_text(encoding="utf-8"))


NORMALIZER_HEADER = "dexafford-normalizer v1"


def format_normalizer(norm: ObsNormalizer) -> str:
    lines = [NORMALIZER_HEADER, f"dim={len(norm.mean)} count={norm.count!r} frozen={int(norm.frozen)}"]
    lines += [f"{float(m)!r} {float(v)!r}" for m, v in zip(norm.mean, norm.var)]
    return "\n".join(lines) + "\n"


def parse_normalizer(text: str) -> ObsNormalizer:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != NORMALIZER_HEADER:
        raise ValueError("not an observation normalizer (bad header)")
    head = dict(tok.split("=", 1) for tok in lines[1].split())
    dim = int(head["dim"])
    rows = [tuple(float(x) for x in ln.split()) for ln in lines[2:]]
    if len(rows) != dim or any(len(r) != 2 for r in rows):
        raise ValueError(f"normalizer: expected {dim} rows of mean/var")
    arr = np.array(rows, dtype=float).reshape(dim, 2)
    return ObsNormalizer(arr[:, 0].copy(), arr[:, 1].copy(), float(head["count"]), bool(int(head["frozen"])))
