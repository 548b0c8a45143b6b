"""On-policy training: rollout collection, GAE, PPO and A2C updates, and the run loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import EnvConfig, SynthesisEnv, TargetSpec, generate_target, rcd
from .errors import DomainError, TrainingAbort
from .policy import ActionBatch, PolicyParams, backward, evaluate, forward, sample, save_params
from .refine import AdamState, TwoStageHook

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step",
    "mean_fidelity",
    "success_rate",
    "mean_rcd",
    "mean_ep_len",
    "seed",
    "det_success_rate",
    "det_mean_fidelity",
)
MODES = ("one-stage", "two-stage", "a2c")


ONE_STAGE_LR = 5e-4
TWO_STAGE_LR = 1e-4


@dataclass
class PpoConfig:
    lr: float = ONE_STAGE_LR
    clip_ratio: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    epochs: int = 4
    minibatch_size: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    horizon: int = 2048
    env_count: int = 8
    total_steps: int = 200_000
    max_grad_norm: float = 0.5
    normalize_rewards: bool = False

    def __post_init__(self):
        if not 0 < self.clip_ratio < 1:
            raise DomainError("clip_ratio must lie in (0, 1)")
        if not 0 < self.gamma <= 1:
            raise DomainError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise DomainError("gae_lambda must lie in [0, 1]")
        if self.lr < 0 or self.epochs < 1 or self.minibatch_size < 1:
            raise DomainError("lr must be >= 0, epochs and minibatch_size >= 1")
        if self.horizon < 1 or self.env_count < 1 or self.total_steps < 0:
            raise DomainError("horizon and env_count must be >= 1, total_steps >= 0")


@dataclass
class A2cConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    gae_lambda: float = 1.0
    n_steps: int = 5
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    env_count: int = 8
    total_steps: int = 50_000
    max_grad_norm: float = 0.5
    normalize_advantages: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise DomainError("A2C lr must be positive")
        if self.n_steps < 1 or self.env_count < 1 or self.total_steps < 0:
            raise DomainError("n_steps and env_count must be >= 1, total_steps >= 0")

    @property
    def horizon(self) -> int:
        return self.n_steps


@dataclass
class EpisodeRecord:
    initial_fidelity: float
    final_fidelity: float
    success: bool
    length: int
    rcd: float
    total_reward: float


class VecEnv:
    """A set of environments stepped in lockstep, auto-resetting finished episodes."""

    def __init__(self, envs: Sequence[SynthesisEnv]):
        self.envs = list(envs)
        self.obs = np.stack([env.reset()[0] for env in self.envs])
        self._returns = np.zeros(len(self.envs))

    def __len__(self):
        return len(self.envs)

    def step(self, actions: ActionBatch):
        """Returns ``(rewards, terminated, truncated, final_obs, episodes)``.

        ``final_obs`` maps env index to the last observation of an episode
        that ended by truncation (needed for bootstrapping); ``self.obs``
        already holds the post-reset observations.
        """
        count = len(self.envs)
        rewards = np.zeros(count)
        terminated = np.zeros(count, dtype=bool)
        truncated = np.zeros(count, dtype=bool)
        final_obs: dict[int, np.ndarray] = {}
        episodes: list[EpisodeRecord] = []
        for i, env in enumerate(self.envs):
            res = env.step(actions.action(i))
            rewards[i] = res.reward
            terminated[i] = res.terminated
            truncated[i] = res.truncated
            self._returns[i] += res.reward
            if res.terminated or res.truncated:
                if res.truncated:
                    final_obs[i] = res.obs
                episodes.append(
                    EpisodeRecord(
                        env.initial_fidelity,
                        res.info["fidelity"],
                        res.terminated,
                        res.info["depth"],
                        rcd(res.info["depth"], env.cfg.lam),
                        float(self._returns[i]),
                    )
                )
                self._returns[i] = 0.0
                self.obs[i] = env.reset()[0]
            else:
                self.obs[i] = res.obs
        return rewards, terminated, truncated, final_obs, episodes


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (H, E, D)
    actions: ActionBatch  # fields (H, E)
    log_prob: np.ndarray
    reward: np.ndarray
    value: np.ndarray
    next_value: np.ndarray  # bootstrap value of the following state; 0 after termination
    terminated: np.ndarray
    truncated: np.ndarray

    @property
    def horizon(self) -> int:
        return self.reward.shape[0]

    @property
    def env_count(self) -> int:
        return self.reward.shape[1]

    def __len__(self):
        return self.reward.size

    def flat(self):
        """Per-sample arrays with the (H, E) axes merged."""
        n = len(self)
        acts = ActionBatch(*(a.reshape(n) for a in (self.actions.gate, self.actions.q1, self.actions.q2, self.actions.theta)))
        return self.obs.reshape(n, -1), acts, self.log_prob.reshape(n), self.value.reshape(n)


def collect_rollouts(
    params: PolicyParams,
    vec: VecEnv,
    horizon: int,
    rng: np.random.Generator,
    angle_enabled: bool = True,
    sink: Callable[[EpisodeRecord], None] | None = None,
) -> RolloutBuffer:
    """Run ``horizon`` steps in every environment under a frozen policy."""
    count, dim = len(vec), vec.obs.shape[1]
    obs = np.zeros((horizon, count, dim))
    gate = np.zeros((horizon, count), dtype=np.int64)
    q1 = np.zeros_like(gate)
    q2 = np.zeros_like(gate)
    theta = np.zeros((horizon, count))
    log_prob = np.zeros((horizon, count))
    reward = np.zeros((horizon, count))
    value = np.zeros((horizon, count))
    next_value = np.zeros((horizon, count))
    terminated = np.zeros((horizon, count), dtype=bool)
    truncated = np.zeros((horizon, count), dtype=bool)

    for t in range(horizon):
        obs[t] = vec.obs
        out = sample(params, vec.obs, rng, angle_enabled)
        gate[t], q1[t], q2[t], theta[t] = out.actions.gate, out.actions.q1, out.actions.q2, out.actions.theta
        log_prob[t] = out.log_prob
        value[t] = out.value
        r, term, trunc, final_obs, episodes = vec.step(out.actions)
        reward[t], terminated[t], truncated[t] = r, term, trunc
        if final_obs:
            idx = sorted(final_obs)
            boot = forward(params, np.stack([final_obs[i] for i in idx])).value
            next_value[t, idx] = boot
        if sink is not None:
            for ep in episodes:
                sink(ep)

    last = forward(params, vec.obs).value
    following = np.concatenate([value[1:], last[None, :]])
    live = ~(terminated | truncated)
    next_value[live] = following[live]
    return RolloutBuffer(obs, ActionBatch(gate, q1, q2, theta), log_prob, reward, value, next_value, terminated, truncated)


def gae(rewards, values, next_values, terminated, truncated, gamma: float, lam: float):
    """Generalized advantage estimates over the leading (time) axis.

    ``next_values[t]`` is the value of the state reached at ``t``; it is
    ignored after termination, and the recursion is cut at any episode end.
    """
    rewards = np.asarray(rewards, dtype=float)
    terminated = np.asarray(terminated, dtype=bool)
    done = terminated | np.asarray(truncated, dtype=bool)
    delta = rewards + gamma * np.asarray(next_values) * (~terminated) - np.asarray(values)
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0])
    for t in reversed(range(rewards.shape[0])):
        running = delta[t] + gamma * lam * (~done[t]) * running
        adv[t] = running
    return adv, adv + values


def compute_gae(buffer: RolloutBuffer, gamma: float, gae_lambda: float, normalize_rewards: bool = False):
    rewards = buffer.reward
    if normalize_rewards:
        rewards = rewards / max(float(rewards.std()), 1e-8)
    return gae(rewards, buffer.value, buffer.next_value, buffer.terminated, buffer.truncated, gamma, gae_lambda)


def normalize(adv: np.ndarray) -> np.ndarray:
    if adv.size < 2:
        return adv
    return (adv - adv.mean()) / max(float(adv.std()), 1e-8)


@dataclass
class LossOut:
    grads: np.ndarray
    actor_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    clip_fraction: float
    ratio: np.ndarray


def loss_and_gradient(
    params: PolicyParams,
    obs: np.ndarray,
    actions: ActionBatch,
    old_log_prob: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    value_coef: float,
    entropy_coef: float,
    clip_ratio: float | None = None,
    angle_enabled: bool = True,
) -> LossOut:
    """Gradient of ``actor + value_coef * value_loss - entropy_coef * entropy``.

    With ``clip_ratio`` the actor term is the clipped surrogate; without it,
    the plain policy-gradient loss ``-mean(log_prob * A)``.
    """
    ev = evaluate(params, obs, actions, angle_enabled)
    m = len(actions)
    if clip_ratio is None:
        ratio = np.ones(m)
        actor = -float(np.mean(ev.log_prob * advantages))
        c_lp = -advantages / m
        clip_frac = 0.0
    else:
        ratio = np.exp(ev.log_prob - old_log_prob)
        surr1 = ratio * advantages
        surr2 = np.clip(ratio, 1 - clip_ratio, 1 + clip_ratio) * advantages
        actor = -float(np.mean(np.minimum(surr1, surr2)))
        c_lp = np.where(surr1 <= surr2, -advantages * ratio / m, 0.0)
        clip_frac = float(np.mean(np.abs(ratio - 1) > clip_ratio))
    resid = ev.value - returns
    value_loss = float(np.mean(resid**2))
    entropy = float(np.mean(ev.entropy))
    total = actor + value_coef * value_loss - entropy_coef * entropy
    if not math.isfinite(total):
        raise TrainingAbort(f"non-finite loss {total!r}")
    grads = backward(params, ev, c_lp, value_coef * 2 * resid / m, -entropy_coef / m)
    log_ratio = ev.log_prob - old_log_prob
    approx_kl = float(np.mean(np.expm1(log_ratio) - log_ratio))
    return LossOut(grads, actor, value_loss, entropy, approx_kl, clip_frac, ratio)


def clip_grad_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    norm = float(np.linalg.norm(grads))
    if not math.isfinite(norm):
        raise TrainingAbort("non-finite gradient")
    if max_norm is not None and norm > max_norm:
        grads = grads * (max_norm / norm)
    return grads


@dataclass
class UpdateStats:
    actor_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    updates: int = 0
    first_ratios: np.ndarray | None = None

    def add(self, out: LossOut) -> None:
        k = self.updates
        for name in ("actor_loss", "value_loss", "entropy", "approx_kl", "clip_fraction"):
            setattr(self, name, (getattr(self, name) * k + getattr(out, name)) / (k + 1))
        if self.first_ratios is None:
            self.first_ratios = out.ratio
        self.updates += 1


def ppo_update(
    params: PolicyParams,
    adam: AdamState,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
    angle_enabled: bool = True,
) -> UpdateStats:
    obs, actions, old_lp, _ = buffer.flat()
    adv = advantages.reshape(-1)
    ret = returns.reshape(-1)
    size = adv.size
    stats = UpdateStats()
    for _ in range(cfg.epochs):
        order = rng.permutation(size)
        for start in range(0, size, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            out = loss_and_gradient(
                params, obs[idx], actions[idx], old_lp[idx], normalize(adv[idx]), ret[idx],
                cfg.value_coef, cfg.entropy_coef, cfg.clip_ratio, angle_enabled,
            )  # fmt: skip
            adam.step(params.flat, clip_grad_norm(out.grads, cfg.max_grad_norm))
            stats.add(out)
    return stats


def a2c_update(
    params: PolicyParams,
    adam: AdamState,
    buffer: RolloutBuffer,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: A2cConfig,
    angle_enabled: bool = True,
) -> UpdateStats:
    """One gradient step over the whole buffer; no ratio, clipping or epochs."""
    obs, actions, old_lp, _ = buffer.flat()
    adv = advantages.reshape(-1)
    if cfg.normalize_advantages:
        adv = normalize(adv)
    out = loss_and_gradient(
        params, obs, actions, old_lp, adv, returns.reshape(-1), cfg.value_coef, cfg.entropy_coef, None, angle_enabled
    )
    adam.step(params.flat, clip_grad_norm(out.grads, cfg.max_grad_norm))
    stats = UpdateStats()
    stats.add(out)
    return stats


@dataclass
class RefineConfig:
    lr: float = 0.1
    max_steps: int = 300
    tol: float = 1e-7


@dataclass
class RunConfig:
    env: EnvConfig
    mode: str = "one-stage"
    seed: int = 0
    ppo: PpoConfig = field(default_factory=PpoConfig)
    a2c: A2cConfig = field(default_factory=A2cConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    target: TargetSpec | None = None
    eval_targets: list[TargetSpec] | None = None
    eval_target_count: int = 16
    eval_episodes: int = 64
    eval_every: int | None = None
    hidden: int = 64
    init_log_std: float = 0.0
    checkpoint_dir: Path | None = None
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def algo(self) -> PpoConfig | A2cConfig:
        return self.a2c if self.mode == "a2c" else self.ppo

    @property
    def angle_enabled(self) -> bool:
        return self.mode != "two-stage"


@dataclass
class MetricsRow:
    step: int
    mean_fidelity: float
    success_rate: float
    mean_rcd: float
    mean_ep_len: float
    seed: int
    det_success_rate: float
    det_mean_fidelity: float

    def as_csv(self) -> list[str]:
        return [
            str(self.step), f"{self.mean_fidelity:.17g}", f"{self.success_rate:.17g}", f"{self.mean_rcd:.17g}",
            f"{self.mean_ep_len:.17g}", str(self.seed), f"{self.det_success_rate:.17g}", f"{self.det_mean_fidelity:.17g}",
        ]  # fmt: skip


@dataclass
class TrainResult:
    params: PolicyParams
    metrics: list[MetricsRow]
    episodes: list[EpisodeRecord]
    steps: int
    refinements: int = 0

    @property
    def final_success_rate(self) -> float:
        return self.metrics[-1].success_rate if self.metrics else float("nan")


def _make_refiner(cfg: RunConfig) -> TwoStageHook | None:
    if cfg.mode != "two-stage":
        return None
    r = cfg.refine
    return TwoStageHook(epsilon=cfg.env.epsilon, lr=r.lr, max_steps=r.max_steps, tol=r.tol)


def evaluate_policy(
    params: PolicyParams,
    cfg: RunConfig,
    targets: Sequence[TargetSpec],
    episodes: int,
    seed: int,
    deterministic: bool = False,
) -> list[EpisodeRecord]:
    """Run ``episodes`` episodes in lockstep, cycling through ``targets``."""
    rng = np.random.default_rng(seed)
    refiner = _make_refiner(cfg)
    envs = [SynthesisEnv(cfg.env, target=targets[k % len(targets)], refiner=refiner) for k in range(episodes)]
    obs = np.stack([env.reset()[0] for env in envs])
    active = np.ones(episodes, dtype=bool)
    returns = np.zeros(episodes)
    records: list[EpisodeRecord | None] = [None] * episodes
    while active.any():
        idx = np.flatnonzero(active)
        out = sample(params, obs[idx], rng, cfg.angle_enabled, deterministic=deterministic)
        for j, i in enumerate(idx):
            env = envs[i]
            res = env.step(out.actions.action(j))
            returns[i] += res.reward
            obs[i] = res.obs
            if res.terminated or res.truncated:
                active[i] = False
                depth = res.info["depth"]
                records[i] = EpisodeRecord(
                    env.initial_fidelity, res.info["fidelity"], res.terminated, depth, rcd(depth, cfg.env.lam), returns[i]
                )
    return records


def _heldout_targets(cfg: RunConfig, seed_seq: np.random.SeedSequence) -> list[TargetSpec]:
    if cfg.target is not None:
        return [cfg.target]
    if cfg.eval_targets:
        return list(cfg.eval_targets)
    rng = np.random.default_rng(seed_seq)
    return [generate_target(cfg.env, rng) for _ in range(cfg.eval_target_count)]


def _metrics_row(step: int, seed: int, stoch: list[EpisodeRecord], det: list[EpisodeRecord]) -> MetricsRow:
    return MetricsRow(
        step=step,
        mean_fidelity=float(np.mean([e.final_fidelity for e in stoch])),
        success_rate=float(np.mean([e.success for e in stoch])),
        mean_rcd=float(np.mean([e.rcd for e in stoch])),
        mean_ep_len=float(np.mean([e.length for e in stoch])),
        seed=seed,
        det_success_rate=float(np.mean([e.success for e in det])),
        det_mean_fidelity=float(np.mean([e.final_fidelity for e in det])),
    )


def train(
    cfg: RunConfig,
    metrics_path: str | Path | None = None,
    on_metrics: Callable[[MetricsRow], None] | None = None,
) -> TrainResult:
    """Alternate rollout collection and policy updates until the step budget is spent.

    Every run is a pure function of ``cfg``: the seed feeds independent
    streams for initialization, action sampling, each environment, minibatch
    shuffling and evaluation.
    """
    algo = cfg.algo
    root = np.random.SeedSequence(cfg.seed)
    init_ss, sample_ss, env_ss, shuffle_ss, eval_ss, heldout_ss = root.spawn(6)
    params = PolicyParams.initialize(
        cfg.env.n, np.random.default_rng(init_ss), hidden=cfg.hidden, log_std=cfg.init_log_std
    )
    result = TrainResult(params, [], [], 0)
    if algo.total_steps == 0:
        return result

    sample_rng = np.random.default_rng(sample_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    refiner = _make_refiner(cfg)
    envs = [
        SynthesisEnv(cfg.env, target=cfg.target, refiner=refiner, rng=np.random.default_rng(ss))
        for ss in env_ss.spawn(algo.env_count)
    ]
    vec = VecEnv(envs)
    heldout = _heldout_targets(cfg, heldout_ss)
    eval_seed = int(eval_ss.generate_state(1)[0])
    adam = AdamState(lr=algo.lr, size=params.size)

    batch = algo.horizon * algo.env_count
    iterations = max(1, algo.total_steps // batch)
    eval_every = cfg.eval_every or max(batch, (iterations * batch) // 10)
    next_eval = eval_every
    ckpt_every = cfg.checkpoint_every
    writer = None
    handle = None
    if metrics_path is not None:
        handle = open(metrics_path, "w", newline="")
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)

    try:
        steps = 0
        for it in range(iterations):
            buffer = collect_rollouts(params, vec, algo.horizon, sample_rng, cfg.angle_enabled, result.episodes.append)
            steps += batch
            if cfg.mode == "a2c":
                adv, ret = compute_gae(buffer, algo.gamma, algo.gae_lambda)
                stats = a2c_update(params, adam, buffer, adv, ret, algo, cfg.angle_enabled)
            else:
                adv, ret = compute_gae(buffer, algo.gamma, algo.gae_lambda, algo.normalize_rewards)
                stats = ppo_update(params, adam, buffer, adv, ret, algo, shuffle_rng, cfg.angle_enabled)
            log.debug("iter %d steps %d actor %.4f value %.4f kl %.5f", it, steps, stats.actor_loss, stats.value_loss, stats.approx_kl)

            if steps >= next_eval or it == iterations - 1:
                next_eval += eval_every
                stoch = evaluate_policy(params, cfg, heldout, cfg.eval_episodes, eval_seed)
                det = evaluate_policy(params, cfg, heldout, len(heldout), eval_seed, deterministic=True)
                row = _metrics_row(steps, cfg.seed, stoch, det)
                result.metrics.append(row)
                if writer is not None:
                    writer.writerow(row.as_csv())
                    handle.flush()
                if on_metrics is not None:
                    on_metrics(row)
                log.info("step %d success %.3f fidelity %.4f", steps, row.success_rate, row.mean_fidelity)
            if cfg.checkpoint_dir is not None and ckpt_every and (it + 1) % ckpt_every == 0:
                save_params(params, Path(cfg.checkpoint_dir) / f"checkpoint_{steps}.txt")
        result.steps = steps
    except TrainingAbort as exc:
        if cfg.checkpoint_dir is not None:
            path = Path(cfg.checkpoint_dir) / "checkpoint_abort.txt"
            save_params(params, path)
            exc.checkpoint = str(path)
        raise
    finally:
        if handle is not None:
            handle.close()
    if refiner is not None:
        result.refinements = refiner.calls
    return result
