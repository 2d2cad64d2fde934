"""Soft actor-critic over the placement environment, plus the random baseline.

Actor outputs a tanh-squashed Gaussian over the 3-axis displacement; two Q
critics with polyak-averaged targets. Rewards are the environment's +/-1
feasibility signal; the judge-derived episode bonus is injected on the
terminal transition before the episode enters the replay buffer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import Adam, Mlp, NetOptimizer, load_net, save_net
from .scene import OBS_DIM, PlacementEnv

ACTION_DIM = 3
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
_TANH_EPS = 1e-6


def default_obs_scale(obs_dim: int) -> np.ndarray:
    """Per-feature divisors applied at the network boundary. The placement
    observation mixes metres with degrees; the angular entries would otherwise
    saturate the first tanh layer.
    """
    scale = np.ones(obs_dim)
    if obs_dim == OBS_DIM:
        scale[0] = 2.0  # moved slot 0..2
        scale[1] = 7.0  # scene id
        scale[23:26] = 180.0  # object yaws, degrees
        scale[29:32] = 180.0  # camera yaw/pitch/roll, degrees
    return scale


class AgentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    next_observation: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity ring with seeded uniform minibatch sampling."""

    def __init__(
        self,
        capacity: int = 100_000,
        seed: int | np.random.SeedSequence = 0,
        obs_dim: int = OBS_DIM,
        action_dim: int = ACTION_DIM,
    ):
        self.capacity = int(capacity)
        self._obs = np.zeros((capacity, obs_dim))
        self._act = np.zeros((capacity, action_dim))
        self._rew = np.zeros(capacity)
        self._next = np.zeros((capacity, obs_dim))
        self._term = np.zeros(capacity)
        self._size = 0
        self._head = 0
        self._rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self._size

    def push(self, tr: Transition) -> None:
        i = self._head
        self._obs[i] = tr.observation
        self._act[i] = tr.action
        self._rew[i] = tr.reward
        self._next[i] = tr.next_observation
        self._term[i] = float(tr.terminal)
        self._head = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch: int):
        idx = self._rng.choice(self._size, size=batch, replace=False)
        return (
            self._obs[idx],
            self._act[idx],
            self._rew[idx],
            self._next[idx],
            self._term[idx],
        )


@dataclass
class UpdateInfo:
    performed: bool
    critic_losses: tuple[float, float] = (0.0, 0.0)
    actor_loss: float = 0.0
    alpha: float = 0.0


class SacAgent:
    def __init__(
        self,
        seed: int | np.random.SeedSequence = 0,
        hidden: tuple[int, ...] = (128, 128),
        lr: float = 3e-4,
        gamma: float = 0.99,
        polyak: float = 0.995,
        alpha: float = 0.2,
        auto_alpha: bool = False,
        target_entropy: float = -float(ACTION_DIM),
        warmup: int = 1000,
        minibatch: int = 256,
        buffer_capacity: int = 100_000,
        obs_dim: int = OBS_DIM,
    ):
        seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        s_actor, s_q1, s_q2, s_buf, s_act = seq.spawn(5)
        self.obs_dim = obs_dim
        self.actor = Mlp([obs_dim, *hidden, 2 * ACTION_DIM], seed=s_actor)
        self.q1 = Mlp([obs_dim + ACTION_DIM, *hidden, 1], seed=s_q1)
        self.q2 = Mlp([obs_dim + ACTION_DIM, *hidden, 1], seed=s_q2)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.actor_opt = NetOptimizer(self.actor, lr=lr)
        self.q1_opt = NetOptimizer(self.q1, lr=lr)
        self.q2_opt = NetOptimizer(self.q2, lr=lr)
        self.gamma = gamma
        self.polyak = polyak
        self.log_alpha = float(np.log(alpha))
        self.auto_alpha = auto_alpha
        self.target_entropy = target_entropy
        self.alpha_opt = Adam(lr=lr)
        self.warmup = warmup
        self.minibatch = minibatch
        self.buffer = ReplayBuffer(buffer_capacity, seed=s_buf, obs_dim=obs_dim)
        self.obs_scale = default_obs_scale(obs_dim)
        self._rng = np.random.default_rng(s_act)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    # -- policy

    def _policy_params(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = self.actor.forward(obs)
        mean = out[..., :ACTION_DIM]
        log_std_raw = out[..., ACTION_DIM:]
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, log_std_raw

    def select_action(self, observation: np.ndarray, stochastic: bool = True) -> np.ndarray:
        obs = np.asarray(observation, dtype=float)
        if obs.shape != (self.obs_dim,) or not np.isfinite(obs).all():
            raise AgentError("observation must be a finite vector of the right width")
        mean, log_std, _ = self._policy_params(obs / self.obs_scale)
        self.actor.invalidate_cache()
        if not stochastic:
            return np.tanh(mean)
        eps = self._rng.standard_normal(ACTION_DIM)
        return np.tanh(mean + np.exp(log_std) * eps)

    def _sample_with_logp(self, obs: np.ndarray, rng: np.random.Generator):
        """Reparameterized batch sample; returns (action, logp, pieces for grads)."""
        mean, log_std, log_std_raw = self._policy_params(obs)
        std = np.exp(log_std)
        eps = rng.standard_normal(mean.shape)
        u = mean + std * eps
        a = np.tanh(u)
        sq_term = 1.0 - a * a + _TANH_EPS
        logp = (
            -0.5 * np.sum(eps * eps, axis=-1)
            - np.sum(log_std, axis=-1)
            - 0.5 * ACTION_DIM * np.log(2.0 * np.pi)
            - np.sum(np.log(sq_term), axis=-1)
        )
        clamp_mask = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
        return a, logp, (eps, std, sq_term, clamp_mask)

    # -- learning

    def update(self, minibatch: int | None = None) -> UpdateInfo:
        """One gradient step for both critics and the actor, then polyak target
        averaging. No-op before the warmup fill is reached.
        """
        batch = minibatch or self.minibatch
        if len(self.buffer) < max(self.warmup, batch):
            return UpdateInfo(performed=False, alpha=self.alpha)
        obs, act, rew, nxt, term = self.buffer.sample(batch)
        obs = obs / self.obs_scale
        nxt = nxt / self.obs_scale

        # critic targets
        a_next, logp_next, _ = self._sample_with_logp(nxt, self._rng)
        self.actor.invalidate_cache()
        q1n = self.q1_target.forward(np.hstack([nxt, a_next]))[:, 0]
        q2n = self.q2_target.forward(np.hstack([nxt, a_next]))[:, 0]
        self.q1_target.invalidate_cache()
        self.q2_target.invalidate_cache()
        target = rew + self.gamma * (1.0 - term) * (
            np.minimum(q1n, q2n) - self.alpha * logp_next
        )

        critic_losses = []
        sa = np.hstack([obs, act])
        for q, opt in ((self.q1, self.q1_opt), (self.q2, self.q2_opt)):
            pred = q.forward(sa)[:, 0]
            err = pred - target
            critic_losses.append(float(np.mean(err * err)))
            grads, _ = q.backward((2.0 * err / batch)[:, None])
            opt.step(grads)

        # actor step (critic weights held fixed)
        a, logp, (eps, std, sq_term, clamp_mask) = self._sample_with_logp(
            obs, self._rng
        )
        sa_pi = np.hstack([obs, a])
        q1v = self.q1.forward(sa_pi)[:, 0]
        _, g1 = self.q1.backward(np.ones((batch, 1)))
        q2v = self.q2.forward(sa_pi)[:, 0]
        _, g2 = self.q2.backward(np.ones((batch, 1)))
        self.q1.invalidate_cache()
        self.q2.invalidate_cache()
        use_q1 = (q1v <= q2v)[:, None]
        dq_da = np.where(use_q1, g1[:, self.obs_dim :], g2[:, self.obs_dim :])
        q_min = np.minimum(q1v, q2v)
        actor_loss = float(np.mean(self.alpha * logp - q_min))

        # d logp / du through the tanh correction; the Gaussian part is
        # constant in mean under reparameterization
        a_sq = a * a
        dlogp_du = 2.0 * a * (1.0 - a_sq) / sq_term
        dL_du = (self.alpha * dlogp_du - dq_da * (1.0 - a_sq)) / batch
        d_mean = dL_du
        d_log_std = dL_du * std * eps - (self.alpha / batch) * np.ones_like(std)
        d_log_std = np.where(clamp_mask, d_log_std, 0.0)
        actor_grads, _ = self.actor.backward(np.hstack([d_mean, d_log_std]))
        self.actor_opt.step(actor_grads)

        if self.auto_alpha:
            d_log_alpha = -self.alpha * float(np.mean(logp + self.target_entropy))
            params = [np.array([self.log_alpha])]
            self.alpha_opt.step(params, [np.array([d_log_alpha])])
            self.log_alpha = float(params[0][0])

        # polyak averaging of the target critics
        for q, t in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for p, tp in zip(q.params(), t.params()):
                tp *= self.polyak
                tp += (1.0 - self.polyak) * p

        for net in (self.actor, self.q1, self.q2):
            if not net.all_finite():
                raise AgentError("non-finite agent parameters after update")
        return UpdateInfo(True, tuple(critic_losses), actor_loss, self.alpha)

    # -- reward shaping

    @staticmethod
    def inject_terminal_bonus(
        transitions: list[Transition], j2: float, beta: float
    ) -> list[Transition]:
        """Add beta*J2 to the terminal reward; realizes J = J1 + beta*J2 at the
        return level. Rejects a second injection on the same episode.
        """
        if not transitions:
            raise AgentError("empty episode")
        if j2 < 0:
            raise AgentError("J2 must be non-negative")
        last = transitions[-1]
        for tr in transitions[:-1]:
            if tr.reward not in (-1.0, 1.0):
                raise AgentError("bonus already injected on this episode")
        if last.reward not in (-1.0, 1.0):
            raise AgentError("bonus already injected on this episode")
        patched = Transition(
            last.observation,
            last.action,
            last.reward + beta * j2,
            last.next_observation,
            last.terminal,
        )
        return transitions[:-1] + [patched]

    def absorb_episode(self, transitions: list[Transition]) -> None:
        for tr in transitions:
            self.buffer.push(tr)

    # -- persistence

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        nets = {
            "actor": self.actor,
            "q1": self.q1,
            "q2": self.q2,
            "q1_target": self.q1_target,
            "q2_target": self.q2_target,
        }
        for name, net in nets.items():
            save_net(net, directory / f"{name}.net")
        manifest = {
            "networks": {name: f"{name}.net" for name in nets},
            "alpha": self.alpha,
            "gamma": self.gamma,
            "polyak": self.polyak,
            "obs_scale": self.obs_scale.tolist(),
        }
        with open(directory / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, sort_keys=True, indent=2)

    def load(self, directory) -> None:
        directory = Path(directory)
        with open(directory / "manifest.json", "r", encoding="utf-8") as f:
            manifest = json.load(f)
        for name, rel in manifest["networks"].items():
            net = load_net(directory / rel)
            target = getattr(self, name)
            if net.layer_sizes != target.layer_sizes:
                raise AgentError(f"checkpoint architecture mismatch for {name}")
            setattr(self, name, net)
        self.log_alpha = float(np.log(manifest["alpha"]))
        if "obs_scale" in manifest:
            scale = np.asarray(manifest["obs_scale"], dtype=float)
            if scale.shape != (self.obs_dim,):
                raise AgentError("checkpoint observation scale mismatch")
            self.obs_scale = scale
        self.actor_opt = NetOptimizer(self.actor, lr=self.actor_opt.adam.lr)
        self.q1_opt = NetOptimizer(self.q1, lr=self.q1_opt.adam.lr)
        self.q2_opt = NetOptimizer(self.q2, lr=self.q2_opt.adam.lr)


class RandomAgent:
    """Uniform actions in [-1, 1]^3; the budget-matched baseline."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        self._rng = np.random.default_rng(seed)

    def select_action(self, observation=None, stochastic: bool = True) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, size=ACTION_DIM)


def pretrain_intrinsic(
    agent: SacAgent,
    env: PlacementEnv,
    steps: int,
    update_every: int = 1,
    checkpoint_dir=None,
) -> dict:
    """Train on the +/-1 feasibility reward only; no judge in the loop.

    Episodes end on the environment's own termination rule; transitions enter
    the buffer immediately (no bonus exists during pretraining).
    """
    if steps <= 0:
        raise ValueError("steps must be positive")
    episode = 0
    obs = env.reset_episode(episode)
    valid = 0
    for t in range(steps):
        action = agent.select_action(obs, stochastic=True)
        result = env.step(action)
        agent.buffer.push(
            Transition(obs, action, result.reward, result.observation, result.done)
        )
        if result.reward > 0:
            valid += 1
        obs = result.observation
        if result.done:
            episode += 1
            obs = env.reset_episode(episode)
        if (t + 1) % update_every == 0:
            agent.update()
    if checkpoint_dir is not None:
        agent.save(checkpoint_dir)
    return {"steps": steps, "episodes": episode, "valid_rate": valid / steps}


def measure_valid_rate(agent, env: PlacementEnv, steps: int, stochastic: bool = True) -> float:
    """Fraction of valid placements over fresh environment steps."""
    episode = 0
    obs = env.reset_episode(episode)
    valid = 0
    for _ in range(steps):
        result = env.step(agent.select_action(obs, stochastic=stochastic))
        if result.reward > 0:
            valid += 1
        obs = result.observation
        if result.done:
            episode += 1
            obs = env.reset_episode(episode)
    return valid / steps
