"""Single-step SLA decision environment and deep Q-learning.

Every episode is one step: the agent sees a forecast snapshot, decides whether
to scale up, and is rewarded against the ground-truth SLA label at the
forecast target time.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import BadConfig, Diverged, NoActiveEpisode
from .numerics import Tensor

log = logging.getLogger(__name__)

SCALE_UP = 1
NO_SCALE = 0


def reward(action: int, sla: bool | int) -> float:
    if action == SCALE_UP:
        return 20.0 if sla else -5.0
    return -10.0 if sla else 0.0


REWARD_TABLE = {(a, s): reward(a, s) for a in (0, 1) for s in (0, 1)}


class SlaEnv:
    """Serves forecast snapshots at uniformly sampled indices.

    ``observations[i]`` is the flattened forecast for eligible index ``i`` and
    ``labels[i]`` the SLA state at its target time. ``step`` samples the next
    index straight away, so its returned observation is already active.
    """

    def __init__(self, observations: np.ndarray, labels: np.ndarray, seed: int = 0):
        observations = np.asarray(observations, dtype=float)
        labels = np.asarray(labels).astype(bool)
        if observations.ndim != 2 or len(observations) != len(labels) or len(labels) == 0:
            raise BadConfig("need a non-empty N x d observation matrix with N labels")
        self.observations = observations
        self.labels = labels
        self.rng = np.random.default_rng(seed)
        self.index: int | None = None

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def _sample(self) -> np.ndarray:
        self.index = int(self.rng.integers(len(self.labels)))
        return self.observations[self.index]

    def reset(self) -> np.ndarray:
        return self._sample()

    def current_label(self) -> bool:
        if self.index is None:
            raise NoActiveEpisode("call reset() first")
        return bool(self.labels[self.index])

    def step(self, action: int) -> tuple[float, np.ndarray, bool]:
        if self.index is None:
            raise NoActiveEpisode("step() before reset()")
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action}")
        r = reward(action, self.labels[self.index])
        return r, self._sample(), True


def env_step(env: SlaEnv, action: int) -> tuple[float, np.ndarray, bool]:
    return env.step(action)


# networks -----------------------------------------------------------------


class QNetwork:
    """MLP ``obs -> 64 -> 64 -> 2`` with ReLU hidden layers."""

    def __init__(self, obs_dim: int, hidden: Sequence[int] = (64, 64), n_actions: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [obs_dim, *hidden, n_actions]
        self.layers: list[tuple[Tensor, Tensor]] = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            W = Tensor(nx.xavier_uniform(rng, a, b), requires_grad=True)
            self.layers.append((W, Tensor(np.zeros(b), requires_grad=True)))

    def __call__(self, obs) -> Tensor:
        x = nx.as_tensor(obs)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        for i, (W, b) in enumerate(self.layers):
            x = x @ W + b
            if i < len(self.layers) - 1:
                x = nx.relu(x)
        return x

    def q_values(self, obs) -> np.ndarray:
        with nx.no_grad():
            return self(obs).data

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(self.layers):
            out[f"q.{i}.W"] = W
            out[f"q.{i}.b"] = b
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters().items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def copy_from(self, other: "QNetwork") -> None:
        self.load_state_dict(other.state_dict())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def greedy_action(q: np.ndarray) -> int:
    # ties go to 0 (no scaling)
    return int(q[1] > q[0])


def act_epsilon_greedy(q: QNetwork, s: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if epsilon > 0.0 and rng.random() < epsilon:
        return int(rng.integers(2))
    return greedy_action(q.q_values(s)[0])


# replay -------------------------------------------------------------------


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise BadConfig("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, obs_dim))
        self.s_next = np.zeros((capacity, obs_dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.pos = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a: int, r: float, s_next, done: bool) -> None:
        i = self.pos
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} < {batch_size} transitions")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx])


def td_target(batch: Batch, q_target: QNetwork | Callable[[np.ndarray], np.ndarray], gamma: float) -> np.ndarray:
    """``r + gamma * max_a Q_target(s', a) * (1 - done)``."""
    q_next = q_target.q_values(batch.s_next) if isinstance(q_target, QNetwork) else q_target(batch.s_next)
    return batch.r + gamma * q_next.max(axis=1) * (1.0 - batch.done.astype(float))


# training -----------------------------------------------------------------


@dataclass(frozen=True)
class AgentConfig:
    total_timesteps: int = 100_000
    lr: float = 1e-4
    gamma: float = 0.99
    buffer_size: int = 50_000
    batch_size: int = 32
    learning_starts: int = 1_000
    train_freq: int = 4
    gradient_steps: int = 1
    target_update_interval: int = 500
    max_grad_norm: float = 10.0
    exploration_fraction: float = 0.1
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def __post_init__(self):
        positive = (
            self.total_timesteps, self.lr, self.buffer_size, self.batch_size,
            self.train_freq, self.gradient_steps, self.target_update_interval, self.max_grad_norm,
        )
        if any(not v > 0 for v in positive):
            raise BadConfig("agent hyperparameters must be positive")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 < self.exploration_fraction <= 1.0:
            raise BadConfig("gamma must lie in [0, 1] and exploration_fraction in (0, 1]")
        if self.learning_starts < 0:
            raise BadConfig("learning_starts must be >= 0")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            raise BadConfig("need 0 <= epsilon_end <= epsilon_start <= 1")


FULL_AGENT_CONFIG = AgentConfig(
    total_timesteps=5_000_000,
    buffer_size=1_000_000,
    learning_starts=50_000,
    target_update_interval=10_000,
)


def epsilon_at(step: int, cfg: AgentConfig) -> float:
    """Linear decay over the first ``exploration_fraction`` of training, then flat."""
    progress = step / (cfg.exploration_fraction * cfg.total_timesteps)
    if progress >= 1.0:
        return cfg.epsilon_end
    return cfg.epsilon_start + progress * (cfg.epsilon_end - cfg.epsilon_start)


@dataclass
class TrainingLog:
    step: list[int] = field(default_factory=list)
    epsilon: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)  # NaN where no update ran
    episode_reward: list[float] = field(default_factory=list)
    updates: int = 0
    target_syncs: list[int] = field(default_factory=list)


def train_dqn(
    env: SlaEnv,
    cfg: AgentConfig = AgentConfig(),
    batch_hook: Callable[[Batch, np.ndarray], None] | None = None,
) -> tuple[QNetwork, TrainingLog]:
    """DQN with experience replay and a hard-copied target network.

    ``batch_hook(batch, targets)`` sees every sampled minibatch and its TD targets.
    """
    rng = np.random.default_rng(cfg.seed)
    online = QNetwork(env.obs_dim, cfg.hidden, seed=cfg.seed)
    target = QNetwork(env.obs_dim, cfg.hidden, seed=cfg.seed)
    target.copy_from(online)
    params = list(online.parameters().values())
    opt = nx.Adam(params, lr=cfg.lr)
    buffer = ReplayBuffer(min(cfg.buffer_size, cfg.total_timesteps), env.obs_dim)
    out = TrainingLog()

    s = env.reset()
    for step in range(cfg.total_timesteps):
        eps = epsilon_at(step, cfg)
        a = act_epsilon_greedy(online, s, eps, rng)
        r, s_next, done = env.step(a)
        buffer.add(s, a, r, s_next, done)
        s = s_next

        loss_value = math.nan
        if step >= cfg.learning_starts and step % cfg.train_freq == 0 and len(buffer) >= cfg.batch_size:
            for _ in range(cfg.gradient_steps):
                batch = buffer.sample(cfg.batch_size, rng)
                targets = td_target(batch, target, cfg.gamma)
                if batch_hook:
                    batch_hook(batch, targets)
                opt.zero_grad()
                q = online(batch.s)
                chosen = (q * np.eye(2)[batch.a]).sum(axis=1)
                loss = nx.mse_loss(chosen, targets)
                nx.backward(loss)
                nx.clip_grad_norm(params, cfg.max_grad_norm)
                opt.step()
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise Diverged(f"TD loss became {loss_value} at step {step}")
                out.updates += 1
        if (step + 1) % cfg.target_update_interval == 0:
            target.copy_from(online)
            out.target_syncs.append(step + 1)

        out.step.append(step)
        out.epsilon.append(eps)
        out.loss.append(loss_value)
        out.episode_reward.append(r)
    return online, out


def rolling_mean(values: Sequence[float], window: int) -> np.ndarray:
    """Trailing mean over the last ``window`` entries, ignoring NaN; NaN while none are present."""
    x = np.asarray(values, dtype=float)
    present = ~np.isnan(x)
    csum = np.concatenate(([0.0], np.cumsum(np.where(present, x, 0.0))))
    ccount = np.concatenate(([0], np.cumsum(present)))
    hi = np.arange(1, len(x) + 1)
    lo = np.maximum(0, hi - window)
    total = csum[hi] - csum[lo]
    count = ccount[hi] - ccount[lo]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan)


@dataclass(frozen=True)
class PolicyEvaluation:
    rewards: np.ndarray
    labels: np.ndarray
    actions: np.ndarray

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.rewards > 0))

    @property
    def nonnegative_fraction(self) -> float:
        return float(np.mean(self.rewards >= 0))

    @property
    def violation_rate(self) -> float:
        return float(np.mean(self.labels))


def evaluate_policy(
    policy: QNetwork | Callable[[np.ndarray, SlaEnv], int], env: SlaEnv, episodes: int = 100
) -> PolicyEvaluation:
    """Greedy rollout over ``episodes`` sampled test indices."""
    rewards, labels, actions = [], [], []
    s = env.reset()
    for _ in range(episodes):
        if isinstance(policy, QNetwork):
            a = greedy_action(policy.q_values(s)[0])
        else:
            a = int(policy(s, env))
        labels.append(env.current_label())
        r, s, _ = env.step(a)
        rewards.append(r)
        actions.append(a)
    return PolicyEvaluation(np.asarray(rewards), np.asarray(labels), np.asarray(actions))
