"""Soft actor-critic controller that rescales GCRN hidden features.

The actor emits a tanh-squashed Gaussian action in ``(-a_max, a_max)``; the
model multiplies its hidden states by ``1 + action``. Twin critics with a
min-target and fixed entropy coefficient.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor, no_grad, ops
from .nn import Adam, ParamGroup, init_mlp, mlp

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = float(np.log(2.0 * np.pi))
_LOG_2 = float(np.log(2.0))


class ReplayBuffer:
    """Bounded FIFO of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._data)

    def push(self, s, a, r: float, s_next, done: float) -> None:
        self._data.append((np.asarray(s, dtype=float).copy(), np.atleast_1d(np.asarray(a, dtype=float)).copy(),
                           float(r), np.asarray(s_next, dtype=float).copy(), float(done)))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Uniform sample without replacement."""
        if batch_size > len(self._data):
            raise ValueError(f"buffer holds {len(self._data)} transitions, asked for {batch_size}")
        idx = rng.choice(len(self._data), size=batch_size, replace=False)
        rows = [self._data[i] for i in idx]
        return {
            "s": np.stack([r[0] for r in rows]),
            "a": np.stack([r[1] for r in rows]),
            "r": np.array([r[2] for r in rows]),
            "s2": np.stack([r[3] for r in rows]),
            "d": np.array([r[4] for r in rows]),
        }

    def oldest(self):
        return self._data[0]


class SACPolicy:
    def __init__(self, state_dim: int, action_dim: int = 1, hidden: int = 32, a_max: float = 0.5,
                 alpha_ent: float = 0.2, gamma: float = 0.99, tau: float = 0.005, lr: float = 3e-4,
                 seed: int = 0):
        if not 0.0 < a_max < 1.0:
            raise ValueError("a_max must lie in (0, 1) so that 1 + action stays positive")
        self.state_dim, self.action_dim = state_dim, action_dim
        self.a_max, self.alpha_ent, self.gamma, self.tau = a_max, alpha_ent, gamma, tau
        self.rng = np.random.default_rng(seed)
        init_rng = np.random.default_rng(seed + 1)
        self.actor: ParamGroup = init_mlp(init_rng, [state_dim, hidden, hidden, 2 * action_dim])
        self.critics: Tuple[ParamGroup, ParamGroup] = (
            init_mlp(init_rng, [state_dim + action_dim, hidden, hidden, 1]),
            init_mlp(init_rng, [state_dim + action_dim, hidden, hidden, 1]),
        )
        self.targets = tuple({k: Tensor(v.data.copy(), _check=False) for k, v in c.items()} for c in self.critics)
        self.actor_opt = Adam(self.actor.values(), lr=lr)
        self.critic_opt = Adam([p for c in self.critics for p in c.values()], lr=lr)

    # -- distribution -----------------------------------------------------------
    def dist_params(self, s: Tensor) -> Tuple[Tensor, Tensor]:
        out = mlp(s, self.actor, n_layers=3, act=ops.relu)
        mean = out[..., : self.action_dim]
        log_std = ops.clip(out[..., self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std

    def rsample(self, s: Tensor, noise: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Reparameterised action and its log-density, with the tanh correction."""
        mean, log_std = self.dist_params(s)
        eps = Tensor(noise, _check=False)
        u = mean + ops.exp(log_std) * eps
        action = ops.tanh(u) * self.a_max
        # log(1 - tanh(u)^2) = 2(log 2 - u - softplus(-2u)), finite for all u
        log_det = 2.0 * (_LOG_2 - u - ops.softplus(-2.0 * u))
        logp = -0.5 * eps * eps - log_std - 0.5 * _LOG_2PI - log_det - float(np.log(self.a_max))
        return action, ops.sum(logp, axis=-1)

    def q_value(self, critic: ParamGroup, s, a) -> Tensor:
        s, a = _t(s), _t(a)
        return mlp(ops.concat([s, a], axis=-1), critic, n_layers=3, act=ops.relu)[..., 0]

    # -- checkpoint helpers --------------------------------------------------------
    def groups(self) -> Dict[str, ParamGroup]:
        return {"sac_actor": self.actor, "sac_critic1": self.critics[0], "sac_critic2": self.critics[1],
                "sac_target1": self.targets[0], "sac_target2": self.targets[1]}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=float), _check=False)


def summarize_state(H_G) -> np.ndarray:
    """Mean of ``[..., S, N, H]`` hidden states over the S and N axes."""
    data = H_G.data if isinstance(H_G, Tensor) else np.asarray(H_G, dtype=float)
    if data.ndim < 3 or data.shape[-3] == 0 or data.shape[-2] == 0:
        raise ValueError("summarize_state needs a non-empty [..., S, N, H] input")
    return data.mean(axis=(-3, -2))


def sample_action(policy: SACPolicy, s, deterministic: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Draw ``a = a_max·tanh(u)`` for states ``[..., state_dim]``; returns (action, log_prob).

    ``deterministic`` returns ``a_max·tanh(mean)`` (log-prob evaluated at it).
    """
    s = np.asarray(s, dtype=float)
    with no_grad():
        mean, log_std = policy.dist_params(_t(s))
        if deterministic:
            noise = np.zeros(mean.shape)
        else:
            noise = policy.rng.standard_normal(mean.shape)
        action, logp = policy.rsample(_t(s), noise)
    if deterministic:
        action_data = np.tanh(mean.data) * policy.a_max
    else:
        action_data = action.data
    # tanh rounds to ±1 for |u| > ~19; keep the emitted action strictly inside the bound
    hi = np.nextafter(policy.a_max, 0.0)
    return np.clip(action_data, -hi, hi), logp.data


def modulate(H_G: Tensor, action) -> Tensor:
    """``H_G · (1 + action)``; ``action`` is per-sample ``[B]`` / ``[B, 1]`` or per-channel ``[B, H]``."""
    a = np.asarray(action, dtype=float)
    B = H_G.shape[0]
    if a.ndim == 1 or (a.ndim == 2 and a.shape[1] == 1):
        a = a.reshape((B,) + (1,) * (H_G.ndim - 1))
    else:
        a = a.reshape((B,) + (1,) * (H_G.ndim - 2) + (a.shape[-1],))
    return H_G * Tensor(1.0 + a, _check=False)


def compute_sac_reward(y_pred, y_true) -> float:
    """``−MSE(y_pred, y_true)``."""
    y_pred, y_true = np.asarray(y_pred, dtype=float), np.asarray(y_true, dtype=float)
    if y_pred.shape != y_true.shape:
        raise ValueError(f"length mismatch: {y_pred.shape} vs {y_true.shape}")
    return -float(np.mean((y_pred - y_true) ** 2))


def critic_loss(policy: SACPolicy, batch: Dict[str, np.ndarray], noise: Optional[np.ndarray] = None) -> Tensor:
    """Twin-critic regression toward ``r + γ(1−d)(min Q'(s',a') − α·log π(a'|s'))``."""
    s2 = _t(batch["s2"])
    if noise is None:
        noise = policy.rng.standard_normal((len(batch["r"]), policy.action_dim))
    with no_grad():
        a2, logp2 = policy.rsample(s2, noise)
        q_next = np.minimum(policy.q_value(policy.targets[0], s2, a2).data,
                            policy.q_value(policy.targets[1], s2, a2).data)
        target = batch["r"] + policy.gamma * (1.0 - batch["d"]) * (q_next - policy.alpha_ent * logp2.data)
    y = Tensor(target, _check=False)
    loss = None
    for c in policy.critics:
        term = ops.mean(ops.square(policy.q_value(c, batch["s"], batch["a"]) - y))
        loss = term if loss is None else loss + term
    return loss


def critic_update(policy: SACPolicy, batch: Dict[str, np.ndarray]) -> float:
    policy.critic_opt.zero_grad()
    loss = critic_loss(policy, batch)
    loss.backward()
    policy.critic_opt.step()
    policy.critic_opt.zero_grad()
    for c, t in zip(policy.critics, policy.targets):
        for k in c:
            t[k].data = policy.tau * c[k].data + (1.0 - policy.tau) * t[k].data
    return loss.item()


CriticFn = Callable[[Tensor, Tensor], Tensor]


def actor_loss(policy: SACPolicy, s: np.ndarray, noise: np.ndarray, critic: Optional[CriticFn] = None) -> Tensor:
    """``E[α·log π(a|s) − Q(s,a)]`` with a reparameterised ``a`` and the min of the twin critics."""
    st = _t(s)
    a, logp = policy.rsample(st, noise)
    if critic is None:
        q = ops.minimum(policy.q_value(policy.critics[0], st, a), policy.q_value(policy.critics[1], st, a))
    else:
        q = critic(st, a)
    return ops.mean(policy.alpha_ent * logp - q)


def actor_update(policy: SACPolicy, batch: Dict[str, np.ndarray], critic: Optional[CriticFn] = None) -> float:
    """One Adam step on the actor; critic parameters are left untouched."""
    noise = policy.rng.standard_normal((len(batch["s"]), policy.action_dim))
    policy.actor_opt.zero_grad()
    loss = actor_loss(policy, batch["s"], noise, critic)
    loss.backward()
    policy.actor_opt.step()
    policy.actor_opt.zero_grad()
    policy.critic_opt.zero_grad()
    return loss.item()


def sac_update(policy: SACPolicy, buffer: ReplayBuffer, batch_size: int) -> Optional[Tuple[float, float]]:
    """Critic then actor step on one sampled minibatch; no-op if the buffer is too small."""
    if len(buffer) < batch_size:
        logger.warning("SAC buffer has %d < %d transitions; skipping update", len(buffer), batch_size)
        return None
    batch = buffer.sample(batch_size, policy.rng)
    return critic_update(policy, batch), actor_update(policy, batch)


def write_action_trace(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "action", "reward"])
        for step, action, reward in rows:
            w.writerow([step, repr(float(action)), repr(float(reward))])
