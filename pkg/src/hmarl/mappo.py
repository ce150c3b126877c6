"""Multi-agent PPO with a shared actor and a centralized critic.

The actor is a tanh-squashed diagonal Gaussian: a pre-squash sample
``u ~ N(mu, sigma)`` maps to the bounded action ``delta * tanh(u / delta)``.
Rollouts store ``u`` so log-probabilities can be re-evaluated exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .approximator import (
    ParamSet,
    adam_step,
    all_finite,
    backward,
    clip_grads,
    init_mlp,
    mlp_forward,
)
from .errors import InvalidArgument, UpdateRejected

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PpoConfig:
    """Low-level learning hyperparameters.

    ``shared_actor`` gives every low-level agent the same actor; when false
    each agent owns an actor of the same shape and only the critic is shared.
    """

    gamma: float = 0.985
    gae_lambda: float = 0.9
    clip_eps: float = 0.2
    entropy_coef: float = 1e-4
    value_coef: float = 1.0
    epochs: int = 40
    batch_size: int = 200
    lr: float = 2e-4
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    hidden: tuple[int, ...] = (256, 256)
    shared_actor: bool = True

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 <= self.gae_lambda <= 1):
            raise InvalidArgument(f"gamma must lie in (0, 1] and lambda in [0, 1], got {self.gamma}, {self.gae_lambda}")
        if not self.clip_eps > 0:
            raise InvalidArgument(f"clip_eps must be positive, got {self.clip_eps}")
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidArgument("epochs, batch_size and lr must be positive")


@dataclass
class UpdateStats:
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0
    kl: float = 0.0
    clip_fraction: float = 0.0
    minibatches: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


# -- advantage estimation ---------------------------------------------------


def gae(rewards, values, bootstrap, gamma: float, lam: float, dones=None) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation by backward recursion.

    Args:
        rewards: ``(T,)`` or ``(T, n)`` rewards.
        values: Value estimates with the same shape.
        bootstrap: Value of the state after the last step, shape ``()`` or ``(n,)``.
        gamma: Discount factor.
        lam: GAE mixing parameter.
        dones: Optional flags; ``dones[t]`` cuts the recursion after step ``t``.

    Returns:
        ``(advantages, value_targets)`` with ``value_targets = advantages + values``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if r.shape != v.shape:
        raise InvalidArgument(f"rewards {r.shape} and values {v.shape} must align")
    if len(r) == 0:
        raise InvalidArgument("empty trajectory")
    if not (0 < gamma <= 1 and 0 <= lam <= 1):
        raise InvalidArgument(f"gamma={gamma} or lambda={lam} out of range")
    d = np.zeros(r.shape, dtype=bool) if dones is None else np.asarray(dones, dtype=bool).reshape(r.shape)
    adv = np.zeros_like(r)
    next_v = np.broadcast_to(np.asarray(bootstrap, dtype=np.float64), r.shape[1:]).copy()
    running = np.zeros(r.shape[1:])
    for t in reversed(range(len(r))):
        live = 1.0 - d[t]
        delta = r[t] + gamma * next_v * live - v[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_v = v[t]
    return adv, adv + v


def discounted_return(rewards, gamma: float) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(r * gamma ** np.arange(len(r))))


# -- surrogate --------------------------------------------------------------


def clipped_surrogate(ratio, advantage, eps: float):
    """``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def clipped_loss(ratio, advantage, eps: float):
    """Negated clipped surrogate, for minimization."""
    return -clipped_surrogate(ratio, advantage, eps)


def surrogate_grad(ratio, advantage, eps: float) -> np.ndarray:
    """Derivative of the clipped surrogate with respect to the log-ratio."""
    ratio = np.asarray(ratio, dtype=np.float64)
    unclipped = ratio * advantage <= np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage
    return np.where(unclipped, advantage * ratio, 0.0)


# -- squashed Gaussian ------------------------------------------------------


def squash(u, delta: float):
    return delta * np.tanh(np.asarray(u) / delta)


def log_squash_jacobian(u, delta: float) -> np.ndarray:
    """``sum(log(1 - tanh(u/delta)**2))`` computed without cancellation."""
    x = np.asarray(u, dtype=np.float64) / delta
    return np.sum(2.0 * (np.log(2.0) - x - np.logaddexp(0.0, -2.0 * x)), axis=-1)


def squashed_logp(u, mu, log_std, delta: float) -> np.ndarray:
    """Log-density of ``delta * tanh(u / delta)`` when ``u ~ N(mu, exp(log_std))``."""
    u = np.asarray(u, dtype=np.float64)
    z = (u - mu) * np.exp(-log_std)
    gauss = -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) * np.ones(z.shape[:-1]) - 0.5 * z.shape[-1] * LOG_2PI
    return gauss - log_squash_jacobian(u, delta)


def squashed_logp_grads(u, mu, log_std) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of :func:`squashed_logp` w.r.t. ``mu`` and ``log_std``.

    The squash term depends only on ``u`` and drops out.
    """
    inv_var = np.exp(-2.0 * log_std)
    diff = np.asarray(u) - mu
    return diff * inv_var, diff * diff * inv_var - 1.0


def gaussian_entropy(log_std) -> float:
    """Entropy of the pre-squash Gaussian."""
    log_std = np.asarray(log_std)
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + LOG_2PI))


# -- actor and critic -------------------------------------------------------


def make_actor(obs_dim: int, act_dim: int, delta: float, rng: np.random.Generator, hidden=(256, 256)) -> ParamSet:
    log_std = np.full(act_dim, np.log(0.5 * delta))
    return init_mlp([obs_dim, *hidden, act_dim], rng, final_scale=0.01, extra={"log_std": log_std})


def make_critic(in_dim: int, rng: np.random.Generator, hidden=(256, 256)) -> ParamSet:
    return init_mlp([in_dim, *hidden, 1], rng)


def act(agent: ParamSet, obs, mode: str, rng: np.random.Generator | None, delta: float):
    """Sample or pick a bounded action.

    Args:
        agent: Actor parameters (MLP plus ``log_std``).
        obs: One observation or a ``(n, obs_dim)`` batch.
        mode: ``"stochastic"`` or ``"deterministic"``.
        rng: Required in stochastic mode.
        delta: Action bound per component.

    Returns:
        ``(action, log_prob, u)`` where ``u`` is the pre-squash sample.
    """
    obs = np.asarray(obs, dtype=np.float64)
    if not np.all(np.isfinite(obs)):
        raise InvalidArgument("observation has non-finite entries")
    mu, _ = mlp_forward(agent, obs)
    log_std = agent["log_std"]
    if mode == "deterministic":
        u = mu
    elif mode == "stochastic":
        if rng is None:
            raise InvalidArgument("stochastic mode needs an rng")
        u = mu + np.exp(log_std) * rng.standard_normal(mu.shape)
    else:
        raise InvalidArgument(f"mode must be 'stochastic' or 'deterministic', got {mode!r}")
    return squash(u, delta), squashed_logp(u, mu, log_std, delta), u


def values(critic: ParamSet, inputs) -> np.ndarray:
    out, _ = mlp_forward(critic, np.asarray(inputs, dtype=np.float64))
    return out[..., 0]


# -- rollout storage --------------------------------------------------------


@dataclass
class Rollout:
    """Per-step, per-agent trajectory buffer."""

    obs: list = field(default_factory=list)
    critic_in: list = field(default_factory=list)
    u: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    bootstrap: np.ndarray | None = None
    advantages: np.ndarray | None = None
    targets: np.ndarray | None = None

    def add(self, obs, critic_in, u, logp, reward, value, done=False):
        self.obs.append(np.asarray(obs, dtype=np.float64))
        self.critic_in.append(np.asarray(critic_in, dtype=np.float64))
        self.u.append(np.asarray(u, dtype=np.float64))
        self.logp.append(np.asarray(logp, dtype=np.float64))
        self.rewards.append(np.asarray(reward, dtype=np.float64))
        self.values.append(np.asarray(value, dtype=np.float64))
        self.dones.append(bool(done))

    def __len__(self) -> int:
        return len(self.rewards)

    def finish(self, bootstrap, cfg: PpoConfig) -> None:
        """Record the bootstrap value and compute advantages and targets."""
        self.bootstrap = np.asarray(bootstrap, dtype=np.float64)
        r = np.array(self.rewards)
        dones = np.array(self.dones)
        if r.ndim > 1:
            dones = np.repeat(dones[:, None], r.shape[1], axis=1)
        self.advantages, self.targets = gae(r, np.array(self.values), self.bootstrap, cfg.gamma, cfg.gae_lambda, dones)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise InvalidArgument("rollout not finished; call finish() first")
        obs = np.array(self.obs)
        n = obs.shape[0] * (obs.shape[1] if obs.ndim == 3 else 1)
        return {
            "obs": obs.reshape(n, -1),
            "critic_in": np.array(self.critic_in).reshape(n, -1),
            "u": np.array(self.u).reshape(n, -1),
            "logp": np.array(self.logp).reshape(n),
            "adv": self.advantages.reshape(n),
            "targets": self.targets.reshape(n),
        }


def merge_flat(batches: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([b[k] for b in batches]) for k in batches[0]}


# -- update -----------------------------------------------------------------


def update(actor: ParamSet, critic: ParamSet, rollout, cfg: PpoConfig, rng: np.random.Generator, delta: float) -> UpdateStats:
    """Clipped-PPO epochs over shuffled minibatches.

    Args:
        actor: Shared actor, updated in place.
        critic: Centralized critic, updated in place.
        rollout: A finished :class:`Rollout` or the dict from :meth:`Rollout.flat`.
        cfg: Hyperparameters.
        rng: Shuffling randomness.
        delta: Action bound used when the rollout was collected.

    Raises:
        UpdateRejected: on a non-finite loss or gradient. Both networks are
            restored to their state before the call.
    """
    data = rollout.flat() if isinstance(rollout, Rollout) else rollout
    n = len(data["logp"])
    if n == 0:
        raise InvalidArgument("empty rollout")
    adv = data["adv"]
    if cfg.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    actor_snap, critic_snap = actor.copy(), critic.copy()
    stats = UpdateStats()
    kls, clips = [], []
    try:
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                b = len(idx)
                obs = data["obs"][idx]
                mu, a_tape = mlp_forward(actor, obs)
                log_std = actor["log_std"]
                u = data["u"][idx]
                logp = squashed_logp(u, mu, log_std, delta)
                log_ratio = logp - data["logp"][idx]
                ratio = np.exp(log_ratio)
                a_b = adv[idx]
                surr = clipped_surrogate(ratio, a_b, cfg.clip_eps)
                ent = gaussian_entropy(log_std)

                v, c_tape = mlp_forward(critic, data["critic_in"][idx])
                err = v[:, 0] - data["targets"][idx]
                policy_loss = -float(surr.mean())
                value_loss = float(np.mean(err * err))
                loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * ent
                if not np.isfinite(loss):
                    raise UpdateRejected(f"non-finite loss {loss}")

                d_logp = -surrogate_grad(ratio, a_b, cfg.clip_eps) / b
                g_mu_unit, g_ls_unit = squashed_logp_grads(u, mu, log_std)
                a_grads, _ = backward(a_tape, actor, d_logp[:, None] * g_mu_unit)
                a_grads["log_std"] = (d_logp[:, None] * g_ls_unit).sum(axis=0) - cfg.entropy_coef * np.ones_like(log_std)
                c_grads, _ = backward(c_tape, critic, (cfg.value_coef * 2.0 * err / b)[:, None])
                if not all_finite(*a_grads.values(), *c_grads.values()):
                    raise UpdateRejected("non-finite gradient")
                clip_grads(cfg.max_grad_norm, a_grads)
                clip_grads(cfg.max_grad_norm, c_grads)
                adam_step(actor, a_grads, cfg.lr)
                adam_step(critic, c_grads, cfg.lr)

                stats.policy_loss += policy_loss
                stats.value_loss += value_loss
                stats.entropy += ent
                kls.append(float(np.mean(ratio - 1.0 - log_ratio)))
                clips.append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)))
                stats.minibatches += 1
    except UpdateRejected:
        actor.restore(actor_snap)
        critic.restore(critic_snap)
        raise
    if not all_finite(*actor.params.values(), *critic.params.values()):
        actor.restore(actor_snap)
        critic.restore(critic_snap)
        raise UpdateRejected("parameters became non-finite")
    m = max(stats.minibatches, 1)
    stats.policy_loss /= m
    stats.value_loss /= m
    stats.entropy /= m
    stats.kl = float(np.mean(kls)) if kls else 0.0
    stats.clip_fraction = float(np.mean(clips)) if clips else 0.0
    return stats
