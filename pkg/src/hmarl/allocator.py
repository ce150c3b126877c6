"""High-level segment-to-user allocation.

A shared attention trunk reads one token per user and per segment. Two
heads sit on the pooled features: a Q head whose output is factorized as

    Q(s, b) = c + sum_l q[l, b_l] + sum_k v[k] * [user k is served]

so every allocation can be scored from one forward pass, and a policy head
producing per-segment logits used as the proposal distribution when the
allocation space is too large to enumerate. A geometric compatibility prior
is added to the Q values early in training.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .approximator import (
    ParamSet,
    adam_step,
    all_finite,
    attention_forward,
    backward,
    clip_grads,
    init_attention,
    init_mlp,
    mlp_depth,
    mlp_forward,
)
from .environment import HighState
from .errors import DegenerateGeometry, InvalidArgument

STRATEGIES = ("allocator", "no_compat", "no_allocator", "random")
POSITION_SCALE = 5.0
LOG_RATIO_CAP = 20.0
DUAL_CLIP = 3.0


@dataclass(frozen=True)
class AllocConfig:
    """Allocator hyperparameters.

    Args:
        d0: Distance scale of the compatibility prior, metres.
        alpha_threshold: Episodes during which the prior is active.
        proposal_count: Samples drawn from the policy head when the
            allocation space exceeds ``enum_cutoff``.
        enum_cutoff: Largest ``K**L`` scored by full enumeration.
        temperature: Softmax temperature of the exploratory behaviour.
        d_model: Width of the attention trunk.
        head_hidden: Hidden width of each head.
        lr: Adam learning rate for trunk and heads.
        buffer_size: Most recent transitions kept for Q regression.
        q_steps: Q-regression minibatches per update call.
        q_batch: Q-regression minibatch size.
        policy_epochs: Passes of the clipped surrogate over new transitions.
        clip_eps: Surrogate clip range.
        max_grad_norm: Gradient-norm clip.
    """

    d0: float = 10.0
    alpha_threshold: int = 300
    proposal_count: int = 64
    enum_cutoff: int = 4096
    temperature: float = 0.1
    d_model: int = 64
    head_hidden: int = 128
    lr: float = 1e-3
    buffer_size: int = 1000
    q_steps: int = 20
    q_batch: int = 64
    policy_epochs: int = 4
    clip_eps: float = 0.2
    max_grad_norm: float = 0.5

    def __post_init__(self):
        if not self.d0 > 0:
            raise InvalidArgument(f"d0 must be positive, got {self.d0}")
        if self.proposal_count < 1 or self.enum_cutoff < 1:
            raise InvalidArgument("proposal_count and enum_cutoff must be >= 1")
        if not self.temperature > 0:
            raise InvalidArgument("temperature must be positive")


@dataclass(frozen=True)
class CompatMatrix:
    C: np.ndarray
    d0: float


@dataclass
class HighTransition:
    state: HighState
    allocation: tuple[int, ...]
    ret: float
    logp: float = 0.0


@dataclass
class AllocStats:
    q_loss: float = 0.0
    policy_loss: float = 0.0
    skipped: int = 0
    used: int = 0

    def as_dict(self) -> dict:
        return {"q_loss": self.q_loss, "alloc_policy_loss": self.policy_loss, "alloc_skipped": self.skipped, "alloc_used": self.used}


def compat(users, centroids, ap, d0: float) -> CompatMatrix:
    """``C[k, l] = exp(-|u_k - r_l| / d0) * cos(theta_kl)``.

    ``theta_kl`` is the angle at segment ``l`` between the directions to the
    access point and to user ``k``.
    """
    if not d0 > 0:
        raise InvalidArgument(f"d0 must be positive, got {d0}")
    u = np.atleast_2d(np.asarray(users, dtype=np.float64))
    r = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    ap = np.asarray(ap, dtype=np.float64)
    to_user = u[:, None, :] - r[None, :, :]
    dist = np.linalg.norm(to_user, axis=-1)
    to_ap = ap - r
    ap_dist = np.linalg.norm(to_ap, axis=-1)
    if np.any(dist < 1e-12) or np.any(ap_dist < 1e-12):
        raise DegenerateGeometry("a user or the access point coincides with a segment centroid")
    cos = np.einsum("kld,ld->kl", to_user, to_ap) / (dist * ap_dist[None, :])
    return CompatMatrix(np.exp(-dist / d0) * np.clip(cos, -1.0, 1.0), d0)


def alpha(episode: int, threshold: int) -> float:
    """Step schedule: the prior weight is 1 before ``threshold`` episodes, then 0."""
    return 1.0 if episode < threshold else 0.0


def all_allocations(K: int, L: int) -> np.ndarray:
    """Every segment-to-user map as rows of a ``(K**L, L)`` array, lexicographic."""
    return np.array(list(itertools.product(range(K), repeat=L)), dtype=np.int64).reshape(-1, L)


def allocation_index(alloc, K: int) -> int:
    idx = 0
    for b in alloc:
        idx = idx * K + int(b)
    return idx


def compat_sum(C: np.ndarray, allocs: np.ndarray) -> np.ndarray:
    """``sum_l C[b_l, l]`` for each allocation row."""
    L = allocs.shape[1]
    return C[allocs, np.arange(L)].sum(axis=1)


def _softmax(x: np.ndarray, axis=-1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class AllocPolicy:
    """Attention trunk with a factorized Q head and a proposal head."""

    def __init__(self, K: int, L: int, cfg: AllocConfig, rng: np.random.Generator):
        if K < 1 or L < 1:
            raise InvalidArgument(f"K and L must be >= 1, got {K}, {L}")
        self.K, self.L, self.cfg = K, L, cfg
        self.token_dim = 3 + 3 + 2 + K + L
        self.trunk = init_attention(self.token_dim, cfg.d_model, rng)
        self.q_head = init_mlp([cfg.d_model, cfg.head_hidden, L * K + K + 1], rng)
        self.pi_head = init_mlp([cfg.d_model, cfg.head_hidden, L * K], rng, final_scale=0.01)
        # running statistics of the regression targets
        self.q_norm = ParamSet({"mean": np.zeros(1), "std": np.ones(1), "count": np.zeros(1)})

    def param_sets(self) -> dict[str, ParamSet]:
        return {"alloc_trunk": self.trunk, "alloc_q": self.q_head, "alloc_pi": self.pi_head, "alloc_qnorm": self.q_norm}

    def load_param_sets(self, sets: dict[str, ParamSet]) -> None:
        for name, ps in self.param_sets().items():
            if name not in sets or sets[name].shapes != ps.shapes:
                raise InvalidArgument(f"checkpoint lacks a compatible '{name}' parameter set")
            ps.restore(sets[name])

    @property
    def num_allocations(self) -> int:
        return self.K ** self.L

    # -- features ---------------------------------------------------------

    def tokens(self, state: HighState) -> np.ndarray:
        K, L = self.K, self.L
        tok = np.zeros((K + L, self.token_dim))
        tok[:K, 0:3] = state.user_positions / POSITION_SCALE
        tok[K:, 0:3] = state.segment_centroids / POSITION_SCALE
        tok[K:, 3:6] = state.focal_points / POSITION_SCALE
        tok[:K, 6] = 1.0
        tok[K:, 7] = 1.0
        tok[np.arange(K + L), 8 + np.arange(K + L)] = 1.0
        return tok

    def _forward(self, states: list[HighState]):
        tok = np.stack([self.tokens(s) for s in states])
        pooled, t_tape = attention_forward(self.trunk, tok)
        q_out, q_tape = mlp_forward(self.q_head, pooled)
        logits, p_tape = mlp_forward(self.pi_head, pooled)
        return pooled, q_out, logits, (t_tape, q_tape, p_tape)

    def _split(self, q_out: np.ndarray):
        K, L = self.K, self.L
        q = q_out[..., : L * K].reshape(q_out.shape[:-1] + (L, K))
        v = q_out[..., L * K: L * K + K]
        c = q_out[..., -1]
        return q, v, c

    def _q_normalized(self, q_out: np.ndarray, allocs: np.ndarray) -> np.ndarray:
        q, v, c = self._split(q_out)
        served = np.zeros((len(allocs), self.K))
        served[np.arange(len(allocs))[:, None], allocs] = 1.0
        return c + q[np.arange(self.L), allocs].sum(axis=1) + served @ v

    def q_values(self, state: HighState, allocs: np.ndarray, standardized: bool = False) -> np.ndarray:
        """Q estimates for each allocation row.

        Args:
            state: Observed high-level state.
            allocs: Allocation rows.
            standardized: Return values in units of the running return
                standard deviation around the running mean instead of raw
                return units.
        """
        _, q_out, _, _ = self._forward([state])
        qn = self._q_normalized(q_out[0], np.atleast_2d(allocs))
        if standardized:
            return qn
        return self.q_norm["mean"][0] + self.q_norm["std"][0] * qn

    def proposal_logits(self, state: HighState) -> np.ndarray:
        _, _, logits, _ = self._forward([state])
        return logits[0].reshape(self.L, self.K)

    def proposal_logp(self, state: HighState, allocs: np.ndarray) -> np.ndarray:
        logits = self.proposal_logits(state)
        logp = logits - np.log(np.exp(logits - logits.max(1, keepdims=True)).sum(1, keepdims=True)) - logits.max(1, keepdims=True)
        return logp[np.arange(self.L), np.atleast_2d(allocs)].sum(axis=1)


def candidate_set(policy: AllocPolicy, state: HighState, rng: np.random.Generator | None) -> np.ndarray:
    """All allocations if few enough, otherwise distinct samples from the proposal head."""
    K, L = policy.K, policy.L
    if K ** L <= policy.cfg.enum_cutoff:
        return all_allocations(K, L)
    if rng is None:
        raise InvalidArgument("sampling candidates needs an rng")
    probs = _softmax(policy.proposal_logits(state))
    draws = np.stack([rng.choice(K, size=policy.cfg.proposal_count, p=probs[l]) for l in range(L)], axis=1)
    draws = np.vstack([probs.argmax(axis=1)[None], draws])
    return np.unique(draws, axis=0)


def score_allocations(policy: AllocPolicy, state: HighState, C: CompatMatrix | np.ndarray, episode: int,
                      rng: np.random.Generator | None = None, use_prior: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Score candidates by ``Q_H + alpha(episode) * sum_l C[b_l, l]``.

    ``Q_H`` is taken in standardized return units so the prior term, which
    lies in ``[-L, L]``, stays commensurate with it whatever the reward scale.

    Returns:
        ``(allocations, scores)`` with one row per candidate.
    """
    allocs = candidate_set(policy, state, rng)
    scores = policy.q_values(state, allocs, standardized=True)
    a = alpha(episode, policy.cfg.alpha_threshold) if use_prior else 0.0
    if a:
        Cm = C.C if isinstance(C, CompatMatrix) else np.asarray(C)
        scores = scores + a * compat_sum(Cm, allocs)
    return allocs, scores


def select_allocation(strategy: str, policy: AllocPolicy | None, state: HighState, C, episode: int,
                      rng: np.random.Generator | None = None, explore: bool = False, K: int | None = None,
                      L: int | None = None) -> tuple[tuple[int, ...], float]:
    """Pick an allocation for the next window.

    Args:
        strategy: One of :data:`STRATEGIES`.
        policy: The learned allocator; unused by ``random`` and ``no_allocator``.
        state: Observed high-level state.
        C: Compatibility matrix for ``state``.
        episode: Training episode index, drives the prior schedule.
        rng: Randomness for ``random`` and exploratory selection.
        explore: Sample from ``softmax(score / temperature)`` instead of argmax.
        K, L: Problem size when no policy is given.

    Returns:
        The allocation and the proposal-head log-probability of it (0 when
        no policy is involved).
    """
    if strategy not in STRATEGIES:
        raise InvalidArgument(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    K = policy.K if policy is not None else K
    L = policy.L if policy is not None else L
    if strategy == "no_allocator":
        return tuple(l % K for l in range(L)), 0.0
    if strategy == "random":
        if rng is None:
            raise InvalidArgument("random strategy needs an rng")
        return tuple(int(b) for b in rng.integers(0, K, size=L)), 0.0
    allocs, scores = score_allocations(policy, state, C, episode, rng, use_prior=strategy == "allocator")
    if explore:
        if rng is None:
            raise InvalidArgument("exploration needs an rng")
        p = _softmax(scores / policy.cfg.temperature)
        choice = allocs[rng.choice(len(allocs), p=p)]
    else:
        choice = allocs[int(np.argmax(scores))]
    alloc = tuple(int(b) for b in choice)
    return alloc, float(policy.proposal_logp(state, np.array([alloc]))[0])


@dataclass
class AllocLearner:
    """Replay buffer and update routine for an :class:`AllocPolicy`."""

    policy: AllocPolicy
    buffer: list = field(default_factory=list)

    def add(self, transitions: list[HighTransition]) -> None:
        self.buffer.extend(transitions)
        excess = len(self.buffer) - self.policy.cfg.buffer_size
        if excess > 0:
            del self.buffer[:excess]


def _update_target_stats(policy: AllocPolicy, rets: np.ndarray) -> None:
    """Fold ``rets`` into the running target statistics.

    The last Q layer is rescaled so existing predictions keep their value in
    return units.
    """
    qn = policy.q_norm.params
    n0 = qn["count"][0]
    n1 = n0 + len(rets)
    old_mean, old_std = qn["mean"][0], qn["std"][0]
    if n0 == 0:
        new_mean = rets.mean()
        m2 = ((rets - new_mean) ** 2).sum()
    else:
        new_mean = old_mean + (rets.sum() - len(rets) * old_mean) / n1
        m2 = old_std ** 2 * n0 + ((rets - old_mean) * (rets - new_mean)).sum()
    new_std = max(np.sqrt(max(m2 / n1, 0.0)), 1e-3)
    if n0 > 0:
        last = mlp_depth(policy.q_head) - 1
        W, b = policy.q_head.params[f"W{last}"], policy.q_head.params[f"b{last}"]
        ratio = old_std / new_std
        W *= ratio
        b *= ratio
        b[-1] += (old_mean - new_mean) / new_std
    qn["mean"][0], qn["std"][0], qn["count"][0] = new_mean, new_std, n1


def update_allocator(learner: AllocLearner, transitions: list[HighTransition], rng: np.random.Generator,
                     train_policy: bool = True) -> AllocStats:
    """Regress Q on observed window returns and improve the proposal head.

    New ``transitions`` join the replay buffer; Q regression samples from the
    whole buffer while the clipped surrogate uses only the new transitions.
    Transitions with a non-finite return are skipped and counted.
    """
    policy = learner.policy
    cfg = policy.cfg
    stats = AllocStats()
    good = [tr for tr in transitions if np.isfinite(tr.ret)]
    stats.skipped = len(transitions) - len(good)
    if not good:
        return stats
    stats.used = len(good)
    _update_target_stats(policy, np.array([tr.ret for tr in good]))
    learner.add(good)

    buf = learner.buffer
    mean, std = policy.q_norm["mean"][0], policy.q_norm["std"][0]
    q_losses = []
    for _ in range(cfg.q_steps):
        idx = rng.integers(0, len(buf), size=min(cfg.q_batch, len(buf)))
        batch = [buf[i] for i in idx]
        q_losses.append(_q_step(policy, batch, mean, std))
    stats.q_loss = float(np.mean(q_losses))

    if train_policy and len(good) > 1:
        rets = np.array([tr.ret for tr in good])
        adv = (rets - rets.mean()) / (rets.std() + 1e-8)
        losses = []
        for _ in range(cfg.policy_epochs):
            losses.append(_policy_step(policy, good, adv))
        stats.policy_loss = float(np.mean(losses))
    return stats


def _step_all(policy: AllocPolicy, tapes, g_q, g_pi) -> None:
    t_tape, q_tape, p_tape = tapes
    gq, d_pool_q = backward(q_tape, policy.q_head, g_q)
    gp, d_pool_p = backward(p_tape, policy.pi_head, g_pi)
    gt, _ = backward(t_tape, policy.trunk, d_pool_q + d_pool_p)
    if not all_finite(*gq.values(), *gp.values(), *gt.values()):
        return
    clip_grads(policy.cfg.max_grad_norm, gq, gp, gt)
    adam_step(policy.q_head, gq, policy.cfg.lr)
    adam_step(policy.pi_head, gp, policy.cfg.lr)
    adam_step(policy.trunk, gt, policy.cfg.lr)


def _q_step(policy: AllocPolicy, batch: list[HighTransition], mean: float, std: float) -> float:
    K, L = policy.K, policy.L
    _, q_out, logits, tapes = policy._forward([tr.state for tr in batch])
    allocs = np.array([tr.allocation for tr in batch])
    target = (np.array([tr.ret for tr in batch]) - mean) / std
    n = len(batch)
    q, v, c = policy._split(q_out)
    served = np.zeros((n, K))
    served[np.arange(n)[:, None], allocs] = 1.0
    pred = c + q[np.arange(n)[:, None], np.arange(L)[None, :], allocs].sum(axis=1) + (served * v).sum(axis=1)
    err = pred - target
    d = 2.0 * err / n
    g_q = np.zeros_like(q_out)
    gq_view = g_q[:, : L * K].reshape(n, L, K)
    gq_view[np.arange(n)[:, None], np.arange(L)[None, :], allocs] += d[:, None]
    g_q[:, L * K: L * K + K] = served * d[:, None]
    g_q[:, -1] = d
    _step_all(policy, tapes, g_q, np.zeros_like(logits))
    return float(np.mean(err * err))


def _policy_step(policy: AllocPolicy, batch: list[HighTransition], adv: np.ndarray) -> float:
    K, L = policy.K, policy.L
    eps = policy.cfg.clip_eps
    _, q_out, logits, tapes = policy._forward([tr.state for tr in batch])
    n = len(batch)
    lg = logits.reshape(n, L, K)
    probs = _softmax(lg)
    allocs = np.array([tr.allocation for tr in batch])
    logp = np.log(probs[np.arange(n)[:, None], np.arange(L)[None, :], allocs] + 1e-300).sum(axis=1)
    old = np.array([tr.logp for tr in batch])
    # executed allocations come from the Q scores, so they can be very
    # unlikely under the head; bound the ratio and cap it for negative
    # advantages so one such sample cannot blow up the step
    ratio = np.exp(np.clip(logp - old, -LOG_RATIO_CAP, LOG_RATIO_CAP))
    surr = np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)
    unclipped = ratio * adv <= np.clip(ratio, 1 - eps, 1 + eps) * adv
    capped = (adv < 0) & (ratio > DUAL_CLIP)
    surr = np.where(capped, DUAL_CLIP * adv, surr)
    d_logp = -np.where(unclipped & ~capped, adv * ratio, 0.0) / n
    onehot = np.zeros_like(probs)
    onehot[np.arange(n)[:, None], np.arange(L)[None, :], allocs] = 1.0
    g_logits = (d_logp[:, None, None] * (onehot - probs)).reshape(n, L * K)
    _step_all(policy, tapes, np.zeros_like(q_out), g_logits)
    return float(-surr.mean())
