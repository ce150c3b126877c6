"""Two-level reflector control environment.

A high-level controller assigns each of ``L`` segments to one of ``K`` users
every ``T`` steps; between those boundaries each segment agent nudges its
focal point by at most ``delta_max`` per axis. Users wander with a constant
heading and bounce off the coverage-region walls. Observations carry
localization noise while the channel always sees true positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .channel import ChannelParams, mw_to_dbm, other_path, power_mw, tile_coefficients
from .errors import InvalidAction, InvalidArgument, ProtocolViolation
from .geometry import FeasibleBox, TileGrid, clip_to_box, tile_normals

LOW_OBS_DIM = 9


@dataclass(frozen=True)
class EnvConfig:
    """Episode and dynamics settings.

    Args:
        K: Number of users.
        T: Steps an allocation stays fixed.
        delta_max: Largest focal displacement per axis and step, metres.
        episode_len: Steps per episode; a multiple of ``T``.
        ue_lo, ue_hi: Opposite corners of the horizontal coverage rectangle.
        user_height: Fixed user height, metres.
        mobility: Whether users move.
        mobility_step: Distance a user walks per move, metres.
        mobility_period: Steps between moves.
        loc_error_sigma: Std of horizontal localization noise, metres.
        reward_exponent: Path-length exponent ``n`` of the shaped reward.
        focal_init_mean: Mean of the initial focal points.
        focal_init_cov_scale: Initial focal covariance is this times identity.
    """

    K: int = 2
    T: int = 10
    delta_max: float = 0.5
    episode_len: int = 100
    ue_lo: tuple[float, float] = (-4.5, -4.5)
    ue_hi: tuple[float, float] = (4.5, 4.5)
    user_height: float = 1.5
    mobility: bool = True
    mobility_step: float = 0.3
    mobility_period: int = 2
    loc_error_sigma: float = 0.0
    reward_exponent: int = 0
    focal_init_mean: tuple[float, float, float] = (0.0, 0.0, 1.5)
    focal_init_cov_scale: float = 2.5

    def __post_init__(self):
        if self.K < 1:
            raise InvalidArgument(f"K must be >= 1, got {self.K}")
        if self.T < 1:
            raise InvalidArgument(f"T must be >= 1, got {self.T}")
        if self.episode_len < 1 or self.episode_len % self.T:
            raise InvalidArgument(f"episode_len={self.episode_len} must be a positive multiple of T={self.T}")
        if not self.delta_max > 0:
            raise InvalidArgument(f"delta_max must be positive, got {self.delta_max}")
        if self.mobility_period < 1 or self.mobility_step < 0:
            raise InvalidArgument("mobility_period must be >= 1 and mobility_step >= 0")
        if self.loc_error_sigma < 0:
            raise InvalidArgument(f"loc_error_sigma must be >= 0, got {self.loc_error_sigma}")
        if self.reward_exponent not in (0, 1, 2, 3, 4):
            raise InvalidArgument(f"reward_exponent must be in 0..4, got {self.reward_exponent}")
        if self.focal_init_cov_scale < 0:
            raise InvalidArgument("focal_init_cov_scale must be >= 0")
        if any(hi < lo for lo, hi in zip(self.ue_lo, self.ue_hi)):
            raise InvalidArgument(f"empty ue region {self.ue_lo}..{self.ue_hi}")


@dataclass(frozen=True)
class Scene:
    """Built geometry: the AP, every segment with its tiles, and feasible boxes."""

    ap: np.ndarray
    segments: tuple[tuple[TileGrid, int], ...]
    boxes: tuple[FeasibleBox, ...]
    params: ChannelParams
    room: FeasibleBox

    @property
    def L(self) -> int:
        return len(self.segments)

    @cached_property
    def segment_tiles(self) -> list[np.ndarray]:
        return [g.segment_tiles(s) for g, s in self.segments]

    @cached_property
    def centroids(self) -> np.ndarray:
        return np.array([t.mean(axis=0) for t in self.segment_tiles])

    @property
    def num_tiles(self) -> int:
        return sum(len(t) for t in self.segment_tiles)

    @cached_property
    def _stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tiles = np.vstack(self.segment_tiles)
        owner = np.concatenate([np.full(len(t), l) for l, t in enumerate(self.segment_tiles)])
        onehot = (owner[None, :] == np.arange(self.L)[:, None]).astype(np.float64)
        return tiles, owner, onehot

    def field(self, focals: np.ndarray, users: np.ndarray) -> np.ndarray:
        """``S[l, k]`` for every segment and user, all tiles in one pass."""
        tiles, owner, onehot = self._stacked
        focals = np.asarray(focals, dtype=np.float64)
        normals, _ = tile_normals(tiles, focals[owner], self.ap)
        h = tile_coefficients(tiles, normals, self.ap, np.atleast_2d(users), self.params)
        return onehot @ h

    def user_powers(self, field: np.ndarray, users: np.ndarray, allocation: Sequence[int] | None) -> np.ndarray:
        """Per-user mW; ``allocation=None`` lets every segment serve every user."""
        if allocation is None:
            total = field.sum(axis=0)
        else:
            mask = np.zeros(field.shape, dtype=bool)
            mask[np.arange(self.L), np.asarray(allocation, dtype=int)] = True
            total = np.where(mask, field, 0.0).sum(axis=0)
        return power_mw(total + other_path(self.ap, users, self.params), self.params)

    def powers(self, focals, users, allocation) -> np.ndarray:
        users = np.atleast_2d(np.asarray(users, dtype=np.float64))
        return self.user_powers(self.field(np.asarray(focals, dtype=np.float64), users), users, allocation)


@dataclass(frozen=True)
class HighState:
    user_positions: np.ndarray
    segment_centroids: np.ndarray
    focal_points: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.user_positions.ravel(), self.segment_centroids.ravel(), self.focal_points.ravel()])


@dataclass(frozen=True)
class LowObs:
    assigned_user: np.ndarray
    own_centroid: np.ndarray
    own_focal: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.assigned_user, self.own_centroid, self.own_focal])


@dataclass(frozen=True)
class FocalState:
    focal: np.ndarray
    box: FeasibleBox
    assigned_user: int


@dataclass
class StepResult:
    """Outcome of one environment step.

    ``rewards`` are the per-segment learner rewards, ``system_reward`` is the
    linear sum of received powers in mW and ``learner_reward`` is the
    compressed mean-RSSI signal.
    """

    obs: list[LowObs]
    rewards: np.ndarray
    system_reward: float
    done: bool
    learner_reward: float = 0.0
    user_mw: np.ndarray = field(default_factory=lambda: np.zeros(0))
    user_dbm: np.ndarray = field(default_factory=lambda: np.zeros(0))


def observe_with_error(true_pos, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add zero-mean Gaussian noise of std ``sigma`` to the horizontal coordinates."""
    if sigma < 0:
        raise InvalidArgument(f"sigma must be >= 0, got {sigma}")
    pos = np.array(true_pos, dtype=np.float64)
    if sigma == 0:
        return pos
    noise = rng.normal(0.0, sigma, size=pos.shape[:-1] + (2,))
    pos[..., :2] += noise
    return pos


def shape_reward(rssi_mw, distance, n: int):
    """``rssi_mw * distance**-n``."""
    distance = np.asarray(distance, dtype=np.float64)
    if np.any(distance <= 0):
        raise InvalidArgument(f"distance must be positive, got {distance}")
    if n not in (0, 1, 2, 3, 4):
        raise InvalidArgument(f"n must be in 0..4, got {n}")
    return rssi_mw * distance ** (-float(n))


def compress_dbm(dbm):
    """Map dBm onto a learner-friendly scale: -100 dBm -> 0, each 10 dB -> 1."""
    return (np.asarray(dbm, dtype=np.float64) + 100.0) / 10.0


def learner_reward_from_mw(mw) -> float:
    return float(compress_dbm(mw_to_dbm(mw)))


class HmaEnv:
    """Stepwise two-level environment over a built :class:`Scene`.

    Args:
        scene: Geometry, channel and feasible boxes.
        config: Episode settings.
        broadcast: If true every segment serves every user and allocations
            are not used; this is the centralized no-allocation setup.
    """

    def __init__(self, scene: Scene, config: EnvConfig, broadcast: bool = False):
        self.scene = scene
        self.cfg = config
        self.broadcast = broadcast
        self.K = config.K
        self.L = scene.L
        self.t = 0
        self._active = False
        self.allocation: tuple[int, ...] | None = None
        self.users = np.zeros((self.K, 3))
        self.focals = np.zeros((self.L, 3))
        self.observed = np.zeros((self.K, 3))

    # -- episode control -------------------------------------------------

    def reset(self, seed, users=None) -> tuple[HighState, list[LowObs]]:
        """Start an episode.

        Args:
            seed: Anything ``np.random.SeedSequence`` accepts.
            users: Optional ``(K, 2)`` or ``(K, 3)`` start positions that
                replace the sampled ones; the height is always
                ``user_height``.
        """
        cfg = self.cfg
        lo = np.asarray(cfg.ue_lo, dtype=np.float64)
        hi = np.asarray(cfg.ue_hi, dtype=np.float64)
        if np.any(hi < lo):
            raise InvalidArgument(f"empty ue region {lo}..{hi}")
        ss = np.random.SeedSequence(seed)
        users_rng, move_rng, noise_rng, focal_rng = [np.random.default_rng(s) for s in ss.spawn(4)]
        self._noise_rng = noise_rng

        xy = users_rng.uniform(lo, hi, size=(self.K, 2))
        if users is not None:
            given = np.asarray(users, dtype=np.float64)
            if given.ndim != 2 or given.shape[0] != self.K or given.shape[1] not in (2, 3) or not np.all(np.isfinite(given)):
                raise InvalidArgument(f"users must be a finite ({self.K}, 2) or ({self.K}, 3) array, got shape {given.shape}")
            xy = given[:, :2].copy()
        self.users = np.column_stack([xy, np.full(self.K, cfg.user_height)])
        heading = move_rng.uniform(-np.pi, np.pi, size=self.K)
        self.headings = np.column_stack([np.cos(heading), np.sin(heading)])

        mean = np.asarray(cfg.focal_init_mean, dtype=np.float64)
        draws = mean + np.sqrt(cfg.focal_init_cov_scale) * focal_rng.standard_normal((self.L, 3))
        self.focals = np.array([clip_to_box(d, b) for d, b in zip(draws, self.scene.boxes)])

        self.t = 0
        self._active = True
        self.allocation = tuple(l % self.K for l in range(self.L)) if self.broadcast else None
        self._observe()
        return self.high_state(), self.low_obs()

    def set_allocation(self, alloc: Sequence[int]) -> None:
        if not self._active:
            raise ProtocolViolation("set_allocation called outside an active episode")
        if self.t % self.cfg.T:
            raise ProtocolViolation(f"allocation change at t={self.t} is not a multiple of T={self.cfg.T}")
        alloc = tuple(int(b) for b in alloc)
        if len(alloc) != self.L or any(not 0 <= b < self.K for b in alloc):
            raise InvalidArgument(f"allocation {alloc} must list {self.L} user ids in 0..{self.K - 1}")
        self.allocation = alloc

    @property
    def at_boundary(self) -> bool:
        return self.t % self.cfg.T == 0

    @property
    def done(self) -> bool:
        return not self._active

    # -- observations ----------------------------------------------------

    def _observe(self):
        self.observed = observe_with_error(self.users, self.cfg.loc_error_sigma, self._noise_rng)

    def high_state(self) -> HighState:
        return HighState(self.observed.copy(), self.scene.centroids.copy(), self.focals.copy())

    def low_obs(self) -> list[LowObs]:
        alloc = self.allocation if self.allocation is not None else tuple(l % self.K for l in range(self.L))
        cents = self.scene.centroids
        return [LowObs(self.observed[alloc[l]].copy(), cents[l].copy(), self.focals[l].copy()) for l in range(self.L)]

    def focal_states(self) -> list[FocalState]:
        alloc = self.allocation or (0,) * self.L
        return [FocalState(self.focals[l].copy(), self.scene.boxes[l], alloc[l]) for l in range(self.L)]

    # -- dynamics --------------------------------------------------------

    def clamp_actions(self, actions) -> np.ndarray:
        a = np.asarray(actions, dtype=np.float64)
        if a.shape != (self.L, 3):
            raise InvalidAction(f"expected actions of shape ({self.L}, 3), got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidAction(f"non-finite action {a.tolist()}")
        d = self.cfg.delta_max
        return np.clip(a, -d, d)

    def shaping_distances(self, users: np.ndarray) -> np.ndarray:
        """AP -> segment centroid -> assigned user path length per segment."""
        c = self.scene.centroids
        alloc = np.asarray(self.allocation)
        return np.linalg.norm(c - self.scene.ap, axis=1) + np.linalg.norm(users[alloc] - c, axis=1)

    def step(self, actions) -> StepResult:
        if not self._active:
            raise ProtocolViolation("step called on a finished episode; call reset first")
        if self.allocation is None:
            raise ProtocolViolation("no allocation set for this window")
        a = self.clamp_actions(actions)
        boxes = self.scene.boxes
        self.focals = np.array([clip_to_box(f + da, b) for f, da, b in zip(self.focals, a, boxes)])

        field = self.scene.field(self.focals, self.users)
        alloc = None if self.broadcast else self.allocation
        user_mw = self.scene.user_powers(field, self.users, alloc)
        user_dbm = mw_to_dbm(user_mw)
        system = float(user_mw.sum())
        learner = learner_reward_from_mw(user_mw.mean())
        if self.broadcast:
            rewards = np.full(self.L, learner)
        else:
            served = user_mw[np.asarray(self.allocation)]
            shaped = shape_reward(served, self.shaping_distances(self.users), self.cfg.reward_exponent)
            rewards = compress_dbm(mw_to_dbm(shaped))

        self.t += 1
        if self.cfg.mobility and self.t % self.cfg.mobility_period == 0:
            self._move_users()
        done = self.t >= self.cfg.episode_len
        if done:
            self._active = False
        self._observe()
        return StepResult(self.low_obs(), np.atleast_1d(rewards), system, done, learner, user_mw, np.atleast_1d(user_dbm))

    def _move_users(self):
        lo = np.asarray(self.cfg.ue_lo, dtype=np.float64)
        hi = np.asarray(self.cfg.ue_hi, dtype=np.float64)
        xy = self.users[:, :2] + self.cfg.mobility_step * self.headings
        for _ in range(4):
            below, above = xy < lo, xy > hi
            if not (below.any() or above.any()):
                break
            xy = np.where(below, 2 * lo - xy, xy)
            xy = np.where(above, 2 * hi - xy, xy)
            self.headings = np.where(below | above, -self.headings, self.headings)
        xy = np.clip(xy, lo, hi)
        self.users = np.column_stack([xy, self.users[:, 2]])
