"""Brute-force references: exhaustive allocation search and trace replay.

The allocation search enumerates every assignment of segments to users and
grid-searches focal points inside each segment's feasible box. A user served
by one or two segments is searched exactly over the grid (pairs through an
outer sum of the two field tables); larger groups fall back to coordinate
ascent. A local pass on a finer grid around the best point follows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .allocator import all_allocations
from .channel import other_path, tile_coefficients
from .environment import EnvConfig, HmaEnv, Scene
from .errors import BudgetExceeded, InvalidArgument, InvalidInput, ReplayDivergence
from .geometry import FeasibleBox, sample_box, tile_normals

log = logging.getLogger(__name__)

MAX_ALLOCATIONS = 256
REPLAY_RTOL = 1e-9
_CHUNK = 2048
_PAIR_CHUNK = 4_000_000


@dataclass
class OracleResult:
    allocation: tuple[int, ...]
    focals: np.ndarray
    reward_mw: float
    evaluations: int = 0
    per_allocation: dict = field(default_factory=dict)

    def overlay(self) -> dict:
        """Best configuration as a TOML-ready table."""
        return {
            "oracle": {
                "allocation": list(self.allocation),
                "focals": [[float(x) for x in f] for f in self.focals],
                "reward_mw": float(self.reward_mw),
            }
        }


class _Budget:
    def __init__(self, cap: int | None):
        self.cap = cap
        self.used = 0

    def spend(self, n: int, best) -> None:
        self.used += int(n)
        if self.cap is not None and self.used > self.cap:
            raise BudgetExceeded(f"oracle exceeded its budget of {self.cap} evaluations", best)


def segment_field_table(scene: Scene, seg: int, focals: np.ndarray, users: np.ndarray) -> np.ndarray:
    """Field ``(M, K)`` of one segment for ``M`` candidate focal points."""
    tiles = scene.segment_tiles[seg]
    focals = np.atleast_2d(np.asarray(focals, dtype=np.float64))
    users = np.atleast_2d(np.asarray(users, dtype=np.float64))
    n = len(tiles)
    out = np.empty((len(focals), len(users)), dtype=complex)
    for start in range(0, len(focals), _CHUNK):
        f = focals[start:start + _CHUNK]
        normals, _ = tile_normals(tiles[None, :, :], f[:, None, :], scene.ap)
        flat_tiles = np.broadcast_to(tiles, normals.shape).reshape(-1, 3)
        h = tile_coefficients(flat_tiles, normals.reshape(-1, 3), scene.ap, users, scene.params)
        out[start:start + len(f)] = h.reshape(len(f), n, -1).sum(axis=1)
    return out


def local_grid(center: np.ndarray, box: FeasibleBox, half_width: float, step: float) -> np.ndarray:
    """Grid of spacing ``step`` within ``half_width`` of ``center``, clipped to ``box``."""
    lo = np.maximum(center - half_width, box.lo)
    hi = np.minimum(center + half_width, box.hi)
    return sample_box(FeasibleBox(lo, hi), step)


def _best_group(tables: list[np.ndarray], base: complex, budget: _Budget, best) -> tuple[list[int], float]:
    """Maximize ``|base + sum_i tables[i][j_i]|**2`` over one index per table."""
    if not tables:
        return [], abs(base) ** 2
    if len(tables) == 1:
        budget.spend(len(tables[0]), best)
        p = np.abs(base + tables[0]) ** 2
        j = int(np.argmax(p))
        return [j], float(p[j])
    if len(tables) == 2:
        a, b = tables
        budget.spend(len(a) * len(b), best)
        best_p, best_ij = -1.0, (0, 0)
        rows = max(1, _PAIR_CHUNK // max(len(b), 1))
        for start in range(0, len(a), rows):
            p = np.abs(base + a[start:start + rows, None] + b[None, :]) ** 2
            flat = int(np.argmax(p))
            i, j = divmod(flat, len(b))
            if p[i, j] > best_p:
                best_p, best_ij = float(p[i, j]), (start + i, j)
        return list(best_ij), best_p
    # coordinate ascent from each table's individually best entry
    idx = [int(np.argmax(np.abs(t))) for t in tables]
    budget.spend(sum(len(t) for t in tables), best)
    value = abs(base + sum(t[i] for t, i in zip(tables, idx))) ** 2
    for _ in range(10):
        improved = False
        for g, t in enumerate(tables):
            rest = base + sum(tt[i] for h, (tt, i) in enumerate(zip(tables, idx)) if h != g)
            budget.spend(len(t), best)
            p = np.abs(rest + t) ** 2
            j = int(np.argmax(p))
            if p[j] > value * (1 + 1e-12):
                idx[g], value, improved = j, float(p[j]), True
        if not improved:
            break
    return idx, float(value)


def _search(scene: Scene, users: np.ndarray, alloc: tuple[int, ...], candidates: list[np.ndarray],
            budget: _Budget, best) -> tuple[np.ndarray, float]:
    """Best focal points for ``alloc`` given per-segment candidate sets."""
    K = len(users)
    L = scene.L
    direct = other_path(scene.ap, users, scene.params)
    focals = np.zeros((L, 3))
    total_mw = 0.0
    pt = scene.params.tx_power_mw
    for k in range(K):
        segs = [l for l in range(L) if alloc[l] == k]
        tables = []
        for l in segs:
            budget.spend(len(candidates[l]), best)
            tables.append(segment_field_table(scene, l, candidates[l], users[k])[:, 0])
        idx, p = _best_group(tables, direct[k], budget, best)
        for l, j in zip(segs, idx):
            focals[l] = candidates[l][j]
        total_mw += pt * p
    return focals, total_mw


def best_allocation_exhaustive(scene: Scene, users, focal_grid_step: float = 0.5, refine_step: float | None = 0.1,
                               max_evaluations: int | None = 200_000_000) -> OracleResult:
    """Best allocation and focal points for fixed user positions.

    Args:
        scene: Built geometry and channel.
        users: ``(K, 3)`` true user positions.
        focal_grid_step: Spacing of the global grid over each feasible box.
        refine_step: Spacing of the local pass around the best grid point,
            spanning one global step either side; ``None`` skips it.
        max_evaluations: Cap on candidate evaluations; exceeding it raises
            :class:`BudgetExceeded` carrying the best result so far.

    Returns:
        The best configuration found. The reward is the sum of linear
        received power over users in mW.
    """
    users = np.atleast_2d(np.asarray(users, dtype=np.float64))
    if users.ndim != 2 or users.shape[1] != 3 or not np.all(np.isfinite(users)):
        raise InvalidArgument(f"users must be a finite (K, 3) array, got shape {users.shape}")
    if not focal_grid_step > 0 or (refine_step is not None and not refine_step > 0):
        raise InvalidArgument("grid steps must be positive")
    K, L = len(users), scene.L
    if K ** L > MAX_ALLOCATIONS:
        raise InvalidArgument(f"K**L = {K ** L} exceeds the oracle limit of {MAX_ALLOCATIONS}")
    budget = _Budget(max_evaluations)
    grids = [sample_box(b, focal_grid_step) for b in scene.boxes]
    best: OracleResult | None = None
    per_alloc = {}
    for row in all_allocations(K, L):
        alloc = tuple(int(b) for b in row)
        focals, reward = _search(scene, users, alloc, grids, budget, best)
        if refine_step is not None:
            local = [local_grid(f, b, focal_grid_step, refine_step) for f, b in zip(focals, scene.boxes)]
            # keep the coarse optimum in the candidate set so refinement never loses ground
            local = [np.vstack([f[None], g]) for f, g in zip(focals, local)]
            f2, r2 = _search(scene, users, alloc, local, budget, best)
            if r2 >= reward:
                focals, reward = f2, r2
        per_alloc[alloc] = reward
        if best is None or reward > best.reward_mw:
            best = OracleResult(alloc, focals, reward)
        best.evaluations = budget.used
        best.per_allocation = dict(per_alloc)
    log.debug("oracle used %d evaluations", budget.used)
    return best


def configuration_reward(scene: Scene, users, allocation, focals) -> float:
    """Sum of per-user mW for one explicit configuration."""
    return float(scene.powers(np.asarray(focals, dtype=np.float64), users, allocation).sum())


# -- replay -----------------------------------------------------------------


def _floats(text: str) -> np.ndarray:
    return np.array([float(x) for x in text.split(";")]) if text else np.zeros(0)


def _close(a: float, b: float, rtol: float) -> bool:
    return a == b or abs(a - b) <= rtol * max(abs(a), abs(b))


def replay(trace, scenario, rtol: float = REPLAY_RTOL) -> list[float]:
    """Re-simulate a logged episode and check every logged reward.

    Args:
        trace: Path to a trace CSV or its rows as dicts.
        scenario: The scenario the trace was recorded on.
        rtol: Relative tolerance on system and learner rewards.

    Returns:
        Recomputed system rewards in mW, one per step.

    Raises:
        InvalidInput: Empty trace, wrong schema or scenario mismatch.
        ReplayDivergence: First step whose recomputed reward differs.
    """
    from .harness import TRACE_COLUMNS, TRACE_SCHEMA, _parse_seed_label, read_csv

    rows = read_csv(trace) if isinstance(trace, (str, Path)) else list(trace)
    if not rows:
        raise InvalidInput("trace is empty")
    missing = [c for c in TRACE_COLUMNS if c not in rows[0]]
    if missing:
        raise InvalidInput(f"trace lacks column(s) {missing}")
    try:
        first = rows[0]
        if int(first["schema"]) != TRACE_SCHEMA:
            raise InvalidInput(f"trace schema {first['schema']} is not {TRACE_SCHEMA}")
        if first["scenario_hash"] != scenario.content_hash():
            raise InvalidInput(f"trace scenario hash {first['scenario_hash']} does not match {scenario.content_hash()}")
        env_seed = _parse_seed_label(first["env_seed"])
        cfg: EnvConfig = replace(scenario.env, episode_len=int(first["episode_len"]), mobility=bool(int(first["mobility"])),
                                 loc_error_sigma=float(first["loc_error_sigma"]))
        broadcast = first["allocation"] == "all"
    except (KeyError, ValueError) as exc:
        if isinstance(exc, InvalidInput):
            raise
        raise InvalidInput(f"malformed trace header: {exc}") from None

    env = HmaEnv(scenario.build(), cfg, broadcast=broadcast)
    env.reset(env_seed)
    out = []
    for i, row in enumerate(rows):
        try:
            t = int(row["t"])
            actions = _floats(row["actions"]).reshape(env.L, 3)
            logged_sys = float(row["system_reward_mw"])
            logged_learner = float(row["learner_reward"])
            alloc = None if row["allocation"] == "all" else tuple(int(b) for b in row["allocation"].split("|"))
        except (KeyError, ValueError) as exc:
            raise InvalidInput(f"trace row {i}: {exc}") from None
        if t != env.t:
            raise InvalidInput(f"trace row {i} has t={t}, expected {env.t}")
        if env.at_boundary and not broadcast:
            env.set_allocation(alloc)
        res = env.step(actions)
        if not _close(logged_sys, res.system_reward, rtol):
            raise ReplayDivergence(t, logged_sys, res.system_reward)
        if not _close(logged_learner, res.learner_reward, rtol):
            raise ReplayDivergence(t, logged_learner, res.learner_reward)
        out.append(res.system_reward)
    return out

