"""Training, evaluation and sweep orchestration.

Every CSV row carries the build id, the scenario hash and the run seed, so
rows from different runs never collide silently. All randomness derives from
the run seed through :class:`numpy.random.SeedSequence`; identical inputs
reproduce identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .allocator import (
    STRATEGIES,
    AllocConfig,
    AllocLearner,
    AllocPolicy,
    HighTransition,
    compat,
    select_allocation,
    update_allocator,
)
from .approximator import load_checkpoint, save_checkpoint
from .channel import dbm_to_mw, mw_to_dbm
from .environment import EnvConfig, HighState, HmaEnv
from .errors import InvalidArgument, InvalidCheckpoint, NumericFailure, UpdateRejected
from .mappo import PpoConfig, Rollout, act, discounted_return, make_actor, make_critic, update, values
from .scenario import Scenario

log = logging.getLogger(__name__)

TRAIN_LOG_SCHEMA = 1
EVAL_SCHEMA = 1
TRACE_SCHEMA = 1
SWEEP_SCHEMA = 1
OBS_SCALE = 0.2

SWEEP_VALUES = {
    "aperture": (5, 7, 9, 11),
    "reward_exponent": (0, 1, 2, 3, 4),
    "loc_error": (0.0, 0.1, 0.3, 0.5, 1.0, 2.0, 3.0),
    "users": (2, 4),
}

# reduced-width preset for desk-scale runs, merged into a scenario's [training] table
DESK_TRAINING = {"ppo": {"hidden": [64, 64]}}

# stream labels for SeedSequence([seed, label, ...])
_INIT, _TRAIN_RNG, _TRAIN_ENV, _EVAL_ENV, _EVAL_RNG = range(5)


def build_id() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:10]}"


@dataclass(frozen=True)
class TrainConfig:
    """Learning settings shared by every strategy."""

    ppo: PpoConfig = field(default_factory=PpoConfig)
    alloc: AllocConfig = field(default_factory=AllocConfig)
    checkpoint_every: int = 50

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        """Build from a ``[training]`` table with optional ``ppo``/``alloc`` sub-tables."""
        d = dict(d or {})
        unknown = set(d) - {"ppo", "alloc", "checkpoint_every"}
        if unknown:
            raise InvalidArgument(f"training: unknown key(s) {sorted(unknown)}")
        kw = {}
        for key, klass in (("ppo", PpoConfig), ("alloc", AllocConfig)):
            sub = dict(d.get(key, {}))
            allowed = {f.name for f in fields(klass)}
            bad = set(sub) - allowed
            if bad:
                raise InvalidArgument(f"training.{key}: unknown key(s) {sorted(bad)}")
            if "hidden" in sub:
                sub["hidden"] = tuple(int(h) for h in sub["hidden"])
            kw[key] = klass(**sub)
        if "checkpoint_every" in d:
            kw["checkpoint_every"] = int(d["checkpoint_every"])
        return cls(**kw)

    def to_dict(self) -> dict:
        ppo = asdict(self.ppo)
        ppo["hidden"] = list(ppo["hidden"])
        return {"ppo": ppo, "alloc": asdict(self.alloc), "checkpoint_every": self.checkpoint_every}


def config_for(scenario: Scenario, overrides: dict | None = None) -> TrainConfig:
    merged = json.loads(json.dumps(scenario.training))
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            merged.setdefault(key, {}).update(value)
        else:
            merged[key] = value
    return TrainConfig.from_dict(merged)


def low_features(obs: np.ndarray) -> np.ndarray:
    """Re-express ``[user, centroid, focal]`` rows as relative offsets.

    The map is linear and invertible, so the features carry exactly the
    information of the observation; offsets simply make "steer toward the
    user" a short path for the network.
    """
    user, cent, focal = obs[..., 0:3], obs[..., 3:6], obs[..., 6:9]
    return np.concatenate([user - focal, user - cent, focal - cent], axis=-1)


def _seed_label(seq) -> str:
    return "-".join(str(int(s)) for s in seq)


def _parse_seed_label(label: str) -> list[int]:
    return [int(s) for s in label.split("-")]


class Trainer:
    """Networks, optimizer state and randomness of one training run.

    Args:
        scenario: Scene and episode settings.
        strategy: One of :data:`~hmarl.allocator.STRATEGIES`.
        seed: Root of every random stream in the run.
        cfg: Learning settings.
    """

    def __init__(self, scenario: Scenario, strategy: str, seed: int, cfg: TrainConfig | None = None):
        if strategy not in STRATEGIES:
            raise InvalidArgument(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        self.scenario = scenario
        self.scene = scenario.build()
        self.strategy = strategy
        self.seed = int(seed)
        self.cfg = cfg or config_for(scenario)
        self.broadcast = strategy == "no_allocator"
        self.K = scenario.env.K
        self.L = self.scene.L
        self.delta = scenario.env.delta_max
        self.state_dim = 3 * self.K + 6 * self.L
        init_rng = np.random.default_rng(np.random.SeedSequence([self.seed, _INIT]))
        self.rng = np.random.default_rng(np.random.SeedSequence([self.seed, _TRAIN_RNG]))
        hidden = self.cfg.ppo.hidden
        if self.broadcast:
            self.obs_dim, self.act_dim, self.critic_dim = self.state_dim, 3 * self.L, self.state_dim
        else:
            self.obs_dim, self.act_dim, self.critic_dim = 9, 3, self.state_dim + 9
        n_actors = 1 if (self.broadcast or self.cfg.ppo.shared_actor) else self.L
        self.actors = [make_actor(self.obs_dim, self.act_dim, self.delta, init_rng, hidden) for _ in range(n_actors)]
        self.actor = self.actors[0]
        self.critic = make_critic(self.critic_dim, init_rng, hidden)
        self.policy: AllocPolicy | None = None
        self.learner: AllocLearner | None = None
        if strategy in ("allocator", "no_compat"):
            self.policy = AllocPolicy(self.K, self.L, self.cfg.alloc, init_rng)
            self.learner = AllocLearner(self.policy)
        self.episode = 0
        self.scenario_hash = scenario.content_hash()
        self.build = build_id()

    # -- inputs -----------------------------------------------------------

    def _inputs(self, env: HmaEnv) -> tuple[np.ndarray, np.ndarray]:
        state = env.high_state().flatten()
        if self.broadcast:
            x = state[None] * OBS_SCALE
            return x, x.copy()
        obs = low_features(np.array([o.as_array() for o in env.low_obs()]))
        crit = np.hstack([np.repeat(state[None], self.L, axis=0), obs])
        return obs * OBS_SCALE, crit * OBS_SCALE

    def _act(self, obs: np.ndarray, mode: str):
        if len(self.actors) == 1:
            return act(self.actor, obs, mode, self.rng, self.delta)
        parts = [act(actor, o[None], mode, self.rng, self.delta) for actor, o in zip(self.actors, obs)]
        return tuple(np.concatenate(x) for x in zip(*parts))

    def _update_low(self, rollout: Rollout):
        if len(self.actors) == 1:
            return update(self.actor, self.critic, rollout, self.cfg.ppo, self.rng, self.delta).as_dict()
        # rows are ordered (step, agent); each actor trains on its own rows
        data = rollout.flat()
        n = len(self.actors)
        stats = [update(actor, self.critic, {k: v[l::n] for k, v in data.items()}, self.cfg.ppo, self.rng, self.delta)
                 for l, actor in enumerate(self.actors)]
        return {k: float(np.mean([st.as_dict()[k] for st in stats])) for k in stats[0].as_dict()}

    def _to_env_actions(self, a: np.ndarray) -> np.ndarray:
        return a.reshape(self.L, 3)

    def choose_allocation(self, env: HmaEnv, episode: int, explore: bool) -> tuple[tuple[int, ...], float]:
        state = env.high_state()
        C = compat(state.user_positions, state.segment_centroids, self.scene.ap, self.cfg.alloc.d0)
        return select_allocation(self.strategy, self.policy, state, C, episode, self.rng, explore, self.K, self.L)

    # -- episodes ---------------------------------------------------------

    def run_episode(self, env: HmaEnv, env_seed, explore: bool, collect: bool, trace: list | None = None,
                    alloc_episode: int | None = None) -> dict:
        """Play one episode.

        Args:
            env: Environment to drive.
            env_seed: Seed passed to ``env.reset``.
            explore: Stochastic actions and exploratory allocation.
            collect: Keep a rollout and high-level transitions for updates.
            trace: If given, one dict per step is appended.
            alloc_episode: Episode index for the prior schedule.

        Returns:
            Episode summary with ``rollout`` and ``transitions`` when collecting.
        """
        ep_idx = self.episode if alloc_episode is None else alloc_episode
        env.reset(env_seed)
        rollout = Rollout() if collect else None
        transitions: list[HighTransition] = []
        gamma = self.cfg.ppo.gamma
        window: list[float] = []
        pending: tuple | None = None
        learner_rewards, system_rewards, dbm = [], [], []
        mode = "stochastic" if explore else "deterministic"
        alloc_logp = 0.0
        while not env.done:
            if env.at_boundary:
                if pending is not None:
                    transitions.append(HighTransition(pending[0], pending[1], discounted_return(window, gamma), pending[2]))
                if not self.broadcast:
                    alloc, alloc_logp = self.choose_allocation(env, ep_idx, explore)
                    env.set_allocation(alloc)
                pending = (env.high_state(), env.allocation, alloc_logp)
                window = []
            obs, crit = self._inputs(env)
            a, logp, u = self._act(obs, mode)
            actions = self._to_env_actions(a)
            if collect:
                v = values(self.critic, crit)
            t = env.t
            res = env.step(actions)
            if collect:
                r = res.rewards if not self.broadcast else np.array([res.learner_reward])
                rollout.add(obs, crit, u, logp, r, v, False)
            window.append(res.learner_reward)
            learner_rewards.append(res.learner_reward)
            system_rewards.append(res.system_reward)
            dbm.append(res.user_dbm)
            if trace is not None:
                trace.append({
                    "t": t,
                    "allocation": "all" if self.broadcast else "|".join(map(str, env.allocation)),
                    "actions": ";".join(repr(float(x)) for x in actions.ravel()),
                    "focals": ";".join(repr(float(x)) for x in env.focals.ravel()),
                    "user_dbm": ";".join(repr(float(x)) for x in res.user_dbm),
                    "system_reward_mw": repr(res.system_reward),
                    "learner_reward": repr(res.learner_reward),
                })
        if pending is not None:
            transitions.append(HighTransition(pending[0], pending[1], discounted_return(window, gamma), pending[2]))
        out = {
            "mean_reward": float(np.mean(learner_rewards)),
            "mean_system_mw": float(np.mean(system_rewards)),
            "mean_rssi_dbm": float(np.mean(mw_to_dbm(dbm_to_mw(np.array(dbm)).mean(axis=1)))),
            "dbm": np.array(dbm),
        }
        if collect:
            _, crit = self._inputs(env)
            rollout.finish(values(self.critic, crit), self.cfg.ppo)
            out["rollout"] = rollout
            out["transitions"] = transitions
        return out

    def train_episode(self, trace: list | None = None) -> dict:
        env = HmaEnv(self.scene, self.scenario.env, broadcast=self.broadcast)
        env_seed = [self.seed, _TRAIN_ENV, self.episode]
        res = self.run_episode(env, env_seed, explore=True, collect=True, trace=trace)
        row = {
            "episode": self.episode,
            "mean_reward": res["mean_reward"],
            "mean_system_mw": res["mean_system_mw"],
            "mean_rssi_dbm": res["mean_rssi_dbm"],
        }
        rejected = 0
        try:
            row.update(self._update_low(res["rollout"]))
        except UpdateRejected as exc:
            log.warning("episode %d: low-level update rejected (%s)", self.episode, exc)
            rejected = 1
        row["rejected"] = rejected
        if self.learner is not None:
            a_stats = update_allocator(self.learner, res["transitions"], self.rng)
            row.update(a_stats.as_dict())
        row["alpha"] = 1.0 if (self.strategy == "allocator" and self.episode < self.cfg.alloc.alpha_threshold) else 0.0
        self.episode += 1
        return row

    # -- checkpoints ------------------------------------------------------

    def param_sets(self) -> dict:
        if len(self.actors) == 1:
            sets = {"actor": self.actor, "critic": self.critic}
        else:
            sets = {f"actor_{l}": a for l, a in enumerate(self.actors)} | {"critic": self.critic}
        if self.policy is not None:
            sets.update(self.policy.param_sets())
        return sets

    def meta(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "episode": self.episode,
            "K": self.K,
            "L": self.L,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "critic_dim": self.critic_dim,
            "scenario_hash": self.scenario_hash,
            "train_config": self.cfg.to_dict(),
            "rng_state": self.rng.bit_generator.state,
            "build": self.build,
        }

    def save(self, path) -> Path:
        extra = {}
        if self.learner is not None and self.learner.buffer:
            buf = self.learner.buffer
            extra = {
                "buf_users": np.array([tr.state.user_positions for tr in buf]),
                "buf_focals": np.array([tr.state.focal_points for tr in buf]),
                "buf_alloc": np.array([tr.allocation for tr in buf]),
                "buf_ret": np.array([tr.ret for tr in buf]),
                "buf_logp": np.array([tr.logp for tr in buf]),
            }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.param_sets(), self.meta(), extra)
        return path

    @classmethod
    def load(cls, path, scenario: Scenario) -> "Trainer":
        """Rebuild a trainer from a checkpoint for ``scenario``.

        Raises:
            InvalidCheckpoint: if the checkpoint does not fit the scenario.
        """
        sets, meta, extra = load_checkpoint(path)
        try:
            cfg = TrainConfig.from_dict(meta["train_config"])
            trainer = cls(scenario, meta["strategy"], meta["seed"], cfg)
        except (KeyError, InvalidArgument) as exc:
            raise InvalidCheckpoint(f"{path}: incompatible metadata ({exc})") from None
        for key in ("K", "L", "obs_dim", "act_dim", "critic_dim"):
            if meta.get(key) != getattr(trainer, key):
                raise InvalidCheckpoint(f"{path}: {key}={meta.get(key)} but scenario needs {getattr(trainer, key)}")
        for name, ps in trainer.param_sets().items():
            if name not in sets or sets[name].shapes != ps.shapes:
                raise InvalidCheckpoint(f"{path}: parameter set '{name}' missing or mis-shaped")
            ps.restore(sets[name])
        trainer.episode = int(meta["episode"])
        trainer.rng.bit_generator.state = meta["rng_state"]
        if trainer.learner is not None and "buf_ret" in extra:
            cents = trainer.scene.centroids
            trainer.learner.buffer = [
                HighTransition(HighState(u, cents.copy(), f), tuple(int(b) for b in al), float(r), float(lp))
                for u, f, al, r, lp in zip(extra["buf_users"], extra["buf_focals"], extra["buf_alloc"], extra["buf_ret"], extra["buf_logp"])
            ]
        return trainer


# -- CSV helpers ------------------------------------------------------------


def write_csv(path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in columns})
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


# -- train ------------------------------------------------------------------


@dataclass
class TrainResult:
    trainer: Trainer
    rows: list[dict]
    checkpoint: Path | None = None
    log_path: Path | None = None
    trace_path: Path | None = None

    def final_mean_reward(self, last: int = 50) -> float:
        return float(np.mean([r["mean_reward"] for r in self.rows[-last:]]))


TRAIN_COLUMNS = [
    "schema", "build", "scenario_hash", "seed", "strategy", "episode", "mean_reward", "mean_system_mw",
    "mean_rssi_dbm", "policy_loss", "value_loss", "entropy", "kl", "clip_fraction", "rejected", "alpha",
    "q_loss", "alloc_policy_loss",
]


def train(scenario: Scenario, strategy: str, episodes: int, seed: int, out_dir=None, cfg: TrainConfig | None = None,
          resume=None, trace_last: bool = False, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Train a strategy for ``episodes`` episodes.

    Args:
        scenario: Scene and episode settings.
        strategy: One of :data:`~hmarl.allocator.STRATEGIES`.
        episodes: Episodes to run in this call.
        seed: Run seed; ignored when resuming.
        out_dir: Where ``training.csv`` and ``checkpoint.npz`` go. Nothing
            is written when omitted.
        cfg: Learning settings; defaults to the scenario's ``[training]`` table.
        resume: Checkpoint to continue from.
        trace_last: Also write a replayable trace of the final episode.
        progress: Called with each episode's log row.

    Raises:
        NumericFailure: if the run collapses (parameters stop being finite).
            The last good checkpoint is kept.
    """
    if episodes < 1:
        raise InvalidArgument(f"episodes must be >= 1, got {episodes}")
    trainer = Trainer.load(resume, scenario) if resume else Trainer(scenario, strategy, seed, cfg)
    out = Path(out_dir) if out_dir is not None else None
    ckpt = out / "checkpoint.npz" if out is not None else None
    rows = []
    trace = None
    for i in range(episodes):
        trace = [] if (trace_last and i == episodes - 1) else None
        row = trainer.train_episode(trace)
        if not all(np.all(np.isfinite(p)) for a in trainer.actors for p in a.params.values()):
            raise NumericFailure(f"training collapsed at episode {row['episode']}; last good checkpoint kept at {ckpt}")
        row.update(schema=TRAIN_LOG_SCHEMA, build=trainer.build, scenario_hash=trainer.scenario_hash,
                   seed=trainer.seed, strategy=trainer.strategy)
        rows.append(row)
        if progress is not None:
            progress(row)
        if ckpt is not None and trainer.cfg.checkpoint_every and trainer.episode % trainer.cfg.checkpoint_every == 0:
            trainer.save(ckpt)
    result = TrainResult(trainer, rows)
    if out is not None:
        result.checkpoint = trainer.save(ckpt)
        result.log_path = write_csv(out / "training.csv", rows, TRAIN_COLUMNS)
        if trace is not None:
            env_seed = [trainer.seed, _TRAIN_ENV, trainer.episode - 1]
            result.trace_path = write_trace(out / "train_trace.csv", trace, trainer, env_seed, scenario.env)
    return result


# -- traces -----------------------------------------------------------------


TRACE_COLUMNS = [
    "schema", "build", "scenario_hash", "seed", "strategy", "env_seed", "episode_len", "mobility", "loc_error_sigma",
    "t", "allocation", "actions", "focals", "user_dbm", "system_reward_mw", "learner_reward",
]


def write_trace(path, steps: list[dict], trainer: Trainer, env_seed, env_cfg: EnvConfig) -> Path:
    common = {
        "schema": TRACE_SCHEMA,
        "build": trainer.build,
        "scenario_hash": trainer.scenario_hash,
        "seed": trainer.seed,
        "strategy": trainer.strategy,
        "env_seed": _seed_label(env_seed),
        "episode_len": env_cfg.episode_len,
        "mobility": int(env_cfg.mobility),
        "loc_error_sigma": repr(float(env_cfg.loc_error_sigma)),
    }
    return write_csv(path, [{**common, **s} for s in steps], TRACE_COLUMNS)


# -- evaluate ---------------------------------------------------------------


@dataclass
class EvalResult:
    rows: list[dict]
    summary: dict
    trace_path: Path | None = None
    csv_path: Path | None = None


EVAL_COLUMNS = ["schema", "build", "scenario_hash", "seed", "strategy", "episode", "timestep", "user_id", "rssi_dbm", "allocation"]


def evaluate(model: Trainer | str | Path, scenario: Scenario, timesteps: int = 300, seed: int | None = None,
             out_dir=None, mobility: bool = True, episodes: int = 1) -> EvalResult:
    """Run the trained policies deterministically with the prior schedule at its final state.

    Args:
        model: A trainer or a checkpoint path.
        scenario: Scene and episode settings.
        timesteps: Steps per evaluation episode; rounded up to a multiple of ``T``.
        seed: Evaluation seed; defaults to the training seed.
        out_dir: Where ``evaluation.csv`` and ``eval_trace.csv`` go.
        mobility: Whether users move.
        episodes: Number of evaluation episodes.
    """
    trainer = model if isinstance(model, Trainer) else Trainer.load(model, scenario)
    T = scenario.env.T
    steps = int(np.ceil(timesteps / T) * T)
    env_cfg = replace(scenario.env, episode_len=steps, mobility=mobility)
    env = HmaEnv(trainer.scene, env_cfg, broadcast=trainer.broadcast)
    seed = trainer.seed if seed is None else int(seed)
    saved_state = trainer.rng.bit_generator.state
    trainer.rng = np.random.default_rng(np.random.SeedSequence([seed, _EVAL_RNG]))
    rows, traces, per_step = [], [], []
    common = {"schema": EVAL_SCHEMA, "build": trainer.build, "scenario_hash": trainer.scenario_hash,
              "seed": seed, "strategy": trainer.strategy}
    try:
        for e in range(episodes):
            trace: list = []
            env_seed = [seed, _EVAL_ENV, e]
            res = trainer.run_episode(env, env_seed, explore=False, collect=False, trace=trace, alloc_episode=trainer.episode)
            dbm = res["dbm"]
            per_step.append(dbm)
            for step in trace:
                t = step["t"]
                for k in range(trainer.K):
                    rows.append({**common, "episode": e, "timestep": t, "user_id": k,
                                 "rssi_dbm": float(dbm[t, k]), "allocation": step["allocation"]})
            traces.append((trace, env_seed))
    finally:
        trainer.rng.bit_generator.state = saved_state
    allv = np.concatenate(per_step)
    # per-step RSSI is the dB value of the mean linear power across users
    step_dbm = mw_to_dbm(dbm_to_mw(allv).mean(axis=1))
    summary = {
        **common,
        "mean_rssi_dbm": float(step_dbm.mean()),
        "std_time_dbm": float(step_dbm.std()),
        "mean_user_dbm": float(allv.mean()),
        "std_all_dbm": float(allv.std()),
        "mean_system_mw": float(dbm_to_mw(allv).sum(axis=1).mean()),
        "timesteps": steps,
        "episodes": episodes,
    }
    result = EvalResult(rows, summary)
    if out_dir is not None:
        out = Path(out_dir)
        result.csv_path = write_csv(out / "evaluation.csv", rows, EVAL_COLUMNS)
        trace, env_seed = traces[0]
        result.trace_path = write_trace(out / "eval_trace.csv", trace, trainer, env_seed, env_cfg)
    return result


# -- sweeps -----------------------------------------------------------------


def cell_scenario(base: Scenario, kind: str, value) -> Scenario:
    """Scenario for one sweep cell."""
    if kind == "aperture":
        return base.with_rows(int(value))
    if kind == "reward_exponent":
        return base.with_env(reward_exponent=int(value))
    if kind == "loc_error":
        return base.with_env(loc_error_sigma=float(value))
    if kind == "users":
        return base.with_env(K=int(value))
    raise InvalidArgument(f"unknown sweep kind {kind!r}; expected one of {sorted(SWEEP_VALUES)}")


def validate_sweep_values(kind: str, values: Iterable) -> tuple:
    values = tuple(values)
    if kind not in SWEEP_VALUES:
        raise InvalidArgument(f"unknown sweep kind {kind!r}; expected one of {sorted(SWEEP_VALUES)}")
    for v in values:
        if kind == "aperture" and (int(v) != v or v < 1):
            raise InvalidArgument(f"aperture rows must be positive integers, got {v}")
        if kind == "reward_exponent" and v not in (0, 1, 2, 3, 4):
            raise InvalidArgument(f"reward exponent must be in 0..4, got {v}")
        if kind == "loc_error" and v < 0:
            raise InvalidArgument(f"localization error must be >= 0, got {v}")
        if kind == "users" and (int(v) != v or v < 1):
            raise InvalidArgument(f"user count must be a positive integer, got {v}")
    return values


def run_cell(scenario: Scenario, strategy: str, seed: int, episodes: int, cfg: TrainConfig | None = None,
             eval_timesteps: int = 300, eval_episodes: int = 1, cache_dir=None) -> dict:
    """Train then evaluate one (scenario, strategy, seed) cell, optionally cached on disk.

    Returns:
        A dict with ``final_reward`` (mean of the last 50 episode rewards),
        ``eval_rssi_dbm``, ``eval_std_time_dbm``, ``eval_system_mw`` and the
        per-episode ``rewards``.
    """
    cfg = cfg or config_for(scenario)
    key_src = json.dumps({
        "build": build_id(), "scenario": scenario.content_hash(), "strategy": strategy, "seed": seed,
        "episodes": episodes, "cfg": cfg.to_dict(), "eval": [eval_timesteps, eval_episodes],
    }, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:20]
    cache_file = Path(cache_dir) / f"cell-{key}.json" if cache_dir is not None else None
    if cache_file is not None and cache_file.is_file():
        return json.loads(cache_file.read_text())
    res = train(scenario, strategy, episodes, seed, cfg=cfg)
    ev = evaluate(res.trainer, scenario, timesteps=eval_timesteps, episodes=eval_episodes)
    cell = {
        "strategy": strategy,
        "seed": seed,
        "scenario_hash": scenario.content_hash(),
        "episodes": episodes,
        "final_reward": res.final_mean_reward(50),
        "rewards": [r["mean_reward"] for r in res.rows],
        "eval_rssi_dbm": ev.summary["mean_rssi_dbm"],
        "eval_std_time_dbm": ev.summary["std_time_dbm"],
        "eval_system_mw": ev.summary["mean_system_mw"],
    }
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_text(json.dumps(cell))
    return cell


SWEEP_COLUMNS = [
    "schema", "build", "scenario_hash", "seed", "kind", "value", "strategy", "episodes", "status",
    "final_reward", "eval_rssi_dbm", "eval_std_time_dbm",
]
SWEEP_SUMMARY_COLUMNS = [
    "schema", "build", "scenario_hash", "seed", "kind", "value", "n_ok", "n_failed", "mean_rssi_dbm",
    "std_seeds_dbm", "mean_std_time_dbm", "mean_final_reward",
]


def sweep(kind: str, base: Scenario, seeds: Sequence[int], values: Sequence | None = None, episodes: int = 400,
          strategy: str = "allocator", cfg: TrainConfig | None = None, out_dir=None, cache_dir=None,
          eval_timesteps: int = 300, eval_episodes: int = 1,
          progress: Callable[[dict], None] | None = None) -> tuple[list[dict], list[dict]]:
    """Train and evaluate every (value, seed) cell of a sweep.

    A failing cell is recorded with its error and the sweep moves on.

    Returns:
        ``(cells, summary)``: one row per cell and one aggregated row per value.
        The summary's ``seed`` column lists the seeds joined by ``|``.
    """
    values = validate_sweep_values(kind, SWEEP_VALUES[kind] if values is None else values)
    build = build_id()
    cells, summary = [], []
    for value in values:
        scen = cell_scenario(base, kind, value)
        results = []
        for seed in seeds:
            row = {"schema": SWEEP_SCHEMA, "build": build, "scenario_hash": scen.content_hash(), "seed": seed,
                   "kind": kind, "value": value, "strategy": strategy, "episodes": episodes}
            try:
                cell = run_cell(scen, strategy, seed, episodes, cfg or config_for(base), eval_timesteps, eval_episodes,
                                cache_dir=cache_dir)
                row.update(status="ok", final_reward=cell["final_reward"], eval_rssi_dbm=cell["eval_rssi_dbm"],
                           eval_std_time_dbm=cell["eval_std_time_dbm"])
                results.append(cell)
            except Exception as exc:  # recorded, sweep continues
                log.error("sweep cell %s=%s seed=%s failed: %s", kind, value, seed, exc)
                row.update(status=f"failed: {type(exc).__name__}: {exc}")
            cells.append(row)
            if progress is not None:
                progress(row)
        ok = [c["eval_rssi_dbm"] for c in results]
        summary.append({
            "schema": SWEEP_SCHEMA, "build": build, "scenario_hash": scen.content_hash(),
            "seed": "|".join(str(s) for s in seeds), "kind": kind, "value": value,
            "n_ok": len(ok), "n_failed": len(seeds) - len(ok),
            "mean_rssi_dbm": float(np.mean(ok)) if ok else float("nan"),
            "std_seeds_dbm": float(np.std(ok)) if ok else float("nan"),
            "mean_std_time_dbm": float(np.mean([c["eval_std_time_dbm"] for c in results])) if ok else float("nan"),
            "mean_final_reward": float(np.mean([c["final_reward"] for c in results])) if ok else float("nan"),
        })
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / f"sweep_{kind}_cells.csv", cells, SWEEP_COLUMNS)
        write_csv(out / f"sweep_{kind}.csv", summary, SWEEP_SUMMARY_COLUMNS)
    return cells, summary
