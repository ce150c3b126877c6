import numpy as np
import pytest

import hmarl.harness as harness
from hmarl.allocator import STRATEGIES
from hmarl.errors import InvalidArgument, InvalidCheckpoint
from hmarl.harness import (
    DESK_TRAINING,
    EVAL_COLUMNS,
    TRAIN_COLUMNS,
    TrainConfig,
    config_for,
    evaluate,
    low_features,
    read_csv,
    sweep,
    train,
)
from hmarl.scenario import Scenario, save_scenario


@pytest.fixture(scope="module")
def scen():
    return Scenario(training=DESK_TRAINING).with_env(episode_len=20)


class TestConfig:
    def test_round_trip(self, scen):
        cfg = config_for(scen, {"alloc": {"d0": 5.0}})
        assert cfg.ppo.hidden == (64, 64) and cfg.alloc.d0 == 5.0
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys(self):
        with pytest.raises(InvalidArgument):
            TrainConfig.from_dict({"ppo": {"learning_rate": 1.0}})
        with pytest.raises(InvalidArgument):
            TrainConfig.from_dict({"optimizer": {}})

    def test_low_features_invertible(self, rng):
        obs = rng.normal(size=(5, 9))
        f = low_features(obs)
        focal_minus_cent = f[:, 6:9]
        np.testing.assert_allclose(f[:, 0:3] + focal_minus_cent, f[:, 3:6], atol=1e-14)


class TestTrain:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_smoke(self, scen, strategy, tmp_path):
        res = train(scen, strategy, 1, seed=0, out_dir=tmp_path)
        assert res.checkpoint.is_file()
        rows = read_csv(res.log_path)
        assert len(rows) == 1 and list(rows[0]) == TRAIN_COLUMNS
        assert rows[0]["scenario_hash"] == scen.content_hash() and rows[0]["seed"] == "0"
        assert np.isfinite(float(rows[0]["mean_reward"]))

    def test_identical_runs_write_identical_csvs(self, scen, tmp_path):
        a = train(scen, "allocator", 2, seed=3, out_dir=tmp_path / "a")
        b = train(scen, "allocator", 2, seed=3, out_dir=tmp_path / "b")
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        ea = evaluate(a.checkpoint, scen, timesteps=20, out_dir=tmp_path / "ea")
        eb = evaluate(b.checkpoint, scen, timesteps=20, out_dir=tmp_path / "eb")
        assert ea.csv_path.read_bytes() == eb.csv_path.read_bytes()
        assert list(read_csv(ea.csv_path)[0]) == EVAL_COLUMNS

    def test_seeds_differ(self, scen):
        a = train(scen, "allocator", 1, seed=1)
        b = train(scen, "allocator", 1, seed=2)
        assert a.rows[0]["mean_reward"] != b.rows[0]["mean_reward"]

    def test_resume_continues_identically(self, scen, tmp_path):
        full = train(scen, "allocator", 4, seed=9)
        first = train(scen, "allocator", 2, seed=9, out_dir=tmp_path)
        rest = train(scen, "allocator", 2, seed=0, resume=first.checkpoint)
        got = [r["mean_reward"] for r in first.rows + rest.rows]
        assert got == [r["mean_reward"] for r in full.rows]
        assert rest.rows[0]["episode"] == 2

    def test_independent_actors(self, scen, tmp_path):
        cfg = config_for(scen, {"ppo": {"shared_actor": False}})
        res = train(scen, "allocator", 2, seed=2, out_dir=tmp_path, cfg=cfg)
        tr = res.trainer
        assert len(tr.actors) == tr.L
        assert not np.array_equal(tr.actors[0].flat(), tr.actors[1].flat())
        more = train(scen, "allocator", 1, seed=0, resume=res.checkpoint)
        ref = train(scen, "allocator", 3, seed=2, cfg=cfg)
        assert more.rows[0]["mean_reward"] == ref.rows[2]["mean_reward"]

    def test_shared_actor_serves_every_agent(self, scen):
        tr = train(scen, "allocator", 1, seed=0).trainer
        assert tr.actors == [tr.actor] and "actor_1" not in tr.param_sets()

    def test_scenario_file_untouched(self, scen, tmp_path):
        path = tmp_path / "s.toml"
        save_scenario(scen, path)
        before = path.read_bytes()
        train(scen, "random", 1, seed=0, out_dir=tmp_path / "out")
        assert path.read_bytes() == before

    def test_invalid(self, scen):
        with pytest.raises(InvalidArgument):
            train(scen, "allocator", 0, seed=0)
        with pytest.raises(InvalidArgument):
            train(scen, "greedy", 1, seed=0)


class TestEvaluate:
    def test_summary_and_rows(self, scen):
        res = train(scen, "allocator", 1, seed=0)
        ev = evaluate(res.trainer, scen, timesteps=25, mobility=False)
        assert ev.summary["timesteps"] == 30  # rounded up to a multiple of T
        assert len(ev.rows) == 30 * scen.env.K
        dbm = np.array([r["rssi_dbm"] for r in ev.rows]).reshape(30, scen.env.K)
        step = 10 * np.log10((10 ** (dbm / 10)).mean(axis=1))
        assert ev.summary["mean_rssi_dbm"] == pytest.approx(step.mean(), rel=1e-12)
        assert ev.summary["mean_user_dbm"] == pytest.approx(dbm.mean(), rel=1e-12)

    def test_evaluation_leaves_training_stream_alone(self, scen):
        a = train(scen, "allocator", 2, seed=4)
        b = train(scen, "allocator", 1, seed=4)
        evaluate(b.trainer, scen, timesteps=20)
        b_rows = b.rows + [b.trainer.train_episode()]
        assert [r["mean_reward"] for r in a.rows] == [r["mean_reward"] for r in b_rows]

    def test_incompatible_checkpoint(self, scen, tmp_path):
        res = train(scen, "allocator", 1, seed=0, out_dir=tmp_path)
        with pytest.raises(InvalidCheckpoint):
            evaluate(res.checkpoint, scen.with_env(K=3))


class TestSweep:
    def test_failed_cell_is_recorded(self, scen, tmp_path, monkeypatch):
        real = harness.run_cell

        def flaky(scenario, strategy, seed, *args, **kwargs):
            if scenario.reflectors[0].rows == 5:
                raise FloatingPointError("boom")
            return real(scenario, strategy, seed, *args, **kwargs)

        monkeypatch.setattr(harness, "run_cell", flaky)
        cells, summary = sweep("aperture", scen, [0], values=[5, 7], episodes=1, eval_timesteps=10, out_dir=tmp_path)
        assert cells[0]["status"].startswith("failed: FloatingPointError")
        assert cells[1]["status"] == "ok"
        assert summary[0]["n_failed"] == 1 and summary[1]["n_ok"] == 1
        assert (tmp_path / "sweep_aperture.csv").is_file()

    def test_cache_reuses_cells(self, scen, tmp_path):
        a = harness.run_cell(scen, "random", 0, 1, eval_timesteps=10, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("cell-*.json"))) == 1
        b = harness.run_cell(scen, "random", 0, 1, eval_timesteps=10, cache_dir=tmp_path)
        assert a == b

    @pytest.mark.parametrize("kind, values", [("aperture", [0]), ("reward_exponent", [5]), ("loc_error", [-1.0]), ("bogus", [1])])
    def test_invalid_values(self, scen, kind, values):
        with pytest.raises(InvalidArgument):
            sweep(kind, scen, [0], values=values, episodes=1)
