"""Game environment, expert, and episode-dataset tests.

The replay oracle (re-running recorded actions reproduces recorded
rewards) is what lets imitation data be trusted end to end.
"""

import numpy as np
import pytest

from pae_lab.errors import CheckpointError, ContractError
from pae_lab.laneracer import (
    ACTION_LEFT,
    ACTION_RIGHT,
    ACTION_STRAIGHT,
    FRAME_SIZE,
    N_TILES,
    TRACK_ROWS,
    Episode,
    LaneRacer,
    collect_imitation_dataset,
    expert_policy,
    load_episodes,
    make_track,
    replay_score_tenths,
    run_episode,
    save_episodes,
)


class TestEnvironment:
    def test_reset_gives_two_identical_frames(self):
        env = LaneRacer()
        obs = env.reset(0)
        assert obs.shape == (2, FRAME_SIZE, FRAME_SIZE, 3)
        assert obs.dtype == np.uint8
        assert np.array_equal(obs[0], obs[1])

    def test_deterministic_trajectory(self):
        a_env, b_env = LaneRacer(), LaneRacer()
        a_env.reset(42)
        b_env.reset(42)
        rng = np.random.default_rng(0)
        for _ in range(60):
            act = int(rng.integers(3))
            oa, ra, da = a_env.step(act)
            ob, rb, db = b_env.step(act)
            assert np.array_equal(oa, ob)
            assert ra == rb and da == db
            if da:
                break

    def test_step_after_done_rejected(self):
        env = LaneRacer()
        env.reset(5)
        while not env.done:
            env.step(ACTION_LEFT)
        with pytest.raises(ContractError):
            env.step(ACTION_STRAIGHT)

    def test_unknown_action_rejected(self):
        env = LaneRacer()
        env.reset(0)
        with pytest.raises(ContractError):
            env.step(7)

    def test_track_is_bounded_walk(self):
        track = make_track(3)
        assert len(track) == TRACK_ROWS
        assert (track >= 0.2).all() and (track <= 0.8).all()
        assert np.abs(np.diff(track)).max() <= 0.015 + 1e-12

    def test_car_position_clamped(self):
        env = LaneRacer()
        env.reset(0)
        for _ in range(40):
            if env.done:
                break
            env.step(ACTION_LEFT)
        assert env.car_x >= 0.0

    def test_score_accounting_exact(self):
        # sum of step rewards == -0.1*frames + 40*tiles, exactly in tenths
        for seed in (0, 1, 2):
            env = LaneRacer()
            env.reset(seed)
            total_tenths = 0
            while not env.done:
                _, r, _ = env.step(expert_policy(env))
                total_tenths += round(r * 10)
            assert total_tenths == env.score_tenths
            assert env.score_tenths == -env.frames_elapsed + 400 * len(env.visited)


class TestScoring:
    def test_perfect_play_matches_scoring_formula(self):
        ep = run_episode(2000, expert_policy)
        env = LaneRacer()
        env.reset(2000)
        for a in ep.actions:
            env.step(int(a))
        assert len(env.visited) == N_TILES
        # score = 1000 - 0.1 * frames when every tile is collected
        assert env.score_tenths == 10_000 - env.frames_elapsed

    def test_constant_left_terminates_early_and_scores_low(self):
        env = LaneRacer()
        env.reset(5)
        while not env.done:
            env.step(ACTION_LEFT)
        assert env.frames_elapsed < TRACK_ROWS - 1
        assert env.score < 100.0


class TestExpert:
    def test_straight_at_center_on_straight_track(self):
        env = LaneRacer()
        env.reset(0)
        env._track = np.full(TRACK_ROWS, 0.5)
        env.car_x = 0.5
        assert expert_policy(env) == ACTION_STRAIGHT

    def test_left_when_right_of_center(self):
        env = LaneRacer()
        env.reset(0)
        env._track = np.full(TRACK_ROWS, 0.5)
        env.car_x = 0.55
        assert expert_policy(env) == ACTION_LEFT

    def test_right_when_left_of_center(self):
        env = LaneRacer()
        env.reset(0)
        env._track = np.full(TRACK_ROWS, 0.5)
        env.car_x = 0.45
        assert expert_policy(env) == ACTION_RIGHT

    def test_expert_mean_score_on_held_out_seeds(self):
        scores = [run_episode(2000 + i, expert_policy).score_tenths / 10 for i in range(15)]
        assert np.mean(scores) >= 900.0


class TestEpisodes:
    def test_replay_reproduces_recorded_rewards(self):
        for seed in (1000, 1001, 1002):
            ep = run_episode(seed, expert_policy)
            score, per_step = replay_score_tenths(seed, ep.actions)
            assert score == ep.score_tenths
            assert per_step == list(ep.reward_tenths)

    def test_collect_counts_and_shapes(self):
        eps = collect_imitation_dataset(3, 1000)
        assert [ep.seed for ep in eps] == [1000, 1001, 1002]
        for ep in eps:
            t = len(ep)
            assert ep.frames.shape == (t, FRAME_SIZE, FRAME_SIZE, 3)
            assert ep.actions.shape == (t,)
            assert ep.reward_tenths.shape == (t,)
            assert ep.terminal

    def test_observation_stacks_previous_and_current(self):
        ep = collect_imitation_dataset(1, 1000)[0]
        obs0 = ep.observation(0)
        assert np.array_equal(obs0[0], obs0[1])
        obs5 = ep.observation(5)
        assert np.array_equal(obs5[0], ep.frames[4])
        assert np.array_equal(obs5[1], ep.frames[5])
        with pytest.raises(ContractError):
            ep.observation(len(ep))

    def test_training_eval_seed_ranges_disjoint(self):
        train = {1000 + i for i in range(30)}
        eval_ = {2000 + i for i in range(15)}
        assert not train & eval_

    def test_save_load_round_trip(self, tmp_path):
        eps = collect_imitation_dataset(2, 1000)
        save_episodes(tmp_path / "d", eps, extra={"note": "test"})
        back = load_episodes(tmp_path / "d")
        assert len(back) == 2
        for a, b in zip(eps, back):
            assert a.seed == b.seed
            assert a.score_tenths == b.score_tenths
            assert np.array_equal(a.frames, b.frames)
            assert np.array_equal(a.actions, b.actions)
            assert np.array_equal(a.reward_tenths, b.reward_tenths)

    def test_truncated_record_detected(self, tmp_path):
        eps = collect_imitation_dataset(1, 1000)
        save_episodes(tmp_path / "d", eps)
        path = tmp_path / "d" / "ep_0000.bin"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_episodes(tmp_path / "d")
