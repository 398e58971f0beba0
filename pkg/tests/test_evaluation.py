"""Evaluation metrics: residual statistics against an exact yardstick,
characteristic curves, detection tables, and the report files."""

import json

import numpy as np
import pytest

from riskhorizon.envs import ChainWorld, ChainWorldSpec, generate_episodes
from riskhorizon.episodes import Episode, Terminal
from riskhorizon.evaluation import (
    CharacteristicCurves,
    DetectionTable,
    EvalReport,
    accuracy_error,
    collision_characteristic,
    detection_rate,
    evaluate,
    oracle_errors,
    pessimism_error,
    write_characteristic,
    write_detection,
    write_head_metrics,
    write_oracle_errors,
    write_summary,
)
from riskhorizon.oracle import dp_cumulative
from riskhorizon.returns import HorizonConfig

# Hazards high enough that survival past 40 steps is ~1e-9: effectively every
# episode collides, so no window is conditioned away and the mean squared
# residual of an exact estimator must converge to mean p(1-p).
HEAVY = ChainWorldSpec(
    n_states=2,
    hazard=(0.4, 0.6),
    transition=((0.5, 0.5), (0.4, 0.6)),
    start_distribution=(0.5, 0.5),
)

SAFE = ChainWorldSpec(
    n_states=2,
    hazard=(0.0, 0.0),
    transition=((0.5, 0.5), (0.4, 0.6)),
    start_distribution=(0.5, 0.5),
)

CERTAIN = ChainWorldSpec(
    n_states=1,
    hazard=(1.0,),
    transition=((1.0,),),
    start_distribution=(1.0,),
)


def cfg(n_heads, delta_t=0.1):
    return HorizonConfig(delta_t=delta_t, n_heads=n_heads, lam=0.8, trunc_n=n_heads)


class TableEstimator:
    """Reads the exact cumulative table through one-hot chain observations."""

    def __init__(self, table):
        self.table = table

    def forward(self, observations):
        states = np.argmax(np.atleast_2d(observations), axis=1)
        return self.table.probabilities[states, 1:]


class ConstantEstimator:
    def __init__(self, value, n_heads):
        self.value = float(value)
        self.n_heads = n_heads

    def forward(self, observations):
        rows = np.atleast_2d(observations).shape[0]
        return np.full((rows, self.n_heads), self.value)


class FeatureEstimator:
    """Every head echoes observation feature 0; test values ride along in it."""

    def __init__(self, n_heads):
        self.n_heads = n_heads

    def forward(self, observations):
        col = np.atleast_2d(observations)[:, :1]
        return np.repeat(col, self.n_heads, axis=1)


def episode(steps, collision, feature=None, seed=0):
    rewards = np.zeros(steps, dtype=np.int64)
    terminal = Terminal.TIME_LIMIT
    if collision:
        rewards[-1] = 1
        terminal = Terminal.COLLISION
    obs = np.zeros((steps, 2))
    if feature is not None:
        obs[:, 0] = feature
    return Episode(observations=obs, rewards=rewards, terminal=terminal, seed=seed)


# --- residual statistics ----------------------------------------------------


def test_exact_estimator_error_is_the_irreducible_variance():
    # With the true conditional probabilities plugged in, the signed residual
    # averages to zero and the squared one to the Bernoulli variance p(1-p),
    # window by window. Aggregate both from the table independently.
    n_heads = 3
    table = dp_cumulative(HEAVY, n_heads)
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 4000, master_seed=101)
    report = evaluate(episodes, TableEstimator(table), cfg(n_heads))

    for i in range(1, n_heads + 1):
        variance_sum = 0.0
        windows = 0
        for ep in episodes:
            states = np.argmax(ep.observations, axis=1)
            if ep.terminal is Terminal.COLLISION:
                valid_until = ep.steps
            else:
                valid_until = ep.steps - i
            for t in range(valid_until):
                p = table.at(states[t], i)
                variance_sum += p * (1.0 - p)
                windows += 1
        assert report.counts[i - 1] == windows
        assert report.acc[i - 1] == pytest.approx(variance_sum / windows, abs=0.02)
        assert abs(report.pes[i - 1]) < 0.02


def test_constant_one_on_collision_free_corpus_is_fully_pessimistic():
    world = ChainWorld(SAFE, max_steps=12)
    episodes, summary = generate_episodes(world, 30, master_seed=5)
    assert summary.collisions == 0
    report = evaluate(episodes, ConstantEstimator(1.0, 4), cfg(4))
    assert np.all(report.pes == -1.0)
    assert np.all(report.acc == 1.0)


def test_constant_zero_on_always_colliding_corpus_is_fully_optimistic():
    world = ChainWorld(CERTAIN, max_steps=12)
    episodes, summary = generate_episodes(world, 30, master_seed=5)
    assert summary.collisions == 30
    report = evaluate(episodes, ConstantEstimator(0.0, 4), cfg(4))
    assert np.all(report.pes == 1.0)
    assert np.all(report.acc == 1.0)


def test_constant_zero_on_collision_free_corpus_is_exact():
    world = ChainWorld(SAFE, max_steps=12)
    episodes, _ = generate_episodes(world, 30, master_seed=5)
    report = evaluate(episodes, ConstantEstimator(0.0, 4), cfg(4))
    assert np.all(report.acc == 0.0)
    assert np.all(report.pes == 0.0)


def test_squared_error_dominates_squared_signed_error():
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 300, master_seed=17)
    report = evaluate(episodes, ConstantEstimator(0.3, 3), cfg(3))
    present = report.counts > 0
    assert np.all(report.acc[present] >= report.pes[present] ** 2 - 1e-12)


def test_evaluate_is_order_invariant():
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 100, master_seed=23)
    table = dp_cumulative(HEAVY, 3)
    a = evaluate(episodes, TableEstimator(table), cfg(3))
    b = evaluate(list(reversed(episodes)), TableEstimator(table), cfg(3))
    np.testing.assert_allclose(a.acc, b.acc, rtol=1e-12)
    np.testing.assert_allclose(a.pes, b.pes, rtol=1e-12)
    assert np.array_equal(a.counts, b.counts)


def test_window_counts_exclude_truncated_tails():
    # A 6-step truncation contributes windows t <= 5-i per head; a 3-step
    # collision contributes every timestep; a 2-step truncation has no head-2
    # window at all.
    episodes = [episode(6, False), episode(3, True), episode(2, False)]
    report = evaluate(episodes, ConstantEstimator(0.5, 2), cfg(2))
    assert report.counts.tolist() == [5 + 3 + 1, 4 + 3 + 0]


def test_heads_without_windows_read_nan():
    report = evaluate([episode(3, False)], ConstantEstimator(0.5, 5), cfg(5))
    assert report.counts.tolist() == [2, 1, 0, 0, 0]
    assert np.all(np.isnan(report.acc[2:]))
    assert np.all(np.isnan(report.pes[2:]))
    # aggregate means only average the populated heads
    assert report.pes_mean == pytest.approx(-0.5)
    assert report.acc_mean == pytest.approx(0.25)


def test_evaluate_rejects_empty_corpus():
    with pytest.raises(ValueError):
        evaluate([], ConstantEstimator(0.5, 2), cfg(2))


def test_error_convenience_wrappers_agree_with_report():
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 50, master_seed=31)
    est = ConstantEstimator(0.4, 3)
    report = evaluate(episodes, est, cfg(3))
    np.testing.assert_array_equal(accuracy_error(episodes, est, cfg(3)), report.acc)
    np.testing.assert_array_equal(pessimism_error(episodes, est, cfg(3)), report.pes)


# --- characteristic curves --------------------------------------------------


def test_characteristic_offsets_count_down_to_one_step():
    curves = collision_characteristic([episode(5, True)], ConstantEstimator(0.2, 3), cfg(3))
    np.testing.assert_allclose(curves.offsets_s, [0.3, 0.2, 0.1])


def test_characteristic_constant_estimator_is_flat():
    episodes = [episode(6, True, seed=i) for i in range(4)]
    curves = collision_characteristic(episodes, ConstantEstimator(0.2, 3), cfg(3))
    assert curves.per_episode.shape == (4, 3)
    assert np.all(curves.per_episode == 0.2)
    np.testing.assert_allclose(curves.mean, [0.2, 0.2, 0.2])
    assert curves.skipped == 0


def test_characteristic_reads_final_head_along_the_realized_path():
    n_heads = 3
    table = dp_cumulative(HEAVY, n_heads)
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 400, master_seed=41)
    eligible = [
        ep for ep in episodes if ep.terminal is Terminal.COLLISION and ep.steps >= n_heads
    ]
    curves = collision_characteristic(episodes, TableEstimator(table), cfg(n_heads))
    assert curves.per_episode.shape[0] == len(eligible)
    for row, ep in zip(curves.per_episode, eligible):
        states = np.argmax(ep.observations, axis=1)[ep.steps - n_heads :]
        expected = [table.at(s, n_heads) for s in states]
        np.testing.assert_allclose(row, expected)
    np.testing.assert_allclose(curves.mean, curves.per_episode.mean(axis=0))


def test_characteristic_skips_short_collisions_and_ignores_truncations():
    episodes = [
        episode(2, True),  # too short for the horizon: skipped
        episode(9, False),  # not a collision: ignored silently
        episode(4, True),
    ]
    curves = collision_characteristic(episodes, ConstantEstimator(0.1, 3), cfg(3))
    assert curves.skipped == 1
    assert curves.per_episode.shape == (1, 3)


def test_characteristic_with_no_eligible_episode_is_empty():
    curves = collision_characteristic([episode(9, False)], ConstantEstimator(0.1, 3), cfg(3))
    assert curves.per_episode.shape == (0, 3)
    assert np.all(np.isnan(curves.mean))
    assert curves.skipped == 0


# --- detection table --------------------------------------------------------


def test_detection_intervals_are_left_open_right_closed():
    # delta_t 0.25 makes every time-to-collision exactly representable:
    # 1.0, 0.75, 0.5, 0.25 seconds at timesteps 0..3.
    ep = episode(4, True, feature=(0.9, 0.2, 0.6, 0.4))
    table = detection_rate(
        [ep],
        FeatureEstimator(1),
        cfg(1, delta_t=0.25),
        thresholds=(0.3, 0.5, 0.8, 0.95),
        intervals=((0.0, 0.25), (0.25, 0.75), (0.75, 1.0)),
    )
    # peaks per interval: (0, 0.25] -> 0.4; (0.25, 0.75] -> max(0.2, 0.6);
    # (0.75, 1.0] -> 0.9. The 0.25s step sits outside the middle interval.
    expected = np.array(
        [
            [1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0],
        ]
    )
    np.testing.assert_array_equal(table.rates, expected)
    assert table.episode_count == 1


def test_detection_requires_strict_exceedance():
    ep = episode(4, True, feature=(0.5, 0.5, 0.5, 0.5))
    table = detection_rate(
        [ep], FeatureEstimator(1), cfg(1, delta_t=0.25),
        thresholds=(0.5,), intervals=((0.0, 1.0),),
    )
    assert table.rates[0, 0] == 0.0


def test_detection_uses_only_the_final_head():
    class LoudFirstHead:
        def forward(self, observations):
            rows = np.atleast_2d(observations).shape[0]
            out = np.zeros((rows, 2))
            out[:, 0] = 5.0  # would trip every threshold if consulted
            out[:, 1] = 0.01
            return out

    ep = episode(4, True)
    table = detection_rate(
        [ep], LoudFirstHead(), cfg(2, delta_t=0.25),
        thresholds=(0.1,), intervals=((0.0, 2.0),),
    )
    assert table.rates[0, 0] == 0.0


def test_detection_rates_are_monotone_in_the_threshold():
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 200, master_seed=77)
    table = dp_cumulative(HEAVY, 3)
    result = detection_rate(
        episodes,
        TableEstimator(table),
        cfg(3),
        thresholds=(0.05, 0.2, 0.5, 0.9),
        intervals=((0.0, 0.1), (0.1, 0.3), (0.3, 2.0)),
    )
    assert np.all(np.diff(result.rates, axis=0) <= 0)
    assert result.episode_count == sum(
        1 for ep in episodes if ep.terminal is Terminal.COLLISION
    )


def test_detection_interval_beyond_episode_span_never_fires():
    ep = episode(4, True, feature=(0.9, 0.9, 0.9, 0.9))
    table = detection_rate(
        [ep], FeatureEstimator(1), cfg(1, delta_t=0.25),
        thresholds=(0.0,), intervals=((0.0, 1.0), (5.0, 6.0)),
    )
    np.testing.assert_array_equal(table.rates, [[1.0, 0.0]])


def test_detection_without_collisions_is_an_empty_table():
    table = detection_rate(
        [episode(6, False)], ConstantEstimator(0.9, 2), cfg(2),
        thresholds=(0.1, 0.2), intervals=((0.0, 1.0),),
    )
    assert table.episode_count == 0
    assert np.all(table.rates == 0.0)


def test_detection_validates_inputs():
    ep = episode(4, True)
    with pytest.raises(ValueError):
        detection_rate([ep], ConstantEstimator(0.5, 1), cfg(1), thresholds=())
    with pytest.raises(ValueError):
        detection_rate(
            [ep], ConstantEstimator(0.5, 1), cfg(1),
            thresholds=(0.1,), intervals=((0.4, 0.4),),
        )
    with pytest.raises(ValueError):
        detection_rate(
            [ep], ConstantEstimator(0.5, 1), cfg(1),
            thresholds=(0.1,), intervals=((-0.2, 0.4),),
        )


# --- exact-table comparison -------------------------------------------------


def test_oracle_errors_vanish_for_the_table_estimator():
    table = dp_cumulative(HEAVY, 3)
    errors = oracle_errors(TableEstimator(table), table, np.eye(2))
    assert errors.shape == (2, 3)
    np.testing.assert_array_equal(errors, np.zeros((2, 3)))


def test_oracle_errors_of_zero_estimator_are_the_probabilities():
    table = dp_cumulative(HEAVY, 3)
    errors = oracle_errors(ConstantEstimator(0.0, 3), table, np.eye(2))
    np.testing.assert_allclose(errors, table.probabilities[:, 1:])


def test_oracle_errors_reject_mismatched_head_counts():
    table = dp_cumulative(HEAVY, 3)
    with pytest.raises(ValueError):
        oracle_errors(ConstantEstimator(0.0, 2), table, np.eye(2))


# --- report files -----------------------------------------------------------


def parse_table(path, name):
    lines = path.read_text().splitlines()
    assert lines[0] == f"# riskhorizon-{name} v1"
    columns = lines[1].split("\t")
    rows = [line.split("\t") for line in lines[2:]]
    assert all(len(row) == len(columns) for row in rows)
    return columns, rows


def test_head_metrics_file_round_trips(tmp_path):
    world = ChainWorld(HEAVY, max_steps=40)
    episodes, _ = generate_episodes(world, 60, master_seed=3)
    report = evaluate(episodes, ConstantEstimator(0.3, 3), cfg(3))
    path = tmp_path / "head_metrics.tsv"
    write_head_metrics(path, report)
    columns, rows = parse_table(path, "head-metrics")
    assert columns == ["head", "acc_error", "pes_error", "windows"]
    assert [int(row[0]) for row in rows] == [1, 2, 3]
    for i, row in enumerate(rows):
        assert float(row[1]) == pytest.approx(report.acc[i], rel=1e-11)
        assert float(row[2]) == pytest.approx(report.pes[i], rel=1e-11)
        assert int(row[3]) == report.counts[i]


def test_characteristic_file_round_trips(tmp_path):
    episodes = [episode(6, True, seed=i) for i in range(3)]
    curves = collision_characteristic(episodes, ConstantEstimator(0.25, 4), cfg(4))
    path = tmp_path / "curves.tsv"
    write_characteristic(path, curves)
    columns, rows = parse_table(path, "collision-characteristic")
    assert columns == ["time_to_collision_s", "mean_estimate"]
    offsets = [float(row[0]) for row in rows]
    assert offsets == sorted(offsets, reverse=True)
    assert all(float(row[1]) == pytest.approx(0.25) for row in rows)


def test_detection_file_lists_every_cell(tmp_path):
    ep = episode(4, True, feature=(0.9, 0.2, 0.6, 0.4))
    table = detection_rate(
        [ep], FeatureEstimator(1), cfg(1, delta_t=0.25),
        thresholds=(0.3, 0.8), intervals=((0.0, 0.5), (0.5, 1.0)),
    )
    path = tmp_path / "detection.tsv"
    write_detection(path, table)
    columns, rows = parse_table(path, "detection-rate")
    assert columns == ["threshold", "interval_lo_s", "interval_hi_s", "detection_rate"]
    assert len(rows) == 4
    cells = {(float(r[0]), float(r[1])): float(r[3]) for r in rows}
    assert cells[(0.3, 0.0)] == 1.0  # peak 0.6 in (0, 0.5]
    assert cells[(0.8, 0.0)] == 0.0
    assert cells[(0.8, 0.5)] == 1.0  # peak 0.9 in (0.5, 1.0]


def test_oracle_error_file_covers_every_state_head_pair(tmp_path):
    table = dp_cumulative(HEAVY, 3)
    errors = oracle_errors(ConstantEstimator(0.0, 3), table, np.eye(2))
    path = tmp_path / "oracle_errors.tsv"
    write_oracle_errors(path, errors)
    columns, rows = parse_table(path, "oracle-errors")
    assert columns == ["state", "head", "abs_error"]
    assert {(int(r[0]), int(r[1])) for r in rows} == {
        (s, i) for s in range(2) for i in range(1, 4)
    }


def test_summary_file_is_versioned_json_with_stable_bytes(tmp_path):
    payload = {"acc_mean": 0.125, "episodes": 40}
    first = tmp_path / "a.json"
    second = tmp_path / "b.json"
    write_summary(first, payload)
    write_summary(second, payload)
    assert first.read_bytes() == second.read_bytes()
    doc = json.loads(first.read_text())
    assert doc["format"] == "riskhorizon-eval-summary"
    assert doc["version"] == 1
    assert doc["acc_mean"] == 0.125


def test_report_dataclasses_expose_plain_fields():
    report = EvalReport(acc=np.array([0.1]), pes=np.array([0.0]), counts=np.array([4]))
    assert report.n_heads == 1
    curves = CharacteristicCurves(
        offsets_s=np.array([0.1]),
        per_episode=np.zeros((2, 1)),
        mean=np.zeros(1),
        skipped=0,
    )
    assert curves.per_episode.shape == (2, 1)
    table = DetectionTable(
        thresholds=(0.1,), intervals=((0.0, 1.0),), rates=np.zeros((1, 1)), episode_count=0
    )
    assert table.rates.shape == (1, 1)
