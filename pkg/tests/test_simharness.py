import filecmp
import json
import math

import numpy as np
import pytest
from scipy import stats

from rareps.estimators import ESTIMATORS
from rareps.scenarios import build_scenario
from rareps.simharness import (
    GRID,
    EstimatorStats,
    SimulationSummary,
    density_on_grid,
    dumps_json,
    fmt,
    replicate_rng,
    run_experiment,
    run_replicate,
    run_replicates,
    silverman_bandwidth,
    spread_ranking,
    summarize,
    tail_on_grid,
    write_outputs,
)


@pytest.fixture(scope="module")
def small_run():
    scenario = build_scenario("I")
    summary, records = run_experiment(scenario, 40, 7, oracle_sample_size=10**5)
    return scenario, summary, records


def test_streams_depend_only_on_seed_and_index():
    a = replicate_rng(5, 3).random(4)
    assert np.array_equal(a, replicate_rng(5, 3).random(4))
    assert not np.array_equal(a, replicate_rng(5, 4).random(4))
    assert not np.array_equal(a, replicate_rng(6, 3).random(4))


def test_replicate_contract(small_run):
    _, summary, records = small_run
    assert [r.replicate_index for r in records] == list(range(40))
    for r in records:
        total, exposed, unexposed = r.event_counts
        assert exposed + unexposed == total
        assert [e.estimator_id for e in r.estimates] == list(ESTIMATORS)
        if r.degenerate:
            assert all(e.log_or == math.inf for e in r.estimates)
    assert summary.n_replicates == 40
    for s in summary.estimator_stats.values():
        assert s.frac_infinite >= summary.events["frac_zero_unexposed"]


def test_single_replicate_summary_has_undefined_sd():
    summary, _ = run_experiment(build_scenario("I"), 1, 3, oracle_sample_size=None)
    assert math.isnan(summary.events["events_sd"])
    assert all(math.isnan(s.sd) for s in summary.estimator_stats.values())
    json.loads(dumps_json(summary.to_dict()).replace("NaN", "null"))


def test_worker_count_does_not_change_records():
    scenario = build_scenario("III")
    serial = run_replicates(scenario, 12, 11, workers=1, chunk_size=5)
    parallel = run_replicates(scenario, 12, 11, workers=2, chunk_size=5)
    for a, b in zip(serial, parallel):
        assert a.event_counts == b.event_counts
        assert [e.log_or for e in a.estimates] == [e.log_or for e in b.estimates]


def test_replicate_matches_direct_run(small_run):
    scenario, _, records = small_run
    again = run_replicate(scenario, 7, 5)
    assert [e.log_or for e in again.estimates] == [e.log_or for e in records[5].estimates]


def test_invalid_counts():
    with pytest.raises(ValueError):
        run_replicates(build_scenario("I"), 0, 1)
    with pytest.raises(ValueError):
        run_replicates(build_scenario("I"), 3, 1, workers=0)


def fake_summary(stats, n=1000):
    return SimulationSummary("I", n, 0, {}, {}, stats, None)


def stat(q25, q75, q05=-1.0, q95=1.0):
    quantiles = {0.01: -2, 0.05: q05, 0.25: q25, 0.5: 0, 0.75: q75, 0.95: q95, 0.99: 2}
    return EstimatorStats(10, 0.0, 1.0, quantiles, 0.0, 0.0)


def test_spread_ranking_order_and_ties():
    equal = {name: stat(-1, 1) for name in ESTIMATORS}
    assert spread_ranking(fake_summary(equal)) == list(ESTIMATORS)
    varied = dict(equal)
    varied["ipw_all"] = stat(-2, 2)
    varied["reg_cie"] = stat(-1, 1, -3, 3)
    ranking = spread_ranking(fake_summary(varied))
    assert ranking[:2] == ["ipw_all", "reg_cie"]
    with pytest.raises(ValueError):
        spread_ranking(fake_summary(equal, n=999))


def test_silverman_against_formula():
    x = np.random.default_rng(0).normal(size=500)
    iqr = stats.iqr(x)
    expected = 0.9 * min(np.std(x, ddof=1), iqr / 1.34) * 500 ** -0.2
    assert silverman_bandwidth(x) == pytest.approx(expected, rel=1e-12)


def test_density_matches_direct_kernel_sum_and_integrates_to_finite_share():
    rng = np.random.default_rng(1)
    values = np.concatenate([rng.normal(1.0, 0.5, 990), np.full(10, np.inf)])
    dens = density_on_grid(values)
    finite = values[np.isfinite(values)]
    h = silverman_bandwidth(finite)
    direct = stats.norm.pdf((GRID[:, None] - finite[None, :]) / h).sum(axis=1) / (len(finite) * h)
    np.testing.assert_allclose(dens, direct * 0.99, rtol=1e-9, atol=1e-15)
    assert np.trapezoid(dens, GRID) == pytest.approx(0.99, abs=1e-2)


def test_tail_curves():
    finite = np.linspace(-1, 3, 101)
    tail = tail_on_grid(finite)
    assert tail[-1] == 0.0 and tail[0] == 1.0
    assert np.all(np.diff(tail) <= 0)
    with_inf = np.concatenate([finite, np.full(1, np.inf), np.full(1, np.nan)])
    assert tail_on_grid(with_inf)[-1] == pytest.approx(1 / 102)


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, -2.5e-300, 12345.678901234567):
        assert float(fmt(x)) == x
    assert (fmt(math.inf), fmt(-math.inf), fmt(math.nan)) == ("inf", "-inf", "nan")


def test_output_tree_and_determinism(tmp_path, small_run):
    scenario, summary, records = small_run
    write_outputs(summary, records, tmp_path / "a")
    again_summary, again_records = run_experiment(scenario, 40, 7, workers=2, oracle_sample_size=10**5)
    write_outputs(again_summary, again_records, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    assert not filecmp.dircmp(tmp_path / "a" / "distributions", tmp_path / "b" / "distributions").diff_files
    names = {p.name for p in (tmp_path / "a" / "distributions").iterdir()}
    assert {f"tail_{e}.csv" for e in ESTIMATORS} <= names and "reference_lines.csv" in names
    lines = (tmp_path / "a" / "replicates.csv").read_text().splitlines()
    assert len(lines) == 1 + 40 * len(ESTIMATORS)


def test_summary_rebuilds_from_records(small_run):
    scenario, summary, records = small_run
    again = summarize(records, scenario, 7, summary.true_effects)
    assert dumps_json(again.to_dict()) == dumps_json(summary.to_dict())
