import numpy as np
import pytest

from rheovision import evaluator as ev
from rheovision.exceptions import InputError


def rec(cid, y, y_hat, mask=(True, True, True), run="run_01", slump_id=0, rheo_id=0):
    return ev.PredictionRecord(concrete_id=cid, run_id=run, slump_ref_id=slump_id,
                               rheo_ref_id=rheo_id, y=np.array(y, float),
                               y_hat=np.array(y_hat, float), mask=np.array(mask))


def brute_force_metrics(records):
    """Independent double-loop implementation of the two error measures."""
    eps_abs, eps_rel = [], []
    for k in range(3):
        concretes = {}
        for r in records:
            if r.mask[k] and r.y[k] != 0:
                concretes.setdefault(r.concrete_id, []).append((r.y[k], r.y_hat[k]))
        inner_abs, inner_rel = [], []
        for entries in concretes.values():
            s_abs = sum(abs(y - yh) for y, yh in entries) / len(entries)
            s_rel = sum(abs(y - yh) / y for y, yh in entries) / len(entries) * 100
            inner_abs.append(s_abs)
            inner_rel.append(s_rel)
        eps_abs.append(np.mean(inner_abs) if inner_abs else np.nan)
        eps_rel.append(np.mean(inner_rel) if inner_rel else np.nan)
    return np.array(eps_rel), np.array(eps_abs)


class TestEpsilonMetrics:
    def test_perfect_predictions(self):
        records = [rec("a", [44, 200, 50], [44, 200, 50]) for _ in range(3)]
        report = ev.epsilon_metrics(records)
        np.testing.assert_allclose(report.eps_rel, 0.0)
        np.testing.assert_allclose(report.eps_abs, 0.0)

    def test_hand_computed_single_concrete(self):
        records = [rec("a", [44, 200, 50], [41, 200, 50]),
                   rec("a", [44, 200, 50], [47, 200, 50])]
        report = ev.epsilon_metrics(records)
        assert report.eps_abs[0] == pytest.approx(3.0)
        assert report.eps_rel[0] == pytest.approx(3.0 / 44 * 100, abs=1e-9)
        assert round(report.eps_rel[0], 2) == 6.82

    def test_concrete_weighting(self):
        small = [rec("a", [40, 200, 50], [42, 200, 50])]
        big = [rec("b", [40, 200, 50], [44, 200, 50]) for _ in range(100)]
        base = ev.epsilon_metrics(small + big).eps_abs[0]
        assert base == pytest.approx((2 + 4) / 2)
        doubled = [rec("b", [40, 200, 50], [48, 200, 50]) for _ in range(100)]
        bumped = ev.epsilon_metrics(small + doubled).eps_abs[0]
        # doubling one concrete's error moves the 2-concrete mean by half the delta
        assert bumped - base == pytest.approx(4 / 2)

    def test_matches_brute_force_on_random_data(self):
        rng = np.random.default_rng(0)
        records = []
        for i in range(200):
            mask = rng.random(3) > 0.2
            mask[0] = True
            records.append(rec(f"c{i % 7}", rng.uniform(20, 600, 3), rng.uniform(20, 600, 3),
                               mask=tuple(mask), run=f"run_{i % 3}", slump_id=i % 2,
                               rheo_id=i % 4))
        report = ev.epsilon_metrics(records)
        brute_rel, brute_abs = brute_force_metrics(records)
        np.testing.assert_allclose(report.eps_rel, brute_rel, atol=1e-12)
        np.testing.assert_allclose(report.eps_abs, brute_abs, atol=1e-12)

    def test_masked_concretes_excluded_per_output(self):
        records = [rec("a", [44, 200, 50], [40, 999, 999], mask=(True, False, False)),
                   rec("b", [44, 200, 50], [44, 190, 45])]
        report = ev.epsilon_metrics(records)
        assert report.eps_abs[1] == pytest.approx(10.0)  # only concrete b counts
        assert report.eps_abs[0] == pytest.approx(2.0)   # both count for delta

    def test_zero_reference_excluded_with_warning(self):
        records = [rec("a", [0.0, 200, 50], [1.0, 200, 50]), rec("b", [44, 200, 50], [43, 200, 50])]
        with pytest.warns(UserWarning, match="reference value 0"):
            report = ev.epsilon_metrics(records)
        assert report.eps_abs[0] == pytest.approx(1.0)


class TestAveraging:
    def test_identical_predictions_mean_is_element(self):
        records = [rec("a", [44, 200, 50], [41, 210, 52]) for _ in range(5)]
        out = ev.average_predictions(records, "per_run")
        assert len(out) == 1
        np.testing.assert_allclose(out[0].y_hat, [41, 210, 52])
        assert out[0].group_size == 5

    def test_symmetric_noise_cancels(self):
        records = [rec("a", [44, 200, 50], [44 + 3, 200, 50]),
                   rec("a", [44, 200, 50], [44 - 3, 200, 50])]
        out = ev.average_predictions(records, "per_run")
        report = ev.epsilon_metrics(out)
        assert report.eps_abs[0] == pytest.approx(0.0)

    def test_singleton_groups_equal_plain_metrics(self):
        rng = np.random.default_rng(1)
        records = [rec(f"c{i}", rng.uniform(30, 60, 3), rng.uniform(30, 60, 3),
                       run=f"run_{i}", slump_id=i, rheo_id=i) for i in range(20)]
        plain = ev.epsilon_metrics(records)
        grouped = ev.epsilon_metrics(ev.average_predictions(records, "per_run"))
        np.testing.assert_allclose(grouped.eps_rel, plain.eps_rel, atol=1e-12)

    def test_all_runs_pools_across_runs(self):
        records = [rec("a", [44, 200, 50], [44 + d, 200, 50], run=f"run_{i}")
                   for i, d in enumerate([-2.0, 2.0])]
        per_run = ev.average_predictions(records, "per_run")
        all_runs = ev.average_predictions(records, "all_runs")
        assert len(per_run) == 2
        assert len(all_runs) == 1
        assert all_runs[0].group_size == 2

    def test_per_reference_groups_by_measurement(self):
        # two combos share the slump measurement but not the rheometer one
        records = [rec("a", [44, 200, 50], [42, 210, 52], slump_id=0, rheo_id=0),
                   rec("a", [44, 260, 70], [46, 250, 65], slump_id=0, rheo_id=1)]
        out = ev.average_predictions(records, "per_reference")
        slump_side = [r for r in out if r.mask[0]]
        rheo_side = [r for r in out if r.mask[1]]
        assert len(slump_side) == 1 and slump_side[0].group_size == 2
        assert len(rheo_side) == 2
        assert slump_side[0].y_hat[0] == pytest.approx(44.0)

    def test_noise_shrinks_like_inverse_sqrt_group_size(self):
        rng = np.random.default_rng(2)
        sigma = 4.0
        results = {}
        for g in (40, 540):
            records = []
            for c in range(100):
                truth = rng.uniform(35, 55)
                for _ in range(g):
                    noisy = truth + rng.normal(0, sigma)
                    records.append(rec(f"c{c}", [truth, 200, 50], [noisy, 200, 50],
                                       slump_id=0, rheo_id=0))
            report = ev.epsilon_metrics(ev.average_predictions(records, "all_runs"))
            results[g] = report.eps_abs[0]
        # mean |N(0, sigma/sqrt(G))| = sigma*sqrt(2/(pi*G))
        for g in (40, 540):
            expected = sigma * np.sqrt(2 / (np.pi * g))
            assert results[g] == pytest.approx(expected, rel=0.2)
        assert results[540] < results[40]

    def test_unknown_grouping_rejected(self):
        with pytest.raises(InputError, match="grouping"):
            ev.average_predictions([], "bogus")

    def test_averaging_study_csv(self):
        rng = np.random.default_rng(3)
        records = [rec(f"c{i % 3}", rng.uniform(30, 60, 3), rng.uniform(30, 60, 3),
                       run=f"run_{i % 2}", slump_id=i % 2, rheo_id=i % 2) for i in range(24)]
        results = ev.averaging_study(records)
        text = ev.averaging_csv(results)
        rows = ev.parse_csv(text)
        assert rows[0]["grouping"] == "none"
        assert len(rows) == 4 * 3
        assert {r["output"] for r in rows} == {"delta", "tau0", "mu"}


class TestSweep:
    def make_net_and_sets(self, zero_dt_weights=False):
        from rheovision.model import PropertyNet, tiny_config
        from rheovision import datapipe as dp
        cfg = tiny_config(image_size=8, mix_dim=18)
        net = PropertyNet(cfg, seed=0)
        if zero_dt_weights:
            emb = cfg.embedding_len
            net.fcs[0].weights.value[:, emb:emb + 2] = 0.0
        rng = np.random.default_rng(4)
        sets = []
        for i in range(5):
            sets.append(dp.InputSet(
                image=rng.random((4, 8, 8)).astype(np.float32), channels=("O", "D", "OFx", "OFy"),
                delta_t=np.zeros(2, np.float32), mix=rng.uniform(0, 2, 18).astype(np.float32),
                targets=np.array([44 - i, 200 + i, 50 + i], np.float32),
                target_mask=np.ones(3, bool), concrete_id="c0", run_id="run_01",
                frame_index=20 + i, slump_ref_id=0, rheo_ref_id=0))
        stats = dp.NormStats(mean={c: 0.0 for c in dp.NORM_CATEGORIES},
                             std={c: 1.0 for c in dp.NORM_CATEGORIES})
        return net, sets, stats

    def test_grid_count_and_n_averaged(self):
        net, sets, stats = self.make_net_and_sets()
        curve = ev.time_sweep(net, stats, sets, 0.0, 60.0, t_central_min=20.0)
        assert len(curve.minutes) == 61
        assert curve.predictions.shape == (61, 3)
        assert curve.n_averaged == 5
        assert curve.error_bar == pytest.approx(2.46)

    def test_zeroed_dt_weights_give_constant_curve(self):
        net, sets, stats = self.make_net_and_sets(zero_dt_weights=True)
        curve = ev.time_sweep(net, stats, sets, 0.0, 30.0, t_central_min=10.0)
        spread = curve.predictions.max(axis=0) - curve.predictions.min(axis=0)
        np.testing.assert_allclose(spread, 0.0, atol=1e-5)

    def test_empty_run_rejected(self):
        net, _, stats = self.make_net_and_sets()
        with pytest.raises(InputError, match="non-empty"):
            ev.time_sweep(net, stats, [], 0.0, 10.0, t_central_min=5.0)

    def test_reversed_interval_rejected(self):
        net, sets, stats = self.make_net_and_sets()
        with pytest.raises(InputError, match="interval"):
            ev.time_sweep(net, stats, sets, 30.0, 10.0, t_central_min=5.0)

    def test_sweep_csv_and_svg(self):
        net, sets, stats = self.make_net_and_sets()
        curve = ev.time_sweep(net, stats, sets, 0.0, 10.0, t_central_min=5.0)
        rows = ev.parse_csv(ev.sweep_csv(curve))
        assert len(rows) == 11
        assert rows[0]["n_averaged"] == "5"
        svg = ev.sweep_svg(curve)
        assert svg.startswith("<svg") and "polyline" in svg


def test_metrics_csv_round_trip():
    records = [rec("a", [44, 200, 50], [42, 210, 52])]
    report = ev.epsilon_metrics(records)
    rows = ev.metrics_csv_rows(report, "D+m+OF", 0, 1)
    parsed = ev.parse_csv("\n".join([ev.METRICS_HEADER] + rows))
    assert parsed[0]["combination"] == "D+m+OF"
    assert float(parsed[0]["eps_rel"]) == pytest.approx(report.eps_rel[0], abs=1e-5)
