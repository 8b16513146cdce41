import numpy as np
import pytest

from rheovision import protocol as p
from rheovision.exceptions import ProtocolError


def slump(ts, value, plausible=True):
    return p.ReferenceMeasurement("slump", ts, (value,), plausible)


def rheo(ts, tau0, mu, plausible=True):
    return p.ReferenceMeasurement("rheometer", ts, (tau0, mu), plausible)


class TestDeltaT:
    def test_zero_offset(self):
        combo = p.ReferenceCombination(slump(20.0, 45.0), rheo(25.0, 200.0, 50.0), 0, 0)
        dt = p.compute_delta_t(20.0, combo)
        assert dt[0] == pytest.approx(0.0)
        assert dt[1] == pytest.approx(5.0)

    def test_dataset_minimum(self):
        combo = p.ReferenceCombination(slump(10.12, 45.0), rheo(30.0, 200.0, 50.0), 0, 0)
        assert p.compute_delta_t(60.0, combo)[0] == pytest.approx(-49.88)

    def test_dataset_maximum(self):
        combo = p.ReferenceCombination(slump(30.0, 45.0), rheo(97.16, 200.0, 50.0), 0, 0)
        assert p.compute_delta_t(10.0, combo)[1] == pytest.approx(87.16)

    def test_antisymmetry(self):
        a, b = 17.5, 42.25
        combo_b = p.ReferenceCombination(slump(b, 45.0), rheo(b, 200.0, 50.0), 0, 0)
        combo_a = p.ReferenceCombination(slump(a, 45.0), rheo(a, 200.0, 50.0), 0, 0)
        np.testing.assert_allclose(p.compute_delta_t(a, combo_b),
                                   -p.compute_delta_t(b, combo_a))


class TestCombinations:
    def test_cartesian_product(self):
        refs = [slump(9, 44), slump(39, 40), slump(69, 37),
                rheo(10, 150, 40), rheo(40, 200, 55), rheo(70, 260, 70)]
        combos = p.enumerate_combinations(refs)
        assert len(combos) == 9

    def test_single_pair(self):
        combos = p.enumerate_combinations([slump(9, 44), rheo(10, 150, 40)])
        assert len(combos) == 1
        np.testing.assert_allclose(combos[0].targets, [44, 150, 40])

    def test_implausible_restricts_mask(self):
        refs = ([slump(t, 40 + t / 10) for t in (9, 25, 41, 60)]
                + [rheo(10, 150, 40), rheo(40, 200, 55, plausible=False), rheo(70, 260, 70)])
        combos = p.enumerate_combinations(refs)
        assert len(combos) == 12
        restricted = [c for c in combos if not c.target_mask[1]]
        assert len(restricted) == 4
        for c in restricted:
            np.testing.assert_array_equal(c.target_mask, [True, False, False])

    def test_missing_kind_raises(self):
        with pytest.raises(ProtocolError, match="at least one"):
            p.enumerate_combinations([slump(9, 44)])

    def test_round_robin_offset_deterministic(self):
        a = p.combination_offset(7, "concrete_003", "run_02", 9)
        b = p.combination_offset(7, "concrete_003", "run_02", 9)
        assert a == b
        assert 0 <= a < 9


class TestMixDesign:
    def make(self):
        entries = {k: 1.0 for k in p.MIX_KEYS}
        for i, k in enumerate(p.MIX_KEYS[p.GRADING_SLICE]):
            entries[k] = 0.1 * (i + 1)
        return p.MixDesign.from_dict(entries)

    def test_round_trip_file(self, tmp_path):
        design = self.make()
        path = tmp_path / "mix.txt"
        p.write_mix_file(path, design)
        loaded = p.read_mix_file(path)
        np.testing.assert_array_equal(loaded.values, design.values)

    def test_out_of_range_rejected(self):
        design = self.make()
        design.values[0] = 2.5
        with pytest.raises(ProtocolError, match="water_cement_ratio"):
            design.validate()

    def test_decreasing_grading_rejected(self):
        design = self.make()
        design.values[p.GRADING_SLICE][5] = 0.0
        with pytest.raises(ProtocolError, match="nondecreasing"):
            design.validate()

    def test_run_tags_scaled(self):
        v = self.make().with_run_tags(0.2, 30)
        assert v[p.MIX_KEYS.index("paddle_velocity")] == pytest.approx(0.2 / 0.3)
        assert v[p.MIX_KEYS.index("frame_rate")] == pytest.approx(0.75)
        v = self.make().with_run_tags(0.45, 60)
        assert v[p.MIX_KEYS.index("paddle_velocity")] == pytest.approx(1.5)
        assert v[p.MIX_KEYS.index("frame_rate")] == pytest.approx(1.5)

    def test_mix_indices_without_materials(self):
        idx = p.mix_indices(False)
        assert [p.MIX_KEYS[i] for i in idx] == list(p.NON_MATERIAL_KEYS)
        assert len(p.mix_indices(True)) == 18


class TestReferencesCsv:
    def test_round_trip(self, tmp_path):
        refs = [slump(9.5, 44.25), rheo(10.75, 150.5, 40.125, plausible=False)]
        path = tmp_path / "references.csv"
        p.write_references_csv(path, refs)
        loaded = p.read_references_csv(path)
        assert loaded[0].kind == "slump"
        assert loaded[0].values == (44.25,)
        assert loaded[1].values == (150.5, 40.125)
        assert loaded[1].plausible is False

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "references.csv"
        path.write_text("nope\n")
        with pytest.raises(ProtocolError, match="header"):
            p.read_references_csv(path)


class TestInputCombinations:
    def test_channel_counts(self):
        assert p.parse_combination("O+D").channels == ("O", "D")
        assert p.parse_combination("D+m+OF").channels == ("D", "OFx", "OFy")
        assert p.parse_combination("O+D+m+OF").channels == ("O", "D", "OFx", "OFy")

    def test_mix_usage(self):
        assert p.parse_combination("O+D").use_mix is False
        assert p.parse_combination("O+m").mix_dim == 18
        assert p.parse_combination("O+D").mix_dim == 3

    def test_unknown_name_lists_valid(self):
        with pytest.raises(ProtocolError, match="O\\+D\\+m"):
            p.parse_combination("O+OF")


def make_summaries(n=45, n_recycled=5, seed=0):
    rng = np.random.default_rng(seed)
    deltas = rng.uniform(30, 63.5, n)
    recycled = set(rng.choice(n, size=n_recycled, replace=False).tolist())
    return [p.ConcreteSummary(f"concrete_{i:03d}", float(deltas[i]), i in recycled)
            for i in range(n)]


class TestFolds:
    def test_invariants_hold_at_full_scale(self):
        summaries = make_summaries()
        plan = p.make_folds(summaries, seed=1)
        plan.validate(summaries)
        assert len(plan.folds) == 5
        for fold in plan.folds:
            assert len(fold.test) == 9
            assert len(fold.val) == 5
            assert len(fold.train) == 31

    def test_different_seeds_differ_but_valid(self):
        summaries = make_summaries()
        plan_a = p.make_folds(summaries, seed=1)
        plan_b = p.make_folds(summaries, seed=2)
        assert plan_a.digest() != plan_b.digest()
        plan_a.validate(summaries)
        plan_b.validate(summaries)

    def test_deterministic_given_seed(self):
        summaries = make_summaries()
        assert p.make_folds(summaries, seed=3).digest() == p.make_folds(summaries, seed=3).digest()

    def test_seed_sweep_keeps_invariants(self):
        summaries = make_summaries(seed=7)
        for seed in range(50):
            p.make_folds(summaries, seed=seed).validate(summaries)

    def test_desk_scale(self):
        summaries = make_summaries(n=12, n_recycled=5, seed=3)
        plan = p.make_folds(summaries, seed=0, expected_total=12)
        plan.validate(summaries)
        assert sorted(len(f.test) for f in plan.folds) == [2, 2, 2, 3, 3]

    def test_wrong_counts_rejected(self):
        with pytest.raises(ProtocolError, match="expected 45"):
            p.make_folds(make_summaries(n=44, n_recycled=5), seed=0)
        with pytest.raises(ProtocolError, match="recycled"):
            p.make_folds(make_summaries(n=45, n_recycled=4), seed=0)

    def test_text_round_trip_and_digest(self):
        summaries = make_summaries()
        plan = p.make_folds(summaries, seed=4)
        clone = p.FoldPlan.from_text(plan.to_text())
        assert clone.digest() == plan.digest()
        clone.validate(summaries)

    def test_tertile_balance_at_full_scale(self):
        summaries = make_summaries(seed=11)
        plan = p.make_folds(summaries, seed=5)
        ordered = sorted(summaries, key=lambda s: (-s.delta1, s.concrete_id))
        tertile = {s.concrete_id: i // 15 for i, s in enumerate(ordered)}
        for fold in plan.folds:
            counts = [0, 0, 0]
            for cid in fold.test:
                counts[tertile[cid]] += 1
            assert counts == [3, 3, 3]
