import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrseg.errors import DataValidationError, PreconditionError
from corrseg.metrics import (MetricsReport, RegionMetrics, SubsetRow,
                             border_voxels, dice_score, hausdorff,
                             region_extract, sensitivity)

from oracles import (border_set, dice_score_sets, hausdorff_all_pairs,
                     sensitivity_sets)


def random_mask(rng, shape=(6, 6, 6), p=0.25):
    return rng.random(shape) < p


class TestRegionExtract:
    def test_background_only_gives_empty_masks(self):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        for region in ("WT", "TC", "ET"):
            assert not region_extract(labels, region).any()

    def test_single_enhancing_voxel_in_all_regions(self):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        labels[2, 2, 2] = 3
        for region in ("WT", "TC", "ET"):
            mask = region_extract(labels, region)
            assert mask.sum() == 1 and mask[2, 2, 2]

    @pytest.mark.parametrize("seed", range(10))
    def test_nesting_et_tc_wt(self, seed):
        labels = np.random.default_rng(seed).integers(0, 4, size=(5, 5, 5))
        wt = region_extract(labels, "WT")
        tc = region_extract(labels, "TC")
        et = region_extract(labels, "ET")
        assert (et <= tc).all() and (tc <= wt).all()

    def test_out_of_range_labels_rejected(self):
        labels = np.full((2, 2, 2), 7)
        with pytest.raises(DataValidationError):
            region_extract(labels, "WT")

    def test_unknown_region_rejected(self):
        with pytest.raises(PreconditionError):
            region_extract(np.zeros((2, 2, 2), dtype=int), "XX")


class TestCountingMetrics:
    def test_identical_nonempty_masks(self, rng):
        m = random_mask(rng)
        m[0, 0, 0] = True
        assert dice_score(m, m) == 1.0
        assert sensitivity(m, m) == 1.0

    def test_partial_overlap_half(self):
        pred = np.zeros((3, 3, 3), dtype=bool)
        gt = np.zeros((3, 3, 3), dtype=bool)
        pred[0, 0, 0] = pred[0, 0, 1] = True
        gt[0, 0, 1] = gt[0, 0, 2] = True
        assert dice_score(pred, gt) == pytest.approx(0.5)

    def test_superset_prediction_full_sensitivity(self, rng):
        gt = random_mask(rng)
        gt[1, 1, 1] = True
        pred = gt | random_mask(rng)
        assert sensitivity(pred, gt) == 1.0

    def test_disjoint_zero_sensitivity(self):
        pred = np.zeros((3, 3, 3), dtype=bool)
        gt = np.zeros((3, 3, 3), dtype=bool)
        pred[0, 0, 0] = True
        gt[2, 2, 2] = True
        assert sensitivity(pred, gt) == 0.0

    def test_empty_conventions(self):
        empty = np.zeros((3, 3, 3), dtype=bool)
        some = empty.copy()
        some[1, 1, 1] = True
        assert dice_score(empty, empty) == 1.0
        assert sensitivity(some, empty) == 1.0

    @pytest.mark.parametrize("seed", range(25))
    def test_matches_voxel_set_oracle_exactly(self, seed):
        r = np.random.default_rng(seed)
        pred = random_mask(r, (5, 5, 5), p=r.uniform(0.05, 0.6))
        gt = random_mask(r, (5, 5, 5), p=r.uniform(0.05, 0.6))
        assert dice_score(pred, gt) == dice_score_sets(pred, gt)
        assert sensitivity(pred, gt) == sensitivity_sets(pred, gt)

    def test_symmetry_of_dice(self, rng):
        a, b = random_mask(rng), random_mask(rng)
        assert dice_score(a, b) == dice_score(b, a)

    @pytest.mark.parametrize("seed", range(10))
    def test_unit_dice_iff_masks_equal(self, seed):
        r = np.random.default_rng(seed)
        a = random_mask(r, p=0.4)
        a[2, 2, 2] = True   # nonempty
        assert dice_score(a, a.copy()) == 1.0
        b = a.copy()
        z, y, x = r.integers(0, 6, size=3)
        b[z, y, x] = not b[z, y, x]
        assert dice_score(a, b) < 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(PreconditionError):
            dice_score(np.zeros((2, 2, 2), bool), np.zeros((3, 3, 3), bool))


class TestHausdorff:
    def test_identical_masks_zero(self, rng):
        m = random_mask(rng)
        m[2, 2, 2] = True
        assert hausdorff(m, m) == 0.0

    def test_pythagorean_offset(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[1, 1, 1] = True
        b[4, 5, 1] = True   # offset (3, 4, 0)
        assert hausdorff(a, b) == pytest.approx(5.0)

    def test_empty_side_undefined(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        some = m.copy()
        some[0, 0, 0] = True
        assert np.isnan(hausdorff(m, some))
        assert np.isnan(hausdorff(some, m))
        assert np.isnan(hausdorff(m, m))

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_all_pairs_oracle_exactly(self, seed):
        r = np.random.default_rng(seed)
        shape = tuple(r.integers(3, 9, size=3))
        pred = random_mask(r, shape, p=r.uniform(0.1, 0.5))
        gt = random_mask(r, shape, p=r.uniform(0.1, 0.5))
        got = hausdorff(pred, gt)
        want = hausdorff_all_pairs(pred, gt)
        if np.isnan(want):
            assert np.isnan(got)
        else:
            assert got == pytest.approx(want, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = random_mask(rng), random_mask(rng)
        a[1, 1, 1] = b[3, 3, 3] = True
        assert hausdorff(a, b) == hausdorff(b, a)

    def test_border_matches_loop_oracle(self, rng):
        m = random_mask(rng, (5, 6, 4), p=0.4)
        got = {tuple(c) for c in border_voxels(m)}
        assert got == set(border_set(m))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000),
           dz=st.integers(-2, 2), dy=st.integers(-2, 2),
           dx=st.integers(-2, 2))
    def test_translation_invariance(self, seed, dz, dy, dx):
        r = np.random.default_rng(seed)
        core = random_mask(r, (4, 4, 4), p=0.5)
        core2 = random_mask(r, (4, 4, 4), p=0.5)
        if not core.any() or not core2.any():
            return
        a = np.zeros((10, 10, 10), dtype=bool)
        b = np.zeros((10, 10, 10), dtype=bool)
        a[3:7, 3:7, 3:7] = core
        b[3:7, 3:7, 3:7] = core2
        base = hausdorff(a, b)
        shifted = hausdorff(np.roll(a, (dz, dy, dx), axis=(0, 1, 2)),
                            np.roll(b, (dz, dy, dx), axis=(0, 1, 2)))
        assert shifted == pytest.approx(base, abs=1e-9)


def _report(rows_values):
    rows = []
    for bits, vals in rows_values:
        regions = {r: RegionMetrics(*vals[r]) for r in ("WT", "TC", "ET")}
        rows.append(SubsetRow(subset=bits, regions=regions, cases=2))
    return MetricsReport(rows=rows, meta={"training_regime": "full_modality"})


class TestReporting:
    def test_csv_layout_and_na(self):
        report = _report([
            ("1111", {"WT": (0.9, 0.8, 2.0), "TC": (0.7, 0.6, 3.0),
                      "ET": (0.5, 0.4, float("nan"))}),
        ])
        csv = report.to_csv()
        lines = csv.strip().splitlines()
        assert lines[0] == "# training_regime=full_modality"
        assert lines[1] == "subset,region,dice,sensitivity,hausdorff"
        assert lines[2] == "1111,WT,0.9000,0.8000,2.0000"
        assert lines[4].endswith("NA")
        avg = lines[5].split(",")
        assert avg[1] == "average"
        # undefined hausdorff excluded from the average
        assert float(avg[4]) == pytest.approx((2.0 + 3.0) / 2)

    def test_wins_prefer_low_hausdorff(self):
        report = _report([
            ("1000", {"WT": (0.9, 0.9, 5.0), "TC": (0.9, 0.9, 5.0),
                      "ET": (0.9, 0.9, 5.0)}),
            ("1111", {"WT": (0.8, 0.8, 1.0), "TC": (0.8, 0.8, 1.0),
                      "ET": (0.8, 0.8, 1.0)}),
        ])
        wins = report.wins()
        assert wins["dice"] == "1000"
        assert wins["hausdorff"] == "1111"
        table = report.to_table()
        assert table.strip().splitlines()[-1].lstrip().startswith("wins")

    def test_single_row_table_has_no_wins(self):
        report = _report([
            ("1111", {"WT": (0.9, 0.8, 2.0), "TC": (0.7, 0.6, 3.0),
                      "ET": (0.5, 0.4, 1.0)}),
        ])
        assert "wins" not in report.to_table()
