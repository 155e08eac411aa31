import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from roadbev import metrics as mx
from roadbev.elevation import ElevationMap
from roadbev.errors import ContractError, EvaluationError


def maps_from_errors(errors, mask=None):
    errors = np.asarray(errors, dtype=np.float64)
    gt = ElevationMap(np.zeros(errors.shape), np.ones(errors.shape, dtype=bool)
                      if mask is None else mask)
    pred = ElevationMap(errors, np.ones(errors.shape, dtype=bool))
    return pred, gt


def test_perfect_prediction():
    pred, gt = maps_from_errors(np.zeros((4, 5)))
    rep = mx.compute_metrics(pred, gt)
    assert rep.abs_err == 0.0 and rep.rmse == 0.0 and rep.frac_gt_half_cm == 0.0
    assert rep.n_valid == 20


def test_uniform_one_cm_bias():
    pred, gt = maps_from_errors(np.ones((3, 3)))
    rep = mx.compute_metrics(pred, gt)
    assert rep.abs_err == pytest.approx(1.0)
    assert rep.rmse == pytest.approx(1.0)
    assert rep.frac_gt_half_cm == 1.0


def test_three_cell_hand_case():
    # |errors| = {0.2, 0.2, 1.0}: abs = 0.4667, rmse = sqrt(1.08/3) = 0.6, frac = 1/3
    pred, gt = maps_from_errors(np.array([[0.2, -0.2, 1.0]]))
    rep = mx.compute_metrics(pred, gt)
    assert rep.abs_err == pytest.approx(1.4 / 3, abs=1e-12)
    assert rep.rmse == pytest.approx(0.6, abs=1e-12)
    assert rep.frac_gt_half_cm == pytest.approx(1.0 / 3, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(errors=hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1),
                         elements=st.floats(-50, 50)))
def test_rmse_dominates_abs_err_on_random_inputs(errors):
    rep = mx.compute_metrics(*maps_from_errors(errors))
    assert rep.rmse >= rep.abs_err >= 0.0


def test_sign_symmetry():
    rng = np.random.default_rng(1)
    errors = rng.normal(size=(5, 5))
    rep_pos = mx.compute_metrics(*maps_from_errors(errors))
    rep_neg = mx.compute_metrics(*maps_from_errors(-errors))
    assert rep_pos.abs_err == rep_neg.abs_err
    assert rep_pos.rmse == rep_neg.rmse
    assert rep_pos.frac_gt_half_cm == rep_neg.frac_gt_half_cm


def test_masked_cells_never_contribute():
    rng = np.random.default_rng(2)
    mask = rng.random((8, 8)) > 0.5
    gt = ElevationMap(np.where(mask, rng.normal(size=(8, 8)), 0.0), mask)
    pred_values = rng.normal(size=(8, 8))
    pred = ElevationMap(pred_values, np.ones((8, 8), dtype=bool))
    rep1 = mx.compute_metrics(pred, gt)
    prof1 = mx.distance_profile(pred, gt)
    # flip prediction under masked-out cells: everything must be bit-identical
    flipped = pred_values.copy()
    flipped[~mask] = 1e6
    rep2 = mx.compute_metrics(ElevationMap(flipped, np.ones((8, 8), dtype=bool)), gt)
    prof2 = mx.distance_profile(ElevationMap(flipped, np.ones((8, 8), dtype=bool)), gt)
    assert rep1.abs_err == rep2.abs_err
    assert rep1.rmse == rep2.rmse
    assert rep1.frac_gt_half_cm == rep2.frac_gt_half_cm
    assert prof1.abs_err == prof2.abs_err


def test_empty_mask_is_an_evaluation_error():
    gt = ElevationMap(np.zeros((2, 2)), np.zeros((2, 2), dtype=bool))
    pred = ElevationMap(np.zeros((2, 2)), np.ones((2, 2), dtype=bool))
    with pytest.raises(EvaluationError):
        mx.compute_metrics(pred, gt)


def test_shape_mismatch_is_contract_error():
    a = ElevationMap(np.zeros((2, 2)), np.ones((2, 2), dtype=bool))
    b = ElevationMap(np.zeros((3, 2)), np.ones((3, 2), dtype=bool))
    with pytest.raises(ContractError):
        mx.compute_metrics(a, b)


def test_segment_partition_of_default_grid():
    ranges = mx.segment_rows(164)
    assert len(ranges) == 15
    counts = [hi - lo for lo, hi in ranges]
    assert counts == [11] * 14 + [10]
    assert ranges[0] == (0, 11) and ranges[-1] == (154, 164)


def test_profile_uniform_error_and_single_segment():
    pred, gt = maps_from_errors(np.full((164, 4), 0.7))
    prof = mx.distance_profile(pred, gt)
    assert len(prof.abs_err) == 15
    assert all(e == pytest.approx(0.7) for e in prof.abs_err)

    errors = np.zeros((164, 4))
    errors[:11] = 0.3
    pred, gt = maps_from_errors(errors)
    prof = mx.distance_profile(pred, gt)
    assert prof.abs_err[0] == pytest.approx(0.3)
    assert all(e == 0.0 for e in prof.abs_err[1:])


def test_profile_weighted_mean_equals_global_abs_err():
    rng = np.random.default_rng(3)
    mask = rng.random((164, 64)) > 0.3
    gt = ElevationMap(np.where(mask, rng.normal(size=(164, 64)), 0.0), mask)
    pred = ElevationMap(rng.normal(size=(164, 64)), np.ones((164, 64), dtype=bool))
    rep = mx.compute_metrics(pred, gt)
    prof = mx.distance_profile(pred, gt)
    total = sum(e * n for e, n in zip(prof.abs_err, prof.n_valid) if e is not None)
    assert total / sum(prof.n_valid) == pytest.approx(rep.abs_err, abs=1e-9)


def test_profile_reports_empty_segments_as_absent():
    mask = np.zeros((164, 4), dtype=bool)
    mask[:11] = True
    gt = ElevationMap(np.zeros((164, 4)), mask)
    pred = ElevationMap(np.ones((164, 4)), np.ones((164, 4), dtype=bool))
    prof = mx.distance_profile(pred, gt)
    assert prof.abs_err[0] == pytest.approx(1.0)
    assert all(e is None for e in prof.abs_err[1:])


def test_accumulator_pools_cells():
    rng = np.random.default_rng(4)
    acc = mx.MetricAccumulator()
    all_errors = []
    for _ in range(3):
        errors = rng.normal(size=(5, 5))
        pred, gt = maps_from_errors(errors)
        acc.add(pred, gt, wall_time=0.5)
        all_errors.append(errors.ravel())
    rep = acc.report()
    flat = np.concatenate(all_errors)
    assert rep.abs_err == pytest.approx(np.abs(flat).mean())
    assert rep.rmse == pytest.approx(np.sqrt((flat ** 2).mean()))
    assert rep.n_valid == flat.size
    assert rep.wall_time_per_frame == pytest.approx(0.5)


def test_class_interval_sweep_matches_expected_class_counts():
    overrides = mx.class_interval_sweep()
    assert [o["class_interval_cm"] for o in overrides] == [2.0, 1.6, 1.0, 0.8, 0.5, 0.4]


def test_stereo_volume_sweep_is_two_by_two():
    rows = mx.stereo_volume_sweep()
    assert len(rows) == 4
    combos = {(r["model.feature_stride"], r["model.volume_mode"]) for r in rows}
    assert combos == {(4, "subtract"), (4, "multiply"), (2, "subtract"), (2, "multiply")}
