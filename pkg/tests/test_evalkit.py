import math

import numpy as np
import pytest
from hypothesis import given, settings
from scipy.integrate import trapezoid
from hypothesis import strategies as st

from oracles import exhaustive_gmean, pair_count_auc, random_instance
from overlapscope.detector import ArchitectureSpec, build_model
from overlapscope.errors import InvalidArgument, UndefinedMetric
from overlapscope.evalkit import (
    Heatmap,
    confusion,
    gmean_threshold,
    heatmap_shape,
    roc_curve,
    sliding_heatmap,
    trace_contrast,
    write_heatmap,
    write_roc_csv,
    write_sweep_csv,
    SweepRow,
)
from overlapscope.noise import Frame
from overlapscope.pnm import read_pnm


def test_auc_perfect_separation():
    r = roc_curve([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert r.auc == 1.0
    assert r.points[0] == (0.0, 0.0) and r.points[-1] == (1.0, 1.0)


def test_auc_chance_level():
    rng = np.random.default_rng(0)
    s = rng.random(20_000)
    y = rng.integers(0, 2, size=20_000)
    assert roc_curve(s, y).auc == pytest.approx(0.5, abs=0.05)


def test_auc_small_example():
    scores, labels = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
    assert pair_count_auc(scores, labels) == 0.75
    assert roc_curve(scores, labels).auc == 0.75


def test_roc_single_class():
    with pytest.raises(UndefinedMetric):
        roc_curve([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_matches_pair_counting(seed):
    s, y = random_instance(np.random.default_rng(seed))
    r = roc_curve(s, y)
    assert abs(r.auc - pair_count_auc(s, y)) <= 1e-12
    fpr, tpr = r.fpr, r.tpr
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert r.auc == pytest.approx(trapezoid(tpr, fpr), abs=1e-12)


def test_gmean_perfect_separation_returns_gap_midpoint():
    c = gmean_threshold([0.1, 0.2, 0.7, 0.9], [0, 0, 1, 1])
    assert c.threshold == pytest.approx(0.45)
    assert c.gmean == 1.0


def test_gmean_all_equal_is_degenerate():
    c = gmean_threshold([0.3, 0.3, 0.3], [0, 1, 1])
    assert c.degenerate and c.threshold == 0.3


def test_gmean_six_point_example():
    scores, labels = [0.1, 0.2, 0.3, 0.6, 0.7, 0.9], [0, 0, 1, 0, 1, 1]
    best, t = exhaustive_gmean(scores, labels)
    c = gmean_threshold(scores, labels)
    assert c.gmean == pytest.approx(best)
    assert best == pytest.approx(math.sqrt(2 / 3))
    # 0.25, 0.45 and 0.65 all reach sqrt(2/3); the lowest wins
    assert c.threshold == pytest.approx(t) == pytest.approx(0.25)


def test_gmean_single_class():
    with pytest.raises(UndefinedMetric):
        gmean_threshold([0.1, 0.9], [0, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gmean_matches_exhaustive_search(seed):
    s, y = random_instance(np.random.default_rng(seed))
    c = gmean_threshold(s, y)
    best, t = exhaustive_gmean(s, y)
    if t is None:
        assert c.degenerate
    else:
        assert c.gmean == pytest.approx(best, abs=1e-12)
        assert c.threshold == t


def test_confusion_extremes():
    s, y = [0.2, 0.4, 0.6, 0.8], [0, 1, 0, 1]
    c = confusion(s, y, 0.0)
    assert (c.tpr, c.tnr) == (1.0, 0.0)
    c = confusion(s, y, 0.9)
    assert c.tp == c.fp == 0 and c.tn == 2 and c.fn == 2
    c = confusion(s, y, 0.6)  # ties go positive
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 1)
    assert c.total == 4 and c.accuracy == 0.5
    assert math.isnan(confusion([0.1], [0], 0.5).tpr)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(1, 20), st.integers(1, 60))
def test_heatmap_shape_formula(h_extra, w_extra, step, window):
    h, w = window + h_extra - 1, window + w_extra - 1
    rows, cols = heatmap_shape((h, w), window, step)
    assert rows == (h - window) // step + 1 and cols == (w - window) // step + 1


def _tiny(size):
    return ArchitectureSpec(input_size=size, channels=(2, 2, 2, 2, 2))


def test_heatmap_sizes_and_constant_model():
    arch = _tiny(201)
    m = build_model(arch, 0)
    for v in m.params.values():
        v[...] = 0
    f201 = Frame(np.zeros((201, 201), np.uint8), 8)
    assert sliding_heatmap(m, f201, 201, 10).grid.shape == (1, 1)
    f401 = Frame(np.random.default_rng(0).integers(0, 256, (401, 401)).astype(np.uint8), 8)
    hm = sliding_heatmap(m, f401, 201, 10)
    assert hm.grid.shape == (21, 21)
    np.testing.assert_allclose(hm.grid, 0.5)


def test_heatmap_matches_direct_evaluation_and_chunking():
    from overlapscope.detector import forward

    arch = _tiny(32)
    m = build_model(arch, 3)
    frame = Frame(np.random.default_rng(1).integers(0, 256, (70, 90)).astype(np.uint8), 8)
    a = sliding_heatmap(m, frame, 32, 7, chunk=5)
    b = sliding_heatmap(m, frame, 32, 7, chunk=1000)
    np.testing.assert_allclose(a.grid, b.grid, rtol=1e-5)
    np.testing.assert_array_equal(a.grid, sliding_heatmap(m, frame, 32, 7, chunk=5).grid)
    r, c = 2, 3
    win = frame.data[7 * r : 7 * r + 32, 7 * c : 7 * c + 32]
    assert a.grid[r, c] == pytest.approx(forward(m, [Frame(win, 8)])[0], rel=1e-6)


def test_heatmap_errors():
    m = build_model(_tiny(32), 0)
    with pytest.raises(InvalidArgument):
        sliding_heatmap(m, Frame(np.zeros((20, 20), np.uint8), 8), 32, 4)
    with pytest.raises(InvalidArgument):
        sliding_heatmap(m, Frame(np.zeros((40, 40), np.uint8), 8), 32, 0)


def test_heatmap_cell_lookup():
    hm = Heatmap(np.zeros((21, 21)), 201, 10)
    assert hm.cell_for(100.5, 100.5) == (0, 0)
    assert hm.cell_for(300, 200) == (10, 20)
    assert hm.cell_for(-50, 9999) == (20, 0)


def bars(peak=242, valley=13, shape=(60, 200), period=20):
    img = np.full(shape, valley, np.uint8)
    for x in range(0, shape[1], period):
        img[:, x : x + period // 2] = peak
    return Frame(img, 8)


def test_trace_contrast_bar_pattern():
    c = trace_contrast(bars(), 10, 20)
    assert c == pytest.approx((242 - 13) / 255)
    assert c == pytest.approx(0.898, abs=1e-3)


def test_trace_contrast_constant_is_zero():
    assert trace_contrast(Frame(np.full((30, 30), 77, np.uint8), 8), 0, 20) == 0.0


def test_trace_contrast_span_and_errors():
    f = bars()
    assert trace_contrast(f, 0, 20, span=(0, 10)) == 0.0  # a single bar
    with pytest.raises(InvalidArgument):
        trace_contrast(f, 50, 20)
    with pytest.raises(InvalidArgument):
        trace_contrast(f, 0, 20, span=(150, 250))


@settings(max_examples=40, deadline=None)
@given(st.integers(-12, 12))
def test_trace_contrast_offset_invariance(offset):
    base = bars(peak=200, valley=40)
    shifted = Frame((base.data.astype(int) + offset).astype(np.uint8), 8)
    assert trace_contrast(shifted, 0, 20) == pytest.approx(trace_contrast(base, 0, 20))


def test_csv_writers(tmp_path):
    write_sweep_csv(tmp_path / "s.csv", [SweepRow(1, 0.9, 0.8, 0.85, 0.5, 1, 2, 3, 4)])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "n,train_acc,val_acc,auc,threshold,tp,fp,tn,fn"
    assert lines[1].startswith("1,0.900000,0.800000")
    write_roc_csv(tmp_path / "r.csv", roc_curve([0.1, 0.9], [0, 1]))
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "fpr,tpr"


def test_heatmap_export(tmp_path):
    hm = Heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), 32, 4)
    write_heatmap(tmp_path / "h.pgm", hm)
    assert read_pnm(tmp_path / "h.pgm").data.tolist() == [[0, 128], [255, 64]]
    import json

    assert json.loads((tmp_path / "h.json").read_text())["step"] == 4
