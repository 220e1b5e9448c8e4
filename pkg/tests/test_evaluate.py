import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sarforge.dataset import Sample, SampleMeta
from sarforge.evaluate import (
    MetricError,
    MetricsReport,
    SampleMetrics,
    emit_report,
    evaluate_split,
    read_pgm,
    read_report_csv,
    rmse_pct,
    score_predictions,
    ssim,
    to_gray8,
    write_pgm,
    write_report_csv,
)


def ssim_oracle(x, y, L):
    """Direct per-window SSIM with an explicit 2D Gaussian weight."""
    ax = np.arange(11) - 5.0
    w = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * 1.5**2))
    w /= w.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a = x[i : i + 11, j : j + 11]
            b = y[i : i + 11, j : j + 11]
            ma, mb = (w * a).sum(), (w * b).sum()
            va = (w * (a - ma) ** 2).sum()
            vb = (w * (b - mb) ** 2).sum()
            cov = (w * (a - ma) * (b - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_rmse_pct_by_hand():
    truth = np.array([[0.0, 2.0], [1.0, 1.0]])
    pred = truth + np.array([[0.2, 0.0], [0.0, -0.2]])
    # rmse = sqrt((0.04 + 0.04) / 4) = sqrt(0.02); max(truth) = 2
    assert rmse_pct(pred, truth) == pytest.approx(100 * math.sqrt(0.02) / 2, rel=1e-14)
    mask = np.array([[False, True], [True, True]])
    assert rmse_pct(pred, truth, mask) == pytest.approx(100 * math.sqrt(0.04 / 3) / 2, rel=1e-14)


def test_rmse_pct_zero_truth():
    with pytest.raises(MetricError):
        rmse_pct(np.ones((3, 3)), np.zeros((3, 3)))
    with pytest.raises(MetricError):
        rmse_pct(np.ones((3, 3)), np.ones((3, 4)))


def test_constant_offset_rmse():
    truth = np.random.default_rng(0).random((16, 16))
    truth /= truth.max()
    assert rmse_pct(truth + 0.05, truth) == pytest.approx(5.0, rel=1e-12)


def test_ssim_identity_is_one():
    img = np.random.default_rng(1).random((32, 32))
    assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    y = rng.random((20, 23))
    x = np.clip(y + 0.2 * rng.normal(size=y.shape), 0, 1)
    assert ssim(x, y) == pytest.approx(ssim_oracle(x, y, y.max()), rel=1e-10)
    assert ssim(x, y, data_range=2.0) == pytest.approx(ssim_oracle(x, y, 2.0), rel=1e-10)


def test_ssim_small_image_rejected():
    with pytest.raises(MetricError):
        ssim(np.ones((10, 40)), np.ones((10, 40)))


def test_ssim_masked_windows():
    rng = np.random.default_rng(4)
    y = rng.random((24, 24))
    x = y.copy()
    x[:12] = rng.random((12, 24))
    mask = np.zeros((24, 24), dtype=bool)
    mask[17:19, 5:19] = True
    # centers at rows 17-18 see rows 12-23 only, which are identical
    assert ssim(x, y, mask=mask) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, y) < 0.99
    with pytest.raises(MetricError):
        ssim(x, y, mask=np.zeros((24, 24), dtype=bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ssim_bounded_and_symmetric_with_fixed_range(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    s = ssim(a, b, data_range=1.0)
    assert -1 <= s <= 1
    assert s == pytest.approx(ssim(b, a, data_range=1.0), rel=1e-12)


def test_score_clamps_predictions():
    truth = np.random.default_rng(0).random((1, 16, 16))
    truth[0, 0, 0] = 1.0
    wild = truth.copy()
    wild[0, 3, 3] = 5.0
    wild[0, 4, 4] = -2.0
    clipped = np.clip(wild, 0, 1)
    r = score_predictions(wild, truth).records[0]
    assert r.rmse_pct == rmse_pct(clipped[0], truth[0])
    assert r.ssim == ssim(clipped[0], truth[0])


def test_report_aggregates_and_banner():
    rep = MetricsReport([SampleMetrics(0, 4.0, 0.9, False), SampleMetrics(1, 12.0, 0.86, True)])
    assert rep.mean_rmse_pct == 8.0 and rep.max_rmse_pct == 12.0
    assert rep.mean_ssim == pytest.approx(0.88) and rep.min_ssim == 0.86
    assert rep.passes and rep.banner().startswith("PASS")
    rep.records.append(SampleMetrics(2, 30.0, 0.5, True))
    assert not rep.passes and rep.banner().startswith("FAIL")


def test_report_csv_round_trip(tmp_path):
    rep = MetricsReport([SampleMetrics(3, 1 / 3, 0.912345678901, False), SampleMetrics(7, 15.0, 0.2, True)])
    assert read_report_csv(write_report_csv(rep, tmp_path / "m.csv")).records == rep.records


def test_pgm_round_trip(tmp_path):
    img = np.array([[0.0, 0.5], [1.0, 2.0], [0.25, 0.75]])
    gray = to_gray8(img, 1.0)
    np.testing.assert_array_equal(gray, [[0, 128], [255, 255], [64, 191]])
    back, maxval = read_pgm(write_pgm(tmp_path / "a.pgm", gray))
    assert maxval == 255
    np.testing.assert_array_equal(back, gray)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n2 3\n255\n")


def toy_samples(n=4, size=16):
    rng = np.random.default_rng(0)
    out = []
    for k in range(n):
        t = rng.random((size, size)).astype(np.float32)
        t /= t.max()
        out.append(Sample(t.copy(), t, SampleMeta(0, 0, "3T", k, 1.0)))
    return out


def test_perfect_predictor_scores_perfectly(tmp_path):
    samples = toy_samples()
    rep, preds = evaluate_split(lambda x: x, samples, [2, 0])
    assert [r.sample_id for r in rep.records] == [2, 0]
    assert rep.mean_rmse_pct == 0 and rep.mean_ssim == pytest.approx(1.0, abs=1e-12)
    files = emit_report(rep, samples, preds, tmp_path / "out", image_ids=[0])
    assert len(files) == 3 and (tmp_path / "out" / "metrics.csv").exists()
    truth, _ = read_pgm(tmp_path / "out" / "sample00000_truth.pgm")
    pred, _ = read_pgm(tmp_path / "out" / "sample00000_pred.pgm")
    np.testing.assert_array_equal(truth, pred)


def test_empty_split():
    with pytest.raises(MetricError):
        evaluate_split(lambda x: x, toy_samples(), [])


def test_rmse_pct_two_cell_example():
    assert rmse_pct(np.array([0.0, 0.9]), np.array([0.0, 1.0])) == pytest.approx(7.0710678, abs=1e-6)


def test_rmse_pct_joint_scaling_and_bound():
    rng = np.random.default_rng(8)
    t, p = rng.random((12, 12)), rng.random((12, 12))
    assert rmse_pct(3.5 * p, 3.5 * t) == pytest.approx(rmse_pct(p, t), rel=1e-13)
    assert rmse_pct(p, t) <= 100 * np.abs(p - t).max() / t.max()


@pytest.mark.parametrize("a,b", [(0.3, 0.7), (1.0, 1.0), (0.05, 0.9)])
def test_ssim_constant_images_closed_form(a, b):
    c1 = (0.01 * b) ** 2
    got = ssim(np.full((16, 16), a), np.full((16, 16), b))
    assert got == pytest.approx((2 * a * b + c1) / (a * a + b * b + c1), abs=1e-12)


def test_ssim_constant_shift_below_one():
    y = np.random.default_rng(2).random((16, 16))
    assert ssim(y + 0.01, y) < 1


def test_zero_predictor_on_normalized_targets():
    samples = toy_samples(3)
    rep, _ = evaluate_split(np.zeros_like, samples, [0, 1, 2])
    for r, s in zip(rep.records, samples):
        assert r.rmse_pct == pytest.approx(100 * math.sqrt(np.mean(s.target.astype(float) ** 2)), rel=1e-12)


def test_aggregates_recomputed_from_csv(tmp_path):
    samples = toy_samples(4)
    rep, _ = evaluate_split(lambda x: 0.8 * x, samples, [3, 1, 0])
    back = read_report_csv(write_report_csv(rep, tmp_path / "m.csv"))
    assert len(back.records) == 3
    assert back.mean_rmse_pct == rep.mean_rmse_pct and back.min_ssim == rep.min_ssim
