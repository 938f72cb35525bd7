"""Metrics against brute-force pixel counting and hand-counted fixtures."""

import numpy as np
import pytest

from segcal.errors import ConfigError, ShapeMismatchError
from segcal.metrics import (
    Confusion,
    MetricsReport,
    confusion,
    fb_iou,
    fp_fn_rates,
    miou,
    render_metrics_csv,
)
from segcal.rng import make_rng


def brute_force_counts(pred, gt):
    """Per-pixel Python loop, independent of the vectorized implementation."""
    tp = fp = fn = tn = 0
    for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
        if p and g:
            tp += 1
        elif p and not g:
            fp += 1
        elif not p and g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


class TestConfusion:
    def test_perfect_prediction(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[:2, :5] = 1  # 10 foreground pixels of 64
        c = confusion(gt, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (10, 0, 0, 54)

    def test_all_background_prediction(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[:2, :5] = 1
        c = confusion(np.zeros_like(gt), gt)
        assert (c.tp, c.fp, c.fn, c.tn) == (0, 0, 10, 54)

    def test_hand_count(self):
        c = confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            confusion(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_matches_brute_force_on_100_random_pairs(self):
        rng = make_rng(200)
        for _ in range(100):
            pred = rng.integers(0, 2, size=(6, 7))
            gt = rng.integers(0, 2, size=(6, 7))
            c = confusion(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == brute_force_counts(pred, gt)
            assert c.total == 42

    def test_negative_counts_rejected(self):
        with pytest.raises(ConfigError):
            Confusion(tp=-1, fp=0, fn=0, tn=0)


class TestMiou:
    def test_single_perfect_episode(self):
        report = miou([(0, Confusion(10, 0, 0, 54))])
        assert report.miou == 1.0
        assert report.class_ious == {0: 1.0}

    def test_unweighted_mean_over_classes(self):
        items = [
            (0, Confusion(tp=10, fp=0, fn=0, tn=54)),   # IoU 1.0
            (1, Confusion(tp=10, fp=5, fn=5, tn=44)),   # IoU 0.5
        ]
        report = miou(items)
        assert report.miou == pytest.approx(0.75)

    def test_counts_pool_within_class(self):
        items = [
            (0, Confusion(tp=5, fp=5, fn=0, tn=54)),
            (0, Confusion(tp=5, fp=0, fn=5, tn=54)),
        ]
        report = miou(items)
        # pooled: tp=10, fp=5, fn=5 -> 10/20
        assert report.class_ious[0] == pytest.approx(0.5)

    def test_per_episode_average_flag(self):
        items = [
            (0, Confusion(tp=10, fp=0, fn=0, tn=54)),   # episode IoU 1.0
            (0, Confusion(tp=5, fp=5, fn=10, tn=44)),   # episode IoU 0.25
        ]
        report = miou(items, per_episode_average=True)
        assert report.class_ious[0] == pytest.approx(0.625)

    def test_empty_input_rejected(self):
        with pytest.raises(ConfigError):
            miou([])

    def test_empty_class_convention(self):
        report = miou([(3, Confusion(tp=0, fp=0, fn=0, tn=64))])
        assert report.class_ious[3] == 1.0


class TestFbIou:
    def test_perfect(self):
        assert fb_iou([Confusion(10, 0, 0, 54)]) == 1.0

    def test_hand_example_all_fg_prediction(self):
        # 2 pixels, gt half foreground, prediction all foreground:
        # IoU_fg = 1/2, IoU_bg = 0 -> 0.25
        c = confusion(np.array([1, 1]), np.array([1, 0]))
        assert fb_iou([c]) == pytest.approx(0.25)

    def test_symmetric_under_joint_fg_bg_swap(self):
        rng = make_rng(201)
        for _ in range(20):
            pred = rng.integers(0, 2, size=(5, 5))
            gt = rng.integers(0, 2, size=(5, 5))
            a = fb_iou([confusion(pred, gt)])
            b = fb_iou([confusion(1 - pred, 1 - gt)])
            assert a == pytest.approx(b, abs=1e-15)

    def test_flipping_fp_to_tn_never_decreases(self):
        c = Confusion(tp=10, fp=6, fn=4, tn=44)
        better = Confusion(tp=10, fp=5, fn=4, tn=45)
        assert fb_iou([better]) >= fb_iou([c])


class TestFpFnRates:
    def test_perfect(self):
        assert fp_fn_rates([Confusion(10, 0, 0, 54)]) == (0.0, 0.0)

    def test_all_foreground_prediction(self):
        c = confusion(np.ones((4, 4)), np.pad(np.ones((2, 2)), (0, 2)))
        fp_rate, fn_rate = fp_fn_rates([c])
        assert fp_rate == 1.0 and fn_rate == 0.0

    def test_hand_count(self):
        assert fp_fn_rates([Confusion(1, 1, 1, 1)]) == (0.5, 0.5)

    def test_degenerate_ground_truths(self):
        fp_rate, _ = fp_fn_rates([Confusion(tp=16, fp=0, fn=0, tn=0)])
        assert fp_rate == 0.0
        _, fn_rate = fp_fn_rates([Confusion(tp=0, fp=3, fn=0, tn=13)])
        assert fn_rate == 0.0

    def test_monotone_in_fp(self):
        worse = Confusion(tp=10, fp=6, fn=4, tn=44)
        better = Confusion(tp=10, fp=5, fn=4, tn=45)
        assert fp_fn_rates([better])[0] <= fp_fn_rates([worse])[0]


class TestPermutationInvariance:
    def test_metrics_invariant_under_joint_permutation(self):
        rng = make_rng(202)
        pred = rng.integers(0, 2, size=36)
        gt = rng.integers(0, 2, size=36)
        perm = rng.permutation(36)
        a = confusion(pred.reshape(6, 6), gt.reshape(6, 6))
        b = confusion(pred[perm].reshape(6, 6), gt[perm].reshape(6, 6))
        assert a == b
        assert miou([(0, a)]).miou == miou([(0, b)]).miou
        assert fb_iou([a]) == fb_iou([b])


class TestCsv:
    def test_render_is_deterministic_and_ordered(self):
        rows = [(0, 2, Confusion(10, 1, 2, 51)), (1, 3, Confusion(8, 0, 4, 52))]
        report = miou([(c, conf) for _, c, conf in rows])
        echo = {"seed": 7, "steps": 200, "step_size": 0.05}
        a = render_metrics_csv(rows, report, echo)
        b = render_metrics_csv(rows, report, echo)
        assert a == b
        lines = a.strip().split("\n")
        assert lines[0].startswith("# ")
        assert lines[3] == "episode_id,class_id,tp,fp,fn,tn"
        assert lines[4] == "0,2,10,1,2,51"
        assert lines[-2] == "summary,miou,fb_iou,fp_rate,fn_rate"

    def test_write_round_trip(self, tmp_path):
        from segcal.metrics import write_metrics_csv

        rows = [(0, 0, Confusion(5, 1, 1, 9))]
        report = miou([(0, Confusion(5, 1, 1, 9))])
        p = tmp_path / "metrics.csv"
        write_metrics_csv(p, rows, report, {"seed": 1})
        text = p.read_text()
        assert "episode_id,class_id,tp,fp,fn,tn" in text
        assert text.endswith("\n")
