"""Evaluation metrics: cumulative IoU, Prec@X, length buckets."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restr.metrics import (binarize, bucket_by_length, cumulative_iou,
                           intersection_union, parse_buckets, prec_at,
                           sample_iou, EvalReport)


def block_mask(h, w, r0, c0, r1, c1):
    m = np.zeros((h, w), dtype=np.uint8)
    m[r0:r1, c0:c1] = 1
    return m


class TestBinarize:
    def test_zero_logits_count_as_foreground(self):
        npt.assert_array_equal(binarize(np.zeros((2, 2, 1))), np.ones((2, 2)))

    def test_large_negative_is_empty(self):
        npt.assert_array_equal(binarize(np.full((3, 3), -40.0)), np.zeros((3, 3)))

    def test_sign_split(self):
        out = binarize(np.array([[-0.1, 0.1], [0.0, -5.0]]))
        npt.assert_array_equal(out, [[0, 1], [1, 0]])


class TestCumulativeIou:
    def test_perfect_prediction(self):
        masks = [block_mask(4, 4, 0, 0, 2, 2), block_mask(4, 4, 1, 1, 4, 4)]
        assert cumulative_iou(masks, masks) == 1.0

    def test_hand_counted_single_sample(self):
        pred = block_mask(6, 6, 0, 0, 2, 2)
        gt = block_mask(6, 6, 1, 0, 3, 2)  # overlap 2, union 6
        assert intersection_union(pred, gt) == (2, 6)
        npt.assert_allclose(cumulative_iou([pred], [gt]), 1 / 3)

    def test_cumulative_differs_from_mean(self):
        # (I=2,U=2) and (I=0,U=4): cumulative 2/6, mean (1 + 0)/2
        a_pred = block_mask(4, 4, 0, 0, 1, 2)
        a_gt = a_pred.copy()
        b_pred = block_mask(4, 4, 0, 0, 1, 2)
        b_gt = block_mask(4, 4, 2, 2, 3, 4)
        cum = cumulative_iou([a_pred, b_pred], [a_gt, b_gt])
        npt.assert_allclose(cum, 2 / 6)
        mean = np.mean([sample_iou(a_pred, a_gt), sample_iou(b_pred, b_gt)])
        npt.assert_allclose(mean, 0.5)
        assert cum != mean

    def test_disjoint_prediction_is_zero(self):
        pred = block_mask(4, 4, 0, 0, 2, 2)
        gt = block_mask(4, 4, 2, 2, 4, 4)
        assert cumulative_iou([pred], [gt]) == 0.0

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        preds = [rng.integers(0, 2, (5, 5)).astype(np.uint8) for _ in range(6)]
        gts = [rng.integers(0, 2, (5, 5)).astype(np.uint8) for _ in range(6)]
        forward_order = cumulative_iou(preds, gts)
        perm = rng.permutation(6)
        shuffled = cumulative_iou([preds[i] for i in perm], [gts[i] for i in perm])
        assert forward_order == shuffled

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            cumulative_iou([], [])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            intersection_union(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_empty_vs_empty_sample_conventions(self):
        empty = np.zeros((3, 3), dtype=np.uint8)
        assert sample_iou(empty, empty) == 1.0
        assert intersection_union(empty, empty) == (0, 0)


class TestPrecAt:
    def test_all_perfect(self):
        for t in (0.5, 0.6, 0.7, 0.8, 0.9):
            assert prec_at([1.0, 1.0, 1.0], t) == 1.0

    def test_direct_count(self):
        assert prec_at([0.55, 0.45], 0.5) == 0.5

    def test_threshold_inclusive(self):
        assert prec_at([0.5], 0.5) == 1.0

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=1, max_size=40))
    def test_non_increasing_in_threshold(self, ious):
        values = [prec_at(ious, t) for t in (0.5, 0.6, 0.7, 0.8, 0.9)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestBuckets:
    def test_parse_reference_scheme(self):
        assert parse_buckets("1-2,3,4-5,6-20") == [(1, 2), (3, 3), (4, 5), (6, 20)]

    def test_parse_rejects_bad_ranges(self):
        with pytest.raises(ValueError):
            parse_buckets("5-2")
        with pytest.raises(ValueError):
            parse_buckets("0-3")

    def test_single_bucket_equals_overall(self):
        rng = np.random.default_rng(1)
        ius = [(int(i), int(u)) for i, u in
               zip(rng.integers(0, 5, 8), rng.integers(5, 9, 8))]
        lengths = rng.integers(1, 21, 8).tolist()
        table = bucket_by_length(lengths, ius, [(1, 20)])
        total_i = sum(i for i, _ in ius)
        total_u = sum(u for _, u in ius)
        npt.assert_allclose(table[(1, 20)], total_i / total_u)

    def test_uncovered_length_rejected(self):
        with pytest.raises(ValueError):
            bucket_by_length([25], [(1, 2)], [(1, 20)])

    def test_reconstruction_identity(self):
        rng = np.random.default_rng(2)
        buckets = parse_buckets("1-2,3,4-5,6-20")
        lengths = rng.integers(1, 21, 30).tolist()
        ius = [(int(i), int(i + u)) for i, u in
               zip(rng.integers(0, 6, 30), rng.integers(1, 6, 30))]
        table = bucket_by_length(lengths, ius, buckets)
        sums = {b: [0, 0] for b in buckets}
        for length, (i, u) in zip(lengths, ius):
            home = next(b for b in buckets if b[0] <= length <= b[1])
            sums[home][0] += i
            sums[home][1] += u
        total_i = sum(v[0] for v in sums.values())
        total_u = sum(v[1] for v in sums.values())
        npt.assert_allclose(total_i / total_u,
                            cumulative_iou_from_ius(ius))
        # bucket-weighted reconstruction equals overall cumulative IoU exactly
        recon_i = sum(sums[b][0] for b in table)
        recon_u = sum(sums[b][1] for b in table)
        assert (recon_i, recon_u) == (total_i, total_u)


def cumulative_iou_from_ius(ius):
    return sum(i for i, _ in ius) / sum(u for _, u in ius)


class TestReport:
    def test_csv_and_text_render(self):
        report = EvalReport(cumulative_iou=0.5, ious=[0.5, 0.5],
                            prec={0.5: 1.0, 0.9: 0.0},
                            length_buckets={(1, 2): 0.5}, n_samples=2)
        rows = report.csv_rows()
        assert rows[0] == "metric,key,value"
        assert any(r.startswith("prec,0.5,") for r in rows)
        assert "cumulative IoU" in report.text_table()
