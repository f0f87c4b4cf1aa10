import math
import unittest

import torch

from lidnet.errors import ContractError
from lidnet.networks.boxes import (
    BBOX_CLIP,
    assign_targets,
    clip_boxes,
    corners_to_rcwh,
    corners_to_xyxy,
    decode_deltas,
    encode_deltas,
    make_anchors,
    non_max_suppression,
    pairwise_iou,
    rcwh_to_corners,
    sample_boxes,
)


class TestConversions(unittest.TestCase):
    def test_rcwh_corners(self):
        rcwh = torch.tensor([[2.0, 3.0, 4.0, 5.0]])
        corners = rcwh_to_corners(rcwh)
        self.assertEqual(corners.tolist(), [[2.0, 3.0, 7.0, 7.0]])
        self.assertEqual(corners_to_rcwh(corners).tolist(), rcwh.tolist())

    def test_xyxy_swaps_axes(self):
        self.assertEqual(corners_to_xyxy(torch.tensor([[1.0, 2.0, 3.0, 4.0]])).tolist(), [[2.0, 1.0, 4.0, 3.0]])


class TestIou(unittest.TestCase):
    def test_known_overlap(self):
        a = torch.tensor([[0.0, 0.0, 2.0, 2.0]])
        b = torch.tensor([[1.0, 1.0, 3.0, 3.0], [5.0, 5.0, 6.0, 6.0], [0.0, 0.0, 2.0, 2.0]])
        iou = pairwise_iou(a, b)
        self.assertAlmostEqual(float(iou[0, 0]), 1.0 / 7.0, places=6)
        self.assertEqual(float(iou[0, 1]), 0.0)
        self.assertAlmostEqual(float(iou[0, 2]), 1.0, places=6)

    def test_empty(self):
        self.assertEqual(tuple(pairwise_iou(torch.zeros((0, 4)), torch.zeros((3, 4))).shape), (0, 3))


class TestDeltas(unittest.TestCase):
    def test_decode_inverts_encode(self):
        reference = torch.tensor([[0.0, 0.0, 8.0, 8.0], [10.0, 4.0, 14.0, 20.0]])
        targets = torch.tensor([[1.0, 2.0, 7.0, 11.0], [9.0, 5.0, 15.0, 18.0]])
        restored = decode_deltas(reference, encode_deltas(reference, targets))
        torch.testing.assert_close(restored, targets, atol=1e-5, rtol=0)

    def test_identity_deltas_are_zero(self):
        boxes = torch.tensor([[3.0, 4.0, 9.0, 12.0]])
        torch.testing.assert_close(encode_deltas(boxes, boxes), torch.zeros((1, 4)))

    def test_size_deltas_are_clamped(self):
        reference = torch.tensor([[0.0, 0.0, 1.0, 1.0]])
        decoded = decode_deltas(reference, torch.tensor([[0.0, 0.0, 100.0, 100.0]]))
        height = float(decoded[0, 2] - decoded[0, 0])
        self.assertAlmostEqual(height, math.exp(BBOX_CLIP), places=2)

    def test_clip_keeps_positive_extent(self):
        clipped = clip_boxes(torch.tensor([[-5.0, -5.0, -1.0, 40.0]]), (32, 32))
        r1, c1, r2, c2 = clipped[0].tolist()
        self.assertEqual((r1, c1, c2), (0.0, 0.0, 32.0))
        self.assertGreater(r2, r1)


class TestAnchors(unittest.TestCase):
    def test_count_and_cell_major_order(self):
        anchors = make_anchors((2, 3), stride=8, sizes=(8, 16), ratios=(1.0,))
        self.assertEqual(tuple(anchors.shape), (2 * 3 * 2, 4))
        # first cell, both sizes, centred at (4, 4)
        self.assertEqual(anchors[0].tolist(), [0.0, 0.0, 8.0, 8.0])
        self.assertEqual(anchors[1].tolist(), [-4.0, -4.0, 12.0, 12.0])
        # second cell moves along the column axis
        self.assertEqual(anchors[2].tolist(), [0.0, 8.0, 8.0, 16.0])

    def test_ratio_changes_shape(self):
        anchor = make_anchors((1, 1), stride=8, sizes=(8,), ratios=(4.0,))[0]
        self.assertAlmostEqual(float(anchor[2] - anchor[0]), 16.0, places=5)
        self.assertAlmostEqual(float(anchor[3] - anchor[1]), 4.0, places=5)


class TestAssignTargets(unittest.TestCase):
    def setUp(self):
        self.gt = torch.tensor([[0.0, 0.0, 8.0, 8.0]])
        self.labels = torch.tensor([1])
        self.boxes = torch.tensor([
            [0.0, 0.0, 8.0, 8.0],      # IoU 1
            [0.0, 2.0, 8.0, 10.0],     # IoU 0.6
            [20.0, 20.0, 28.0, 28.0],  # IoU 0
        ])

    def test_thresholds(self):
        result = assign_targets(self.boxes, self.gt, self.labels, iou_fg=0.7, iou_bg=0.3)
        self.assertEqual(result.labels.tolist(), [1, -1, 0])
        self.assertEqual(result.matched_gt.tolist(), [0, -1, -1])
        torch.testing.assert_close(result.regression_targets[0], torch.zeros(4))

    def test_equal_thresholds_leave_nothing_ignored(self):
        result = assign_targets(self.boxes, self.gt, self.labels, iou_fg=0.5, iou_bg=0.5)
        self.assertEqual(result.labels.tolist(), [1, 1, 0])

    def test_low_quality_match(self):
        boxes = self.boxes[1:]
        plain = assign_targets(boxes, self.gt, self.labels, iou_fg=0.7, iou_bg=0.3)
        claimed = assign_targets(boxes, self.gt, self.labels, iou_fg=0.7, iou_bg=0.3, allow_low_quality_matches=True)
        self.assertEqual(plain.labels.tolist(), [-1, 0])
        self.assertEqual(claimed.labels.tolist(), [1, 0])

    def test_no_ground_truth_is_all_background(self):
        result = assign_targets(self.boxes, torch.zeros((0, 4)), torch.zeros((0,), dtype=torch.int64), 0.7, 0.3)
        self.assertEqual(result.labels.tolist(), [0, 0, 0])

    def test_bad_thresholds(self):
        with self.assertRaises(ContractError):
            assign_targets(self.boxes, self.gt, self.labels, iou_fg=0.3, iou_bg=0.7)


class TestSampling(unittest.TestCase):
    def test_respects_fraction_and_budget(self):
        labels = torch.tensor([1] * 20 + [0] * 100 + [-1] * 10)
        pos, neg = sample_boxes(labels, batch_size=64, positive_fraction=0.25, generator=torch.Generator().manual_seed(0))
        self.assertEqual(len(pos), 16)
        self.assertEqual(len(neg), 48)
        self.assertTrue(bool((labels[pos] == 1).all()))
        self.assertTrue(bool((labels[neg] == 0).all()))

    def test_fills_with_negatives_when_positives_are_scarce(self):
        labels = torch.tensor([1] * 2 + [0] * 100)
        pos, neg = sample_boxes(labels, batch_size=64, positive_fraction=0.25)
        self.assertEqual((len(pos), len(neg)), (2, 62))


class TestNms(unittest.TestCase):
    def test_suppresses_overlaps_per_class(self):
        boxes = torch.tensor([[0.0, 0.0, 8.0, 8.0], [0.0, 1.0, 8.0, 9.0], [0.0, 1.0, 8.0, 9.0]])
        scores = torch.tensor([0.9, 0.8, 0.7])
        labels = torch.tensor([1, 1, 2])
        keep = non_max_suppression(boxes, scores, labels, iou_threshold=0.5)
        self.assertEqual(keep.tolist(), [0, 2])

    def test_matches_greedy_suppression(self):
        generator = torch.Generator().manual_seed(5)
        for trial in range(25):
            n = int(torch.randint(1, 12, (1,), generator=generator))
            corner = torch.randint(0, 20, (n, 2), generator=generator).float()
            size = torch.randint(2, 10, (n, 2), generator=generator).float()
            boxes = torch.cat([corner, corner + size], dim=1)
            scores = torch.randperm(n, generator=generator).float() / n
            labels = torch.randint(1, 3, (n,), generator=generator)
            for threshold in (0.2, 0.4321, 0.7):
                order = sorted(range(n), key=lambda i: -float(scores[i]))
                kept = []
                for i in order:
                    if all(
                        int(labels[k]) != int(labels[i]) or float(pairwise_iou(boxes[k:k + 1], boxes[i:i + 1])) <= threshold
                        for k in kept
                    ):
                        kept.append(i)
                with self.subTest(trial=trial, threshold=threshold):
                    self.assertEqual(non_max_suppression(boxes, scores, labels, threshold).tolist(), kept)

    def test_empty(self):
        self.assertEqual(non_max_suppression(torch.zeros((0, 4)), torch.zeros(0), torch.zeros(0), 0.5).numel(), 0)


if __name__ == "__main__":
    unittest.main()
