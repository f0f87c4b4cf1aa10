import itertools
import math
import unittest

import numpy as np

from lidnet.errors import ConfigurationError, ContractError
from lidnet.metrics.detection import (
    GroundTruthBox,
    ScoredBox,
    average_precision,
    best_detection_iou,
    iou,
    iou_corners,
)
from lidnet.metrics.image_quality import gaussian_window_size, psnr, rmse, ssim
from lidnet.models.config import SsimConfig

A = (0.0, 0.0, 10.0, 10.0)
B = (20.0, 20.0, 30.0, 30.0)
ELSEWHERE = (40.0, 40.0, 50.0, 50.0)


class TestImageQuality(unittest.TestCase):
    def test_rmse(self):
        self.assertAlmostEqual(rmse(np.zeros((4, 4)), np.full((4, 4), 2.0)), 2.0)

    def test_psnr_known_value(self):
        value = psnr(np.zeros((8, 8)), np.full((8, 8), 0.1))
        self.assertAlmostEqual(value.db, 20.0, places=6)
        self.assertFalse(value.capped)

    def test_psnr_identical_images_are_capped(self):
        image = np.random.default_rng(0).random((8, 8))
        self.assertEqual(tuple(psnr(image, image.copy())), (200.0, True))

    def test_shape_mismatch(self):
        with self.assertRaises(ContractError):
            rmse(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_ssim_window_follows_sigma(self):
        self.assertEqual(gaussian_window_size(1.5), 11)
        with self.assertRaises(ConfigurationError):
            ssim(np.zeros((32, 32)), np.zeros((32, 32)), SsimConfig(window=7, sigma=1.5))

    def test_ssim_window_larger_than_image(self):
        with self.assertRaises(ContractError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_ssim_identical_and_noisy(self):
        rng = np.random.default_rng(1)
        image = rng.random((32, 32))
        self.assertAlmostEqual(ssim(image, image.copy()), 1.0, places=6)
        noisy = np.clip(image + rng.normal(0, 0.2, image.shape), 0, 1)
        self.assertLess(ssim(noisy, image), 0.95)


class TestIou(unittest.TestCase):
    def test_rcwh_boxes(self):
        self.assertAlmostEqual(iou((0, 0, 2, 2), (1, 1, 2, 2)), 1.0 / 7.0)
        self.assertEqual(iou((0, 0, 2, 2), (5, 5, 2, 2)), 0.0)

    def test_zero_area_union(self):
        self.assertEqual(iou((0, 0, 0, 0), (0, 0, 0, 0)), 0.0)


class TestAveragePrecision(unittest.TestCase):
    def setUp(self):
        self.truths = [GroundTruthBox("a", A, 1), GroundTruthBox("b", B, 1)]

    def test_duplicates_and_strays_do_not_lower_perfect_ranking(self):
        truths = [GroundTruthBox("a", A, 1)]
        detections = [
            ScoredBox("a", A, 1, 0.9),
            ScoredBox("a", A, 1, 0.8),
            ScoredBox("b", A, 1, 0.7),
        ]
        self.assertAlmostEqual(average_precision(detections, truths).value, 1.0)

    def test_all_point_and_eleven_point(self):
        detections = [
            ScoredBox("a", A, 1, 0.9),
            ScoredBox("a", ELSEWHERE, 1, 0.8),
            ScoredBox("b", B, 1, 0.7),
        ]
        self.assertAlmostEqual(average_precision(detections, self.truths, interpolation="all").value, 5.0 / 6.0)
        self.assertAlmostEqual(
            average_precision(detections, self.truths, interpolation="11point").value, (6 + 5 * 2.0 / 3.0) / 11
        )

    def test_threshold_matters(self):
        shifted = (0.0, 0.0, 10.0, 14.0)   # IoU 10/14 with A
        detections = [ScoredBox("a", shifted, 1, 0.9)]
        truths = [GroundTruthBox("a", A, 1)]
        self.assertAlmostEqual(average_precision(detections, truths, 0.5).value, 1.0)
        self.assertAlmostEqual(average_precision(detections, truths, 0.75).value, 0.0)

    def test_averaged_over_labels_with_ground_truth(self):
        truths = [GroundTruthBox("a", A, 1), GroundTruthBox("a", B, 2)]
        detections = [ScoredBox("a", A, 1, 0.9), ScoredBox("a", ELSEWHERE, 3, 0.9)]
        self.assertAlmostEqual(average_precision(detections, truths).value, 0.5)

    def test_no_detections(self):
        self.assertEqual(average_precision([], self.truths).value, 0.0)

    def test_no_ground_truth_is_undefined(self):
        with self.assertLogs("lidnet.metrics.detection", level="WARNING"):
            result = average_precision([ScoredBox("a", A, 1, 0.5)], [])
        self.assertEqual(tuple(result), (0.0, False))

    def test_argument_checks(self):
        with self.assertRaises(ContractError):
            average_precision([], self.truths, iou_threshold=0.0)
        with self.assertRaises(ContractError):
            average_precision([], self.truths, interpolation="101point")

    def test_best_detection_iou_uses_top_scored_overlap(self):
        detections = [
            ScoredBox("a", (0.0, 0.0, 10.0, 5.0), 1, 0.9),   # IoU 0.5
            ScoredBox("a", A, 1, 0.4),
        ]
        self.assertAlmostEqual(best_detection_iou(detections, [GroundTruthBox("a", A, 1)]), 0.5)
        self.assertEqual(best_detection_iou(detections, []), 0.0)


def greedy_all_point_ap(detections, truths, threshold):
    """Reference AP: score-ordered greedy matching, then the precision envelope summed at each hit."""
    ranked = sorted(detections, key=lambda d: d.score, reverse=True)
    taken = set()
    hits = []
    for det in ranked:
        overlaps = [
            (iou_corners(det.box, gt.box), g)
            for g, gt in enumerate(truths)
            if gt.image_id == det.image_id and gt.label == det.label
        ]
        best_overlap, best = max(overlaps, key=lambda pair: pair[0], default=(0.0, None))
        hit = best is not None and best_overlap >= threshold and best not in taken
        if hit:
            taken.add(best)
        hits.append(hit)
    precision = [sum(hits[: k + 1]) / (k + 1) for k in range(len(hits))]
    return sum(max(precision[k:]) for k, hit in enumerate(hits) if hit) / len(truths)


def random_scene(rng, n_truths, n_detections):
    truths = []
    for g in range(n_truths):
        r, c = rng.integers(0, 12, size=2)
        h, w = rng.integers(4, 9, size=2)
        truths.append(GroundTruthBox(f"img{g % 2}", (float(r), float(c), float(r + h), float(c + w)), 1))
    detections = []
    for _ in range(n_detections):
        gt = truths[rng.integers(len(truths))]
        shift = rng.integers(-3, 4, size=4)
        r1, c1, r2, c2 = (v + s for v, s in zip(gt.box, shift))
        box = (float(min(r1, r2 - 1)), float(min(c1, c2 - 1)), float(max(r2, r1 + 1)), float(max(c2, c1 + 1)))
        detections.append(ScoredBox(gt.image_id, box, 1, 0.0))
    return truths, detections


class TestAveragePrecisionAgainstGreedyMatching(unittest.TestCase):
    def test_every_score_ordering(self):
        rng = np.random.default_rng(7)
        for trial in range(12):
            truths, boxes = random_scene(rng, int(rng.integers(1, 4)), int(rng.integers(1, 6)))
            for threshold in (0.3, 0.5, 0.75):
                for ranking in itertools.permutations(range(len(boxes))):
                    detections = [d._replace(score=(1 + rank) / 10) for d, rank in zip(boxes, ranking)]
                    with self.subTest(trial=trial, threshold=threshold, ranking=ranking):
                        self.assertAlmostEqual(
                            average_precision(detections, truths, threshold).value,
                            greedy_all_point_ap(detections, truths, threshold),
                            places=12,
                        )

    def test_strictly_increasing_score_maps(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            truths, boxes = random_scene(rng, int(rng.integers(1, 4)), 5)
            scores = rng.permutation(5) / 5 + 0.05
            detections = [d._replace(score=float(s)) for d, s in zip(boxes, scores)]
            expected = average_precision(detections, truths).value
            for transform in (math.exp, lambda s: s ** 3 + s, lambda s: 1 - 1 / (1 + s)):
                mapped = [d._replace(score=transform(d.score)) for d in detections]
                with self.subTest(trial=trial):
                    self.assertEqual(average_precision(mapped, truths).value, expected)


def windowed_ssim(a, b, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over every full Gaussian window, each window summed pixel by pixel."""
    radius = int(3.5 * sigma + 0.5)
    offsets = np.arange(-radius, radius + 1)
    line = np.exp(-0.5 * (offsets / sigma) ** 2)
    line /= line.sum()
    weights = np.outer(line, line)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    values = []
    for i in range(radius, a.shape[0] - radius):
        for j in range(radius, a.shape[1] - radius):
            x = a[i - radius: i + radius + 1, j - radius: j + radius + 1]
            y = b[i - radius: i + radius + 1, j - radius: j + radius + 1]
            mx, my = float(np.sum(weights * x)), float(np.sum(weights * y))
            vx = float(np.sum(weights * x * x)) - mx * mx
            vy = float(np.sum(weights * y * y)) - my * my
            cxy = float(np.sum(weights * x * y)) - mx * my
            values.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


class TestSsimAgainstWindowSums(unittest.TestCase):
    def test_random_pairs(self):
        rng = np.random.default_rng(11)
        for trial in range(4):
            a = rng.random((24, 20))
            b = np.clip(a + rng.normal(0, 0.1 * (trial + 1), a.shape), 0, 1)
            with self.subTest(trial=trial):
                self.assertAlmostEqual(ssim(a, b), windowed_ssim(a, b), delta=1e-9)

    def test_custom_constants(self):
        rng = np.random.default_rng(12)
        a, b = rng.random((16, 16)), rng.random((16, 16))
        cfg = SsimConfig(k1=0.05, k2=0.1)
        self.assertAlmostEqual(ssim(a, b, cfg), windowed_ssim(a, b, k1=0.05, k2=0.1), delta=1e-9)


if __name__ == "__main__":
    unittest.main()
