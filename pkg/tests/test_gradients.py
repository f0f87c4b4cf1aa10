import unittest

import torch
from torch import nn

from lidnet.models.config import DetectorConfig
from lidnet.networks import Detector, FeatureMap
from lidnet.networks.denoiser import Discriminator, ResidualGenerator, denoise, discriminator_loss, reconstruction_loss
from lidnet.networks.detector import detection_loss, full_detector_loss
from lidnet.objectives import global_perceptual_loss, roi_perceptual_from_features, roi_perceptual_loss


def parameter_fd_error(module: nn.Module, loss_fn, eps: float = 1e-6) -> float:
    """Largest relative error between autograd and central differences over every parameter."""
    module.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for param in module.parameters():
        analytic = param.grad.detach().clone().flatten()
        flat = param.data.view(-1)
        for i in range(flat.numel()):
            original = float(flat[i])
            flat[i] = original + eps
            plus = float(loss_fn())
            flat[i] = original - eps
            minus = float(loss_fn())
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            scale = max(abs(numeric), abs(float(analytic[i])), 1e-3)
            worst = max(worst, abs(numeric - float(analytic[i])) / scale)
    return worst


def tiny_detector() -> Detector:
    torch.manual_seed(0)
    cfg = DetectorConfig(channels=(2, 2, 2, 2), head_channels=2, head_hidden=4, head_pool=2, boxes_per_image=8)
    return Detector(cfg).double()


class TestInputGradients(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)

    def test_reconstruction_losses(self):
        target = torch.rand(2, 4, 4, dtype=torch.float64)
        for mode in ("mae", "mse"):
            with self.subTest(mode=mode):
                x = torch.rand(2, 4, 4, dtype=torch.float64, requires_grad=True)
                self.assertTrue(torch.autograd.gradcheck(lambda d: reconstruction_loss(d, target, mode), (x,)))

    def test_detection_loss(self):
        logits = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        deltas = (0.3 * torch.randn(4, 2, 4, dtype=torch.float64)).requires_grad_(True)
        labels = torch.tensor([0, 1, 2, 0])
        targets = 0.3 * torch.randn(4, 4, dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda l, d: detection_loss(l, d, labels, targets), (logits, deltas)))

    def test_roi_perceptual_in_features(self):
        target = FeatureMap(torch.rand(2, 3, 4, 4, dtype=torch.float64), stride=2, image_size=(8, 8))
        boxes = [
            torch.tensor([[0.0, 0.0, 8.0, 8.0], [1.0, 2.0, 5.0, 7.0]], dtype=torch.float64),
            torch.tensor([[2.5, 0.5, 6.0, 3.0]], dtype=torch.float64),
        ]
        features = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)

        def loss(f):
            return roi_perceptual_from_features(FeatureMap(f, 2, (8, 8)), target, boxes, pool_size=3)

        self.assertTrue(torch.autograd.gradcheck(loss, (features,)))

    def test_perceptual_losses_in_the_image(self):
        detector = tiny_detector()
        target = torch.rand(1, 8, 8, dtype=torch.float64)
        image = torch.rand(1, 8, 8, dtype=torch.float64, requires_grad=True)
        boxes = [torch.tensor([[0.0, 0.0, 8.0, 8.0], [1.0, 1.0, 6.0, 5.0]], dtype=torch.float64)]
        self.assertTrue(torch.autograd.gradcheck(lambda x: global_perceptual_loss(detector, x, target), (image,)))
        self.assertTrue(torch.autograd.gradcheck(lambda x: roi_perceptual_loss(detector, x, target, boxes, 2), (image,)))

    def test_composite_detector_loss_in_the_image(self):
        detector = tiny_detector()
        annotations = [(torch.tensor([[2.0, 2.0, 6.0, 6.0]], dtype=torch.float64), torch.tensor([1]))]
        proposals = [torch.tensor([[0.0, 0.0, 8.0, 8.0], [2.0, 2.0, 6.0, 6.0], [1.0, 1.0, 5.0, 7.0]], dtype=torch.float64)]
        image = torch.rand(1, 8, 8, dtype=torch.float64, requires_grad=True)

        def loss(x):
            return full_detector_loss(detector, x, annotations, proposals=proposals, seed=0).total

        self.assertTrue(torch.autograd.gradcheck(loss, (image,), rtol=1e-3))


class TestParameterGradients(unittest.TestCase):
    def test_generator_reconstruction(self):
        torch.manual_seed(0)
        generator = ResidualGenerator(channels=2, zero_init_residual=False).double()
        ldct = torch.rand(1, 8, 8, dtype=torch.float64)
        ndct = torch.rand(1, 8, 8, dtype=torch.float64)
        error = parameter_fd_error(generator, lambda: reconstruction_loss(denoise(generator, ldct), ndct, "mse"))
        self.assertLess(error, 1e-4)

    def test_critic_with_gradient_penalty(self):
        torch.manual_seed(0)
        critic = Discriminator(channels=2).double()
        fake = torch.rand(2, 8, 8, dtype=torch.float64)
        real = torch.rand(2, 8, 8, dtype=torch.float64)
        epsilon = torch.tensor([0.25, 0.6], dtype=torch.float64)
        error = parameter_fd_error(critic, lambda: discriminator_loss(critic, fake, real, 10.0, epsilon=epsilon))
        self.assertLess(error, 1e-4)

    def test_composite_detector_loss(self):
        detector = tiny_detector()
        image = torch.rand(1, 8, 8, dtype=torch.float64)
        annotations = [(torch.tensor([[2.0, 2.0, 6.0, 6.0]], dtype=torch.float64), torch.tensor([1]))]
        proposals = [torch.tensor([[0.0, 0.0, 8.0, 8.0], [2.0, 2.0, 6.0, 6.0], [1.0, 1.0, 5.0, 7.0]], dtype=torch.float64)]
        error = parameter_fd_error(
            detector, lambda: full_detector_loss(detector, image, annotations, proposals=proposals, seed=0).total
        )
        self.assertLess(error, 1e-3)


class TestReductionIdentity(unittest.TestCase):
    def test_full_image_roi_equals_global_features(self):
        for seed in range(20):
            with self.subTest(seed=seed):
                generator = torch.Generator().manual_seed(seed)
                hat = FeatureMap(torch.rand(1, 3, 4, 4, generator=generator, dtype=torch.float64), 8, (32, 32))
                target = FeatureMap(torch.rand(1, 3, 4, 4, generator=generator, dtype=torch.float64), 8, (32, 32))
                box = [torch.tensor([[0.0, 0.0, 32.0, 32.0]], dtype=torch.float64)]
                roi = roi_perceptual_from_features(hat, target, box, pool_size=4)
                full = torch.nn.functional.mse_loss(hat.tensor, target.tensor)
                self.assertLess(abs(float(roi) - float(full)), 1e-6)

    def test_full_image_roi_equals_global_through_detector(self):
        torch.manual_seed(0)
        detector = Detector(DetectorConfig(channels=(4, 4, 4, 4), head_channels=4, head_hidden=16)).double()
        for seed in range(5):
            with self.subTest(seed=seed):
                generator = torch.Generator().manual_seed(seed)
                denoised = torch.rand(2, 32, 32, generator=generator, dtype=torch.float64)
                target = torch.rand(2, 32, 32, generator=generator, dtype=torch.float64)
                boxes = [torch.tensor([[0.0, 0.0, 32.0, 32.0]], dtype=torch.float64)] * 2
                roi = roi_perceptual_loss(detector, denoised, target, boxes, pool_size=4)
                full = global_perceptual_loss(detector, denoised, target)
                self.assertLess(abs(float(roi) - float(full)), 1e-6)


if __name__ == "__main__":
    unittest.main()
