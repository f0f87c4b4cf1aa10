import unittest

import torch
from torch import nn

from lidnet.errors import DataError, InvariantViolation, SchedulingError
from lidnet.models.config import TrainConfig
from lidnet.training.batches import BatchSampler, collate
from lidnet.training.schedule import (
    FrozenGuard,
    Phase,
    TrainSchedule,
    collaborative_plan,
    expected_trace,
    freeze,
    is_frozen,
    parameter_checksum,
    unfreeze,
)
from tests.helpers import tiny_config, tiny_dataset


class TestPlan(unittest.TestCase):
    def test_trace_for_small_schedule(self):
        cfg = TrainConfig(t1=2, t2=2, t3=1, rounds=2)
        self.assertEqual(expected_trace(cfg), list("PPDDTDDT"))
        self.assertEqual(len(expected_trace(cfg)), cfg.total_steps)

    def test_plan_rounds(self):
        plan = collaborative_plan(TrainConfig(t1=3, t2=4, t3=5, rounds=2))
        self.assertEqual(
            [(p.symbol, r, n) for p, r, n in plan],
            [("P", 0, 3), ("D", 1, 4), ("T", 1, 5), ("D", 2, 4), ("T", 2, 5)],
        )

    def test_zero_length_phases_are_skipped_in_trace(self):
        self.assertEqual(expected_trace(TrainConfig(t1=0, t2=1, t3=0, rounds=3)), list("DDD"))

    def test_schedule_enter(self):
        schedule = TrainSchedule()
        schedule.step_in_phase = 7
        schedule.enter(Phase.DENOISER, 2)
        self.assertEqual((schedule.phase, schedule.round, schedule.step_in_phase), (Phase.DENOISER, 2, 0))
        self.assertEqual(schedule.frozen, frozenset({"psi"}))
        self.assertEqual(Phase.SIMULTANEOUS.frozen, frozenset())


class TestFreezing(unittest.TestCase):
    def test_freeze_and_unfreeze(self):
        module = nn.Linear(2, 2)
        module(torch.rand(1, 2)).sum().backward()
        freeze(module)
        self.assertTrue(is_frozen(module))
        self.assertTrue(all(p.grad is None for p in module.parameters()))
        unfreeze(module)
        self.assertFalse(is_frozen(module))

    def test_guard_requires_frozen_modules(self):
        with self.assertRaises(SchedulingError):
            with FrozenGuard("detector", nn.Linear(2, 2)):
                pass

    def test_guard_detects_changes(self):
        module = nn.Linear(2, 2)
        freeze(module)
        with self.assertRaises(InvariantViolation):
            with FrozenGuard("detector", module):
                with torch.no_grad():
                    module.weight.add_(1.0)

    def test_guard_passes_untouched_modules(self):
        module = nn.Linear(2, 2)
        freeze(module)
        before = parameter_checksum(module)
        with FrozenGuard("detector", module):
            module(torch.rand(3, 2))
        self.assertEqual(parameter_checksum(module), before)


class TestBatches(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.samples = tiny_dataset(tiny_config()).train

    def test_collate_shapes(self):
        batch = collate(self.samples[:2])
        self.assertEqual(len(batch), 2)
        self.assertEqual(tuple(batch.ldct.shape), (2, 32, 32))
        self.assertEqual(batch.ldct.dtype, torch.float32)
        boxes, labels = batch.annotations[0]
        self.assertEqual(boxes.shape[1], 4)
        self.assertEqual(labels.dtype, torch.int64)

    def test_sampler_is_seeded_and_covers_an_epoch(self):
        a = BatchSampler(self.samples, batch_size=2, seed=3)
        b = BatchSampler(self.samples, batch_size=2, seed=3)
        first = a.next_batch().ids + a.next_batch().ids
        self.assertEqual(first, b.next_batch().ids + b.next_batch().ids)
        self.assertEqual(sorted(first), sorted(s.id for s in self.samples))

    def test_batch_size_is_capped(self):
        self.assertEqual(len(BatchSampler(self.samples, batch_size=99).next_batch()), len(self.samples))

    def test_empty_inputs_rejected(self):
        with self.assertRaises(DataError):
            BatchSampler([], batch_size=2)
        with self.assertRaises(DataError):
            collate([])


if __name__ == "__main__":
    unittest.main()
