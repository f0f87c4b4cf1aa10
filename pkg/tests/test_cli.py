import json
import os
import tempfile
import unittest
from types import SimpleNamespace
from unittest.mock import patch

import pandas as pd
import torch

from lidnet.cli import build_parser, main
from lidnet.errors import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_IO,
    EXIT_MISSING_ARTIFACTS,
    EXIT_MISSING_CHECKPOINT,
    EXIT_OK,
)
from lidnet.phantoms.dataset import load_dataset
from tests.helpers import TINY


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = self.tmp.name
        self.config = self.path("config.json")
        with open(self.config, "w", encoding="utf-8") as handle:
            json.dump(TINY, handle)
        self.data = self.path("data")

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def run_cli(self, *argv):
        with patch("builtins.print"):
            return main(["--config", self.config, *argv])

    def simulate(self):
        self.assertEqual(self.run_cli("simulate", "--out", self.data), EXIT_OK)


class TestParser(unittest.TestCase):
    def test_defaults(self):
        args = build_parser().parse_args(["ablate"])
        self.assertEqual(args.seeds, [0, 1, 2])
        self.assertEqual(args.profile, "desk")

    def test_train_flags(self):
        args = build_parser().parse_args(["train", "--variant", "gan", "--lambda1", "0", "--role", "eval-detector"])
        self.assertEqual((args.variant, args.lambda1, args.role), ("gan", 0.0, "eval-detector"))


class TestExitCodes(CliTestCase):
    def test_missing_config_file(self):
        self.assertEqual(main(["--config", self.path("nope.yaml"), "simulate", "--out", self.data]), EXIT_CONFIG)

    def test_invalid_config_value(self):
        with open(self.config, "w", encoding="utf-8") as handle:
            json.dump({"train": {"rounds": 0}}, handle)
        self.assertEqual(self.run_cli("simulate", "--out", self.data), EXIT_CONFIG)

    def test_simulate_refuses_to_overwrite(self):
        self.simulate()
        self.assertTrue(os.path.exists(self.path("data", "manifest.json")))
        self.assertEqual(self.run_cli("simulate", "--out", self.data), EXIT_IO)
        self.assertEqual(self.run_cli("simulate", "--out", self.data, "--force"), EXIT_OK)

    def test_train_without_dataset(self):
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", self.path("run")), EXIT_IO)

    def test_eval_without_checkpoint(self):
        self.simulate()
        self.assertEqual(
            self.run_cli("eval", "--run", self.path("run"), "--data", self.data), EXIT_MISSING_CHECKPOINT
        )

    def test_resume_without_run(self):
        self.simulate()
        code = self.run_cli("train", "--data", self.data, "--out", self.path("run"), "--resume", "pretrain")
        self.assertEqual(code, EXIT_MISSING_CHECKPOINT)

    def test_report_without_metrics(self):
        os.makedirs(self.path("run"))
        self.assertEqual(self.run_cli("report", "--run", self.path("run")), EXIT_MISSING_ARTIFACTS)

    def test_divergence(self):
        self.simulate()
        nan = SimpleNamespace(total=torch.tensor(float("nan"), requires_grad=True))
        with patch("lidnet.training.trainer.full_detector_loss", return_value=nan):
            code = self.run_cli("train", "--data", self.data, "--out", self.path("run"))
        self.assertEqual(code, EXIT_DIVERGED)

    def test_unknown_ablation_arm(self):
        self.simulate()
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", self.path("det"), "--role", "eval-detector"), EXIT_OK)
        code = self.run_cli(
            "ablate", "--data", self.data, "--out", self.path("ablation"),
            "--eval-detector", self.path("det", "checkpoints", "eval-detector"), "--arms", "no-such-arm",
        )
        self.assertEqual(code, EXIT_CONFIG)


class TestPipeline(CliTestCase):
    def test_simulate_train_eval_report(self):
        self.simulate()
        detector_dir = self.path("det", "checkpoints", "eval-detector")
        run = self.path("run")
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", self.path("det"), "--role", "eval-detector"), EXIT_OK)
        self.assertTrue(os.path.exists(os.path.join(detector_dir, "index.json")))

        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", run), EXIT_OK)
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", run), EXIT_IO)

        self.assertEqual(self.run_cli("eval", "--run", run, "--eval-detector", detector_dir), EXIT_OK)
        metrics = pd.read_csv(os.path.join(run, "metrics.csv"))
        self.assertEqual(metrics["name"].tolist(), ["NDCT-control", "LDCT-control", "model"])
        ndct_row = metrics.iloc[0]
        self.assertEqual(float(ndct_row["PSNR"]), 200.0)
        self.assertAlmostEqual(float(ndct_row["SSIM"]), 1.0, places=6)
        with open(os.path.join(run, "detections.jsonl"), encoding="utf-8") as handle:
            detections = [json.loads(line) for line in handle if line.strip()]
        test_ids = {sample.id for sample in load_dataset(self.data).test}
        for row in detections:
            self.assertEqual(sorted(row), ["box", "id", "label", "score"])
            self.assertIn(row["id"], test_ids)
            self.assertEqual(len(row["box"]), 4)
            self.assertGreaterEqual(row["score"], 0.05)

        self.assertEqual(self.run_cli("report", "--run", run), EXIT_OK)
        figures = os.listdir(os.path.join(run, "figures"))
        self.assertIn("ap_curve.png", figures)
        self.assertTrue(any(name.startswith("proposals_") for name in figures))
        with open(os.path.join(run, "table.md"), encoding="utf-8") as handle:
            self.assertEqual(len(handle.read().strip().splitlines()), 5)
        self.assertTrue(os.path.exists(os.path.join(run, "run.log")))

    def test_resume_finishes_a_run(self):
        self.simulate()
        run = self.path("run")
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", run), EXIT_OK)
        losses = pd.read_csv(os.path.join(run, "losses.csv"))
        self.assertEqual(self.run_cli("train", "--out", run, "--resume", "round01-detector"), EXIT_OK)
        resumed = pd.read_csv(os.path.join(run, "losses.csv"))
        self.assertEqual(resumed["step"].tolist(), losses["step"].tolist())
        self.assertEqual(resumed["phase"].tolist(), losses["phase"].tolist())
        self.assertEqual(self.run_cli("train", "--out", run, "--resume", "final"), EXIT_CONFIG)
        self.assertEqual(
            self.run_cli("train", "--out", run, "--resume", "pretrain", "--role", "eval-detector"), EXIT_CONFIG
        )

    def test_ablation_summary(self):
        self.simulate()
        self.assertEqual(self.run_cli("train", "--data", self.data, "--out", self.path("det"), "--role", "eval-detector"), EXIT_OK)
        code = self.run_cli(
            "ablate", "--data", self.data, "--out", self.path("ablation"),
            "--eval-detector", self.path("det", "checkpoints", "eval-detector"),
            "--arms", "recon-only", "lidnet-cnn", "--seeds", "0", "1",
        )
        self.assertEqual(code, EXIT_OK)
        runs = pd.read_csv(self.path("ablation", "ablation_runs.csv"))
        summary = pd.read_csv(self.path("ablation", "ablation.csv"))
        self.assertEqual(len(runs), 4)
        self.assertEqual(summary["arm"].tolist(), ["recon-only", "lidnet-cnn"])
        self.assertTrue(os.path.exists(self.path("ablation", "ablation.md")))


if __name__ == "__main__":
    unittest.main()
