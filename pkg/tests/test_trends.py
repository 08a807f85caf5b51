"""
Desk-scale trend checks for jamident.

These train full models on the 3,200-sample desk dataset and take a long
time on CPU. Run them with JAMIDENT_SLOW_TESTS=1.
"""

import filecmp
import os
import tempfile
import unittest

import numpy as np

from src import harness
from src.config import Config, resolve_workers
from src.diffnet import DiffTransformer
from src.metrics import isnr_trend
from src.training import train

SLOW = os.environ.get("JAMIDENT_SLOW_TESTS") == "1"


@unittest.skipUnless(SLOW, "set JAMIDENT_SLOW_TESTS=1 to run desk-scale training")
class TestDeskScaleTrends(unittest.TestCase):
    """Learning trend and defense ordering at desk scale."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.config = Config()
        cls.config.apply_scale("desk")
        workers = resolve_workers(cls.config["Runtime"]["workers"])
        dataset = harness.gen_dataset(cls.config.dataset_config(), cls.tmp.name, workers)
        cls.train_set, cls.test_set = dataset.split("train"), dataset.split("test")
        cls.models = {}
        for strategy in ("baseline", "masked", "consistent"):
            model = DiffTransformer(cls.config.model_config(), seed=cls.config["Model"]["seed"])
            train(strategy, model, cls.train_set, cls.config.train_config(),
                  cls.config.mask_ensemble_config(), cls.config.consistency_config())
            cls.models[strategy] = model

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def classifier(self, strategy):
        if strategy == "masked":
            return harness.Classifier(self.models[strategy], self.config.mask_ensemble_config())
        return harness.Classifier(self.models[strategy])

    def test_accuracy_rises_with_isnr(self):
        """Test baseline accuracy is high at 8 dB, low at -14 dB and increasing in between."""
        report = harness.evaluate(self.classifier("baseline"), self.test_set)
        per_isnr = report.per_isnr.set_index("isnr_db")["accuracy"]
        self.assertGreaterEqual(per_isnr[8.0], 0.85)
        self.assertLessEqual(per_isnr[-14.0], 0.45)
        self.assertTrue(np.all(np.diff(per_isnr.sort_index().to_numpy()) > 0))
        self.assertGreater(isnr_trend(report.per_isnr), 0)

    def test_defense_ordering(self):
        """Test masked > consistent > undefended at eps = 14/255 by at least 5 points each."""
        accuracy = {}
        for strategy in self.models:
            report = harness.eval_adversarial(self.classifier(strategy), self.test_set, [14 / 255])
            accuracy[strategy] = report.summary["accuracy"].iloc[0]
        self.assertGreaterEqual(accuracy["masked"] - accuracy["consistent"], 0.05)
        self.assertGreaterEqual(accuracy["consistent"] - accuracy["baseline"], 0.05)

    def test_masking_helps_at_high_isnr(self):
        """Test the masked model beats the undefended one by 10 points at 8 dB under eps = 6/255."""
        high = self.test_set.isnr_db == 8.0
        subset = harness.Dataset(self.test_set.images[high], self.test_set.labels[high],
                                 self.test_set.isnr_db[high], self.test_set.is_test[high])
        masked = harness.eval_adversarial(self.classifier("masked"), subset, [6 / 255]).summary["accuracy"].iloc[0]
        plain = harness.eval_adversarial(self.classifier("baseline"), subset, [6 / 255]).summary["accuracy"].iloc[0]
        self.assertGreaterEqual(masked - plain, 0.10)

    def test_undefended_accuracy_falls_with_budget(self):
        """Test accuracy of the undefended model does not grow with the budget."""
        report = harness.eval_adversarial(self.classifier("baseline"), self.test_set, [0.0, 3 / 255, 8 / 255, 14 / 255])
        accuracy = report.summary["accuracy"].to_numpy()
        self.assertTrue(np.all(np.diff(accuracy) <= 0.02))


@unittest.skipUnless(SLOW, "set JAMIDENT_SLOW_TESTS=1 to run the reproducibility pipeline")
class TestReproducibility(unittest.TestCase):
    """Identical seeds give identical blobs and reports."""

    def run_pipeline(self, out_dir):
        config = Config()
        config.apply_scale("desk")
        data_dir = os.path.join(out_dir, "data")
        dataset = harness.gen_dataset(config.dataset_config(), data_dir, workers=2)
        model = DiffTransformer(config.model_config(), seed=config["Model"]["seed"])
        train("baseline", model, dataset.split("train"), config.train_config())
        report = harness.evaluate(model, dataset.split("test"))
        harness.write_eval_report(report, out_dir)
        return data_dir

    def test_pipeline_is_deterministic(self):
        """Test two runs write byte-identical datasets and evaluation CSVs."""
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            data_a, data_b = self.run_pipeline(first), self.run_pipeline(second)
            for name in ("images.f32", "labels.u8", "isnr.f32", "manifest.json"):
                self.assertTrue(filecmp.cmp(os.path.join(data_a, name), os.path.join(data_b, name), shallow=False))
            for name in ("eval.csv", "eval_class_isnr.csv", "confusion.csv"):
                self.assertTrue(filecmp.cmp(os.path.join(first, name), os.path.join(second, name), shallow=False))


if __name__ == "__main__":
    unittest.main()
