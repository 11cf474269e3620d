import json
import os
import shutil
import tempfile
import unittest
from pathlib import Path

from codealign.config import PipelineConfig
from codealign.evalx import load_reports
from codealign.main import (
    EXIT_BAD_CONFIG,
    EXIT_BAD_INPUT,
    EXIT_OK,
    load_manifest,
    main,
)

SMOKE = [
    "synth.n_concepts=20",
    "synth.n_sites=2",
    "synth.n_patients_per_site=100",
    "synth.events_per_patient=20",
    "ppmi.min_pair=1",
    "ppmi.min_code_total=1",
    "model.dim=8",
    "model.dim_sim=2",
    "model.dim_rel=6",
    "train.max_epochs=2",
    "curate.feature_random=100",
    "stratify.threshold_percentile=50",
    "stratify.n_random_pairs=2000",
]

STAGES = ["synth", "ppmi", "align", "train", "eval", "stratify", "report"]


def run(command, run_dir, *extra):
    return main([command, "--run-dir", str(run_dir)] + SMOKE + list(extra))


def hashes(run_dir):
    return [(e.stage, e.inputs, e.outputs) for e in load_manifest(run_dir)]


class SmokePipelineTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls._tmp = tempfile.TemporaryDirectory()
        cls.run_dir = Path(cls._tmp.name) / "run"
        cls.statuses = [run(stage, cls.run_dir) for stage in STAGES]

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()

    def test_every_stage_succeeds(self):
        self.assertEqual(self.statuses, [EXIT_OK] * len(STAGES))
        self.assertEqual([e.stage for e in load_manifest(self.run_dir)], STAGES)

    def test_outputs(self):
        for name in [
            "synth/codes.tsv",
            "ppmi/site1.bin",
            "ppmi/counts/site2.tsv",
            "align/y.bin",
            "align/kg/edges.tsv",
            "train/game/z_sim.bin",
            "train/baseline.bin",
            "eval/reports.json",
            "stratify/clusters.json",
            "report/report.txt",
        ]:
            self.assertTrue((self.run_dir / name).exists(), name)

    def test_eval_reports_cover_both_methods(self):
        tasks = {r.task for r in load_reports(self.run_dir / "eval" / "reports.json")}
        for task in [
            "mapping:game",
            "mapping:gat_s",
            "similarity:game",
            "relatedness:gat_s",
        ]:
            self.assertIn(task, tasks)

    def test_config_snapshot(self):
        snapshot = PipelineConfig.load(self.run_dir / "config.yaml")
        self.assertEqual(snapshot, PipelineConfig.parse("", SMOKE))

    def test_manifest_names_run_files_relatively(self):
        (entry,) = [e for e in load_manifest(self.run_dir) if e.stage == "ppmi"]
        self.assertIn("synth/codes.tsv", entry.inputs)
        self.assertIn("config", entry.inputs)
        self.assertIn("ppmi/sites.json", entry.outputs)

    def test_rerun_is_a_no_op(self):
        before = (self.run_dir / "manifest.jsonl").read_text()
        self.assertEqual(run("ppmi", self.run_dir), EXIT_OK)
        self.assertEqual((self.run_dir / "manifest.jsonl").read_text(), before)

    def test_changed_config_reruns(self):
        with tempfile.TemporaryDirectory() as tmp:
            copy = Path(tmp) / "run"
            shutil.copytree(self.run_dir, copy)
            before = len(load_manifest(copy))
            self.assertEqual(run("report", copy, "eval.chart=false"), EXIT_OK)
            self.assertEqual(len(load_manifest(copy)), before + 1)
            self.assertEqual(run("report", copy, "eval.chart=false"), EXIT_OK)
            self.assertEqual(len(load_manifest(copy)), before + 1)
            self.assertEqual(
                run("report", copy, "eval.chart=false", "--force"), EXIT_OK
            )
            self.assertEqual(len(load_manifest(copy)), before + 2)

    def test_same_config_gives_identical_manifest(self):
        with tempfile.TemporaryDirectory() as tmp:
            other = Path(tmp) / "run"
            self.assertEqual(run("all", other), EXIT_OK)
            self.assertEqual(hashes(other), hashes(self.run_dir))

    def test_corrupt_counts_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            counts = Path(tmp) / "counts"
            counts.mkdir()
            source = self.run_dir / "ppmi" / "counts"
            for site in ("site1", "site2"):
                shutil.copy(source / ("%s.json" % site), counts)
                shutil.copy(source / ("%s.tsv" % site), counts)
            lines = (source / "site1.tsv").read_text().splitlines()
            (counts / "site1.tsv").write_text(
                "\n".join(lines[:3] + ["a\tb\t1\t9"] + lines[3:]) + "\n"
            )
            synth = self.run_dir / "synth"
            with self.assertLogs("codealign.main", level="ERROR") as logs:
                status = run(
                    "ppmi",
                    Path(tmp) / "run",
                    "paths.codes=%s" % (synth / "codes.tsv"),
                    "paths.hierarchy=%s" % (synth / "hierarchy.tsv"),
                    "paths.lp_children=%s" % (synth / "lp_children.tsv"),
                    "paths.cooccurrence=%s" % counts,
                )
        self.assertEqual(status, EXIT_BAD_INPUT)
        self.assertIn("site1.tsv:4:", "\n".join(logs.output))


class ExitStatusTest(unittest.TestCase):
    def test_missing_input(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertLogs("codealign.main", level="ERROR") as logs:
                status = run("ppmi", tmp)
        self.assertEqual(status, EXIT_BAD_INPUT)
        self.assertIn("codes.tsv", "\n".join(logs.output))

    def test_missing_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertLogs("codealign.main", level="ERROR"):
                status = run("synth", tmp, "--config", str(Path(tmp) / "nope.yaml"))
        self.assertEqual(status, EXIT_BAD_INPUT)

    def test_invalid_config(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(run("synth", tmp, "model.dim_sim=5"), EXIT_BAD_CONFIG)
            self.assertEqual(run("synth", tmp, "train.epochs=5"), EXIT_BAD_CONFIG)
            self.assertFalse((Path(tmp) / "manifest.jsonl").exists())

    def test_config_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.yaml"
            path.write_text("synth:\n  n_patients_per_site: 5\n  n_concepts: 12\n")
            status = main(["synth", "--run-dir", tmp, "--config", str(path)])
            self.assertEqual(status, EXIT_OK)
            snapshot = PipelineConfig.load(Path(tmp) / "config.yaml")
            self.assertEqual(snapshot.synth.n_patients_per_site, 5)


SMALL_CORPUS = [
    "synth.n_concepts=30",
    "synth.n_sites=2",
    "synth.n_patients_per_site=500",
    "synth.events_per_patient=60",
    "train.max_epochs=40",
]


class SmallCorpusRecoveryTest(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        with tempfile.TemporaryDirectory() as tmp:
            cls.status = main(["all", "--run-dir", tmp] + SMALL_CORPUS)
            path = Path(tmp) / "eval" / "reports.json"
            cls.reports = {r.task: r.metrics for r in load_reports(path)}

    def test_pipeline_succeeds(self):
        self.assertEqual(self.status, EXIT_OK)

    def test_mapping_beats_baseline(self):
        game, baseline = self.reports["mapping:game"], self.reports["mapping:gat_s"]
        self.assertGreaterEqual(game["top1"], 0.5)
        self.assertGreaterEqual(game["top1"], baseline["top1"])
        self.assertGreaterEqual(game["top5"], game["top1"])

    def test_relatedness_beats_baseline(self):
        game = self.reports["relatedness:game"]["auc"]
        self.assertGreater(game, 0.5)
        self.assertGreater(game, self.reports["relatedness:gat_s"]["auc"])


@unittest.skipUnless(
    os.environ.get("CODEALIGN_ACCEPTANCE") == "1",
    "set CODEALIGN_ACCEPTANCE=1 for the full planted-recovery run",
)
class PlantedRecoveryTest(unittest.TestCase):
    def test_default_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            self.assertEqual(main(["all", "--run-dir", tmp, "--threads", "4"]), EXIT_OK)
            reports = {
                r.task: r.metrics
                for r in load_reports(Path(tmp) / "eval" / "reports.json")
            }
            clusters_path = Path(tmp) / "stratify" / "clusters.json"
            clusters = json.loads(clusters_path.read_text())
        game, baseline = reports["mapping:game"], reports["mapping:gat_s"]
        self.assertGreaterEqual(game["top1"], 0.80)
        self.assertGreaterEqual(game["top5"], 0.95)
        self.assertGreater(game["top1"], baseline["top1"])
        related = reports["relatedness:game"]["auc"]
        self.assertGreaterEqual(related, 0.90)
        self.assertGreater(related, reports["relatedness:gat_s"]["auc"])
        self.assertGreater(clusters[0]["outcome_odds_ratio"], 3)
        self.assertLess(clusters[0]["outcome_p_value"], 0.01)


if __name__ == "__main__":
    unittest.main()
