import tempfile
import unittest
from pathlib import Path

import numpy as np
import scipy.sparse
from numpy.testing import assert_allclose, assert_array_equal

from codealign.annotate import FeatureScore
from codealign.codebook import CodeBook, CodeId
from codealign.cooccur import SiteEmbedding
from codealign.kgraph import ContrastiveSet, Edge, EdgeFamily, KnowledgeGraph, Split
from codealign.losses import LossWeights, MsHyper, PairBatch
from codealign.nn import Graph, Optimizer
from codealign.protocol import Checkpoint
from codealign.train import (
    GameEmbedding,
    MetricLog,
    Schedule,
    build_gats_baseline,
    compile_families,
    contrastive_loss,
    mean_shared_cosine,
    ppmi_edges,
    run_alignment,
    run_relatedness_step,
    run_similarity_step,
    run_two_step,
    select_epoch,
    training_graph,
)
from codealign.train import _chunk_plan, _step_scale


def C(text):
    return CodeId.parse(text)


def _book():
    codes = ["PheCode:%d" % i for i in range(1, 7)]
    codes += ["LocalLab:a", "LocalLab:b", "LocalLab:c"]
    codes += ["LOINC:1-1", "LOINC:2-2", "LOINC:3-3"]
    codes += ["RxNorm:%d" % i for i in range(1, 4)]
    return CodeBook.build([C(c) for c in codes])


def _graph(with_validation=True):
    edges = [
        Edge.of(C("PheCode:1"), C("PheCode:2"), EdgeFamily.SIM_NONHIERARCHICAL),
        Edge.of(C("PheCode:1"), C("RxNorm:1"), EdgeFamily.RELATED),
        Edge.of(C("LocalLab:a"), C("LOINC:1-1"), EdgeFamily.MAPPING),
        Edge.of(C("LocalLab:c"), C("LOINC:3-3"), EdgeFamily.MAPPING),
    ]
    edges = [e.with_split(Split.TRAIN) for e in edges]
    held_out = Edge.of(C("LocalLab:b"), C("LOINC:2-2"), EdgeFamily.MAPPING)
    if with_validation:
        edges.append(held_out.with_split(Split.VALIDATION))

    def s(anchor, positives, negatives, family):
        return ContrastiveSet(
            C(anchor),
            frozenset(C(c) for c in positives),
            frozenset(C(c) for c in negatives),
            family,
        )

    training = {
        EdgeFamily.SIM_NONHIERARCHICAL: (
            s(
                "PheCode:1",
                ["PheCode:2"],
                ["PheCode:5", "PheCode:6"],
                EdgeFamily.SIM_NONHIERARCHICAL,
            ),
        ),
        EdgeFamily.MAPPING: (
            s(
                "LocalLab:a",
                ["LOINC:1-1"],
                ["LOINC:2-2", "LOINC:3-3"],
                EdgeFamily.MAPPING,
            ),
            s("LocalLab:c", ["LOINC:3-3"], ["LOINC:1-1"], EdgeFamily.MAPPING),
        ),
        EdgeFamily.RELATED: (
            s("PheCode:1", ["RxNorm:1"], ["RxNorm:2", "RxNorm:3"], EdgeFamily.RELATED),
        ),
        EdgeFamily.FEATURE_POS: (
            s("PheCode:3", ["PheCode:4"], ["PheCode:6"], EdgeFamily.FEATURE_POS),
        ),
    }
    scores = (
        FeatureScore(C("PheCode:4"), C("PheCode:3"), 1.0),
        FeatureScore(C("PheCode:6"), C("PheCode:3"), 0.0),
        FeatureScore(C("PheCode:6"), C("PheCode:5"), 1.0),
        FeatureScore(C("PheCode:1"), C("PheCode:5"), 0.0),
        FeatureScore(C("RxNorm:3"), C("PheCode:5"), 0.5),
    )
    split = {C("PheCode:3"): Split.TRAIN}
    if with_validation:
        split[C("PheCode:5")] = Split.VALIDATION
    return KnowledgeGraph(
        edges=tuple(edges),
        training=training,
        feature_scores=scores,
        feature_split=split,
    )


def _inputs(book, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(book.size, 6)), rng.normal(size=(book.size, 4))


_OPT = Optimizer(learning_rate=0.05)
_SHORT = Schedule(max_epochs=3, chunk_size=2)


class ScheduleTest(unittest.TestCase):
    def test_validation(self):
        with self.assertRaises(ValueError):
            Schedule(max_epochs=-1)
        with self.assertRaises(ValueError):
            Schedule(chunk_size=0)


class SelectEpochTest(unittest.TestCase):
    records = [
        {"epoch": 0, "score": 0.2, "loss": 5.0},
        {"epoch": 1, "score": 0.6, "loss": 3.0},
        {"epoch": 2, "score": 0.6, "loss": 3.0},
        {"epoch": 3, "score": 0.4, "loss": 4.0},
    ]

    def test_first_best_wins(self):
        self.assertEqual(select_epoch(self.records, "score", "max"), 1)
        self.assertEqual(select_epoch(self.records, "loss", "min"), 1)

    def test_errors(self):
        with self.assertRaises(ValueError):
            select_epoch(self.records, "score", "best")
        with self.assertRaises(ValueError):
            select_epoch([], "score", "max")

    def test_log_round_trip(self):
        with tempfile.TemporaryDirectory() as tmp:
            log = MetricLog(Path(tmp) / "metrics.jsonl")
            log.record("similarity", 0, loss=2.5, score=0.5)
            log.record("relatedness", 0, loss=1.5)
            again = MetricLog.load(Path(tmp) / "metrics.jsonl")
            self.assertEqual(again.records, log.records)
            self.assertEqual(len(again.stage("similarity")), 1)


class TrainingGraphTest(unittest.TestCase):
    def test_only_training_edges(self):
        book = _book()
        graph = training_graph(_graph(), book)
        pairs = {tuple(p) for p in graph.undirected_pairs().tolist()}
        held = tuple(sorted(book.rows([C("LocalLab:b"), C("LOINC:2-2")]).tolist()))
        kept = tuple(sorted(book.rows([C("LocalLab:a"), C("LOINC:1-1")]).tolist()))
        self.assertNotIn(held, pairs)
        self.assertIn(kept, pairs)
        self.assertEqual(graph.n_edges, 4)


def _sites(book, n_sites, seed=0):
    rng = np.random.default_rng(seed)
    sites = []
    for m in range(n_sites):
        present = np.sort(rng.choice(book.size, size=10, replace=False))
        matrix = np.zeros((book.size, 5))
        matrix[present] = rng.normal(size=(10, 5))
        sites.append(SiteEmbedding("site%d" % m, matrix, present))
    return sites


class AlignmentTest(unittest.TestCase):
    def setUp(self):
        self.book = _book()
        self.graph = training_graph(_graph(), self.book)

    def test_single_site_stops_after_one_epoch(self):
        result = run_alignment(
            _sites(self.book, 1), self.graph, _OPT, schedule=Schedule(max_epochs=50)
        )
        self.assertEqual(result.losses, (0.0, 0.0))
        self.assertEqual(result.best_epoch, 0)
        self.assertEqual(result.y.shape, (self.book.size, 5))

    def test_loss_goes_down(self):
        log = MetricLog()
        result = run_alignment(
            _sites(self.book, 2),
            self.graph,
            Optimizer(learning_rate=1e-2, decay=1.0),
            schedule=Schedule(max_epochs=5, drop_rate=0.0),
            log=log,
        )
        self.assertGreaterEqual(result.best_epoch, 1)
        self.assertEqual(result.losses[result.best_epoch], min(result.losses))
        self.assertLess(result.losses[result.best_epoch], result.losses[0])
        self.assertEqual(len(log.stage("align")), len(result.losses))
        chosen = select_epoch(log.stage("align"), "loss", "min")
        self.assertEqual(chosen, result.best_epoch)
        for value in result.cosines:
            self.assertLessEqual(abs(value), 1 + 1e-12)

    def test_deterministic_across_threads(self):
        sites = _sites(self.book, 3)
        one = run_alignment(sites, self.graph, _OPT, seed=4, schedule=_SHORT)
        two = run_alignment(
            sites,
            self.graph,
            _OPT,
            seed=4,
            schedule=Schedule(max_epochs=3, chunk_size=2, threads=3),
        )
        assert_array_equal(one.y, two.y)
        self.assertEqual(one.losses, two.losses)

    def test_no_epochs(self):
        result = run_alignment(
            _sites(self.book, 2), self.graph, _OPT, schedule=Schedule(max_epochs=0)
        )
        self.assertEqual(result.best_epoch, 0)
        self.assertEqual(len(result.losses), 1)
        assert_allclose(np.linalg.norm(result.y, axis=1), 1.0)

    def test_checkpoint(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "align.ckpt"
            result = run_alignment(
                _sites(self.book, 2), self.graph, _OPT, schedule=_SHORT, checkpoint=path
            )
            saved = Checkpoint.load(path)
        assert_array_equal(saved.extra["y"], result.y)
        self.assertEqual(saved.epoch, result.best_epoch)
        self.assertTrue(any(k.startswith("site1.") for k in saved.params))

    def test_shape_errors(self):
        with self.assertRaises(ValueError):
            run_alignment([], self.graph, _OPT)
        with self.assertRaises(ValueError):
            run_alignment(_sites(self.book, 2), Graph.from_pairs(3, []), _OPT)

    def test_shared_cosine_of_identical_sites(self):
        y = np.random.default_rng(2).normal(size=(4, 3))
        rows = np.arange(4)
        self.assertAlmostEqual(mean_shared_cosine([y, y], [rows, rows[:2]]), 1.0)
        self.assertTrue(np.isnan(mean_shared_cosine([y, y], [rows[:2], rows[2:]])))


class ContrastiveLossTest(unittest.TestCase):
    def test_weighted_parts(self):
        book = _book()
        batches = compile_families(
            _graph(), book, [EdgeFamily.MAPPING, EdgeFamily.FEATURE_POS]
        )
        z = np.random.default_rng(3).normal(size=(book.size, 4))
        weights = LossWeights(c_map=2.0, c_fea=0.5)
        total, grad, parts = contrastive_loss(z, batches, weights, MsHyper())
        self.assertEqual(set(parts), {"mapping", "feature_pos"})
        self.assertAlmostEqual(
            total, 2.0 * parts["mapping"] + 0.5 * parts["feature_pos"], places=12
        )
        self.assertEqual(grad.shape, z.shape)

    def test_missing_family_is_empty(self):
        book = _book()
        batches = compile_families(_graph(), book, [EdgeFamily.SIM_HIERARCHICAL])
        self.assertEqual(batches[EdgeFamily.SIM_HIERARCHICAL].n_sets, 0)
        self.assertIsInstance(batches[EdgeFamily.SIM_HIERARCHICAL], PairBatch)


class ChunkPlanTest(unittest.TestCase):
    def setUp(self):
        self.book = _book()
        self.batches = compile_families(
            _graph(),
            self.book,
            [EdgeFamily.MAPPING, EdgeFamily.RELATED, EdgeFamily.FEATURE_POS],
        )

    def test_feature_family_is_never_split(self):
        plan = _chunk_plan(self.batches, 1)
        self.assertEqual(len(plan), 3)
        feature = self.batches[EdgeFamily.FEATURE_POS]
        self.assertIs(plan[0][EdgeFamily.FEATURE_POS], feature)
        for part in plan[1:]:
            self.assertNotIn(EdgeFamily.FEATURE_POS, part)
        sizes = [
            sum(b.n_sets for f, b in part.items() if f != EdgeFamily.FEATURE_POS)
            for part in plan
        ]
        self.assertEqual(sizes, [1, 1, 1])

    def test_feature_loss_matches_the_whole_batch(self):
        z = np.random.default_rng(2).normal(size=(self.book.size, 4))
        only = {EdgeFamily.FEATURE_POS: self.batches[EdgeFamily.FEATURE_POS]}
        whole, _, _ = contrastive_loss(z, only, LossWeights(), MsHyper())
        chunked = 0.0
        for part in _chunk_plan(self.batches, 1):
            _, _, parts = contrastive_loss(z, part, LossWeights(), MsHyper())
            chunked += 0.1 * parts.get("feature_pos", 0.0)
        self.assertAlmostEqual(chunked, whole, places=12)

    def test_feature_only_plan(self):
        only = {EdgeFamily.FEATURE_POS: self.batches[EdgeFamily.FEATURE_POS]}
        plan = _chunk_plan(only, 1024)
        self.assertEqual(len(plan), 1)
        self.assertIs(plan[0][EdgeFamily.FEATURE_POS], only[EdgeFamily.FEATURE_POS])

    def test_step_scale_counts_terms(self):
        plan = _chunk_plan(self.batches, 2)
        # two mapping sets plus the feature term, then one relatedness set
        self.assertEqual([_step_scale(p) for p in plan], [1 / 3, 1.0])
        self.assertEqual(_step_scale({}), 1.0)


class TwoStepTest(unittest.TestCase):
    def setUp(self):
        self.book = _book()
        self.kg = _graph()
        self.x, self.y = _inputs(self.book)

    def test_similarity_selection_matches_log(self):
        log = MetricLog()
        z_sim, epoch = run_similarity_step(
            self.x, self.y, self.kg, self.book, _OPT, schedule=_SHORT, log=log
        )
        records = log.stage("similarity")
        self.assertEqual([r["epoch"] for r in records], [0, 1, 2, 3])
        self.assertEqual(select_epoch(records, "score", "max"), epoch)
        self.assertEqual(z_sim.shape, (self.book.size, 8))
        assert_allclose(np.linalg.norm(z_sim, axis=1), 1.0)
        self.assertIn("loss_mapping", records[0])

    def test_no_epochs_keeps_initial_model(self):
        log = MetricLog()
        _, epoch = run_similarity_step(
            self.x,
            self.y,
            self.kg,
            self.book,
            _OPT,
            schedule=Schedule(max_epochs=0),
            log=log,
        )
        self.assertEqual(epoch, 0)
        self.assertEqual(len(log.records), 1)

    def test_two_step_reuses_similarity_result(self):
        alone, _ = run_similarity_step(
            self.x, self.y, self.kg, self.book, _OPT, seed=9, schedule=_SHORT
        )
        with tempfile.TemporaryDirectory() as tmp:
            game = run_two_step(
                self.x,
                self.y,
                self.kg,
                self.book,
                _OPT,
                seed=9,
                dim_rel=6,
                schedule=_SHORT,
                checkpoint_dir=Path(tmp),
            )
            self.assertTrue((Path(tmp) / "similarity.ckpt").exists())
            saved = Checkpoint.load(Path(tmp) / "relatedness.ckpt")
        assert_array_equal(game.z_sim, alone)
        self.assertEqual(game.z_rel.shape, (self.book.size, 6))
        self.assertEqual(game.z.shape, (self.book.size, 14))
        assert_array_equal(saved.extra["embedding"], game.z_rel)

    def test_relatedness_selection_matches_log(self):
        z_sim = np.zeros((self.book.size, 2))
        z_sim[:, 0] = 1.0
        log = MetricLog()
        z_rel, epoch = run_relatedness_step(
            self.x,
            self.y,
            z_sim,
            self.kg,
            self.book,
            _OPT,
            dim_rel=3,
            schedule=_SHORT,
            log=log,
        )
        records = log.stage("relatedness")
        self.assertEqual(select_epoch(records, "score", "max"), epoch)
        self.assertEqual(z_rel.shape, (self.book.size, 3))
        self.assertIn("loss_feature_pos", records[0])

    def test_missing_validation(self):
        kg = _graph(with_validation=False)
        with self.assertRaisesRegex(ValueError, "validation mapping"):
            run_similarity_step(self.x, self.y, kg, self.book, _OPT, schedule=_SHORT)
        log = MetricLog()
        with self.assertRaisesRegex(ValueError, "validation mapping"):
            run_two_step(self.x, self.y, kg, self.book, _OPT, schedule=_SHORT, log=log)
        self.assertEqual(log.records, [])

    def test_missing_feature_targets(self):
        kg = _graph()
        kg = KnowledgeGraph(
            edges=kg.edges,
            training=kg.training,
            feature_scores=kg.feature_scores,
            feature_split={C("PheCode:3"): Split.TRAIN},
        )
        log = MetricLog()
        with self.assertRaisesRegex(ValueError, "feature targets"):
            run_two_step(self.x, self.y, kg, self.book, _OPT, schedule=_SHORT, log=log)
        self.assertEqual(log.records, [])

    def test_row_mismatch(self):
        with self.assertRaises(ValueError):
            run_two_step(self.x[:3], self.y, self.kg, self.book, _OPT)

    def test_embedding_round_trip(self):
        rng = np.random.default_rng(1)
        game = GameEmbedding(
            rng.normal(size=(self.book.size, 2)),
            rng.normal(size=(self.book.size, 3)),
            4,
            7,
        )
        with tempfile.TemporaryDirectory() as tmp:
            game.save(Path(tmp), self.book)
            again = GameEmbedding.load(Path(tmp), self.book)
        assert_array_equal(again.z, game.z)
        self.assertEqual((again.sim_epoch, again.rel_epoch), (4, 7))


def _upper_ppmi(book, values):
    n = book.size
    rows, cols = np.triu_indices(n, k=1)
    data = np.zeros(len(rows))
    data[: len(values)] = values
    upper = scipy.sparse.coo_matrix((data, (rows, cols)), shape=(n, n))
    return (list(book.codes), (upper + upper.T).tocsr())


class BaselineTest(unittest.TestCase):
    def test_only_the_top_value_passes(self):
        book = _book()
        site = _upper_ppmi(book, np.arange(1, 101, dtype=np.float64))
        edges = ppmi_edges([site], book)
        rows, cols = np.triu_indices(book.size, k=1)
        assert_array_equal(edges, [[rows[99], cols[99]]])

    def test_no_edges_from_zero_ppmi(self):
        book = _book()
        edges = ppmi_edges([_upper_ppmi(book, [])], book)
        self.assertEqual(edges.shape, (0, 2))

    def test_baseline_embedding(self):
        book = _book()
        x, _ = _inputs(book, seed=5)
        site = _upper_ppmi(book, np.arange(1, 101, dtype=np.float64))
        log = MetricLog()
        z = build_gats_baseline(
            x, _graph(), book, [site], _OPT, out_dim=4, schedule=_SHORT, log=log
        )
        again = build_gats_baseline(
            x, _graph(), book, [site], _OPT, out_dim=4, schedule=_SHORT
        )
        self.assertEqual(z.shape, (book.size, 4))
        assert_array_equal(z, again)
        records = log.stage("baseline")
        self.assertNotIn("score", records[0])
        self.assertNotIn("loss_mapping", records[0])

    def test_needs_the_same_validation_tasks(self):
        book = _book()
        x, _ = _inputs(book)
        site = _upper_ppmi(book, np.arange(1, 101, dtype=np.float64))
        log = MetricLog()
        with self.assertRaisesRegex(ValueError, "validation mapping"):
            build_gats_baseline(
                x,
                _graph(with_validation=False),
                book,
                [site],
                _OPT,
                out_dim=4,
                schedule=_SHORT,
                log=log,
            )
        self.assertEqual(log.records, [])


if __name__ == "__main__":
    unittest.main()
