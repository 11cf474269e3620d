"""
The ``codealign`` command: one subcommand per pipeline stage.

Every stage reads declared inputs and writes its outputs under the run
directory, then appends one line to ``manifest.jsonl`` with the SHA-256 of
every input and output. A stage whose inputs hash the same as its last
manifest entry (and whose outputs are intact) is skipped unless ``--force``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import textwrap
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .annotate import Oracle, open_oracle
from .codebook import CodeBook, CodeId, RollupTable
from .config import ConfigError, PipelineConfig, derive_seed
from .cooccur import (
    SiteCooccurrence,
    SiteEmbedding,
    apply_thresholds,
    build_site_embedding,
    compute_ppmi,
    count_cooccurrence,
)
from .evalx import (
    EvalReport,
    GoldMapping,
    bar_chart_svg,
    feature_selection_harness,
    known_pair_report,
    load_gold_mappings,
    load_reports,
    mapping_report,
    save_reports,
)
from .kgraph import (
    EdgeFamily,
    KnowledgeGraph,
    Split,
    curate,
    load_relation_pairs,
)
from .protocol import load_matrix, save_matrix
from .stratify import load_patient_events, save_cluster_reports, stratify_cohort
from .synth import CORPUS_FILES, GroundTruth, generate_corpus
from .textemb import (
    expand_descriptions,
    load_embeddings,
    mock_embeddings,
    save_descriptions,
    save_embeddings,
)
from .train import (
    GameEmbedding,
    MetricLog,
    build_gats_baseline,
    run_alignment,
    run_two_step,
    training_graph,
)
from .tsv import InputFormatError, MissingInputError

logger = logging.getLogger(__name__)

MANIFEST = "manifest.jsonl"
CONFIG_SNAPSHOT = "config.yaml"
ANNOTATION_CACHE = "annotations.jsonl"

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_BAD_CONFIG = 3


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _files(paths: Sequence[Path]) -> List[Path]:
    """`paths`, with directories replaced by the files under them."""
    out = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            out.extend(sorted(p for p in path.rglob("*") if p.is_file()))
        else:
            out.append(path)
    return out


@dataclass(frozen=True)
class ManifestEntry:
    stage: str

    inputs: Mapping[str, str]
    """Path -> SHA-256. Paths inside the run directory are relative to it.
    The key ``config`` holds the hash of the config snapshot."""

    outputs: Mapping[str, str]

    duration: float = 0.0
    """Wall-clock seconds. The only field that differs between reruns."""

    def as_dict(self) -> Dict[str, object]:
        return {
            "stage": self.stage,
            "inputs": dict(self.inputs),
            "outputs": dict(self.outputs),
            "duration": self.duration,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> ManifestEntry:
        return cls(
            str(data["stage"]),
            dict(data["inputs"]),
            dict(data["outputs"]),
            float(data.get("duration", 0.0)),
        )


def load_manifest(run_dir: Path) -> List[ManifestEntry]:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        return []
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entries.append(ManifestEntry.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as err:
            raise InputFormatError(path, lineno, "bad manifest line: %s" % err)
    return entries


def append_manifest(run_dir: Path, entry: ManifestEntry) -> None:
    with (Path(run_dir) / MANIFEST).open("a") as f:
        f.write(json.dumps(entry.as_dict(), sort_keys=True) + "\n")


class RunContext:
    """
    One invocation: the config, the run directory and the stage plumbing.

    :param threads: upper bound on within-stage parallelism.
    :param force: rerun stages even when their inputs are unchanged.
    """

    def __init__(
        self,
        config: PipelineConfig,
        run_dir: Path,
        *,
        threads: int = 1,
        force: bool = False,
    ):
        self.config = config
        self.run_dir = Path(run_dir)
        self.threads = threads
        self.force = force
        self._config_hash = hashlib.sha256(config.dump().encode("utf-8")).hexdigest()
        self._oracle: Optional[Oracle] = None

    # -- paths -----------------------------------------------------------

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def name(self, path: Path) -> str:
        """How the manifest names `path`."""
        path = Path(path)
        try:
            return path.resolve().relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            return str(path)

    def input(self, key: str) -> Path:
        """
        The configured ``paths.<key>`` file, or the synth stage's output.
        """
        configured = getattr(self.config.paths, key)
        if configured:
            return Path(configured)
        return self.path("synth", CORPUS_FILES[key])

    def optional_input(self, key: str) -> Optional[Path]:
        """
        Like :meth:`input`, but None for an unconfigured file that the
        synth stage did not write. A configured file must exist.
        """
        path = self.input(key)
        if getattr(self.config.paths, key) or path.exists():
            return path
        return None

    def book_inputs(self) -> List[Path]:
        paths = [self.input("codes")]
        for key in ("hierarchy", "lp_children"):
            path = self.optional_input(key)
            if path is not None:
                paths.append(path)
        return paths

    def book(self) -> CodeBook:
        return CodeBook.load(
            self.input("codes"),
            self.optional_input("hierarchy"),
            self.optional_input("lp_children"),
        )

    def rollup(self) -> Optional[RollupTable]:
        if not self.config.paths.rollup:
            return None
        return RollupTable.load(Path(self.config.paths.rollup))

    def event_inputs(self) -> List[Path]:
        paths = [self.input("events")]
        if self.config.paths.rollup:
            paths.append(Path(self.config.paths.rollup))
        return paths

    def sites(self) -> List[str]:
        path = self.path("ppmi", "sites.json")
        if not path.exists():
            raise MissingInputError(path)
        return list(json.loads(path.read_text()))

    def site_embedding_paths(self) -> List[Path]:
        return [self.path("ppmi", "%s.bin" % site) for site in self.sites()]

    def count_paths(self, site: str) -> Tuple[Path, Path]:
        return (
            self.path("ppmi", "counts", "%s.tsv" % site),
            self.path("ppmi", "counts", "%s.json" % site),
        )

    def seed(self, stage: str, purpose: str) -> int:
        return derive_seed(self.config.seed, stage, purpose)

    # -- annotation --------------------------------------------------------

    def oracle_inputs(self) -> List[Path]:
        a = self.config.annotate
        if a.oracle == "synthetic":
            return [self.input("truth")]
        if a.oracle == "file":
            return [Path(self.config.paths.fixtures)]
        return []

    def oracle(self) -> Oracle:
        if self._oracle is None:
            a = self.config.annotate
            synthetic = None
            if a.oracle == "synthetic":
                synthetic = GroundTruth.load(self.input("truth")).oracle()
            fixtures = None
            if a.oracle == "file":
                fixtures = Path(self.config.paths.fixtures)
            self._oracle = open_oracle(
                a.oracle,
                fixtures=fixtures,
                synthetic=synthetic,
                remote_options={
                    "endpoint_env": a.endpoint_env,
                    "api_key_env": a.api_key_env,
                    "timeout": a.timeout,
                    "attempts": a.attempts,
                    "batch_size": a.batch_size,
                },
                cache=self.path(ANNOTATION_CACHE) if a.cache else None,
            )
        return self._oracle

    def close(self) -> None:
        oracle = getattr(self._oracle, "inner", self._oracle)
        close = getattr(oracle, "close", None)
        if close is not None:
            close()
        self._oracle = None

    # -- stages ------------------------------------------------------------

    def snapshot(self) -> None:
        self.config.save(self.path(CONFIG_SNAPSHOT))

    def _hashes(self, paths: Sequence[Path]) -> Dict[str, str]:
        return {self.name(p): sha256_file(p) for p in _files(paths)}

    def _up_to_date(self, stage: str, inputs: Mapping[str, str]) -> bool:
        previous = [e for e in load_manifest(self.run_dir) if e.stage == stage]
        if not previous or previous[-1].inputs != inputs:
            return False
        for name, digest in previous[-1].outputs.items():
            path = Path(name) if Path(name).is_absolute() else self.path(name)
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def run_stage(
        self, stage: str, inputs: Sequence[Path], body: Callable[[], List[Path]]
    ) -> bool:
        """
        Run `body` unless the stage is up to date; record what it wrote.

        :return: False if the stage was skipped.
        :raises MissingInputError: if an input does not exist.
        """
        for path in inputs:
            if not Path(path).exists():
                raise MissingInputError(path)
        hashes = {"config": self._config_hash}
        hashes.update(self._hashes(inputs))
        if not self.force and self._up_to_date(stage, hashes):
            logger.info("%s: inputs unchanged; nothing to do", stage)
            return False
        logger.info("%s: running", stage)
        start = time.monotonic()
        outputs = body()
        entry = ManifestEntry(
            stage, hashes, self._hashes(outputs), round(time.monotonic() - start, 3)
        )
        append_manifest(self.run_dir, entry)
        logger.info("%s: wrote %d files", stage, len(entry.outputs))
        return True


# -- stages --------------------------------------------------------------------


def cmd_synth(ctx: RunContext) -> None:
    def body():
        corpus = generate_corpus(ctx.config.synth_config(), threads=ctx.threads)
        return list(corpus.save(ctx.path("synth")).values())

    ctx.run_stage("synth", [], body)


def _count_sites(ctx: RunContext, book: CodeBook) -> List[SiteCooccurrence]:
    directory = ctx.config.paths.cooccurrence
    if directory:
        return [
            SiteCooccurrence.load(
                Path(directory, "%s.tsv" % site), Path(directory, "%s.json" % site)
            )
            for site in book.sites
        ]
    records = load_patient_events(ctx.input("events"), ctx.rollup())
    by_site: Dict[str, Dict[str, list]] = {}
    for r in records:
        by_site.setdefault(r.site, {})[r.patient_id] = list(r.events)
    return [
        count_cooccurrence(
            by_site[site],
            ctx.config.ppmi.window_days,
            site=site,
            threads=ctx.threads,
        )
        for site in sorted(by_site)
    ]


def cmd_ppmi(ctx: RunContext) -> None:
    """Count co-occurrences per site and embed each site with PPMI-SVD."""
    cfg = ctx.config
    inputs = ctx.book_inputs()
    if cfg.paths.cooccurrence:
        inputs.append(Path(cfg.paths.cooccurrence))
    else:
        inputs.extend(ctx.event_inputs())

    def body():
        book = ctx.book()
        outputs = []
        sites = []
        for counts in _count_sites(ctx, book):
            sites.append(counts.site)
            triplets, manifest = ctx.count_paths(counts.site)
            triplets.parent.mkdir(parents=True, exist_ok=True)
            counts.save(triplets, manifest)
            embedding = build_site_embedding(
                counts,
                book,
                cfg.model.dim,
                min_pair=cfg.ppmi.min_pair,
                min_code_total=cfg.ppmi.min_code_total,
                seed=ctx.seed("ppmi", counts.site),
            )
            logger.info(
                "Site %s: %d of %d codes embedded",
                counts.site,
                len(embedding.present_rows),
                book.size,
            )
            path = ctx.path("ppmi", "%s.bin" % counts.site)
            embedding.save(path, book)
            outputs.extend([triplets, manifest, path])
        sites_path = ctx.path("ppmi", "sites.json")
        sites_path.write_text(json.dumps(sites) + "\n")
        return outputs + [sites_path]

    ctx.run_stage("ppmi", inputs, body)


def cmd_align(ctx: RunContext) -> None:
    """
    Embed descriptions, curate the knowledge graph and align the sites.
    """
    cfg = ctx.config
    inputs = ctx.book_inputs() + ctx.site_embedding_paths() + ctx.oracle_inputs()
    relations = ctx.optional_input("relations")
    if relations is not None:
        inputs.append(relations)
    if cfg.paths.description_embeddings:
        inputs.append(Path(cfg.paths.description_embeddings))

    def body():
        book = ctx.book()
        sites = [
            SiteEmbedding.load(ctx.path("ppmi", "%s.bin" % site), book, site)
            for site in ctx.sites()
        ]
        oracle = ctx.oracle()
        outputs = []
        if cfg.annotate.expand_descriptions:
            book = expand_descriptions(book, oracle)
            path = ctx.path("align", "descriptions.tsv")
            save_descriptions(path, book)
            outputs.append(path)
        if cfg.paths.description_embeddings:
            x = load_embeddings(
                Path(cfg.paths.description_embeddings), book, cfg.model.dim
            )
        else:
            x = mock_embeddings(book, cfg.model.dim)
        x_path = ctx.path("align", "x.tsv")
        save_embeddings(x_path, book, x)

        kg = curate(
            book,
            site_embeddings=sites,
            providers=[x],
            oracle=oracle,
            relation_pairs=[] if relations is None else load_relation_pairs(relations),
            config=cfg.curation_config(ctx.threads),
        )
        kg.save(ctx.path("align", "kg"))
        for family, splits in sorted(kg.edge_counts().items()):
            logger.info("Edges %-20s %s", family, splits)

        metrics = ctx.path("align", "metrics.jsonl")
        checkpoint = ctx.path("align", "alignment.ckpt")
        result = run_alignment(
            sites,
            training_graph(kg, book),
            cfg.optimizer_config(),
            seed=ctx.seed("align", "gat"),
            schedule=cfg.schedule(ctx.threads),
            out_dim=cfg.model.dim,
            log=MetricLog(metrics),
            checkpoint=checkpoint,
        )
        logger.info(
            "Alignment kept epoch %d; shared-code cosine %.4f -> %.4f",
            result.best_epoch,
            result.cosines[0],
            result.cosines[result.best_epoch],
        )
        y_path = ctx.path("align", "y.bin")
        save_matrix(y_path, result.y, book.row_order_hash())
        return outputs + [x_path, ctx.path("align", "kg"), metrics, checkpoint, y_path]

    ctx.run_stage("align", inputs, body)


def _site_ppmis(ctx: RunContext):
    out = []
    for site in ctx.sites():
        counts = SiteCooccurrence.load(*ctx.count_paths(site))
        kept = apply_thresholds(
            counts, ctx.config.ppmi.min_pair, ctx.config.ppmi.min_code_total
        )
        out.append((kept.codes, compute_ppmi(kept)))
    return out


def cmd_train(ctx: RunContext) -> None:
    """Two-step training, then the one-step GAT baseline if enabled."""
    cfg = ctx.config
    inputs = ctx.book_inputs() + [
        ctx.path("align", "x.tsv"),
        ctx.path("align", "y.bin"),
        ctx.path("align", "kg"),
    ]
    if cfg.train.baseline:
        inputs.append(ctx.path("ppmi", "counts"))

    def body():
        book = ctx.book()
        x = load_embeddings(ctx.path("align", "x.tsv"), book, cfg.model.dim).matrix
        y = load_matrix(ctx.path("align", "y.bin"), book.row_order_hash())
        kg = KnowledgeGraph.load(ctx.path("align", "kg"))
        metrics = ctx.path("train", "metrics.jsonl")
        checkpoints = ctx.path("train", "checkpoints")
        game = run_two_step(
            x,
            y,
            kg,
            book,
            cfg.optimizer_config(),
            weights=cfg.loss_weights(),
            h=cfg.ms_hyper(),
            seed=ctx.seed("train", "two_step"),
            dim_sim=cfg.model.dim_sim,
            dim_rel=cfg.model.dim_rel,
            schedule=cfg.schedule(ctx.threads),
            log=MetricLog(metrics),
            checkpoint_dir=checkpoints,
        )
        game.save(ctx.path("train", "game"), book)
        logger.info(
            "Kept similarity epoch %d and relatedness epoch %d",
            game.sim_epoch,
            game.rel_epoch,
        )
        outputs = [ctx.path("train", "game"), metrics]
        if cfg.train.baseline:
            baseline_metrics = ctx.path("train", "baseline_metrics.jsonl")
            z = build_gats_baseline(
                x,
                kg,
                book,
                _site_ppmis(ctx),
                cfg.optimizer_config(),
                weights=cfg.loss_weights(),
                h=cfg.ms_hyper(),
                seed=ctx.seed("train", "baseline"),
                out_dim=cfg.model.dim,
                percentile=cfg.train.baseline_percentile,
                schedule=cfg.schedule(ctx.threads),
                log=MetricLog(baseline_metrics),
                checkpoint=checkpoints / "baseline.ckpt",
            )
            path = ctx.path("train", "baseline.bin")
            save_matrix(path, z, book.row_order_hash())
            outputs.extend([path, baseline_metrics])
        return outputs + [checkpoints]

    ctx.run_stage("train", inputs, body)


def _methods(ctx: RunContext, book: CodeBook) -> Dict[str, Tuple[np.ndarray, ...]]:
    """Method -> (similarity embedding, relatedness embedding)."""
    game = GameEmbedding.load(ctx.path("train", "game"), book)
    methods = {"game": (game.z_sim, game.z)}
    if ctx.config.train.baseline:
        z = load_matrix(ctx.path("train", "baseline.bin"), book.row_order_hash())
        methods["gat_s"] = (z, z)
    return methods


def _known_pairs(kg: KnowledgeGraph, *families: EdgeFamily):
    return [
        (e.a, e.b, e.relation or e.family.value)
        for family in families
        for e in kg.edges_of(family, Split.VALIDATION)
    ]


def evaluate_method(
    ctx: RunContext,
    method: str,
    sim: np.ndarray,
    rel: np.ndarray,
    book: CodeBook,
    kg: KnowledgeGraph,
    gold: Sequence[GoldMapping],
) -> List[EvalReport]:
    """Every held-out task for one embedding pair."""
    cfg = ctx.config
    reports = []
    held_out = [
        GoldMapping(e.a, e.b) for e in kg.edges_of(EdgeFamily.MAPPING, Split.VALIDATION)
    ]
    if held_out:
        reports.append(
            mapping_report("mapping:%s" % method, sim, book, held_out, ks=cfg.eval.ks)
        )
    if gold:
        reports.append(
            mapping_report("gold_mapping:%s" % method, sim, book, gold, ks=cfg.eval.ks)
        )
    reports.append(
        known_pair_report(
            "similarity:%s" % method,
            sim,
            book,
            _known_pairs(
                kg,
                EdgeFamily.SIM_HIERARCHICAL,
                EdgeFamily.SIM_NONHIERARCHICAL,
                EdgeFamily.MAPPING,
            ),
            n_neg=cfg.eval.negatives_per_positive,
            seed=ctx.seed("eval", "similarity"),
        )
    )
    reports.append(
        known_pair_report(
            "relatedness:%s" % method,
            rel,
            book,
            _known_pairs(kg, EdgeFamily.RELATED),
            n_neg=cfg.eval.negatives_per_positive,
            seed=ctx.seed("eval", "relatedness"),
        )
    )
    c_indexes = []
    for target in kg.validation_features():
        try:
            report = feature_selection_harness(
                rel,
                book,
                target,
                ctx.oracle(),
                seed=ctx.seed("eval", "feature:%s" % target),
                top=cfg.curate.feature_top,
                n_random=cfg.curate.feature_random,
            )
        except ValueError as err:
            logger.warning("Feature selection for %s skipped: %s", target, err)
            continue
        c_indexes.append(report.metrics["c_index"])
    if c_indexes:
        reports.append(
            EvalReport(
                task="feature_selection:%s" % method,
                metrics={"c_index": float(np.mean(c_indexes))},
                counts={"targets": len(c_indexes)},
                seed=ctx.seed("eval", "feature"),
            )
        )
    return reports


def cmd_eval(ctx: RunContext) -> None:
    cfg = ctx.config
    gold_path = ctx.optional_input("gold_mapping")
    inputs = ctx.book_inputs() + [
        ctx.path("align", "kg"),
        ctx.path("train", "game"),
    ]
    inputs.extend(ctx.oracle_inputs())
    if cfg.train.baseline:
        inputs.append(ctx.path("train", "baseline.bin"))
    if gold_path is not None:
        inputs.append(gold_path)

    def body():
        book = ctx.book()
        kg = KnowledgeGraph.load(ctx.path("align", "kg"))
        gold = [] if gold_path is None else load_gold_mappings(gold_path)
        reports = []
        for method, (sim, rel) in sorted(_methods(ctx, book).items()):
            reports.extend(evaluate_method(ctx, method, sim, rel, book, kg, gold))
        for report in reports:
            logger.info("%s", report.as_text())
        json_path = ctx.path("eval", "reports.json")
        text_path = ctx.path("eval", "reports.txt")
        save_reports(json_path, text_path, reports)
        return [json_path, text_path]

    ctx.run_stage("eval", inputs, body)


def _stratify_target(ctx: RunContext) -> CodeId:
    if ctx.config.stratify.target:
        return CodeId.parse(ctx.config.stratify.target)
    truth = ctx.optional_input("truth")
    target = None if truth is None else GroundTruth.load(truth).target
    if target is None:
        raise ConfigError(
            ["stratify.target: required when there is no synthetic ground truth"]
        )
    return target


def cmd_stratify(ctx: RunContext) -> None:
    cfg = ctx.config
    inputs = ctx.book_inputs() + ctx.event_inputs() + [ctx.path("train", "game")]
    if not cfg.stratify.target:
        inputs.append(ctx.input("truth"))

    def body():
        book = ctx.book()
        game = GameEmbedding.load(ctx.path("train", "game"), book)
        embedding = {"game": game.z, "sim": game.z_sim, "rel": game.z_rel}[
            cfg.stratify.embedding
        ]
        targets = {CodeId.parse(t) for t in cfg.stratify.index_targets} or None
        reports = stratify_cohort(
            load_patient_events(ctx.input("events"), ctx.rollup()),
            embedding,
            book,
            _stratify_target(ctx),
            cfg.stratify_config(),
            targets=targets,
            seed=ctx.seed("stratify", "cohort"),
            threads=ctx.threads,
        )
        for report in reports:
            logger.info("%s", report.as_text())
        json_path = ctx.path("stratify", "clusters.json")
        text_path = ctx.path("stratify", "clusters.txt")
        save_cluster_reports(json_path, text_path, reports)
        return [json_path, text_path]

    ctx.run_stage("stratify", inputs, body)


def _chart_series(reports: Sequence[EvalReport]) -> Dict[str, Dict[str, float]]:
    wanted = {
        ("mapping", "top1"): "mapping top-1",
        ("mapping", "top5"): "mapping top-5",
        ("similarity", "auc"): "similarity AUC",
        ("relatedness", "auc"): "relatedness AUC",
        ("feature_selection", "c_index"): "feature C-index",
    }
    series: Dict[str, Dict[str, float]] = {}
    for report in reports:
        task, _, method = report.task.partition(":")
        for (t, metric), label in wanted.items():
            if t == task and metric in report.metrics:
                series.setdefault(method, {})[label] = report.metrics[metric]
    return series


def cmd_report(ctx: RunContext) -> None:
    """Summarize every stage that has run into one text and one JSON file."""
    optional = [
        ctx.path("align", "kg", "summary.json"),
        ctx.path("eval", "reports.json"),
        ctx.path("stratify", "clusters.json"),
    ]
    inputs = [p for p in optional if p.exists()]

    def body():
        summary: Dict[str, object] = {}
        lines = ["codealign %s run report" % __version__, ""]
        stages = {}
        for entry in load_manifest(ctx.run_dir):
            stages[entry.stage] = entry
        summary["stages"] = {
            stage: sorted(entry.outputs) for stage, entry in sorted(stages.items())
        }
        for stage, entry in sorted(stages.items()):
            lines.append("%-10s %d outputs" % (stage, len(entry.outputs)))
        kg_path = ctx.path("align", "kg", "summary.json")
        if kg_path.exists():
            kg_summary = json.loads(kg_path.read_text())
            summary["knowledge_graph"] = kg_summary
            lines.extend(["", "Knowledge graph"])
            lines.append(textwrap.indent(json.dumps(kg_summary, indent=1), "  "))
        outputs = []
        reports_path = ctx.path("eval", "reports.json")
        if reports_path.exists():
            reports = load_reports(reports_path)
            summary["evaluation"] = [r.as_dict() for r in reports]
            lines.extend(["", "Evaluation"])
            lines.extend(textwrap.indent(r.as_text(), "  ") for r in reports)
            series = _chart_series(reports)
            if ctx.config.eval.chart and series:
                chart = ctx.path("report", "metrics.svg")
                bar_chart_svg(chart, series, "Held-out evaluation")
                outputs.append(chart)
        clusters_path = ctx.path("stratify", "clusters.json")
        if clusters_path.exists():
            clusters = json.loads(clusters_path.read_text())
            summary["clusters"] = clusters
            lines.extend(["", "Clusters"])
            for c in clusters:
                lines.append("  %s: sizes %s" % (c["group"], c["sizes"]))
                if c.get("outcome_odds_ratio") is not None:
                    lines.append(
                        "    outcome odds ratio %.3f (p %.3g)"
                        % (c["outcome_odds_ratio"], c["outcome_p_value"])
                    )
        json_path = ctx.path("report", "report.json")
        text_path = ctx.path("report", "report.txt")
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        text_path.write_text("\n".join(lines) + "\n")
        return outputs + [json_path, text_path]

    ctx.run_stage("report", inputs, body)


COMMANDS: Dict[str, Callable[[RunContext], None]] = {
    "synth": cmd_synth,
    "ppmi": cmd_ppmi,
    "align": cmd_align,
    "train": cmd_train,
    "eval": cmd_eval,
    "stratify": cmd_stratify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="codealign",
        description="Align medical code embeddings across institutions.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "command", choices=list(COMMANDS) + ["all"], help="pipeline stage to run"
    )
    parser.add_argument(
        "overrides", nargs="*", metavar="key=value", help="config overrides"
    )
    parser.add_argument("--config", type=Path, help="YAML config file")
    parser.add_argument(
        "--run-dir", type=Path, default=Path("run"), help="where stages write"
    )
    parser.add_argument(
        "--threads", type=int, default=1, help="within-stage parallelism"
    )
    parser.add_argument(
        "--force", action="store_true", help="rerun even if inputs are unchanged"
    )
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one stage (or ``all`` of them in order) and return the exit status:
    0 on success, 2 for a missing or malformed input file, 3 for an invalid
    config and 1 for anything else.
    """
    args = build_parser().parse_intermixed_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx = None
    try:
        if args.threads < 1:
            raise ConfigError(["--threads must be >= 1; got %d" % args.threads])
        if args.config is not None and not args.config.exists():
            raise MissingInputError(args.config)
        config = PipelineConfig.load(args.config, args.overrides)
        args.run_dir.mkdir(parents=True, exist_ok=True)
        ctx = RunContext(config, args.run_dir, threads=args.threads, force=args.force)
        ctx.snapshot()
        commands = list(COMMANDS) if args.command == "all" else [args.command]
        for command in commands:
            COMMANDS[command](ctx)
    except ConfigError as err:
        sys.stderr.write("%s\n" % err)
        return EXIT_BAD_CONFIG
    except (MissingInputError, InputFormatError) as err:
        logger.error("%s", err)
        return EXIT_BAD_INPUT
    except Exception:
        logger.exception("%s failed", args.command)
        return EXIT_FAILURE
    finally:
        if ctx is not None:
            ctx.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
