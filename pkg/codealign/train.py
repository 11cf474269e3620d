"""
Training loops: site alignment, the two-step similarity/relatedness training,
and the one-step GAT-S baseline.

Every loop follows the same shape. Epoch 0 is the initialized model. Each
later epoch runs one SGD step per chunk of contrastive sets on a freshly
edge-dropped graph, then evaluates the full graph, appends a record to the
:class:`MetricLog` and keeps the best parameters seen so far.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse

from .codebook import CodeBook, CodeId
from .cooccur import SiteEmbedding
from .evalx import concordance_index, topk_mapping_accuracy
from .kgraph import EdgeFamily, KnowledgeGraph, Split
from .losses import (
    LossWeights,
    MsHyper,
    PairBatch,
    alignment_loss,
    batch_ms_loss,
    feature_batch_loss,
)
from .nn import (
    Encoder,
    Graph,
    NonFiniteError,
    Optimizer,
    Params,
    check_finite,
    drop_edges,
    sgd_step,
    unit_rows,
    unit_rows_backward,
)
from .protocol import Checkpoint, load_matrix, save_matrix

logger = logging.getLogger(__name__)

SIMILARITY_FAMILIES = (
    EdgeFamily.SIM_HIERARCHICAL,
    EdgeFamily.SIM_NONHIERARCHICAL,
    EdgeFamily.MAPPING,
)
RELATEDNESS_FAMILIES = (EdgeFamily.RELATED, EdgeFamily.FEATURE_POS)
BASELINE_FAMILIES = (
    EdgeFamily.SIM_HIERARCHICAL,
    EdgeFamily.SIM_NONHIERARCHICAL,
    EdgeFamily.RELATED,
)

_ALIGN_STREAM = 1
_SIM_STREAM = 2
_REL_STREAM = 3
_BASELINE_STREAM = 4


@dataclass(frozen=True)
class Schedule:
    """
    How long and on what graph a training loop runs.
    """

    max_epochs: int = 200
    """Epochs after the initial one. 0 returns the initialized model."""

    drop_rate: float = 0.5
    """Edge dropout applied on every training step."""

    chunk_size: int = 1024
    """Contrastive sets per SGD step."""

    threads: int = 1
    """Worker threads for the per-site models of the alignment loop."""

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0; got %r" % self.max_epochs)
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1; got %r" % self.chunk_size)


def _sub_seed(*words: int) -> int:
    return int(np.random.SeedSequence(list(words)).generate_state(1)[0])


class MetricLog:
    """
    One JSON object per evaluated epoch, kept in memory and optionally
    appended to a file as it is recorded.
    """

    def __init__(self, path: Optional[Path] = None):
        self.path = None if path is None else Path(path)
        self.records: List[Dict[str, object]] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def record(self, stage: str, epoch: int, **values) -> None:
        entry = {"stage": stage, "epoch": epoch}
        entry.update(values)
        self.records.append(entry)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")

    def stage(self, name: str) -> List[Dict[str, object]]:
        return [r for r in self.records if r["stage"] == name]

    @classmethod
    def load(cls, path: Path) -> MetricLog:
        log = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                log.records.append(json.loads(line))
        return log


def select_epoch(
    records: Sequence[Mapping[str, object]], metric: str, mode: str
) -> int:
    """
    The epoch a training loop keeps: the first best value of `metric`.

    :param mode: ``"max"`` or ``"min"``.
    """
    if mode not in ("max", "min"):
        raise ValueError("mode must be 'max' or 'min'; got %r" % mode)
    best_epoch, best = None, None
    for r in records:
        value = float(r[metric])
        better = best is None or (value > best if mode == "max" else value < best)
        if better:
            best_epoch, best = int(r["epoch"]), value
    if best_epoch is None:
        raise ValueError("No records to select from")
    return best_epoch


def _save_checkpoint(
    path: Optional[Path],
    params: Params,
    epoch: int,
    rate: float,
    extra: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    if path is not None:
        Checkpoint(dict(params), epoch, rate, dict(extra or {})).save(path)


def training_graph(kg: KnowledgeGraph, book: CodeBook) -> Graph:
    """Message-passing graph over CodeBook rows from the training-split edges."""
    pairs = [
        (book.index[e.a], book.index[e.b])
        for e in kg.edges
        if e.split == Split.TRAIN and e.a in book.index and e.b in book.index
    ]
    return Graph.from_pairs(book.size, np.array(pairs, dtype=np.int64).reshape(-1, 2))


# -- alignment ---------------------------------------------------------------


def mean_shared_cosine(
    outputs: Sequence[np.ndarray], present: Sequence[np.ndarray]
) -> float:
    """Mean cosine between two sites' rows of the codes both sites have."""
    cosines = []
    for m1 in range(len(outputs)):
        for m2 in range(m1 + 1, len(outputs)):
            rows = np.intersect1d(present[m1], present[m2])
            if len(rows) == 0:
                continue
            a = unit_rows(outputs[m1][rows])
            b = unit_rows(outputs[m2][rows])
            cosines.append(np.einsum("ij,ij->i", a, b))
    if not cosines:
        return float("nan")
    return float(np.mean(np.concatenate(cosines)))


@dataclass(frozen=True)
class AlignmentResult:
    y: np.ndarray
    """Row-normalized sum of the site outputs at the best epoch."""

    site_outputs: Tuple[np.ndarray, ...]

    encoders: Tuple[Encoder, ...]

    best_epoch: int

    losses: Tuple[float, ...]
    """Full-graph alignment loss of every evaluated epoch, from epoch 0."""

    cosines: Tuple[float, ...]
    """Mean shared-code cross-site cosine of every evaluated epoch."""


def run_alignment(
    site_embeddings: Sequence[SiteEmbedding],
    graph: Graph,
    opt: Optimizer,
    *,
    seed: int = 0,
    schedule: Schedule = Schedule(),
    out_dim: Optional[int] = None,
    log: Optional[MetricLog] = None,
    checkpoint: Optional[Path] = None,
) -> AlignmentResult:
    """
    Train one ``Linear(GAT(V_m))`` per site so that the sites agree on the
    codes they have, and return ``unit_rows(sum_m Y_m)``.

    Training stops at the first epoch whose full-graph loss is not below the
    best so far; the best epoch's models produce the result.

    :raises ValueError: if there are no sites or their matrices disagree.
    :raises NonFiniteError: after saving `checkpoint`, if a gradient blows up.
    """
    if not site_embeddings:
        raise ValueError("Alignment needs at least one site")
    shapes = {s.matrix.shape for s in site_embeddings}
    if len(shapes) != 1:
        raise ValueError("Site embeddings differ in shape: %r" % sorted(shapes))
    (n_rows, in_dim) = shapes.pop()
    if n_rows != graph.n_nodes:
        raise ValueError(
            "Graph has %d nodes but embeddings have %d rows" % (graph.n_nodes, n_rows)
        )
    out_dim = out_dim or in_dim
    inputs = [s.matrix for s in site_embeddings]
    present = [np.asarray(s.present_rows, dtype=np.int64) for s in site_embeddings]
    # steps follow the mean over (site pair, shared row) terms
    scale = 1.0 / max(sum(len(p) for p in present) * (len(present) - 1), 1)
    encoders = [
        Encoder.init(in_dim, out_dim, _sub_seed(seed, _ALIGN_STREAM, m))
        for m in range(len(inputs))
    ]

    with ThreadPoolExecutor(max_workers=max(schedule.threads, 1)) as pool:

        def forward(models: Sequence[Encoder], g: Graph):
            jobs = range(len(models))
            return list(pool.map(lambda m: models[m].forward(inputs[m], g), jobs))

        def evaluate(models: Sequence[Encoder]) -> Tuple[float, List[np.ndarray]]:
            outputs = [y for y, _ in forward(models, graph)]
            value, _ = alignment_loss(outputs, present)
            check_finite("alignment loss", value)
            return value, outputs

        best_loss, best_outputs = evaluate(encoders)
        best = list(encoders)
        best_epoch = 0
        losses = [best_loss]
        cosines = [mean_shared_cosine(best_outputs, present)]
        if log is not None:
            log.record(
                "align", 0, loss=best_loss, shared_cosine=cosines[0], learning_rate=0.0
            )

        for epoch in range(1, schedule.max_epochs + 1):
            dropped = drop_edges(
                graph, schedule.drop_rate, _sub_seed(seed, _ALIGN_STREAM, 1000, epoch)
            )
            passes = forward(encoders, dropped)
            _, grads = alignment_loss([y for y, _ in passes], present)
            grads = [g * scale for g in grads]
            backward = list(
                pool.map(
                    lambda m: encoders[m].backward(passes[m][1], grads[m])[0],
                    range(len(encoders)),
                )
            )
            try:
                encoders = [
                    model.with_params(sgd_step(model.params(), g, opt, epoch - 1))
                    for model, g in zip(encoders, backward)
                ]
                loss, outputs = evaluate(encoders)
            except NonFiniteError:
                logger.error("Alignment diverged at epoch %d", epoch)
                _save_checkpoint(
                    checkpoint,
                    _site_params(best),
                    best_epoch,
                    opt.rate(epoch - 1),
                )
                raise
            losses.append(loss)
            cosines.append(mean_shared_cosine(outputs, present))
            logger.info("align epoch %d: loss %.6g", epoch, loss)
            if log is not None:
                log.record(
                    "align",
                    epoch,
                    loss=loss,
                    shared_cosine=cosines[-1],
                    learning_rate=opt.rate(epoch - 1),
                )
            if loss >= best_loss:
                break
            best_loss, best_outputs, best_epoch = loss, outputs, epoch
            best = list(encoders)

    y = unit_rows(np.sum(best_outputs, axis=0))
    _save_checkpoint(
        checkpoint, _site_params(best), best_epoch, opt.rate(best_epoch), {"y": y}
    )
    logger.info("Alignment kept epoch %d (loss %.6g)", best_epoch, best_loss)
    return AlignmentResult(
        y=y,
        site_outputs=tuple(best_outputs),
        encoders=tuple(best),
        best_epoch=best_epoch,
        losses=tuple(losses),
        cosines=tuple(cosines),
    )


def _site_params(encoders: Sequence[Encoder]) -> Params:
    out = {}
    for m, model in enumerate(encoders):
        out.update({"site%d.%s" % (m, k): v for k, v in model.params().items()})
    return out


# -- contrastive steps -------------------------------------------------------


def compile_families(
    kg: KnowledgeGraph, book: CodeBook, families: Sequence[EdgeFamily]
) -> Dict[EdgeFamily, PairBatch]:
    return {f: PairBatch.compile(kg.training.get(f, ()), book) for f in families}


def _chunk_plan(
    batches: Mapping[EdgeFamily, PairBatch], size: int
) -> List[Dict[EdgeFamily, PairBatch]]:
    """
    Split the families' sets, taken in order, into runs of `size` sets.

    The feature family is one loss term over all its pairs, so it is never
    split: the whole of it joins the first run.
    """
    feature = batches.get(EdgeFamily.FEATURE_POS)
    batches = {f: b for f, b in batches.items() if f != EdgeFamily.FEATURE_POS}
    offsets = {}
    total = 0
    for family, batch in batches.items():
        offsets[family] = total
        total += batch.n_sets
    plan = []
    for start in range(0, total, size):
        part = {}
        for family, batch in batches.items():
            lo = start - offsets[family]
            hi = lo + size
            if hi > 0 and lo < batch.n_sets:
                part[family] = batch.slice(lo, hi)
        plan.append(part)
    if feature is not None and feature.n_pairs:
        if not plan:
            plan.append({})
        plan[0][EdgeFamily.FEATURE_POS] = feature
    return plan


def _step_scale(part: Mapping[EdgeFamily, PairBatch]) -> float:
    """
    1 over the number of loss terms in `part`: one per contrastive set, and
    one for the whole feature family.
    """
    terms = sum(
        1 if family == EdgeFamily.FEATURE_POS else batch.n_sets
        for family, batch in part.items()
    )
    return 1.0 / max(terms, 1)


def contrastive_loss(
    z: np.ndarray,
    batches: Mapping[EdgeFamily, PairBatch],
    weights: LossWeights,
    h: MsHyper,
) -> Tuple[float, np.ndarray, Dict[str, float]]:
    """
    Weighted sum of the families' losses on `z`.

    :return: (loss, d loss / d z, unweighted loss per family)
    """
    total = 0.0
    grad = np.zeros_like(z)
    parts = {}
    for family, batch in batches.items():
        if family == EdgeFamily.FEATURE_POS:
            value, g = feature_batch_loss(z, batch, h)
        else:
            value, g = batch_ms_loss(z, batch, h)
        parts[family.value] = value
        weight = weights.of(family)
        total += weight * value
        grad += weight * g
    return total, grad, parts


@dataclass(frozen=True)
class _StepResult:
    encoder: Encoder
    embedding: np.ndarray
    best_epoch: int


def _contrastive_loop(
    stage: str,
    stream: int,
    inputs: np.ndarray,
    graph: Graph,
    batches: Mapping[EdgeFamily, PairBatch],
    embed: Callable[[np.ndarray], np.ndarray],
    split_grad: Callable[[np.ndarray], np.ndarray],
    score: Optional[Callable[[np.ndarray], float]],
    out_dim: int,
    weights: LossWeights,
    h: MsHyper,
    opt: Optimizer,
    seed: int,
    schedule: Schedule,
    log: Optional[MetricLog],
    checkpoint: Optional[Path],
) -> _StepResult:
    """
    Shared loop of the contrastive steps.

    `embed` turns the encoder's normalized output into the matrix the losses
    see, and `split_grad` takes the loss gradient on that matrix back to the
    normalized output. Each step follows the gradient of the mean over the
    chunk's loss terms, while logged losses stay sums. With a `score`, the
    epoch with the highest score is kept; without, the one with the lowest
    loss.
    """
    encoder = Encoder.init(inputs.shape[1], out_dim, _sub_seed(seed, stream))
    plan = _chunk_plan(batches, schedule.chunk_size)
    scales = [_step_scale(part) for part in plan]

    def evaluate(model: Encoder, epoch: int, rate: float):
        y, _ = model.forward(inputs, graph)
        z = unit_rows(y)
        value, _, parts = contrastive_loss(embed(z), batches, weights, h)
        check_finite("%s loss" % stage, value)
        metric = score(embed(z)) if score is not None else -value
        if log is not None:
            values = {"loss": value, "learning_rate": rate}
            values.update({"loss_" + k: v for k, v in parts.items()})
            if score is not None:
                values["score"] = metric
            log.record(stage, epoch, **values)
        logger.info("%s epoch %d: loss %.6g score %.6g", stage, epoch, value, metric)
        return metric, z

    best_metric, best_z = evaluate(encoder, 0, 0.0)
    best, best_epoch = encoder, 0
    for epoch in range(1, schedule.max_epochs + 1):
        try:
            for number, part in enumerate(plan):
                dropped = drop_edges(
                    graph, schedule.drop_rate, _sub_seed(seed, stream, epoch, number)
                )
                y, cache = encoder.forward(inputs, dropped)
                z = unit_rows(y)
                _, grad, _ = contrastive_loss(embed(z), part, weights, h)
                grad = grad * scales[number]
                grad_y = unit_rows_backward(y, split_grad(grad))
                grads, _ = encoder.backward(cache, grad_y)
                encoder = encoder.with_params(
                    sgd_step(encoder.params(), grads, opt, epoch - 1)
                )
            metric, z = evaluate(encoder, epoch, opt.rate(epoch - 1))
        except NonFiniteError:
            logger.error("%s diverged at epoch %d", stage, epoch)
            _save_checkpoint(checkpoint, best.params(), best_epoch, opt.rate(epoch - 1))
            raise
        if metric > best_metric:
            best_metric, best_z, best, best_epoch = metric, z, encoder, epoch
    _save_checkpoint(
        checkpoint,
        best.params(),
        best_epoch,
        opt.rate(max(best_epoch - 1, 0)),
        {"embedding": best_z},
    )
    logger.info("%s kept epoch %d", stage, best_epoch)
    return _StepResult(best, best_z, best_epoch)


def _mapping_score(book: CodeBook, gold: Mapping[CodeId, frozenset]):
    def score(z: np.ndarray) -> float:
        return topk_mapping_accuracy(z, book, gold, ks=(1,)).accuracy[1]

    return score


def _feature_score(
    book: CodeBook, tasks: Mapping[CodeId, Sequence[Tuple[CodeId, float]]]
):
    def score(z: np.ndarray) -> float:
        unit = unit_rows(z)
        values = []
        for target, scored in tasks.items():
            rows = book.rows(f for f, _ in scored)
            cosines = unit[rows] @ unit[book.index[target]]
            values.append(concordance_index(cosines, [s for _, s in scored]))
        return float(np.mean(values))

    return score


def _usable_feature_tasks(kg: KnowledgeGraph, book: CodeBook):
    tasks = {}
    for target, scored in kg.validation_features().items():
        scored = [(f, s) for f, s in scored if f in book.index]
        if target in book.index and len({s for _, s in scored}) > 1:
            tasks[target] = scored
    return tasks


def _mapping_gold(kg: KnowledgeGraph, book: CodeBook) -> Dict[CodeId, frozenset]:
    return {
        local: targets
        for local, targets in kg.validation_mapping().items()
        if local in book.index
    }


def _require_validation(kg: KnowledgeGraph, book: CodeBook) -> None:
    """
    :raises ValueError: if the graph lacks validation mapping pairs or graded
        validation feature targets.
    """
    if not _mapping_gold(kg, book):
        raise ValueError("No validation mapping pairs to select the similarity epoch")
    if not _usable_feature_tasks(kg, book):
        raise ValueError(
            "No validation feature targets to select the relatedness epoch"
        )


@dataclass(frozen=True)
class GameEmbedding:
    """The trained embedding: similarity part and relatedness part."""

    z_sim: np.ndarray
    """N x d_S, rows unit-norm or zero."""

    z_rel: np.ndarray
    """N x d_R, rows unit-norm or zero."""

    sim_epoch: int = 0

    rel_epoch: int = 0

    @property
    def z(self) -> np.ndarray:
        """``[z_sim, z_rel]``."""
        return np.hstack([self.z_sim, self.z_rel])

    def save(self, directory: Path, book: CodeBook) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_matrix(directory / "z_sim.bin", self.z_sim, book.row_order_hash())
        save_matrix(directory / "z_rel.bin", self.z_rel, book.row_order_hash())
        (directory / "selection.json").write_text(
            json.dumps({"sim_epoch": self.sim_epoch, "rel_epoch": self.rel_epoch})
            + "\n"
        )

    @classmethod
    def load(cls, directory: Path, book: CodeBook) -> GameEmbedding:
        directory = Path(directory)
        selection = json.loads((directory / "selection.json").read_text())
        return cls(
            load_matrix(directory / "z_sim.bin", book.row_order_hash()),
            load_matrix(directory / "z_rel.bin", book.row_order_hash()),
            int(selection["sim_epoch"]),
            int(selection["rel_epoch"]),
        )


def run_similarity_step(
    x: np.ndarray,
    y: np.ndarray,
    kg: KnowledgeGraph,
    book: CodeBook,
    opt: Optimizer,
    *,
    weights: LossWeights = LossWeights(),
    h: MsHyper = MsHyper(),
    seed: int = 0,
    dim_sim: int = 8,
    schedule: Schedule = Schedule(),
    log: Optional[MetricLog] = None,
    checkpoint: Optional[Path] = None,
) -> Tuple[np.ndarray, int]:
    """
    Train ``Z_S = unit_rows(Linear_S(GAT_S([X, Y])))`` on the similarity
    families, keeping the epoch with the best validation top-1 mapping
    accuracy.

    :return: (Z_S, kept epoch)
    :raises ValueError: if the graph holds no validation mapping pairs.
    """
    gold = _mapping_gold(kg, book)
    if not gold:
        raise ValueError("No validation mapping pairs to select the similarity epoch")
    inputs = np.hstack([x, y])
    result = _contrastive_loop(
        "similarity",
        _SIM_STREAM,
        inputs,
        training_graph(kg, book),
        compile_families(kg, book, SIMILARITY_FAMILIES),
        lambda z: z,
        lambda g: g,
        _mapping_score(book, gold),
        dim_sim,
        weights,
        h,
        opt,
        seed,
        schedule,
        log,
        checkpoint,
    )
    return result.embedding, result.best_epoch


def run_relatedness_step(
    x: np.ndarray,
    y: np.ndarray,
    z_sim: np.ndarray,
    kg: KnowledgeGraph,
    book: CodeBook,
    opt: Optimizer,
    *,
    weights: LossWeights = LossWeights(),
    h: MsHyper = MsHyper(),
    seed: int = 0,
    dim_rel: int = 24,
    schedule: Schedule = Schedule(),
    log: Optional[MetricLog] = None,
    checkpoint: Optional[Path] = None,
) -> Tuple[np.ndarray, int]:
    """
    Train ``Z_R`` with `z_sim` held fixed. Losses see ``[z_sim, Z_R]``; only
    the ``Z_R`` columns of their gradient reach the encoder. Keeps the epoch
    with the best mean validation concordance index.

    :return: (Z_R, kept epoch)
    :raises ValueError: if no validation feature target has graded scores.
    """
    tasks = _usable_feature_tasks(kg, book)
    if not tasks:
        raise ValueError(
            "No validation feature targets to select the relatedness epoch"
        )
    frozen = np.array(z_sim, copy=True)
    d_sim = frozen.shape[1]
    result = _contrastive_loop(
        "relatedness",
        _REL_STREAM,
        np.hstack([x, y]),
        training_graph(kg, book),
        compile_families(kg, book, RELATEDNESS_FAMILIES),
        lambda z: np.hstack([frozen, z]),
        lambda g: g[:, d_sim:],
        _feature_score(book, tasks),
        dim_rel,
        weights,
        h,
        opt,
        seed,
        schedule,
        log,
        checkpoint,
    )
    return result.embedding, result.best_epoch


def run_two_step(
    x: np.ndarray,
    y: np.ndarray,
    kg: KnowledgeGraph,
    book: CodeBook,
    opt: Optimizer,
    *,
    weights: LossWeights = LossWeights(),
    h: MsHyper = MsHyper(),
    seed: int = 0,
    dim_sim: int = 8,
    dim_rel: int = 24,
    schedule: Schedule = Schedule(),
    log: Optional[MetricLog] = None,
    checkpoint_dir: Optional[Path] = None,
) -> GameEmbedding:
    """
    Similarity step, then relatedness step on top of the fixed result.

    :raises ValueError: if either step lacks validation tasks. Both are
                        checked before any training starts.
    """
    if x.shape[0] != y.shape[0] or x.shape[0] != book.size:
        raise ValueError(
            "X has %d rows and Y %d; the code book has %d"
            % (x.shape[0], y.shape[0], book.size)
        )
    _require_validation(kg, book)

    def ckpt(name: str) -> Optional[Path]:
        return None if checkpoint_dir is None else Path(checkpoint_dir) / name

    z_sim, sim_epoch = run_similarity_step(
        x,
        y,
        kg,
        book,
        opt,
        weights=weights,
        h=h,
        seed=seed,
        dim_sim=dim_sim,
        schedule=schedule,
        log=log,
        checkpoint=ckpt("similarity.ckpt"),
    )
    z_rel, rel_epoch = run_relatedness_step(
        x,
        y,
        z_sim,
        kg,
        book,
        opt,
        weights=weights,
        h=h,
        seed=seed,
        dim_rel=dim_rel,
        schedule=schedule,
        log=log,
        checkpoint=ckpt("relatedness.ckpt"),
    )
    return GameEmbedding(z_sim, z_rel, sim_epoch, rel_epoch)


# -- baseline ----------------------------------------------------------------


def ppmi_edges(
    site_ppmis: Sequence[Tuple[Sequence[CodeId], scipy.sparse.spmatrix]],
    book: CodeBook,
    percentile: float = 99.0,
) -> np.ndarray:
    """
    Row pairs ``(i, j)``, ``i < j``, whose PPMI at some site exceeds that
    site's `percentile` of nonzero off-diagonal values.
    """
    found = set()
    for codes, ppmi in site_ppmis:
        upper = scipy.sparse.triu(scipy.sparse.coo_matrix(ppmi), k=1).tocoo()
        nonzero = upper.data > 0
        if not nonzero.any():
            continue
        cut = np.percentile(upper.data[nonzero], percentile)
        rows = book.rows(codes)
        for i, j in zip(upper.row[upper.data > cut], upper.col[upper.data > cut]):
            a, b = int(rows[i]), int(rows[j])
            found.add((min(a, b), max(a, b)))
    return np.array(sorted(found), dtype=np.int64).reshape(-1, 2)


def build_gats_baseline(
    x: np.ndarray,
    kg: KnowledgeGraph,
    book: CodeBook,
    site_ppmis: Sequence[Tuple[Sequence[CodeId], scipy.sparse.spmatrix]],
    opt: Optimizer,
    *,
    weights: LossWeights = LossWeights(),
    h: MsHyper = MsHyper(),
    seed: int = 0,
    out_dim: int = 32,
    percentile: float = 99.0,
    schedule: Schedule = Schedule(),
    log: Optional[MetricLog] = None,
    checkpoint: Optional[Path] = None,
) -> np.ndarray:
    """
    One-step GAT on the description embedding `x` over training edges plus
    high-PPMI edges, trained on the similarity and relatedness families only.
    The epoch with the lowest full-graph loss is kept.

    :raises ValueError: like :func:`run_two_step`, if the graph lacks
        validation mapping pairs or feature targets.
    """
    _require_validation(kg, book)
    graph = training_graph(kg, book)
    extra = ppmi_edges(site_ppmis, book, percentile)
    logger.info("Baseline adds %d PPMI edges", len(extra))
    pairs = np.concatenate([graph.undirected_pairs(), extra])
    result = _contrastive_loop(
        "baseline",
        _BASELINE_STREAM,
        x,
        Graph.from_pairs(book.size, pairs),
        compile_families(kg, book, BASELINE_FAMILIES),
        lambda z: z,
        lambda g: g,
        None,
        out_dim,
        weights,
        h,
        opt,
        seed,
        schedule,
        log,
        checkpoint,
    )
    return result.embedding
