"""
Pipeline configuration: one YAML file of flat dotted keys.

A config file looks like this::

    seed: 0
    synth.n_concepts: 50
    train.max_epochs: 200
    model.dim: 32

Every key belongs to a section (the part before the dot) and names a field
of that section's dataclass. Missing keys keep their defaults; unknown keys
and values of the wrong type are errors. Command-line overrides use the
same keys, as ``key=value`` with YAML scalar typing.

:meth:`PipelineConfig.dump` writes every key, sorted, so parsing a dump
gives back an equal config.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import yaml

from .codebook import CodeId, CodeSystem
from .kgraph import DEFAULT_RELEVANCE_TYPES, CurationConfig
from .losses import LossWeights, MsHyper
from .nn import Optimizer
from .stratify import BASELINE_DAYS, StratifyConfig
from .synth import SynthConfig
from .train import Schedule

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """
    The config does not validate.

    :param diagnostics: one message per offending key.
    """

    def __init__(self, diagnostics: Sequence[str]):
        self.diagnostics = list(diagnostics)
        super().__init__(
            "Invalid config:\n%s" % "\n".join("  " + d for d in self.diagnostics)
        )


def derive_seed(root: int, stage: str, purpose: str) -> int:
    """
    A 63-bit seed for one (stage, purpose), derived from the root seed.

    Distinct (stage, purpose) pairs give unrelated seeds; the same triple
    always gives the same seed.
    """
    digest = hashlib.sha256(("%d/%s/%s" % (root, stage, purpose)).encode("utf-8"))
    return int.from_bytes(digest.digest()[:8], "big") >> 1


# -- sections ----------------------------------------------------------------


@dataclass(frozen=True)
class PathsSection:
    """Input files. An empty path means the synth stage's output."""

    codes: str = ""
    hierarchy: str = ""
    lp_children: str = ""
    rollup: str = ""
    """Raw code -> grouping code table; empty means no rollup."""
    events: str = ""
    cooccurrence: str = ""
    """Directory of per-site counts (``<site>.tsv`` plus ``<site>.json``)
    exported by the sites; empty means count `events` here."""
    relations: str = ""
    gold_mapping: str = ""
    truth: str = ""
    """Ground truth of a synthetic corpus, for the synthetic oracle."""
    fixtures: str = ""
    """Directory of label fixtures, for the file oracle."""
    description_embeddings: str = ""
    """Precomputed description embeddings (TSV); empty means the mock embedder."""


@dataclass(frozen=True)
class SynthSection:
    n_concepts: int = 50
    n_sites: int = 3
    codes_per_concept_per_site: int = 2
    n_patients_per_site: int = 1000
    events_per_patient: int = 60
    relatedness_density: float = 0.05
    subgroup_count: int = 2
    outcome_rates: Tuple[float, ...] = (0.8, 0.2)
    noise_suffix: int = 4
    related_boost: float = 0.5
    subgroup_boost: float = 8.0
    span_days: int = 730


@dataclass(frozen=True)
class PpmiSection:
    window_days: int = 30
    """Events at most this many days apart co-occur."""
    min_pair: int = 10
    min_code_total: int = 10


@dataclass(frozen=True)
class ModelSection:
    dim: int = 32
    """d: PPMI-SVD, description and aligned embedding dimension."""
    dim_sim: int = 8
    """d_S, the similarity part of the final embedding."""
    dim_rel: int = 24
    """d_R, the relatedness part."""


@dataclass(frozen=True)
class AnnotateSection:
    oracle: str = "synthetic"
    """``synthetic``, ``file`` or ``remote``."""
    cache: bool = True
    """Record every answer in the run directory and never ask twice."""
    expand_descriptions: bool = False
    endpoint_env: str = "CODEALIGN_ORACLE_URL"
    """Name of the environment variable holding the remote endpoint."""
    api_key_env: str = "CODEALIGN_ORACLE_KEY"
    timeout: float = 60.0
    attempts: int = 3
    batch_size: int = 50


@dataclass(frozen=True)
class CurateSection:
    mapping_top_k: int = 20
    relevance_quantile: float = 0.001
    relevance_types: Tuple[str, ...] = tuple(
        "%s-%s" % (a.value, b.value) for a, b in DEFAULT_RELEVANCE_TYPES
    )
    """Code-type pairs as ``System-System``."""
    feature_targets: Tuple[str, ...] = ()
    """``System:value`` codes; empty means every PheCode."""
    feature_top: int = 20
    feature_random: int = 20
    feature_threshold: float = 0.5
    negatives: int = 5
    split_train: int = 7
    split_validation: int = 3


@dataclass(frozen=True)
class LossSection:
    c_sim_h: float = 1.0
    c_sim_nh: float = 1.0
    c_map: float = 30.0
    c_rel: float = 5.0
    c_fea: float = 0.1
    alpha: float = 1.0
    beta: float = 5.0
    lam: float = 0.5


@dataclass(frozen=True)
class OptimizerSection:
    learning_rate: float = 0.05
    decay: float = 0.99
    min_rate: float = 5e-7


@dataclass(frozen=True)
class TrainSection:
    max_epochs: int = 200
    drop_rate: float = 0.5
    chunk_size: int = 1024
    baseline: bool = True
    """Also train the one-step GAT baseline."""
    baseline_percentile: float = 99.0
    """Per-site PPMI percentile above which pairs become baseline edges."""


@dataclass(frozen=True)
class EvalSection:
    negatives_per_positive: int = 5
    ks: Tuple[int, ...] = (1, 5, 10, 20)
    chart: bool = True
    """Write an SVG bar chart next to the report."""


@dataclass(frozen=True)
class StratifySection:
    target: str = ""
    """``System:value`` of the code gating the features; empty means the
    synthetic corpus' target."""
    index_targets: Tuple[str, ...] = ()
    """Codes defining the index date; empty means `target`."""
    k: int = 2
    window_days: int = BASELINE_DAYS
    index_rule: str = "first_target"
    threshold_percentile: float = 99.0
    n_random_pairs: int = 10000
    reducer_dim: int = 3
    max_rounds: int = 100
    tol: float = 1e-6
    by_age: bool = False
    central_site: str = ""
    embedding: str = "game"
    """``game`` (the concatenated embedding) or ``sim`` or ``rel``."""


_SECTIONS = {
    "paths": PathsSection,
    "synth": SynthSection,
    "ppmi": PpmiSection,
    "model": ModelSection,
    "annotate": AnnotateSection,
    "curate": CurateSection,
    "loss": LossSection,
    "optimizer": OptimizerSection,
    "train": TrainSection,
    "eval": EvalSection,
    "stratify": StratifySection,
}


def _field_types(section) -> Dict[str, type]:
    out = {}
    for f in dataclasses.fields(section):
        default = f.default
        out[f.name] = type(default)
    return out


def _coerce(key: str, value, kind: type, diagnostics: List[str]):
    """`value` as `kind`, or a diagnostic and None."""
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads "1e-6" as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is tuple:
        if isinstance(value, (list, tuple)):
            return tuple(value)
    diagnostics.append(
        "%s: expected %s; got %r" % (key, kind.__name__.replace("tuple", "list"), value)
    )
    return None


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    """Root seed; every stage derives its own with :func:`derive_seed`."""

    paths: PathsSection = field(default_factory=PathsSection)
    synth: SynthSection = field(default_factory=SynthSection)
    ppmi: PpmiSection = field(default_factory=PpmiSection)
    model: ModelSection = field(default_factory=ModelSection)
    annotate: AnnotateSection = field(default_factory=AnnotateSection)
    curate: CurateSection = field(default_factory=CurateSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    stratify: StratifySection = field(default_factory=StratifySection)

    # -- parsing ---------------------------------------------------------

    @classmethod
    def from_flat(cls, flat: Mapping[str, object]) -> PipelineConfig:
        """
        Build from ``{"section.field": value}``.

        :raises ConfigError: listing every unknown key, wrongly typed value
                             and failed component check.
        """
        diagnostics: List[str] = []
        values: Dict[str, Dict[str, object]] = {name: {} for name in _SECTIONS}
        seed = 0
        for key in sorted(flat, key=str):
            value = flat[key]
            if key == "seed":
                coerced = _coerce(key, value, int, diagnostics)
                if coerced is not None:
                    seed = coerced
                continue
            section, _, name = str(key).partition(".")
            if section not in _SECTIONS:
                diagnostics.append("%s: unknown section %r" % (key, section))
                continue
            kinds = _field_types(_SECTIONS[section])
            if name not in kinds:
                diagnostics.append("%s: unknown key" % key)
                continue
            coerced = _coerce(key, value, kinds[name], diagnostics)
            if coerced is not None:
                values[section][name] = coerced
        if diagnostics:
            raise ConfigError(diagnostics)
        config = cls(
            seed=seed,
            **{name: _SECTIONS[name](**kw) for name, kw in values.items()},
        )
        config.validate()
        return config

    @classmethod
    def parse(cls, text: str, overrides: Sequence[str] = ()) -> PipelineConfig:
        """
        Parse YAML text, then apply ``key=value`` overrides.

        Nested mappings are accepted and flattened with dots.
        """
        try:
            data = yaml.safe_load(text) if text.strip() else {}
        except yaml.YAMLError as err:
            raise ConfigError(["not valid YAML: %s" % err])
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(["top level must be a mapping; got %r" % type(data)])
        flat = _flatten(data)
        diagnostics = []
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                diagnostics.append("override %r is not key=value" % item)
                continue
            try:
                flat[key.strip()] = yaml.safe_load(raw) if raw.strip() else ""
            except yaml.YAMLError as err:
                diagnostics.append("override %s: %s" % (key, err))
        if diagnostics:
            raise ConfigError(diagnostics)
        return cls.from_flat(flat)

    @classmethod
    def load(
        cls, path: Optional[Path], overrides: Sequence[str] = ()
    ) -> PipelineConfig:
        """Read `path` (None means all defaults) and apply `overrides`."""
        text = "" if path is None else Path(path).read_text(encoding="utf-8")
        return cls.parse(text, overrides)

    # -- serializing -----------------------------------------------------

    def as_flat(self) -> Dict[str, object]:
        flat: Dict[str, object] = {"seed": self.seed}
        for name in _SECTIONS:
            section = getattr(self, name)
            for f in dataclasses.fields(section):
                value = getattr(section, f.name)
                flat["%s.%s" % (name, f.name)] = (
                    list(value) if isinstance(value, tuple) else value
                )
        return flat

    def dump(self) -> str:
        return yaml.safe_dump(self.as_flat(), sort_keys=True, default_flow_style=False)

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dump(), encoding="utf-8")

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        """
        Check cross-field rules and build every component config once.

        :raises ConfigError: with one diagnostic per failure.
        """
        diagnostics = []
        m = self.model
        if min(m.dim, m.dim_sim, m.dim_rel) < 1:
            diagnostics.append("model: dimensions must be >= 1")
        if m.dim_sim + m.dim_rel != m.dim:
            diagnostics.append(
                "model.dim_sim + model.dim_rel must equal model.dim: %d + %d != %d"
                % (m.dim_sim, m.dim_rel, m.dim)
            )
        if self.annotate.oracle not in ("synthetic", "file", "remote"):
            diagnostics.append(
                "annotate.oracle: expected synthetic, file or remote; got %r"
                % self.annotate.oracle
            )
        if self.annotate.oracle == "file" and not self.paths.fixtures:
            diagnostics.append("paths.fixtures: required by annotate.oracle=file")
        if self.stratify.embedding not in ("game", "sim", "rel"):
            diagnostics.append(
                "stratify.embedding: expected game, sim or rel; got %r"
                % self.stratify.embedding
            )
        if self.ppmi.window_days < 0:
            diagnostics.append("ppmi.window_days must be >= 0")
        if self.eval.negatives_per_positive < 1:
            diagnostics.append("eval.negatives_per_positive must be >= 1")
        if not self.eval.ks or not all(
            isinstance(k, int) and not isinstance(k, bool) and k >= 1
            for k in self.eval.ks
        ):
            diagnostics.append(
                "eval.ks: expected positive integers; got %r" % (self.eval.ks,)
            )
        for name, build in [
            ("synth", self.synth_config),
            ("loss", self.loss_weights),
            ("loss", self.ms_hyper),
            ("optimizer", self.optimizer_config),
            ("train", self.schedule),
            ("curate", self.curation_config),
            ("stratify", self.stratify_config),
        ]:
            try:
                build()
            except (ValueError, TypeError) as err:
                diagnostics.append("%s: %s" % (name, err))
        if diagnostics:
            raise ConfigError(diagnostics)

    # -- component configs -----------------------------------------------

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            **dataclasses.asdict(self.synth),
            seed=derive_seed(self.seed, "synth", "corpus"),
        )

    def loss_weights(self) -> LossWeights:
        s = self.loss
        return LossWeights(s.c_sim_h, s.c_sim_nh, s.c_map, s.c_rel, s.c_fea)

    def ms_hyper(self) -> MsHyper:
        return MsHyper(self.loss.alpha, self.loss.beta, self.loss.lam)

    def optimizer_config(self) -> Optimizer:
        s = self.optimizer
        return Optimizer(s.learning_rate, s.decay, s.min_rate)

    def schedule(self, threads: int = 1) -> Schedule:
        s = self.train
        return Schedule(s.max_epochs, s.drop_rate, s.chunk_size, threads)

    def curation_config(self, threads: int = 1) -> CurationConfig:
        s = self.curate
        types = []
        for text in s.relevance_types:
            a, sep, b = text.partition("-")
            if not sep:
                raise ValueError("relevance type %r is not System-System" % text)
            types.append((CodeSystem(a), CodeSystem(b)))
        return CurationConfig(
            mapping_top_k=s.mapping_top_k,
            relevance_quantile=s.relevance_quantile,
            relevance_types=tuple(types),
            feature_targets=tuple(CodeId.parse(t) for t in s.feature_targets),
            feature_top=s.feature_top,
            feature_random=s.feature_random,
            feature_threshold=s.feature_threshold,
            negatives=s.negatives,
            split_ratio=(s.split_train, s.split_validation),
            seed=derive_seed(self.seed, "train", "curate"),
            threads=threads,
        )

    def stratify_config(self) -> StratifyConfig:
        s = self.stratify
        if s.target:
            CodeId.parse(s.target)
        for text in s.index_targets:
            CodeId.parse(text)
        return StratifyConfig(
            k=s.k,
            window_days=s.window_days,
            index_rule=s.index_rule,
            threshold_percentile=s.threshold_percentile,
            n_random_pairs=s.n_random_pairs,
            reducer_dim=s.reducer_dim,
            max_rounds=s.max_rounds,
            tol=s.tol,
            by_age=s.by_age,
            central_site=s.central_site,
        )


def _flatten(data: Mapping, prefix: str = "") -> Dict[str, object]:
    out: Dict[str, object] = {}
    for key, value in data.items():
        name = "%s%s" % (prefix, key)
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out
