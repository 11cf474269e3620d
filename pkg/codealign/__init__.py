"""
Embed medical codes from several institutions into one space.

How it works
~~~~~~~~~~~~

Each site counts which codes its patients record within a few weeks of one
another and turns the counts into a PPMI-SVD embedding. Sites only ever
share those counts (or the embeddings), never patient rows.

The site embeddings are then aligned: one small graph attention network per
site, trained so that codes the sites share land in the same place. A
knowledge graph of code pairs (hierarchies, curated relations, and pairs an
annotation oracle labels as mappings or related) drives a two-step
contrastive training on top of the aligned embedding and a description
embedding:

1. the similarity step learns ``z_sim``, where a local lab or drug code sits
   next to the standard code it means;
2. the relatedness step freezes ``z_sim`` and learns ``z_rel``, where a
   disease sits next to its drugs, labs and procedures.

The concatenation ``[z_sim, z_rel]`` feeds the evaluation harness (held-out
AUC, top-k mapping accuracy, feature-selection C-index) and a federated
k-means that splits a cohort into subgroups from its codes alone.

How to use
~~~~~~~~~~

Everything runs through the ``codealign`` command, one stage at a time, in a
run directory::

    codealign synth --run-dir run synth.n_patients_per_site=300
    codealign ppmi --run-dir run
    codealign align --run-dir run
    codealign train --run-dir run
    codealign eval --run-dir run
    codealign stratify --run-dir run
    codealign report --run-dir run

Settings live in one YAML file of flat dotted keys (``--config``); any key
can be overridden as ``key=value``. See :class:`codealign.config.PipelineConfig`.

Each stage appends to ``manifest.jsonl`` in the run directory. Rerunning a
stage whose inputs have not changed does nothing unless you pass ``--force``.

Real data
~~~~~~~~~

Point ``paths.codes``, ``paths.events`` (or ``paths.cooccurrence``, for
counts the sites exported themselves) and friends at your TSV files and pick
an annotation oracle: ``annotate.oracle=file`` reads labels from
``paths.fixtures``; ``annotate.oracle=remote`` asks the JSON service whose
URL is in the environment variable named by ``annotate.endpoint_env``.
Every answer is cached in the run directory, so no pair is asked twice.
"""
from .codebook import CodeBook, CodeId, CodeSystem
from .config import ConfigError, PipelineConfig, derive_seed
from .synth import SynthConfig, generate_corpus
from .train import GameEmbedding

__all__ = [
    "CodeBook",
    "CodeId",
    "CodeSystem",
    "ConfigError",
    "GameEmbedding",
    "PipelineConfig",
    "SynthConfig",
    "derive_seed",
    "generate_corpus",
]

__version__ = "0.1.0"
