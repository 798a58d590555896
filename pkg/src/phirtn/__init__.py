"""Grammar-backed deterministic language models and n-gram baselines.

The package builds language models for entity-centric query grammars
(weighted templates sharing one non-terminal filled from a weighted
entity list):

* :mod:`phirtn.phi_rtn` — the deterministic approximate RTN scorer whose
  size stays linear in the entity list;
* :mod:`phirtn.ngram` — Witten-Bell back-off n-gram baselines trained on
  the expanded grammar, with entropy pruning and ARPA I/O;
* :mod:`phirtn.oracle` — brute-force cross-product reference models for
  validation;
* :mod:`phirtn.evaluation` — perplexity-versus-size sweeps, mixtures,
  and weight fitting;
* :mod:`phirtn.cli` — the command-line surface.
"""

from .container import load_model, model_from_bytes, model_to_bytes, save_model, serialized_size
from .errors import (
    ExpansionLimitError,
    FormatError,
    GrammarError,
    ModelBuildError,
    OracleCapError,
    PhirtnError,
)
from .grammar import (
    CollisionRecord,
    Entity,
    ExpandedQuery,
    Grammar,
    Stratum,
    Template,
    collision_report,
    collision_summary,
    expand,
    expansion_size,
    parse_grammar,
    sample_stratum,
    serialize_entities,
    serialize_templates,
    stratify,
)
from .lm import UnigramModel, perplexity, perplexity_detailed, sequence_logprob
from .ngram import (
    BackoffNgramModel,
    WeightedCorpus,
    entropy_prune,
    estimate_witten_bell,
    export_arpa,
    import_arpa,
    make_weighted_corpus,
)
from .oracle import build_oracle, check_normalization, enumerate_reachable_states, exhaustive_mass
from .phi_rtn import (
    PhiRtnModel,
    PhiRtnState,
    assemble,
    build_entity_fst,
    build_phi_rtn,
    build_template_fst,
    build_unigram,
    coverage,
    intended_logprob,
    query_follows_intended_path,
)
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BackoffNgramModel",
    "CollisionRecord",
    "Entity",
    "ExpandedQuery",
    "ExpansionLimitError",
    "FormatError",
    "Grammar",
    "GrammarError",
    "ModelBuildError",
    "OracleCapError",
    "PhiRtnModel",
    "PhiRtnState",
    "PhirtnError",
    "Stratum",
    "Template",
    "UnigramModel",
    "Vocabulary",
    "WeightedCorpus",
    "assemble",
    "build_entity_fst",
    "build_oracle",
    "build_phi_rtn",
    "build_template_fst",
    "build_unigram",
    "check_normalization",
    "collision_report",
    "collision_summary",
    "coverage",
    "entropy_prune",
    "enumerate_reachable_states",
    "estimate_witten_bell",
    "exhaustive_mass",
    "expand",
    "expansion_size",
    "intended_logprob",
    "export_arpa",
    "import_arpa",
    "load_model",
    "make_weighted_corpus",
    "model_from_bytes",
    "model_to_bytes",
    "parse_grammar",
    "perplexity",
    "perplexity_detailed",
    "query_follows_intended_path",
    "sample_stratum",
    "save_model",
    "sequence_logprob",
    "serialize_entities",
    "serialize_templates",
    "serialized_size",
    "stratify",
]
