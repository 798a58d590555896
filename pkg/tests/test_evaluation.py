"""Fast expansion equivalence, mixtures, EM weights, and the sweep."""

from __future__ import annotations

import math

import numpy as np
import pytest

from phirtn.errors import ModelBuildError
from phirtn.evaluation import (
    FastExpansion,
    MixtureModel,
    SweepConfig,
    default_sweep_configs,
    interpolate,
    make_desk_grammar,
    make_standin_model,
    optimize_weights,
    records_to_csv,
    sweep,
)
from phirtn.grammar import Stratum, expand, sample_stratum, stratify
from phirtn.lm import UnigramModel, perplexity, sequence_logprob
from phirtn.ngram import estimate_witten_bell, make_weighted_corpus
from phirtn.oracle import check_normalization
from phirtn.phi_rtn import build_phi_rtn
from phirtn.vocab import EOS_ID, Vocabulary

from conftest import media_grammar


@pytest.fixture(scope="module")
def media():
    return media_grammar()


class TestFastExpansion:
    def test_matches_object_path(self, media):
        fast = FastExpansion(media)
        queries = list(expand(media))
        assert fast.size == len(queries)
        for i, q in enumerate(queries):
            assert fast.tokens_at(i) == q.tokens
            assert fast.query_at(i) == q

    def test_stratification_matches(self, media):
        fast = FastExpansion(media)
        queries = list(expand(media))
        assignment = stratify(queries)
        for stratum in Stratum:
            fast_members = {
                fast.query_at(int(i)) for i in fast.stratum_indices(stratum)
            }
            object_members = {q for q, s in assignment.items() if s is stratum}
            assert fast_members == object_members

    def test_sampling_matches_for_fixed_seed(self, media):
        fast = FastExpansion(media)
        queries = list(expand(media))
        for stratum in Stratum:
            for seed in (0, 7, 123):
                assert fast.sample(stratum, 3, seed) == sample_stratum(
                    queries, stratum, 3, seed
                )

    def test_multi_slot_rejected(self):
        from phirtn.grammar import Entity, Grammar, Template

        g = Grammar(
            templates=[Template(("$entity", "x", "$entity"), 1.0)],
            entities=[Entity(("a",), 1.0)],
        )
        with pytest.raises(ModelBuildError):
            FastExpansion(g)


class TestMixture:
    def test_weight_one_reduces_to_component(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        uni = UnigramModel(phi.vocab, phi.unigram)
        mix = interpolate([phi, uni], [1.0, 0.0])
        for q in expand(media):
            ids = phi.vocab.encode(q.tokens)
            assert sequence_logprob(mix, ids) == pytest.approx(
                sequence_logprob(phi, ids), abs=1e-12
            )

    def test_identical_components_change_nothing(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        mix = interpolate([phi, phi], [0.3, 0.7])
        for q in list(expand(media))[:10]:
            ids = phi.vocab.encode(q.tokens)
            assert sequence_logprob(mix, ids) == pytest.approx(
                sequence_logprob(phi, ids), abs=1e-12
            )

    def test_weight_validation(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        with pytest.raises(ModelBuildError, match="sum"):
            interpolate([phi, phi], [0.5, 0.6])
        with pytest.raises(ModelBuildError, match="negative"):
            interpolate([phi, phi], [1.5, -0.5])

    def test_vocabulary_mismatch_rejected(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        other = UnigramModel.uniform(Vocabulary.from_tokens(["zzz"]))
        with pytest.raises(ModelBuildError, match="vocabular"):
            interpolate([phi, other], [0.5, 0.5])

    def test_mixture_normalizes(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        uni = UnigramModel(phi.vocab, phi.unigram)
        mix = interpolate([phi, uni], [0.6, 0.4])
        states = [mix.start()]
        state = mix.start()
        for tok in phi.vocab.encode(["play", "Adele"]):
            _, state = mix.step(state, tok)
            states.append(state)
        report = check_normalization(mix, states=states, tolerance=1e-9)
        assert report.ok, report


class TestOptimizeWeights:
    def test_single_model_gets_full_budget(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        uni = UnigramModel(phi.vocab, phi.unigram)
        corpus = [phi.vocab.encode(q.tokens) for q in list(expand(media))[:8]]
        result = optimize_weights([phi], corpus, budget_mass=0.05, fixed_model=uni)
        assert result.weights[0] == pytest.approx(0.05, abs=1e-12)

    def test_planted_weight_recovered(self):
        # Corpus drawn from model A; candidate B has (almost) disjoint
        # support, so the full budget must flow to A.
        vocab = Vocabulary.from_tokens(["a", "b"])
        pa = np.zeros(len(vocab))
        pa[vocab.id("a")] = 0.9
        pa[EOS_ID] = 0.1
        pa[vocab.id("b")] = 0.0
        pb = np.zeros(len(vocab))
        pb[vocab.id("b")] = 0.9
        pb[EOS_ID] = 0.1
        model_a, model_b = UnigramModel(vocab, pa), UnigramModel(vocab, pb)
        fixed = UnigramModel.uniform(vocab)
        corpus = [vocab.encode(["a", "a"]) for _ in range(50)]
        result = optimize_weights(
            [model_a, model_b], corpus, budget_mass=0.05, fixed_model=fixed
        )
        assert result.weights[0] == pytest.approx(0.05, abs=1e-3)
        assert math.fsum(result.weights) == pytest.approx(0.05, abs=1e-12)

    def test_log_likelihood_monotone(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        wb = estimate_witten_bell(make_weighted_corpus(expand(media)), 2, vocab=phi.vocab)
        uni = UnigramModel(phi.vocab, phi.unigram)
        corpus = [phi.vocab.encode(q.tokens) for q in expand(media)]
        result = optimize_weights([phi, wb], corpus, budget_mass=0.5, fixed_model=uni)
        gains = np.diff(result.log_likelihoods)
        assert np.all(gains >= -1e-12)

    def test_simplex_exact(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        uni = UnigramModel(phi.vocab, phi.unigram)
        corpus = [phi.vocab.encode(q.tokens) for q in list(expand(media))[:5]]
        result = optimize_weights([phi, uni], corpus, budget_mass=1.0)
        assert math.fsum(result.weights) == pytest.approx(1.0, abs=1e-12)

    def test_input_validation(self, media):
        phi = build_phi_rtn(media, order=2, alpha=0.1)
        with pytest.raises(ModelBuildError, match="dev corpus"):
            optimize_weights([phi], [], budget_mass=1.0)
        with pytest.raises(ModelBuildError, match="fixed"):
            optimize_weights([phi], [[4]], budget_mass=0.5)


class TestSweep:
    def test_records_and_determinism(self, media):
        samples = {
            s: sample_stratum(list(expand(media)), s, 4, seed=1) for s in Stratum
        }
        configs = [
            SweepConfig("phi-rtn", 2),
            SweepConfig("ngram", 2, theta=0.0),
            SweepConfig("ngram", 2, theta=4.0**-6),
        ]
        records1, failures1 = sweep(media, configs, samples)
        records2, _ = sweep(media, configs, samples)
        assert not failures1
        assert records_to_csv(records1) == records_to_csv(records2)
        csv = records_to_csv(records1)
        assert csv.splitlines()[0] == "model,params,bytes,ppl_head,ppl_torso,ppl_tail"
        assert len(csv.splitlines()) == 4
        for record in records1:
            assert record.bytes > 0
            assert record.ppl_head > 1.0

    def test_unpruned_beats_pruned_on_training_tail(self, media):
        samples = {
            s: sample_stratum(list(expand(media)), s, 4, seed=1) for s in Stratum
        }
        configs = [
            SweepConfig("ngram", 4, theta=0.0),
            SweepConfig("ngram", 4, theta=4.0**-4),
        ]
        records, _ = sweep(media, configs, samples)
        by_theta = {r.params: r for r in records}
        assert (
            by_theta["n=4;theta=0.0"].ppl_tail
            <= by_theta[f"n=4;theta={4.0**-4!r}"].ppl_tail
        )

    def test_failures_recorded_not_fatal(self, media):
        samples = {
            s: sample_stratum(list(expand(media)), s, 2, seed=1) for s in Stratum
        }
        configs = [
            SweepConfig("phi-rtn", 2, alpha=2.0),  # invalid alpha
            SweepConfig("ngram", 2, theta=0.0),
        ]
        records, failures = sweep(media, configs, samples)
        assert len(records) == 1 and len(failures) == 1
        assert failures[0].model == "phi-rtn"

    def test_default_config_set(self):
        configs = default_sweep_configs()
        phi = [c for c in configs if c.kind == "phi-rtn"]
        ngram = [c for c in configs if c.kind == "ngram"]
        assert {c.order for c in phi} == {2, 3, 4}
        thetas = {c.theta for c in ngram}
        assert 0.0 in thetas
        assert {4.0**-i for i in range(4, 20)} <= thetas
        assert len(ngram) == 3 * 17


class TestDeskGrammar:
    def test_seeded_and_valid(self):
        g1 = make_desk_grammar(num_templates=10, num_entities=500, seed=3)
        g2 = make_desk_grammar(num_templates=10, num_entities=500, seed=3)
        g1.validate()
        assert g1.templates == g2.templates and g1.entities == g2.entities
        g3 = make_desk_grammar(num_templates=10, num_entities=500, seed=4)
        assert g3.templates != g1.templates or g3.entities != g1.entities

    def test_zipf_weights(self):
        g = make_desk_grammar(num_templates=10, num_entities=100, seed=0)
        probs = [e.prob for e in g.entities]
        ratios = [probs[0] / p for p in probs]
        np.testing.assert_allclose(ratios, np.arange(1, 101), rtol=1e-9)

    def test_standin_model_covers_vocab(self):
        g = make_desk_grammar(num_templates=8, num_entities=200, seed=0)
        phi = build_phi_rtn(g, order=2)
        standin = make_standin_model(phi.vocab, seed=1, sequences=300)
        corpus = [phi.vocab.encode(q.tokens) for q in list(expand(g))[:50]]
        assert math.isfinite(perplexity(standin, corpus))
