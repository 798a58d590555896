"""Witten-Bell estimation, entropy pruning, and ARPA round trips."""

from __future__ import annotations

import math

import numpy as np
import pytest

from phirtn.errors import FormatError, ModelBuildError
from phirtn.grammar import expand
from phirtn.lm import perplexity, sequence_logprob
from phirtn.ngram import (
    LN10,
    WeightedCorpus,
    entropy_prune,
    estimate_witten_bell,
    export_arpa,
    import_arpa,
    make_weighted_corpus,
    paper_theta_sweep,
)
from phirtn.oracle import check_normalization
from phirtn.vocab import BOS_ID, EOS_ID, UNK_ID, Vocabulary

from conftest import media_grammar


@pytest.fixture(scope="module")
def media():
    return media_grammar()


@pytest.fixture(scope="module")
def media_corpus(media):
    return make_weighted_corpus(expand(media))


@pytest.fixture(scope="module")
def media_wb3(media_corpus):
    return estimate_witten_bell(media_corpus, 3)


def corpus(items: dict[str, float]) -> WeightedCorpus:
    seqs = [tuple(text.split()) for text in items]
    return WeightedCorpus(sequences=seqs, weights=np.array(list(items.values())))


def p(model, word: str, history: tuple[str, ...]) -> float:
    ids = tuple(model.vocab.id(t) for t in history)
    return math.exp(model.logprob_ids(model.vocab.id(word), ids))


class TestWeightedCorpus:
    def test_ratio_rescaling(self):
        class Q:
            def __init__(self, tokens, joint):
                self.tokens = tokens
                self.joint_prob = joint

        wc = make_weighted_corpus([Q(("a",), 0.5), Q(("b",), 0.25)])
        assert wc.weights.tolist() == [2.0, 1.0]

    def test_all_equal_probs_become_one(self):
        class Q:
            def __init__(self, tokens, joint):
                self.tokens = tokens
                self.joint_prob = joint

        wc = make_weighted_corpus([Q(("a",), 0.2)] * 5)
        assert wc.weights.tolist() == [1.0] * 5

    def test_media_minimum_row(self, media, media_corpus):
        # The lowest-probability query gets pseudo-count exactly 1; it pairs
        # the rarest entity with one of the lightest templates.
        queries = list(expand(media))
        min_idx = int(np.argmin([q.joint_prob for q in queries]))
        assert queries[min_idx].entity_indices == (5,)
        assert media_corpus.weights[min_idx] == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ModelBuildError):
            make_weighted_corpus([])


class TestWittenBellFixtures:
    """Three pinned corpora with hand-computed conditional probabilities."""

    def test_two_bigrams(self):
        # counts after "a": b=1, c=1 -> types 2, total 2.
        # P(.|a) = count / (total + types) = 1/4; reserve = 2/4.
        m = estimate_witten_bell(corpus({"a b": 1.0, "a c": 1.0}), 2, unk_floor=0.0)
        assert p(m, "b", ("a",)) == pytest.approx(0.25, abs=1e-12)
        assert p(m, "c", ("a",)) == pytest.approx(0.25, abs=1e-12)
        # history <s>: a seen twice, one type -> 2/3.
        assert p(m, "a", ("<s>",)) == pytest.approx(2.0 / 3.0, abs=1e-12)
        # unigrams: a=2, b=1, c=1, </s>=2 -> total 6, types 4.
        assert p(m, "a", ()) == pytest.approx(2.0 / 10.0, abs=1e-12)
        assert p(m, "b", ()) == pytest.approx(1.0 / 10.0, abs=1e-12)
        assert p(m, "</s>", ()) == pytest.approx(2.0 / 10.0, abs=1e-12)
        # The whole reserve lands on the single unseen event <unk>.
        assert p(m, "<unk>", ()) == pytest.approx(4.0 / 10.0, abs=1e-12)

    def test_unigram_relative_counts(self):
        # Events: a=2, b=1, </s>=3 -> total 6, types 3: counts / 9.
        m = estimate_witten_bell(corpus({"a": 2.0, "b": 1.0}), 1, unk_floor=0.0)
        assert p(m, "a", ()) == pytest.approx(2.0 / 9.0, abs=1e-12)
        assert p(m, "b", ()) == pytest.approx(1.0 / 9.0, abs=1e-12)
        assert p(m, "</s>", ()) == pytest.approx(3.0 / 9.0, abs=1e-12)
        assert p(m, "<unk>", ()) == pytest.approx(3.0 / 9.0, abs=1e-12)

    def test_fractional_counts(self):
        # Sequences: "a b" (2.0), "a c" (1.0), "b" (0.5).
        # history a: b=2, c=1 -> total 3, types 2 -> P(b|a)=2/5, P(c|a)=1/5.
        # history <s>: a=3, b=0.5 -> total 3.5, types 2 -> P(a|<s>)=3/5.5.
        # history b: </s>=2.5 -> one type -> P(</s>|b)=2.5/3.5.
        m = estimate_witten_bell(
            corpus({"a b": 2.0, "a c": 1.0, "b": 0.5}), 2, unk_floor=0.0
        )
        assert p(m, "b", ("a",)) == pytest.approx(2.0 / 5.0, abs=1e-12)
        assert p(m, "c", ("a",)) == pytest.approx(1.0 / 5.0, abs=1e-12)
        assert p(m, "a", ("<s>",)) == pytest.approx(3.0 / 5.5, abs=1e-12)
        assert p(m, "</s>", ("b",)) == pytest.approx(2.5 / 3.5, abs=1e-12)
        # unigrams: a=3, b=2.5, c=1, </s>=3.5 -> total 10, types 4.
        assert p(m, "a", ()) == pytest.approx(3.0 / 14.0, abs=1e-12)
        assert p(m, "c", ()) == pytest.approx(1.0 / 14.0, abs=1e-12)


class TestWittenBellProperties:
    def test_every_history_normalizes(self, media_wb3):
        report = check_normalization(media_wb3, tolerance=1e-9)
        assert report.ok, report

    def test_fixture_models_normalize(self):
        for items, order in (
            ({"a b": 1.0, "a c": 1.0}, 2),
            ({"a": 2.0, "b": 1.0}, 1),
            ({"a b": 2.0, "a c": 1.0, "b": 0.5}, 3),
        ):
            m = estimate_witten_bell(corpus(items), order)
            report = check_normalization(m, tolerance=1e-9)
            assert report.ok, (items, order, report)

    def test_unk_floor_guarantees_mass(self):
        m = estimate_witten_bell(corpus({"a b": 1.0}), 2, unk_floor=1e-10)
        assert p(m, "<unk>", ()) >= 1e-10
        assert check_normalization(m, tolerance=1e-9).ok

    def test_block_and_object_paths_agree(self, media):
        from phirtn.evaluation import FastExpansion

        vocab = Vocabulary.from_tokens(media.vocabulary_tokens())
        blocks = FastExpansion(media).corpus(vocab)
        explicit = make_weighted_corpus(expand(media))
        for order in (2, 3):
            a = estimate_witten_bell(blocks, order)
            b = estimate_witten_bell(explicit, order, vocab=vocab)
            assert a.shift == b.shift
            for ta, tb in zip(a.probs, b.probs):
                assert ta.keys() == tb.keys()
                for code in ta:
                    assert ta[code] == pytest.approx(tb[code], abs=1e-12)
            for ta, tb in zip(a.bows, b.bows):
                assert ta.keys() == tb.keys()
                for code in ta:
                    assert ta[code] == pytest.approx(tb[code], abs=1e-12)

    def test_state_shrinks_to_stored_context(self, media_wb3):
        state = media_wb3.start()
        for tok in media_wb3.vocab.encode(["play", "Adele", "Drake"]):
            _, state = media_wb3.step(state, tok)
            assert len(state) <= media_wb3.order - 1


class TestEntropyPruning:
    def test_theta_zero_is_identity(self, media_wb3):
        pruned = entropy_prune(media_wb3, 0.0)
        assert pruned.probs == media_wb3.probs
        assert pruned.bows == media_wb3.bows

    def test_theta_infinity_keeps_only_unigrams(self, media_wb3):
        pruned = entropy_prune(media_wb3, float("inf"))
        assert pruned.explicit_entry_count() == len(pruned.probs[0])
        assert check_normalization(pruned, tolerance=1e-9).ok

    def test_monotone_in_theta(self, media_wb3):
        counts = [
            entropy_prune(media_wb3, theta).explicit_entry_count()
            for theta in sorted(paper_theta_sweep())
        ]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_pruned_models_normalize(self, media_wb3):
        for theta in (4.0**-6, 4.0**-10, 4.0**-16):
            pruned = entropy_prune(media_wb3, theta)
            assert check_normalization(pruned, tolerance=1e-9).ok

    def test_needed_histories_survive(self, media_wb3):
        pruned = entropy_prune(media_wb3, 4.0**-6)
        shift = pruned.shift
        for k in range(1, pruned.order):
            contexts = {code >> shift for code in pruned.probs[k]}
            for hist in contexts:
                if k >= 1:
                    # every surviving history of length k exists at order k
                    assert hist in pruned.probs[k - 1]

    def test_training_perplexity_degrades(self, media, media_wb3):
        train = [media_wb3.vocab.encode(q.tokens) for q in expand(media)]
        base_ppl = perplexity(media_wb3, train)
        pruned_ppl = perplexity(entropy_prune(media_wb3, 4.0**-6), train)
        assert base_ppl <= pruned_ppl

    def test_negative_theta_rejected(self, media_wb3):
        with pytest.raises(ModelBuildError):
            entropy_prune(media_wb3, -1.0)


class TestArpa:
    def test_roundtrip_byte_identical(self, media_wb3):
        text = export_arpa(media_wb3)
        again = export_arpa(import_arpa(text))
        assert text == again

    def test_roundtrip_preserves_probabilities(self, media_wb3):
        back = import_arpa(export_arpa(media_wb3))
        probe = media_wb3.vocab.encode(["play", "Adele"])
        lp_orig = sequence_logprob(media_wb3, probe)
        lp_back = sequence_logprob(back, back.vocab.encode(["play", "Adele"]))
        assert lp_back == pytest.approx(lp_orig, abs=1e-5)

    def test_hand_written_unigram_model(self):
        text = (
            "\\data\\\n"
            "ngram 1=3\n"
            "\n"
            "\\1-grams:\n"
            "-0.3010300\t</s>\n"
            "-0.6020600\ta\n"
            "-0.6020600\tb\n"
            "\n"
            "\\end\\\n"
        )
        m = import_arpa(text)
        assert p(m, "a", ()) == pytest.approx(0.25, abs=1e-6)
        assert p(m, "</s>", ()) == pytest.approx(0.5, abs=1e-6)
        report = check_normalization(m, tolerance=1e-5)
        assert report.max_deviation < 1e-5

    def test_log10_convention(self):
        m = import_arpa(
            "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.3010300\t</s>\n-0.3010300\ta\n\n\\end\\\n"
        )
        assert m.probs[0][m.vocab.id("a")] == pytest.approx(
            math.log(0.5), abs=1e-6
        )
        assert -0.30103 * LN10 == pytest.approx(math.log(0.5), abs=1e-5)

    def test_malformed_inputs(self):
        with pytest.raises(FormatError, match="data"):
            import_arpa("no header\n")
        with pytest.raises(FormatError, match="tokens"):
            import_arpa(
                "\\data\\\nngram 1=1\n\n\\1-grams:\n-0.5\ta b\n\n\\end\\\n"
            )
        with pytest.raises(FormatError, match="end"):
            import_arpa("\\data\\\nngram 1=1\n\n\\1-grams:\n-0.5\ta\n")
        with pytest.raises(FormatError, match="non-finite"):
            import_arpa(
                "\\data\\\nngram 1=1\n\n\\1-grams:\nnan\ta\n\n\\end\\\n"
            )
        with pytest.raises(FormatError, match="declares"):
            import_arpa(
                "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5\ta\n\n\\end\\\n"
            )
