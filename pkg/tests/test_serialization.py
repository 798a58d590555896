"""Binary container format: round trips, integrity, size accounting."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from phirtn.container import (
    FORMAT_VERSION,
    KIND_PHI_RTN,
    SEC_TEMPLATE_TRIE,
    load_model,
    model_from_bytes,
    model_to_bytes,
    read_container,
    save_model,
    serialized_size,
)
from phirtn.errors import FormatError
from phirtn.grammar import Entity, Grammar, Template, expand
from phirtn.lm import UnigramModel, sequence_logprob
from phirtn.ngram import estimate_witten_bell, make_weighted_corpus
from phirtn.phi_rtn import build_phi_rtn
from phirtn.vocab import Vocabulary

from conftest import media_grammar


@pytest.fixture(scope="module")
def media():
    return media_grammar()


@pytest.fixture(scope="module")
def models(media):
    phi = build_phi_rtn(media, order=3, alpha=0.1)
    wb = estimate_witten_bell(make_weighted_corpus(expand(media)), 3)
    uni = UnigramModel.uniform(Vocabulary.from_tokens(media.vocabulary_tokens()))
    return {"phi": phi, "ngram": wb, "unigram": uni}


def random_probes(model, count, seed):
    rng = np.random.default_rng(seed)
    scorable = model.vocab.scorable_ids()
    probes = []
    for _ in range(count):
        length = int(rng.integers(0, 6))
        probes.append([scorable[int(i)] for i in rng.integers(0, len(scorable), length)])
    return probes


class TestRoundTrip:
    @pytest.mark.parametrize("kind", ["phi", "ngram", "unigram"])
    def test_bit_identical_scores(self, models, kind):
        model = models[kind]
        restored = model_from_bytes(model_to_bytes(model))
        for probe in random_probes(model, 500, seed=11):
            assert sequence_logprob(model, probe) == sequence_logprob(restored, probe)

    @pytest.mark.parametrize("kind", ["phi", "ngram", "unigram"])
    def test_saved_twice_identical(self, models, kind):
        model = models[kind]
        assert model_to_bytes(model) == model_to_bytes(model)

    def test_save_load_file(self, models, tmp_path):
        path = tmp_path / "model.bin"
        written = save_model(models["phi"], path)
        assert path.stat().st_size == written == serialized_size(models["phi"])
        restored = load_model(path)
        probe = models["phi"].vocab.encode(["play", "Adele"])
        assert sequence_logprob(restored, probe) == sequence_logprob(
            models["phi"], probe
        )

    def test_vocab_round_trip(self, models):
        restored = model_from_bytes(model_to_bytes(models["phi"]))
        assert restored.vocab == models["phi"].vocab
        assert restored.vocab.nonterminal == "$entity"

    def test_entity_contexts_reconstructed(self, models):
        restored = model_from_bytes(model_to_bytes(models["phi"]))
        assert restored.entity_fst.context_ids == models["phi"].entity_fst.context_ids


class TestIntegrity:
    def test_crc_detects_corruption(self, models):
        data = bytearray(model_to_bytes(models["unigram"]))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(FormatError, match="CRC"):
            model_from_bytes(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            model_from_bytes(b"XXXX" + b"\x00" * 32)

    def test_truncated(self):
        with pytest.raises(FormatError, match="truncated"):
            model_from_bytes(b"PR")

    def test_version_checked(self, models):
        data = bytearray(model_to_bytes(models["unigram"]))
        struct.pack_into("<H", data, 4, 99)
        with pytest.raises(FormatError, match="version"):
            model_from_bytes(bytes(data))


class TestSizes:
    def test_empty_vocabulary_model_is_header_sized(self):
        vocab = Vocabulary()  # reserved tokens only
        model = UnigramModel.uniform(vocab)
        data = model_to_bytes(model)
        # header + 2 section table entries + vocab payload + table + crc
        vocab_payload = 4 + sum(2 + len(t) for t in ["</s>", "<unk>", "<s>", "$entity"])
        expected = 12 + 2 * 12 + vocab_payload + 8 * len(vocab) + 4
        assert len(data) == expected

    def test_size_stable_across_runs(self, media):
        a = serialized_size(build_phi_rtn(media, order=3, alpha=0.1))
        b = serialized_size(build_phi_rtn(media, order=3, alpha=0.1))
        assert a == b

    def test_entity_growth_leaves_template_section_alone(self, media):
        model_a = build_phi_rtn(media, order=2, alpha=0.1)
        doubled = Grammar(
            templates=media.templates,
            entities=[
                Entity(e.tokens + (f"extra{i}",), e.prob / 2)
                for i, e in enumerate(media.entities)
            ]
            + [Entity(e.tokens, e.prob / 2) for e in media.entities],
        )
        model_b = build_phi_rtn(doubled, order=2, alpha=0.1)
        kind_a, sections_a = read_container(model_to_bytes(model_a))
        kind_b, sections_b = read_container(model_to_bytes(model_b))
        assert kind_a == kind_b == KIND_PHI_RTN
        assert len(sections_a[SEC_TEMPLATE_TRIE]) == len(sections_b[SEC_TEMPLATE_TRIE])

    def test_format_version_constant(self):
        assert FORMAT_VERSION == 1
