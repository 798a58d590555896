"""Shared fixtures: the worked six-template media grammar and random grammars."""

from __future__ import annotations

import math

import numpy as np
import pytest

from phirtn.grammar import Entity, Grammar, Template

# The worked example grammar: six media-player templates over one entity
# slot, six entities whose raw weights are interaction-derived (they sum
# to ~0.003, so the fixture renormalizes them).
MEDIA_TEMPLATES = [
    (("play", "$entity"), 0.4),
    (("$entity",), 0.2),
    (("hey", "VA", "$entity"), 0.1),
    (("hey", "VA", "play", "$entity"), 0.1),
    (("VA", "play", "$entity"), 0.1),
    (("show", "me", "$entity"), 0.1),
]

MEDIA_ENTITY_RAW = [
    (("hip", "hop", "rap"), 2.7e-3),
    (("Adele",), 8.0e-5),
    (("Drake",), 7.9e-5),
    (("NBA", "YoungBoy"), 7.4e-5),
    (("The", "Beatles",), 6.3e-5),
    (("play", "on", "Canada"), 9.6e-9),
]


def media_grammar() -> Grammar:
    total = math.fsum(p for _, p in MEDIA_ENTITY_RAW)
    grammar = Grammar(
        templates=[Template(t, p) for t, p in MEDIA_TEMPLATES],
        entities=[Entity(t, p / total) for t, p in MEDIA_ENTITY_RAW],
    )
    grammar.validate()
    return grammar


@pytest.fixture(scope="session")
def media() -> Grammar:
    return media_grammar()


def random_grammar(rng: np.random.Generator, max_templates: int = 10, max_entities: int = 50) -> Grammar:
    """Seeded random grammar with realistic collision opportunities.

    Template and entity vocabularies overlap on purpose, and a fraction
    of templates carries two slots or a post-slot word, so precedence
    shadowing shows up in a sizable share of draws.
    """
    carrier = [f"c{i}" for i in range(6)]
    names = [f"e{i}" for i in range(8)] + carrier[:2]

    n_templates = int(rng.integers(2, max_templates + 1))
    templates: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(templates) < n_templates:
        tokens: list[str] = []
        prefix_len = int(rng.integers(0, 3))
        tokens += [carrier[int(i)] for i in rng.integers(0, len(carrier), prefix_len)]
        tokens.append("$entity")
        if rng.random() < 0.3:
            tokens.append(carrier[int(rng.integers(0, len(carrier)))])
            if rng.random() < 0.4:
                tokens.append("$entity")
        key = tuple(tokens)
        if key not in seen:
            seen.add(key)
            templates.append(key)

    n_entities = int(rng.integers(2, max_entities + 1))
    entities: list[tuple[str, ...]] = []
    eseen: set[tuple[str, ...]] = set()
    while len(entities) < n_entities:
        length = int(rng.integers(1, 4))
        key = tuple(names[int(i)] for i in rng.integers(0, len(names), length))
        if key not in eseen:
            eseen.add(key)
            entities.append(key)

    t_probs = rng.dirichlet(np.ones(len(templates)))
    e_probs = rng.dirichlet(np.ones(len(entities)))
    grammar = Grammar(
        templates=[Template(t, float(p)) for t, p in zip(templates, t_probs)],
        entities=[Entity(e, float(p)) for e, p in zip(entities, e_probs)],
    )
    grammar.validate()
    return grammar
