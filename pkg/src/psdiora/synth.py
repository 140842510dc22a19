"""Synthetic PCFG corpora with gold trees and entity-style span constraints."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus_io import ConstraintSet, GoldTree, Sentence

logger = logging.getLogger(__name__)

ENTITY_PHRASES = (
    "new york", "new york city", "los angeles", "san francisco", "united states",
    "united nations", "white house", "wall street", "general motors", "goldman sachs",
    "hong kong", "supreme court", "federal reserve", "european union", "world bank",
    "red cross", "bank of america", "new jersey", "las vegas", "north carolina",
    "south africa", "prime minister", "morgan stanley", "coca cola", "boston globe",
    "silicon valley", "pacific ocean", "city council", "stock exchange", "labor department",
)

_WORDS = {
    "Det": "the a this that every some",
    "N": (
        "dog cat company plan market report price deal group official bank share "
        "investor analyst court law country city car house school student teacher "
        "president board meeting decision problem system program team game player "
        "letter story paper bill budget tax rate loan fund issue agency worker union "
        "factory product sale profit loss value project study trial judge doctor "
        "patient farmer village"
    ),
    "V": (
        "saw bought sold made took found gave left built approved rejected signed "
        "reported raised cut closed opened announced expected needed wanted liked "
        "helped hired fired visited joined watched read wrote moved changed started "
        "ended won lost called asked told"
    ),
    "Adj": (
        "big small new old good bad large major local federal strong weak early late "
        "high low recent public private foreign quick slow main final free full long "
        "short young"
    ),
    "P": "in on at with from for by about near after before during",
    "Adv": "quickly slowly recently finally also still often never really again soon already usually nearly openly",
    "Pron": "he she it they we someone",
    "Aux": "will would could might should",
}

DEFAULT_RULES = {
    "S": [(("NP", "VP", "."), 0.6), (("NP", "VP", "PP", "."), 0.2), (("PP", ",", "NP", "VP", "."), 0.2)],
    "NP": [
        (("Det", "N"), 0.3),
        (("Det", "Adj", "N"), 0.2),
        (("ENT",), 0.3),
        (("NP", "PP"), 0.1),
        (("Pron",), 0.1),
    ],
    "VP": [
        (("V", "NP"), 0.5),
        (("V", "NP", "PP"), 0.15),
        (("Adv", "V", "NP"), 0.1),
        (("Aux", "V", "NP"), 0.1),
        (("V", "PP"), 0.1),
        (("V",), 0.05),
    ],
    "PP": [(("P", "NP"), 1.0)],
}


@dataclass
class Grammar:
    """A PCFG over nonterminals ``rules``; preterminals draw from ``lexicon``.

    ``ENT`` (when present in a rule) expands to an entity phrase as a flat
    constituent labelled ``entity_label``. Any other symbol that is neither a
    nonterminal nor a preterminal is a literal word tagged with itself.
    """

    rules: dict
    lexicon: dict = field(default_factory=dict)
    start: str = "S"
    entity_label: str = "NP"
    max_depth: int = 12

    def __post_init__(self):
        if self.start not in self.rules:
            raise ValueError(f"start symbol {self.start!r} has no rules")
        self._tables = {}
        for lhs, alts in self.rules.items():
            probs = np.array([p for _, p in alts], dtype=np.float64)
            if np.any(probs < 0) or probs.sum() <= 0:
                raise ValueError(f"bad probabilities for {lhs}")
            self._tables[lhs] = ([rhs for rhs, _ in alts], probs / probs.sum())

    @classmethod
    def default(cls):
        return cls(DEFAULT_RULES, {k: v.split() for k, v in _WORDS.items()})

    def vocabulary(self, entities=ENTITY_PHRASES):
        words = {w for ws in self.lexicon.values() for w in ws}
        words |= {w for p in entities for w in p.split()}
        return words


class _TooDeep(Exception):
    pass


def _expand(grammar, symbol, rng, entities, depth, words, tags, spans):
    if depth > grammar.max_depth:
        raise _TooDeep
    start = len(words)
    if symbol == "ENT":
        phrase = entities[rng.integers(len(entities))].split()
        words.extend(phrase)
        tags.extend(["NNP"] * len(phrase))
        spans.append((start, len(words), grammar.entity_label))
        return
    if symbol in grammar.rules:
        rhs_list, probs = grammar._tables[symbol]
        rhs = rhs_list[rng.choice(len(rhs_list), p=probs)]
        for child in rhs:
            _expand(grammar, child, rng, entities, depth + 1, words, tags, spans)
        # a nonterminal rewriting to a single entity keeps one bracket
        if not (len(rhs) == 1 and rhs[0] == "ENT" and symbol == grammar.entity_label):
            spans.append((start, len(words), symbol))
        return
    if symbol in grammar.lexicon:
        ws = grammar.lexicon[symbol]
        words.append(ws[rng.integers(len(ws))])
        tags.append(symbol)
        return
    words.append(symbol)
    tags.append(symbol)


@dataclass
class SynthCorpus:
    sentences: list
    constraints: ConstraintSet
    entities: tuple
    resampled: int = 0


def generate(
    n_sentences,
    seed=0,
    grammar=None,
    entities=ENTITY_PHRASES,
    constraint_fraction=0.5,
    noise=0.0,
    max_tokens=40,
):
    """Sample sentences with gold trees and entity constraints.

    A random ``constraint_fraction`` of sentences receive constraints: every
    gold span (width >= 2, not the whole sentence) whose lowercased yield is
    an entity phrase. ``noise`` is the fraction of constraints replaced by a
    random span that is not a gold constituent. Derivations deeper than the
    grammar's cap or longer than ``max_tokens`` are resampled and counted.
    """
    grammar = grammar or Grammar.default()
    entities = tuple(entities)
    lexicon = {tuple(p.lower().split()) for p in entities}
    rng = np.random.default_rng(seed)
    sentences = []
    resampled = 0
    while len(sentences) < n_sentences:
        words, tags, spans = [], [], []
        try:
            _expand(grammar, grammar.start, rng, entities, 0, words, tags, spans)
        except _TooDeep:
            resampled += 1
            continue
        if not words or len(words) > max_tokens:
            resampled += 1
            continue
        tree = GoldTree(set(spans), tags, grammar.start)
        sentences.append(Sentence(len(sentences), words, tree))
    if resampled:
        logger.info("resampled %d derivations", resampled)

    constraints = ConstraintSet()
    n_pick = int(round(constraint_fraction * n_sentences))
    chosen = set(rng.permutation(n_sentences)[:n_pick].tolist()) if n_pick else set()
    for s in sentences:
        n = len(s)
        ents = set()
        for a, b, _ in s.gold_tree.spans:
            if b - a >= 2 and (a, b) != (0, n) and tuple(w.lower() for w in s.tokens[a:b]) in lexicon:
                ents.add((a, b))
        s.gold_spans = {(a, b, "ENT") for a, b in ents} or None
        if s.id in chosen and ents:
            constraints[s.id] = ents
    if noise > 0:
        _add_noise(constraints, sentences, noise, rng)
    return SynthCorpus(sentences, constraints, entities, resampled)


def _add_noise(constraints, sentences, noise, rng):
    by_id = {s.id: s for s in sentences}
    for sid in sorted(constraints):
        s = by_id[sid]
        n = len(s)
        gold = s.gold_tree.unlabeled()
        candidates = [(a, b) for a in range(n) for b in range(a + 2, n + 1) if (a, b) not in gold and (a, b) != (0, n)]
        new = set()
        for span in sorted(constraints[sid]):
            if candidates and rng.random() < noise:
                new.add(candidates[rng.integers(len(candidates))])
            else:
                new.add(span)
        constraints[sid] = new
