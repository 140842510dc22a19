"""Span constraint mining and filtering, plus agreement statistics.

Constraints are kept as ``{sentence_id: set of (start, end)}``. Matching
never emits width-1 spans or the full-sentence span, because every binary
tree already contains those.
"""
from __future__ import annotations

import logging
from collections import Counter, defaultdict

import numpy as np

from .corpus_io import ConstraintSet, crosses

logger = logging.getLogger(__name__)

PHRASE_JOINER = "_"


class GazetteerIndex:
    """Token-level prefix trie over lowercased phrases."""

    _END = object()

    def __init__(self, phrases=()):
        self.root = {}
        self.count = 0
        for p in phrases:
            self.add(p)

    def add(self, phrase):
        toks = phrase.split() if isinstance(phrase, str) else list(phrase)
        if not toks:
            return
        node = self.root
        for t in toks:
            node = node.setdefault(t.lower(), {})
        if self._END not in node:
            node[self._END] = True
            self.count += 1

    def __len__(self):
        return self.count

    def __contains__(self, phrase):
        toks = phrase.split() if isinstance(phrase, str) else list(phrase)
        node = self.root
        for t in toks:
            node = node.get(t.lower())
            if node is None:
                return False
        return self._END in node

    def longest_match(self, tokens, start):
        """End index of the longest phrase starting at ``start``, or None."""
        node = self.root
        best = None
        for pos in range(start, len(tokens)):
            node = node.get(tokens[pos].lower())
            if node is None:
                break
            if self._END in node:
                best = pos + 1
        return best


def _scan(tokens, index):
    """Longest-match-leftmost, non-overlapping scan."""
    spans = []
    i, n = 0, len(tokens)
    while i < n:
        end = index.longest_match(tokens, i)
        if end is None:
            i += 1
            continue
        if end - i >= 2 and not (i == 0 and end == n):
            spans.append((i, end))
        i = end
    return spans


def match_gazetteer(sentences, gazetteer, policy="longest_nonoverlapping"):
    if policy != "longest_nonoverlapping":
        raise ValueError(f"unknown match policy {policy!r}")
    if len(gazetteer) == 0:
        raise ValueError("gazetteer is empty")
    out = ConstraintSet()
    for s in sentences:
        spans = _scan(s.tokens, gazetteer)
        if spans:
            out[s.id] = set(spans)
    return out


class PmiLexicon:
    """Multi-token phrases found by iterative bigram merging."""

    def __init__(self, phrases=(), threshold=None, passes=0):
        self.phrases = {tuple(p) for p in phrases if len(p) >= 2}
        self.threshold = threshold
        self.passes = passes

    def __len__(self):
        return len(self.phrases)

    def __contains__(self, phrase):
        return tuple(phrase.split() if isinstance(phrase, str) else phrase) in self.phrases

    def index(self):
        return GazetteerIndex(self.phrases)


def pmi_score(count_ab, count_a, count_b, n_tokens, min_count):
    """Discounted bigram association ``(c(ab) - min_count) / (c(a) c(b)) * N``."""
    return (count_ab - min_count) / (count_a * count_b) * n_tokens


def induce_pmi_phrases(corpus, passes=2, threshold=None, min_count=5):
    """Merge high-association adjacent pairs for ``passes`` rounds.

    ``corpus`` is an iterable of token lists (or Sentences). A merged unit is
    a tuple of original tokens; in later passes merged units are scored as
    single tokens, so phrases grow beyond two words. ``threshold`` defaults to
    ``1e-3 * N`` with N the corpus token count. Pairs scoring strictly above
    the threshold merge.
    """
    if passes < 1:
        raise ValueError("passes must be >= 1")
    units = [[(w.lower(),) for w in getattr(s, "tokens", s)] for s in corpus]
    n_tokens = sum(len(u) for u in units)
    if n_tokens == 0:
        return PmiLexicon((), threshold, passes)
    if threshold is None:
        threshold = 1e-3 * n_tokens
    for _ in range(passes):
        unigram = Counter(u for sent in units for u in sent)
        bigram = Counter(pair for sent in units for pair in zip(sent, sent[1:]))
        merge = set()
        for (a, b), c_ab in bigram.items():
            if pmi_score(c_ab, unigram[a], unigram[b], n_tokens, min_count) > threshold:
                merge.add((a, b))
        if not merge:
            break
        units = [_merge_pass(sent, merge) for sent in units]
    phrases = {u for sent in units for u in sent if len(u) >= 2}
    lexicon = PmiLexicon(phrases, threshold, passes)
    logger.info("induced %d PMI phrases", len(lexicon))
    return lexicon


def _merge_pass(sent, merge):
    out = []
    i = 0
    while i < len(sent):
        if i + 1 < len(sent) and (sent[i], sent[i + 1]) in merge:
            out.append(sent[i] + sent[i + 1])
            i += 2
        else:
            out.append(sent[i])
            i += 1
    return out


def match_pmi(sentences, lexicon):
    out = ConstraintSet()
    if len(lexicon) == 0:
        return out
    index = lexicon.index()
    for s in sentences:
        spans = _scan(s.tokens, index)
        if spans:
            out[s.id] = set(spans)
    return out


def synth_constraints(sentences, labels):
    """Gold spans whose label is in ``labels``; width-1 and whole-sentence spans are dropped."""
    labels = set(labels)
    out = ConstraintSet()
    for s in sentences:
        if s.gold_tree is None:
            logger.warning("sentence %d has no gold tree; skipped", s.id)
            continue
        n = len(s)
        spans = {(a, b) for a, b, lab in s.gold_tree.spans if lab in labels and b - a >= 2 and (a, b) != (0, n)}
        if spans:
            out[s.id] = spans
    return out


def _nested(a, b):
    return a != b and a[0] <= b[0] and b[1] <= a[1]


def restrict_constraints(constraints, target_count, forbid_nesting=False, seed=0):
    """Optionally keep only outermost spans, then downsample uniformly to ``target_count``.

    Returns a new ConstraintSet with ``shortfall`` set when fewer than
    ``target_count`` constraints were available.
    """
    if target_count < 0:
        raise ValueError("target_count must be >= 0")
    pool = []
    for sid in sorted(constraints):
        spans = sorted(constraints[sid])
        if forbid_nesting:
            spans = [a for a in spans if not any(_nested(b, a) for b in spans)]
        pool.extend((sid, sp) for sp in spans)
    out = ConstraintSet()
    out.shortfall = max(0, target_count - len(pool))
    if out.shortfall:
        logger.warning("only %d constraints available for target %d", len(pool), target_count)
        chosen = pool
    else:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(pool), size=target_count, replace=False)
        chosen = [pool[i] for i in sorted(picks)]
    for sid, sp in chosen:
        out.setdefault(sid, set()).add(sp)
    return out


def constraint_stats(constraints, sentences):
    """Agreement of constraints with gold trees.

    Returns a dict with ``EM`` (percent of constraints that are gold
    constituents), ``C`` (percent crossing some gold constituent), ``n_z``
    (constraint count over sentences with gold trees), ``per_label`` (for
    each gold label, percent of its non-trivial gold spans covered by a
    constraint) and ``total_coverage`` (same over all labels).
    """
    by_id = {s.id: s for s in sentences}
    n_z = exact = crossing = 0
    label_total = Counter()
    label_hit = Counter()
    for s in sentences:
        if s.gold_tree is None:
            continue
        n = len(s)
        z = constraints.get(s.id, set())
        gold = s.gold_tree.unlabeled()
        for span in z:
            n_z += 1
            if span in gold:
                exact += 1
            elif any(crosses(span, g) for g in gold):
                crossing += 1
        seen = set()
        for a, b, lab in s.gold_tree.spans:
            if b - a < 2 or (a, b) == (0, n) or (a, b, lab) in seen:
                continue
            seen.add((a, b, lab))
            label_total[lab] += 1
            if (a, b) in z:
                label_hit[lab] += 1
    missing = [sid for sid in constraints if sid not in by_id or by_id[sid].gold_tree is None]
    if missing:
        logger.warning("%d constrained sentence(s) lack gold trees", len(missing))
    pct = lambda a, b: 100.0 * a / b if b else float("nan")  # noqa: E731
    return {
        "EM": pct(exact, n_z),
        "C": pct(crossing, n_z),
        "n_z": n_z,
        "per_label": {lab: pct(label_hit[lab], label_total[lab]) for lab in sorted(label_total)},
        "total_coverage": pct(sum(label_hit.values()), sum(label_total.values())),
        "spans_per_sentence": n_z / max(1, sum(1 for s in sentences if s.gold_tree is not None)),
    }


def format_stats(stats):
    rows = [("EM", f"{stats['EM']:.1f}"), ("C", f"{stats['C']:.1f}"), ("n_z", str(stats["n_z"]))]
    rows += [(lab, f"{v:.1f}") for lab, v in stats["per_label"].items()]
    rows.append(("Total", f"{stats['total_coverage']:.1f}"))
    rows.append(("Span/sentences", f"{stats['spans_per_sentence']:.2f}"))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{k:<{width}}  {v:>8}" for k, v in rows)


def flatten(constraints, source):
    """Iterate ``SpanConstraint`` records, ordered by sentence then span."""
    from .corpus_io import SpanConstraint

    for sid in sorted(constraints):
        for a, b in sorted(constraints[sid]):
            yield SpanConstraint(sid, a, b, source)


def group(records):
    out = defaultdict(set)
    for r in records:
        out[r.sentence_id].add((r.start, r.end))
    return ConstraintSet(out)
