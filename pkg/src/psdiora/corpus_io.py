"""Corpus, constraint and prediction file formats.

All spans are half-open ``(start, end)`` token intervals.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Optional

logger = logging.getLogger(__name__)

UNK = "<unk>"


class CorpusFormatError(ValueError):
    """Malformed input file; ``lineno`` is 1-based."""

    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


def crosses(a, b):
    (i, j), (k, l) = a, b
    return i < k < j < l or k < i < l < j


@dataclass
class GoldTree:
    spans: set  # {(start, end, label)}
    pos: Optional[list] = None
    root_label: Optional[str] = None  # top-most constituent label below any ROOT/TOP wrapper

    def unlabeled(self):
        return {(s, e) for s, e, _ in self.spans}

    def validate(self, n_leaves):
        spans = self.unlabeled()
        if (0, n_leaves) not in spans:
            raise ValueError("gold tree lacks the full-sentence span")
        ordered = sorted(spans)
        for a in range(len(ordered)):
            for b in range(a + 1, len(ordered)):
                if crosses(ordered[a], ordered[b]):
                    raise ValueError(f"crossing gold spans {ordered[a]} and {ordered[b]}")
        if self.pos is not None and len(self.pos) != n_leaves:
            raise ValueError("POS tag count differs from token count")


@dataclass
class Sentence:
    id: int
    tokens: list
    gold_tree: Optional[GoldTree] = None
    gold_spans: Optional[set] = None  # e.g. entity spans {(start, end, label)}

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sentence has no tokens")
        n = len(self.tokens)
        if self.gold_tree is not None:
            self.gold_tree.validate(n)
        for span in self.gold_spans or ():
            if not 0 <= span[0] < span[1] <= n:
                raise ValueError(f"gold span {span[:2]} outside sentence of length {n}")

    def __len__(self):
        return len(self.tokens)


class BinaryTree:
    """Unlabeled full binary bracketing: ``splits[(i, j)] = k`` for internal spans."""

    __slots__ = ("n_leaves", "splits")

    def __init__(self, n_leaves, splits):
        self.n_leaves = n_leaves
        self.splits = dict(splits)

    def spans(self):
        """Internal spans (width >= 2), including the root."""
        return set(self.splits)

    def nodes(self):
        return [(i, j, k) for (i, j), k in self.splits.items()]

    def __eq__(self, other):
        return isinstance(other, BinaryTree) and self.n_leaves == other.n_leaves and self.splits == other.splits

    def __hash__(self):
        return hash((self.n_leaves, frozenset(self.splits.items())))

    def __repr__(self):
        return f"BinaryTree({self.n_leaves}, {sorted(self.splits.items())})"

    def validate(self):
        n = self.n_leaves
        if n >= 2 and (0, n) not in self.splits:
            raise ValueError("tree lacks root span")
        if len(self.splits) != max(n - 1, 0):
            raise ValueError(f"expected {n - 1} internal spans, found {len(self.splits)}")
        for (i, j), k in self.splits.items():
            if not i < k < j:
                raise ValueError(f"bad split {k} for span {(i, j)}")
            for a, b in ((i, k), (k, j)):
                if b - a >= 2 and (a, b) not in self.splits:
                    raise ValueError(f"child span {(a, b)} missing")

    @classmethod
    def from_spans(cls, n, spans):
        """Build from a set of internal spans that forms a full binary bracketing."""
        spans = {s for s in spans if s[1] - s[0] >= 2}
        spans.add((0, n)) if n >= 2 else None
        splits = {}
        for i, j in spans:
            children = [s for s in spans if s != (i, j) and i <= s[0] and s[1] <= j]
            # the split point is the end of the widest child starting at i, or the start of one ending at j
            left = max((s for s in children if s[0] == i), key=lambda s: s[1], default=None)
            right = min((s for s in children if s[1] == j), key=lambda s: s[0], default=None)
            if left is not None:
                k = left[1]
            elif right is not None:
                k = right[0]
            elif j - i == 2:
                k = i + 1
            else:
                raise ValueError(f"span {(i, j)} is not binary-bracketed")
            splits[(i, j)] = k
        tree = cls(n, splits)
        tree.validate()
        return tree

    @classmethod
    def right_branching(cls, n):
        return cls(n, {(i, n): i + 1 for i in range(n - 1)})

    @classmethod
    def left_branching(cls, n):
        return cls(n, {(0, j): j - 1 for j in range(2, n + 1)})

    def to_brackets(self, tokens, label="X"):
        if len(tokens) != self.n_leaves:
            raise ValueError(f"tree has {self.n_leaves} leaves but {len(tokens)} tokens given")

        def walk(i, j):
            if j - i == 1:
                return f"({label} {tokens[i]})"
            k = self.splits[(i, j)]
            return f"({label} {walk(i, k)} {walk(k, j)})"

        return walk(0, self.n_leaves)


# ---------------------------------------------------------------------------
# s-expressions


def _tokenize_sexpr(line):
    out = []
    buf = []
    for ch in line:
        if ch in "()":
            if buf:
                out.append("".join(buf))
                buf = []
            out.append(ch)
        elif ch.isspace():
            if buf:
                out.append("".join(buf))
                buf = []
        else:
            buf.append(ch)
    if buf:
        out.append("".join(buf))
    return out


WRAPPER_LABELS = ("ROOT", "TOP")


def parse_bracketed(line):
    """Parse one s-expression into ``(tokens, pos, labeled spans, root label)``.

    Preterminals ``(TAG word)`` become leaves; an unlabeled outer wrapper
    ``( (S ...) )`` is accepted.
    """
    toks = _tokenize_sexpr(line)
    pos_ref = [0]
    words, tags, spans = [], [], set()
    outer_labels = []  # labels of nodes covering the whole sentence, innermost first

    def node():
        if pos_ref[0] >= len(toks) or toks[pos_ref[0]] != "(":
            raise ValueError("expected '('")
        pos_ref[0] += 1
        label = ""
        if pos_ref[0] < len(toks) and toks[pos_ref[0]] not in "()":
            label = toks[pos_ref[0]]
            pos_ref[0] += 1
        start = len(words)
        children = 0
        while True:
            if pos_ref[0] >= len(toks):
                raise ValueError("unbalanced parentheses")
            t = toks[pos_ref[0]]
            if t == ")":
                pos_ref[0] += 1
                break
            if t == "(":
                node()
                children += 1
            else:
                if children:
                    raise ValueError(f"bare token {t!r} mixed with subtrees")
                words.append(t)
                tags.append(label)
                pos_ref[0] += 1
                # preterminal
                if toks[pos_ref[0]:pos_ref[0] + 1] != [")"]:
                    raise ValueError(f"preterminal {label!r} has more than one word")
                pos_ref[0] += 1
                return
        if children == 0:
            raise ValueError("empty constituent")
        if label:
            spans.add((start, len(words), label))
            if start == 0:
                outer_labels.append((len(words), label))

    node()
    if pos_ref[0] != len(toks):
        raise ValueError("trailing material after tree")
    root = [lab for e, lab in outer_labels if e == len(words) and lab not in WRAPPER_LABELS]
    return words, tags, spans, (root[-1] if root else None)


def load_corpus(path, format="tokens"):
    """Read sentences from ``path``.

    ``format`` is ``"tokens"`` (whitespace separated) or ``"ptb_brackets"``
    (one s-expression per line; ``#`` header lines are ignored). Empty
    lines are skipped with a warning.
    """
    if format not in ("tokens", "ptb_brackets"):
        raise ValueError(f"unknown corpus format {format!r}")
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                logger.warning("%s:%d: empty line skipped", path, lineno)
                continue
            if format == "tokens":
                sentences.append(Sentence(len(sentences), line.split()))
                continue
            if line.startswith("#"):
                continue  # artifact header
            try:
                words, tags, spans, root = parse_bracketed(line)
                n = len(words)
                if (0, n) not in {(s, e) for s, e, _ in spans}:
                    spans.add((0, n, "ROOT"))
                tree = GoldTree(spans, tags, root)
                sentences.append(Sentence(len(sentences), words, tree))
            except ValueError as exc:
                raise CorpusFormatError(path, lineno, str(exc)) from None
    return sentences


def write_corpus(sentences, path, format="tokens"):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sentences:
            if format == "tokens":
                fh.write(" ".join(s.tokens) + "\n")
            else:
                fh.write(gold_to_brackets(s) + "\n")


def gold_to_brackets(sentence):
    """Serialize a sentence's (possibly n-ary) gold tree as an s-expression."""
    tree = sentence.gold_tree
    tags = tree.pos or ["X"] * len(sentence.tokens)
    # outer spans first so that unary chains nest outermost-first
    ordered = sorted(tree.spans, key=lambda s: (s[0], -s[1]))

    def build(start, end, queue):
        parts = []
        i = start
        while i < end:
            if queue and queue[0][0] == i and queue[0][1] <= end:
                s, e, lab = queue.pop(0)
                inner = build(s, e, queue)
                parts.append(f"({lab} {inner})")
                i = e
            else:
                parts.append(f"({tags[i]} {sentence.tokens[i]})")
                i += 1
        return " ".join(parts)

    return build(0, len(sentence.tokens), list(ordered))


# ---------------------------------------------------------------------------
# constraints


@dataclass(frozen=True, order=True)
class SpanConstraint:
    sentence_id: int
    start: int
    end: int
    source: str = field(default="gold_entity", compare=False)

    @property
    def span(self):
        return (self.start, self.end)


def load_constraints(path, sentences=None, source="gold_entity"):
    """Read ``sentence_id<TAB>start<TAB>end`` lines into ``{sentence_id: set of (start, end)}``.

    Invalid lines (start >= end, or out of range when ``sentences`` is given)
    are dropped; the number rejected is logged and stored on the result as
    ``rejected``.
    """
    lengths = {s.id: len(s) for s in sentences} if sentences is not None else None
    grouped = defaultdict(set)
    rejected = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                sid, start, end = (int(p) for p in parts[:3])
            except ValueError:
                raise CorpusFormatError(path, lineno, "expected three integer fields") from None
            bad = start >= end or start < 0
            if lengths is not None and not bad:
                bad = sid not in lengths or end > lengths[sid]
            if bad:
                rejected += 1
                logger.warning("%s:%d: invalid constraint %s", path, lineno, line)
                continue
            grouped[sid].add((start, end))
    if rejected:
        logger.warning("%s: rejected %d constraint line(s)", path, rejected)
    result = ConstraintSet(grouped)
    result.rejected = rejected
    return result


class ConstraintSet(dict):
    """``{sentence_id: set of (start, end)}`` with a rejection counter."""

    rejected = 0

    def count(self):
        return sum(len(v) for v in self.values())


def write_constraints(constraints, path, header=None):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for sid in sorted(constraints):
            for start, end in sorted(constraints[sid]):
                fh.write(f"{sid}\t{start}\t{end}\n")


def load_gazetteer(path):
    """One phrase per line, whitespace separated; returns a list of token tuples."""
    phrases = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            toks = line.split()
            if toks:
                phrases.append(tuple(toks))
    return phrases


# ---------------------------------------------------------------------------
# vocabulary


class Vocab:
    def __init__(self, itos):
        if not itos or itos[0] != UNK:
            raise ValueError("vocabulary must start with the UNK token")
        if len(set(itos)) != len(itos):
            raise ValueError("duplicate vocabulary entries")
        self.itos = list(itos)
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        self.unk_index = 0

    def __len__(self):
        return len(self.itos)

    def __contains__(self, word):
        return word in self.stoi

    def index(self, word):
        return self.stoi.get(word, self.unk_index)

    def encode(self, tokens):
        return [self.stoi.get(w, self.unk_index) for w in tokens]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])

    def digest(self):
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


def build_vocab(sentences, size_cap=10000, min_count=1):
    """Frequency-ranked vocabulary (ties lexicographic) with UNK at index 0."""
    if size_cap < 2:
        raise ValueError("size_cap must be at least 2")
    counts = Counter(w for s in sentences for w in s.tokens)
    ranked = sorted((w for w, c in counts.items() if c >= min_count and w != UNK), key=lambda w: (-counts[w], w))
    return Vocab([UNK] + ranked[: size_cap - 1])


def write_predictions(trees, token_lists, path, header=None):
    """One unlabeled bracketing per line with every nonterminal printed as ``X``."""
    if len(trees) != len(token_lists):
        raise ValueError("number of trees and sentences differ")
    lines = []
    for tree, tokens in zip(trees, token_lists):
        if tree.n_leaves != len(tokens):
            raise ValueError(f"tree over {tree.n_leaves} leaves paired with {len(tokens)} tokens")
        lines.append(tree.to_brackets(tokens))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            if header:
                fh.write(f"# {header}\n")
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    except OSError as exc:
        raise OSError(f"cannot write predictions to {path}: {exc.strerror or exc}") from exc


def load_predictions(path):
    """Read a predictions file back into ``(trees, token lists)``."""
    trees, tokens = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                words, _, spans, _ = parse_bracketed(line)
            except ValueError as exc:
                raise CorpusFormatError(path, lineno, str(exc)) from None
            n = len(words)
            trees.append(BinaryTree.from_spans(n, {(s, e) for s, e, _ in spans}))
            tokens.append(words)
    return trees, tokens
