"""Unlabeled parsing F1 and constraint span recall, with per-label breakdowns.

F1 is computed per sentence and averaged. Before scoring, punctuation
tokens are removed from both trees (spans re-indexed over the remaining
tokens) and trivial spans, width 1 and the whole sentence, are dropped.
A sentence whose gold tree has no non-trivial span scores 100.
"""
from __future__ import annotations

import unicodedata
from collections import defaultdict

from .corpus_io import BinaryTree, GoldTree

PUNCT_TAGS = frozenset({",", ".", ":", "``", "''", "-LRB-", "-RRB-", "-NONE-", "#", "$", "PUNCT", "PU"})
PUNCT_POLICIES = ("auto", "pos", "chars", "none")


def is_punct_token(token):
    return all(unicodedata.category(ch).startswith("P") for ch in token)


def keep_mask(tokens, pos=None, policy="auto"):
    """Which tokens survive punctuation removal."""
    if policy not in PUNCT_POLICIES:
        raise ValueError(f"unknown punctuation policy {policy!r}")
    if policy == "none":
        return [True] * len(tokens)
    if policy == "auto":
        policy = "pos" if pos is not None else "chars"
    if policy == "pos":
        if pos is None:
            raise ValueError("punctuation policy 'pos' needs POS tags")
        return [t not in PUNCT_TAGS for t in pos]
    return [not is_punct_token(t) for t in tokens]


def resolved_policy(sentences, policy="auto"):
    if policy != "auto":
        return policy
    has_pos = all(s.gold_tree is not None and s.gold_tree.pos for s in sentences) and len(sentences) > 0
    return "pos" if has_pos else "chars"


def remap_spans(spans, mask):
    """Project spans onto the tokens kept by ``mask``; empty projections vanish."""
    before = [0]
    for m in mask:
        before.append(before[-1] + (1 if m else 0))
    out = set()
    for a, b in spans:
        na, nb = before[a], before[b]
        if nb > na:
            out.add((na, nb))
    return out, before[-1]


def nontrivial(spans, n):
    return {(a, b) for a, b in spans if b - a >= 2 and (a, b) != (0, n)}


def _as_spans(x):
    if isinstance(x, BinaryTree):
        return x.spans()
    if isinstance(x, GoldTree):
        return x.unlabeled()
    return {tuple(s[:2]) for s in x}


def f1_from_sets(pred, gold):
    if not gold:
        return 100.0
    overlap = len(pred & gold)
    if overlap == 0:
        return 0.0
    p = overlap / len(pred)
    r = overlap / len(gold)
    return 100.0 * 2 * p * r / (p + r)


def sentence_f1(pred, gold, n, mask=None):
    """F1 in [0, 100] between predicted and gold span sets over n tokens.

    ``pred``/``gold`` may be BinaryTree, GoldTree or iterables of spans.
    ``mask`` marks the tokens kept after punctuation removal.
    """
    ps, gs = _as_spans(pred), _as_spans(gold)
    for a, b in ps | gs:
        if not 0 <= a < b <= n:
            raise ValueError(f"span {(a, b)} outside sentence of length {n}")
    if mask is not None:
        if len(mask) != n:
            raise ValueError("punctuation mask length differs from sentence length")
        ps, m = remap_spans(ps, mask)
        gs, _ = remap_spans(gs, mask)
    else:
        m = n
    return f1_from_sets(nontrivial(ps, m), nontrivial(gs, m))


def sentence_f1_for(pred, sentence, policy="auto"):
    n = len(sentence)
    if isinstance(pred, BinaryTree) and pred.n_leaves != n:
        raise ValueError(f"prediction over {pred.n_leaves} tokens for a sentence of {n}")
    pos = sentence.gold_tree.pos if sentence.gold_tree is not None else None
    mask = keep_mask(sentence.tokens, pos or None, policy)
    return sentence_f1(pred, sentence.gold_tree, n, mask)


def corpus_f1(preds, sentences, policy="auto"):
    """Mean sentence-level F1 over sentences that carry gold trees."""
    if len(preds) != len(sentences):
        raise ValueError("number of predictions and sentences differ")
    scores = [sentence_f1_for(p, s, policy) for p, s in zip(preds, sentences) if s.gold_tree is not None]
    return sum(scores) / len(scores) if scores else float("nan")


def span_recall(preds, spans_by_sentence, sentence_ids=None):
    """Percent of reference spans (width >= 2) present in the predicted trees.

    ``preds`` aligns with ``sentence_ids`` (defaults to 0..len-1);
    ``spans_by_sentence`` maps sentence id to a span set. Returns NaN when
    there are no reference spans.
    """
    ids = sentence_ids if sentence_ids is not None else range(len(preds))
    hit = total = 0
    for sid, tree in zip(ids, preds):
        own = _as_spans(tree)
        for a, b in spans_by_sentence.get(sid, ()):
            if b - a < 2:
                continue
            total += 1
            hit += (a, b) in own
    return 100.0 * hit / total if total else float("nan")


def bucket_report(preds, sentences, constraints=None, policy="auto"):
    """Group sentences by the gold tree's top-most label.

    Returns ``{label: {"n", "n_z", "F1", "R_z"}}`` with ``R_z`` None for
    buckets without constraints.
    """
    constraints = constraints or {}
    groups = defaultdict(list)
    for p, s in zip(preds, sentences):
        if s.gold_tree is None:
            continue
        groups[s.gold_tree.root_label or "ROOT"].append((p, s))
    out = {}
    for label in sorted(groups, key=lambda lab: (-len(groups[lab]), lab)):
        items = groups[label]
        ps = [p for p, _ in items]
        ss = [s for _, s in items]
        n_z = sum(len([z for z in constraints.get(s.id, ()) if z[1] - z[0] >= 2]) for s in ss)
        out[label] = {
            "n": len(items),
            "n_z": n_z,
            "F1": corpus_f1(ps, ss, policy),
            "R_z": span_recall(ps, constraints, [s.id for s in ss]) if n_z else None,
        }
    return out


def gold_children(spans, i, j):
    """Immediate children of span (i, j) in a nested span set, with width-1 gaps filled."""
    inner = sorted({s for s in spans if s != (i, j) and i <= s[0] and s[1] <= j}, key=lambda s: (s[0], -s[1]))
    children = []
    pos = i
    for a, b in inner:
        if a < pos:
            continue  # nested inside an earlier child
        while pos < a:
            children.append((pos, pos + 1))
            pos += 1
        children.append((a, b))
        pos = b
    while pos < j:
        children.append((pos, pos + 1))
        pos += 1
    return children


def binarize(gold, n, direction="right"):
    """Binary tree containing every gold span, n-ary nodes split right- or left-branching."""
    spans = {s for s in _as_spans(gold) if s[1] - s[0] >= 1}
    spans.add((0, n))
    splits = {}

    def visit(i, j):
        if j - i < 2:
            return
        kids = gold_children(spans, i, j)
        if len(kids) == 1:  # unary over a leaf cannot happen for width >= 2
            raise ValueError(f"span {(i, j)} has a single child")
        if direction == "right":
            for c in range(len(kids) - 1):
                splits[(kids[c][0], j)] = kids[c][1]
        elif direction == "left":
            for c in range(len(kids) - 1, 0, -1):
                splits[(i, kids[c][1])] = kids[c][0]
        else:
            raise ValueError(f"unknown binarization direction {direction!r}")
        for a, b in kids:
            visit(a, b)

    visit(0, n)
    tree = BinaryTree(n, splits)
    tree.validate()
    return tree


def binarized_upper_bound(sentences, policy="auto", direction="right"):
    golds = [s for s in sentences if s.gold_tree is not None]
    preds = [binarize(s.gold_tree, len(s), direction) for s in golds]
    return corpus_f1(preds, golds, policy)


def format_report(rows, title=None):
    """Aligned text table from a list of dicts sharing keys."""
    if not rows:
        return title or ""
    keys = list(rows[0])
    cells = [[_fmt(r.get(k)) for k in keys] for r in rows]
    widths = [max(len(k), *(len(c[i]) for c in cells)) for i, k in enumerate(keys)]
    lines = [title] if title else []
    lines.append("  ".join(k.ljust(w) for k, w in zip(keys, widths)))
    lines += ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in cells]
    return "\n".join(lines)


def _fmt(v):
    if v is None:
        return "∅"
    if isinstance(v, float):
        return f"{v:.1f}"
    return str(v)


def write_kv(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in values.items():
            fh.write(f"{k}={_fmt(v) if v is None else v}\n")
