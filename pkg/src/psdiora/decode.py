"""Tree extraction from a chart's local split scores.

A tree's score is the sum over its internal nodes (i, j, k) of the local
compatibility score ``score(h_in(i,k), h_in(k,j))``. All decoders break
exact ties towards the smallest split point k.

Local scores are passed as ``{(i, j): sequence over k = i+1..j-1}``
(see :meth:`Chart.local_array`).
"""
from __future__ import annotations

from functools import lru_cache

from .corpus_io import BinaryTree

MAX_ENUMERATE = 12


def tree_score(tree, local):
    """Sum of local split scores over the tree's internal nodes."""
    total = 0.0
    for (i, j), k in sorted(tree.splits.items()):
        try:
            total += float(local[(i, j)][k - i - 1])
        except KeyError:
            raise ValueError(f"tree span {(i, j)} not in chart") from None
    return total


def _n_from_local(local):
    if not local:
        return None
    return max(j for _, j in local)


def _decode(n, local, bonus=None, sign=1, epsilon=None):
    """CKY over local scores with an optional per-span bonus count.

    Without ``bonus`` the objective is the tree score. With ``bonus`` (a
    function of (i, j) returning an int) and ``epsilon`` None, trees are
    compared lexicographically on (sign * total bonus, score); with a finite
    ``epsilon`` the objective is score + epsilon * total bonus.
    """
    if n <= 1:
        return BinaryTree(n, {})
    lexi = bonus is not None and epsilon is None
    best_s = {}
    best_g = {}
    back = {}
    for i in range(n):
        best_s[(i, i + 1)] = 0.0
        best_g[(i, i + 1)] = 0
    for w in range(2, n + 1):
        for i in range(n - w + 1):
            j = i + w
            row = local[(i, j)]
            if hasattr(row, "tolist"):
                row = row.tolist()
            g0 = 0
            if bonus is not None:
                g0 = sign * bonus(i, j)
            top_g = top_s = None
            arg = None
            for k in range(i + 1, j):
                s = row[k - i - 1] + best_s[(i, k)] + best_s[(k, j)]
                if lexi:
                    g = g0 + best_g[(i, k)] + best_g[(k, j)]
                    if arg is None or g > top_g or (g == top_g and s > top_s):
                        top_g, top_s, arg = g, s, k
                elif arg is None or s > top_s:
                    top_s, arg = s, k
            if epsilon is not None:
                top_s += epsilon * g0  # constant over k, so added after the argmax
            best_s[(i, j)] = top_s
            best_g[(i, j)] = top_g
            back[(i, j)] = arg
    splits = {}
    stack = [(0, n)]
    while stack:
        i, j = stack.pop()
        if j - i < 2:
            continue
        k = back[(i, j)]
        splits[(i, j)] = k
        stack.extend(((i, k), (k, j)))
    return BinaryTree(n, splits)


def cky(local, n=None):
    """Highest-scoring binary tree under the local scores."""
    n = n if n is not None else _n_from_local(local) or 1
    return _decode(n, local)


def ccky(local, constraints, mode="lexicographic", epsilon=1.0, n=None, extra=None):
    """Constrained CKY.

    ``lexicographic`` maximizes the number of satisfied constraints first and
    the tree score second; ``epsilon`` maximizes ``score + epsilon * g``.
    ``extra`` is an optional second span set whose members earn the same
    bonus (used for the min-difference positive tree).
    """
    n = n if n is not None else _n_from_local(local) or 1
    z = set(constraints)
    bonus_sets = [z] + ([set(extra)] if extra is not None else [])

    def bonus(i, j):
        return sum(1 for s in bonus_sets if (i, j) in s)

    if mode == "lexicographic":
        return _decode(n, local, bonus)
    if mode == "epsilon":
        return _decode(n, local, bonus, epsilon=epsilon)
    raise ValueError(f"unknown ccky mode {mode!r}")


def ccky_avoid(local, constraints, n=None):
    """Loss-augmented tree: fewest satisfied constraints first, then highest score."""
    n = n if n is not None else _n_from_local(local) or 1
    z = set(constraints)
    return _decode(n, local, lambda i, j: (i, j) in z, sign=-1)


def satisfaction_count(tree, spans):
    """Number of spans present in the tree; width-1 spans are always present."""
    own = tree.spans()
    return sum(1 for s in spans if s[1] - s[0] == 1 or tuple(s[:2]) in own)


@lru_cache(maxsize=None)
def _enumerate_splits(i, j):
    if j - i == 1:
        return ({},)
    out = []
    for k in range(i + 1, j):
        for left in _enumerate_splits(i, k):
            for right in _enumerate_splits(k, j):
                d = {(i, j): k}
                d.update(left)
                d.update(right)
                out.append(d)
    return tuple(out)


def enumerate_trees(n):
    """All Catalan(n-1) binary trees over n leaves."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > MAX_ENUMERATE:
        raise ValueError(f"refusing to enumerate trees over {n} > {MAX_ENUMERATE} leaves")
    return [BinaryTree(n, d) for d in _enumerate_splits(0, n)]
