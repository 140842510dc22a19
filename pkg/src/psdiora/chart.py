"""Inside-outside chart encoder.

A batch holds B sentences of the same length n. Cells of width w are stored
together as tensors of shape (B, n - w + 1, ...), position i holding span
(i, i + w). Split offsets o = k - i run over 1..w-1.

Inside, for every span of width >= 2 and split k::

    h(i,j,k) = compose(h(i,k), h(k,j))
    s(i,j,k) = score(h(i,k), h(k,j)) + s(i,k) + s(k,j)
    a(i,j,.) = softmax_k s(i,j,.)
    h(i,j)   = sum_k a(i,j,k) h(i,j,k)      s(i,j) = sum_k a(i,j,k) s(i,j,k)

Outside, span (i,j) collects one contribution per parent: parent (i,m) with
right sibling (j,m), and parent (m,j) with left sibling (m,i); each is
compose(h_in(sibling), h_out(parent)) scored by
score(h_in(sibling), h_out(parent)) + s_in(sibling) + s_out(parent), and the
contributions are mixed by a softmax over the parents.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import diff_core as dc

DEFAULT_MAX_LEN = 40


class SentenceTooLong(ValueError):
    pass


def n_cells(n):
    return n * (n + 1) // 2


def n_split_entries(n):
    return sum((n - w + 1) * (w - 1) for w in range(2, n + 1))


@lru_cache(maxsize=None)
def _layout(n):
    """Index tables for sentences of length n."""
    in_off = {}
    off = 0
    for w in range(1, n + 1):
        in_off[w] = off
        off += n - w + 1
    out_off = {}
    off = 0
    for w in range(n, 0, -1):
        out_off[w] = off
        off += n - w + 1

    inside = {}
    for w in range(2, n + 1):
        P = n - w + 1
        i = np.arange(P)[:, None]
        o = np.arange(1, w)[None, :]
        left = np.array([in_off[oo] for oo in range(1, w)])[None, :] + i
        right = np.array([in_off[w - oo] for oo in range(1, w)])[None, :] + i + o
        inside[w] = (left, right)

    # every span of width w has exactly n - w parents, so rows need no padding
    outside = {}
    for w in range(n - 1, 0, -1):
        P = n - w + 1
        sib = np.zeros((P, n - w), dtype=np.int64)
        par = np.zeros((P, n - w), dtype=np.int64)
        for i in range(P):
            j = i + w
            c = 0
            for u in range(1, n - j + 1):
                # parent (i, j+u), right sibling (j, j+u)
                sib[i, c] = in_off[u] + j
                par[i, c] = out_off[w + u] + i
                c += 1
            for u in range(1, i + 1):
                # parent (i-u, j), left sibling (i-u, i)
                sib[i, c] = in_off[u] + i - u
                par[i, c] = out_off[w + u] + i - u
                c += 1
        outside[w] = (sib, par)

    # flat index of split entry (i, j, k) within the concatenated local-score vector
    split_off = {}
    off = 0
    for w in range(2, n + 1):
        split_off[w] = off
        off += (n - w + 1) * (w - 1)
    return in_off, out_off, inside, outside, split_off


def split_index(n, i, j, k):
    """Position of split (i, j, k) in ``Chart.flat_local``."""
    w = j - i
    split_off = _layout(n)[4]
    return split_off[w] + i * (w - 1) + (k - i - 1)


@dataclass
class Chart:
    """Inside/outside values for a batch of equal-length sentences.

    ``local[w]`` (B, P, w-1) holds the raw compatibility score of each split,
    ``split_scores[w]`` the full s(i,j,k), ``weights[w]`` a(i,j,k); inside and
    outside vectors/scores are indexed by width.
    """

    n: int
    batch: int
    h_in: dict = field(default_factory=dict)
    s_in: dict = field(default_factory=dict)
    local: dict = field(default_factory=dict)
    split_scores: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    h_out: dict = field(default_factory=dict)
    s_out: dict = field(default_factory=dict)
    out_weights: dict = field(default_factory=dict)
    out_scores: dict = field(default_factory=dict)
    h_in_all: object = None
    s_in_all: object = None
    _flat_local: object = None

    @property
    def flat_local(self):
        """All local split scores of the batch, shape (B, total splits)."""
        if self._flat_local is None:
            parts = [dc.Tensor(np.zeros((self.batch, 0)))]
            parts += [_reshape(self.local[w], (self.batch, -1)) for w in range(2, self.n + 1)]
            self._flat_local = dc.concat(parts, axis=1)
        return self._flat_local

    def local_array(self, b):
        """Local scores of sentence b as ``{(i, j): array over k = i+1..j-1}``."""
        out = {}
        for w in range(2, self.n + 1):
            for i, row in enumerate(self.local[w].value[b].tolist()):
                out[(i, i + w)] = row
        return out

    def inside_vector(self, b, i, j):
        return self.h_in[j - i].value[b, i]

    def inside_score(self, b, i, j):
        return float(self.s_in[j - i].value[b, i])

    def outside_vector(self, b, i, j):
        return self.h_out[j - i].value[b, i]

    def outside_score(self, b, i, j):
        return float(self.s_out[j - i].value[b, i])

    def split_weights(self, b, i, j):
        return self.weights[j - i].value[b, i]

    def dump(self, b=0):
        """Plain-dict view of one sentence's chart for inspection."""
        cells = {}
        for w in range(1, self.n + 1):
            for i in range(self.n - w + 1):
                cell = {"s_in": self.inside_score(b, i, i + w)}
                if w in self.s_out:
                    cell["s_out"] = self.outside_score(b, i, i + w)
                if w >= 2:
                    cell["a"] = self.split_weights(b, i, i + w).tolist()
                    cell["local"] = self.local[w].value[b, i].tolist()
                cells[f"{i},{i + w}"] = cell
        return {"n": self.n, "cells": cells}


def _reshape(t, shape):
    src = t.value.shape
    return dc.Tensor(t.value.reshape(shape), parents=(t,), backward=lambda g: (g.reshape(src),), op="reshape")


def _batch_ids(token_ids):
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    return ids


def inside_pass(token_ids, params, max_len=DEFAULT_MAX_LEN):
    """Fill the inside half of the chart for a (B, n) array of token ids."""
    ids = _batch_ids(token_ids)
    B, n = ids.shape
    if n < 1:
        raise ValueError("empty sentence")
    if max_len is not None and n > max_len:
        raise SentenceTooLong(f"sentence length {n} exceeds max_len={max_len}")
    in_off, _, inside, _, _ = _layout(n)
    chart = Chart(n, B)
    chart.h_in[1] = dc.take(params["embed"], ids, axis=0)
    chart.s_in[1] = dc.Tensor(np.zeros((B, n)))
    h_cat = chart.h_in[1]
    s_cat = chart.s_in[1]
    for w in range(2, n + 1):
        left_idx, right_idx = inside[w]
        L = dc.take(h_cat, left_idx, axis=1)  # (B, P, w-1, D)
        R = dc.take(h_cat, right_idx, axis=1)
        local = dc.score(L, R, params)
        s = local + dc.take(s_cat, left_idx, axis=1) + dc.take(s_cat, right_idx, axis=1)
        a = dc.softmax(s, axis=-1)
        hk = dc.compose(L, R, params)
        h = dc.weighted_sum(a, hk)
        sc = dc.tsum(dc.mul(a, s), axis=2)
        chart.local[w], chart.split_scores[w], chart.weights[w] = local, s, a
        chart.h_in[w], chart.s_in[w] = h, sc
        h_cat = dc.concat([h_cat, h], axis=1)
        s_cat = dc.concat([s_cat, sc], axis=1)
    chart.h_in_all, chart.s_in_all = h_cat, s_cat
    return chart


def outside_pass(chart, params):
    """Complete ``chart`` with outside vectors/scores; returns the same chart."""
    n, B = chart.n, chart.batch
    _, _, _, outside, _ = _layout(n)
    D = params.dim
    chart.h_out[n] = dc.broadcast_to(params["root"], (B, 1, D))
    chart.s_out[n] = dc.Tensor(np.zeros((B, 1)))
    o_cat, so_cat = chart.h_out[n], chart.s_out[n]
    for w in range(n - 1, 0, -1):
        sib_idx, par_idx = outside[w]
        sib = dc.take(chart.h_in_all, sib_idx, axis=1)  # (B, P, C, D)
        par = dc.take(o_cat, par_idx, axis=1)
        sc = (
            dc.score(sib, par, params)
            + dc.take(chart.s_in_all, sib_idx, axis=1)
            + dc.take(so_cat, par_idx, axis=1)
        )
        a = dc.softmax(sc, axis=-1)
        hk = dc.compose(sib, par, params)
        h = dc.weighted_sum(a, hk)
        s = dc.tsum(dc.mul(a, sc), axis=2)
        chart.out_weights[w], chart.out_scores[w] = a, sc
        chart.h_out[w], chart.s_out[w] = h, s
        o_cat = dc.concat([o_cat, h], axis=1)
        so_cat = dc.concat([so_cat, s], axis=1)
    return chart


def encode(token_ids, params, max_len=DEFAULT_MAX_LEN):
    """Inside then outside pass."""
    return outside_pass(inside_pass(token_ids, params, max_len), params)
