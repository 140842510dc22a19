import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_binary_spans, random_nary_spans, reference_f1
from psdiora import evaluation as ev
from psdiora.corpus_io import BinaryTree, GoldTree, Sentence


def gold_sentence(tokens, spans, pos=None, sid=0, root="S"):
    n = len(tokens)
    labeled = {(a, b, "X") for a, b in spans} | {(0, n, root)}
    return Sentence(sid, list(tokens), GoldTree(labeled, pos, root))


def test_identity_scores_100():
    t = BinaryTree.right_branching(5)
    assert ev.sentence_f1(t, t.spans(), 5) == 100.0


def test_half_overlap_scores_50():
    pred = {(0, 2), (2, 5), (0, 5)}
    gold = {(0, 2), (3, 5), (0, 5)}
    assert ev.sentence_f1(pred, gold, 5) == 50.0


def test_two_token_sentence_scores_100():
    assert ev.sentence_f1({(0, 2)}, {(0, 2)}, 2) == 100.0


def test_corpus_mean():
    a = gold_sentence("a b c d".split(), {(0, 2), (2, 4)}, sid=0)
    b = gold_sentence("a b c d".split(), {(0, 2), (2, 4)}, sid=1)
    perfect = BinaryTree.from_spans(4, {(0, 2), (2, 4)})
    half = BinaryTree.from_spans(4, {(0, 3), (0, 2)})
    assert ev.sentence_f1_for(half, b) == 50.0
    assert ev.corpus_f1([perfect, perfect], [a, b]) == 100.0
    assert ev.corpus_f1([perfect, half], [a, b]) == 75.0


def test_length_mismatch_rejected():
    s = gold_sentence("a b c".split(), set())
    with pytest.raises(ValueError):
        ev.sentence_f1_for(BinaryTree.right_branching(4), s)
    with pytest.raises(ValueError):
        ev.sentence_f1({(0, 5)}, {(0, 3)}, 3)


def test_punctuation_removed_with_reindexing():
    tokens = ["a", "b", ",", "c", "d", "."]
    gold = gold_sentence(tokens, {(0, 2), (3, 5)})
    # pred groups (b , c) which becomes (1, 3) over the stripped sentence "a b c d"
    pred = BinaryTree.from_spans(6, {(0, 5), (1, 5), (1, 4), (1, 3)})
    mask = ev.keep_mask(tokens, None, "chars")
    assert mask == [True, True, False, True, True, False]
    got = ev.sentence_f1(pred, gold.gold_tree, 6, mask)
    assert got == pytest.approx(reference_f1(pred.spans(), gold.gold_tree.unlabeled(), tokens), abs=1e-12)


def test_pos_policy_uses_tags():
    tokens = ["a", "--", "b", "c"]
    pos = ["DT", ":", "NN", "NN"]
    assert ev.keep_mask(tokens, pos, "pos") == [True, False, True, True]
    assert ev.keep_mask(tokens, pos, "none") == [True] * 4
    with pytest.raises(ValueError):
        ev.keep_mask(tokens, None, "pos")


def _random_pair(rng):
    n = int(rng.integers(2, 15))
    vocab = ["w", "x", "y", ",", "."]
    tokens = [f"{vocab[i]}{p}" if vocab[i] not in ",." else vocab[i] for p, i in enumerate(rng.integers(0, 5, size=n))]
    gold = random_nary_spans(rng, 0, n)
    pred = random_binary_spans(rng, 0, n)
    return tokens, gold, pred


def test_agrees_with_reference_on_random_pairs():
    rng = np.random.default_rng(2024)
    sents, preds, refs = [], [], []
    for sid in range(200):
        tokens, gold, pred = _random_pair(rng)
        s = gold_sentence(tokens, gold - {(0, len(tokens))}, sid=sid)
        tree = BinaryTree.from_spans(len(tokens), pred)
        ref = reference_f1(pred, gold, tokens)
        assert ev.sentence_f1_for(tree, s, "chars") == pytest.approx(ref, abs=1e-9)
        sents.append(s)
        preds.append(tree)
        refs.append(ref)
    assert ev.corpus_f1(preds, sents, "chars") == pytest.approx(sum(refs) / len(refs), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_f1_bounds_and_equality(seed):
    rng = np.random.default_rng(seed)
    tokens, gold, pred = _random_pair(rng)
    n = len(tokens)
    mask = ev.keep_mask(tokens, None, "chars")
    f = ev.sentence_f1(pred, gold, n, mask)
    assert 0.0 <= f <= 100.0
    g_set, m = ev.remap_spans(gold, mask)
    p_set, _ = ev.remap_spans(pred, mask)
    if ev.nontrivial(g_set, m):
        assert (f == 100.0) == (ev.nontrivial(p_set, m) == ev.nontrivial(g_set, m))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_punctuation_removal_commutes_with_stripping(seed):
    rng = np.random.default_rng(seed)
    tokens, gold, pred = _random_pair(rng)
    mask = ev.keep_mask(tokens, None, "chars")
    if sum(mask) == 0:
        return
    full = ev.sentence_f1(pred, gold, len(tokens), mask)
    g2, m = ev.remap_spans(gold, mask)
    p2, _ = ev.remap_spans(pred, mask)
    assert ev.sentence_f1(p2, g2, m) == pytest.approx(full, abs=1e-12)


def test_span_recall_examples():
    t = BinaryTree.from_spans(4, {(0, 2), (2, 4)})
    assert ev.span_recall([t], {0: {(0, 2), (2, 4)}}) == 100.0
    assert ev.span_recall([t], {0: {(1, 3)}}) == 0.0
    u = BinaryTree.from_spans(6, {(0, 2), (2, 6), (2, 4), (4, 6)})
    assert ev.span_recall([u], {0: {(0, 2), (2, 4), (2, 6), (1, 3), (5, 6)}}) == 75.0
    assert np.isnan(ev.span_recall([t], {}))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_span_recall_monotone_in_predicted_spans(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 10))
    pred = random_binary_spans(rng, 0, n)
    extra = pred | random_binary_spans(rng, 0, n)
    starts = rng.integers(0, n - 1, size=4)
    z = {0: {(int(a), int(rng.integers(a + 2, n + 1))) for a in starts}}
    assert ev.span_recall([extra], z) >= ev.span_recall([pred], z)


def test_bucket_report():
    a = gold_sentence("a b c d".split(), {(0, 2)}, sid=0, root="S")
    b = gold_sentence("a b c d".split(), {(2, 4)}, sid=1, root="NP")
    c = gold_sentence("a b c d".split(), {(0, 2)}, sid=2, root="S")
    preds = [BinaryTree.left_branching(4), BinaryTree.right_branching(4), BinaryTree.right_branching(4)]
    rep = ev.bucket_report(preds, [a, b, c], {0: {(0, 2)}})
    assert rep["S"]["n"] == 2 and rep["S"]["n_z"] == 1 and rep["S"]["R_z"] == 100.0
    assert rep["S"]["F1"] == ev.corpus_f1([preds[0], preds[2]], [a, c])
    assert rep["NP"]["R_z"] is None
    only = ev.bucket_report(preds[:1], [a])
    assert list(only) == ["S"] and only["S"]["n"] == 1
    assert "∅" in ev.format_report([{"label": k, **v} for k, v in rep.items()])


def test_binarized_upper_bound_examples():
    binary = gold_sentence("a b c d".split(), {(0, 2), (2, 4)})
    assert ev.binarized_upper_bound([binary]) == 100.0
    flat = gold_sentence("a b c d".split(), set())
    tree = ev.binarize(flat.gold_tree, 4)
    assert tree.spans() == {(0, 4), (1, 4), (2, 4)}
    assert ev.binarized_upper_bound([flat]) == 100.0
    ternary = gold_sentence("a b c d".split(), {(0, 2)})
    tree = ev.binarize(ternary.gold_tree, 4)
    assert tree.spans() - {(0, 4)} == {(0, 2), (2, 4)}
    assert ev.binarized_upper_bound([ternary]) == 200.0 / 3
    left = ev.binarize(flat.gold_tree, 4, "left")
    assert left == BinaryTree.left_branching(4)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_binarization_keeps_all_gold_spans(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    gold = random_nary_spans(rng, 0, n)
    s = gold_sentence([f"w{i}" for i in range(n)], gold - {(0, n)})
    tree = ev.binarize(s.gold_tree, n)
    assert {g for g in gold if g[1] - g[0] >= 2} <= tree.spans()
    assert ev.sentence_f1_for(tree, s, "none") == pytest.approx(reference_f1(tree.spans(), gold, [f"w{i}" for i in range(n)]), abs=1e-12)
