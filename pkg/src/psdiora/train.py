"""Training loop with length-bucketed Adam updates and validation-F1 model selection.

All randomness comes from ``config.seed``: parameter init uses it directly
and epoch e shuffles with ``default_rng([seed, e])``, so a resumed run sees
exactly the batches an uninterrupted one would.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import chart as chart_mod
from . import decode
from . import diff_core as dc
from . import evaluation
from .corpus_io import Vocab
from .objective import PsSvmVariant, batch_loss

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-3
    batch_size: int = 32
    max_epochs: int = 40
    max_len: int = 40
    dim: int = 32
    variant: str = "Rescale"
    margin: float = 1.0
    ps_weight: float = 1.0
    normalize_rescale: bool = True
    seed: int = 0
    eval_every: int = 0  # steps between evaluations; 0 evaluates once per epoch
    patience: int = 40  # epochs without improvement (evaluations when eval_every > 0)
    clip_norm: float = 5.0
    init_scale: float = 0.1
    val_sample: int = 0  # evaluate on a seeded subset of this size (0 = all)
    punct_policy: str = "auto"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "max_len", "dim", "margin", "clip_norm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1:
            raise ValueError("patience must be positive")
        PsSvmVariant(self.variant, self.margin)

    def as_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        return dc.config_hash(self.as_dict())

    def resume_hash(self):
        """Hash ignoring the stopping rule, so a resumed run may extend max_epochs."""
        d = self.as_dict()
        d.pop("max_epochs")
        d.pop("patience")
        return dc.config_hash(d)

    def ps_variant(self):
        return PsSvmVariant(self.variant, self.margin, self.normalize_rescale)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(t.value) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.value) for n, t in params.items()}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, t in params.items():
            g = grads[name]
            if not np.any(g) and not np.any(self.m[name]):
                continue  # untouched parameter with no history: leave bit-identical
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            t.value = t.value - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state(self):
        arrays = {f"adam_m.{n}": v for n, v in self.m.items()}
        arrays.update({f"adam_v.{n}": v for n, v in self.v.items()})
        return arrays

    def load_state(self, arrays, t):
        self.t = t
        for n in self.m:
            self.m[n] = arrays[f"adam_m.{n}"].copy()
            self.v[n] = arrays[f"adam_v.{n}"].copy()


def clip_grads(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {n: g * scale for n, g in grads.items()}
    return grads, total


def make_batches(items, batch_size, rng):
    """Group equal-length items into batches, shuffled within and across lengths.

    ``items`` is a list of ``(length, payload)``.
    """
    by_len = {}
    for length, payload in items:
        by_len.setdefault(length, []).append(payload)
    batches = []
    for length in sorted(by_len):
        group = by_len[length]
        order = rng.permutation(len(group))
        group = [group[i] for i in order]
        for start in range(0, len(group), batch_size):
            batches.append(group[start:start + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def early_stop_select(history):
    """Index of the best validation F1 (earliest on ties)."""
    if not history:
        raise ValueError("empty metric history")
    best = 0
    for i, v in enumerate(history):
        if v > history[best]:
            best = i
    return best


# ---------------------------------------------------------------------------
# parsing with a trained model


def parse(params, sentences, vocab, constraints=None, batch_size=64, mode="lexicographic", epsilon=1.0):
    """Decode every sentence: CKY, or constrained CKY where ``constraints`` has spans."""
    trees = [None] * len(sentences)
    groups = {}
    for idx, s in enumerate(sentences):
        groups.setdefault(len(s), []).append(idx)
    for n in sorted(groups):
        idxs = groups[n]
        for start in range(0, len(idxs), batch_size):
            chunk = idxs[start:start + batch_size]
            if n == 1:
                for i in chunk:
                    trees[i] = decode.cky({}, n=1)
                continue
            ids = np.array([vocab.encode(sentences[i].tokens) for i in chunk])
            ch = chart_mod.inside_pass(ids, params, max_len=None)
            for b, i in enumerate(chunk):
                local = ch.local_array(b)
                z = constraints.get(sentences[i].id) if constraints else None
                if z:
                    trees[i] = decode.ccky(local, z, mode=mode, epsilon=epsilon, n=n)
                else:
                    trees[i] = decode.cky(local, n=n)
    return trees


def evaluate_model(params, sentences, vocab, policy="auto", constraints=None, decode_constraints=None):
    """Return ``(F1, constraint recall, trees)`` for gold-annotated ``sentences``."""
    trees = parse(params, sentences, vocab, decode_constraints)
    f1 = evaluation.corpus_f1(trees, sentences, policy)
    recall = float("nan")
    if constraints:
        recall = evaluation.span_recall(trees, constraints, [s.id for s in sentences])
    return f1, recall, trees


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dc.ModelParams  # best by validation F1 (last, when no validation data)
    last_params: dc.ModelParams
    history: list = field(default_factory=list)  # one dict per evaluation
    log_lines: list = field(default_factory=list)
    best_index: Optional[int] = None
    status: str = "completed"  # completed | early_stopped | diverged
    epochs_run: int = 0
    seconds: float = 0.0

    @property
    def best_f1(self):
        return None if self.best_index is None else self.history[self.best_index]["val_F1"]


def _fmt_kv(rec):
    parts = []
    for k, v in rec.items():
        parts.append(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}")
    return " ".join(parts)


def checkpoint_meta(config, vocab, extra=None):
    meta = {
        "config": config.as_dict(),
        "config_hash": config.hash(),
        "vocab": vocab.itos,
        "vocab_hash": vocab.digest(),
    }
    meta.update(extra or {})
    return meta


def save_model(path, params, config, vocab, optimizer=None, extra=None):
    arrays = {f"param.{n}": v for n, v in params.arrays().items()}
    extra = dict(extra or {})
    if optimizer is not None:
        arrays.update(optimizer.state())
        extra["adam_t"] = optimizer.t
    dc.save_checkpoint(path, arrays, checkpoint_meta(config, vocab, extra))


def load_model(path):
    """Return ``(params, config, vocab, meta, arrays)`` from a checkpoint."""
    arrays, meta = dc.load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    vocab = Vocab(meta["vocab"])
    params = dc.ModelParams({n: dc.Tensor(arrays[f"param.{n}"]) for n in dc.PARAM_NAMES})
    return params, config, vocab, meta, arrays


def train(
    sentences,
    vocab,
    config,
    constraints=None,
    valid=None,
    valid_constraints=None,
    init_params=None,
    resume=None,
    log_path=None,
    checkpoint_path=None,
):
    """Train on ``sentences`` (longer than ``max_len`` are skipped).

    ``init_params`` starts from given weights with a fresh optimizer (the
    second phase of the two-phase recipe). ``resume`` is a checkpoint path
    holding optimizer state and epoch counter; training continues with the
    next epoch. The best-by-validation model is written to
    ``checkpoint_path``; the final state to ``checkpoint_path + '.last'``.
    """
    t0 = time.perf_counter()
    constraints = constraints or {}
    variant = config.ps_variant()
    start_epoch = 0
    step = 0
    history = []
    best_arrays = None
    best_index = None
    if resume is not None:
        params, _, _, meta, arrays = load_model(resume)
        optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        optimizer.load_state(arrays, meta["adam_t"])
        start_epoch = meta["epoch"]
        step = meta["step"]
        history = meta.get("history", [])
        best_index = meta.get("best_index")
        best_arrays = {n: arrays[f"best.{n}"] for n in dc.PARAM_NAMES} if f"best.{dc.PARAM_NAMES[0]}" in arrays else None
    else:
        if init_params is not None:
            params = init_params.copy()
        else:
            params = dc.ModelParams.init(len(vocab), config.dim, seed=config.seed, scale=config.init_scale)
        optimizer = Adam(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    if params.vocab_size != len(vocab) or params.dim != config.dim:
        raise ValueError("parameter shapes do not match vocabulary/config")

    items = []
    skipped = 0
    for s in sentences:
        if len(s) > config.max_len:
            skipped += 1
            continue
        items.append((len(s), (np.array(vocab.encode(s.tokens)), constraints.get(s.id) or None)))
    if skipped:
        logger.info("skipping %d training sentences longer than %d", skipped, config.max_len)

    fallback = params.arrays()  # restored on divergence before any evaluation
    val = list(valid or [])
    if val and config.val_sample and len(val) > config.val_sample:
        pick = np.random.default_rng([config.seed, 7919]).choice(len(val), config.val_sample, replace=False)
        val = [val[i] for i in sorted(pick)]

    log_lines = list(meta.get("log_lines", [])) if resume is not None else []
    log_fh = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
    status = "completed"
    since_best = 0
    if best_index is not None:
        since_best = len(history) - 1 - best_index
    run_rec, run_ps, run_n = 0.0, 0.0, 0

    def do_eval(epoch):
        nonlocal best_arrays, best_index, since_best, run_rec, run_ps, run_n
        rec = {"epoch": epoch, "step": step, "J_rec": run_rec / max(run_n, 1), "J_PS": run_ps / max(run_n, 1)}
        if val:
            f1, recall, _ = evaluate_model(params, val, vocab, config.punct_policy, valid_constraints)
            rec["val_F1"] = f1
            rec["constraint_recall"] = recall
        else:
            rec["val_F1"] = float("nan")
            rec["constraint_recall"] = float("nan")
        history.append(rec)
        line = _fmt_kv(rec)
        log_lines.append(line)
        logger.info(line)
        if log_fh:
            log_fh.write(line + "\n")
            log_fh.flush()
        f1s = [h["val_F1"] for h in history]
        idx = early_stop_select([-math.inf if math.isnan(v) else v for v in f1s]) if val else len(history) - 1
        if idx != best_index:
            best_index = idx
            best_arrays = params.arrays()
            since_best = 0
            if checkpoint_path:
                save_model(checkpoint_path, params, config, vocab, extra={"epoch": epoch, "step": step, "val_F1": rec["val_F1"]})
        else:
            since_best += 1
        run_rec = run_ps = 0.0
        run_n = 0

    epoch = start_epoch
    try:
        for epoch in range(start_epoch, config.max_epochs):
            rng = np.random.default_rng([config.seed, epoch])
            for batch in make_batches(items, config.batch_size, rng):
                ids = np.stack([b[0] for b in batch])
                z = [b[1] for b in batch]
                params.zero_grad()
                loss, info = batch_loss(ids, z, params, variant, config.ps_weight, config.max_len)
                loss.backward()
                grads, _ = clip_grads(params.grads(), config.clip_norm)
                for g in grads.values():
                    if not np.all(np.isfinite(g)):
                        raise dc.NumericalError("non-finite gradient")
                optimizer.step(params, grads)
                step += 1
                run_rec += info["J_rec"] * len(batch)
                run_ps += info["J_PS"] * info["n_constrained"]
                run_n += len(batch)
                if config.eval_every and step % config.eval_every == 0:
                    do_eval(epoch + 1)
            if not config.eval_every:
                do_eval(epoch + 1)
            if checkpoint_path:
                _save_state(
                    checkpoint_path + ".last", params, optimizer, config, vocab,
                    {"epoch": epoch + 1, "step": step, "history": history, "log_lines": log_lines, "best_index": best_index},
                    best_arrays,
                )
            if since_best >= config.patience:
                status = "early_stopped"
                epoch += 1
                break
        else:
            epoch = config.max_epochs
    except dc.NumericalError as exc:
        logger.error("training diverged at step %d: %s", step, exc)
        status = "diverged"
        params.load_arrays(best_arrays if best_arrays is not None else fallback)
    finally:
        if log_fh:
            log_fh.close()
    last = params.copy()
    best = params.copy()
    if best_arrays is not None:
        best.load_arrays(best_arrays)
    return TrainResult(best, last, history, log_lines, best_index, status, epoch - start_epoch, time.perf_counter() - t0)


def _save_state(path, params, optimizer, config, vocab, progress, best_arrays):
    arrays = {f"param.{n}": v for n, v in params.arrays().items()}
    arrays.update(optimizer.state())
    if best_arrays is not None:
        arrays.update({f"best.{n}": v for n, v in best_arrays.items()})
    meta = checkpoint_meta(config, vocab, dict(progress, adam_t=optimizer.t))
    dc.save_checkpoint(path, arrays, meta)
