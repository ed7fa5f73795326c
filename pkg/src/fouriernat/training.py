"""Objectives, Adam with warmup / inverse-square-root decay, the training loop, distillation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, Batch, Example, make_batches, strip_eos
from .decoding import ar_greedy_batch, decode_batch
from .metrics import bleu
from .model import ARTransformer, FourierNAT, Seq2Seq, VocabularyError, save_checkpoint
from .tensor import ConfigError, Parameter, Rng

log = logging.getLogger(__name__)

CURVE_HEADER = ["step", "train_loss", "val_metric", "wall_clock_s"]


class NumericalAbort(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-9
    warmup_steps: int = 400
    max_steps: int = 3000
    tokens_per_batch: int = 1024
    dropout: float = 0.1
    length_loss_weight: float = 0.1
    label_smoothing: float = 0.0
    seed: int = 0
    lr_scale: float = 1.0
    clip_norm: float = 1.0
    eval_interval: int = 250
    val_size: int = 200
    # fraction of training examples whose draft reveals a random subset of
    # gold tokens, so the decoder learns the refinement input distribution
    refine_mix: float = 0.25
    record_time: bool = False

    def validate(self):
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if not 0 <= self.refine_mix <= 1:
            raise ConfigError("refine_mix must be in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class LossReport:
    total: float
    token_ce: float
    length_ce: float
    tokens_counted: int


def nat_loss(logits, gold_ids, pad_mask, label_smoothing=0.0):
    """Summed token cross-entropy over un-padded positions (padded rows contribute 0)."""
    logits = T.as_tensor(logits)
    gold = np.asarray(gold_ids, dtype=np.int64)
    pad = np.asarray(pad_mask, dtype=bool)
    V = logits.shape[-1]
    if gold.shape[-1] > logits.shape[-2]:
        raise ValueError(f"gold length {gold.shape[-1]} exceeds decoder length {logits.shape[-2]}")
    if gold.size and gold[~pad].size and (gold[~pad].max() >= V):
        raise VocabularyError(f"gold id out of range for vocab {V}")
    if gold.shape[-1] < logits.shape[-2]:
        extra = logits.shape[-2] - gold.shape[-1]
        widths = [(0, 0)] * (gold.ndim - 1) + [(0, extra)]
        gold = np.pad(gold, widths, constant_values=PAD)
        pad = np.pad(pad, widths, constant_values=True)
    # padded positions: target 0 with weight 0, so their logits are never read
    safe = np.where(pad, 0, gold)
    return T.cross_entropy(logits, safe, (~pad).astype(logits.dtype), label_smoothing)


def lr_at(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    if step < 1:
        raise ValueError("learning-rate schedule is defined for step >= 1")
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


def adam_step(params, optim: OptimState, lr: float, beta1=0.9, beta2=0.98, eps=1e-9) -> OptimState:
    """Bias-corrected Adam update in place. Aborts before touching anything on a non-finite grad."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalAbort(f"non-finite gradient in parameter {p.name}")
    optim.step += 1
    t = optim.step
    for p in params:
        m = optim.m.get(p.name)
        if m is None:
            m = optim.m[p.name] = np.zeros_like(p.data)
            optim.v[p.name] = np.zeros_like(p.data)
        v = optim.v[p.name]
        m *= beta1
        m += (1 - beta1) * p.grad
        v *= beta2
        v += (1 - beta2) * p.grad * p.grad
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return optim


# ---------------------------------------------------------------------------
# per-architecture objectives


def _reveal_mask(batch: Batch, t_max, frac, rng: Rng):
    """CMLM-style draft: True = position is MASKed. Rows not drawn stay fully masked."""
    B = len(batch)
    masked = np.ones((B, t_max), dtype=bool)
    rows = rng.uniform(B) < frac
    for i in np.flatnonzero(rows):
        n = int(batch.gold_lengths[i]) - 1
        if n < 2:
            continue
        k = int(rng.integers(1, n))  # number left masked, at least one
        hide = rng.permutation(n)[:k]
        masked[i, :n] = False
        masked[i, hide] = True
    return masked


def nat_objective(model: FourierNAT, batch: Batch, tc: TrainConfig, training: bool, rng: Rng,
                  mix_rng: Rng | None = None):
    enc = model.encode(batch.src_ids, training, rng)
    tokens = masked = None
    if training and tc.refine_mix > 0 and mix_rng is not None:
        masked = _reveal_mask(batch, model.config.t_max, tc.refine_mix, mix_rng)
        if not masked.all():
            tokens = batch.tgt_ids
        else:
            masked = None
    trace = model.decode_parallel(enc, tokens, masked, training, rng)
    n_tok = int((~batch.tgt_pad_mask).sum())
    tok = nat_loss(trace.logits, batch.tgt_ids, batch.tgt_pad_mask, tc.label_smoothing)
    # length classes: content length L -> index L-1
    len_target = np.clip(batch.content_lengths - 1, 0, model.config.t_max - 1)
    length = T.cross_entropy(model.length_logits(enc), len_target, 1.0)
    total = tok * (1.0 / n_tok) + length * (tc.length_loss_weight / len(batch))
    return total, LossReport(float(total.data), float(tok.data) / n_tok, float(length.data) / len(batch), n_tok)


def ar_objective(model: ARTransformer, batch: Batch, tc: TrainConfig, training: bool, rng: Rng,
                 mix_rng: Rng | None = None):
    enc = model.encode(batch.src_ids, training, rng)
    B, t_max = batch.tgt_ids.shape
    inp = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), batch.tgt_ids[:, :-1]], axis=1)
    logits = model.decode_teacher(enc, inp, training, rng)
    n_tok = int((~batch.tgt_pad_mask).sum())
    tok = nat_loss(logits, batch.tgt_ids, batch.tgt_pad_mask, tc.label_smoothing)
    total = tok * (1.0 / n_tok)
    return total, LossReport(float(total.data), float(tok.data) / n_tok, 0.0, n_tok)


def objective_for(model):
    return ar_objective if isinstance(model, ARTransformer) else nat_objective


# ---------------------------------------------------------------------------
# decoding-based validation


def decode_corpus(model: Seq2Seq, srcs, batch_size=64) -> list[list[int]]:
    out = []
    for i in range(0, len(srcs), batch_size):
        chunk = srcs[i:i + batch_size]
        if isinstance(model, ARTransformer):
            seqs, _ = ar_greedy_batch(model, chunk)
            out.extend(strip_eos(s) for s in seqs)
        else:
            out.extend(r.tokens for r in decode_batch(model, chunk))
    return out


def validation_bleu(model: Seq2Seq, examples) -> float:
    hyps = decode_corpus(model, [ex.src for ex in examples])
    return bleu(hyps, [strip_eos(ex.tgt) for ex in examples])


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    records: list = field(default_factory=list)
    steps: int = 0
    best_val: float = float("-inf")
    gate_grad_norm_total: float = 0.0
    optim: OptimState | None = None


def _fmt(x: float) -> str:
    return repr(float(x))


def train_loop(model: Seq2Seq, train: list[Example], tc: TrainConfig, val: list[Example] | None = None,
               out_dir=None, on_record=None) -> TrainResult:
    """Run ``tc.max_steps`` optimizer steps; deterministic for a given seed.

    Emits a curve record at step 0, every ``eval_interval`` steps and at the
    final step.  With ``out_dir`` set, ``curves.csv``, ``last.fnat`` and
    ``best.fnat`` are written there.
    """
    tc.validate()
    if not train:
        raise ValueError("training set is empty")
    model.config.dropout = tc.dropout
    val = list(val) if val else train[:tc.val_size]
    val = val[:tc.val_size]
    t_max = model.config.t_max
    per_batch = max(1, tc.tokens_per_batch // t_max)
    root = Rng(tc.seed)
    batch_rng, drop_rng, mix_rng = root.spawn(1), root.spawn(2), root.spawn(3)
    objective = objective_for(model)
    params = model.trainable_parameters()
    gate_params = [p for p in params if ".mix.g_" in p.name]
    optim = OptimState()
    result = TrainResult(optim=optim)
    out = Path(out_dir) if out_dir is not None else None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "curves.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CURVE_HEADER)
    start = time.perf_counter()

    def emit(step, train_loss):
        metric = validation_bleu(model, val)
        wall = time.perf_counter() - start if tc.record_time else 0.0
        rec = {"step": step, "train_loss": train_loss, "val_metric": metric, "wall_clock_s": wall}
        result.records.append(rec)
        if writer is not None:
            writer.writerow([step, _fmt(train_loss), _fmt(metric), _fmt(wall)])
            fh.flush()
            meta = {"step": step, "seed": tc.seed, "val_metric": metric}
            save_checkpoint(model, out / "last.fnat", meta)
            if metric > result.best_val:
                save_checkpoint(model, out / "best.fnat", meta)
        result.best_val = max(result.best_val, metric)
        if on_record:
            on_record(rec)
        log.info("step %d loss %.4f val %.4f", step, train_loss, metric)

    batches = make_batches(train, t_max, per_batch, batch_rng)
    cursor = 0
    try:
        with T.no_grad():
            _, rep0 = objective(model, batches[0], tc, False, drop_rng)
        emit(0, rep0.total)
        running, n_running = 0.0, 0
        for step in range(1, tc.max_steps + 1):
            if cursor == len(batches):
                batches = make_batches(train, t_max, per_batch, batch_rng)
                cursor = 0
            batch = batches[cursor]
            cursor += 1
            model.zero_grad()
            loss, rep = objective(model, batch, tc, True, drop_rng, mix_rng)
            if not math.isfinite(rep.total):
                raise NumericalAbort(f"non-finite loss at step {step}")
            loss.backward()
            if gate_params:
                result.gate_grad_norm_total += sum(float(np.linalg.norm(p.grad)) for p in gate_params)
            clip_grad_norm(params, tc.clip_norm)
            adam_step(params, optim, lr_at(step, model.config.d, tc.warmup_steps, tc.lr_scale),
                      tc.beta1, tc.beta2, tc.eps_adam)
            result.steps = step
            running += rep.total
            n_running += 1
            if step % tc.eval_interval == 0 or step == tc.max_steps:
                emit(step, running / n_running)
                running, n_running = 0.0, 0
    finally:
        if writer is not None:
            fh.close()
    return result


# ---------------------------------------------------------------------------
# sequence-level distillation


def distill_generate(teacher: ARTransformer, examples, batch_size: int = 64):
    """Replace each target with the teacher's greedy decode. Returns (examples, n_truncated)."""
    t_max = teacher.config.t_max
    out, truncated = [], 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        seqs, _ = ar_greedy_batch(teacher, [ex.src for ex in chunk], max_len=t_max)
        for ex, seq in zip(chunk, seqs):
            if EOS in seq:
                tgt = seq[:seq.index(EOS) + 1]
            else:
                truncated += 1
                tgt = seq[:t_max - 1] + [EOS]
            out.append(Example(list(ex.src), tgt))
    if truncated:
        log.warning("%d teacher decodes hit t_max and were truncated", truncated)
    return out, truncated
