"""Parallel decoding, mask-and-repredict refinement, greedy AR decoding, speed benchmark."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS, MASK, N_SPECIAL, PAD, collate, Example, source_with_eos
from .model import ARTransformer, EncoderState, FourierNAT, cast_model
from .tensor import ConfigError

# ids never produced by the decoders
_BANNED_AR = (PAD, BOS, MASK)


@dataclass
class DecodeResult:
    tokens: list[int]
    confidences: list[float]
    passes: int = 1


@dataclass
class RefineConfig:
    n_passes: int = 0
    mask_ratio: float = 0.3

    def validate(self):
        if self.n_passes < 0:
            raise ConfigError("n_passes must be non-negative")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        return self


def _encode_sources(model, srcs) -> EncoderState:
    batch = collate([Example(list(s), [EOS]) for s in srcs], model.config.t_max)
    return model.encode(batch.src_ids)


def _content_argmax(logits: np.ndarray):
    """Argmax over content ids (lowest id wins ties) and its softmax probability."""
    z = logits - logits.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    content = p[..., N_SPECIAL:]
    idx = content.argmax(axis=-1)
    conf = np.take_along_axis(content, idx[..., None], axis=-1)[..., 0]
    return idx + N_SPECIAL, conf


def lowest_confidence(confidences, k: int) -> list[int]:
    """Indices of the k smallest confidences; ties go to the lower index."""
    order = np.argsort(np.asarray(confidences, dtype=float), kind="stable")
    return sorted(int(i) for i in order[:k])


def single_pass_batch(model: FourierNAT, srcs, enc: EncoderState | None = None) -> list[DecodeResult]:
    with T.no_grad():
        enc = enc if enc is not None else _encode_sources(model, srcs)
        lengths = model.predict_length(enc).argmax(axis=-1) + 1
        logits = model.decode_parallel(enc).logits.data
    toks, conf = _content_argmax(logits)
    return [DecodeResult([int(t) for t in toks[i, :n]], [float(c) for c in conf[i, :n]], 1)
            for i, n in enumerate(lengths)]


def single_pass(model: FourierNAT, src_ids) -> DecodeResult:
    return single_pass_batch(model, [src_ids])[0]


def refine_batch(model: FourierNAT, srcs, results: list[DecodeResult], cfg: RefineConfig,
                 enc: EncoderState | None = None) -> list[DecodeResult]:
    cfg.validate()
    if cfg.n_passes == 0:
        return results
    t_max = model.config.t_max
    results = [DecodeResult(list(r.tokens), list(r.confidences), r.passes) for r in results]
    with T.no_grad():
        enc = enc if enc is not None else _encode_sources(model, srcs)
        for _ in range(cfg.n_passes):
            tokens = np.full((len(results), t_max), PAD, dtype=np.int64)
            masked = np.ones((len(results), t_max), dtype=bool)
            chosen = []
            for i, r in enumerate(results):
                n = len(r.tokens)
                tokens[i, :n] = r.tokens
                masked[i, :n] = False
                sel = lowest_confidence(r.confidences, math.ceil(cfg.mask_ratio * n))
                masked[i, sel] = True
                chosen.append(sel)
            logits = model.decode_parallel(enc, tokens, masked).logits.data
            toks, conf = _content_argmax(logits)
            for i, r in enumerate(results):
                for t in chosen[i]:
                    r.tokens[t] = int(toks[i, t])
                    r.confidences[t] = float(conf[i, t])
                r.passes += 1
    return results


def refine(model: FourierNAT, src_ids, result: DecodeResult, cfg: RefineConfig) -> DecodeResult:
    return refine_batch(model, [src_ids], [result], cfg)[0]


def decode_batch(model: FourierNAT, srcs, cfg: RefineConfig | None = None) -> list[DecodeResult]:
    """Single pass plus ``cfg.n_passes`` refinements, sharing one encoder run."""
    with T.no_grad():
        enc = _encode_sources(model, srcs)
    out = single_pass_batch(model, srcs, enc)
    if cfg is not None and cfg.n_passes:
        out = refine_batch(model, srcs, out, cfg, enc)
    return out


def ar_greedy_batch(model: ARTransformer, srcs, max_len: int | None = None, cache: bool = True):
    """Greedy left-to-right decoding. Returns (token lists incl. EOS, number of step calls)."""
    t_max = model.config.t_max
    max_len = t_max if max_len is None else max_len
    if max_len > t_max:
        raise ConfigError(f"max_len {max_len} exceeds t_max={t_max}")
    B = len(srcs)
    outs = [[] for _ in range(B)]
    if max_len == 0 or B == 0:
        return outs, 0
    with T.no_grad():
        enc = _encode_sources(model, srcs)
        state = model.start_cache(enc) if cache else None
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        steps = 0
        while steps < max_len and not done.all():
            if cache:
                logits = model.ar_decode_step_cached(state, prefix[:, -1])
            else:
                logits = model.ar_decode_step(enc, prefix)
            steps += 1
            logits = logits.copy()
            logits[:, list(_BANNED_AR)] = -np.inf
            nxt = logits.argmax(axis=-1)
            for i in np.flatnonzero(~done):
                outs[i].append(int(nxt[i]))
                if nxt[i] == EOS:
                    done[i] = True
            prefix = np.concatenate([prefix, np.where(done & (nxt != EOS), PAD, nxt)[:, None]], axis=1)
    return outs, steps


def ar_greedy(model: ARTransformer, src_ids, max_len: int | None = None, cache: bool = True) -> list[int]:
    return ar_greedy_batch(model, [src_ids], max_len, cache)[0][0]


def _content_tokens(seq) -> int:
    return sum(1 for t in seq if t != EOS)


def benchmark(nat: FourierNAT, ar: ARTransformer, examples, batch_size: int = 16,
              refine_passes: int = 0, mask_ratio: float = 0.3, workers: int = 1,
              ar_cache: bool = True, dtype: str | None = None, repeats: int = 1) -> dict:
    """Wall-clock tokens/s of parallel vs greedy AR decoding over identical batches.

    ``dtype`` casts both models before timing.  Each side is timed ``repeats``
    times and the fastest pass is kept; forward counts are per pass.
    """
    if not examples:
        raise ValueError("benchmark needs a non-empty dataset")
    if nat.config.vocab != ar.config.vocab or nat.config.t_max != ar.config.t_max:
        raise ConfigError("NAT and AR models must share vocab and t_max")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if dtype is not None:
        nat, ar = cast_model(nat, dtype), cast_model(ar, dtype)
    srcs = [list(ex.src) for ex in examples]
    chunks = [srcs[i:i + batch_size] for i in range(0, len(srcs), batch_size)]
    cfg = RefineConfig(refine_passes, mask_ratio).validate()

    def run(fn):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                return list(pool.map(fn, chunks))
        return [fn(c) for c in chunks]

    def timed(model, fn):
        best = math.inf
        for _ in range(repeats):
            model.decoder_forwards = 0
            t0 = time.perf_counter()
            out = run(fn)
            best = min(best, time.perf_counter() - t0)
        return out, best

    nat_out, nat_s = timed(nat, lambda c: decode_batch(nat, c, cfg))
    nat_tokens = sum(len(r.tokens) for batch in nat_out for r in batch)
    ar_out, ar_s = timed(ar, lambda c: ar_greedy_batch(ar, c, cache=ar_cache))
    ar_tokens = sum(_content_tokens(seq) for outs, _ in ar_out for seq in outs)

    nat_tps = nat_tokens / nat_s
    ar_tps = ar_tokens / ar_s
    return {
        "nat_tokens_per_s": nat_tps,
        "ar_tokens_per_s": ar_tps,
        "speedup": nat_tps / ar_tps,
        "nat_forwards": nat.decoder_forwards,
        "ar_forwards": ar.decoder_forwards,
        "batch_size": batch_size,
        "workers": workers,
        "dtype": nat.config.dtype,
        "repeats": repeats,
    }
