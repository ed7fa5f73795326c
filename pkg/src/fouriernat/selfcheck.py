"""Invariant battery behind ``fouriernat selfcheck``.

Functions are looked up through their modules at call time so a test can
monkeypatch a faulty implementation in and watch the right check fail.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import metrics, spectral, tensor
from .model import FourierNAT, ModelConfig
from .tensor import Rng
from .training import lr_at, nat_loss

CHECK_LENGTHS = (1, 2, 4, 8, 16, 64)


def _rand(rng, *shape):
    return rng.normal(shape)


def check_fft_vs_naive(rng):
    worst = 0.0
    for T in CHECK_LENGTHS:
        x = _rand(rng, T, 3)
        worst = max(worst, float(np.abs(spectral.dft_seq(x).to_complex() - spectral.naive_dft(x)).max()))
    return worst < 1e-9, f"max abs diff {worst:.2e}"


def check_roundtrip(rng):
    worst = 0.0
    for T in CHECK_LENGTHS:
        x = _rand(rng, T, 3)
        re, im = spectral.idft_seq(spectral.dft_seq(x))
        worst = max(worst, float(np.abs(re - x).max()), float(np.abs(im).max()))
    return worst < 1e-9, f"max abs error {worst:.2e}"


def check_parseval(rng):
    worst = 0.0
    for T in CHECK_LENGTHS:
        x = _rand(rng, T, 3)
        s = spectral.dft_seq(x)
        energy = (s.real ** 2 + s.imag ** 2).sum(axis=0) / T
        worst = max(worst, float(np.abs(energy - (x ** 2).sum(axis=0)).max()))
    return worst < 1e-8, f"max energy gap {worst:.2e}"


def check_hermitian(rng):
    worst = 0.0
    for T in CHECK_LENGTHS:
        s = spectral.dft_seq(_rand(rng, T, 3))
        mirror = (-np.arange(T)) % T
        worst = max(worst, float(np.abs(s.real[mirror] - s.real).max()),
                    float(np.abs(s.imag[mirror] + s.imag).max()))
    return worst < 1e-9, f"max asymmetry {worst:.2e}"


def check_identity_gates(rng):
    x = _rand(rng, 16, 4)
    ones = (np.ones((16, 4)), np.ones((16, 4)))
    err = float(np.abs(spectral.fourier_mix(x, ones) - x).max())
    return err < 1e-9, f"max abs error {err:.2e}"


def check_symmetric_realness(rng):
    worst = 0.0
    for T in (8, 16):
        mirror = (-np.arange(T)) % T
        g = _rand(rng, T, 4)
        gr, gi = g + g[mirror], _rand(rng, T, 4)
        gi = gi + gi[mirror]
        _, im = spectral.fourier_mix_parts(_rand(rng, T, 4), (gr, gi))
        worst = max(worst, float(np.abs(im).max()))
    return worst < 1e-9, f"max imaginary residue {worst:.2e}"


def check_linearity(rng):
    x, y = _rand(rng, 8, 4), _rand(rng, 8, 4)
    gates = (_rand(rng, 8, 4), _rand(rng, 8, 4))
    a, b = 0.7, -1.3
    lhs = spectral.fourier_mix(a * x + b * y, gates)
    rhs = a * spectral.fourier_mix(x, gates) + b * spectral.fourier_mix(y, gates)
    err = float(np.abs(lhs - rhs).max())
    return err < 1e-9, f"max abs error {err:.2e}"


def check_grad_fourier_mix(rng):
    x, gr, gi = _rand(rng, 8, 2), _rand(rng, 8, 2), _rand(rng, 8, 2)
    err = tensor.grad_check(spectral.spectral_mix, [x, gr, gi], rng=rng)
    return err < 1e-6, f"rel error {err:.2e}"


def check_grad_layer_norm(rng):
    err = tensor.grad_check(tensor.layer_norm, [_rand(rng, 3, 5), _rand(rng, 5), _rand(rng, 5)], rng=rng)
    return err < 1e-6, f"rel error {err:.2e}"


def check_grad_matmul(rng):
    err = tensor.grad_check(tensor.matmul, [_rand(rng, 3, 3), _rand(rng, 3, 3)], rng=rng)
    return err < 1e-7, f"rel error {err:.2e}"


def check_grad_softmax_ce(rng):
    gold = np.array([1, 0, 4])

    def f(z):
        return nat_loss(z, gold, np.zeros(3, dtype=bool))

    err = tensor.grad_check(f, [_rand(rng, 3, 5)], rng=rng)
    return err < 1e-6, f"rel error {err:.2e}"


def check_grad_end_to_end(rng):
    cfg = ModelConfig(d=8, n_layers=1, n_heads=2, d_ff=16, vocab=8, t_max=4, s_max=8, dropout=0.0)
    model = FourierNAT(cfg, seed=int(rng.integers(0, 2 ** 31)))
    for p in model.gate_parameters():
        p.data[:] = rng.normal(p.shape)
    src = np.array([[4, 5, 6, 2]])
    gold = np.array([[5, 7, 2, 0]])

    def loss():
        return nat_loss(model.decode_parallel(model.encode(src)).logits, gold, gold == 0)

    err = tensor.grad_check_params(loss, model.parameters(), rng=rng, max_coords=12)
    return err < 1e-4, f"rel error {err:.2e}"


def check_softmax(rng):
    x = _rand(rng, 4, 6)
    s = tensor.softmax(x).data
    shifted = tensor.softmax(x + 3.5).data
    err = max(float(np.abs(s.sum(-1) - 1).max()), float(np.abs(s - shifted).max()))
    return err < 1e-9, f"max deviation {err:.2e}"


def check_bleu_oracle(rng):
    # one clipped unigram match out of four, hypothesis longer than reference
    got = metrics.bleu([["the"] * 4], [["the", "cat"]], max_n=1)
    short = metrics.bleu([["the", "cat"]], [["the", "cat", "sat", "on"]], max_n=1)
    err = max(abs(got - 0.25), abs(short - math.exp(-1)))
    return err < 1e-4, f"abs error {err:.2e}"


def check_rouge_oracle(rng):
    got = metrics.rouge_l(list("abcd"), list("acd"))
    err = abs(got - 6 / 7)
    return err < 1e-6, f"abs error {err:.2e}"


def check_lr_schedule(rng):
    w = 4000
    a = lr_at(w, 512, w)
    b = w ** -0.5 * 512 ** -0.5
    ratio = lr_at(2 * w, 512, w) / a
    err = max(abs(a - b), abs(ratio - 1 / math.sqrt(2)))
    return err < 1e-12, f"max deviation {err:.2e}"


CHECKS: list[tuple[str, Callable]] = [
    ("fft_matches_naive_dft", check_fft_vs_naive),
    ("ifft_roundtrip", check_roundtrip),
    ("parseval", check_parseval),
    ("hermitian_symmetry", check_hermitian),
    ("identity_gates", check_identity_gates),
    ("symmetric_gate_realness", check_symmetric_realness),
    ("fourier_mix_linearity", check_linearity),
    ("softmax_normalization", check_softmax),
    ("grad_matmul", check_grad_matmul),
    ("grad_layer_norm", check_grad_layer_norm),
    ("grad_softmax_cross_entropy", check_grad_softmax_ce),
    ("grad_fourier_mix", check_grad_fourier_mix),
    ("grad_end_to_end", check_grad_end_to_end),
    ("bleu_oracle", check_bleu_oracle),
    ("rouge_l_oracle", check_rouge_oracle),
    ("lr_schedule", check_lr_schedule),
]


def run_checks(seed: int = 0, echo=print) -> list[tuple[str, bool, str]]:
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        try:
            ok, detail = fn(Rng(seed).spawn(i))
        except Exception as exc:  # a crash is a failed check, not a crashed battery
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok = bool(ok)
        results.append((name, ok, detail))
        if echo:
            echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return results
