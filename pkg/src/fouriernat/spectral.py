"""Sequence-axis Fourier transforms and gated frequency-domain token mixing.

Convention: the forward transform is unnormalized, the inverse carries 1/T.
Power-of-two lengths go through an iterative radix-2 FFT; every other length
falls back to the direct O(T^2) sum, which is also kept as the test oracle.

All transforms act on axis ``-2`` so the same code serves a single
``T x d`` sequence and a ``B x T x d`` batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Parameter, Tensor, _make, as_tensor


class GateShapeError(ValueError):
    """Sequence length does not match the gate table's padded length."""


@dataclass
class ComplexSpectrum:
    real: np.ndarray
    imag: np.ndarray

    def __post_init__(self):
        if self.real.shape != self.imag.shape:
            raise ValueError(f"real/imag shape mismatch: {self.real.shape} vs {self.imag.shape}")

    @property
    def shape(self):
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    @classmethod
    def from_complex(cls, z: np.ndarray) -> "ComplexSpectrum":
        return cls(np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag))


@dataclass
class GatePair:
    g_real: Parameter
    g_imag: Parameter

    def __post_init__(self):
        if self.g_real.shape != self.g_imag.shape:
            raise ValueError("gate shapes differ")

    @classmethod
    def identity(cls, t_max: int, d: int, prefix: str = "gates") -> "GatePair":
        return cls(Parameter(f"{prefix}.g_real", np.ones((t_max, d))),
                   Parameter(f"{prefix}.g_imag", np.ones((t_max, d))))

    @property
    def t_max(self) -> int:
        return self.g_real.shape[0]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@lru_cache(maxsize=None)
def _twiddles(m: int, sign: int) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.arange(m // 2) / m)


def _fft_radix2(a: np.ndarray, sign: int) -> np.ndarray:
    """Iterative decimation-in-time FFT along axis 1 of an (L, n, d) array (n a power of two)."""
    L, n, d = a.shape
    a = a[:, _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        blocks = a.reshape(L, n // m, m, d)
        lo, hi = blocks[:, :, :half], blocks[:, :, half:]
        if m == 2:
            t = hi.copy()  # the only twiddle is 1
        else:
            t = hi * _twiddles(m, sign).astype(a.dtype, copy=False)[:, None]
        np.subtract(lo, t, out=hi)
        lo += t
        m *= 2
    return a


def _complex_for(dtype) -> type:
    """complex64 for single-precision input, complex128 otherwise."""
    return np.complex64 if dtype in (np.float32, np.complex64) else np.complex128


def _real(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    return arr if arr.dtype.kind == "f" else arr.astype(np.float64)


def naive_dft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Direct O(T^2) DFT along axis -2. Reference oracle and non-power-of-two path."""
    x = np.asarray(x)
    T = x.shape[-2]
    k = np.arange(T)
    sign = 1.0 if inverse else -1.0
    mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / T)
    out = np.matmul(mat.astype(_complex_for(x.dtype), copy=False), x.astype(_complex_for(x.dtype)))
    return out / T if inverse else out


def _transform(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized transform along axis -2 in either direction."""
    T = x.shape[-2]
    if T < 1:
        raise ValueError("sequence length must be at least 1")
    if not is_power_of_two(T):
        out = naive_dft(x, inverse)
        return out * T if inverse else out
    lead, d = x.shape[:-2], x.shape[-1]
    a = x.astype(_complex_for(x.dtype), copy=False).reshape((-1, T, d))
    return _fft_radix2(a, 1 if inverse else -1).reshape(lead + (T, d))


def fft_seq(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Complex transform of ``x`` along axis -2 (unnormalized forward, 1/T inverse)."""
    x = np.asarray(x)
    out = _transform(x, inverse)
    if inverse:
        out /= x.shape[-2]
    return out


def dft_seq(x) -> ComplexSpectrum:
    x = _real(x)
    return ComplexSpectrum.from_complex(fft_seq(x))


def idft_seq(spec: ComplexSpectrum) -> tuple[np.ndarray, np.ndarray]:
    z = fft_seq(spec.to_complex(), inverse=True)
    return np.ascontiguousarray(z.real), np.ascontiguousarray(z.imag)


def _gate_arrays(gates, T):
    if isinstance(gates, GatePair):
        gr, gi = gates.g_real.data, gates.g_imag.data
    else:
        gr, gi = (g.data if isinstance(g, Tensor) else np.asarray(g) for g in gates)
    if gr.shape[0] != T:
        raise GateShapeError(
            f"sequence length {T} does not match gate length {gr.shape[0]}; "
            "pad inputs to t_max before mixing")
    return gr, gi


def apply_gates(spec: ComplexSpectrum, gates, T: int | None = None) -> ComplexSpectrum:
    T = spec.shape[-2] if T is None else T
    if T != spec.shape[-2]:
        raise GateShapeError(f"declared length {T} differs from spectrum length {spec.shape[-2]}")
    gr, gi = _gate_arrays(gates, T)
    return ComplexSpectrum(spec.real * gr, spec.imag * gi)


def fourier_mix_parts(x, gates) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of iDFT(gate(DFT(x))) before truncation."""
    x = _real(x)
    T = x.shape[-2]
    gr, gi = _gate_arrays(gates, T)
    z = _transform(x, inverse=False)
    # gate in place, folding the inverse's 1/T into the gates
    z.real *= gr / T
    z.imag *= gi / T
    z = _transform(z, inverse=True)
    return z.real, z.imag


def fourier_mix(x, gates) -> np.ndarray:
    return fourier_mix_parts(x, gates)[0]


def fourier_mix_vjp(x, gates, upstream, upstream_imag=None):
    """Vector-Jacobian product of the mixing map.

    Returns ``(dx, d_g_real, d_g_imag)``.  ``upstream_imag`` is the cotangent
    of the imaginary output when it is kept; gate gradients are summed over
    any leading batch axes.
    """
    x = _real(x)
    T = x.shape[-2]
    gr, gi = _gate_arrays(gates, T)
    X = fft_seq(x)
    u = np.asarray(upstream, dtype=np.complex128)
    if upstream_imag is not None:
        u = u + 1j * np.asarray(upstream_imag)
    # cotangent on the gated spectrum (R', I'), packed as one complex array
    W = fft_seq(u) / T
    g_rp, g_ip = W.real, W.imag
    lead = tuple(range(x.ndim - 2))
    d_gr = (X.real * g_rp).sum(axis=lead)
    d_gi = (X.imag * g_ip).sum(axis=lead)
    back = (gr * g_rp) + 1j * (gi * g_ip)
    # adjoint of the forward DFT is T * iDFT
    dx = (fft_seq(back, inverse=True) * T).real
    return dx, d_gr, d_gi


def spectral_mix(x, g_real, g_imag, keep_imag: bool = False) -> Tensor:
    """Differentiable gated mixing over axis -2.

    Output is the real part (``... x T x d``) or, with ``keep_imag``, the real
    and imaginary parts concatenated on the channel axis (``... x T x 2d``).
    """
    x, g_real, g_imag = as_tensor(x), as_tensor(g_real), as_tensor(g_imag)
    gates = (g_real.data, g_imag.data)
    re, im = fourier_mix_parts(x.data, gates)
    out = np.concatenate([re, im], axis=-1) if keep_imag else re
    d = x.shape[-1]

    def backward(g):
        if keep_imag:
            dx, dgr, dgi = fourier_mix_vjp(x.data, gates, g[..., :d], g[..., d:])
        else:
            dx, dgr, dgi = fourier_mix_vjp(x.data, gates, g)
        return dx, dgr, dgi

    return _make(out, (x, g_real, g_imag), backward, "spectral_mix")
