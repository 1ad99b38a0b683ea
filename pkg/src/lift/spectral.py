"""Real-input FFT, its inverse, and the all-lags cross-correlation kernel.

The transform is a recursive mixed-radix Cooley-Tukey FFT that works on the
last axis of arbitrarily shaped arrays. Lengths with a large prime factor go
through Bluestein's chirp-z algorithm so every length stays O(n log n).

Conventions: the forward transform is unnormalized, the inverse carries 1/n.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError, PreconditionError, ShapeError

# Prime factors up to this size are handled by a dense butterfly matrix.
_DIRECT_PRIME_MAX = 31
# Real transforms up to this length run as a cached matrix product.
_DENSE_PLAN_MAX = 256


@lru_cache(maxsize=None)
def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int) -> np.ndarray:
    r = np.arange(p)[:, None]
    k = np.arange(m)[None, :]
    return np.exp(-2j * np.pi * r * k / (p * m))


@lru_cache(maxsize=None)
def _bluestein_plan(n: int) -> tuple[np.ndarray, np.ndarray, int]:
    m = 1
    while m < 2 * n - 1:
        m *= 2
    k = np.arange(n)
    # k^2 mod 2n keeps the chirp argument small and exact for large n
    chirp = np.exp(-1j * np.pi * ((k * k) % (2 * n)) / n)
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:][::-1])
    return chirp, _fft(b), m


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    chirp, b_hat, m = _bluestein_plan(n)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * chirp
    conv = _ifft_unscaled(_fft(a) * b_hat) / m
    return conv[..., :n] * chirp


def _ifft_unscaled(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft(np.conj(x)))


def _fft(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    if n == 1:
        return x.astype(complex, copy=True)
    p = _smallest_factor(n)
    if p == n:
        if n <= _DIRECT_PRIME_MAX:
            return x @ _dft_matrix(n).T
        return _bluestein(x)
    m = n // p
    # decimation in time: sub[..., r, j] = x[..., p*j + r]
    sub = np.swapaxes(x.reshape(x.shape[:-1] + (m, p)), -1, -2)
    y = _fft(sub) * _twiddles(p, m)
    # X[q*m + k] = sum_r W_p^{rq} y[r, k]
    out = np.einsum("qr,...rk->...qk", _dft_matrix(p), y)
    return out.reshape(x.shape)


def fft(x) -> np.ndarray:
    """Complex DFT along the last axis, no normalization."""
    x = np.asarray(x, dtype=complex)
    if x.shape[-1] < 1:
        raise InvalidInputError("fft needs at least one sample")
    return _fft(x)


def ifft(s) -> np.ndarray:
    """Inverse complex DFT along the last axis, scaled by 1/n."""
    s = np.asarray(s, dtype=complex)
    return _ifft_unscaled(s) / s.shape[-1]


@lru_cache(maxsize=None)
def _dense_rfft_plan(n: int) -> np.ndarray:
    # column l is the transform of the l-th unit impulse
    plan = _fft(np.eye(n, dtype=complex))[:, : n // 2 + 1]
    plan[:, 0] = plan[:, 0].real
    if n % 2 == 0:
        plan[:, -1] = plan[:, -1].real
    return plan


@lru_cache(maxsize=None)
def _dense_irfft_plan(n: int) -> tuple[np.ndarray, np.ndarray]:
    f = n // 2 + 1
    eye = np.eye(f, dtype=complex)
    from_re = ifft(hermitian_extend(eye, n)).real
    from_im = ifft(hermitian_extend(1j * eye, n)).real
    return from_re, from_im


def rfft_array(x) -> np.ndarray:
    """Non-negative frequency bins of a real signal, last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise InvalidInputError(f"rfft needs length >= 2, got {n}")
    if n <= _DENSE_PLAN_MAX:
        return x @ _dense_rfft_plan(n)
    out = _fft(x.astype(complex))[..., : n // 2 + 1]
    # exact zeros where conjugate symmetry forces them
    out[..., 0] = out[..., 0].real
    if n % 2 == 0:
        out[..., -1] = out[..., -1].real
    return out


def hermitian_extend(bins: np.ndarray, n: int) -> np.ndarray:
    """Full length-n spectrum from the ``n // 2 + 1`` retained bins.

    Imaginary parts of the DC and (for even n) Nyquist bins are dropped,
    which is what makes the inverse real.
    """
    f = n // 2 + 1
    if bins.shape[-1] != f:
        raise ShapeError(f"expected {f} bins for length {n}, got {bins.shape[-1]}")
    full = np.zeros(bins.shape[:-1] + (n,), dtype=complex)
    full[..., :f] = bins
    full[..., 0] = bins[..., 0].real
    if n % 2 == 0:
        full[..., f - 1] = bins[..., f - 1].real
        mirror = bins[..., 1 : f - 1]
    else:
        mirror = bins[..., 1:f]
    full[..., f:] = np.conj(mirror[..., ::-1])
    return full


def irfft_array(bins, n: int) -> np.ndarray:
    """Real signal of length ``n`` whose rfft is ``bins``, last axis."""
    bins = np.asarray(bins, dtype=complex)
    if n <= _DENSE_PLAN_MAX:
        if bins.shape[-1] != n // 2 + 1:
            raise ShapeError(f"expected {n // 2 + 1} bins for length {n}, got {bins.shape[-1]}")
        from_re, from_im = _dense_irfft_plan(n)
        return bins.real @ from_re + bins.imag @ from_im
    return ifft(hermitian_extend(bins, n)).real


@dataclass(frozen=True)
class Spectrum:
    """Retained frequency bins of a real signal of length ``n``."""

    bins: np.ndarray
    n: int

    @property
    def amplitude(self) -> np.ndarray:
        return np.sqrt(self.bins.real ** 2 + self.bins.imag ** 2)

    @property
    def phase(self) -> np.ndarray:
        return np.arctan2(self.bins.imag, self.bins.real)

    def scale(self, r) -> "Spectrum":
        """Multiply each bin by a real factor (amplitude changes, phase does not)."""
        r = np.asarray(r, dtype=np.float64)
        return Spectrum(self.bins * r, self.n)


def rfft(x) -> Spectrum:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("rfft expects a 1-D signal; use rfft_array for batches")
    return Spectrum(rfft_array(x), x.shape[0])


def irfft(s: Spectrum, n: int | None = None) -> np.ndarray:
    n = s.n if n is None else n
    return irfft_array(s.bins, n)


def _xcorr_unchecked(v_norm: np.ndarray, u_norm: np.ndarray) -> np.ndarray:
    # R[d] = (1/L) sum_l u[(l - d) mod L] v[l]; broadcasts over leading axes
    n = v_norm.shape[-1]
    prod = rfft_array(v_norm) * np.conj(rfft_array(u_norm))
    return irfft_array(prod, n) / n


def cross_correlation_all_lags(v_norm, u_norm) -> np.ndarray:
    """Circular cross-correlation of normalized series for every lag.

    ``R[d]`` measures how well ``u`` shifted forward by ``d`` steps matches
    ``v``, i.e. how strongly ``u`` leads ``v`` by ``d``. Both inputs must be
    z-scored with population statistics so that ``|R| <= 1``.
    """
    v = np.asarray(v_norm, dtype=np.float64)
    u = np.asarray(u_norm, dtype=np.float64)
    if v.shape != u.shape or v.ndim != 1:
        raise ShapeError(f"need two 1-D arrays of equal length, got {v.shape} and {u.shape}")
    if v.shape[0] < 2:
        raise InvalidInputError("need at least two samples")
    for name, a in (("v_norm", v), ("u_norm", u)):
        if abs(a.mean()) > 1e-6 or abs(a.std() - 1.0) > 1e-3:
            raise PreconditionError(f"{name} is not normalized (mean {a.mean():.3g}, std {a.std():.3g})")
    return _xcorr_unchecked(v, u)


def brute_force_cross_correlation(v_norm, u_norm) -> np.ndarray:
    """O(L^2) reference for :func:`cross_correlation_all_lags`."""
    v = np.asarray(v_norm, dtype=np.float64)
    u = np.asarray(u_norm, dtype=np.float64)
    n = len(v)
    out = np.empty(n)
    for d in range(n):
        acc = 0.0
        for ell in range(n):
            acc += u[(ell - d) % n] * v[ell]
        out[d] = acc / n
    return out


def naive_dft(x) -> np.ndarray:
    """Direct O(n^2) evaluation of the DFT sum, used as a test oracle."""
    x = np.asarray(x, dtype=complex)
    n = x.shape[-1]
    ell = np.arange(n)
    out = np.empty(n, dtype=complex)
    for f in range(n):
        out[f] = np.sum(x * np.exp(-2j * np.pi * f * ell / n))
    return out


def _bin_weights(n: int) -> np.ndarray:
    # how many times each retained bin appears in the full spectrum
    w = np.full(n // 2 + 1, 2.0)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    return w


def rfft_adjoint(grad_re, grad_im, n: int) -> np.ndarray:
    """Adjoint of ``x -> (Re rfft(x), Im rfft(x))``.

    Returns ``Re(sum_f (a_f + i b_f) e^{+i 2 pi f l / n})``, the unscaled
    conjugate transform of the cotangent zero-padded to length ``n``.
    """
    g = np.asarray(grad_re, dtype=np.float64) + 1j * np.asarray(grad_im, dtype=np.float64)
    if n <= _DENSE_PLAN_MAX:
        plan = _dense_rfft_plan(n)
        return g.real @ plan.real.T + g.imag @ plan.imag.T
    padded = np.zeros(g.shape[:-1] + (n,), dtype=complex)
    padded[..., : g.shape[-1]] = g
    return _ifft_unscaled(padded).real


def irfft_adjoint(grad, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of ``(re, im) -> irfft(re + i im, n)``; a scaled forward transform."""
    s = rfft_array(grad) * (_bin_weights(n) / n)
    return s.real, s.imag
