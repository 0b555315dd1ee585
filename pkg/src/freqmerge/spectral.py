"""Frequency-domain transforms and radial filtering of weight tensors.

Two transform routes are kept deliberately independent: ``fft`` is the fast
path (iterative radix-2 with a Bluestein fallback for arbitrary lengths,
vectorized over batch axes), while ``dft_oracle`` is a pure-Python evaluation
of the defining sum and exists only to check the fast path.

Filtering removes the lowest-radius fraction of DFT coefficients.  The radial
metric is the per-axis aliased frequency min(i, N-i) normalized by N/2, so
rectangular tensors are filtered isotropically in normalized frequency.
Coefficients are removed in conjugate pairs: a real input therefore stays real
after filtering, which is what makes the high/low energy partition exact.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .errors import RankError, ShapeMismatchError, SpectralResidueError

HIGH_PASS = "high_pass"
LOW_PASS = "low_pass"
BAND_STOP = "band_stop"

_MODES = (HIGH_PASS, LOW_PASS, BAND_STOP)


@dataclass(frozen=True)
class FilterSpec:
    """Filter mode plus the removed-coefficient fraction.

    ``rho`` is the fraction of coefficients removed by a high-pass filter;
    a low-pass filter with the same rho keeps exactly the coefficients the
    high-pass filter removes, so the two partition the spectrum.  Band-stop
    removes the coefficients whose rank falls inside [rho_lo, rho_hi).
    """

    mode: str
    rho: float = 0.0
    rho_lo: float = 0.0
    rho_hi: float = 0.0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"unknown filter mode {self.mode!r}")
        if self.mode == BAND_STOP:
            if not (0.0 <= self.rho_lo < self.rho_hi <= 1.0):
                raise ValueError(
                    f"band_stop needs 0 <= rho_lo < rho_hi <= 1, got [{self.rho_lo}, {self.rho_hi}]"
                )
        elif not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")

    @staticmethod
    def high_pass(rho: float) -> "FilterSpec":
        return FilterSpec(HIGH_PASS, rho=rho)

    @staticmethod
    def low_pass(rho: float) -> "FilterSpec":
        return FilterSpec(LOW_PASS, rho=rho)

    @staticmethod
    def band_stop(rho_lo: float, rho_hi: float) -> "FilterSpec":
        return FilterSpec(BAND_STOP, rho_lo=rho_lo, rho_hi=rho_hi)

    @staticmethod
    def median(rho: float) -> "FilterSpec":
        """Band-stop over the middle annulus with removed mass rho."""
        if not 0.0 < rho <= 1.0:
            raise ValueError(f"median filter needs rho in (0, 1], got {rho}")
        return FilterSpec(BAND_STOP, rho_lo=(1.0 - rho) / 2.0, rho_hi=(1.0 + rho) / 2.0)


@dataclass(frozen=True)
class SpectrumGrid:
    """Complex DFT coefficients of a tensor, DC at index 0 along every axis."""

    shape: tuple[int, ...]
    coefficients: np.ndarray

    def __post_init__(self):
        if self.coefficients.shape != self.shape:
            raise ValueError("coefficient layout must match the tensor shape")


def _check_rank(shape: tuple[int, ...]) -> None:
    if not 1 <= len(shape) <= 2:
        raise RankError(f"transforms support rank 1 or 2, got rank {len(shape)}")


# ---------------------------------------------------------------------------
# reference transform: the defining sum, evaluated with Python scalars
# ---------------------------------------------------------------------------


def _naive_dft_line(values: list[complex], inverse: bool) -> list[complex]:
    n = len(values)
    sign = 1.0 if inverse else -1.0
    twiddle = [cmath.exp(sign * 2j * math.pi * t / n) for t in range(n)]
    out = []
    for k in range(n):
        acc = 0j
        for j, v in enumerate(values):
            acc += v * twiddle[(k * j) % n]
        out.append(acc)
    return out


def dft_oracle(t, inverse: bool = False):
    """Transform by the definition, O(m^2) per axis. Reference path only.

    Forward returns a SpectrumGrid; inverse accepts a SpectrumGrid or complex
    array and returns the complex tensor (scaled by 1/m).
    """
    if isinstance(t, SpectrumGrid):
        t = t.coefficients
    arr = np.asarray(t)
    _check_rank(arr.shape)
    data = [complex(v) for v in arr.ravel(order="C")]
    if arr.ndim == 1:
        lines = _naive_dft_line(data, inverse)
        out = np.array(lines, dtype=np.complex128)
    else:
        rows, cols = arr.shape
        grid = [data[r * cols : (r + 1) * cols] for r in range(rows)]
        grid = [_naive_dft_line(row, inverse) for row in grid]
        columns = [[grid[r][c] for r in range(rows)] for c in range(cols)]
        columns = [_naive_dft_line(col, inverse) for col in columns]
        out = np.array(columns, dtype=np.complex128).T
    if inverse:
        return out / arr.size
    return SpectrumGrid(arr.shape, out)


# ---------------------------------------------------------------------------
# fast transform: iterative radix-2, Bluestein for other lengths
# ---------------------------------------------------------------------------


def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.intp)
    for i in range(1, n):
        rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
    return rev


def _radix2_axis0(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unscaled length-2^k transform along axis 0 of a (n, batch) array."""
    n = a.shape[0]
    out = a[_bit_reversal(n)]
    sign = 1.0 if inverse else -1.0
    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        blocks = out.reshape(n // size, size, -1)
        even = blocks[:, :half, :]
        odd = blocks[:, half:, :] * tw[None, :, None]
        out = np.concatenate((even + odd, even - odd), axis=1).reshape(n, -1)
        size *= 2
    return out


def _bluestein_axis0(a: np.ndarray, inverse: bool) -> np.ndarray:
    """Unscaled arbitrary-length transform via chirp-z convolution."""
    n = a.shape[0]
    sign = 1.0 if inverse else -1.0
    # exp(sign*pi*i*j^2/n) has period 2n in j^2
    phases = (np.arange(n, dtype=np.int64) ** 2) % (2 * n)
    chirp = np.exp(sign * 1j * np.pi * phases / n)

    m = 1 << (2 * n - 1).bit_length()
    padded = np.zeros((m, a.shape[1]), dtype=np.complex128)
    padded[:n] = a * chirp[:, None]
    kernel = np.zeros(m, dtype=np.complex128)
    kernel[:n] = np.conj(chirp)
    if n > 1:
        kernel[m - n + 1 :] = np.conj(chirp[1:][::-1])

    conv = _radix2_axis0(padded, False)
    conv *= _radix2_axis0(kernel[:, None], False)
    conv = _radix2_axis0(conv, True) / m
    return conv[:n] * chirp[:, None]


def _fft_axis0(a: np.ndarray, inverse: bool) -> np.ndarray:
    n = a.shape[0]
    if n == 1:
        return a.copy()
    if n & (n - 1) == 0:
        return _radix2_axis0(a, inverse)
    return _bluestein_axis0(a, inverse)


def fft(t, inverse: bool = False):
    """Fast transform; agrees with dft_oracle to float precision.

    Forward is unscaled and returns a SpectrumGrid; inverse divides by the
    element count and returns the complex tensor, so the two compose to the
    identity.
    """
    if isinstance(t, SpectrumGrid):
        t = t.coefficients
    arr = np.asarray(t)
    _check_rank(arr.shape)
    shape = arr.shape
    work = arr.astype(np.complex128, copy=False)
    if work.ndim == 1:
        out = _fft_axis0(work[:, None], inverse)[:, 0]
    else:
        out = _fft_axis0(work, inverse)
        out = _fft_axis0(out.T, inverse).T
    if inverse:
        return out / arr.size
    return SpectrumGrid(shape, out)


# ---------------------------------------------------------------------------
# radial masks
# ---------------------------------------------------------------------------


def radial_frequencies(shape: tuple[int, ...]) -> np.ndarray:
    """Normalized radial frequency of each coefficient, flattened in C order."""
    parts = []
    for n in shape:
        i = np.arange(n, dtype=np.float64)
        f = np.minimum(i, n - i) / (n / 2.0)
        parts.append(f * f)
    grid = parts[0]
    for p in parts[1:]:
        grid = np.add.outer(grid, p)
    return np.sqrt(grid).ravel()


def removed_count(shape: tuple[int, ...], rho: float) -> int:
    """Number of coefficients a high-pass filter at rho targets: round(rho*m)."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    m = 1
    for n in shape:
        m *= n
    return round(float(rho) * m)


def _conjugate_partner(shape: tuple[int, ...]) -> np.ndarray:
    m = 1
    for n in shape:
        m *= n
    coords = np.unravel_index(np.arange(m), shape)
    mirrored = tuple((-c) % n for c, n in zip(coords, shape))
    return np.ravel_multi_index(mirrored, shape)


def _pair_groups(shape: tuple[int, ...]):
    """Conjugate-pair groups ordered by (radius, lowest flat index).

    Returns (reps, sizes, partner): representative flat index and size of each
    group in removal order, plus the partner map.
    """
    radii = radial_frequencies(shape)
    partner = _conjugate_partner(shape)
    idx = np.arange(radii.size)
    reps = idx[idx <= partner]
    reps = reps[np.argsort(radii[reps], kind="stable")]
    sizes = np.where(partner[reps] == reps, 1, 2)
    return reps, sizes, partner


def removal_mask(shape: tuple[int, ...], spec: FilterSpec) -> np.ndarray:
    """Boolean mask over flat coefficient indices; True marks removal.

    Removal is atomic over conjugate pairs so the masked spectrum stays
    conjugate-symmetric: a pair is removed only when it fits entirely inside
    the requested rank window.  A high-pass filter with rho > 0 always removes
    the DC coefficient.
    """
    m = 1
    for n in shape:
        m *= n
    reps, sizes, partner = _pair_groups(shape)

    if spec.mode == BAND_STOP:
        lo = round(spec.rho_lo * m)
        hi = round(spec.rho_hi * m)
        force_dc = False
    else:
        lo = 0
        hi = removed_count(shape, spec.rho)
        force_dc = spec.mode in (HIGH_PASS, LOW_PASS) and spec.rho > 0.0

    removed = np.zeros(m, dtype=bool)
    cursor = 0
    for rep, size in zip(reps, sizes):
        fits = cursor >= lo and cursor + size <= hi
        if fits or (force_dc and rep == 0):
            removed[rep] = True
            removed[partner[rep]] = True
        cursor += size

    if spec.mode == LOW_PASS:
        return ~removed
    return removed


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------


def _as_2d(arr: np.ndarray) -> np.ndarray:
    # rank >= 3 tensors are filtered as (leading axis, everything else)
    lead = arr.shape[0]
    return arr.reshape(lead, arr.size // lead)


def filter_tensor(t, spec: FilterSpec) -> np.ndarray:
    """Mask the spectrum per spec and inverse-transform back to a real tensor.

    Scalars pass through unfiltered.  The imaginary residue of the inverse
    transform must stay below 1e-5*(1+max|t|); anything larger means the mask
    lost its conjugate symmetry and is reported as an error.
    """
    arr = np.asarray(t)
    out_dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    if arr.ndim == 0:
        return arr.astype(out_dtype)
    original_shape = arr.shape
    work = arr.astype(np.float64, copy=False)
    if work.ndim > 2:
        work = _as_2d(work)

    grid = fft(work)
    mask = removal_mask(work.shape, spec).reshape(work.shape)
    coeffs = grid.coefficients.copy()
    coeffs[mask] = 0.0
    back = fft(SpectrumGrid(work.shape, coeffs), inverse=True)

    tolerance = 1e-5 * (1.0 + float(np.max(np.abs(work))))
    residue = float(np.max(np.abs(back.imag)))
    if residue > tolerance:
        raise SpectralResidueError(
            f"imaginary residue {residue:.3e} exceeds {tolerance:.3e}; mask lost symmetry"
        )
    result = back.real.reshape(original_shape)
    return result.astype(out_dtype)


def spectral_l1(a, b) -> float:
    """L1 distance between two tensors in the frequency domain."""
    x = np.asarray(a)
    y = np.asarray(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 0:
        return float(abs(complex(x) - complex(y)))
    if x.ndim > 2:
        x = _as_2d(x.astype(np.float64, copy=False))
        y = _as_2d(y.astype(np.float64, copy=False))
    fa = fft(x).coefficients
    fb = fft(y).coefficients
    return float(np.sum(np.abs(fa - fb)))


def spectrum_rows(t) -> list[tuple[int, float, float, float]]:
    """Diagnostic dump: (flat index, radius, re, im) per coefficient."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.ndim == 0:
        return [(0, 0.0, float(arr), 0.0)]
    if arr.ndim > 2:
        arr = _as_2d(arr)
    coeffs = fft(arr).coefficients.ravel()
    radii = radial_frequencies(arr.shape)
    return [
        (i, float(radii[i]), float(c.real), float(c.imag))
        for i, c in enumerate(coeffs)
    ]
