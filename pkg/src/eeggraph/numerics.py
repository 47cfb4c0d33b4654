"""Shared numeric kernels: real FFT, symmetric tridiagonal eigensolver, seeded RNG.

The FFT and eigensolver are thin contracts over numpy/scipy; the wrappers pin
down the conventions the rest of the package relies on (input checks,
descending eigenvalue order, a platform-stable RNG algorithm).
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = ["rfft", "rfft_freqs", "sym_tridiag_eig", "seeded_rng", "EigenConvergenceError"]


class EigenConvergenceError(RuntimeError):
    pass


def rfft(signal, axis: int = -1) -> np.ndarray:
    """One-sided DFT ``X[k] = sum_n x[n] exp(-2j*pi*k*n/N)`` for k = 0..N//2.

    Any length is accepted; windows are transformed at their native length so
    the bin spacing is exactly ``fs / N``.
    """
    x = np.asarray(signal, dtype=float)
    if x.size == 0 or x.shape[axis] == 0:
        raise ValueError("rfft of empty input")
    return np.fft.rfft(x, axis=axis)


def rfft_freqs(n: int, sample_rate_hz: float) -> np.ndarray:
    return np.arange(n // 2 + 1) * (sample_rate_hz / n)


def sym_tridiag_eig(diag, offdiag, k_largest: int | None = None):
    """Eigenpairs of the symmetric tridiagonal matrix with the given diagonals.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues in descending
    order and eigenvectors as columns. ``k_largest`` restricts the result to
    the top-k pairs.
    """
    d = np.asarray(diag, dtype=float)
    e = np.asarray(offdiag, dtype=float)
    n = d.size
    if n == 0:
        raise ValueError("empty matrix")
    if e.size != n - 1:
        raise ValueError(f"offdiag must have length {n - 1}, got {e.size}")
    k = n if k_largest is None else int(k_largest)
    if not 1 <= k <= n:
        raise ValueError(f"k_largest must be in [1, {n}], got {k}")
    try:
        if n == 1:
            w, v = d.copy(), np.ones((1, 1))
        else:
            w, v = scipy.linalg.eigh_tridiagonal(d, e, select="i", select_range=(n - k, n - 1))
    except scipy.linalg.LinAlgError as exc:
        raise EigenConvergenceError(str(exc)) from exc
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def seeded_rng(seed) -> np.random.Generator:
    """Generator backed by Philox-4x64 (counter-based), stable across platforms.

    ``seed`` is an int, a sequence of ints, or a SeedSequence.
    """
    if isinstance(seed, (list, tuple)):
        seed = np.random.SeedSequence([int(s) for s in seed])
    elif not isinstance(seed, np.random.SeedSequence):
        seed = int(seed)
    return np.random.Generator(np.random.Philox(seed))
