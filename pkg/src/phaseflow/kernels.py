"""Time-recurrence kernels for the selective state-space scan.

The scan is the one genuinely sequential hot loop in the package: for every
layer and stream it walks T steps updating a (channels x state) latent. Both
the forward pass and its adjoint are implemented twice:

* a numba ``@njit`` version (default when numba imports), and
* a pure-numpy version that loops over time only.

Selection: set ``PHASEFLOW_NUMBA=0`` to force the numpy path, ``=1`` to
require numba (import errors propagate). Unset means "numba if available".
Both paths share the same discretization formulas, including the small
|delta*A| Taylor fallback, so results agree to float rounding.

``benchmarks/bench_scan.py`` compares the two paths.
"""

from __future__ import annotations

import math
import os

import numpy as np

# below this, (exp(x)-1)/A is evaluated by Taylor expansion in x = delta*A
SMALL_X = 1e-8


def _resolve_numba() -> bool:
    flag = os.environ.get("PHASEFLOW_NUMBA", "").strip()
    if flag == "0":
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        if flag == "1":
            raise
        return False
    return True


USE_NUMBA = _resolve_numba()


class _BufferPool:
    """Recycle large scratch arrays: fresh mmap-backed allocations re-fault
    every page on first touch, which costs more than the scan math itself."""

    def __init__(self, max_per_key: int = 4):
        self._store: dict[tuple, list[np.ndarray]] = {}
        self._max = max_per_key

    def acquire(self, shape, dtype) -> np.ndarray:
        key = (tuple(shape), np.dtype(dtype).str)
        slot = self._store.get(key)
        if slot:
            return slot.pop()
        return np.empty(shape, dtype=dtype)

    def release(self, *arrays: np.ndarray) -> None:
        for arr in arrays:
            key = (arr.shape, arr.dtype.str)
            slot = self._store.setdefault(key, [])
            if len(slot) < self._max:
                slot.append(arr)


_pool = _BufferPool()


def zoh_discretize(delta: np.ndarray, A: np.ndarray, B: np.ndarray):
    """Zero-order-hold discretization of a diagonal continuous system.

    ``A_bar = exp(delta*A)`` and ``B_bar = ((exp(delta*A) - 1)/A) * B``,
    evaluated channelwise. Shapes broadcast; ``delta`` must be positive and
    ``A`` strictly negative. Where |delta*A| < SMALL_X the second-order Taylor
    form ``delta * (1 + delta*A/2) * B`` is used (the branch is exercised, not
    an error).
    """
    delta = np.asarray(delta)
    if not np.issubdtype(delta.dtype, np.floating):
        delta = delta.astype(np.float64)
    A = np.asarray(A)
    B = np.asarray(B)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize requires delta > 0 elementwise")
    if np.any(np.asarray(A) >= 0):
        raise ValueError("zoh_discretize requires A < 0 elementwise")
    x = delta * A
    em = np.expm1(x)
    a_bar = em + 1.0
    small = np.abs(x) < SMALL_X
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(small, delta * (1.0 + 0.5 * x), em / np.where(small, 1.0, A))
    a_bar = np.where(small, 1.0 + x + 0.5 * x * x, a_bar)
    return a_bar, factor * B


# ---------------------------------------------------------------------------
# pure-numpy path: python loop over T, vectorized over (batch, channel, state)
# ---------------------------------------------------------------------------


def _discretize_arrays(delta, A):
    """a_bar and f = (exp(x)-1)/A for x = delta[...,None]*A, fallback applied."""
    x = delta[..., None] * A  # [B,T,D,N]
    em = np.expm1(x)
    small = np.abs(x) < SMALL_X
    a_bar = np.where(small, 1.0 + x + 0.5 * x * x, em + 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(small, delta[..., None] * (1.0 + 0.5 * x), em / np.where(small, 1.0, A))
    return a_bar, f


def _scan_forward_np(delta, A, Bm, Cm, w):
    Bsz, T, D = delta.shape
    N = A.shape[1]
    a_bar, f = _discretize_arrays(delta, A)
    h = np.zeros((Bsz, T, D, N), dtype=delta.dtype)
    y = np.zeros((Bsz, T, D), dtype=delta.dtype)
    state = np.zeros((Bsz, D, N), dtype=delta.dtype)
    for t in range(T):
        b_bar = f[:, t] * Bm[:, t, None, :]
        state = a_bar[:, t] * state + b_bar * w[:, t, :, None]
        h[:, t] = state
        y[:, t] = np.einsum("bdn,bn->bd", state, Cm[:, t])
    return y, h


def _scan_backward_np(gy, delta, A, Bm, Cm, w, h):
    Bsz, T, D = delta.shape
    N = A.shape[1]
    a_bar, f = _discretize_arrays(delta, A)
    x = delta[..., None] * A
    em = np.expm1(x)
    small = np.abs(x) < SMALL_X
    with np.errstate(divide="ignore", invalid="ignore"):
        dfdA = np.where(
            small,
            0.5 * delta[..., None] ** 2,
            (x * (em + 1.0) - em) / np.where(small, 1.0, A * A),
        )

    ghs = np.zeros_like(h)
    carry = np.zeros((Bsz, D, N), dtype=delta.dtype)
    for t in range(T - 1, -1, -1):
        gh = gy[:, t, :, None] * Cm[:, t, None, :] + carry
        ghs[:, t] = gh
        carry = a_bar[:, t] * gh

    h_prev = np.zeros_like(h)
    h_prev[:, 1:] = h[:, :-1]
    b_bar = f * Bm[:, :, None, :]

    gw = np.einsum("btdn,btdn->btd", ghs, b_bar)
    gCm = np.einsum("btd,btdn->btn", gy, h)
    gBm = np.einsum("btdn,btdn,btd->btn", ghs, f, w)
    ga_bar = ghs * h_prev
    gb_bar = ghs * w[..., None]
    gdelta = np.einsum("btdn,dn,btdn->btd", ga_bar, A, a_bar) + np.einsum(
        "btdn,btdn,btn->btd", gb_bar, a_bar, Bm
    )
    gA = np.einsum("btdn,btd,btdn->dn", ga_bar, delta, a_bar) + np.einsum(
        "btdn,btn,btdn->dn", gb_bar, Bm, dfdA
    )
    return gdelta, gA, gBm, gCm, gw


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit, prange

    @njit(cache=True, parallel=True)
    def _scan_forward_nb(delta, A, invA, Bm, Cm, w, y, h):  # pragma: no cover - jit
        Bsz, T, D = delta.shape
        N = A.shape[1]
        for bd in prange(Bsz * D):
            b = bd // D
            d = bd % D
            state = np.zeros(N, dtype=delta.dtype)
            for t in range(T):
                dt = delta[b, t, d]
                wv = w[b, t, d]
                acc = 0.0
                for n in range(N):
                    xv = dt * A[d, n]
                    if abs(xv) < SMALL_X:
                        abar = 1.0 + xv + 0.5 * xv * xv
                        bbar = dt * (1.0 + 0.5 * xv) * Bm[b, t, n]
                    else:
                        em = math.expm1(xv)
                        abar = em + 1.0
                        bbar = (em * invA[d, n]) * Bm[b, t, n]
                    sv = abar * state[n] + bbar * wv
                    state[n] = sv
                    h[b, t, d, n] = sv
                    acc += Cm[b, t, n] * sv
                y[b, t, d] = acc

    @njit(cache=True, parallel=True)
    def _scan_backward_state_nb(
        gy, delta, A, invA, Bm, Cm, w, h, ghs, fbuf, gdelta, gw, gA
    ):  # pragma: no cover - jit
        Bsz, T, D = delta.shape
        N = A.shape[1]
        for d in prange(D):
            for b in range(Bsz):
                carry = np.zeros(N, dtype=delta.dtype)
                for t in range(T - 1, -1, -1):
                    dt = delta[b, t, d]
                    wv = w[b, t, d]
                    gyv = gy[b, t, d]
                    gd = 0.0
                    gwv = 0.0
                    for n in range(N):
                        xv = dt * A[d, n]
                        if abs(xv) < SMALL_X:
                            abar = 1.0 + xv + 0.5 * xv * xv
                            f = dt * (1.0 + 0.5 * xv)
                            dfdA = 0.5 * dt * dt
                        else:
                            em = math.expm1(xv)
                            abar = em + 1.0
                            f = em * invA[d, n]
                            dfdA = (xv * abar - em) * invA[d, n] * invA[d, n]
                        gh = gyv * Cm[b, t, n] + carry[n]
                        ghs[b, t, d, n] = gh
                        fbuf[b, t, d, n] = f
                        hp = h[b, t - 1, d, n] if t > 0 else 0.0
                        ga = gh * hp
                        gb = gh * wv
                        gwv += gh * f * Bm[b, t, n]
                        gd += ga * A[d, n] * abar + gb * abar * Bm[b, t, n]
                        gA[d, n] += ga * dt * abar + gb * Bm[b, t, n] * dfdA
                        carry[n] = abar * gh
                    gdelta[b, t, d] = gd
                    gw[b, t, d] = gwv

    @njit(cache=True, parallel=True)
    def _scan_backward_proj_nb(gy, w, h, ghs, fbuf, gBm, gCm):  # pragma: no cover - jit
        Bsz, T, D, N = ghs.shape
        for b in prange(Bsz):
            for t in range(T):
                for d in range(D):
                    gyv = gy[b, t, d]
                    wv = w[b, t, d]
                    for n in range(N):
                        gCm[b, t, n] += gyv * h[b, t, d, n]
                        gBm[b, t, n] += ghs[b, t, d, n] * fbuf[b, t, d, n] * wv


def scan_forward(delta, A, Bm, Cm, w):
    """Run the selective scan.

    delta: [B,T,D] positive timescales; A: [D,N] negative diagonal; Bm, Cm:
    [B,T,N] input/output projections; w: [B,T,D] normalized drive. Returns
    y: [B,T,D] and the full state history h: [B,T,D,N] (kept for the adjoint).
    """
    if USE_NUMBA:
        Bsz, T, D = delta.shape
        N = A.shape[1]
        y = np.empty((Bsz, T, D), dtype=delta.dtype)
        h = _pool.acquire((Bsz, T, D, N), delta.dtype)
        _scan_forward_nb(delta, A, 1.0 / A, Bm, Cm, w, y, h)
        return y, h
    return _scan_forward_np(delta, A, Bm, Cm, w)


def release_state(h: np.ndarray) -> None:
    """Hand the forward state history back once the adjoint consumed it."""
    _pool.release(h)


def scan_backward(gy, delta, A, Bm, Cm, w, h):
    """Adjoint of :func:`scan_forward` w.r.t. all five inputs."""
    if USE_NUMBA:
        Bsz, T, D = delta.shape
        N = A.shape[1]
        ghs = _pool.acquire((Bsz, T, D, N), delta.dtype)
        fbuf = _pool.acquire((Bsz, T, D, N), delta.dtype)
        gdelta = np.empty((Bsz, T, D), dtype=delta.dtype)
        gw = np.empty((Bsz, T, D), dtype=delta.dtype)
        gA = np.zeros((D, N), dtype=delta.dtype)
        _scan_backward_state_nb(gy, delta, A, 1.0 / A, Bm, Cm, w, h, ghs, fbuf,
                                gdelta, gw, gA)
        gBm = np.zeros((Bsz, T, N), dtype=delta.dtype)
        gCm = np.zeros((Bsz, T, N), dtype=delta.dtype)
        _scan_backward_proj_nb(gy, w, h, ghs, fbuf, gBm, gCm)
        _pool.release(ghs, fbuf)
        return gdelta, gA, gBm, gCm, gw
    return _scan_backward_np(gy, delta, A, Bm, Cm, w, h)


def scan_step(delta_t, A, Bm_t, Cm_t, w_t, state):
    """One incremental step: same update rule as one t-slice of the scan.

    delta_t, w_t: [B,D]; Bm_t, Cm_t: [B,N]; state: [B,D,N] (mutated copy is
    returned, the argument is left untouched). Returns (y_t [B,D], new state).
    """
    a_bar, f = _discretize_arrays(delta_t[:, None, :], A)
    a_bar, f = a_bar[:, 0], f[:, 0]
    b_bar = f * Bm_t[:, None, :]
    new_state = a_bar * state + b_bar * w_t[:, :, None]
    y = np.einsum("bdn,bn->bd", new_state, Cm_t)
    return y, new_state
