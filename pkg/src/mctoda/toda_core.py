"""Factorization problem and dressed operators of the multicomponent 2D Toda hierarchy.

The free dressings ``W0 = sum_k E_kk Lambda^{s_k} exp(sum_j t_jk Lambda^j)`` and
``W0bar = sum_k E_kk Lambda^{-s_kbar} exp(sum_j tbar_jk Lambda^{-j})`` have
constant diagonal coefficients, so they commute with ``Lambda`` and conjugate
``n`` in closed form.  Only ``S`` and ``Sbar`` carry truncation error; all
dressed operators are assembled from them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .core_ops import (
    BandedOperator,
    LatticeWindow,
    WindowExhausted,
    band_mul,
    commutator,
    split_project,
    to_dense,
)
from .gspec import GSpec, realize
from .indices import Idx


class ChargeViolation(ValueError):
    pass


class FactorizationError(RuntimeError):
    """LU breakdown without pivoting: no factorization at this ``(s, t)``."""


# -- parameters ---------------------------------------------------------------

TimeKey = Tuple[int, int, bool]  # (j, k, bar)


@dataclass(frozen=True)
class DeformationParams:
    """Charges and times of one point of the hierarchy.

    ``charges`` lists ``s_1..s_N`` followed by ``s_1bar..s_Nbar``.  ``times`` maps
    ``(j, k, bar)`` to ``t_{j a}``; unbared ``j = 0`` entries are the ``t_{0k}``.
    """

    N: int = 2
    charges: Tuple[int, ...] = ()
    times: Tuple[Tuple[TimeKey, complex], ...] = ()
    n0: int = 0
    a0: Idx = Idx(2)
    a0bar: Idx = Idx(2, True)

    def __post_init__(self):
        ch = tuple(int(c) for c in self.charges) or (0,) * (2 * self.N)
        if len(ch) != 2 * self.N:
            raise ChargeViolation(f"charges: expected {2 * self.N} entries, got {len(ch)}")
        if sum(ch) != 0:
            raise ChargeViolation(f"charges: total charge {sum(ch)} is not zero")
        object.__setattr__(self, "charges", ch)
        tm = {}
        for key, v in (self.times.items() if isinstance(self.times, Mapping) else self.times):
            j, k, bar = int(key[0]), int(key[1]), bool(key[2])
            if not 1 <= k <= self.N:
                raise ValueError(f"times: component {k} outside 1..{self.N}")
            if j < 0 or (bar and j == 0):
                raise ValueError(f"times: invalid order j={j} for {'bared' if bar else 'unbared'} index")
            if complex(v) != 0:
                tm[(j, k, bar)] = complex(v)
        object.__setattr__(self, "times", tuple(sorted(tm.items())))
        for name in ("a0", "a0bar"):
            object.__setattr__(self, name, Idx.parse(getattr(self, name)))
        if self.a0 == Idx(1):
            raise ValueError("a0 must differ from the index 1")
        if self.a0bar == Idx(1, True):
            raise ValueError("a0bar must differ from the index 1bar")

    # accessors
    def s(self, a: Idx) -> int:
        return self.charges[a.k - 1 + (self.N if a.bar else 0)]

    def t(self, j: int, a: Idx) -> complex:
        return dict(self.times).get((j, a.k, a.bar), 0j)

    @property
    def J(self) -> int:
        return max((key[0] for key, _ in self.times), default=0)

    def series(self, k: int, bar: bool) -> np.ndarray:
        """Coefficients ``[t_0, t_1, ..., t_J]`` of the exponent for component ``k``."""
        c = np.zeros(self.J + 1, complex)
        for (j, kk, b), v in self.times:
            if kk == k and b == bar:
                c[j] = v
        return c

    # modifiers
    def with_time(self, j: int, a: Idx, value: complex) -> "DeformationParams":
        tm = dict(self.times)
        tm[(j, a.k, a.bar)] = complex(value)
        return replace(self, times=tuple(tm.items()))

    def shifted_time(self, j: int, a: Idx, delta: complex) -> "DeformationParams":
        return self.with_time(j, a, self.t(j, a) + delta)

    def with_charges(self, charges: Sequence[int]) -> "DeformationParams":
        return replace(self, charges=tuple(charges))

    def shift_charges(self, plus: Idx, minus: Idx, m: int = 1) -> "DeformationParams":
        """Apply ``T_{(plus, minus)}^m``: ``s_plus += m``, ``s_minus -= m``."""
        ch = list(self.charges)
        ch[plus.k - 1 + (self.N if plus.bar else 0)] += m
        ch[minus.k - 1 + (self.N if minus.bar else 0)] -= m
        return self.with_charges(ch)

    def to_dict(self) -> dict:
        return {
            "N": self.N,
            "charges": list(self.charges),
            "times": [[j, k, b, [v.real, v.imag]] for (j, k, b), v in self.times],
            "n0": self.n0,
            "a0": str(self.a0),
            "a0bar": str(self.a0bar),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeformationParams":
        times = tuple(((int(j), int(k), bool(b)), complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v))
                      for j, k, b, v in d.get("times", []))
        return cls(N=int(d.get("N", 2)), charges=tuple(d.get("charges", ())), times=times,
                   n0=int(d.get("n0", 0)), a0=Idx.parse(d.get("a0", "2")), a0bar=Idx.parse(d.get("a0bar", "2b")))


@dataclass(frozen=True)
class FactorConfig:
    """Truncation settings.  ``window`` is where ``S``, ``Sbar`` are returned."""

    K: int = 6
    window: Tuple[int, int] = (-16, 16)
    exp_order: int = 0  # 0: max(3K, 24)
    skip: int = 0  # rows discarded at the top of the LU section; 0: 4K + 8
    row_depth: int = 0  # depth of the row-wise solver; 0: 3K + 6
    margin: int = -1  # guard rows added on both sides of ``window``; -1: 3K

    @property
    def guard(self) -> int:
        return 3 * self.K if self.margin < 0 else self.margin

    @property
    def exp_terms(self) -> int:
        return self.exp_order or max(3 * self.K, 24)

    @property
    def skip_rows(self) -> int:
        return self.skip or 4 * self.K + 8

    @property
    def depth(self) -> int:
        return self.row_depth or 3 * self.K + 6

    @property
    def lattice_window(self) -> LatticeWindow:
        return LatticeWindow(*self.window)

    @property
    def solve_window(self) -> LatticeWindow:
        """Rows where ``S``, ``Sbar`` are returned: ``window`` plus the guard margin."""
        return LatticeWindow(self.window[0] - self.guard, self.window[1] + self.guard)


# -- free dressings -----------------------------------------------------------

def exp_series(c: np.ndarray, order: int) -> np.ndarray:
    """Coefficients ``f_0..f_order`` of ``exp(c_0 + c_1 x + c_2 x^2 + ...)``."""
    c = np.asarray(c, complex)
    f = np.zeros(order + 1, complex)
    f[0] = 1.0
    for m in range(1, order + 1):
        acc = 0j
        for j in range(1, min(m, len(c) - 1) + 1):
            acc += j * c[j] * f[m - j]
        f[m] = acc / m
    return f * np.exp(c[0]) if len(c) else f


def _diag_bands(params: DeformationParams, which: str, order: int) -> Dict[int, np.ndarray]:
    """Constant bands of ``W0``, ``W0^{-1}``, ``W0bar`` or ``W0bar^{-1}``."""
    N = params.N
    out: Dict[int, np.ndarray] = {}
    for k in range(1, N + 1):
        bar = which.startswith("bar")
        c = params.series(k, bar)
        inverse = which.endswith("inv")
        f = exp_series(-c if inverse else c, order)
        s = params.s(Idx(k, bar))
        # unbared: Lambda^{s} e^{T};  bared: Lambda^{-s} e^{Tbar(Lambda^{-1})}
        for m, fm in enumerate(f):
            if fm == 0:
                continue
            if not bar:
                j = (s + m) if not inverse else (-s + m)
            else:
                j = (-s - m) if not inverse else (s - m)
            blk = out.setdefault(j, np.zeros((N, N), complex))
            blk[k - 1, k - 1] += fm
    return out


def build_initial_dressings(params: DeformationParams, window, order: int = 6) -> Tuple[BandedOperator, BandedOperator]:
    """``(W0, W0bar)`` with exponential series truncated after ``order`` terms."""
    if params.J > order:
        raise ValueError(f"time order J={params.J} exceeds the band budget {order}")
    w = window if isinstance(window, LatticeWindow) else LatticeWindow(*window)
    W0 = BandedOperator.from_constant_bands(_diag_bands(params, "plain", order), params.N, w)
    W0b = BandedOperator.from_constant_bands(_diag_bands(params, "bar", order), params.N, w)
    return W0, W0b


def free_conjugated_n(params: DeformationParams, window, bar: bool = False) -> BandedOperator:
    """``W0 n W0^{-1} = n + sum_k E_kk (s_k + sum_j j t_jk Lambda^j)`` and the bared analogue
    ``W0bar n W0bar^{-1} = n - sum_k E_kk (s_kbar + sum_j j tbar_jk Lambda^{-j})``."""
    N = params.N
    w = window if isinstance(window, LatticeWindow) else LatticeWindow(*window)
    bands: Dict[int, np.ndarray] = {0: np.zeros((N, N), complex)}
    sign = -1.0 if bar else 1.0
    for k in range(1, N + 1):
        a = Idx(k, bar)
        bands[0][k - 1, k - 1] += sign * params.s(a)
        for j in range(1, params.J + 1):
            tj = params.t(j, a)
            if tj:
                jj = -j if bar else j
                bands.setdefault(jj, np.zeros((N, N), complex))[k - 1, k - 1] += sign * j * tj
    D = BandedOperator.from_constant_bands(bands, N, w)
    return BandedOperator.lattice_n(N, w) + D


# -- factorization ------------------------------------------------------------

def _operator_A(g: GSpec, params: DeformationParams, section: LatticeWindow, order: int) -> BandedOperator:
    """``A = W0 g W0bar^{-1}`` valid on every row of ``section``."""
    N = params.N
    pad = 2 * (order + g.bandwidth + max(abs(c) for c in params.charges)) + 4 * g.bandwidth + 8
    big = LatticeWindow(section.n_min - pad, section.n_max + pad)
    w0 = {j: np.diag(c) for j, c in _diag_bands(params, "plain", order).items()}
    wbi = {j: np.diag(c) for j, c in _diag_bands(params, "bar_inv", order).items()}
    G = realize(g, N, big)
    reach_hi = max(w0) + max(G.bands) + max(wbi)
    reach_lo = min(w0) + min(G.bands) + min(wbi)
    if max(reach_hi, -reach_lo) > pad:
        raise WindowExhausted(f"window exhausted: band reach {reach_lo}..{reach_hi} exceeds padding {pad}")
    # W0, W0bar^{-1} have constant diagonal bands: A_m(n) = sum diag(w_p) G_b(n+p) diag(wb_q)
    W = section.width
    off = section.n_min - big.n_min
    H: Dict[int, np.ndarray] = {}
    for p, wp in w0.items():
        for b, gb in G.bands.items():
            term = wp[None, :, None] * gb[off + p:off + p + W]
            H[p + b] = H[p + b] + term if (p + b) in H else term
    bands: Dict[int, np.ndarray] = {}
    for c, hc in H.items():
        for q, wq in wbi.items():
            term = hc * wq[None, None, :]
            bands[c + q] = bands[c + q] + term if (c + q) in bands else term
    return BandedOperator(N, section, bands)


def block_lu(M: np.ndarray, N: int, tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    """Block LU without pivoting, ``M = Lo @ Up`` with unit block-lower ``Lo``.

    Elimination is confined to the block band of ``M`` (no fill outside it).  A
    pivot block whose smallest singular value falls below ``tol`` times the
    matrix scale is a breakdown.
    """
    A = np.array(M, dtype=complex)
    nb = A.shape[0] // N
    r, c = np.nonzero(A)
    bl = int(np.max(r // N - c // N, initial=0))
    bu = int(np.max(c // N - r // N, initial=0))
    Lo = np.eye(A.shape[0], dtype=complex)
    scale = max(np.max(np.abs(A)), 1e-300)
    for b in range(nb):
        sl = slice(b * N, (b + 1) * N)
        rows = slice((b + 1) * N, min(nb, b + bl + 1) * N)
        cols = slice((b + 1) * N, min(nb, b + bu + 1) * N)
        P = A[sl, sl]
        smin = np.linalg.svd(P, compute_uv=False)[-1]
        if not np.isfinite(smin) or smin < tol * scale:
            raise FactorizationError(
                f"factorization not solvable at this (s,t): pivot block {b} has singular value {smin:.3e}")
        Lo[rows, sl] = A[rows, sl] @ np.linalg.inv(P)
        A[rows, cols] -= Lo[rows, sl] @ A[sl, cols]
        A[rows, sl] = 0
    return Lo, A


def _read_bands(M: np.ndarray, N: int, section: LatticeWindow, out: LatticeWindow, js: Iterable[int]) -> BandedOperator:
    B = M.reshape(section.width, N, section.width, N).transpose(0, 2, 1, 3)
    rows = out.indices() - section.n_min
    bands = {}
    for j in js:
        cols = rows + j
        if cols.min() < 0 or cols.max() >= section.width:
            raise WindowExhausted(f"window exhausted: band {j} leaves the LU section")
        bands[j] = B[rows, cols]
    return BandedOperator(N, out, bands)


@dataclass(frozen=True, eq=False)
class Factorization:
    params: DeformationParams
    gspec: GSpec
    config: FactorConfig
    S: BandedOperator
    Sbar: BandedOperator
    Sinv: BandedOperator
    Sbar_inv: BandedOperator
    A: BandedOperator  # restricted to the LU section

    def residual(self) -> float:
        """``|S A - Sbar|`` over bands ``|j| <= K - 1``, relative to ``max(1, |Sbar|)``."""
        K = self.config.K
        R = band_mul(self.S, self.A.truncate(-2 * K, 2 * K), K).restrict(self.S.window) - self.Sbar
        return R.max_norm(range(-(K - 1), K)) / max(1.0, self.Sbar.max_norm())


def birkhoff_factorize(g: GSpec, params: DeformationParams, config: FactorConfig = FactorConfig()) -> Factorization:
    """Solve ``S W0 g = Sbar W0bar`` by block LU of ``A = W0 g W0bar^{-1}``.

    ``S``, ``Sbar`` are returned on ``config.solve_window``; the LU acts on
    ``[w0 - skip, w1 + K]`` of that window, the first ``skip`` rows absorbing the
    effect of cutting the bi-infinite matrix at the top.
    """
    K = config.K
    if params.J > K:
        raise ValueError(f"time order J={params.J} exceeds the band budget K={K}")
    out = config.solve_window
    section = LatticeWindow(out.n_min - config.skip_rows, out.n_max + K)
    A = _operator_A(g, params, section, config.exp_terms)
    Ad = to_dense(A)
    N = params.N
    Lo, Up = block_lu(Ad, N)
    n = Lo.shape[0]
    # only the columns that feed the returned bands are solved for
    lo_c = (out.n_min - K - section.n_min) * N
    hi_c = (out.n_max + K + 1 - section.n_min) * N
    E = np.zeros((n, n), complex)
    E[np.arange(lo_c, hi_c), np.arange(lo_c, hi_c)] = 1
    Linv = np.zeros((n, n), complex)
    Linv[lo_c:, lo_c:hi_c] = scipy.linalg.solve_triangular(Lo[lo_c:, lo_c:], E[lo_c:, lo_c:hi_c],
                                                           lower=True, unit_diagonal=True)
    # block upper triangular: pivot blocks are full, so no scalar triangular solve
    Uinv = np.zeros((n, n), complex)
    Uinv[:hi_c, lo_c:hi_c] = np.linalg.solve(Up[:hi_c, :hi_c], E[:hi_c, lo_c:hi_c])
    S = _read_bands(Linv, N, section, out, range(-K, 1))
    Sinv = _read_bands(Lo, N, section, out, range(-K, 1))
    Sbar = _read_bands(Up, N, section, out, range(0, K + 1))
    Sbar_inv = _read_bands(Uinv, N, section, out, range(0, K + 1))
    # exact structural band 0 of S
    eye = np.broadcast_to(np.eye(N), (out.width, N, N))
    S = BandedOperator(N, out, {**S.bands, 0: eye})
    Sinv = BandedOperator(N, out, {**Sinv.bands, 0: eye})
    return Factorization(params, g, config, S, Sbar, Sinv, Sbar_inv, A)


def solve_rowwise(fact: Factorization) -> Tuple[BandedOperator, BandedOperator]:
    """Independent solver: for each row ``n`` solve the local system
    ``sum_{i=0}^{d} phi_i(n) A(n - i, c) = 0`` for ``c = n-d .. n-1``.

    Returns ``(S, Sbar)`` with ``Sbar = (S A)_{0..K}``.
    """
    K, d = fact.config.K, fact.config.depth
    A = fact.A
    N = A.N
    out = fact.S.window
    sec = A.window
    if out.n_min - d < sec.n_min:
        raise WindowExhausted("window exhausted: row-wise depth exceeds the LU section")
    Ad = to_dense(A)
    B = Ad.reshape(sec.width, N, sec.width, N)
    phis = {-i: np.zeros((out.width, N, N), complex) for i in range(0, K + 1)}
    for r, n in enumerate(out.indices()):
        lo = n - d - sec.n_min
        hi = n - sec.n_min  # exclusive: columns n-d .. n-1
        blk = B[lo:hi, :, lo:hi, :].reshape(d * N, d * N)
        rhs = -B[hi, :, lo:hi, :].reshape(N, d * N)
        X = np.linalg.solve(blk.T, rhs.T).T  # X @ blk = rhs
        Xb = X.reshape(N, d, N)  # block c corresponds to phi_{d-c}
        for i in range(1, K + 1):
            phis[-i][r] = Xb[:, d - i, :]
        phis[0][r] = np.eye(N)
    S = BandedOperator(N, out, phis)
    Sbar = band_mul(S, A.truncate(-K, 2 * K)).restrict(out).truncate(0, K)
    return S, Sbar


def solver_agreement(fact: Factorization) -> float:
    S2, Sb2 = solve_rowwise(fact)
    K = fact.config.K
    dS = (fact.S - S2).max_norm(range(-K, 1))
    dSb = (fact.Sbar - Sb2).max_norm(range(0, K + 1))
    return max(dS, dSb) / max(1.0, fact.S.max_norm(), fact.Sbar.max_norm())


# -- dressed state ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DressedState:
    """All dressed operators of one factorization.  Built lazily, cached per instance."""

    fact: Factorization

    @property
    def params(self) -> DeformationParams:
        return self.fact.params

    @property
    def K(self) -> int:
        return self.fact.config.K

    @property
    def N(self) -> int:
        return self.fact.params.N

    @property
    def S(self):
        return self.fact.S

    @property
    def Sbar(self):
        return self.fact.Sbar

    def _conj(self, X: BandedOperator, bar: bool) -> BandedOperator:
        if bar:
            return band_mul(self.fact.Sbar, band_mul(X, self.fact.Sbar_inv), self.K)
        return band_mul(self.fact.S, band_mul(X, self.fact.Sinv), self.K)

    def _E(self, k: int) -> np.ndarray:
        E = np.zeros((self.N, self.N))
        E[k - 1, k - 1] = 1
        return E

    @cached_property
    def L(self) -> BandedOperator:
        return self._conj(BandedOperator.shift(1, self.N, self.S.window), False)

    @cached_property
    def Linv(self) -> BandedOperator:
        return self._conj(BandedOperator.shift(-1, self.N, self.S.window), False)

    @cached_property
    def Lbar(self) -> BandedOperator:
        return self._conj(BandedOperator.shift(1, self.N, self.Sbar.window), True)

    @cached_property
    def LbarInv(self) -> BandedOperator:
        return self._conj(BandedOperator.shift(-1, self.N, self.Sbar.window), True)

    @cached_property
    def C(self) -> Dict[int, BandedOperator]:
        return {k: self._conj(BandedOperator.shift(0, self.N, self.S.window, self._E(k)), False)
                for k in range(1, self.N + 1)}

    @cached_property
    def Cbar(self) -> Dict[int, BandedOperator]:
        return {k: self._conj(BandedOperator.shift(0, self.N, self.Sbar.window, self._E(k)), True)
                for k in range(1, self.N + 1)}

    @cached_property
    def M(self) -> BandedOperator:
        return self._conj(free_conjugated_n(self.params, self.S.window, False), False)

    @cached_property
    def Mbar(self) -> BandedOperator:
        return self._conj(free_conjugated_n(self.params, self.Sbar.window, True), True)

    @cached_property
    def W(self) -> BandedOperator:
        W0, _ = build_initial_dressings(self.params, self.S.window, self.K)
        return band_mul(self.S, W0)

    @cached_property
    def Wbar(self) -> BandedOperator:
        _, W0b = build_initial_dressings(self.params, self.Sbar.window, self.K)
        return band_mul(self.Sbar, W0b)

    def lax_power(self, j: int, bar: bool = False) -> BandedOperator:
        """``L^j`` (or ``Lbar^j``), negative ``j`` through the stored inverses."""
        base = (self.Lbar if j > 0 else self.LbarInv) if bar else (self.L if j > 0 else self.Linv)
        out = BandedOperator.identity(self.N, base.window)
        for _ in range(abs(j)):
            out = band_mul(out, base, self.K)
        return out

    def trusted_bands(self) -> range:
        """Bands certified by residual checks: the outermost bands ``+-K`` are excluded."""
        return range(-(self.K - 1), self.K)


def dress_state(fact: Factorization) -> DressedState:
    return DressedState(fact)


def factorize_and_dress(g: GSpec, params: DeformationParams, config: FactorConfig = FactorConfig()) -> DressedState:
    return dress_state(birkhoff_factorize(g, params, config))


# -- residual checks ----------------------------------------------------------

def _rel(X: BandedOperator, bands: Iterable[int], scale: float = 1.0) -> float:
    return X.max_norm(bands) / max(1.0, scale)


def verify_algebraic_relations(state: DressedState) -> Dict[str, float]:
    """Residuals of the commutation relations, band shapes and Orlov expansions."""
    K, N, p = state.K, state.N, state.params
    tb = state.trusted_bands()
    I = lambda w: BandedOperator.identity(N, w)
    r: Dict[str, float] = {}
    L, Lb, M, Mb = state.L, state.Lbar, state.M, state.Mbar
    r["S Sinv - I"] = _rel(band_mul(state.S, state.fact.Sinv, K) - I(state.S.window.shrink(K, 0)), tb)
    r["Sbar Sbarinv - I"] = _rel(band_mul(state.Sbar, state.fact.Sbar_inv, K) - I(state.Sbar.window.shrink(0, K)), tb)
    r["S A - Sbar"] = state.fact.residual()
    r["[L,M] - L"] = _rel(commutator(L, M, K) - L, tb, L.max_norm())
    r["[Lbar,Mbar] - Lbar"] = _rel(commutator(Lb, Mb, K) - Lb, tb, Lb.max_norm())
    sumC = state.C[1]
    sumCb = state.Cbar[1]
    for k in range(2, N + 1):
        sumC = sumC + state.C[k]
        sumCb = sumCb + state.Cbar[k]
    r["sum C - I"] = _rel(sumC - I(sumC.window), tb)
    r["sum Cbar - I"] = _rel(sumCb - I(sumCb.window), tb)
    worst = worst_b = worst_p = worst_pb = 0.0
    for k in range(1, N + 1):
        worst = max(worst, _rel(commutator(L, state.C[k], K), tb, L.max_norm()))
        worst_b = max(worst_b, _rel(commutator(Lb, state.Cbar[k], K), tb, Lb.max_norm()))
        for l in range(1, N + 1):
            d = state.C[k] if k == l else BandedOperator.zero(N, state.C[k].window)
            db = state.Cbar[k] if k == l else BandedOperator.zero(N, state.Cbar[k].window)
            worst_p = max(worst_p, _rel(band_mul(state.C[k], state.C[l], K) - d, tb))
            worst_pb = max(worst_pb, _rel(band_mul(state.Cbar[k], state.Cbar[l], K) - db, tb))
    r["[L,C_kk]"] = worst
    r["[Lbar,Cbar_kk]"] = worst_b
    r["C_kk C_ll - delta C_kk"] = worst_p
    r["Cbar_kk Cbar_ll - delta Cbar_kk"] = worst_pb
    # band shapes
    top = L.band(1) - np.eye(N)
    r["L top band identity"] = float(np.max(np.abs(top))) + L.max_norm(range(2, 4 * K))
    r["Lbar^-1 bottom band"] = LbarInv_shape = state.LbarInv.max_norm(range(-4 * K, -1))
    r["Lbar^-1 bottom band"] = LbarInv_shape + (0.0 if np.all(np.isfinite(state.LbarInv.band(-1))) else np.inf)
    r["C_kk upper bands"] = max(c.max_norm(range(1, 4 * K)) for c in state.C.values())
    r["Cbar_kk lower bands"] = max(c.max_norm(range(-4 * K, 0)) for c in state.Cbar.values())
    # Orlov expansions: M - sum_k C_kk (s_k + sum_j j t_jk L^j) - n in g_-
    Lpows = {j: state.lax_power(j) for j in range(1, p.J + 1)}
    Lbpows = {j: state.lax_power(-j, bar=True) for j in range(1, p.J + 1)}
    acc = M - BandedOperator.lattice_n(N, M.window)
    accb = Mb - BandedOperator.lattice_n(N, Mb.window)
    for k in range(1, N + 1):
        a, ab = Idx(k), Idx(k, True)
        X = p.s(a) * BandedOperator.identity(N, state.C[k].window)
        Xb = p.s(ab) * BandedOperator.identity(N, state.Cbar[k].window)
        for j in range(1, p.J + 1):
            if p.t(j, a):
                X = X + (j * p.t(j, a)) * Lpows[j]
            if p.t(j, ab):
                Xb = Xb + (j * p.t(j, ab)) * Lbpows[j]
        acc = acc - band_mul(state.C[k], X, K)
        accb = accb + band_mul(state.Cbar[k], Xb, K)
    r["M Orlov expansion"] = _rel(acc, range(0, 4 * K))
    r["Mbar Orlov expansion"] = _rel(accb, range(-(K - 1), 1))
    return r


def flow_derivative_check(g: GSpec, params: DeformationParams, j: int, a: Idx, h: float,
                          config: FactorConfig = FactorConfig(), state: Optional[DressedState] = None) -> float:
    """``|(W(t+h) - W(t-h))/2h - B_{ja} W(t)|`` with the common right factor ``W0(t)`` removed."""
    a = Idx.parse(a)
    if state is None:
        state = factorize_and_dress(g, params, config)
    K, N = state.K, state.N
    fp = birkhoff_factorize(g, params.shifted_time(j, a, h), config)
    fm = birkhoff_factorize(g, params.shifted_time(j, a, -h), config)
    E = np.zeros((N, N))
    E[a.k - 1, a.k - 1] = 1
    w = state.S.window
    if a.bar:
        B = split_project(band_mul(state.Cbar[a.k], state.lax_power(-j, bar=True), K), "minus")
        D = (fp.S - fm.S).scale(1 / (2 * h))
    else:
        B = split_project(band_mul(state.C[a.k], state.lax_power(j), K), "plus")
        # W0(t +- h) = W0(t) exp(+-h E_kk Lambda^j)
        terms = 12
        ep = {0: np.eye(N) - E}
        em = {0: np.eye(N) - E}
        for m in range(terms + 1):
            c = h ** m / math.factorial(m)
            ep[j * m] = ep.get(j * m, 0) + c * E
            em[j * m] = em.get(j * m, 0) + (-1) ** m * c * E
        Ep = BandedOperator.from_constant_bands(ep, N, w)
        Em = BandedOperator.from_constant_bands(em, N, w)
        D = (band_mul(fp.S, Ep) - band_mul(fm.S, Em)).scale(1 / (2 * h))
    R = D - band_mul(B, state.S)
    return R.max_norm(range(-K + max(j, 1), 2 * K))


def richardson_ratio(g: GSpec, params: DeformationParams, j: int, a: Idx, h: float = 1e-3,
                     config: FactorConfig = FactorConfig()) -> Tuple[float, float, float]:
    """``(r(h), r(h/2), r(h)/r(h/2))``."""
    st = factorize_and_dress(g, params, config)
    r1 = flow_derivative_check(g, params, j, a, h, config, st)
    r2 = flow_derivative_check(g, params, j, a, h / 2, config, st)
    return r1, r2, (r1 / r2 if r2 > 0 else float("nan"))


# -- string equations ---------------------------------------------------------

Monomial = Tuple[complex, int, int]  # (coefficient, i, j) for c M^i L^j


def _eval_F(state: DressedState, mono: Sequence[Monomial], bar: bool) -> Optional[BandedOperator]:
    K = state.K
    Mop = state.Mbar if bar else state.M
    acc = None
    for c, i, j in mono:
        if abs(i) + abs(j) > K:
            raise ValueError(f"monomial M^{i} L^{j} exceeds the band budget {K}")
        # bared monomials are in (Mbar, Lbar^{-1}): L-power j means Lbar^{-j}
        X = state.lax_power(-j, bar=True) if bar else state.lax_power(j)
        for _ in range(i):
            X = band_mul(Mop, X, K)
        X = X.scale(c)
        acc = X if acc is None else acc + X
    return acc


def string_residual(state: DressedState, F: Mapping[Idx, Sequence[Monomial]]) -> float:
    """Row 1 of ``sum_k F_k(M,L) C_kk - sum_k F_kbar(Mbar, Lbar^{-1}) Cbar_kk``."""
    K, N = state.K, state.N
    total = None
    for a, mono in F.items():
        a = Idx.parse(a)
        X = _eval_F(state, mono, a.bar)
        if X is None:
            continue
        C = state.Cbar[a.k] if a.bar else state.C[a.k]
        term = band_mul(X, C, K)
        term = -term if a.bar else term
        total = term if total is None else total + term
    if total is None:
        return 0.0
    E11 = np.zeros((N, N))
    E11[0, 0] = 1
    return total.left_mul_matrix(E11).max_norm(state.trusted_bands())


# -- wave functions -----------------------------------------------------------

def _exp_factor(params: DeformationParams, z: complex, bar: bool) -> np.ndarray:
    N = params.N
    d = np.zeros(N, complex)
    for k in range(1, N + 1):
        c = params.series(k, bar)
        a = Idx(k, bar)
        if bar:
            d[k - 1] = z ** (-params.s(a)) * np.exp(sum(c[j] * z ** (-j) for j in range(1, len(c))))
        else:
            d[k - 1] = z ** params.s(a) * np.exp(sum(c[j] * z ** j for j in range(len(c))))
    return d


def wave_evaluate(state: DressedState, z: complex, n: int, bar: bool = False) -> np.ndarray:
    """``psi(n, z)`` (or ``psibar``) as an ``N x N`` matrix, exponentials evaluated exactly."""
    z = complex(z)
    if z == 0:
        raise ValueError("z must be nonzero")
    X = state.Sbar if bar else state.S
    if not X.window.n_min <= n <= X.window.n_max:
        raise WindowExhausted(f"window exhausted: n={n} outside {X.window.as_tuple()}")
    acc = np.zeros((state.N, state.N), complex)
    for j, c in X.bands.items():
        acc += c[n - X.window.n_min] * z ** (n + j)
    return acc * _exp_factor(state.params, z, bar)[None, :]


def apply_to_wave(X: BandedOperator, psi: Callable[[int], np.ndarray], n: int) -> np.ndarray:
    """``(X psi)(n) = sum_b X_b(n) psi(n + b)``."""
    if not X.window.n_min <= n <= X.window.n_max:
        raise WindowExhausted(f"window exhausted: n={n} outside {X.window.as_tuple()}")
    acc = None
    for b, c in X.bands.items():
        v = c[n - X.window.n_min] @ psi(n + b)
        acc = v if acc is None else acc + v
    return np.zeros_like(psi(n)) if acc is None else acc


def contour_derivative(f: Callable[[complex], np.ndarray], z: complex, radius: Optional[float] = None,
                       points: int = 16) -> np.ndarray:
    """Derivative of a holomorphic ``f`` at ``z`` from ``points`` complex-step samples on a circle.

    The trapezoid rule on the circle is spectrally accurate, so there is no
    subtractive cancellation of the kind a real finite difference suffers.
    """
    r = radius if radius is not None else 0.05 * max(abs(z), 1e-3)
    w = np.exp(2j * np.pi * np.arange(points) / points)
    acc = 0
    for wk in w:
        acc = acc + f(z + r * wk) / wk
    return acc / (points * r)


def eq_z_residual(state: DressedState, i: int, j: int, k: int, z: complex, n: int) -> float:
    """``|M^i L^j C_kk (psi) - z^j (z d/dz)^i psi E_kk|`` at lattice point ``n``; ``i <= 1``."""
    if i not in (0, 1):
        raise ValueError("only i in {0, 1} is supported")
    K, N = state.K, state.N
    X = band_mul(state.lax_power(j), state.C[k], K)
    if i:
        X = band_mul(state.M, X, K)
    lhs = apply_to_wave(X, lambda m: wave_evaluate(state, z, m), n)
    E = np.zeros((N, N))
    E[k - 1, k - 1] = 1
    if i:
        d = contour_derivative(lambda zz: wave_evaluate(state, zz, n), z)
        rhs = z ** j * z * d @ E
    else:
        rhs = z ** j * wave_evaluate(state, z, n) @ E
    return float(np.max(np.abs(lhs - rhs)) / max(1.0, np.max(np.abs(rhs))))
