"""Scalar shift-operator layer: first-row dressings, scalar Lax and Orlov operators.

For a fixed index ``a`` and family (unbared ``T_a`` or bared ``Tbar_a``) every
scalar field lives on the line of charge vectors ``s + m (e_plus - e_minus)``.
A series ``sum_j c_j(m) T^j`` composes like a scalar banded operator in ``m``.
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core_ops import BandedOperator, LatticeWindow, band_mul, split_project
from .gspec import GSpec
from .indices import Idx, all_indices
from .toda_core import (
    DeformationParams,
    DressedState,
    FactorConfig,
    apply_to_wave,
    factorize_and_dress,
    wave_evaluate,
)

DEFAULT_JS = 3
# sample radii: the series for psi lives near z = infinity, that for psibar near 0
ROW_RADIUS = 60.0


class DegenerateDressing(ValueError):
    pass


class CacheMiss(KeyError):
    pass


# -- s-grid -------------------------------------------------------------------

def shift_pair(a: Idx, bared_family: bool, params: DeformationParams) -> Tuple[Idx, Idx]:
    """``(plus, minus)`` with ``T_a = T_(plus, minus)``."""
    if not bared_family:
        return (a, params.a0) if a == Idx(1) else (a, Idx(1))
    return (a, params.a0bar) if a == Idx(1, True) else (a, Idx(1, True))


def sg(a: Idx) -> int:
    return a.sg


def nu(a: Idx) -> int:
    return 1 if (not a.bar and a.k != 1) else 0


class SGridCache:
    """Memo of dressed states keyed by ``(charges, times)``; insert-or-get is locked."""

    def __init__(self, gspec: GSpec, config: FactorConfig):
        self.gspec = gspec
        self.config = config
        self._states: Dict[tuple, DressedState] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(params: DeformationParams) -> tuple:
        return (params.charges, params.times)

    def __len__(self):
        return len(self._states)

    def __contains__(self, params: DeformationParams) -> bool:
        return self.key(params) in self._states

    def points(self) -> List[tuple]:
        return [k[0] for k in self._states]

    def get(self, params: DeformationParams, build: bool = True) -> DressedState:
        k = self.key(params)
        st = self._states.get(k)
        if st is not None:
            return st
        if not build:
            raise CacheMiss(f"charge vector {params.charges} not in cache")
        try:
            st = factorize_and_dress(self.gspec, params, self.config)
        except Exception as e:  # surface the offending point
            raise type(e)(f"{e} [at charges {params.charges}]") from e
        with self._lock:
            return self._states.setdefault(k, st)

    def states(self) -> Iterable[DressedState]:
        return list(self._states.values())


def grid_generators(params: DeformationParams) -> List[Tuple[Idx, Idx]]:
    gens = set()
    for a in all_indices(params.N):
        for fam in (False, True):
            gens.add(shift_pair(a, fam, params))
    return sorted(gens)


def grid_points(params: DeformationParams, radius: int) -> List[DeformationParams]:
    """All charge vectors within ``radius`` applications of any ``T_a^{+-1}``, ``Tbar_a^{+-1}``."""
    frontier = [params]
    seen = {params.charges}
    out = [params]
    for _ in range(radius):
        nxt = []
        for p in frontier:
            for plus, minus in grid_generators(params):
                for m in (1, -1):
                    q = p.shift_charges(plus, minus, m)
                    if q.charges not in seen:
                        seen.add(q.charges)
                        nxt.append(q)
        out.extend(nxt)
        frontier = nxt
    return out


def build_sgrid_states(gspec: GSpec, params: DeformationParams, radius: int,
                       config: FactorConfig = FactorConfig(K=16, window=(-3, 3)),
                       workers: int = 1) -> SGridCache:
    """Cache of dressed states on the grid of radius ``radius``; factorizations run on ``workers`` threads.

    Verification routines extend the cache on demand along the lines they need.
    """
    cache = SGridCache(gspec, config)
    pts = grid_points(params, radius)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(cache.get, pts))
    else:
        for q in pts:
            cache.get(q)
    return cache


# -- shift series -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ShiftOpSeries:
    """``sum_j c_j(m) T^j`` on the line of ``(a, family)``.

    ``coeffs[j]`` is an array over the line positions ``window``; entries that
    depend on data outside the computed grid are NaN, so validity is tracked per
    coefficient rather than by shrinking the window.
    """

    a: Idx
    bared_family: bool
    window: LatticeWindow
    coeffs: Mapping[int, np.ndarray]

    def _wrap(self, coeffs):
        return ShiftOpSeries(self.a, self.bared_family, self.window, dict(sorted(coeffs.items())))

    def _shifted(self, c: np.ndarray, i: int) -> np.ndarray:
        """``m -> c(m + i)`` on the window, NaN where ``m + i`` falls outside."""
        out = np.full_like(c, np.nan)
        W = len(c)
        if i >= 0:
            out[:W - i] = c[i:] if i < W else out[:0]
        else:
            out[-i:] = c[:W + i] if -i < W else out[:0]
        return out

    def __matmul__(self, other: "ShiftOpSeries") -> "ShiftOpSeries":
        out: Dict[int, np.ndarray] = {}
        for i, x in self.coeffs.items():
            for j, y in other.coeffs.items():
                term = x * self._shifted(y, i)
                out[i + j] = out[i + j] + term if (i + j) in out else term
        return self._wrap(out)

    def __add__(self, other: "ShiftOpSeries") -> "ShiftOpSeries":
        out = dict(self.coeffs)
        for j, c in other.coeffs.items():
            out[j] = out[j] + c if j in out else c
        return self._wrap(out)

    def __sub__(self, other: "ShiftOpSeries") -> "ShiftOpSeries":
        return self + other.scale(-1)

    def scale(self, c) -> "ShiftOpSeries":
        return self._wrap({j: c * v for j, v in self.coeffs.items()})

    def truncate(self, lo: Optional[int] = None, hi: Optional[int] = None) -> "ShiftOpSeries":
        return self._wrap({j: v for j, v in self.coeffs.items()
                           if (lo is None or j >= lo) and (hi is None or j <= hi)})

    def coeff(self, j: int, m: int = 0) -> complex:
        c = self.coeffs.get(j)
        if c is None:
            return 0j
        v = c[m - self.window.n_min]
        if not np.isfinite(v):
            raise CacheMiss(f"coefficient of T^{j} at line position {m} needs charges outside the grid")
        return complex(v)

    def bands(self) -> List[int]:
        return list(self.coeffs)

    def apply(self, field: Callable[[int], np.ndarray], m: int = 0):
        """``sum_j c_j(m) field(m + j)``."""
        acc = 0
        for j in self.coeffs:
            c = self.coeff(j, m)
            if c != 0:
                acc = acc + c * field(m + j)
        return acc

    @classmethod
    def from_function(cls, a, fam, window, j, f) -> "ShiftOpSeries":
        w = window if isinstance(window, LatticeWindow) else LatticeWindow(*window)
        return cls(a, fam, w, {j: np.asarray(f(w.indices()), complex) * np.ones(w.width)})

    @classmethod
    def constant(cls, a, fam, value, window) -> "ShiftOpSeries":
        return cls.from_function(a, fam, window, 0, lambda m: value)

    @classmethod
    def generator(cls, a, fam, j, window) -> "ShiftOpSeries":
        return cls.from_function(a, fam, window, j, lambda m: 1.0)


def projection(T: ShiftOpSeries, params: DeformationParams, part: str = "plus") -> ShiftOpSeries:
    """Splitting of the shift algebras.

    Unbared family: ``+`` keeps ``j > 0`` (``j >= 0`` for ``a = 1``).  Bared family:
    ``a = 1`` keeps ``j >= 0``; ``a = 1bar`` with ``a0bar = 1`` keeps ``j > 0``;
    otherwise ``+`` is ``sum_{j>0} c_j (Tbar^j - 1)``.  The complement is ``T - T_+``.
    """
    a, fam = T.a, T.bared_family
    if not fam:
        plus = T.truncate(lo=0) if a == Idx(1) else T.truncate(lo=1)
    elif a == Idx(1):
        plus = T.truncate(lo=0)
    elif a == Idx(1, True) and params.a0bar == Idx(1):
        plus = T.truncate(lo=1)
    else:
        plus = T.truncate(lo=1)
        const = sum(plus.coeffs.values(), np.zeros(T.window.width, complex))
        plus = plus - ShiftOpSeries(a, fam, T.window, {0: const})
    if part == "plus":
        return plus
    if part == "complement":
        return T - plus
    raise ValueError(f"unknown part {part!r}")


def shift_apply(T: ShiftOpSeries, field: Callable[[int], np.ndarray], point: int = 0):
    """``sum_j c_j(point) field(point + j)`` with ``point`` a position on the line of ``T``."""
    return T.apply(field, point)


def invert_lower(X: ShiftOpSeries, depth: int) -> ShiftOpSeries:
    """Inverse of a series with bands ``<= 0`` and nonvanishing band 0, to ``depth`` terms."""
    x0 = X.coeffs.get(0)
    if x0 is None or np.any(np.abs(x0[np.isfinite(x0)]) < 1e-300):
        raise DegenerateDressing("degenerate scalar dressing: leading coefficient vanishes")
    y = {0: 1.0 / x0}
    for m in range(1, depth + 1):
        acc = np.zeros(X.window.width, complex)
        for i in range(1, m + 1):
            xi = X.coeffs.get(-i)
            if xi is not None:
                acc = acc - xi * X._shifted(y[m - i], -i)
        y[m] = acc / x0
    return X._wrap({-m: v for m, v in y.items()})


# -- scalar dressing, Lax, Orlov ----------------------------------------------

@dataclass
class ScalarLaxOrlov:
    a: Idx
    bared_family: bool
    base: DeformationParams
    K: ShiftOpSeries
    Kinv: ShiftOpSeries
    L: ShiftOpSeries
    Linv: ShiftOpSeries
    M: ShiftOpSeries
    js: int

    def orlov_tail(self, m: int = 0) -> Dict[int, complex]:
        """``m_{a i}``: coefficients of ``T^{-i}`` in ``K (s_a + sum j t_ja T^j) K^{-1}``, ``i >= 1``."""
        core = (self.M - ShiftOpSeries.constant(self.a, self.bared_family,
                                                self.base.n0 - nu(self.a), self.M.window)).scale(sg(self.a))
        return {i: core.coeff(-i, m) for i in range(1, self.js + 1)}

    def power(self, j: int) -> ShiftOpSeries:
        base = self.L if j >= 0 else self.Linv
        out = ShiftOpSeries.constant(self.a, self.bared_family, 1.0, base.window)
        for _ in range(abs(j)):
            out = (out @ base).truncate(-self.js)
        return out

    def monomial(self, i: int, j: int) -> ShiftOpSeries:
        """``M^i L^j`` (``L^{-1}`` for negative ``j``)."""
        X = self.power(j)
        for _ in range(i):
            X = (self.M @ X).truncate(-self.js)
        return X


def line_point(base: DeformationParams, a: Idx, fam: bool, m: int) -> DeformationParams:
    plus, minus = shift_pair(a, fam, base)
    return base.shift_charges(plus, minus, m)


def dressing_coefficients(state: DressedState, a: Idx, depth: int) -> np.ndarray:
    """``kappa_0..kappa_depth`` of the scalar dressing at this state (row 1, lattice point ``n0``)."""
    n0 = state.params.n0
    k = a.k - 1
    out = np.zeros(depth + 1, complex)
    for i in range(depth + 1):
        if a.bar:
            out[i] = state.Sbar.at(i, n0)[0, k] if i <= state.K else 0
        elif a.k == 1:
            out[i] = state.S.at(-i, n0)[0, 0] if i <= state.K else 0
        else:
            out[i] = state.S.at(-(i + 1), n0)[0, k] if i + 1 <= state.K else 0
    return out


def scalar_dressing(cache: SGridCache, base: DeformationParams, a: Idx, fam: bool, depth: int,
                    line_range: Tuple[int, int]) -> ShiftOpSeries:
    """``K_a`` with coefficients read from the grid at line positions ``line_range``."""
    w = LatticeWindow(*line_range)
    coeffs = np.zeros((depth + 1, w.width), complex)
    for col, m in enumerate(w.indices()):
        coeffs[:, col] = dressing_coefficients(cache.get(line_point(base, a, fam, int(m))), a, depth)
    return ShiftOpSeries(a, fam, w, {-i: coeffs[i] for i in range(depth + 1)})


def default_line_range(js: int, J: int, up: int = 2) -> Tuple[int, int]:
    return (-js - 1, up + J + 1)


def monomial_line_range(js: int, J: int, degree: int) -> Tuple[int, int]:
    """Line positions needed by monomials of total degree ``i + |j|``."""
    return (-js - max(1, degree - 1), max(2, degree) + J + 1)


def scalar_lax_orlov(cache: SGridCache, base: DeformationParams, a: Idx, bared_family: bool = False,
                     js: int = DEFAULT_JS, line_range: Optional[Tuple[int, int]] = None) -> ScalarLaxOrlov:
    """Scalar dressing, Lax and Orlov series of index ``a``, kept to ``js`` negative terms.

    Grid states are built on demand along the line; coefficients needing charges
    beyond ``line_range`` are NaN and raise ``CacheMiss`` when read.
    """
    a = Idx.parse(a)
    J = base.J
    line_range = line_range or default_line_range(js, J)
    depth = js + J + 1
    Kop = scalar_dressing(cache, base, a, bared_family, depth, line_range)
    Kinv = invert_lower(Kop, depth)
    w = Kop.window
    T = ShiftOpSeries.generator(a, bared_family, 1, w)
    Tinv = ShiftOpSeries.generator(a, bared_family, -1, w)
    L = (Kop @ T @ Kinv).truncate(-js)
    Linv = (Kop @ Tinv @ Kinv).truncate(-js)
    s0 = base.s(a)
    inner = ShiftOpSeries.from_function(a, bared_family, w, 0, lambda m: s0 + m)
    for j in range(1, J + 1):
        tj = base.t(j, a)
        if tj:
            inner = inner + ShiftOpSeries.constant(a, bared_family, j * tj, w)._wrap(
                {j: np.full(w.width, j * tj, complex)})
    core = (Kop @ inner @ Kinv).truncate(-js)
    M = core.scale(sg(a)) + ShiftOpSeries.constant(a, bared_family, base.n0 - nu(a), w)
    return ScalarLaxOrlov(a, bared_family, base, Kop, Kinv, L, Linv, M, js)


# -- wave fields ---------------------------------------------------------------

def vector_wave(cache: SGridCache, params: DeformationParams, a: Idx, z: complex) -> complex:
    """``Psi_a``: entry ``(1, k)`` of ``psi`` (``a = k``) or of ``psibar`` (``a = kbar``)."""
    st = cache.get(params)
    return complex(wave_evaluate(st, z, params.n0, bar=a.bar)[0, a.k - 1])


def line_wave(cache, base, a, fam, z) -> Callable[[int], complex]:
    return lambda m: vector_wave(cache, line_point(base, a, fam, m), a, z)


def _derivative(f: Callable[[complex], complex], z: complex, order: int, points: int = 24) -> complex:
    """``order``-th derivative of a holomorphic function from samples on a circle."""
    if order == 0:
        return f(z)
    r = 0.1 * abs(z)
    w = np.exp(2j * np.pi * np.arange(points) / points)
    vals = np.array([f(z + r * wk) for wk in w])
    return complex(math.factorial(order) * np.sum(vals * w ** (-order)) / (points * r ** order))


def euler_power(f: Callable[[complex], complex], z: complex, i: int) -> complex:
    """``(z d/dz)^i f`` at ``z`` for ``i <= 2``."""
    if i == 0:
        return f(z)
    if i == 1:
        return z * _derivative(f, z, 1)
    if i == 2:
        return z * _derivative(f, z, 1) + z * z * _derivative(f, z, 2)
    raise ValueError("only i <= 2 supported")


# -- verification --------------------------------------------------------------

def z_samples(bar: bool, count: int = 8, radius: Optional[float] = None) -> np.ndarray:
    r = radius if radius is not None else (1.0 / ROW_RADIUS if bar else ROW_RADIUS)
    return r * np.exp(2j * np.pi * (np.arange(count) + 0.25) / count)


def verify_row_action(cache: SGridCache, base: DeformationParams, a: Idx, i: int, j: int,
                      js: int = DEFAULT_JS, zs: Optional[Sequence[complex]] = None) -> Dict[str, float]:
    """Residuals of ``F(M_a, L_a) Psi_a = Psi_a <- F(z d/dz, z^{sg a})`` with ``F = M^i L^j``.

    Three sides are compared at each ``z``: the unbared-family scalar action, the
    bared-family scalar action and the matrix action ``E11 F(M,L) C_kk (psi)``,
    each against the derivative oracle.
    """
    a = Idx.parse(a)
    zs = z_samples(a.bar) if zs is None else zs
    st = cache.get(base)
    K = st.K
    out = {"unbared family": 0.0, "bared family": 0.0, "matrix": 0.0}
    lr = monomial_line_range(js, base.J, i + abs(j))
    slos = {fam: scalar_lax_orlov(cache, base, a, fam, js, lr) for fam in (False, True)}
    Fs = {fam: slo.monomial(i, j) for fam, slo in slos.items()}
    if a.bar:
        X = st.lax_power(-j, bar=True)
        Mop = st.Mbar
        C = st.Cbar[a.k]
    else:
        X = st.lax_power(j)
        Mop = st.M
        C = st.C[a.k]
    for _ in range(i):
        X = band_mul(Mop, X, K)
    X = band_mul(X, C, K)
    e = a.sg
    for z in zs:
        psi0 = lambda zz: vector_wave(cache, base, a, zz)
        oracle = z ** (e * j) * euler_power(psi0, z, i) if i <= 2 else np.nan
        scale = max(abs(oracle), 1e-300)
        for fam in (False, True):
            val = Fs[fam].apply(line_wave(cache, base, a, fam, z), 0)
            key = "bared family" if fam else "unbared family"
            out[key] = max(out[key], abs(val - oracle) / scale)
        mat = apply_to_wave(X, lambda n: wave_evaluate(st, z, n, bar=a.bar), base.n0)[0, a.k - 1]
        out["matrix"] = max(out["matrix"], abs(mat - oracle) / scale)
    return out


def _matrix_projected(st: DressedState, a: Idx, i: int, j: int) -> BandedOperator:
    """``E11 (F(M,L) C_kk)_+`` for unbared ``a`` or ``E11 (F(Mbar, Lbar^{-1}) Cbar_kk)_-`` for bared."""
    K, N = st.K, st.N
    if a.bar:
        X = st.lax_power(-j, bar=True)
        for _ in range(i):
            X = band_mul(st.Mbar, X, K)
        X = split_project(band_mul(X, st.Cbar[a.k], K), "minus")
    else:
        X = st.lax_power(j)
        for _ in range(i):
            X = band_mul(st.M, X, K)
        X = split_project(band_mul(X, st.C[a.k], K), "plus")
    E11 = np.zeros((N, N))
    E11[0, 0] = 1
    return X.left_mul_matrix(E11)


def verify_projection_identity(cache: SGridCache, base: DeformationParams, a: Idx, i: int, j: int,
                               js: int = DEFAULT_JS, count: int = 8) -> Dict[str, float]:
    """``F(M_a, L_a)_+ (E11 W) = E11 (F C)_{+-} W`` and siblings, on wave functions at ``count`` z-samples.

    Both families and both ``W`` and ``Wbar`` are checked; residuals are relative
    to the largest entry of the matrix side.
    """
    a = Idx.parse(a)
    st = cache.get(base)
    X = _matrix_projected(st, a, i, j)
    out = {}
    lr = monomial_line_range(js, base.J, i + abs(j))
    for fam in (False, True):
        slo = scalar_lax_orlov(cache, base, a, fam, js, lr)
        P = projection(slo.monomial(i, j), base, "plus")
        for wbar in (False, True):
            worst = 0.0
            for z in z_samples(wbar, count, radius=0.5 if wbar else 2.0):
                row = lambda m: wave_evaluate(cache.get(line_point(base, a, fam, m)), z, base.n0, bar=wbar)[0]
                lhs = P.apply(row, 0)
                rhs = apply_to_wave(X, lambda n: wave_evaluate(st, z, n, bar=wbar), base.n0)[0]
                scale = max(np.max(np.abs(rhs)), np.max(np.abs(row(0))), 1e-300)
                worst = max(worst, float(np.max(np.abs(lhs - rhs)) / scale))
            out[f"{'bared' if fam else 'unbared'} family, {'Wbar' if wbar else 'W'}"] = worst
    return out


def flow_pair_agreement(cache: SGridCache, base: DeformationParams, a: Idx, j: int,
                        js: int = DEFAULT_JS, count: int = 8) -> float:
    """``(L_a^j)_+ (E11 W)`` against ``(Lbar_a^j)_+ (E11 W)`` before any differencing."""
    a = Idx.parse(a)
    Ps = {fam: projection(scalar_lax_orlov(cache, base, a, fam, js).power(j), base, "plus")
          for fam in (False, True)}
    worst = 0.0
    for z in z_samples(False, count, radius=2.0):
        vals = []
        for fam in (False, True):
            row = lambda m, fam=fam: wave_evaluate(cache.get(line_point(base, a, fam, m)), z, base.n0)[0]
            vals.append(Ps[fam].apply(row, 0))
        worst = max(worst, float(np.max(np.abs(vals[0] - vals[1])) / max(np.max(np.abs(vals[0])), 1e-300)))
    return worst


def verify_scalar_flows(cache: SGridCache, base: DeformationParams, j: int, a: Idx, h: float = 1e-3,
                        js: int = DEFAULT_JS, bared_family: bool = False, count: int = 4) -> Tuple[float, float, float]:
    """Central-difference residual of ``d/dt_{ja} (E11 W) = (L_a^j)_+ (E11 W)`` at ``h`` and ``h/2``.

    States at the shifted times are added to ``cache``.  Returns ``(r(h), r(h/2), ratio)``.
    """
    a = Idx.parse(a)
    P = projection(scalar_lax_orlov(cache, base, a, bared_family, js).power(j), base, "plus")
    zs = z_samples(False, count, radius=2.0)

    def resid(step):
        worst = 0.0
        for z in zs:
            dp = wave_evaluate(cache.get(base.shifted_time(j, a, step)), z, base.n0)[0]
            dm = wave_evaluate(cache.get(base.shifted_time(j, a, -step)), z, base.n0)[0]
            fd = (dp - dm) / (2 * step)
            row = lambda m: wave_evaluate(cache.get(line_point(base, a, bared_family, m)), z, base.n0)[0]
            rhs = P.apply(row, 0)
            worst = max(worst, float(np.max(np.abs(fd - rhs)) / max(np.max(np.abs(rhs)), 1e-300)))
        return worst

    r1, r2 = resid(h), resid(h / 2)
    return r1, r2, (r1 / r2 if r2 > 0 else float("nan"))


def _zop_chain(f: Callable[[complex], complex], word: Sequence[Tuple[str, int]], e: int) -> Callable[[complex], complex]:
    """Spectral image of an operator word acting on a wave function.

    ``word`` lists letters left to right as ``("M", i)`` or ``("L", j)``; letters act
    on the wave function in reverse order, so ``M`` becomes ``z d/dz`` and ``L^j``
    becomes ``z^{e j}`` applied starting from the leftmost letter.
    """
    g = f
    for letter, p in word:
        if letter == "M":
            for _ in range(p):
                g = (lambda h: (lambda z: z * _derivative(h, z, 1)))(g)
        else:
            g = (lambda h, p=p: (lambda z: z ** (e * p) * h(z)))(g)
    return g


def verify_product_action(cache: SGridCache, base: DeformationParams, a: Idx,
                          first: Tuple[int, int], second: Tuple[int, int], js: int = DEFAULT_JS,
                          zs: Optional[Sequence[complex]] = None, bared_family: bool = False) -> float:
    """``(M^i1 L^j1)(M^i2 L^j2)(Psi_a)`` against ``Psi_a <- F1 <- F2`` for ``i1 + i2 <= 2``."""
    a = Idx.parse(a)
    (i1, j1), (i2, j2) = first, second
    if i1 + i2 > 2:
        raise ValueError("only i1 + i2 <= 2 supported")
    zs = z_samples(a.bar) if zs is None else zs
    slo = scalar_lax_orlov(cache, base, a, bared_family, js)
    F = (slo.monomial(i1, j1) @ slo.monomial(i2, j2)).truncate(-js)
    oracle = _zop_chain(lambda zz: vector_wave(cache, base, a, zz), [("M", i1), ("L", j1), ("M", i2), ("L", j2)], a.sg)
    worst = 0.0
    for z in zs:
        o = oracle(z)
        val = F.apply(line_wave(cache, base, a, bared_family, z), 0)
        worst = max(worst, abs(val - o) / max(abs(o), 1e-300))
    return worst


def commutator_residual(cache: SGridCache, base: DeformationParams, a: Idx, js: int = DEFAULT_JS,
                        zs: Optional[Sequence[complex]] = None, bared_family: bool = False) -> float:
    """``([L_a, M_a] - sg(a) L_a)`` applied to ``Psi_a``, relative to ``|L_a Psi_a|``."""
    a = Idx.parse(a)
    zs = z_samples(a.bar) if zs is None else zs
    slo = scalar_lax_orlov(cache, base, a, bared_family, js)
    C = (slo.L @ slo.M - slo.M @ slo.L - slo.L.scale(sg(a))).truncate(-js)
    worst = 0.0
    for z in zs:
        f = line_wave(cache, base, a, bared_family, z)
        ref = slo.L.apply(f, 0)
        worst = max(worst, abs(C.apply(f, 0)) / max(abs(ref), 1e-300))
    return worst


# -- quasiclassical scan ------------------------------------------------------

@dataclass(frozen=True)
class ScanFamily:
    """``g_eps = exp(Y(eps n) / eps)`` with slowly varying ``Y``; off-diagonal blocks scaled by ``eps^coupling_power``."""

    seed: int = 0
    amplitude: float = 0.02
    bandwidth: int = 1
    decay: float = 0.5
    coupling_power: float = 2.0

    def gspec(self, eps: float) -> GSpec:
        return GSpec(kind="slow-exponential", seed=self.seed, amplitude=self.amplitude / eps,
                     bandwidth=self.bandwidth, decay=self.decay, slow_eps=eps,
                     coupling=eps ** self.coupling_power)


@dataclass(frozen=True)
class ScanRow:
    eps: float
    residual: float
    action: complex
    branch_jump: float
    branch_flag: bool


@dataclass(frozen=True)
class ScanResult:
    rows: Tuple[ScanRow, ...]
    monotone: bool

    def table(self) -> List[dict]:
        return [{"eps": r.eps, "residual": r.residual, "branch_jump": r.branch_jump,
                 "branch_flag": r.branch_flag} for r in self.rows]


def _nearest_branch(logv: complex, eps: float, previous: Optional[complex]) -> complex:
    """``eps * log`` on the branch closest to ``previous``."""
    S = eps * logv
    if previous is None:
        return S
    k = round(((previous - S).imag) / (2 * np.pi * eps))
    return S + 2j * np.pi * eps * k


def quasiclassical_scan(family: ScanFamily, slow_times: Mapping, x: float = 0.3,
                        eps_ladder: Sequence[float] = (0.2, 0.1, 0.05), a: Idx = Idx(1), b: Idx = Idx(1),
                        j: int = 2, bared_family: bool = False, charges: Optional[Sequence[int]] = None,
                        K: int = 12, js: int = DEFAULT_JS, h: float = 1e-4, count: int = 8,
                        N: int = 2) -> ScanResult:
    """Hamilton-Jacobi residuals ``|d_{ja} S_b - P_ja(exp d_a S_b)|`` along a descending ``eps`` ladder.

    Fast variables are ``t = t_sl / eps`` and ``n0 = round(x / eps)``; integer
    charges are held fixed.  ``exp(d_a S_b)`` is the unit-shift ratio
    ``Psi_b(s + shift) / Psi_b(s)``, ``d_{ja} S_b`` the central difference of
    ``log Psi_b`` in the fast time, and ``P_ja`` is read from ``(L_a^j)_+`` at the
    current ``eps``.  The shift line must keep every factorization solvable, so
    ``a0 = 1bar`` and ``a0bar = 1`` are used (charge-preserving lines for ``a = 1, 1bar``).
    """
    a, b = Idx.parse(a), Idx.parse(b)
    eps_ladder = list(eps_ladder)
    if any(e2 >= e1 for e1, e2 in zip(eps_ladder, eps_ladder[1:])):
        raise ValueError("eps ladder must be strictly descending")
    rows = []
    prev_S = None
    for eps in eps_ladder:
        times = {k: complex(v) / eps for k, v in DeformationParams(N=N, times=slow_times).times}
        n0 = int(round(x / eps))
        ch = tuple(charges) if charges is not None else (0,) * (2 * N)
        p = DeformationParams(N=N, charges=ch, times=times, n0=n0, a0=Idx(1, True), a0bar=Idx(1))
        cache = SGridCache(family.gspec(eps), FactorConfig(K=K, window=(n0 - 3, n0 + 3)))
        slo = scalar_lax_orlov(cache, p, a, bared_family, js, line_range=(-js - 1, j + 2))
        P = projection(slo.power(j), p, "plus")
        worst = 0.0
        zs = z_samples(b.bar, count, radius=0.5 if b.bar else 2.0)
        for z in zs:
            f = lambda m: vector_wave(cache, line_point(p, a, bared_family, m), b, z)
            R1 = f(1) / f(0)
            dlog = (np.log(vector_wave(cache, p.shifted_time(j, a, h), b, z))
                    - np.log(vector_wave(cache, p.shifted_time(j, a, -h), b, z))) / (2 * h)
            # the difference of logs can jump by 2 pi i / (2h); fold back to the principal strip
            dlog = dlog.real + 1j * ((dlog.imag * 2 * h + np.pi) % (2 * np.pi) - np.pi) / (2 * h)
            pred = sum(P.coeff(k) * R1 ** k for k in P.bands())
            worst = max(worst, float(abs(dlog - pred) / max(abs(dlog), 1.0)))
        S = _nearest_branch(np.log(vector_wave(cache, p, b, zs[0])), eps, prev_S)
        jump = 0.0 if prev_S is None else float(abs(S - prev_S))
        rows.append(ScanRow(eps, worst, S, jump, jump > 0.5 * (1 + abs(S))))
        prev_S = S
    res = [r.residual for r in rows]
    return ScanResult(tuple(rows), all(r2 < r1 for r1, r2 in zip(res, res[1:])))
