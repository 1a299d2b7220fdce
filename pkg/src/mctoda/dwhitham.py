"""Zero-genus dispersionless Whitham hierarchy on algebraic orbits.

Functions of ``p`` live in ``LogRational``: a polynomial, pole tails at labelled
punctures and ``log(p - q)`` terms.  Every coefficient carries a leading batch
axis (the x-grid), so brackets and flows are evaluated on all nodes at once.
Dependence on ``x`` enters only through the orbit parameters; x-derivatives of
any object built from them are directional derivatives along ``w_x``.
"""
from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

PICTURES = ("KP", "Toda")


class DegeneratePuncture(ValueError):
    pass


class OffOrbit(RuntimeError):
    pass


class MissingDerivative(ValueError):
    pass


class HodographError(RuntimeError):
    pass


# -- truncated power series (last axis) ----------------------------------------

@lru_cache(maxsize=None)
def _conv_matrix(L: int) -> np.ndarray:
    C = np.zeros((L * L, L))
    for i in range(L):
        for j in range(L - i):
            C[i * L + j, i + j] = 1
    return C


def ps_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    L = a.shape[-1]
    outer = a[..., :, None] * b[..., None, :]
    return outer.reshape(outer.shape[:-2] + (L * L,)) @ _conv_matrix(L)


def ps_inv(a: np.ndarray) -> np.ndarray:
    a0 = a[..., 0]
    if np.any(a0 == 0):
        raise ZeroDivisionError("series with vanishing constant term is not invertible")
    L = a.shape[-1]
    b = np.zeros(a.shape, complex)
    b[..., 0] = 1 / a0
    for k in range(1, L):
        b[..., k] = -np.sum(a[..., 1:k + 1] * b[..., k - 1::-1][..., :k], axis=-1) / a0
    return b


def ps_pow(a: np.ndarray, m: int) -> np.ndarray:
    if m < 0:
        return ps_pow(ps_inv(a), -m)
    out = np.zeros(a.shape, complex)
    out[..., 0] = 1
    base = a
    while m:
        if m & 1:
            out = ps_mul(out, base)
        m >>= 1
        if m:
            base = ps_mul(base, base)
    return out


def ps_root(a: np.ndarray, n: int) -> np.ndarray:
    """``a^{1/n}`` by Newton iteration with precision doubling; the constant term takes the principal root."""
    if n == 1:
        return np.array(a, complex)
    L = a.shape[-1]
    g = np.zeros(a.shape[:-1] + (1,), complex)
    g[..., 0] = np.power(a[..., 0].astype(complex), 1.0 / n)
    k = 1
    while k < L:
        k = min(2 * k, L)
        g = _pad_last(g, k)
        g = ((n - 1) * g + ps_mul(a[..., :k], ps_pow(ps_inv(g), n - 1))) / n
    return g


def _binom_neg(n: int, d: np.ndarray, L: int) -> np.ndarray:
    """Coefficients of ``(d + t)^{-n}`` in powers of ``t``."""
    d = np.asarray(d, complex)
    out = np.zeros(d.shape + (L,), complex)
    out[..., 0] = d ** (-n)
    for k in range(1, L):
        out[..., k] = out[..., k - 1] * (-n - k + 1) / (k * d)
    return out


def _shift_poly(c: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Coefficients of ``sum c_k (t + q)^k`` in powers of ``t``."""
    D = c.shape[-1]
    out = np.zeros(np.broadcast_shapes(c.shape[:-1], np.shape(q)) + (D,), complex)
    q = np.asarray(q, complex)
    for k in range(D):
        for j in range(k + 1):
            out[..., j] += math.comb(k, j) * c[..., k] * q ** (k - j)
    return out


# -- function class ------------------------------------------------------------

@dataclass(frozen=True)
class Pole:
    label: int
    q: np.ndarray
    c: np.ndarray  # c[..., n-1] multiplies (p - q)^{-n}


@dataclass(frozen=True)
class LogTerm:
    label: int
    q: np.ndarray
    coef: np.ndarray  # multiplies log(p - q)


@dataclass(frozen=True)
class LogRational:
    """``poly(p) + sum c_n (p - q_a)^{-n} + sum L_a log(p - q_a)`` with batched coefficients."""

    poly: np.ndarray
    poles: Tuple[Pole, ...] = ()
    logs: Tuple[LogTerm, ...] = ()
    const: bool = False

    @property
    def batch(self) -> tuple:
        return self.poly.shape[:-1]

    @classmethod
    def polynomial(cls, coeffs, const: bool = False) -> "LogRational":
        return cls(np.atleast_1d(np.asarray(coeffs, complex)), const=const)

    @classmethod
    def p(cls, batch: tuple = ()) -> "LogRational":
        c = np.zeros(batch + (2,), complex)
        c[..., 1] = 1
        return cls(c, const=True)

    def _pad_poly(self, D: int) -> np.ndarray:
        c = self.poly
        if c.shape[-1] >= D:
            return c
        return np.concatenate([c, np.zeros(c.shape[:-1] + (D - c.shape[-1],), complex)], axis=-1)

    def __add__(self, other: "LogRational") -> "LogRational":
        D = max(self.poly.shape[-1], other.poly.shape[-1])
        return LogRational(self._pad_poly(D) + other._pad_poly(D), self.poles + other.poles,
                           self.logs + other.logs, self.const and other.const)

    def __neg__(self) -> "LogRational":
        return self.scale(-1)

    def __sub__(self, other: "LogRational") -> "LogRational":
        return self + (-other)

    def scale(self, s) -> "LogRational":
        s = np.asarray(s, complex)
        sp = s[..., None] if s.ndim else s
        return LogRational(self.poly * sp, tuple(Pole(P.label, P.q, P.c * sp) for P in self.poles),
                           tuple(LogTerm(T.label, T.q, T.coef * s) for T in self.logs), self.const)

    def __call__(self, p) -> np.ndarray:
        """Values at sample points ``p`` (trailing axis), broadcast against the batch."""
        p = np.asarray(p, complex)
        out = np.zeros(self.batch + p.shape[-1:], complex) if p.ndim else np.zeros(self.batch, complex)
        pe = p if p.ndim == 0 else p
        cp = self.poly
        for k in range(cp.shape[-1] - 1, -1, -1):
            out = out * pe + (cp[..., k, None] if p.ndim else cp[..., k])
        for P in self.poles:
            t = pe - (P.q[..., None] if p.ndim else P.q)
            for n in range(P.c.shape[-1]):
                out = out + (P.c[..., n, None] if p.ndim else P.c[..., n]) * t ** (-(n + 1))
        for T in self.logs:
            t = pe - (T.q[..., None] if p.ndim else T.q)
            out = out + (T.coef[..., None] if p.ndim else T.coef) * np.log(t)
        return out

    def dp(self) -> "LogRational":
        D = self.poly.shape[-1]
        poly = self.poly[..., 1:] * np.arange(1, D) if D > 1 else np.zeros(self.batch + (1,), complex)
        poles = []
        for P in self.poles:
            m = P.c.shape[-1]
            c = np.zeros(P.c.shape[:-1] + (m + 1,), complex)
            c[..., 1:] = -P.c * np.arange(1, m + 1)
            poles.append(Pole(P.label, P.q, c))
        for T in self.logs:
            poles.append(Pole(T.label, T.q, T.coef[..., None]))
        return LogRational(poly if poly.shape[-1] else np.zeros(self.batch + (1,), complex),
                           tuple(poles), (), self.const)

    # -- structure --

    def merged(self) -> "LogRational":
        """Poles and logs with equal labels combined."""
        poles: Dict[int, Pole] = {}
        for P in self.poles:
            if P.label in poles:
                Q = poles[P.label]
                m = max(Q.c.shape[-1], P.c.shape[-1])
                c = _pad_last(Q.c, m) + _pad_last(P.c, m)
                poles[P.label] = Pole(P.label, Q.q, c)
            else:
                poles[P.label] = P
        logs: Dict[int, LogTerm] = {}
        for T in self.logs:
            logs[T.label] = LogTerm(T.label, T.q, logs[T.label].coef + T.coef) if T.label in logs else T
        return LogRational(self.poly, tuple(poles[k] for k in sorted(poles)),
                           tuple(logs[k] for k in sorted(logs)), self.const)

    def pole(self, label: int) -> Optional[Pole]:
        for P in self.merged().poles:
            if P.label == label:
                return P
        return None

    def arrays(self) -> List[np.ndarray]:
        out = [self.poly]
        for P in self.poles:
            out += [P.q, P.c]
        for T in self.logs:
            out += [T.q, T.coef]
        return out

    def with_arrays(self, arrs: Sequence[np.ndarray]) -> "LogRational":
        it = iter(arrs)
        poly = next(it)
        poles = tuple(Pole(P.label, next(it), next(it)) for P in self.poles)
        logs = tuple(LogTerm(T.label, next(it), next(it)) for T in self.logs)
        return LogRational(poly, poles, logs, self.const)

    def is_rational(self) -> bool:
        return all(np.all(T.coef == 0) for T in self.logs)

    def __mul__(self, other: "LogRational") -> "LogRational":
        return rational_mul(self, other)


def _pad_last(c: np.ndarray, m: int) -> np.ndarray:
    if c.shape[-1] >= m:
        return c
    return np.concatenate([c, np.zeros(c.shape[:-1] + (m - c.shape[-1],), complex)], axis=-1)


def _taylor_at(F: LogRational, label: int, q: np.ndarray, L: int) -> np.ndarray:
    """Regular part of ``F`` at ``q`` (all terms except the pole labelled ``label``) to ``L`` terms."""
    out = _pad_last(_shift_poly(F.poly, q), L)[..., :L]
    for P in F.poles:
        if P.label == label:
            continue
        d = q - P.q
        for n in range(P.c.shape[-1]):
            out = out + P.c[..., n, None] * _binom_neg(n + 1, d, L)
    return out


def _at_infinity(F: LogRational, L: int) -> np.ndarray:
    """Coefficients of ``p^{-k}``, ``k = 1..L``, from the poles of ``F``."""
    out = np.zeros(F.batch + (L,), complex)
    for P in F.poles:
        for n in range(1, P.c.shape[-1] + 1):
            # (p - q)^{-n} = sum_j C(n+j-1, j) q^j p^{-n-j}
            for j in range(0, L - n + 1):
                out[..., n + j - 1] += P.c[..., n - 1] * math.comb(n + j - 1, j) * P.q ** j
    return out


def rational_mul(F: LogRational, G: LogRational) -> LogRational:
    """Exact product of two rational members (no log terms) by partial fractions."""
    if not (F.is_rational() and G.is_rational()):
        raise ValueError("product of functions with log terms is outside the function class")
    F, G = F.merged(), G.merged()
    F = LogRational(F.poly, F.poles, (), F.const)
    G = LogRational(G.poly, G.poles, (), G.const)
    a, b = F.poly, G.poly
    DF, DG = a.shape[-1] - 1, b.shape[-1] - 1
    poly = np.zeros(np.broadcast_shapes(F.batch, G.batch) + (DF + DG + 1,), complex)
    for i in range(DF + 1):
        poly[..., i:i + DG + 1] += a[..., i:i + 1] * b
    for (P, negsrc) in ((a, G), (b, F)):
        D = P.shape[-1] - 1
        if D <= 0:
            continue
        neg = _at_infinity(negsrc, D)
        for i in range(1, D + 1):
            for k in range(1, i + 1):
                poly[..., i - k] += P[..., i] * neg[..., k - 1]
    labels = {}
    for P in F.poles + G.poles:
        labels.setdefault(P.label, P.q)
    poles = []
    for lab, q in sorted(labels.items()):
        pf, pg = F.pole(lab), G.pole(lab)
        mf = pf.c.shape[-1] if pf is not None else 0
        mg = pg.c.shape[-1] if pg is not None else 0
        # Laurent arrays indexed by exponent e + m, e in [-m, T)
        T = max(mf, mg) + 1
        lf = np.concatenate([(pf.c[..., ::-1] if mf else np.zeros(F.batch + (0,))), _taylor_at(F, lab, q, T)], axis=-1)
        lg = np.concatenate([(pg.c[..., ::-1] if mg else np.zeros(G.batch + (0,))), _taylor_at(G, lab, q, T)], axis=-1)
        m = mf + mg
        c = np.zeros(np.broadcast_shapes(lf.shape[:-1], lg.shape[:-1]) + (m,), complex)
        for i in range(lf.shape[-1]):
            for j in range(lg.shape[-1]):
                e = (i - mf) + (j - mg)
                if e < 0:
                    c[..., -e - 1] += lf[..., i] * lg[..., j]
        if m:
            poles.append(Pole(lab, q, c))
    return LogRational(poly, tuple(poles), (), F.const and G.const)


def tangent(builder: Callable[[np.ndarray], LogRational], W: np.ndarray, V: np.ndarray,
            points: int = 4) -> LogRational:
    return value_and_tangent(builder, W, V, points)[1]


def value_and_tangent(builder: Callable[[np.ndarray], LogRational], W: np.ndarray, V: np.ndarray,
                      points: int = 4) -> Tuple[LogRational, LogRational]:
    """Directional derivative of ``builder`` at ``W`` along ``V`` (batch axis first, parameters last).

    Coefficients and pole positions are holomorphic in the parameters, so a
    contour average of ``points`` samples gives the derivative spectrally.
    """
    W = np.asarray(W, complex)
    V = np.asarray(V, complex)
    scale = 1 + np.max(np.abs(W), axis=-1)
    vn = np.max(np.abs(V), axis=-1)
    r = np.where(vn > 0, 1e-3 * scale / np.where(vn > 0, vn, 1), 1.0)
    om = np.exp(2j * np.pi * np.arange(points) / points)
    shift = np.concatenate([np.zeros(1), om])
    stacked = builder(W[None] + (shift.reshape((-1,) + (1,) * r.ndim) * r)[..., None] * V[None])
    arrs = []
    for arr in stacked.arrays():
        acc = np.tensordot(1 / om, arr[1:], axes=(0, 0))
        rr = r.reshape(r.shape + (1,) * (acc.ndim - r.ndim))
        arrs.append(acc / (points * rr))
    F0 = stacked.with_arrays([arr[0] for arr in stacked.arrays()])
    d = F0.with_arrays(arrs)
    poly = d.poly
    poles = []
    for P0, dP in zip(F0.poles, d.poles):
        m = P0.c.shape[-1]
        c = np.zeros(P0.c.shape[:-1] + (m + 1,), complex)
        c[..., :m] += dP.c
        c[..., 1:] += P0.c * np.arange(1, m + 1) * dP.q[..., None]
        poles.append(Pole(P0.label, P0.q, c))
    logs = []
    for T0, dT in zip(F0.logs, d.logs):
        if np.any(np.abs(dT.coef) > 1e-12 * (1 + np.abs(T0.coef))):
            logs.append(LogTerm(T0.label, T0.q, dT.coef))
        poles.append(Pole(T0.label, T0.q, (-T0.coef * dT.q)[..., None]))
    return F0, LogRational(poly, tuple(poles), tuple(logs), False)


# -- orbits and charts ---------------------------------------------------------

@dataclass(frozen=True)
class OrbitTemplate:
    """Shape of ``lambda = p^{n_1} + sum u_{1k} p^k + sum_i sum_k u_{ik} / (p - q_i)^k``.

    KP picture: ``u_{1, n_1 - 1}`` is fixed to 0.  Toda picture: the puncture
    ``a0`` sits at ``p = 0``.
    """

    n: Tuple[int, ...]
    picture: str = "KP"
    a0: int = 2

    def __post_init__(self):
        if self.picture not in PICTURES:
            raise ValueError(f"unknown picture {self.picture!r}")
        if any(k < 1 for k in self.n):
            raise ValueError("exponents n_a must be positive")
        if self.picture == "Toda" and not 2 <= self.a0 <= len(self.n):
            raise ValueError("Toda picture needs a0 among the finite punctures")

    @property
    def N(self) -> int:
        return len(self.n)

    def names(self) -> List[tuple]:
        out = []
        n1 = self.n[0]
        for k in range(n1):
            if self.picture == "KP" and k == n1 - 1:
                continue
            out.append(("u", 1, k))
        for a in range(2, self.N + 1):
            if not (self.picture == "Toda" and a == self.a0):
                out.append(("q", a))
            for k in range(1, self.n[a - 1] + 1):
                out.append(("u", a, k))
        return out

    @property
    def size(self) -> int:
        return len(self.names())

    def unpack(self, W: np.ndarray) -> Tuple[np.ndarray, Dict[int, np.ndarray], Dict[int, np.ndarray]]:
        W = np.asarray(W, complex)
        B = W.shape[:-1]
        u1 = np.zeros(B + (self.n[0],), complex)
        qs = {a: np.zeros(B, complex) for a in range(2, self.N + 1)}
        us = {a: np.zeros(B + (self.n[a - 1],), complex) for a in range(2, self.N + 1)}
        for i, nm in enumerate(self.names()):
            if nm[0] == "q":
                qs[nm[1]] = W[..., i]
            elif nm[1] == 1:
                u1[..., nm[2]] = W[..., i]
            else:
                us[nm[1]][..., nm[2] - 1] = W[..., i]
        return u1, qs, us

    def lam(self, W: np.ndarray) -> LogRational:
        u1, qs, us = self.unpack(W)
        poly = np.concatenate([u1, np.ones(u1.shape[:-1] + (1,), complex)], axis=-1)
        poles = tuple(Pole(a, qs[a], us[a]) for a in range(2, self.N + 1))
        return LogRational(poly, poles)

    def basis(self, W: np.ndarray) -> List[LogRational]:
        """``d lambda / d w_i`` for each parameter."""
        u1, qs, us = self.unpack(W)
        B = np.shape(W)[:-1]
        out = []
        for nm in self.names():
            if nm[0] == "u" and nm[1] == 1:
                c = np.zeros(B + (nm[2] + 1,), complex)
                c[..., nm[2]] = 1
                out.append(LogRational(c))
            elif nm[0] == "u":
                a, k = nm[1], nm[2]
                c = np.zeros(B + (k,), complex)
                c[..., k - 1] = 1
                out.append(LogRational(np.zeros(B + (1,), complex), (Pole(a, qs[a], c),)))
            else:
                a = nm[1]
                m = self.n[a - 1]
                c = np.zeros(B + (m + 1,), complex)
                c[..., 1:] = us[a] * np.arange(1, m + 1)
                out.append(LogRational(np.zeros(B + (1,), complex), (Pole(a, qs[a], c),)))
        return out


@dataclass(frozen=True)
class AlgebraicOrbit:
    template: OrbitTemplate
    w: np.ndarray

    def lam(self) -> LogRational:
        return self.template.lam(self.w)

    def q(self, a: int) -> np.ndarray:
        return self.template.unpack(self.w)[1][a]


@dataclass(frozen=True)
class LocalChart:
    """``z_a`` as a series in the local parameter.

    ``a = 1``: ``z_1 = sum_k coeffs[k] p^{1-k}``;  ``a >= 2``: ``z_a = sum_k coeffs[k] (p - q_a)^{k-1}``.
    ``branch`` records that the leading coefficient is the principal root.
    """

    a: int
    n: int
    q: Optional[np.ndarray]
    coeffs: np.ndarray
    branch: str = "principal"

    @property
    def order(self) -> int:
        return self.coeffs.shape[-1]

    def ell(self, k: int) -> np.ndarray:
        """``l_{a,k}`` in the notation of the local expansions (``k = 1, 0, -1, ...``)."""
        idx = 1 - k
        return self.coeffs[..., idx]

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, complex)
        t = 1 / p if self.a == 1 else p - (self.q[..., None] if p.ndim else self.q)
        lead = p if self.a == 1 else 1 / t
        acc = 0
        for k in range(self.order - 1, -1, -1):
            acc = acc * t + (self.coeffs[..., k, None] if p.ndim else self.coeffs[..., k])
        return lead * acc


def _normalized_local_series(template: OrbitTemplate, W: np.ndarray, a: int, L: int) -> np.ndarray:
    """``s^{n_1} lambda`` in ``s = 1/p`` (``a = 1``) or ``t^{n_a} lambda`` in ``t = p - q_a``."""
    lam = template.lam(W).merged()
    B = lam.batch
    if a == 1:
        n1 = template.n[0]
        h = np.zeros(B + (L,), complex)
        for k in range(lam.poly.shape[-1]):
            e = n1 - k
            if 0 <= e < L:
                h[..., e] += lam.poly[..., k]
        neg = _at_infinity(lam, L)
        for k in range(1, L):
            if n1 + k < L:
                h[..., n1 + k] += neg[..., k - 1]
        return h
    na = template.n[a - 1]
    P = lam.pole(a)
    G = np.zeros(B + (L,), complex)
    for k in range(1, na + 1):
        if na - k < L:
            G[..., na - k] += P.c[..., k - 1]
    reg = _taylor_at(lam, a, P.q, L)
    G[..., na:] += reg[..., :L - na]
    return G


def orbit_local_expansion(orbit: AlgebraicOrbit, a: int, order: int = 16) -> LocalChart:
    """Chart ``z_a = lambda^{1/n_a}`` at puncture ``a`` to ``order`` coefficients."""
    tpl = orbit.template
    h = _normalized_local_series(tpl, orbit.w, a, order)
    if np.any(np.abs(h[..., 0]) == 0):
        raise DegeneratePuncture(f"degenerate puncture {a}: leading local coefficient vanishes")
    g = ps_root(h, tpl.n[a - 1])
    q = None if a == 1 else tpl.unpack(orbit.w)[1][a]
    return LocalChart(a, tpl.n[a - 1], q, g)


def omega_build(orbit: AlgebraicOrbit, n: int, a: int, order: Optional[int] = None) -> LogRational:
    """``Omega_{na}``: ``(z_a^n)_{(a,+)}`` for ``n >= 1``, ``-log(p - q_a)`` for ``n = 0``."""
    tpl = orbit.template
    B = np.shape(orbit.w)[:-1]
    if n == 0:
        if a == 1:
            raise ValueError("Omega_{0,1} is not defined")
        q = tpl.unpack(orbit.w)[1][a]
        return LogRational(np.zeros(B + (1,), complex), (), (LogTerm(a, q, -np.ones(B, complex)),))
    L = order or (n + 1)
    if L < n + 1:
        raise ValueError(f"chart order {L} insufficient for n = {n}")
    h = _normalized_local_series(tpl, orbit.w, a, L)
    if np.any(np.abs(h[..., 0]) == 0):
        raise DegeneratePuncture(f"degenerate puncture {a}: leading local coefficient vanishes")
    g = ps_pow(ps_root(h, tpl.n[a - 1]), n)
    if a == 1:
        # z_1^n = sum_k g_k p^{n-k}: polynomial part keeps k <= n
        poly = g[..., :n + 1][..., ::-1]
        return LogRational(poly)
    q = tpl.unpack(orbit.w)[1][a]
    # z_a^n = sum_k g_k t^{k-n}: principal part keeps k < n
    c = g[..., :n][..., ::-1]
    return LogRational(np.zeros(B + (1,), complex), (Pole(a, q, c),))


def omega_builder(template: OrbitTemplate, n: int, a: int) -> Callable[[np.ndarray], LogRational]:
    return lambda W: omega_build(AlgebraicOrbit(template, W), n, a)


def omega_A0(template: OrbitTemplate, batch: tuple = ()) -> LogRational:
    """``Omega_{A0}``: ``p`` (KP) or ``-log p`` (Toda)."""
    if template.picture == "KP":
        return LogRational.p(batch)
    return LogRational(np.zeros(batch + (1,), complex), (),
                       (LogTerm(template.a0, np.zeros(batch, complex), -np.ones(batch, complex)),), const=True)


# -- brackets -------------------------------------------------------------------

def omega_weight(picture: str, batch: tuple = ()) -> LogRational:
    if picture == "KP":
        return LogRational(np.ones(batch + (1,), complex), const=True)
    return LogRational.p(batch)


def poisson_bracket(F: LogRational, G: LogRational, picture: str = "KP",
                    Fx: Optional[LogRational] = None, Gx: Optional[LogRational] = None) -> LogRational:
    """``{F, G} = omega(p) (F_p G_x - F_x G_p)`` with ``omega = 1`` (KP) or ``p`` (Toda)."""
    if Fx is None:
        if not F.const:
            raise MissingDerivative("x-derivative of the first argument is missing")
        Fx = LogRational(np.zeros(F.batch + (1,), complex), const=True)
    if Gx is None:
        if not G.const:
            raise MissingDerivative("x-derivative of the second argument is missing")
        Gx = LogRational(np.zeros(G.batch + (1,), complex), const=True)
    inner = rational_mul(F.dp(), Gx) - rational_mul(Fx, G.dp())
    return rational_mul(omega_weight(picture, inner.batch), inner)


def bracket_values(F, G, Fx, Gx, p, picture: str = "KP") -> np.ndarray:
    """Pointwise bracket at samples ``p``; symmetric in floating point so ``{F, F} = 0`` exactly."""
    p = np.asarray(p, complex)
    w = p if picture == "Toda" else 1.0
    return w * (F.dp()(p) * Gx(p) - Fx(p) * G.dp()(p))


# -- fields and flows -----------------------------------------------------------

def fd4(W: np.ndarray, dx: float) -> np.ndarray:
    """First derivative along axis 0: fourth-order central, one-sided at the two boundary nodes each side."""
    W = np.asarray(W, complex)
    n = W.shape[0]
    if n < 5:
        raise ValueError("need at least 5 grid nodes")
    D = np.empty_like(W)
    D[2:-2] = (W[:-4] - 8 * W[1:-3] + 8 * W[3:-1] - W[4:]) / (12 * dx)
    D[0] = (-25 * W[0] + 48 * W[1] - 36 * W[2] + 16 * W[3] - 3 * W[4]) / (12 * dx)
    D[1] = (-3 * W[0] - 10 * W[1] + 18 * W[2] - 6 * W[3] + W[4]) / (12 * dx)
    D[-1] = (25 * W[-1] - 48 * W[-2] + 36 * W[-3] - 16 * W[-4] + 3 * W[-5]) / (12 * dx)
    D[-2] = (3 * W[-1] + 10 * W[-2] - 18 * W[-3] + 6 * W[-4] - W[-5]) / (12 * dx)
    return D


@dataclass(frozen=True)
class WhithamField:
    template: OrbitTemplate
    x: np.ndarray
    W: np.ndarray

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def picture(self) -> str:
        return self.template.picture

    def Wx(self) -> np.ndarray:
        return fd4(self.W, self.dx)

    def with_W(self, W) -> "WhithamField":
        return replace(self, W=np.asarray(W, complex))

    def to_dict(self) -> dict:
        return {"punctures": [{"n": int(k)} for k in self.template.n], "picture": self.picture,
                "a0": self.template.a0, "grid": self.x.tolist(),
                "u-coefficients": [[[float(v.real), float(v.imag)] for v in row] for row in self.W],
                "names": [list(map(str, nm)) for nm in self.template.names()]}

    @classmethod
    def from_dict(cls, d: dict) -> "WhithamField":
        tpl = OrbitTemplate(tuple(int(p["n"]) for p in d["punctures"]), d["picture"], int(d.get("a0", 2)))
        W = np.array([[complex(a, b) for a, b in row] for row in d["u-coefficients"]], complex)
        return cls(tpl, np.asarray(d["grid"], float), W.reshape(len(d["grid"]), tpl.size))


def _coeff_matrix(funcs: Sequence[LogRational], D: int, orders: Mapping[int, int]) -> np.ndarray:
    """Stack coefficient vectors over the basis ``p^0..p^D`` and ``(p - q_a)^{-1..orders[a]}``."""
    cols = []
    for F in funcs:
        F = F.merged()
        v = [_pad_last(F.poly, D + 1)[..., :D + 1]]
        if F.poly.shape[-1] > D + 1 and np.any(F.poly[..., D + 1:] != 0):
            raise ValueError("polynomial degree exceeds the matching basis")
        for lab, m in sorted(orders.items()):
            P = F.pole(lab)
            v.append(_pad_last(P.c, m)[..., :m] if P is not None else np.zeros(F.batch + (m,), complex))
        cols.append(np.concatenate([np.broadcast_to(x, np.broadcast_shapes(*(y.shape[:-1] for y in v)) + x.shape[-1:])
                                    for x in v], axis=-1))
    return np.stack(cols, axis=-1)


def _basis_extent(funcs: Sequence[LogRational]) -> Tuple[int, Dict[int, int]]:
    D = 0
    orders: Dict[int, int] = {}
    for F in funcs:
        F = F.merged()
        nz = np.nonzero(np.any(np.abs(F.poly.reshape(-1, F.poly.shape[-1])) > 0, axis=0))[0]
        D = max(D, int(nz.max()) if nz.size else 0)
        for P in F.poles:
            orders[P.label] = max(orders.get(P.label, 0), P.c.shape[-1])
    return D, orders


def flow_velocities(template: OrbitTemplate, W: np.ndarray, Wx: np.ndarray, flow: Tuple[int, int],
                    tol: float = 1e-8) -> Tuple[np.ndarray, float]:
    """``d_A w`` from ``d_A lambda = {Omega_A, lambda}`` by least-squares coefficient matching.

    Returns velocities and the relative consistency residual of the overdetermined system.
    """
    n, a = flow
    lam = template.lam(W)
    basis = template.basis(W)
    lamx = basis[0].scale(Wx[..., 0])
    for i in range(1, len(basis)):
        lamx = lamx + basis[i].scale(Wx[..., i])
    Om, Omx = value_and_tangent(omega_builder(template, n, a), W, Wx)
    R = poisson_bracket(Om, lam, template.picture, Omx, lamx)
    D, orders = _basis_extent(basis + [R])
    A = _coeff_matrix(basis, D, orders)
    rhs = _coeff_matrix([R], D, orders)[..., 0]
    AH = np.conj(np.swapaxes(A, -1, -2))
    V = np.linalg.solve(AH @ A, (AH @ rhs[..., None]))[..., 0]
    res = np.einsum("...ij,...j->...i", A, V) - rhs
    scale = np.maximum(np.linalg.norm(rhs, axis=-1), 1.0)
    rel = float(np.max(np.linalg.norm(res, axis=-1) / scale)) if res.size else 0.0
    if rel > tol:
        raise OffOrbit(f"off the Whitham orbit: matching residual {rel:.2e} exceeds {tol:.0e}")
    return V, rel


def flow_rhs(field: WhithamField, flow: Tuple[int, int], tol: float = 1e-8) -> Tuple[np.ndarray, float]:
    """Parameter velocities of flow ``(n, a)`` at every node; x-derivatives by fourth-order differences."""
    return flow_velocities(field.template, field.W, field.Wx(), flow, tol)


@dataclass
class Trajectory:
    field: WhithamField
    times: List[float]
    states: List[np.ndarray]
    flagged: Optional[str] = None

    def final(self) -> WhithamField:
        return self.field.with_W(self.states[-1])

    def to_csv_rows(self, stride: int = 1) -> List[list]:
        """Plot-ready rows ``t, x, re..., im...``; every ``stride``-th time slice plus the last."""
        names = ["/".join(map(str, nm)) for nm in self.field.template.names()]
        rows = [["t", "x"] + [f"{nm}.re" for nm in names] + [f"{nm}.im" for nm in names]]
        keep = sorted(set(range(0, len(self.times), max(1, stride))) | {len(self.times) - 1})
        for i in keep:
            t, W = self.times[i], self.states[i]
            for x, w in zip(self.field.x, W):
                rows.append([t, x] + list(np.real(w)) + list(np.imag(w)))
        return rows


def flow_integrate(field: WhithamField, flow: Tuple[int, int], t_end: float, dt: float,
                   value_cap: float = 1e6, gradient_cap: float = 1e6) -> Trajectory:
    """Classical RK4 in the flow time; stops with ``flagged = "gradient catastrophe"`` on blow-up."""
    steps = max(1, int(math.ceil(abs(t_end) / abs(dt) - 1e-12)))
    h = t_end / steps
    W = np.array(field.W, complex)
    traj = Trajectory(field, [0.0], [W.copy()])
    f = lambda Y: flow_rhs(field.with_W(Y), flow)[0]
    for s in range(steps):
        k1 = f(W)
        k2 = f(W + 0.5 * h * k1)
        k3 = f(W + 0.5 * h * k2)
        k4 = f(W + h * k3)
        W = W + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        grad = np.max(np.abs(fd4(W, field.dx)))
        if not np.all(np.isfinite(W)) or np.max(np.abs(W)) > value_cap or grad > gradient_cap:
            traj.flagged = "gradient catastrophe"
            break
        traj.times.append((s + 1) * h)
        traj.states.append(W.copy())
    return traj


def zs_residual(field: WhithamField, A: Tuple[int, int], B: Tuple[int, int], dt: float,
                p_samples: Optional[Sequence[complex]] = None) -> float:
    """``max |d_B Omega_A - d_A Omega_B + {Omega_A, Omega_B}|`` over nodes and ``p_samples``.

    Flow derivatives are central differences of one RK4 step of size ``dt`` in each direction.
    """
    p = np.asarray(p_samples if p_samples is not None else _default_p_samples(field), complex)
    tpl = field.template
    bA, bB = omega_builder(tpl, *A), omega_builder(tpl, *B)

    def moved(flow, sign):
        return flow_integrate(field, flow, sign * dt, dt).states[-1]

    if A == B:
        return 0.0 * float(np.max(np.abs(bA(field.W)(p))))
    dB_OA = (bA(moved(B, 1))(p) - bA(moved(B, -1))(p)) / (2 * dt)
    dA_OB = (bB(moved(A, 1))(p) - bB(moved(A, -1))(p)) / (2 * dt)
    Wx = field.Wx()
    OA, OB = bA(field.W), bB(field.W)
    br = bracket_values(OA, OB, tangent(bA, field.W, Wx), tangent(bB, field.W, Wx), p, tpl.picture)
    return float(np.max(np.abs(dB_OA - dA_OB + br)))


def _default_p_samples(field: WhithamField) -> np.ndarray:
    qs = [np.max(np.abs(field.template.unpack(field.W)[1][a])) for a in range(2, field.template.N + 1)]
    R = 2 + 4 * max(qs, default=0.0)
    return R * np.exp(2j * np.pi * (np.arange(6) + 0.3) / 6)


# -- Orlov data, canonical pairs, hodograph ------------------------------------

@dataclass(frozen=True)
class OrlovTemplate:
    """``M(p)``: polynomial of degree ``degree`` plus principal parts of order ``orders[a]`` at ``q_a``."""

    degree: int = 1
    orders: Tuple[Tuple[int, int], ...] = ()

    @property
    def size(self) -> int:
        return self.degree + 1 + sum(m for _, m in self.orders)

    def build(self, template: OrbitTemplate, W: np.ndarray, C: np.ndarray) -> LogRational:
        qs = template.unpack(W)[1]
        C = np.asarray(C, complex)
        poly = C[..., :self.degree + 1]
        poles = []
        i = self.degree + 1
        for a, m in self.orders:
            poles.append(Pole(a, qs[a], C[..., i:i + m]))
            i += m
        return LogRational(poly, tuple(poles))


@dataclass(frozen=True)
class OrlovField:
    """Global ``M(p)`` with per-puncture ``m_a = n_a z_a^{n_a - 1} M`` as local series.

    ``series[a]`` holds ``m_a`` in the local parameter with leading power ``lead[a]``:
    ``m_1 = sum_k c_k p^{lead - k}``, ``m_a = sum_k c_k (p - q_a)^{k - lead}``.
    """

    template: OrlovTemplate
    C: np.ndarray
    series: Mapping[int, np.ndarray]
    lead: Mapping[int, int]

    def M(self, orbit_template: OrbitTemplate, W: np.ndarray) -> LogRational:
        return self.template.build(orbit_template, W, self.C)

    def perturbed(self, a: int, k: int, delta: complex) -> "OrlovField":
        s = dict(self.series)
        arr = np.array(s[a], complex)
        arr[..., k] += delta
        s[a] = arr
        return replace(self, series=s)


def _local_series_of(F: LogRational, template: OrbitTemplate, W: np.ndarray, a: int, L: int) -> Tuple[np.ndarray, int]:
    """``F`` as a series in the local parameter at ``a``: returns (coefficients, leading power)."""
    F = F.merged()
    if a == 1:
        D = F.poly.shape[-1] - 1
        out = np.zeros(F.batch + (L,), complex)
        for k in range(D + 1):
            if D - k < L:
                out[..., D - k] += F.poly[..., k]
        neg = _at_infinity(F, L)
        for k in range(1, L):
            if D + k < L:
                out[..., D + k] += neg[..., k - 1]
        return out, D
    P = F.pole(a)
    m = P.c.shape[-1] if P is not None else 0
    q = template.unpack(W)[1][a]
    out = np.zeros(F.batch + (L,), complex)
    for k in range(m):
        out[..., m - 1 - k] += P.c[..., k]
    reg = _taylor_at(F, a, q, L)
    out[..., m:] += reg[..., :L - m]
    return out, m


def build_orlov_field(orbit_template: OrbitTemplate, W: np.ndarray, otemplate: OrlovTemplate,
                      C: np.ndarray, order: int = 24) -> OrlovField:
    """Per-puncture series of ``m_a = n_a z_a^{n_a - 1} M(p)``."""
    M = otemplate.build(orbit_template, W, C)
    series, lead = {}, {}
    orbit = AlgebraicOrbit(orbit_template, W)
    for a in range(1, orbit_template.N + 1):
        na = orbit_template.n[a - 1]
        chart = orbit_local_expansion(orbit, a, order)
        Ms, lm = _local_series_of(M, orbit_template, W, a, order)
        zpow = ps_pow(chart.coeffs, na - 1)
        series[a] = na * ps_mul(zpow, Ms)
        # z_1^{n-1} ~ p^{n-1}; z_a^{n-1} ~ t^{-(n-1)}
        lead[a] = (na - 1) + lm
    return OrlovField(otemplate, np.asarray(C, complex), series, lead)


def _eval_local(coeffs: np.ndarray, lead: int, a: int, q, p) -> np.ndarray:
    p = np.asarray(p, complex)
    if a == 1:
        t = 1 / p
        pre = p ** lead
    else:
        t = p - q[..., None]
        pre = t ** (-lead)
    acc = 0
    for k in range(coeffs.shape[-1] - 1, -1, -1):
        acc = acc * t + coeffs[..., k, None]
    return pre * acc


def _d_local(coeffs: np.ndarray, lead: int, a: int, q, p) -> np.ndarray:
    """``d/dp`` of a local series."""
    p = np.asarray(p, complex)
    out = 0
    for k in range(coeffs.shape[-1]):
        if a == 1:
            e = lead - k
            out = out + coeffs[..., k, None] * e * p ** (e - 1)
        else:
            e = k - lead
            out = out + coeffs[..., k, None] * e * (p - q[..., None]) ** (e - 1)
    return out


def _series_tangent(fn: Callable[[np.ndarray], np.ndarray], W: np.ndarray, V: np.ndarray, points: int = 4) -> np.ndarray:
    scale = 1 + np.max(np.abs(W), axis=-1)
    vn = np.max(np.abs(V), axis=-1)
    r = np.where(vn > 0, 1e-3 * scale / np.where(vn > 0, vn, 1), 1.0)
    om = np.exp(2j * np.pi * np.arange(points) / points)
    vals = fn(W[None] + (om.reshape((-1,) + (1,) * r.ndim) * r)[..., None] * V[None])
    acc = np.tensordot(1 / om, vals, axes=(0, 0))
    return acc / (points * r.reshape(r.shape + (1,) * (np.ndim(acc) - r.ndim)))


def puncture_samples(template: OrbitTemplate, W: np.ndarray, a: int, count: int = 16) -> np.ndarray:
    """Circles of radius half the distance to the nearest other puncture (``a >= 2``), or ``|p| = R`` at infinity."""
    u1, qs, us = template.unpack(W)
    om = np.exp(2j * np.pi * (np.arange(count) + 0.5) / count)
    scale = 1 + np.max(np.abs(u1), axis=-1) ** (1.0 / template.n[0]) if u1.shape[-1] else np.ones(np.shape(W)[:-1])
    if a == 1:
        R = 3 * (scale + sum(np.abs(qs[b]) + np.max(np.abs(us[b]), axis=-1) for b in qs))
        return R[..., None] * om
    others = [np.abs(qs[a] - qs[b]) for b in qs if b != a]
    dist = np.minimum.reduce(others) if others else np.ones(np.shape(W)[:-1])
    return qs[a][..., None] + 0.5 * dist[..., None] * om


def canonical_residual(field: WhithamField, orlov: OrlovField, a: int, Cx: Optional[np.ndarray] = None) -> float:
    """``max |{z_a, m_a} - omega(z_a)|`` at samples around puncture ``a``.

    ``m_a`` is read from ``orlov.series[a]``; its x-dependence follows the orbit
    parameters and the ``M`` coefficients (``Cx``, finite differences of ``orlov.C`` by default).
    """
    tpl = field.template
    W = field.W
    Wx = field.Wx()
    order = orlov.series[a].shape[-1]
    Cx = fd4(orlov.C, field.dx) if Cx is None else Cx
    p = puncture_samples(tpl, W, a)
    q = tpl.unpack(W)[1].get(a) if a != 1 else None
    chart = orbit_local_expansion(AlgebraicOrbit(tpl, W), a, order)
    z = _eval_local(chart.coeffs, 1, a, q, p)
    zp = _d_local(chart.coeffs, 1, a, q, p)
    ms = orlov.series[a]
    mp = _d_local(ms, orlov.lead[a], a, q, p)
    P = W.shape[-1]
    WC = np.concatenate([W, orlov.C], axis=-1)
    VC = np.concatenate([Wx, Cx], axis=-1)

    def z_at(Y):
        ch = orbit_local_expansion(AlgebraicOrbit(tpl, Y[..., :P]), a, order)
        qq = tpl.unpack(Y[..., :P])[1].get(a) if a != 1 else None
        return _eval_local(ch.coeffs, 1, a, qq, p)

    def m_at(Y):
        Wy, Cy = Y[..., :P], Y[..., P:]
        of = build_orlov_field(tpl, Wy, orlov.template, Cy, order)
        qq = tpl.unpack(Wy)[1].get(a) if a != 1 else None
        # the stored series may be perturbed; carry the perturbation along unchanged
        extra = ms - build_orlov_field(tpl, W, orlov.template, orlov.C, order).series[a]
        return _eval_local(of.series[a] + extra, orlov.lead[a], a, qq, p)

    zx = _series_tangent(z_at, WC, VC)
    mx = _series_tangent(m_at, WC, VC)
    w = p if tpl.picture == "Toda" else 1.0
    br = w * (zp * mx - zx * mp)
    target = z if tpl.picture == "Toda" else 1.0
    return float(np.max(np.abs(br - target)))


def _reverse_series(g: np.ndarray) -> np.ndarray:
    """Given ``w = t / g(t)`` (``g_0 != 0``), return ``t`` as a series in ``w`` (``t = sum r_k w^k``, ``r_0 = 0``)."""
    L = g.shape[-1]
    t = np.zeros(g.shape, complex)
    t[..., 1] = g[..., 0]
    for _ in range(L):
        # t = w * g(t)  (since w = t / g(t))
        comp = _compose(g, t)
        nt = np.zeros_like(t)
        nt[..., 1:] = comp[..., :-1]
        t = nt
    return t


def _compose(f: np.ndarray, t: np.ndarray) -> np.ndarray:
    """``f(t(w))`` for a series ``t`` with zero constant term."""
    L = f.shape[-1]
    out = np.zeros(np.broadcast_shapes(f.shape[:-1], t.shape[:-1]) + (L,), complex)
    for k in range(L - 1, -1, -1):
        out = ps_mul(out, t)
        out[..., 0] += f[..., k]
    return out


def orlov_z_expansion(orbit_template: OrbitTemplate, W: np.ndarray, M: LogRational, a: int,
                      L: int = 24) -> Tuple[np.ndarray, int]:
    """``m_a = n_a z_a^{n_a-1} M(p)`` as a Laurent series in ``1/z_a``: coefficients of ``z^{top-k}``."""
    na = orbit_template.n[a - 1]
    chart = orbit_local_expansion(AlgebraicOrbit(orbit_template, W), a, L)
    g = chart.coeffs  # z = s^{-1} g(s) with s = 1/p (a = 1) or s = t (a >= 2)
    s_of_w = _reverse_series(g)  # s as a series in w = 1/z
    Ms, lm = _local_series_of(M, orbit_template, W, a, L)
    # M = s^{-lm} * Ms(s) ; s = w * r(w) with r = s_of_w / w
    r = np.zeros_like(s_of_w)
    r[..., :-1] = s_of_w[..., 1:]
    Mw = ps_mul(ps_pow(r, -lm), _compose(Ms, s_of_w))  # M = w^{-lm} Mw(w)
    # m = n z^{n-1} M = n w^{-(n-1)} w^{-lm} Mw
    return na * Mw, (na - 1) + lm


def _hodograph_equations(orbit_template, otemplate, times, x, L):
    """Residual function ``F(unknowns)`` and the equation labels."""
    P = orbit_template.size
    tops = {}
    labels = []
    for a in range(1, orbit_template.N + 1):
        na = orbit_template.n[a - 1]
        deg = otemplate.degree if a == 1 else dict(otemplate.orders).get(a, 0)
        top = na - 1 + deg
        low = 0 if a == 1 else -1
        tops[a] = top
        labels += [(a, k) for k in range(top, low - 1, -1)]

    def target(a, k):
        if a == 1 and k == 0:
            return np.asarray(x) + times.get((1, 1), 0.0)
        if k == -1:
            return times.get((0, a), 0.0)
        return (k + 1) * times.get((k + 1, a), 0.0)

    def F(U):
        W, C = U[..., :P], U[..., P:]
        M = otemplate.build(orbit_template, W, C)
        out = []
        for a in range(1, orbit_template.N + 1):
            ser, top = orlov_z_expansion(orbit_template, W, M, a, L)
            for (b, k) in labels:
                if b != a:
                    continue
                idx = top - k
                val = ser[..., idx] if 0 <= idx < ser.shape[-1] else np.zeros(ser.shape[:-1], complex)
                out.append(np.broadcast_to(val - target(a, k), ser.shape[:-1]))
        return np.stack(out, axis=-1)

    return F, labels


@dataclass
class HodographResult:
    field: WhithamField
    orlov: OrlovField
    cond: np.ndarray
    residual: np.ndarray


def hodograph_solve(orbit_template: OrbitTemplate, otemplate: OrlovTemplate, times: Mapping[Tuple[int, int], complex],
                    x: np.ndarray, guess: np.ndarray, L: int = 16, tol: float = 1e-12,
                    cond_limit: float = 1e12, max_iter: int = 50) -> HodographResult:
    """Newton solution of the matching conditions, batched over the ``x`` nodes.

    At each puncture the nonnegative powers of ``z_a`` in ``m_a`` (and ``z_a^{-1}``
    for ``a >= 2``) are fixed by the times, with ``x`` added to ``t_{11}``.
    ``guess`` holds orbit parameters then ``M`` coefficients, per node or shared.
    """
    times = dict(times)
    x = np.asarray(x, float)
    nunk = orbit_template.size + otemplate.size
    F, labels = _hodograph_equations(orbit_template, otemplate, times, x, L)
    if len(labels) != nunk:
        raise HodographError(f"{len(labels)} matching conditions for {nunk} unknowns")
    U0 = np.broadcast_to(np.asarray(guess, complex), x.shape + (nunk,)).copy()
    U, cond, res = _newton(F, U0, tol, cond_limit, max_iter)
    P = orbit_template.size
    fld = WhithamField(orbit_template, x, U[:, :P])
    orl = build_orlov_field(orbit_template, U[:, :P], otemplate, U[:, P:], L)
    return HodographResult(fld, orl, cond, res)


def _jacobian(F, U, h=1e-7):
    """Batched central-difference Jacobian; one stacked call of ``F``."""
    n = U.shape[-1]
    step = h * (1 + np.abs(U))
    E = np.zeros((2 * n,) + U.shape, complex)
    for i in range(n):
        E[i, ..., i] = step[..., i]
        E[n + i, ..., i] = -step[..., i]
    Fs = F(U[None] + E)
    J = (Fs[:n] - Fs[n:]) / (2 * np.moveaxis(step, -1, 0)[..., None])
    return np.moveaxis(J, 0, -1)


def jacobian_condition(orbit_template, otemplate, times, x, U: np.ndarray, L: int = 16) -> np.ndarray:
    F, _ = _hodograph_equations(orbit_template, otemplate, dict(times), np.asarray(x, float), L)
    return np.linalg.cond(_jacobian(F, np.asarray(U, complex)))


def _newton(F, U, tol, cond_limit, max_iter):
    U = np.array(U, complex)
    r = F(U)
    nr = np.linalg.norm(r, axis=-1)
    for _ in range(max_iter):
        J = _jacobian(F, U)
        cnd = np.linalg.cond(J)
        bad = ~np.isfinite(cnd) | (cnd > cond_limit)
        if np.any(bad):
            raise HodographError(f"non-generic time point: Jacobian condition number {np.max(cnd):.2e}")
        done = nr <= tol * (1 + np.linalg.norm(U, axis=-1))
        if np.all(done):
            return U, cnd, nr
        step = np.linalg.solve(J, -r[..., None])[..., 0]
        step[done] = 0
        lam = np.ones(nr.shape)
        pending = ~done
        Un, rn = U, r
        for _ in range(8):
            trial = U + lam[..., None] * step
            rt = F(trial)
            ok = pending & (np.linalg.norm(rt, axis=-1) < nr)
            Un = np.where(ok[..., None], trial, Un)
            rn = np.where(ok[..., None], rt, rn)
            pending &= ~ok
            if not np.any(pending):
                break
            lam = np.where(pending, lam * 0.5, lam)
        if np.any(pending):
            # no descent even for tiny steps: accept the full step for the stuck nodes
            Un = np.where(pending[..., None], U + step, Un)
            rn = F(Un)
        U, r = Un, rn
        nr = np.linalg.norm(r, axis=-1)
    if np.all(nr <= 10 * tol * (1 + np.linalg.norm(U, axis=-1))):
        return U, np.linalg.cond(_jacobian(F, U)), nr
    raise HodographError(f"Newton did not converge in {max_iter} iterations; last residual {np.max(nr):.2e}")


def canonical_pair_bracket(n: int, f: Sequence[complex], p: np.ndarray, x: float = 0.3) -> np.ndarray:
    """``{p^n, x/(n p^{n-1}) + f(p)}`` in the KP picture at samples ``p``; identically 1."""
    p = np.asarray(p, complex)
    P = LogRational.polynomial(np.eye(n + 1)[n], const=True)
    Q = LogRational(np.zeros((1,), complex), (Pole(0, np.zeros((), complex), np.eye(n - 1)[n - 2] * x / n),)) \
        if n > 1 else LogRational.polynomial([x])
    Q = Q + LogRational.polynomial(np.asarray(f, complex) if len(f) else [0.0])
    # d/dx acts only on the explicit x
    Qx = LogRational(np.zeros((1,), complex), (Pole(0, np.zeros((), complex), np.eye(n - 1)[n - 2] / n),)) \
        if n > 1 else LogRational.polynomial([1.0])
    return bracket_values(P, Q, LogRational.polynomial([0.0]), Qx, p, "KP")


def dless_string_residual(field: WhithamField, orlov: OrlovField,
                          pairs: Optional[Sequence[Tuple[Callable, Callable]]] = None,
                          p_samples: Optional[np.ndarray] = None) -> float:
    """``max_{a,b} |P_a(z_a, m_a) - P_b(z_b, m_b)| + |Q_a(z_a, m_a) - Q_b(z_b, m_b)|`` at shared ``p``.

    Default pairs: ``P_a = z^{n_a}``, ``Q_a = m / (n_a z^{n_a - 1})``.
    """
    tpl = field.template
    if tpl.N == 1:
        return 0.0
    W = field.W
    if pairs is None:
        pairs = [((lambda z, m, na=na: z ** na), (lambda z, m, na=na: m / (na * z ** (na - 1)))) for na in tpl.n]
    p = _default_p_samples(field) if p_samples is None else np.asarray(p_samples, complex)
    p = np.broadcast_to(p, W.shape[:-1] + p.shape[-1:])
    vals = []
    for a in range(1, tpl.N + 1):
        q = tpl.unpack(W)[1].get(a) if a != 1 else None
        chart = orbit_local_expansion(AlgebraicOrbit(tpl, W), a, orlov.series[a].shape[-1])
        z = _eval_local(chart.coeffs, 1, a, q, p)
        m = _eval_local(orlov.series[a], orlov.lead[a], a, q, p)
        Pa, Qa = pairs[a - 1]
        vals.append((Pa(z, m), Qa(z, m)))
    worst = 0.0
    for i in range(len(vals)):
        for j in range(i + 1, len(vals)):
            d = np.abs(vals[i][0] - vals[j][0]) + np.abs(vals[i][1] - vals[j][1])
            worst = max(worst, float(np.max(d)))
    return worst


# -- KP and Toda pictures -----------------------------------------------------

def kp_to_toda(template: OrbitTemplate, W: np.ndarray, a0: int = 2) -> Tuple[OrbitTemplate, np.ndarray]:
    """Recentre ``p_Toda = p_KP - q_{a0}``; returns the Toda template and parameters."""
    if template.picture != "KP":
        raise ValueError("expected KP-picture data")
    T = OrbitTemplate(template.n, "Toda", a0)
    u1, qs, us = template.unpack(W)
    qa0 = qs[a0]
    c = np.concatenate([u1, np.ones(u1.shape[:-1] + (1,), complex)], axis=-1)
    c = _shift_poly(c, qa0)  # coefficients in powers of p_Toda
    out = []
    for nm in T.names():
        if nm[0] == "u" and nm[1] == 1:
            out.append(c[..., nm[2]])
        elif nm[0] == "q":
            out.append(qs[nm[1]] - qa0)
        else:
            out.append(us[nm[1]][..., nm[2] - 1])
    return T, np.stack(out, axis=-1)


def picture_consistency(template: OrbitTemplate, W: np.ndarray, Wx: np.ndarray, flow: Tuple[int, int],
                        a0: int = 2) -> float:
    """Velocities of ``flow`` in the KP picture against the Toda picture on the same orbit.

    The Toda x-derivative is ``-d/dt_{0,a0}``, computed from the KP data; the KP
    velocities are pushed through the recentring map and compared.
    """
    T, WT = kp_to_toda(template, W, a0)
    tomap = lambda Y: kp_to_toda(template, Y, a0)[1]
    V_kp, _ = flow_velocities(template, W, Wx, flow)
    V0, _ = flow_velocities(template, W, Wx, (0, a0))
    WTx = -_vec_tangent(tomap, W, V0)
    V_toda, _ = flow_velocities(T, WT, WTx, flow)
    V_kp_mapped = _vec_tangent(tomap, W, V_kp)
    scale = max(1.0, float(np.max(np.abs(V_kp_mapped))))
    return float(np.max(np.abs(V_toda - V_kp_mapped))) / scale


def _vec_tangent(fn, W, V, points: int = 4):
    return _series_tangent(fn, np.asarray(W, complex), np.asarray(V, complex), points)
