"""Banded operators: Laurent series in the shift with matrix coefficients.

An operator ``X = sum_j X_j(n) Lambda^j`` acts on sequences ``f: Z -> C^{N x N}``
by ``(X f)(n) = sum_j X_j(n) f(n + j)``.  Coefficients are stored on a finite
lattice window; every product records the tightest window on which all the
data it touched was available, so truncation error never hides behind
fabricated out-of-window values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

DEFAULT_BAND_BUDGET = 6


class WindowExhausted(ValueError):
    """A product or inverse ran out of lattice window."""


class ClassMismatch(ValueError):
    pass


class SingularLeadingCoefficient(ValueError):
    pass


@dataclass(frozen=True)
class LatticeWindow:
    n_min: int
    n_max: int

    def __post_init__(self):
        if self.n_min > self.n_max:
            raise WindowExhausted(f"window exhausted: [{self.n_min}, {self.n_max}]")

    @property
    def width(self) -> int:
        return self.n_max - self.n_min + 1

    def indices(self) -> np.ndarray:
        return np.arange(self.n_min, self.n_max + 1)

    def contains(self, other: "LatticeWindow") -> bool:
        return self.n_min <= other.n_min and other.n_max <= self.n_max

    def intersect(self, other: "LatticeWindow") -> "LatticeWindow":
        return LatticeWindow(max(self.n_min, other.n_min), min(self.n_max, other.n_max))

    def shrink(self, left: int, right: int) -> "LatticeWindow":
        return LatticeWindow(self.n_min + left, self.n_max - right)

    def as_tuple(self) -> Tuple[int, int]:
        return (self.n_min, self.n_max)


def _as_window(w) -> LatticeWindow:
    if isinstance(w, LatticeWindow):
        return w
    return LatticeWindow(int(w[0]), int(w[1]))


@dataclass(frozen=True, eq=False)
class BandedOperator:
    """Element of the operator algebra restricted to a lattice window.

    ``bands[j]`` has shape ``(window.width, N, N)``; row ``i`` holds ``X_j(n_min + i)``.
    """

    N: int
    window: LatticeWindow
    bands: Mapping[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        w = _as_window(self.window)
        object.__setattr__(self, "window", w)
        clean = {}
        for j, c in self.bands.items():
            c = np.asarray(c, dtype=complex)
            if c.shape != (w.width, self.N, self.N):
                raise ValueError(
                    f"band {j}: shape {c.shape} does not match window width {w.width} and N={self.N}"
                )
            c.setflags(write=False)
            clean[int(j)] = c
        object.__setattr__(self, "bands", dict(sorted(clean.items())))

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, N: int, window) -> "BandedOperator":
        return cls(N, _as_window(window), {})

    @classmethod
    def identity(cls, N: int, window) -> "BandedOperator":
        return cls.shift(0, N, window)

    @classmethod
    def shift(cls, j: int, N: int, window, coeff=None) -> "BandedOperator":
        """``coeff * Lambda^j`` with a constant N x N coefficient (identity by default)."""
        w = _as_window(window)
        c = np.eye(N, dtype=complex) if coeff is None else np.asarray(coeff, dtype=complex)
        return cls(N, w, {j: np.broadcast_to(c, (w.width, N, N)).copy()})

    @classmethod
    def diagonal_sequence(cls, f: Callable[[np.ndarray], np.ndarray], N: int, window) -> "BandedOperator":
        """Band-0 operator ``n -> f(n)``; ``f`` maps an index array to ``(W,)`` scalars or ``(W,N,N)``."""
        w = _as_window(window)
        vals = np.asarray(f(w.indices()), dtype=complex)
        if vals.ndim == 1:
            vals = vals[:, None, None] * np.eye(N)
        return cls(N, w, {0: vals})

    @classmethod
    def lattice_n(cls, N: int, window) -> "BandedOperator":
        """Multiplication by the lattice variable: ``n -> n * I``."""
        return cls.diagonal_sequence(lambda n: n.astype(float), N, window)

    @classmethod
    def from_constant_bands(cls, bands: Mapping[int, np.ndarray], N: int, window) -> "BandedOperator":
        w = _as_window(window)
        return cls(N, w, {j: np.broadcast_to(np.asarray(c, complex), (w.width, N, N)).copy()
                          for j, c in bands.items()})

    # -- structure ----------------------------------------------------------

    @property
    def is_zero(self) -> bool:
        return not self.bands

    def band_range(self) -> Tuple[int, int]:
        if not self.bands:
            return (0, 0)
        keys = list(self.bands)
        return (keys[0], keys[-1])

    def band(self, j: int) -> np.ndarray:
        c = self.bands.get(j)
        if c is None:
            return np.zeros((self.window.width, self.N, self.N), dtype=complex)
        return c

    def at(self, j: int, n: int) -> np.ndarray:
        return self.band(j)[n - self.window.n_min]

    def restrict(self, window) -> "BandedOperator":
        w = _as_window(window)
        if not self.window.contains(w):
            raise WindowExhausted(f"window exhausted: {w.as_tuple()} not inside {self.window.as_tuple()}")
        lo = w.n_min - self.window.n_min
        return BandedOperator(self.N, w, {j: c[lo:lo + w.width] for j, c in self.bands.items()})

    def truncate(self, lo: Optional[int] = None, hi: Optional[int] = None) -> "BandedOperator":
        """Drop bands outside ``[lo, hi]``."""
        keep = {j: c for j, c in self.bands.items()
                if (lo is None or j >= lo) and (hi is None or j <= hi)}
        return BandedOperator(self.N, self.window, keep)

    def budget(self, K: int) -> "BandedOperator":
        return self.truncate(-K, K)

    def prune(self, tol: float = 0.0) -> "BandedOperator":
        """Remove bands whose coefficients are all below ``tol`` in magnitude."""
        keep = {j: c for j, c in self.bands.items() if np.max(np.abs(c), initial=0.0) > tol}
        return BandedOperator(self.N, self.window, keep)

    def max_norm(self, bands: Optional[Iterable[int]] = None) -> float:
        js = self.bands if bands is None else [j for j in bands if j in self.bands]
        return max((float(np.max(np.abs(self.bands[j]))) for j in js), default=0.0)

    def map_bands(self, fn) -> "BandedOperator":
        return BandedOperator(self.N, self.window, {j: fn(c) for j, c in self.bands.items()})

    def entry(self, r: int, c: int) -> "BandedOperator":
        """Scalar (1 x 1) operator formed by the (r, c) entries of every band."""
        return BandedOperator(1, self.window, {j: b[:, r:r + 1, c:c + 1] for j, b in self.bands.items()})

    def left_mul_matrix(self, E: np.ndarray) -> "BandedOperator":
        E = np.asarray(E, complex)
        return self.map_bands(lambda c: np.einsum("ab,wbc->wac", E, c))

    def right_mul_matrix(self, E: np.ndarray) -> "BandedOperator":
        E = np.asarray(E, complex)
        return self.map_bands(lambda c: np.einsum("wab,bc->wac", c, E))

    # -- arithmetic ---------------------------------------------------------

    def _check_compatible(self, other: "BandedOperator"):
        if self.N != other.N:
            raise ValueError(f"matrix size mismatch: {self.N} vs {other.N}")

    def __add__(self, other: "BandedOperator") -> "BandedOperator":
        self._check_compatible(other)
        w = self.window.intersect(other.window)
        a, b = self.restrict(w), other.restrict(w)
        out = dict(a.bands)
        for j, c in b.bands.items():
            out[j] = out[j] + c if j in out else c
        return BandedOperator(self.N, w, out)

    def __neg__(self) -> "BandedOperator":
        return self.map_bands(lambda c: -c)

    def __sub__(self, other: "BandedOperator") -> "BandedOperator":
        return self + (-other)

    def scale(self, alpha) -> "BandedOperator":
        return self.map_bands(lambda c: alpha * c)

    def __rmul__(self, alpha) -> "BandedOperator":
        return self.scale(alpha)

    def __matmul__(self, other: "BandedOperator") -> "BandedOperator":
        return band_mul(self, other)


def product_window(X: BandedOperator, Y: BandedOperator) -> LatticeWindow:
    """Rows ``n`` of ``X Y`` for which every ``n + i`` (``i`` a band of ``X``) lies in ``Y``'s window."""
    if X.is_zero:
        lo_i, hi_i = 0, 0
    else:
        lo_i, hi_i = X.band_range()
    n_min = max(X.window.n_min, Y.window.n_min - lo_i)
    n_max = min(X.window.n_max, Y.window.n_max - hi_i)
    if n_min > n_max:
        raise WindowExhausted(
            f"window exhausted: product of windows {X.window.as_tuple()} and {Y.window.as_tuple()} "
            f"with bands {X.band_range()}"
        )
    return LatticeWindow(n_min, n_max)


def band_mul(X: BandedOperator, Y: BandedOperator, K: Optional[int] = None) -> BandedOperator:
    """Product ``Z_{i+j}(n) = sum X_i(n) Y_j(n+i)``; optional band budget ``K`` drops ``|i+j| > K``."""
    X._check_compatible(Y)
    w = product_window(X, Y)
    out: Dict[int, np.ndarray] = {}
    xo = w.n_min - X.window.n_min
    for i, xc in X.bands.items():
        xs = xc[xo:xo + w.width]
        yo = w.n_min + i - Y.window.n_min
        for j, yc in Y.bands.items():
            k = i + j
            if K is not None and abs(k) > K:
                continue
            term = np.matmul(xs, yc[yo:yo + w.width])
            if k in out:
                out[k] += term
            else:
                out[k] = term
    return BandedOperator(X.N, w, out)


def commutator(X: BandedOperator, Y: BandedOperator, K: Optional[int] = None) -> BandedOperator:
    return band_mul(X, Y, K) - band_mul(Y, X, K)


def split_project(X: BandedOperator, part: str) -> BandedOperator:
    """``plus`` keeps bands ``j >= 0``; ``minus`` keeps ``j < 0``."""
    if part == "plus":
        return X.truncate(lo=0)
    if part == "minus":
        return X.truncate(hi=-1)
    raise ValueError(f"unknown part {part!r}")


def power(X: BandedOperator, m: int, K: Optional[int] = None, inverse: Optional[BandedOperator] = None) -> BandedOperator:
    """``X^m``; negative powers need ``inverse``."""
    if m == 0:
        return BandedOperator.identity(X.N, X.window)
    base = X if m > 0 else inverse
    if base is None:
        raise ValueError("negative power requires the inverse operator")
    out = base
    for _ in range(abs(m) - 1):
        out = band_mul(out, base, K)
    return out


def invert(X: BandedOperator, cls: str, order: int) -> BandedOperator:
    """Inverse of an element of ``G-`` (unit band 0, negative bands) or ``G+`` (bands >= 0).

    For ``G-`` the Neumann series ``sum (-N)^m`` of the strictly lowering part is
    summed band by band; for ``G+`` the triangular recursion on band-0
    inverses is solved upward.  Bands are kept up to ``|j| <= order``.
    """
    lo, hi = X.band_range()
    N = X.N
    eye = np.eye(N)
    if cls == "Gminus":
        if hi > 0 or 0 not in X.bands or not np.allclose(X.bands[0], eye, rtol=0, atol=1e-13):
            raise ClassMismatch("class mismatch: expected identity band 0 and only negative bands")
        w = X.window.shrink(order, 0)
        Wd = X.window.width
        full = {0: np.broadcast_to(eye, (Wd, N, N)).astype(complex)}
        for m in range(1, order + 1):
            acc = np.zeros((Wd, N, N), dtype=complex)
            for i in range(1, m + 1):
                xi = X.bands.get(-i)
                if xi is not None:
                    # Y_{-(m-i)}(n - i) aligned to row n
                    acc[i:] -= np.matmul(xi[i:], full[m - i][:-i])
            acc[:m] = np.nan  # needs data left of the window
            full[m] = acc
        base = w.n_min - X.window.n_min
        return BandedOperator(N, w, {-m: full[m][base:base + w.width] for m in range(order + 1)})
    if cls == "Gplus":
        if lo < 0 or 0 not in X.bands:
            raise ClassMismatch("class mismatch: expected bands >= 0 with a band-0 coefficient")
        x0 = X.bands[0]
        cond = np.linalg.cond(x0)
        if not np.all(np.isfinite(cond)) or np.max(cond) > 1e13:
            raise SingularLeadingCoefficient("leading coefficient singular")
        w = X.window.shrink(0, order)
        Wd = X.window.width
        inv0 = np.linalg.inv(x0)
        full = {0: inv0}
        for m in range(1, order + 1):
            acc = np.zeros((Wd, N, N), dtype=complex)
            for i in range(1, m + 1):
                xi = X.bands.get(i)
                if xi is None:
                    continue
                prev = full[m - i]
                acc[:-i] -= np.matmul(xi[:-i], prev[i:])
            acc[Wd - m:] = np.nan
            full[m] = np.matmul(inv0, acc)
        base = w.n_min - X.window.n_min
        return BandedOperator(N, w, {m: full[m][base:base + w.width] for m in range(order + 1)})
    raise ValueError(f"unknown class {cls!r}")


# -- dense bridge -------------------------------------------------------------

def to_dense(X: BandedOperator, window=None) -> np.ndarray:
    """Block matrix with block ``(n, n + j) = X_j(n)`` on ``window`` (default: X's own).

    Rows of ``window`` outside X's window are zero; columns leaving ``window`` are dropped.
    """
    w = X.window if window is None else _as_window(window)
    W, N = w.width, X.N
    B = np.zeros((W, W, N, N), dtype=complex)
    lo = max(w.n_min, X.window.n_min)
    hi = min(w.n_max, X.window.n_max)
    if lo <= hi:
        n = np.arange(lo, hi + 1)
        for j, c in X.bands.items():
            col = n + j - w.n_min
            ok = (col >= 0) & (col < W)
            B[n[ok] - w.n_min, col[ok]] = c[n[ok] - X.window.n_min]
    return B.transpose(0, 2, 1, 3).reshape(W * N, W * N)


def from_dense(M: np.ndarray, N: int, window, bands: Optional[Iterable[int]] = None) -> BandedOperator:
    """Read bands back from a block matrix.  Entries whose column leaves the window are zero."""
    w = _as_window(window)
    W = w.width
    if M.shape != (W * N, W * N):
        raise ValueError("dense matrix does not match window and N")
    B = M.reshape(W, N, W, N).transpose(0, 2, 1, 3)
    js = range(-(W - 1), W) if bands is None else bands
    out = {}
    rows = np.arange(W)
    for j in js:
        cols = rows + j
        ok = (cols >= 0) & (cols < W)
        c = np.zeros((W, N, N), dtype=complex)
        c[ok] = B[rows[ok], cols[ok]]
        if bands is not None or np.any(c != 0):
            out[j] = c
    return BandedOperator(N, w, out)


# -- serialization ------------------------------------------------------------

def to_json_dict(X: BandedOperator) -> dict:
    return {
        "N": X.N,
        "window": [X.window.n_min, X.window.n_max],
        "bands": {
            str(j): [[[float(v.real), float(v.imag)] for v in c_n.reshape(-1)] for c_n in c]
            for j, c in X.bands.items()
        },
    }


def from_json_dict(d: dict) -> BandedOperator:
    N = int(d["N"])
    w = LatticeWindow(*d["window"])
    bands = {}
    for j, rows in d["bands"].items():
        arr = np.array(rows, dtype=float)
        bands[int(j)] = (arr[..., 0] + 1j * arr[..., 1]).reshape(w.width, N, N)
    return BandedOperator(N, w, bands)


def relative_residual(X: BandedOperator, scale: float, bands: Optional[Iterable[int]] = None) -> float:
    return X.max_norm(bands) / max(scale, 1e-300)
