"""Recipes for the factorization datum ``g``.

Random coefficients are drawn once on a fixed master lattice so that the same
seed yields the same ``g(n)`` whatever window a computation asks for.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import scipy.linalg

from .core_ops import BandedOperator, LatticeWindow, from_dense, to_dense

MASTER_HALF_WIDTH = 1024
KINDS = ("identity", "explicit-bands", "near-identity-random", "exponential-of-element", "slow-random",
         "slow-exponential")


@dataclass(frozen=True)
class GSpec:
    kind: str = "near-identity-random"
    seed: int = 0
    amplitude: float = 0.02
    bandwidth: int = 1
    decay: float = 0.6
    # explicit-bands payload: band -> N x N constant coefficient
    bands: Optional[Dict[int, tuple]] = None
    # slow kinds: coefficients vary as functions of slow_eps * n
    slow_eps: float = 0.1
    # project onto the commutant of Lambda^period (0 = no projection)
    period: int = 0
    # multiplier on the off-diagonal blocks of the random part
    coupling: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown g kind {self.kind!r}; expected one of {KINDS}")
        if self.amplitude < 0:
            raise ValueError("amplitude must be non-negative")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if self.bands is not None:
            d["bands"] = {str(j): [[[float(np.real(v)), float(np.imag(v))] for v in row] for row in c]
                          for j, c in self.bands.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GSpec":
        d = dict(d)
        if d.get("bands") is not None:
            d["bands"] = {int(j): tuple(tuple(complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v)
                                              for v in row) for row in c)
                          for j, c in d["bands"].items()}
        return cls(**d)


def _master_coefficients(spec: GSpec, N: int) -> Dict[int, np.ndarray]:
    """Band coefficients of ``g - I`` on the master lattice ``[-M, M]``."""
    M = MASTER_HALF_WIDTH
    n = np.arange(-M, M + 1)
    rng = np.random.default_rng(spec.seed)
    out = {}
    for j in range(-spec.bandwidth, spec.bandwidth + 1):
        w = spec.amplitude * spec.decay ** abs(j)
        if spec.kind in ("slow-random", "slow-exponential"):
            c0 = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
            c1 = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
            phase = rng.uniform(0, 2 * np.pi)
            prof = np.sin(spec.slow_eps * n + phase)
            out[j] = w * (c0[None] + prof[:, None, None] * c1[None]) / np.sqrt(2)
        else:
            r = rng.standard_normal((2 * M + 1, N, N)) + 1j * rng.standard_normal((2 * M + 1, N, N))
            out[j] = w * r / np.sqrt(2)
    if spec.coupling != 1.0:
        off = 1 - np.eye(N)
        for j in out:
            out[j] = out[j] * (1 + (spec.coupling - 1) * off)
    if spec.period:
        ell = spec.period
        for j, c in out.items():
            avg = np.zeros_like(c)
            for r in range(ell):
                sel = (n % ell) == r
                avg[sel] = c[sel].mean(axis=0)
            out[j] = avg
    return out


def realize(spec: GSpec, N: int, window) -> BandedOperator:
    """The operator ``g`` on ``window``."""
    w = window if isinstance(window, LatticeWindow) else LatticeWindow(*window)
    I = BandedOperator.identity(N, w)
    if spec.kind == "identity":
        return I
    if spec.kind == "explicit-bands":
        if not spec.bands:
            raise ValueError("explicit-bands g needs a bands payload")
        return BandedOperator.from_constant_bands({j: np.array(c, complex) for j, c in spec.bands.items()}, N, w)
    M = MASTER_HALF_WIDTH
    if w.n_min < -M or w.n_max > M:
        raise ValueError(f"window {w.as_tuple()} exceeds the master lattice [-{M}, {M}]")
    coeffs = _master_coefficients(spec, N)
    lo = w.n_min + M
    pert = BandedOperator(N, w, {j: c[lo:lo + w.width] for j, c in coeffs.items()})
    if spec.kind in ("near-identity-random", "slow-random"):
        return I + pert
    # exponential-of-element: dense exponential on a padded window, interior bands read back
    pad = 40 + 4 * spec.bandwidth
    big = LatticeWindow(w.n_min - pad, w.n_max + pad)
    lo_b = big.n_min + M
    X = BandedOperator(N, big, {j: c[lo_b:lo_b + big.width] for j, c in coeffs.items()})
    E = scipy.linalg.expm(to_dense(X))
    cut = 4 * spec.bandwidth + 8
    G = from_dense(E, N, big, bands=range(-cut, cut + 1)).restrict(w)
    return G.prune(1e-17)
