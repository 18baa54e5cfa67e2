"""Classical finite-difference stencils and a least-squares baseline on graphs."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .graphs import SpatialGraph

OPERATORS = ("x", "y", "xx", "yy")


class SingularSystemError(ValueError):
    pass


@dataclass(frozen=True)
class Stencil:
    offsets: tuple
    order: int
    coeffs: tuple

    def moment_residuals(self) -> list[float]:
        n = len(self.offsets)
        out = []
        for m in range(n):
            target = math.factorial(self.order) if m == self.order else 0
            total = sum(a * s ** m for a, s in zip(self.coeffs, self.offsets))
            out.append(float(total - target))
        return out


def _gauss_solve(A: list[list], b: list) -> list:
    """Gaussian elimination with partial pivoting; works for floats and Fractions."""
    n = len(A)
    M = [list(row) + [rhs] for row, rhs in zip(A, b)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: abs(M[r][col]))
        if M[pivot][col] == 0:
            raise SingularSystemError("moment system is singular (duplicate offsets?)")
        M[col], M[pivot] = M[pivot], M[col]
        for r in range(col + 1, n):
            f = M[r][col] / M[col][col]
            if f:
                for c in range(col, n + 1):
                    M[r][c] -= f * M[col][c]
    x = [0] * n
    for r in range(n - 1, -1, -1):
        acc = M[r][n]
        for c in range(r + 1, n):
            acc -= M[r][c] * x[c]
        x[r] = acc / M[r][r]
    return x


def solve_coefficients(offsets: Sequence, order: int) -> Stencil:
    """Weights alpha with sum_i alpha_i s_i^m = order! [m == order] for m < n.

    Float offsets give float weights; ``Fraction`` offsets give exact weights.
    """
    offsets = tuple(offsets)
    n = len(offsets)
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    if n <= order:
        raise ValueError(f"need more than {order} offsets for a derivative of order {order}, got {n}")
    if len(set(offsets)) != n:
        raise SingularSystemError(f"offsets must be distinct: {offsets}")
    exact = all(isinstance(s, (int, Fraction)) for s in offsets)
    one = Fraction(1) if exact else 1.0
    pts = [Fraction(s) if exact else float(s) for s in offsets]
    A = [[one * s ** m for s in pts] for m in range(n)]
    b = [one * math.factorial(order) if m == order else one * 0 for m in range(n)]
    return Stencil(tuple(pts), order, tuple(_gauss_solve(A, b)))


def apply_stencil(stencil: Stencil, samples: Sequence[float]) -> float:
    if len(samples) != len(stencil.coeffs):
        raise ValueError(f"stencil has {len(stencil.coeffs)} points but got {len(samples)} samples")
    return sum(a * u for a, u in zip(stencil.coeffs, samples))


def format_exact(value) -> str:
    """Decimal text when the value terminates, otherwise p/q."""
    frac = Fraction(value)
    if frac.denominator == 1:
        return str(frac.numerator)
    d = frac.denominator
    for p in (2, 5):
        while d % p == 0:
            d //= p
    if d != 1:
        return f"{frac.numerator}/{frac.denominator}"
    digits = 0
    scaled = frac
    while scaled.denominator != 1:
        scaled *= 10
        digits += 1
    sign = "-" if scaled < 0 else ""
    mag = str(abs(scaled.numerator)).rjust(digits + 1, "0")
    return f"{sign}{mag[:-digits]}.{mag[-digits:]}"


# -- irregular-graph baseline -----------------------------------------------


@dataclass
class FdmBaselineReport:
    estimates: np.ndarray  # [N, 4] in OPERATORS order
    flagged: np.ndarray  # node ids whose fit was rank deficient
    neighborhood_size: np.ndarray  # [N]

    @property
    def n_flagged(self) -> int:
        return int(self.flagged.size)


def _quadratic_design(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(dx), dx, dy, 0.5 * dx * dx, dx * dy, 0.5 * dy * dy], axis=1)


def graph_fdm_baseline(graph: SpatialGraph, signals: np.ndarray) -> FdmBaselineReport:
    """Per-node derivatives from a least-squares local quadratic fit.

    The neighbourhood is the node plus its out-neighbours, widened hop by hop
    while it is too small to pin a quadratic. If out-edges alone stop adding
    nodes, in-edges are followed too.
    """
    signals = np.asarray(signals, dtype=float)
    n = graph.n_nodes
    nbrs = [[] for _ in range(n)]
    both = [[] for _ in range(n)]
    for s, d in zip(graph.src.tolist(), graph.dst.tolist()):
        nbrs[s].append(d)
        both[s].append(d)
        both[d].append(s)
    est = np.zeros((n, 4))
    flagged = []
    sizes = np.zeros(n, dtype=int)
    for i in range(n):
        hood = dict.fromkeys([i] + nbrs[i])
        adjacency = nbrs
        while len(hood) < 6:
            before = len(hood)
            for j in list(hood):
                hood.update(dict.fromkeys(adjacency[j]))
            if len(hood) == before:
                if adjacency is both:
                    break
                adjacency = both
        idx = np.fromiter(hood, dtype=int)
        sizes[i] = idx.size
        dx = graph.coords[idx, 0] - graph.coords[i, 0]
        dy = graph.coords[idx, 1] - graph.coords[i, 1]
        A = _quadratic_design(dx, dy)
        coef, _, rank, _ = np.linalg.lstsq(A, signals[idx], rcond=None)
        if rank < 6:
            flagged.append(i)
            continue
        est[i] = coef[[1, 2, 3, 5]]
    flagged = np.array(flagged, dtype=int)
    if flagged.size:
        warnings.warn(f"graph_fdm_baseline: {flagged.size} rank-deficient local fits set to 0", RuntimeWarning)
    return FdmBaselineReport(est, flagged, sizes)
