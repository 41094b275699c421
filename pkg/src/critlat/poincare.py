"""Directional slab averages and the critical Poincare inequality.

The k-th slab holds the integer displacements whose first coordinate lies in
[3^k, 2*3^k) while every other coordinate is smaller than 3^k in absolute
value; weighting its points proportionally to the jump weight gives a convex
averaging operator per scale.  Iterating one slab average slides the support
of any function off the domain in finitely many steps (the first coordinate
drops by at least 3^k per application), which is the combinatorial mechanism
behind the box Poincare inequality for the critical energy: the functional
inequality itself is quantified here through the smallest eigenvalue of the
unit-conductance energy operator.

Averages act on explicit lattice windows (integer anchor plus dense value
block) so iterated supports can grow and slide freely, with exact zero
restriction once the overlap with the domain is empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .environment import EnvironmentSpec
from .grid import Discretization, GridFunction
from .operator import OperatorHandle

__all__ = [
    "LatticeWindow",
    "slab_average",
    "exit_steps",
    "admissible_scales",
    "single_scale_ratio",
    "PoincareReport",
    "poincare_constant",
]

_WINDOW_CAP = int(5e7)


class LatticeWindow:
    """Dense block of values anchored at an integer corner (zero outside)."""

    def __init__(self, lo, values: np.ndarray):
        self.lo = np.asarray(lo, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        if self.values.ndim != self.lo.size:
            raise ValueError("window anchor and value block dimensions differ")

    @property
    def d(self) -> int:
        return self.lo.size

    @property
    def hi(self) -> np.ndarray:
        return self.lo + np.array(self.values.shape, dtype=np.int64) - 1

    @classmethod
    def from_grid(cls, g: GridFunction) -> "LatticeWindow":
        return cls(g.disc.ilo.copy(), g.values.reshape(g.disc.shape).copy())

    def norm_l2(self) -> float:
        return math.sqrt(float(np.sum(self.values**2)))

    def restrict_to(self, disc: Discretization) -> GridFunction:
        """Values on the domain sites, exact zeros where there is no overlap."""
        out = np.zeros(disc.shape)
        lo = np.maximum(self.lo, disc.ilo)
        hi = np.minimum(self.hi, disc.ihi)
        if np.all(lo <= hi):
            dst = tuple(
                slice(int(a - disc.ilo[j]), int(b - disc.ilo[j] + 1))
                for j, (a, b) in enumerate(zip(lo, hi))
            )
            src = tuple(
                slice(int(a - self.lo[j]), int(b - self.lo[j] + 1))
                for j, (a, b) in enumerate(zip(lo, hi))
            )
            out[dst] = self.values[src]
        return GridFunction(disc, out.reshape(-1))


def slab_average(win: LatticeWindow, k: int) -> LatticeWindow:
    """One application of the k-th slab average to a lattice window.

    The result window covers the exact support bound of the average: the
    first coordinate slides down by [3^k, 2*3^k - 1], the remaining
    coordinates widen by 3^k - 1 on both sides.
    """
    d = win.d
    pts, weights = kernel.slab_weights(k, d)
    r = 3**k
    new_lo = win.lo.copy()
    new_lo[0] -= 2 * r - 1
    new_lo[1:] -= r - 1
    new_shape = list(win.values.shape)
    new_shape[0] += r - 1
    for a in range(1, d):
        new_shape[a] += 2 * (r - 1)
    if int(np.prod(new_shape)) > _WINDOW_CAP:
        raise MemoryError(
            f"iterated averaging window exceeds {_WINDOW_CAP} sites"
        )
    out = np.zeros(new_shape)
    old_shape = win.values.shape
    for w, wt in zip(pts, weights):
        # value block of h(. + w): the old window shifted to anchor lo - w
        anchor = win.lo - w
        dst = tuple(
            slice(int(anchor[a] - new_lo[a]),
                  int(anchor[a] - new_lo[a] + old_shape[a]))
            for a in range(d)
        )
        out[dst] += wt * win.values
    return LatticeWindow(new_lo, out)


def exit_steps(disc: Discretization, k: int) -> int:
    """Applications of the k-th slab average after which any function
    supported on the domain vanishes identically on the domain.

    Each application lowers the maximal first coordinate of the support by
    at least 3^k, so the count never exceeds ceil(diam / (eps * 3^k))."""
    extent = int(disc.ihi[0] - disc.ilo[0])
    return extent // 3**k + 1


def admissible_scales(disc: Discretization) -> list[int]:
    """Slab indices k whose physical scale eps*3^k still fits the domain."""
    out = []
    k = 0
    while disc.eps * 3**k <= disc.dom.diameter():
        out.append(k)
        k += 1
    return out


def single_scale_ratio(g: GridFunction, k: int) -> float:
    """Squared L2 mass against the k-th dyadic-of-three shell energy.

    ratio = ||g||_L2^2 / (diam^2 * eps^2d * sum over ordered pairs at
    sup-norm distance in [3^k, 3^(k+1)) of the unit-weight squared
    increment), with g extended by zero.  Returns 0 for vanishing g; the
    relevant bound sums these ratios' reciprocals over admissible scales.
    """
    disc = g.disc
    d = disc.d
    num = disc.eps**d * float(np.dot(g.values, g.values))
    if num == 0.0:
        return 0.0
    m = 3 ** (k + 1) - 1
    pad_shape = tuple(n + 2 * m for n in disc.shape)
    padded = np.zeros(pad_shape)
    core = tuple(slice(m, m + n) for n in disc.shape)
    padded[core] = g.values.reshape(disc.shape)
    total = 0.0
    lo_r = 3**k
    for block in _sup_shell_blocks(lo_r, m, d):
        for w in block:
            lo = [m - max(int(w[a]), 0) for a in range(d)]
            sl_x = tuple(
                slice(lo[a], lo[a] + disc.shape[a] + abs(int(w[a])))
                for a in range(d)
            )
            sl_y = tuple(
                slice(lo[a] + int(w[a]),
                      lo[a] + int(w[a]) + disc.shape[a] + abs(int(w[a])))
                for a in range(d)
            )
            diff = padded[sl_y] - padded[sl_x]
            wsq = float(np.dot(w.astype(np.float64), w.astype(np.float64)))
            jw = float(kernel.inv_power_norm(np.asarray(wsq), d + 2))
            total += jw * float(np.sum(diff * diff))
    denom = (
        disc.dom.diameter() ** 2
        * disc.eps ** (2 * d)
        * disc.eps ** (-(d + 2))
        * total
    )
    if denom == 0.0:
        return 0.0
    return num / denom


def _sup_shell_blocks(lo_r: int, hi_r: int, d: int):
    """Integer w with lo_r <= |w|_inf <= hi_r, yielded in blocks."""
    if d == 1:
        k = np.arange(lo_r, hi_r + 1, dtype=np.int64)
        yield np.concatenate([-k[::-1], k]).reshape(-1, 1)
        return
    axis = np.arange(-hi_r, hi_r + 1, dtype=np.int64)
    if d == 2:
        for a in axis:
            if abs(int(a)) >= lo_r:
                b = axis
            else:
                b = axis[np.abs(axis) >= lo_r]
            out = np.empty((b.size, 2), dtype=np.int64)
            out[:, 0] = a
            out[:, 1] = b
            yield out
        return
    raise ValueError(f"unsupported dimension d={d}")


@dataclass
class PoincareReport:
    constant: float
    eigenvalue: float
    iterations: int
    inner_iterations: int


def poincare_constant(disc: Discretization, tol: float = 1e-6) -> PoincareReport:
    """Best constant C with ||h||_L2^2 <= C * ||h||_crit^2 on domain sites.

    The critical seminorm squared equals twice the unit-conductance energy,
    so C is the reciprocal of the smallest eigenvalue of twice the energy
    operator; computed by inverse power iteration (conjugate-gradient inner
    solves) from the constant vector, stopping when the eigenvalue settles
    to the requested relative tolerance.
    """
    from .solver import conjugate_gradient

    env = EnvironmentSpec.constant(0, disc.d, 1.0, 1.0)
    handle = OperatorHandle(env, disc)

    def matvec(x: np.ndarray) -> np.ndarray:
        return -2.0 * handle.apply(x)

    diag = 2.0 * handle.diagonal()
    x = np.ones(disc.n_sites)
    x /= math.sqrt(float(np.dot(x, x)))
    lam = math.inf
    inner = 0
    for it in range(1, 201):
        y, its, _ = conjugate_gradient(matvec, x, diag, tol=1e-12)
        inner += its
        lam_new = float(np.dot(y, x)) / float(np.dot(y, y))
        x = y / math.sqrt(float(np.dot(y, y)))
        if abs(lam_new - lam) <= tol * abs(lam_new):
            return PoincareReport(1.0 / lam_new, lam_new, it, inner)
        lam = lam_new
    raise RuntimeError("inverse power iteration failed to settle")
