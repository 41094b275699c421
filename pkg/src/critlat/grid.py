"""Open-box domains, lattice discretizations and discrete norms.

Sites of the discretized domain are stored as integer index vectors i (the
physical position is eps*i); all geometry predicates and edge keys work on
integers so that refining eps never moves a site off its exact position.
Site enumeration is lexicographic (C order of the index box).

Norms: the L2 norm carries the cell weight eps^d.  The critical first-order
seminorm sums the jump weight over *all* displacements (long range), and its
dual norm is realised variationally through a conjugate-gradient solve with
the unit-conductance operator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel
from .environment import EnvironmentSpec

__all__ = [
    "DomainSpec",
    "Discretization",
    "GridFunction",
    "discretize",
    "l2_norm",
    "h1crit_seminorm",
    "dirichlet_form",
    "hminus1crit_norm",
]


@dataclass(frozen=True)
class DomainSpec:
    """Open axis-aligned box prod_a (lo_a, hi_a)."""

    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if len(self.lo) != len(self.hi) or not self.lo:
            raise ValueError("domain needs matching nonempty corner tuples")
        for a, b in zip(self.lo, self.hi):
            if not b > a:
                raise ValueError(f"degenerate domain extent ({a}, {b})")

    @classmethod
    def unit_box(cls, d: int) -> "DomainSpec":
        return cls((0.0,) * d, (1.0,) * d)

    @property
    def d(self) -> int:
        return len(self.lo)

    def diameter(self) -> float:
        return math.sqrt(sum((b - a) ** 2 for a, b in zip(self.lo, self.hi)))

    def scaled(self, factor: float) -> "DomainSpec":
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        return DomainSpec(
            tuple(a * factor for a in self.lo), tuple(b * factor for b in self.hi)
        )


def _strict_bounds(lo: float, hi: float, eps: float) -> tuple[int, int]:
    """Integer index range of lattice points strictly inside (lo, hi)."""

    def near_int(t: float) -> bool:
        return abs(t - round(t)) < 1e-9 * max(1.0, abs(t))

    t_lo = lo / eps
    i_lo = round(t_lo) + 1 if near_int(t_lo) else math.floor(t_lo) + 1
    t_hi = hi / eps
    i_hi = round(t_hi) - 1 if near_int(t_hi) else math.floor(t_hi)
    return int(i_lo), int(i_hi)


class Discretization:
    """Lattice sites eps*i strictly inside an open box, lex ordered."""

    def __init__(self, dom: DomainSpec, eps: float):
        if not 0.0 < eps < 1.0:
            raise ValueError(f"eps must lie in (0, 1), got {eps}")
        self.dom = dom
        self.eps = float(eps)
        bounds = [_strict_bounds(a, b, eps) for a, b in zip(dom.lo, dom.hi)]
        self.ilo = np.array([b[0] for b in bounds], dtype=np.int64)
        self.ihi = np.array([b[1] for b in bounds], dtype=np.int64)
        if np.any(self.ihi < self.ilo):
            raise ValueError(
                f"domain {dom.lo}..{dom.hi} contains no lattice site at eps={eps}"
            )
        self.shape = tuple(int(h - l + 1) for l, h in zip(self.ilo, self.ihi))
        self.n_sites = int(np.prod(self.shape))
        self._coords: np.ndarray | None = None

    @property
    def d(self) -> int:
        return self.dom.d

    def coords_int(self) -> np.ndarray:
        """(N, d) integer index vectors in lexicographic order."""
        if self._coords is None:
            axes = [
                np.arange(l, h + 1, dtype=np.int64)
                for l, h in zip(self.ilo, self.ihi)
            ]
            mesh = np.meshgrid(*axes, indexing="ij")
            self._coords = np.stack([m.ravel() for m in mesh], axis=1)
        return self._coords

    def points(self) -> np.ndarray:
        return self.coords_int().astype(np.float64) * self.eps

    def contains_int(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts)
        return np.all((pts >= self.ilo) & (pts <= self.ihi), axis=-1)

    def ravel_index(self, pts: np.ndarray) -> np.ndarray:
        """Flat site indices of integer points (caller guarantees inside)."""
        pts = np.asarray(pts, dtype=np.int64)
        rel = pts - self.ilo
        return np.ravel_multi_index(tuple(np.moveaxis(rel, -1, 0)), self.shape)

    def same_sites(self, other: "Discretization") -> bool:
        return (
            self.eps == other.eps
            and np.array_equal(self.ilo, other.ilo)
            and np.array_equal(self.ihi, other.ihi)
        )


def discretize(dom: DomainSpec, eps: float) -> Discretization:
    """Site list of the open box at lattice spacing eps (error if empty)."""
    return Discretization(dom, eps)


class GridFunction:
    """Values on the sites of a Discretization (zero outside by convention)."""

    def __init__(self, disc: Discretization, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (disc.n_sites,):
            raise ValueError(
                f"expected {disc.n_sites} values, got shape {values.shape}"
            )
        self.disc = disc
        self.values = values

    @classmethod
    def zeros(cls, disc: Discretization) -> "GridFunction":
        return cls(disc, np.zeros(disc.n_sites))

    @classmethod
    def from_callable(cls, disc: Discretization, fn) -> "GridFunction":
        return cls(disc, np.asarray(fn(disc.points()), dtype=np.float64))

    @classmethod
    def indicator(cls, disc: Discretization, site_int) -> "GridFunction":
        g = cls.zeros(disc)
        idx = disc.ravel_index(np.asarray(site_int, dtype=np.int64).reshape(1, -1))
        g.values[idx[0]] = 1.0
        return g

    def copy(self) -> "GridFunction":
        return GridFunction(self.disc, self.values.copy())

    def to_csv(self, path: str) -> None:
        """Dump (site coordinates, value) rows for external inspection."""
        pts = self.disc.points()
        header = ",".join(f"x{j + 1}" for j in range(self.disc.d)) + ",value"
        lines = [header]
        for row, v in zip(pts, self.values):
            lines.append(",".join(repr(float(c)) for c in row) + "," + repr(float(v)))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")


def l2_norm(g: GridFunction) -> float:
    """Cell-weighted Euclidean norm: sqrt(eps^d * sum of squares)."""
    w = g.disc.eps ** g.disc.d
    return math.sqrt(w * float(np.dot(g.values, g.values)))


_UNIT_HANDLES: dict = {}


def _unit_handle(disc: Discretization, r_kill: float | None):
    from .operator import OperatorHandle, TruncationPolicy

    policy = (
        TruncationPolicy.default_for(disc.dom)
        if r_kill is None
        else TruncationPolicy(float(r_kill))
    )
    key = (disc.dom.lo, disc.dom.hi, disc.eps, policy.r_kill)
    handle = _UNIT_HANDLES.get(key)
    if handle is None:
        env = EnvironmentSpec.constant(0, disc.d, 1.0, 1.0)
        handle = OperatorHandle(env, disc, policy)
        _UNIT_HANDLES[key] = handle
    return handle


def h1crit_seminorm(g: GridFunction, r_kill: float | None = None) -> float:
    """Critical first-order seminorm: full long-range quadratic energy.

    Equals sqrt(2 * unit-conductance Dirichlet energy); exact for functions
    supported on the discretized domain because the unit field has no
    fluctuation for the truncation to discard.
    """
    handle = _unit_handle(g.disc, r_kill)
    return math.sqrt(max(2.0 * handle.quadratic_form(g.values), 0.0))


def dirichlet_form(
    env: EnvironmentSpec,
    g1: GridFunction,
    g2: GridFunction,
    r_kill: float | None = None,
) -> float:
    """Conductance-weighted energy form by direct pair enumeration.

    Independent of the operator module on purpose: it re-derives the form
    from edge sums so the two routes can be compared in tests.  Quadratic
    cost in the number of sites; meant for small instances.
    """
    disc = g1.disc
    if not disc.same_sites(g2.disc):
        raise ValueError("both functions must live on the same discretization")
    if env.d != disc.d:
        raise ValueError("environment dimension does not match domain")
    eps, d = disc.eps, disc.d
    if r_kill is None:
        r_kill = 2.0 * disc.dom.diameter()
    if r_kill < disc.dom.diameter():
        raise ValueError("truncation radius must cover the domain diameter")
    kap = kernel.kappa_eps(eps, d)
    c2 = eps ** (d - 2) / (2.0 * kap)
    coords = disc.coords_int()
    n = disc.n_sites
    if n > 4000:
        raise ValueError("direct pair enumeration is limited to small instances")

    h = g1.values
    g = g2.values
    pair_sum = 0.0
    if n > 1:
        iu, ju = np.triu_indices(n, k=1)
        delta = coords[ju] - coords[iu]
        s = np.einsum("ij,ij->i", delta.astype(np.float64), delta.astype(np.float64))
        jw = kernel.inv_power_norm(s, d + 2)
        a = env.edge_values(coords[iu], coords[ju])
        dh = h[ju] - h[iu]
        dg = g[ju] - g[iu]
        pair_sum = 2.0 * float(np.sum(a * jw * dh * dg))

    r_int_sq = (r_kill / eps) ** 2
    ball = kernel.ball_points(r_int_sq, d)
    jw_ball = kernel.inv_power_norm(
        np.einsum("ij,ij->i", ball.astype(np.float64), ball.astype(np.float64)), d + 2
    )
    ball_mass = float(np.sum(jw_ball))
    tail = kernel.total_kernel_mass(d, d + 2) - ball_mass
    mean = env.mean_conductance
    kill_part = 0.0
    for i in range(n):
        q = coords[i] + ball
        outside = ~disc.contains_int(q)
        if np.any(outside):
            a_out = env.edge_values(
                np.broadcast_to(coords[i], q[outside].shape), q[outside]
            )
            k_out = float(np.dot(a_out, jw_ball[outside]))
        else:
            k_out = 0.0
        kill_part += (k_out + mean * tail) * h[i] * g[i]
    return c2 * (pair_sum + 2.0 * kill_part)


def hminus1crit_norm(
    env_unit: EnvironmentSpec,
    g: GridFunction,
    tol: float = 1e-10,
    r_kill: float | None = None,
) -> float:
    """Dual norm of the critical seminorm, via a Gram solve.

    ``env_unit`` is the reference field for the Gram operator (typically the
    unit constant field).  The square of the norm is eps^d * <g, w> where w
    solves (2 * energy operator) w = g.
    """
    from .operator import OperatorHandle, TruncationPolicy
    from .solver import conjugate_gradient

    disc = g.disc
    policy = (
        TruncationPolicy.default_for(disc.dom)
        if r_kill is None
        else TruncationPolicy(float(r_kill))
    )
    handle = OperatorHandle(env_unit, disc, policy)

    def matvec(x: np.ndarray) -> np.ndarray:
        return -2.0 * handle.apply(x)

    diag = 2.0 * handle.diagonal()
    w, _, _ = conjugate_gradient(matvec, g.values, diag, tol=tol)
    val = disc.eps**disc.d * float(np.dot(g.values, w))
    return math.sqrt(max(val, 0.0))
