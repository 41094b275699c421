"""The rescaled nonlocal generator on a discretized open box.

For sites x = eps*i of the domain, the generator acts as

    (L h)(x) = (eps^d / kappa) * sum_z a(x, x+z) J(z) (h(x+z) - h(x)),

with the sum over the full lattice and h extended by zero outside the domain.
Factorising through integer displacements w = z/eps turns every weight into
``prefac * a * |w|^-(d+2)`` with ``prefac = eps^-2 / kappa``, so the handle
works exclusively on integer geometry.

Truncation policy: conductances are summed exactly for |z| <= r_kill and the
remaining (absent-site) killing mass uses the mean conductance times the
exact kernel tail.  ``r_kill`` must cover the domain diameter, hence every
site pair inside the domain is exact and the policy only affects the
killing term.  The application path is matrix-free (weights are generated in
row blocks from the hash); blocks are cached as a dense matrix when the site
count is small enough, which changes nothing numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernel, rng
from .environment import EnvironmentSpec
from .grid import Discretization, DomainSpec

__all__ = ["TruncationPolicy", "OperatorHandle"]


@dataclass(frozen=True)
class TruncationPolicy:
    """Radius beyond which absent neighbours are charged at the mean rate."""

    r_kill: float

    def __post_init__(self):
        if not self.r_kill > 0:
            raise ValueError("truncation radius must be positive")

    @classmethod
    def default_for(cls, dom: DomainSpec) -> "TruncationPolicy":
        return cls(2.0 * dom.diameter())


class OperatorHandle:
    def __init__(
        self,
        env: EnvironmentSpec,
        disc: Discretization,
        policy: TruncationPolicy | None = None,
        cache_limit: int = 6000,
    ):
        if env.d != disc.d:
            raise ValueError("environment dimension does not match discretization")
        if policy is None:
            policy = TruncationPolicy.default_for(disc.dom)
        if policy.r_kill < disc.dom.diameter() * (1.0 - 1e-12):
            raise ValueError(
                f"r_kill={policy.r_kill} smaller than domain diameter "
                f"{disc.dom.diameter()}; inside pairs would be inexact"
            )
        self.env = env
        self.disc = disc
        self.policy = policy
        self.eps = disc.eps
        self.d = disc.d
        self.kappa = kernel.kappa_eps(self.eps, self.d)
        self.prefac = self.eps**-2 / self.kappa
        self.r_int_sq = (policy.r_kill / self.eps) ** 2
        self.cache_limit = int(cache_limit)
        self._matrix: np.ndarray | None = None
        self._kill: np.ndarray | None = None
        self._moment: np.ndarray | None = None
        self._site_partial: np.ndarray | None = None

    # -- hashing helpers ------------------------------------------------------

    def _partials(self) -> np.ndarray:
        if self._site_partial is None:
            self._site_partial = self.env.partial_states(self.disc.coords_int())
        return self._site_partial

    def _weight_block(self, i0: int, i1: int) -> np.ndarray:
        """Rows [i0, i1) of the integer-kernel weight matrix a * |w|^-(d+2).

        Canonical edge order coincides with site index order because sites
        are enumerated lexicographically.
        """
        coords = self.disc.coords_int()
        n = self.disc.n_sites
        rows = coords[i0:i1]
        delta = coords[None, :, :] - rows[:, None, :]
        s = np.einsum("ijk,ijk->ij", delta, delta).astype(np.float64)
        with np.errstate(divide="ignore"):
            jw = kernel.inv_power_norm(s, self.d + 2)
        diag = s == 0.0
        jw[diag] = 0.0
        if self.env.is_constant:
            return self.env.param("value") * jw
        partial = self._partials()
        lt = np.arange(n)[None, :] < np.arange(i0, i1)[:, None]
        state = np.where(lt, partial[None, :], partial[i0:i1, None])
        second = np.where(lt[:, :, None], rows[:, None, :], coords[None, :, :])
        a = self.env.finish_states(state, second)
        a[diag] = 0.0  # hash value on the degenerate pair is meaningless
        return a * jw

    def _ensure_matrix(self) -> np.ndarray | None:
        if self._matrix is None and self.disc.n_sites <= self.cache_limit:
            n = self.disc.n_sites
            out = np.empty((n, n))
            step = max(1, int(2e6) // max(n, 1))
            for i0 in range(0, n, step):
                i1 = min(n, i0 + step)
                out[i0:i1] = self._weight_block(i0, i1)
            self._matrix = out
        return self._matrix

    # -- killing and first-moment accumulation --------------------------------

    def _ensure_kill(self):
        if self._kill is not None:
            return
        d, n = self.d, self.disc.n_sites
        half = kernel.half_ball_points(self.r_int_sq, d)
        wf = half.astype(np.float64)
        jw = kernel.inv_power_norm(np.einsum("ij,ij->i", wf, wf), d + 2)
        ball_mass = 2.0 * float(np.sum(jw))
        tail = kernel.total_kernel_mass(d, d + 2) - ball_mass
        if tail < 0:
            tail = 0.0
        mean = self.env.mean_conductance
        if self.env.is_constant:
            c = self.env.param("value")
            self._kill = np.full(n, c * (ball_mass + tail))
            self._moment = np.zeros((n, d))
            return

        coords = self.disc.coords_int()
        r_ceil = int(math.floor(math.sqrt(self.r_int_sq))) + 1
        wlo = self.disc.ilo - r_ceil
        whi = self.disc.ihi + r_ceil
        wshape = tuple(int(h - l + 1) for l, h in zip(wlo, whi))
        wsize = int(np.prod(wshape))
        if wsize > 5e7:
            raise MemoryError(
                f"truncation window of {wsize} sites is too large to hash"
            )
        axes = [np.arange(l, h + 1, dtype=np.int64) for l, h in zip(wlo, whi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        win_coords = np.stack([m.ravel() for m in mesh], axis=1)
        win_partial = self.env.partial_states(win_coords)
        strides = np.ones(d, dtype=np.int64)
        for j in range(d - 2, -1, -1):
            strides[j] = strides[j + 1] * wshape[j + 1]
        site_partial = self._partials()

        kill = np.zeros(n)
        moment = np.zeros((n, d))
        chunk = max(1, int(2e6) // max(n, 1))
        for c0 in range(0, half.shape[0], chunk):
            w_c = half[c0 : c0 + chunk]
            jw_c = jw[c0 : c0 + chunk]
            m = w_c.shape[0]
            # forward direction: site is the canonical first endpoint
            state = np.broadcast_to(site_partial[:, None], (n, m)).copy()
            for j in range(d):
                state = rng.fold_signed(state, coords[:, None, j] + w_c[None, :, j])
            a_plus = self.env.values_from_uniform(rng.to_uniform(state))
            # backward direction: site - w is the canonical first endpoint
            flat = np.zeros((n, m), dtype=np.int64)
            for j in range(d):
                flat += (coords[:, None, j] - w_c[None, :, j] - wlo[j]) * strides[j]
            state = win_partial[flat]
            for j in range(d):
                state = rng.fold_signed(state, coords[:, None, j])
            a_minus = self.env.values_from_uniform(rng.to_uniform(state))
            kill += (a_plus + a_minus) @ jw_c
            diff = (a_plus - a_minus) * jw_c[None, :]
            moment += diff @ w_c.astype(np.float64)
        kill += mean * tail
        self._kill = kill
        self._moment = moment

    # -- public operations -----------------------------------------------------

    def killing_rate(self) -> np.ndarray:
        """Per-site total jump rate out of the state (physical units)."""
        self._ensure_kill()
        return self.prefac * self._kill

    def diagonal(self) -> np.ndarray:
        """Diagonal of the positive operator -L (physical units)."""
        return self.killing_rate()

    def apply(self, values: np.ndarray) -> np.ndarray:
        """L h on the domain sites (h extended by zero outside)."""
        values = np.asarray(values, dtype=np.float64)
        self._ensure_kill()
        mat = self._ensure_matrix()
        if mat is not None:
            coupling = mat @ values
        else:
            n = self.disc.n_sites
            coupling = np.empty(n)
            step = max(1, int(2e6) // max(n, 1))
            for i0 in range(0, n, step):
                i1 = min(n, i0 + step)
                coupling[i0:i1] = self._weight_block(i0, i1) @ values
        return self.prefac * (coupling - self._kill * values)

    def quadratic_form(self, values: np.ndarray) -> float:
        """Energy eps^d * <h, -L h> (nonnegative)."""
        values = np.asarray(values, dtype=np.float64)
        return -self.eps**self.d * float(np.dot(values, self.apply(values)))

    def rhs_corrector(self, slope: np.ndarray) -> np.ndarray:
        """Image under L of the affine function x . slope, on domain sites.

        Exact within the truncation radius; the mean-field remainder beyond
        it vanishes identically by the +-w symmetry of the kernel, so no
        tail term appears.
        """
        slope = np.asarray(slope, dtype=np.float64).reshape(self.d)
        self._ensure_kill()
        return self.prefac * self.eps * (self._moment @ slope)

    def gershgorin_margin(self, mu: float = 0.0) -> float:
        """Lower bound on the spectrum of mu + (-L) via row sums."""
        ones = np.ones(self.disc.n_sites)
        return mu + float(np.min(-self.apply(ones)))

    def dense_matrix(self, mu: float = 0.0) -> np.ndarray:
        """mu*I + (-L) as a dense array (small instances; same blocks)."""
        n = self.disc.n_sites
        if n > self.cache_limit:
            raise MemoryError("dense matrix requested for a large instance")
        self._ensure_kill()
        mat = self._ensure_matrix()
        out = -self.prefac * mat
        idx = np.arange(n)
        out[idx, idx] += mu + self.prefac * self._kill
        return out
