"""Continuous-time random walk among the long-range conductances.

The walk lives on the integer lattice and jumps from x to x+w at rate
a(x, x+w) * |w|^-(d+2).  Simulation uses thinning from the constant
envelope rate lam_star = (sum of jump weights) / lam: exponential waiting
times at the envelope rate, displacement proposals from the normalised
jump weight, and acceptance with probability lam * a <= 1.  Proposals are
truncated at sup-norm radius 8192; the neglected envelope mass is declared
and asserted to be negligible for the ellipticities used here.

Every random number is a pure function of (seed, lane, purpose, step,
sub-counter) through the counter-based hash, so batches are reproducible
under any vectorisation order, a single lane can be replayed in isolation,
and refining the observation horizon never changes the trajectory.

Displacement proposals combine a Walker alias table over the sup-norm ball
of radius 64 (built by hand, checked structurally) with seven dyadic
sup-norm annuli up to 8192, sampled by uniform rejection under the exact
per-annulus weight envelope.

A periodic variant (ring of n sites, minimal-image displacements) supports
exact comparison against the uniformised matrix exponential of the same
generator.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import kstest

from . import kernel, rng
from .environment import EnvironmentSpec

__all__ = [
    "JumpSampler",
    "build_sampler",
    "Trajectory",
    "simulate_path",
    "rescaled_endpoint",
    "WalkBatch",
    "run_qip",
    "QipStats",
    "qip_statistics",
    "run_ring",
    "HeatKernelResult",
    "heat_kernel_evolve",
]

_WALK_SALT = 0x77616C6B
_PURPOSE_INIT = 0
_PURPOSE_EVENT = 1
_SUB_EXP = 0
_SUB_BRANCH = 1
_SUB_BUCKET = 2
_SUB_SIDE = 3
_SUB_ACCEPT = 4
_SUB_ANNULUS = 5

ALIAS_RADIUS = 64
MAX_RADIUS = 8192
BIAS_LIMIT = 1e-7


@functools.lru_cache(maxsize=None)
def box_kernel_mass(d: int, m: int) -> float:
    """Exact sum of |w|^-(d+2) over integer w with 0 < |w|_inf <= m."""
    if d == 1:
        k = np.arange(1, m + 1, dtype=np.float64)
        return 2.0 * float(np.sum(kernel.inv_power_norm(k * k, 3)))
    if d == 2:
        b = np.arange(-m, m + 1, dtype=np.float64)
        bsq = b * b
        total = float(np.sum(kernel.inv_power_norm(bsq[bsq > 0], 4)))
        for a in range(1, m + 1):
            total += 2.0 * float(np.sum(kernel.inv_power_norm(a * a + bsq, 4)))
        return total
    raise ValueError(f"walk sampler supports d in (1, 2), got d={d}")


def _build_alias(weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Walker alias construction: (threshold, alias) arrays for O(1) draws."""
    k = weights.size
    scaled = weights * k / float(np.sum(weights))
    prob = np.ones(k)
    alias = np.arange(k, dtype=np.int64)
    small = [i for i in range(k) if scaled[i] < 1.0]
    large = [i for i in range(k) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] -= 1.0 - scaled[s]
        (small if scaled[g] < 1.0 else large).append(g)
    # leftovers sit at threshold 1 due to roundoff; they already alias to
    # themselves
    return prob, alias


@dataclass(frozen=True)
class Annulus:
    r_in: int
    r_out: int
    mass: float
    j_max: float


class JumpSampler:
    """Normalised displacement proposals for the truncated jump weight."""

    def __init__(self, d: int, alias_radius: int = ALIAS_RADIUS,
                 max_radius: int = MAX_RADIUS):
        if d not in (1, 2):
            raise ValueError(f"walk sampler supports d in (1, 2), got d={d}")
        self.d = d
        self.alias_radius = int(alias_radius)
        self.max_radius = int(max_radius)
        entries = _sup_box_points(self.alias_radius, d)
        wf = entries.astype(np.float64)
        weights = kernel.inv_power_norm(
            np.einsum("ij,ij->i", wf, wf), d + 2
        )
        self.entries = entries
        self.entry_weights = weights
        self.alias_mass = float(np.sum(weights))
        self.alias_prob, self.alias_idx = _build_alias(weights)
        self.annuli: list[Annulus] = []
        r = self.alias_radius
        while r < self.max_radius:
            mass = box_kernel_mass(d, 2 * r) - box_kernel_mass(d, r)
            j_max = float(
                kernel.inv_power_norm(np.asarray(float((r + 1) ** 2)), d + 2)
            )
            self.annuli.append(Annulus(r, 2 * r, mass, j_max))
            r *= 2
        masses = [self.alias_mass] + [a.mass for a in self.annuli]
        self.s_trunc = float(np.sum(masses))
        self.s_full = kernel.total_kernel_mass(d, d + 2)
        self.branch_cum = np.cumsum(masses) / self.s_trunc
        self._ann_r_in = np.array([a.r_in for a in self.annuli])
        self._ann_r_out = np.array([a.r_out for a in self.annuli])
        self._ann_j_max = np.array([a.j_max for a in self.annuli])

    def declared_bias(self, lam: float) -> float:
        """Envelope mass neglected by the truncation, relative, at worst-case
        conductance 1/lam."""
        return (self.s_full - self.s_trunc) / (self.s_full * lam)

    def envelope_rate(self, lam: float) -> float:
        return self.s_trunc / lam

    def exact_alias_probs(self) -> np.ndarray:
        """Per-entry probability realised by the alias table (structural)."""
        k = self.entries.shape[0]
        p = self.alias_prob / k
        np.add.at(p, self.alias_idx, (1.0 - self.alias_prob) / k)
        return p

    def propose(self, states: np.ndarray) -> np.ndarray:
        """Displacements for one event, one per hash state (vectorised)."""
        m = states.shape[0]
        d = self.d
        out = np.zeros((m, d), dtype=np.int64)
        u1 = rng.to_uniform(rng.fold(states, _SUB_BRANCH))
        branch = np.searchsorted(self.branch_cum, u1, side="left")
        branch = np.minimum(branch, len(self.branch_cum) - 1)
        in_alias = branch == 0
        if np.any(in_alias):
            st = states[in_alias]
            k = self.entries.shape[0]
            u2 = rng.to_uniform(rng.fold(st, _SUB_BUCKET))
            u3 = rng.to_uniform(rng.fold(st, _SUB_SIDE))
            bucket = np.minimum((u2 * k).astype(np.int64), k - 1)
            take = u3 < self.alias_prob[bucket]
            entry = np.where(take, bucket, self.alias_idx[bucket])
            out[in_alias] = self.entries[entry]
        todo = np.nonzero(~in_alias)[0]
        if todo.size:
            st = states[todo]
            ann = branch[todo] - 1
            r_in = self._ann_r_in[ann]
            r_out = self._ann_r_out[ann]
            j_max = self._ann_j_max[ann]
            unresolved = np.ones(todo.size, dtype=bool)
            attempt = 0
            cand = np.zeros((todo.size, d), dtype=np.int64)
            while np.any(unresolved):
                base = _SUB_ANNULUS + attempt * (d + 1)
                for c in range(d):
                    u = rng.to_uniform(rng.fold(st, base + c))
                    cand[:, c] = (u * (2 * r_out + 1)).astype(np.int64) - r_out
                u_acc = rng.to_uniform(rng.fold(st, base + d))
                inner = np.all(np.abs(cand) <= r_in[:, None], axis=1)
                s = np.einsum(
                    "ij,ij->i", cand.astype(np.float64), cand.astype(np.float64)
                )
                jw = kernel.inv_power_norm(np.where(inner, 1.0, s), d + 2)
                ok = unresolved & ~inner & (u_acc * j_max < jw)
                if np.any(ok):
                    rows = todo[ok]
                    out[rows] = cand[ok]
                    unresolved &= ~ok
                attempt += 1
                if attempt > 4096:
                    raise RuntimeError("annulus rejection failed to terminate")
        return out


def _sup_box_points(m: int, d: int) -> np.ndarray:
    """All integer w with 0 < |w|_inf <= m, fixed enumeration order."""
    axis = np.arange(-m, m + 1, dtype=np.int64)
    if d == 1:
        return axis[axis != 0].reshape(-1, 1)
    mesh = np.meshgrid(axis, axis, indexing="ij")
    pts = np.stack([g.ravel() for g in mesh], axis=1)
    return pts[np.any(pts != 0, axis=1)]


_SAMPLER_CACHE: dict[tuple[int, int, int], JumpSampler] = {}


def build_sampler(d: int, alias_radius: int = ALIAS_RADIUS,
                  max_radius: int = MAX_RADIUS) -> JumpSampler:
    key = (d, alias_radius, max_radius)
    if key not in _SAMPLER_CACHE:
        _SAMPLER_CACHE[key] = JumpSampler(d, alias_radius, max_radius)
    return _SAMPLER_CACHE[key]


# ----- lockstep engine -----------------------------------------------------


def _lane_states(seed: int, n: int) -> np.ndarray:
    base = rng.base_state(_WALK_SALT, seed)
    return rng.fold(base, np.arange(n, dtype=np.int64))


def _accept_probs(env: EnvironmentSpec, pos: np.ndarray,
                  w: np.ndarray) -> np.ndarray:
    if env.is_constant:
        return np.full(pos.shape[0], env.lam * env.param("value"))
    a = env.edge_values(pos, pos + w)
    return env.lam * a


def _lockstep(env: EnvironmentSpec, sampler: JumpSampler,
              lane_states: np.ndarray, start: np.ndarray,
              horizons: np.ndarray):
    """Advance all lanes to the largest horizon; snapshot the position and
    accepted-jump count each lane held when it first crossed each horizon."""
    if sampler.declared_bias(env.lam) > BIAS_LIMIT:
        raise ValueError(
            "sampler truncation bias exceeds the declared limit at this "
            "ellipticity"
        )
    n = lane_states.shape[0]
    d = sampler.d
    lam_star = sampler.envelope_rate(env.lam)
    n_h = horizons.size
    t = np.zeros(n)
    pos = start.astype(np.int64).copy()
    jumps = np.zeros(n, dtype=np.int64)
    snap_pos = np.zeros((n_h, n, d), dtype=np.int64)
    snap_jumps = np.zeros((n_h, n), dtype=np.int64)
    snapped = np.zeros((n_h, n), dtype=bool)
    ev_base = rng.fold(lane_states, _PURPOSE_EVENT)
    t_max = float(horizons[-1])
    step = 0
    cap = int(40.0 * (t_max * lam_star + 100.0))
    active = np.arange(n)
    while active.size:
        st = rng.fold(ev_base[active], step)
        u0 = rng.to_uniform(rng.fold(st, _SUB_EXP))
        t_new = t[active] - np.log(u0) / lam_star
        for h in range(n_h):
            due = ~snapped[h, active] & (t_new >= horizons[h])
            if np.any(due):
                ids = active[due]
                snap_pos[h, ids] = pos[ids]
                snap_jumps[h, ids] = jumps[ids]
                snapped[h, ids] = True
        w = sampler.propose(st)
        u_acc = rng.to_uniform(rng.fold(st, _SUB_ACCEPT))
        acc = u_acc < _accept_probs(env, pos[active], w)
        ids = active[acc]
        pos[ids] += w[acc]
        jumps[ids] += 1
        t[active] = t_new
        active = active[t_new < t_max]
        step += 1
        if step > cap:
            raise RuntimeError("walk failed to reach the horizon in time")
    return snap_pos, snap_jumps


@dataclass
class Trajectory:
    initial: np.ndarray
    times: np.ndarray
    positions: np.ndarray  # (n_jumps, d), after each accepted jump
    t_max: float

    def position_at(self, t: float) -> np.ndarray:
        idx = int(np.searchsorted(self.times, t, side="right"))
        if idx == 0:
            return self.initial.copy()
        return self.positions[idx - 1].copy()


def rescaled_endpoint(traj: Trajectory, eps: float, t: float) -> np.ndarray:
    """Diffusively rescaled position at macroscopic time t.

    Reads the unit-lattice trajectory at its own clock time t / (kappa_eps
    * eps^2) and scales space by eps; one long trajectory therefore serves
    every eps whose horizon it covers.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if t < 0.0:
        raise ValueError("time must be nonnegative")
    d = traj.initial.shape[0]
    tau = t / (kernel.kappa_eps(eps, d) * eps * eps)
    if tau > traj.t_max:
        raise ValueError(
            f"trajectory horizon {traj.t_max} is shorter than the rescaled "
            f"time {tau}"
        )
    return eps * traj.position_at(tau).astype(np.float64)


def simulate_path(env: EnvironmentSpec, seed: int, lane: int, t_max: float,
                  start=None, sampler: JumpSampler | None = None) -> Trajectory:
    """Full event record of a single lane up to t_max (for inspection; the
    batch runners reproduce exactly the same trajectory lane by lane)."""
    if sampler is None:
        sampler = build_sampler(env.d)
    if sampler.declared_bias(env.lam) > BIAS_LIMIT:
        raise ValueError(
            "sampler truncation bias exceeds the declared limit at this "
            "ellipticity"
        )
    if start is None:
        start = np.zeros(env.d, dtype=np.int64)
    lane_state = rng.fold(rng.base_state(_WALK_SALT, seed), lane)
    ev_base = rng.fold(lane_state, _PURPOSE_EVENT)
    lam_star = sampler.envelope_rate(env.lam)
    pos = np.asarray(start, dtype=np.int64).copy()
    t = 0.0
    times = []
    positions = []
    step = 0
    while True:
        st = rng.fold(ev_base, step).reshape(1)
        u0 = float(rng.to_uniform(rng.fold(st, _SUB_EXP))[0])
        t -= math.log(u0) / lam_star
        if t >= t_max:
            break
        w = sampler.propose(st)[0]
        u_acc = float(rng.to_uniform(rng.fold(st, _SUB_ACCEPT))[0])
        if u_acc < float(_accept_probs(env, pos.reshape(1, -1), w.reshape(1, -1))[0]):
            pos = pos + w
            times.append(t)
            positions.append(pos.copy())
        step += 1
        if step > int(40.0 * (t_max * lam_star + 100.0)):
            raise RuntimeError("walk failed to reach the horizon in time")
    return Trajectory(
        np.asarray(start, dtype=np.int64),
        np.array(times),
        np.array(positions, dtype=np.int64).reshape(len(positions), env.d),
        float(t_max),
    )


@dataclass
class WalkBatch:
    eps_list: tuple[float, ...]
    t: float
    start: np.ndarray  # (n, d) integer lattice positions
    displacements: np.ndarray  # (n_eps, n, d) rescaled
    jump_counts: np.ndarray  # (n_eps, n)
    horizons: np.ndarray  # (n_eps,), walk-clock times


def run_qip(env: EnvironmentSpec, eps_list, t: float, n_paths: int,
            seed: int, sampler: JumpSampler | None = None) -> WalkBatch:
    """Rescaled displacements over a shared trajectory per lane.

    Lanes start at a uniform point of the unit box read at the finest
    resolution; each eps observes the same walk at its own horizon
    t / (kappa_eps * eps^2) and rescales the displacement by eps, so
    coarser horizons are exact restrictions of finer ones (common random
    numbers across the eps grid).
    """
    eps_list = tuple(float(e) for e in eps_list)
    if not eps_list or not all(0.0 < e < 1.0 for e in eps_list):
        raise ValueError("eps_list must hold values in (0, 1)")
    if t <= 0.0:
        raise ValueError("time horizon must be positive")
    if sampler is None:
        sampler = build_sampler(env.d)
    d = env.d
    lane_states = _lane_states(seed, n_paths)
    init_base = rng.fold(lane_states, _PURPOSE_INIT)
    eps_min = min(eps_list)
    start = np.empty((n_paths, d), dtype=np.int64)
    for c in range(d):
        y = rng.to_uniform(rng.fold(init_base, c))
        start[:, c] = np.rint(y / eps_min).astype(np.int64)
    horizons = np.array(
        [t / (kernel.kappa_eps(e, d) * e * e) for e in eps_list]
    )
    order = np.argsort(horizons)
    snap_pos, snap_jumps = _lockstep(
        env, sampler, lane_states, start, horizons[order]
    )
    inverse = np.argsort(order)
    snap_pos = snap_pos[inverse]
    snap_jumps = snap_jumps[inverse]
    disp = np.empty((len(eps_list), n_paths, d))
    for i, e in enumerate(eps_list):
        disp[i] = e * (snap_pos[i] - start)
    return WalkBatch(eps_list, float(t), start, disp, snap_jumps, horizons)


@dataclass
class QipStats:
    eps: float
    sigma: float
    ks: np.ndarray  # per coordinate
    quantiles: np.ndarray  # (d, 3): quartiles per coordinate
    tail_eta: np.ndarray
    tail_prob: np.ndarray
    tail_c: float  # smallest C with prob <= C*t*(1+log(2+eta))/eta^2
    tail_envelope: np.ndarray


def qip_statistics(batch: WalkBatch, mean_conductance: float) -> list[QipStats]:
    """Distributional diagnostics per eps against the diffusive limit.

    Per-coordinate Kolmogorov-Smirnov distance to the centred normal with
    variance t * mean / d, quartiles, and radial exceedance probabilities
    against the fitted envelope C * t * (1 + log(2 + eta)) / eta^2.
    """
    d = batch.start.shape[1]
    t = batch.t
    sigma = math.sqrt(t * mean_conductance / d)
    etas = np.array([0.25, 0.5, 1.0, 2.0, 4.0])
    out = []
    for i, e in enumerate(batch.eps_list):
        disp = batch.displacements[i]
        ks = np.array([
            kstest(disp[:, c], "norm", args=(0.0, sigma)).statistic
            for c in range(d)
        ])
        quart = np.stack([
            np.quantile(disp[:, c], [0.25, 0.5, 0.75]) for c in range(d)
        ])
        radius = np.sqrt(np.einsum("ij,ij->i", disp, disp))
        prob = np.array([float(np.mean(radius >= eta)) for eta in etas])
        shape = t * (1.0 + np.log(2.0 + etas)) / etas**2
        c_fit = float(np.max(prob / shape))
        out.append(QipStats(e, sigma, ks, quart, etas, prob, c_fit,
                            c_fit * shape))
    return out


# ----- periodic variant ----------------------------------------------------


def _ring_displacements(n_sites: int) -> np.ndarray:
    if n_sites < 3 or n_sites % 2 != 0:
        raise ValueError("ring size must be even and at least 4")
    half = n_sites // 2
    w = np.arange(-(half - 1), half + 1, dtype=np.int64)
    return w[w != 0]


def _ring_edge_conductance(env: EnvironmentSpec, x: np.ndarray,
                           y: np.ndarray, n_sites: int) -> np.ndarray:
    """Conductance of ring edges keyed by canonical site pairs in 0..n-1."""
    xm = np.mod(x, n_sites)
    ym = np.mod(y, n_sites)
    lo = np.minimum(xm, ym)
    hi = np.maximum(xm, ym)
    return env.edge_values(lo[:, None], hi[:, None])


def run_ring(env: EnvironmentSpec, n_sites: int, t: float, n_paths: int,
             seed: int) -> np.ndarray:
    """Occupancy counts over the ring at time t, all walkers started at 0.

    Minimal-image displacements with the same edge keys as the matrix
    evolution, proposed by exact inverse transform over the finitely many
    jump weights; no truncation, hence zero declared bias.
    """
    if env.d != 1:
        raise ValueError("ring walk uses 1-d environments as edge labels")
    ws = _ring_displacements(n_sites)
    wf = ws.astype(np.float64)
    weights = kernel.inv_power_norm(wf * wf, 3)
    s_all = float(np.sum(weights))
    cum = np.cumsum(weights) / s_all
    lam_star = s_all / env.lam
    lane_states = _lane_states(seed, n_paths)
    ev_base = rng.fold(lane_states, _PURPOSE_EVENT)
    t_goal = float(t)
    tcur = np.zeros(n_paths)
    pos = np.zeros(n_paths, dtype=np.int64)
    active = np.arange(n_paths)
    step = 0
    cap = int(40.0 * (t_goal * lam_star + 100.0))
    while active.size:
        st = rng.fold(ev_base[active], step)
        u0 = rng.to_uniform(rng.fold(st, _SUB_EXP))
        t_new = tcur[active] - np.log(u0) / lam_star
        u1 = rng.to_uniform(rng.fold(st, _SUB_BRANCH))
        idx = np.minimum(np.searchsorted(cum, u1, side="left"), ws.size - 1)
        w = ws[idx]
        alive = t_new < t_goal
        u_acc = rng.to_uniform(rng.fold(st, _SUB_ACCEPT))
        if env.is_constant:
            a = np.full(active.size, env.param("value"))
        else:
            a = _ring_edge_conductance(env, pos[active], pos[active] + w,
                                       n_sites)
        acc = alive & (u_acc < env.lam * a)
        ids = active[acc]
        pos[ids] = np.mod(pos[ids] + w[acc], n_sites)
        tcur[active] = t_new
        active = active[alive]
        step += 1
        if step > cap:
            raise RuntimeError("ring walk failed to reach the horizon")
    return np.bincount(pos, minlength=n_sites)


@dataclass
class HeatKernelResult:
    t_grid: np.ndarray
    probs: np.ndarray  # (n_t, n_sites): law of X_t started at site 0
    mass_dev: np.ndarray  # per time, |total mass - 1|
    lam_unif: float
    k_max: int


def heat_kernel_evolve(env: EnvironmentSpec, n_sites: int,
                       t_grid) -> HeatKernelResult:
    """Exact transition law on the ring by uniformised series summation.

    The generator matrix (minimal-image jump weights times the shared edge
    conductances) is turned into a substochastic-free jump chain at the
    uniformisation rate; the law at each time is the Poisson-weighted sum
    of the chain's powers applied to the start distribution, truncated when
    the remaining Poisson tail is below 1e-12.
    """
    if env.d != 1:
        raise ValueError("ring evolution uses 1-d environments as edge labels")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid < 0.0):
        raise ValueError("times must be nonnegative")
    ws = _ring_displacements(n_sites)
    wf = ws.astype(np.float64)
    jw = kernel.inv_power_norm(wf * wf, 3)
    q = np.zeros((n_sites, n_sites))
    x = np.arange(n_sites, dtype=np.int64)
    for w, j in zip(ws, jw):
        y = np.mod(x + w, n_sites)
        if env.is_constant:
            a = np.full(n_sites, env.param("value"))
        else:
            a = _ring_edge_conductance(env, x, y, n_sites)
        q[x, y] += a * j
    rates = q.sum(axis=1)
    lam_unif = float(np.max(rates))
    chain = q / lam_unif
    chain[x, x] += 1.0 - rates / lam_unif
    t_max = float(np.max(t_grid)) if t_grid.size else 0.0
    lam_t_max = lam_unif * t_max
    k_max = int(lam_t_max + 12.0 * math.sqrt(lam_t_max + 1.0) + 40.0)
    powers = np.empty((k_max + 1, n_sites))
    p = np.zeros(n_sites)
    p[0] = 1.0
    for k in range(k_max + 1):
        powers[k] = p
        if k < k_max:
            p = p @ chain
    ks = np.arange(k_max + 1, dtype=np.float64)
    probs = np.empty((t_grid.size, n_sites))
    mass_dev = np.empty(t_grid.size)
    for i, t in enumerate(t_grid):
        lam_t = lam_unif * float(t)
        if lam_t == 0.0:
            weights = np.zeros(k_max + 1)
            weights[0] = 1.0
        else:
            logw = ks * math.log(lam_t) - lam_t - gammaln(ks + 1.0)
            weights = np.exp(logw)
        wsum = float(np.sum(weights))
        if 1.0 - wsum > 1e-12:
            raise RuntimeError("series truncated before the declared tail")
        probs[i] = weights @ powers
        mass_dev[i] = abs(float(np.sum(probs[i])) - 1.0)
    return HeatKernelResult(t_grid, probs, mass_dev, lam_unif, k_max)
