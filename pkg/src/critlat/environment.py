"""Random conductance fields on the unordered edges of Z^d.

A field is defined by a seed, a dimension, an ellipticity parameter
``lam`` in (0, 1] (all values stay inside [lam, 1/lam]) and a marginal
distribution.  The value attached to an unordered edge {x, y} is a pure
function of (seed, canonical edge key): the endpoints are sorted
lexicographically and their integer coordinates folded into the counter-based
hash, so lookups are deterministic, order-independent and embarrassingly
vectorisable.  Different edges use disjoint counters and are therefore
independent under the hash (tested empirically as a correlation proxy).

Points on a rescaled lattice eps*Z^d are always keyed by their integer index
vector, never by floating-point position.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng

__all__ = ["EnvironmentSpec", "Edge", "DISTRIBUTION_KINDS"]

_ENV_SALT = 0x636F6E64
DISTRIBUTION_KINDS = ("constant", "uniform", "two_point")

_PARAM_KEYS = {"constant": ("value",), "uniform": (), "two_point": ("prob",)}


def lex_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised lexicographic a < b over the last axis."""
    a = np.asarray(a)
    b = np.asarray(b)
    res = np.zeros(np.broadcast(a[..., 0], b[..., 0]).shape, dtype=bool)
    undecided = np.ones_like(res)
    for j in range(a.shape[-1]):
        res |= undecided & (a[..., j] < b[..., j])
        undecided &= a[..., j] == b[..., j]
    return res


@dataclass(frozen=True, order=True)
class Edge:
    """Unordered lattice edge; endpoints stored in canonical (lex) order."""

    u: tuple[int, ...]
    v: tuple[int, ...]

    def __post_init__(self):
        if self.u == self.v:
            raise ValueError(f"degenerate edge at {self.u}")
        if self.v < self.u:
            lo, hi = self.v, self.u
            object.__setattr__(self, "u", lo)
            object.__setattr__(self, "v", hi)


@dataclass(frozen=True)
class EnvironmentSpec:
    seed: int
    d: int
    lam: float
    kind: str
    params: tuple[tuple[str, float], ...] = field(default=())

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"dimension must be >= 1, got {self.d}")
        if not 0.0 < self.lam <= 1.0:
            raise ValueError(f"ellipticity lam must lie in (0, 1], got {self.lam}")
        if self.kind not in DISTRIBUTION_KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        given = tuple(k for k, _ in self.params)
        if given != _PARAM_KEYS[self.kind]:
            raise ValueError(
                f"distribution {self.kind!r} takes params {_PARAM_KEYS[self.kind]}, got {given}"
            )
        if self.kind == "constant":
            c = self.param("value")
            if not self.lam <= c <= 1.0 / self.lam:
                raise ValueError(f"constant value {c} outside [lam, 1/lam]")
        if self.kind == "two_point":
            p = self.param("prob")
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"two_point prob must lie in [0, 1], got {p}")

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, seed: int, d: int, lam: float, value: float) -> "EnvironmentSpec":
        return cls(seed, d, lam, "constant", (("value", float(value)),))

    @classmethod
    def uniform(cls, seed: int, d: int, lam: float) -> "EnvironmentSpec":
        return cls(seed, d, lam, "uniform")

    @classmethod
    def two_point(cls, seed: int, d: int, lam: float, prob: float) -> "EnvironmentSpec":
        return cls(seed, d, lam, "two_point", (("prob", float(prob)),))

    # -- basic queries -------------------------------------------------------

    def param(self, name: str) -> float:
        for k, v in self.params:
            if k == name:
                return v
        raise KeyError(name)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    @property
    def mean_conductance(self) -> float:
        hi = 1.0 / self.lam
        if self.kind == "constant":
            return self.param("value")
        if self.kind == "uniform":
            return 0.5 * (self.lam + hi)
        p = self.param("prob")
        return p * hi + (1.0 - p) * self.lam

    # -- hashing -------------------------------------------------------------

    def base_hash_state(self) -> np.ndarray:
        return rng.base_state(_ENV_SALT, self.seed)

    def partial_states(self, first: np.ndarray) -> np.ndarray:
        """Hash states after absorbing the canonical first endpoint."""
        first = np.asarray(first, dtype=np.int64)
        state = np.broadcast_to(self.base_hash_state(), first.shape[:-1]).copy()
        for j in range(self.d):
            state = rng.fold_signed(state, first[..., j])
        return state

    def finish_states(self, state: np.ndarray, second: np.ndarray) -> np.ndarray:
        """Conductance values from first-endpoint states and second endpoints.

        Caller must guarantee that the first endpoint used to build ``state``
        precedes ``second`` lexicographically (canonical edge order).
        """
        second = np.asarray(second, dtype=np.int64)
        for j in range(self.d):
            state = rng.fold_signed(state, second[..., j])
        return self.values_from_uniform(rng.to_uniform(state))

    def values_from_uniform(self, u: np.ndarray) -> np.ndarray:
        hi = 1.0 / self.lam
        if self.kind == "constant":
            return np.full_like(u, self.param("value"))
        if self.kind == "uniform":
            return self.lam + u * (hi - self.lam)
        return np.where(u < self.param("prob"), hi, self.lam)

    def edge_values(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Conductances of the unordered edges {p_i, q_i} (vectorised)."""
        p = np.asarray(p, dtype=np.int64)
        q = np.asarray(q, dtype=np.int64)
        p, q = np.broadcast_arrays(p, q)
        if np.any(np.all(p == q, axis=-1)):
            raise ValueError("conductance undefined on degenerate edges")
        swap = lex_less(q, p)[..., None]
        first = np.where(swap, q, p)
        second = np.where(swap, p, q)
        return self.finish_states(self.partial_states(first), second)

    def conductance(self, x, y) -> float:
        """Conductance of the single unordered edge {x, y} (integer coords)."""
        x = np.asarray(x, dtype=np.int64).reshape(1, -1)
        y = np.asarray(y, dtype=np.int64).reshape(1, -1)
        return float(self.edge_values(x, y)[0])

    # -- serialisation -------------------------------------------------------

    def to_config(self) -> dict:
        return {
            "seed": self.seed,
            "d": self.d,
            "lambda": self.lam,
            "distribution": {"kind": self.kind, "params": dict(self.params)},
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "EnvironmentSpec":
        expected = {"seed", "d", "lambda", "distribution"}
        if set(cfg) != expected:
            raise ValueError(
                f"environment config keys must be {sorted(expected)}, got {sorted(cfg)}"
            )
        dist = cfg["distribution"]
        if set(dist) != {"kind", "params"}:
            raise ValueError("distribution config needs exactly 'kind' and 'params'")
        kind = dist["kind"]
        if kind not in DISTRIBUTION_KINDS:
            raise ValueError(f"unknown distribution kind {kind!r}")
        wanted = _PARAM_KEYS[kind]
        got = dist["params"]
        if set(got) != set(wanted):
            raise ValueError(f"distribution {kind!r} takes params {wanted}, got {sorted(got)}")
        params = tuple((k, float(got[k])) for k in wanted)
        return cls(int(cfg["seed"]), int(cfg["d"]), float(cfg["lambda"]), kind, params)
