"""Torus endomorphisms F(x, theta) = (f(x, theta), theta + omega(x, theta)) mod Z^2.

The first coordinate expands (f carries an integer linear part ell*x with
ell >= 2), the second is a neutral direction driven by a periodic shift.
Points live in [0, 1)^2.  Three map kinds share this shape:

    skew_linear:  f(x, theta) = ell * x exactly,
    skew_general: f = ell * x + trigonometric part,
    fast_slow:    as skew_general, with omega scaled by a small epsilon.

The module provides evaluation, Jacobians, full preimage sets (closed form
where the structure allows, damped Newton otherwise), orbits and Birkhoff
sums, plus the JSON wire format for maps and observables.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (NonPositiveDeterminant, RootCountMismatch,
                     ValidationError)
from .fourier import CoeffTable, CompiledTable

KINDS = ("skew_linear", "skew_general", "fast_slow")

PREIMAGE_RESIDUAL_TOL = 1e-10
PREIMAGE_SEPARATION = 1e-8
DEGREE_QUAD_TOL = 1e-8

def _compiled(table: CoeffTable) -> CompiledTable:
    # cached on the table object itself; id-keyed module caches would go
    # stale when temporaries are garbage collected
    return table.compiled()


def wrap01(z):
    """Reduce mod 1 into [0, 1)."""
    return np.asarray(z, dtype=np.float64) % 1.0


def torus_point(x: float, theta: float) -> np.ndarray:
    """Canonical point representation: shape-(2,) array in [0, 1)^2."""
    return wrap01(np.array([x, theta], dtype=np.float64))


def torus_delta(a, b):
    """Signed componentwise displacement a - b mapped to [-1/2, 1/2)."""
    return (np.asarray(a) - np.asarray(b) + 0.5) % 1.0 - 0.5


def torus_distance(a, b) -> float:
    """Max-norm distance on the torus."""
    return float(np.abs(torus_delta(a, b)).max())


@dataclass(frozen=True)
class Jacobian2:
    """Jacobian of F at a point, with rows (df, d(theta + omega))."""

    a11: float
    a12: float
    a21: float
    a22: float

    @property
    def det(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]])


@dataclass(frozen=True, eq=False)
class MapSpec:
    """A torus endomorphism of the skew shape above.

    Attributes:
        kind: one of KINDS.
        ell: integer linear part of f in x; the topological degree for the
            skew kinds.
        f_coeffs: Fourier table of f(x, theta) - ell * x (must be empty for
            kind="skew_linear").
        omega_coeffs: Fourier table of the angular shift omega.
        epsilon: scale applied to omega for kind="fast_slow" (ignored
            otherwise).
    """

    kind: str
    ell: int
    f_coeffs: CoeffTable
    omega_coeffs: CoeffTable
    epsilon: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown map kind {self.kind!r}")
        if self.ell < 2:
            raise ValidationError(f"need ell >= 2, got {self.ell}")
        if self.kind == "skew_linear" and len(self.f_coeffs.modes) > 0:
            raise ValidationError("skew_linear requires an empty f table")

    # -- effective coefficient tables ---------------------------------------

    @property
    def omega_eff(self) -> CoeffTable:
        if self.kind != "fast_slow":
            return self.omega_coeffs
        cached = getattr(self, "_omega_eff_form", None)
        if cached is None:
            cached = self.omega_coeffs.scaled(self.epsilon)
            object.__setattr__(self, "_omega_eff_form", cached)
        return cached

    @property
    def degree(self) -> int:
        return self.ell

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.int64(self.ell).tobytes())
        h.update(np.float64(self.epsilon if self.kind == "fast_slow" else 0.0).tobytes())
        h.update(self.f_coeffs.digest().encode())
        h.update(self.omega_coeffs.digest().encode())
        return h.hexdigest()[:16]

    # -- JSON wire format ----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "ell": self.ell,
            "f_coeffs": self.f_coeffs.to_rows(),
            "omega_coeffs": self.omega_coeffs.to_rows(),
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MapSpec":
        try:
            kind = d["kind"]
            ell = int(d["ell"])
        except KeyError as exc:
            raise ValidationError(f"map json missing field {exc}") from exc
        fc = CoeffTable.from_rows(d.get("f_coeffs", []))
        oc = CoeffTable.from_rows(d.get("omega_coeffs", []))
        return cls(kind=kind, ell=ell, f_coeffs=fc, omega_coeffs=oc,
                   epsilon=float(d.get("epsilon", 0.0)))

    @classmethod
    def from_json(cls, text: str) -> "MapSpec":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Observable:
    """Real observable given by a Fourier table, optionally pre-centered.

    centered_offsets, when present, holds one real per ergodic component;
    Birkhoff sums subtract offsets[k] per step for orbits started in
    component k.
    """

    coeffs: CoeffTable
    centered_offsets: tuple[float, ...] | None = None

    def eval(self, x, theta):
        return self.coeffs.eval(x, theta)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.coeffs.digest().encode())
        if self.centered_offsets is not None:
            h.update(np.asarray(self.centered_offsets, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]

    def to_json_dict(self) -> dict:
        return {
            "coeffs": self.coeffs.to_rows(),
            "centered_offsets": (list(self.centered_offsets)
                                 if self.centered_offsets is not None else None),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Observable":
        offs = d.get("centered_offsets")
        return cls(coeffs=CoeffTable.from_rows(d.get("coeffs", [])),
                   centered_offsets=tuple(float(o) for o in offs) if offs else None)


# ---------------------------------------------------------------------------
# Evaluation and Jacobians
# ---------------------------------------------------------------------------

def eval_map(spec: MapSpec, x, theta):
    """Apply F; returns (x', theta') arrays in [0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    fx = spec.ell * x + _compiled(spec.f_coeffs).eval(x, theta)
    ft = theta + _compiled(spec.omega_eff).eval(x, theta)
    return fx % 1.0, ft % 1.0


def eval_map_point(spec: MapSpec, p) -> np.ndarray:
    x, t = eval_map(spec, p[..., 0] if np.ndim(p) > 1 else p[0],
                    p[..., 1] if np.ndim(p) > 1 else p[1])
    return np.stack([x, t], axis=-1)


def _partials_cached(spec: MapSpec):
    cached = getattr(spec, "_partials_form", None)
    if cached is None:
        f, w = spec.f_coeffs, spec.omega_eff
        cached = (_compiled(f.derivative(0)), _compiled(f.derivative(1)),
                  _compiled(w.derivative(0)), _compiled(w.derivative(1)))
        object.__setattr__(spec, "_partials_form", cached)
    return cached


def jacobian_batch(spec: MapSpec, x, theta):
    """Entries of DF at arrays of points: (a11, a12, a21, a22)."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    dfx, dft, dwx, dwt = _partials_cached(spec)
    a11 = spec.ell + dfx.eval(x, theta)
    a12 = dft.eval(x, theta)
    a21 = dwx.eval(x, theta)
    a22 = 1.0 + dwt.eval(x, theta)
    return a11, a12, a21, a22


def jacobian(spec: MapSpec, p) -> Jacobian2:
    """DF at a single point; raises NonPositiveDeterminant if det <= 0."""
    a11, a12, a21, a22 = (float(v) for v in jacobian_batch(spec, p[0], p[1]))
    jac = Jacobian2(a11, a12, a21, a22)
    if jac.det <= 0.0:
        raise NonPositiveDeterminant(f"det DF = {jac.det:.3e} at {tuple(p)}")
    return jac


def jacobian_power(spec: MapSpec, p, n: int) -> np.ndarray:
    """D_p F^n by the chain rule along the orbit; shape (2, 2)."""
    M = np.eye(2)
    z = np.array(p, dtype=np.float64)
    for _ in range(n):
        M = jacobian(spec, z).matrix @ M
        z = np.array(eval_map(spec, z[0], z[1]))
    return M


def degree_integral(spec: MapSpec, min_grid: int = 8) -> float:
    """Quadrature of det DF over the torus (exact for these tables)."""
    band = max(spec.f_coeffs.band, spec.omega_eff.band) * 2 + 2
    Q = min_grid
    while Q <= band:
        Q *= 2
    g = np.arange(Q) / Q
    X, T = np.meshgrid(g, g, indexing="ij")
    a11, a12, a21, a22 = jacobian_batch(spec, X, T)
    det = a11 * a22 - a12 * a21
    return float(det.mean())


def validate_spec(spec: MapSpec, grid: int = 64) -> None:
    """Run construction-time invariants: positivity of det DF on a lattice
    and agreement of the degree with the det integral."""
    g = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(g, g, indexing="ij")
    a11, a12, a21, a22 = jacobian_batch(spec, X, T)
    det = a11 * a22 - a12 * a21
    if det.min() <= 0.0:
        bad = np.unravel_index(int(det.argmin()), det.shape)
        raise NonPositiveDeterminant(
            f"det DF = {det.min():.3e} at grid point "
            f"({g[bad[0]]:.4f}, {g[bad[1]]:.4f})")
    integral = degree_integral(spec)
    if abs(integral - round(integral)) > DEGREE_QUAD_TOL:
        raise ValidationError(
            f"det integral {integral!r} is not within {DEGREE_QUAD_TOL} of an integer")
    if round(integral) != spec.degree:
        raise ValidationError(
            f"det integral gives degree {round(integral)}, spec says {spec.degree}")


# ---------------------------------------------------------------------------
# Preimages
# ---------------------------------------------------------------------------

def _theta_dependent(table: CoeffTable) -> bool:
    return bool(np.any(table.modes[:, 1] != 0))


def _preimages_skew_exact(spec: MapSpec, targets: np.ndarray) -> np.ndarray:
    """All F-preimages when f = ell*x exactly: x branches are closed-form,
    theta is recovered per branch (directly, or by contraction when omega
    depends on theta).  targets: (P, 2); returns (P, ell, 2)."""
    ell = spec.ell
    P = targets.shape[0]
    j = np.arange(ell, dtype=np.float64)
    xb = (targets[:, 0:1] + j[None, :]) / ell          # (P, ell)
    omega = spec.omega_eff
    tt = np.broadcast_to(targets[:, 1:2], (P, ell))
    if not _theta_dependent(omega):
        tb = (tt - _compiled(omega).eval(xb, np.zeros_like(xb))) % 1.0
    else:
        dwt = omega.derivative(1)
        contraction = dwt.sup_bound()
        if contraction >= 0.99:
            raise ValidationError(
                "theta-preimage contraction bound >= 1; use the Newton path")
        com = _compiled(omega)
        tb = tt.copy()
        # theta_b = theta_t - omega(x_b, theta_b): contraction in theta
        iters = max(40, int(np.ceil(np.log(1e-16) / np.log(max(contraction, 1e-6)))))
        for _ in range(iters):
            tb = (tt - com.eval(xb, tb)) % 1.0
    out = np.stack([xb % 1.0, tb], axis=-1)
    return out


def _preimages_newton(spec: MapSpec, targets: np.ndarray,
                      seeds_per_axis: int | None = None) -> np.ndarray:
    """Damped-Newton preimage search from a seed lattice.

    targets: (P, 2).  Returns (P, degree, 2) or raises RootCountMismatch.
    """
    deg = spec.degree
    G = seeds_per_axis or 8 * deg
    P = targets.shape[0]
    g = (np.arange(G) + 0.5) / G
    SX, ST = np.meshgrid(g, g, indexing="ij")
    S = G * G
    x = np.broadcast_to(SX.ravel()[None, :], (P, S)).copy()
    t = np.broadcast_to(ST.ravel()[None, :], (P, S)).copy()
    tx = targets[:, 0:1]
    tt = targets[:, 1:2]
    for _ in range(40):
        fx, ft = eval_map(spec, x, t)
        rx = (fx - tx + 0.5) % 1.0 - 0.5
        rt = (ft - tt + 0.5) % 1.0 - 0.5
        a11, a12, a21, a22 = jacobian_batch(spec, x, t)
        det = a11 * a22 - a12 * a21
        dx = (a22 * rx - a12 * rt) / det
        dt = (-a21 * rx + a11 * rt) / det
        x = (x - dx) % 1.0
        t = (t - dt) % 1.0
    fx, ft = eval_map(spec, x, t)
    res = np.maximum(np.abs((fx - tx + 0.5) % 1.0 - 0.5),
                     np.abs((ft - tt + 0.5) % 1.0 - 0.5))
    out = np.empty((P, deg, 2))
    for i in range(P):
        ok = res[i] < PREIMAGE_RESIDUAL_TOL
        roots = _dedupe_roots(np.stack([x[i, ok], t[i, ok]], axis=-1))
        if len(roots) != deg:
            raise RootCountMismatch(deg, len(roots), where=tuple(targets[i]))
        out[i] = roots
    return out


def _dedupe_roots(pts: np.ndarray) -> np.ndarray:
    """Cluster candidate roots closer than the separation tolerance."""
    roots: list[np.ndarray] = []
    for p in pts:
        if all(torus_distance(p, r) >= PREIMAGE_SEPARATION for r in roots):
            roots.append(p)
    roots.sort(key=lambda r: (round(r[0], 10), round(r[1], 10)))
    return np.array(roots) if roots else np.zeros((0, 2))


def preimages_batch(spec: MapSpec, targets: np.ndarray) -> np.ndarray:
    """Full preimage sets for an array of targets, shape (P, degree, 2)."""
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64)) % 1.0
    if len(spec.f_coeffs.modes) == 0:
        # x-linear map (any kind): branches are exact in closed form
        pts = _preimages_skew_exact(spec, targets)
        # verify the advertised residual even on the closed-form path
        fx, ft = eval_map(spec, pts[..., 0], pts[..., 1])
        res = np.maximum(
            np.abs((fx - targets[:, 0:1] + 0.5) % 1.0 - 0.5),
            np.abs((ft - targets[:, 1:2] + 0.5) % 1.0 - 0.5))
        if res.max() >= PREIMAGE_RESIDUAL_TOL:
            raise RootCountMismatch(spec.degree, -1,
                                    where="closed-form residual check failed")
        return pts
    return _preimages_newton(spec, targets)


def preimages(spec: MapSpec, p) -> np.ndarray:
    """All y with F(y) = p, shape (degree, 2), sorted, pairwise separated."""
    return preimages_batch(spec, np.asarray(p, dtype=np.float64)[None, :])[0]


# ---------------------------------------------------------------------------
# Orbits and Birkhoff sums
# ---------------------------------------------------------------------------

def orbit(spec: MapSpec, p, n: int) -> np.ndarray:
    """Points p, F(p), ..., F^n(p); shape (n + 1, 2)."""
    out = np.empty((n + 1, 2))
    out[0] = wrap01(np.asarray(p, dtype=np.float64))
    for i in range(n):
        x, t = eval_map(spec, out[i, 0], out[i, 1])
        out[i + 1, 0] = x
        out[i + 1, 1] = t
    return out


def birkhoff_sum(spec: MapSpec, obs: Observable, p, n: int,
                 basin_index: int | None = None) -> float:
    """sum_{k<n} tau(F^k p), subtracting the per-component offset when the
    observable is centered.

    For a multi-component centering the caller must say which basin the
    start point belongs to; with a single offset it is applied globally.
    """
    pts = orbit(spec, p, max(n - 1, 0))[:n]
    total = float(np.sum(obs.eval(pts[:, 0], pts[:, 1]))) if n > 0 else 0.0
    if obs.centered_offsets is not None and n > 0:
        offs = obs.centered_offsets
        if basin_index is None:
            if len(offs) != 1:
                raise ValidationError(
                    "multi-component centering needs an explicit basin_index")
            basin_index = 0
        total -= n * offs[basin_index]
    return total


def birkhoff_sums_batch(spec: MapSpec, obs, starts: np.ndarray,
                        n: int) -> np.ndarray:
    """Vectorized tau_n over rows of starts (no dither; exact orbits)."""
    x = starts[:, 0].copy()
    t = starts[:, 1].copy()
    acc = np.zeros(len(starts))
    ev = obs.eval if hasattr(obs, "eval") else obs
    for _ in range(n):
        acc += ev(x, t)
        x, t = eval_map(spec, x, t)
    return acc


DITHER_SCALE = 2.0 ** -49


def dithered_step(spec: MapSpec, x, t, rng, scale: float = DITHER_SCALE):
    """One forward step with a symmetric micro-perturbation of x.

    Exact x-doubling maps dyadic rationals onto x = 0 within ~53 steps,
    so long orbits started from grid cells degenerate silently.  Adding
    a uniform +/-scale jitter (default 2^-49, far below the resolution
    of any observable or histogram bin) keeps orbits generic without
    biasing statistics.  theta is left untouched: invariant circles of
    the slow coordinate must stay invariant.
    """
    x, t = eval_map(spec, x, t)
    x = np.mod(x + rng.uniform(-scale, scale, size=np.shape(x)), 1.0)
    return x, t
