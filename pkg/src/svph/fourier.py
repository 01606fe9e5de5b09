"""Finite Fourier coefficient tables on the 2-torus.

A real trigonometric polynomial g(x, theta) = sum_k c_k e^{2 pi i (k1 x + k2 theta)}
is stored as an explicit list of modes and complex coefficients with the
Hermitian symmetry c_{-k} = conj(c_k).  Everything downstream (maps,
observables, densities) is built from these tables, so evaluation,
differentiation, grid synthesis and the wire format all live here.

Wire format for one table: a list of rows [k1, k2, re, im].  Only one of
each +-k pair needs to be present; on load the table is completed and the
symmetry of explicitly duplicated rows is validated.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

_SYM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class CoeffTable:
    """Immutable table of Fourier modes for a real-valued function.

    Attributes:
        modes: (M, 2) int array of wave numbers (k1, k2).
        values: (M,) complex array, values[j] is the coefficient of
            e^{2 pi i modes[j] . y}.

    Modes are stored in canonical (sorted, deduplicated) order so equal
    tables have identical reprs and hashes.
    """

    modes: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        modes = np.atleast_2d(np.asarray(self.modes, dtype=np.int64))
        values = np.asarray(self.values, dtype=np.complex128)
        if modes.size == 0:
            modes = np.zeros((0, 2), dtype=np.int64)
            values = np.zeros(0, dtype=np.complex128)
        if modes.shape[1] != 2 or modes.shape[0] != values.shape[0]:
            raise ValidationError("modes must be (M, 2) and match values")
        order = np.lexsort((modes[:, 1], modes[:, 0]))
        modes, values = modes[order], values[order]
        if len(modes) > 1 and np.any(np.all(np.diff(modes, axis=0) == 0, axis=1)):
            raise ValidationError("duplicate modes in coefficient table")
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "values", values)
        self.modes.setflags(write=False)
        self.values.setflags(write=False)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, d: dict[tuple[int, int], complex]) -> "CoeffTable":
        """Build from {(k1, k2): c}, completing Hermitian partners."""
        full: dict[tuple[int, int], complex] = {}
        for (k1, k2), c in d.items():
            k = (int(k1), int(k2))
            mk = (-k[0], -k[1])
            c = complex(c)
            for key, val in ((k, c), (mk, np.conj(c))):
                if key in full and abs(full[key] - val) > _SYM_TOL:
                    raise ValidationError(
                        f"Hermitian symmetry violated at mode {key}: "
                        f"{full[key]} vs {val}")
                full[key] = val
        if (0, 0) in full and abs(full[(0, 0)].imag) > _SYM_TOL:
            raise ValidationError("constant mode must be real")
        modes = np.array(sorted(full), dtype=np.int64).reshape(-1, 2)
        values = np.array([full[tuple(m)] for m in modes], dtype=np.complex128)
        return cls(modes, values)

    @classmethod
    def from_rows(cls, rows) -> "CoeffTable":
        """Build from wire-format rows [k1, k2, re, im]."""
        d: dict[tuple[int, int], complex] = {}
        full: dict[tuple[int, int], complex] = {}
        for row in rows:
            if len(row) != 4:
                raise ValidationError(f"coefficient row must be [k1,k2,re,im], got {row}")
            k1, k2, re, im = row
            k = (int(k1), int(k2))
            c = complex(float(re), float(im))
            if k in full:
                if abs(full[k] - c) > _SYM_TOL:
                    raise ValidationError(f"conflicting rows for mode {k}")
                continue
            full[k] = c
            d[k] = c
        return cls.from_dict(d)

    @classmethod
    def zero(cls) -> "CoeffTable":
        return cls(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.complex128))

    def to_rows(self) -> list[list[float]]:
        return [[int(k1), int(k2), float(v.real), float(v.imag)]
                for (k1, k2), v in zip(self.modes, self.values)]

    # -- queries -----------------------------------------------------------

    @property
    def band(self) -> int:
        """Largest |k_i| present (0 for the empty table)."""
        if len(self.modes) == 0:
            return 0
        return int(np.abs(self.modes).max())

    def is_hermitian(self, tol: float = _SYM_TOL) -> bool:
        lookup = {tuple(m): v for m, v in zip(self.modes, self.values)}
        for m, v in lookup.items():
            partner = lookup.get((-m[0], -m[1]))
            if partner is None or abs(partner - np.conj(v)) > tol:
                return False
        return True

    def coeff(self, k1: int, k2: int) -> complex:
        hit = np.where((self.modes[:, 0] == k1) & (self.modes[:, 1] == k2))[0]
        return complex(self.values[hit[0]]) if len(hit) else 0.0 + 0.0j

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.modes.tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()[:16]

    # -- calculus ----------------------------------------------------------

    def derivative(self, axis: int) -> "CoeffTable":
        """d/dx (axis 0) or d/dtheta (axis 1); another real table."""
        factor = 2j * np.pi * self.modes[:, axis]
        keep = factor != 0
        return CoeffTable(self.modes[keep], (self.values * factor)[keep])

    def scaled(self, a: float) -> "CoeffTable":
        return CoeffTable(self.modes, self.values * a)

    # -- evaluation --------------------------------------------------------

    def eval(self, x, theta):
        """Evaluate at points; x, theta broadcastable arrays. Returns real."""
        x = np.asarray(x, dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        if len(self.modes) == 0:
            return np.zeros(np.broadcast(x, theta).shape)
        phase = (np.multiply.outer(x, self.modes[:, 0])
                 + np.multiply.outer(theta, self.modes[:, 1]))
        out = np.exp(2j * np.pi * phase) @ self.values
        return out.real

    def grid_values(self, Q: int) -> np.ndarray:
        """Values on the uniform lattice {(p/Q, q/Q)}, shape (Q, Q), real.

        Exact (up to rounding) whenever Q > 2*band, by placing coefficients
        on the FFT grid and inverting.
        """
        if Q <= 2 * self.band:
            raise ValidationError(f"grid {Q} too small for band {self.band}")
        spec = np.zeros((Q, Q), dtype=np.complex128)
        spec[self.modes[:, 0] % Q, self.modes[:, 1] % Q] = self.values
        vals = np.fft.ifft2(spec) * Q * Q
        return vals.real

    def sup_bound(self) -> float:
        """Cheap upper bound sum |c_k| >= sup |g|."""
        return float(np.abs(self.values).sum())

    def compiled(self) -> "CompiledTable":
        """Lazily built fast evaluator, cached on the table itself."""
        ct = getattr(self, "_compiled_form", None)
        if ct is None:
            ct = CompiledTable.compile(self)
            object.__setattr__(self, "_compiled_form", ct)
        return ct


def table_from_grid(values: np.ndarray, band: int) -> CoeffTable:
    """Project grid samples onto modes with max(|k1|,|k2|) <= band.

    The inverse of CoeffTable.grid_values for band-limited data; for general
    data it returns the aliased trigonometric interpolant, truncated.
    """
    Q = values.shape[0]
    if values.shape != (Q, Q):
        raise ValidationError("values must be a square grid")
    spec = np.fft.fft2(values) / (Q * Q)
    ks = np.arange(-band, band + 1)
    d = {}
    for k1 in ks:
        for k2 in ks:
            c = spec[k1 % Q, k2 % Q]
            if abs(c) > 1e-300:
                d[(int(k1), int(k2))] = c
    sym = {}
    for k, c in d.items():
        mk = (-k[0], -k[1])
        cp = d.get(mk, 0.0)
        sym[k] = 0.5 * (c + np.conj(cp))
    return CoeffTable.from_dict(sym) if sym else CoeffTable.zero()


def product_table(a: CoeffTable, b: CoeffTable, band: int | None = None) -> CoeffTable:
    """Coefficients of the pointwise product a*b, optionally truncated."""
    full_band = a.band + b.band
    out_band = full_band if band is None else min(band, full_band)
    Q = 1
    while Q <= 2 * full_band:
        Q *= 2
    Q = max(Q, 4)
    vals = a.grid_values(Q) * b.grid_values(Q)
    return table_from_grid(vals, out_band)


def pair_mean(a: CoeffTable, b: CoeffTable) -> float:
    """Lebesgue mean of the product, sum_k a_k b_{-k} (exact)."""
    lookup = {tuple(m): v for m, v in zip(b.modes, b.values)}
    total = 0.0 + 0.0j
    for m, v in zip(a.modes, a.values):
        partner = lookup.get((-m[0], -m[1]))
        if partner is not None:
            total += v * partner
    return float(total.real)


# ---------------------------------------------------------------------------
# Compiled evaluator for hot loops
# ---------------------------------------------------------------------------

@dataclass
class CompiledTable:
    """Real-arithmetic evaluator amortized for repeated large-batch calls.

    Writes the table as c0 + sum_half 2 Re(c_k E1^{k1} E2^{k2}) over a
    canonical half of the mode set and evaluates harmonics by power ladders,
    so each call costs two complex exponentials per point plus a handful of
    multiplies per mode.
    """

    const: float
    k1: np.ndarray
    k2: np.ndarray
    coeff: np.ndarray
    max1: int
    max2: int
    uses_x: bool = field(init=False)
    uses_theta: bool = field(init=False)

    def __post_init__(self):
        self.uses_x = self.max1 > 0
        self.uses_theta = self.max2 > 0

    @classmethod
    def compile(cls, table: CoeffTable) -> "CompiledTable":
        const = float(table.coeff(0, 0).real)
        half = [(int(m[0]), int(m[1]), v) for m, v in zip(table.modes, table.values)
                if (m[0], m[1]) > (0, 0)]
        k1 = np.array([h[0] for h in half], dtype=np.int64)
        k2 = np.array([h[1] for h in half], dtype=np.int64)
        coeff = np.array([2.0 * h[2] for h in half], dtype=np.complex128)
        max1 = int(np.abs(k1).max()) if len(k1) else 0
        max2 = int(np.abs(k2).max()) if len(k2) else 0
        return cls(const, k1, k2, coeff, max1, max2)

    def eval(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        out = np.full(x.shape, self.const)
        if len(self.coeff) == 0:
            return out
        e1 = np.exp(2j * np.pi * x) if self.uses_x else None
        e2 = np.exp(2j * np.pi * theta) if self.uses_theta else None
        # power ladders: lad1[j] = e1^j
        lad1 = [np.ones_like(x, dtype=np.complex128)]
        for _ in range(self.max1):
            lad1.append(lad1[-1] * e1)
        lad2 = [np.ones_like(x, dtype=np.complex128)]
        for _ in range(self.max2):
            lad2.append(lad2[-1] * e2)
        for j in range(len(self.coeff)):
            a = lad1[self.k1[j]]
            b = lad2[abs(self.k2[j])]
            if self.k2[j] < 0:
                b = np.conj(b)
            term = self.coeff[j] * a * b
            out += term.real
        return out
