"""Fourier-Galerkin discretization of the (twisted) transfer operator.

The operator acts on densities u(y) = sum_k u_k e^{2 pi i k.y} by

    (L_nu u)(x) = sum_{F(y) = x} e^{i nu tau(y)} u(y) / det DF(y),

and by duality its matrix on truncated coefficients is

    entry[m, k] = integral e^{-2 pi i m.F(y)} e^{i nu tau(y)} e^{2 pi i k.y} dy,

computed with the trapezoidal rule on a Q x Q lattice (spectrally accurate
for analytic data) via one fast transform per row mode m.  Rows share the
powers of e^{-2 pi i F_1(y)} and e^{-2 pi i F_2(y)}, so assembly costs one
Q x Q multiply and one FFT per row.

A matrix-free preimage-sum oracle, eigensolvers with residual gates, the
twisted eigenvalue curves lambda_k(nu) with finite-difference derivatives,
and a largest-modulus diagnostic for lattice/coboundary structure round out
the module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse.linalg

from .errors import (AliasingSuspected, BranchMatchingFailed,
                     EigenSolverDiverged, ValidationError)
from .fourier import CoeffTable
from .maps import MapSpec, Observable, eval_map, jacobian_batch, preimages_batch

DENSE_CUTOFF = 5000
RESIDUAL_FACTOR = 1e-8
OVERLAP_THRESHOLD = 0.9
RICHARDSON_TOL = 1e-4


# ---------------------------------------------------------------------------
# Mode bookkeeping
# ---------------------------------------------------------------------------

def mode_list(K: int) -> np.ndarray:
    """All modes (m1, m2), max(|m1|,|m2|) <= K, in row-major (m1, m2) order."""
    r = np.arange(-K, K + 1)
    M1, M2 = np.meshgrid(r, r, indexing="ij")
    return np.stack([M1.ravel(), M2.ravel()], axis=-1)


def mode_to_index(K: int, m1: int, m2: int) -> int:
    if max(abs(m1), abs(m2)) > K:
        raise ValidationError(f"mode ({m1},{m2}) outside cutoff {K}")
    return (m1 + K) * (2 * K + 1) + (m2 + K)


def zero_mode_index(K: int) -> int:
    return mode_to_index(K, 0, 0)


def vec_from_table(table: CoeffTable, K: int) -> np.ndarray:
    """Coefficient vector of a (real) table on the cutoff-K mode box."""
    if table.band > K:
        raise ValidationError("table band exceeds cutoff")
    vec = np.zeros((2 * K + 1) ** 2, dtype=np.complex128)
    for (k1, k2), val in zip(table.modes, table.values):
        vec[mode_to_index(K, int(k1), int(k2))] = val
    return vec


def table_from_vec(vec: np.ndarray, K: int, tol: float = 1e-10) -> CoeffTable:
    """Hermitian-symmetrized table from a coefficient vector (drops ~0)."""
    modes = mode_list(K)
    entries = {}
    for (m1, m2), val in zip(modes, vec):
        partner = vec[mode_to_index(K, -int(m1), -int(m2))]
        sym = 0.5 * (val + np.conj(partner))
        if abs(sym) > tol:
            entries[(int(m1), int(m2))] = sym
    if not entries:
        entries = {(0, 0): 0.0}
    return CoeffTable.from_dict(entries)


def synth_vector(vec: np.ndarray, K: int, points: np.ndarray) -> np.ndarray:
    """Evaluate sum_k vec_k e^{2 pi i k.p} at points (P, 2)."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    modes = mode_list(K)
    phases = np.exp(2j * np.pi * (pts @ modes.T.astype(np.float64)))
    return phases @ vec


def vec_to_grid(vec: np.ndarray, K: int, G: int, offset: float = 0.0) -> np.ndarray:
    """Values of the mode-vector function on the G x G lattice (j+offset)/G.

    offset=0.5 samples cell centers, matching orbit-based basin labels.
    """
    if G <= 2 * K:
        raise ValidationError("grid must resolve the mode box: G > 2K")
    spect = np.zeros((G, G), dtype=np.complex128)
    for (m1, m2), val in zip(mode_list(K), vec):
        if offset != 0.0:
            val = val * np.exp(2j * np.pi * offset * (int(m1) + int(m2)) / G)
        spect[int(m1) % G, int(m2) % G] += val
    return np.fft.ifft2(spect) * G * G


def grid_to_vec(values: np.ndarray, K: int) -> np.ndarray:
    """Coefficient vector (cutoff K) of grid samples on the Q x Q lattice."""
    Q = values.shape[0]
    if Q <= 2 * K:
        raise ValidationError("need Q > 2K to extract the mode box")
    C = np.fft.fft2(values) / (Q * Q)
    vec = np.empty((2 * K + 1) ** 2, dtype=np.complex128)
    for i, (m1, m2) in enumerate(mode_list(K)):
        vec[i] = C[int(m1) % Q, int(m2) % Q]
    return vec


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OperatorMatrix:
    """Dense Galerkin matrix of L_nu on the cutoff-K mode box."""

    K: int
    Q: int
    nu: float
    entries: np.ndarray
    map_hash: str
    obs_hash: str

    @property
    def dim(self) -> int:
        return (2 * self.K + 1) ** 2

    def apply(self, vec: np.ndarray) -> np.ndarray:
        return self.entries @ vec


def default_Q(spec: MapSpec, obs: Observable | None, K: int) -> int:
    """Smallest power of two satisfying the sampling preconditions with
    headroom for the analytic (not band-limited) integrand tails."""
    band = max(spec.f_coeffs.band, spec.omega_coeffs.band,
               obs.coeffs.band if obs is not None else 0, 1)
    need = max(2 * (2 * K + 1), 4 * (K + band), 128)
    Q = 1
    while Q < need:
        Q *= 2
    return Q


def _phase_powers(P: np.ndarray, K: int) -> list[np.ndarray]:
    """[P^0, P^1, ..., P^K] for a unit-modulus phase grid P."""
    out = [np.ones_like(P)]
    for _ in range(K):
        out.append(out[-1] * P)
    return out


def assemble(spec: MapSpec, obs: Observable | None = None, nu: float = 0.0,
             K: int = 16, Q: int | None = None,
             self_check: bool = False) -> OperatorMatrix:
    """Galerkin matrix of L_nu; entry[m, k] is the (-k) Fourier coefficient
    of y -> e^{-2 pi i m.F(y)} e^{i nu tau(y)} on the Q x Q lattice.

    With self_check=True the assembly is repeated at 2Q and any entry moving
    by more than 1e-6 raises AliasingSuspected.
    """
    if nu != 0.0 and obs is None:
        raise ValidationError("twisting (nu != 0) requires an observable")
    if Q is None:
        Q = default_Q(spec, obs, K)
    if Q < 2 * (2 * K + 1) or (Q & (Q - 1)) != 0:
        raise ValidationError("Q must be a power of two with Q >= 2(2K+1)")

    entries = _assemble_entries(spec, obs, nu, K, Q)
    if self_check:
        finer = _assemble_entries(spec, obs, nu, K, 2 * Q)
        drift = float(np.abs(finer - entries).max())
        if drift > 1e-6:
            raise AliasingSuspected(
                f"doubling Q moves entries by {drift:.3e} > 1e-6")
        entries = finer
    return OperatorMatrix(
        K=K, Q=Q, nu=float(nu), entries=entries,
        map_hash=spec.digest(),
        obs_hash=obs.digest() if obs is not None else "none")


def _assemble_entries(spec: MapSpec, obs: Observable | None, nu: float,
                      K: int, Q: int) -> np.ndarray:
    g = np.arange(Q) / Q
    X, T = np.meshgrid(g, g, indexing="ij")
    fx, ft = eval_map(spec, X, T)
    if nu != 0.0:
        tau = obs.coeffs.compiled().eval(X, T)
        twist = np.exp(1j * nu * tau)
    else:
        twist = np.ones_like(X, dtype=np.complex128)

    A = _phase_powers(np.exp(-2j * np.pi * fx), K)
    B = _phase_powers(np.exp(-2j * np.pi * ft), K)
    cols = (-np.arange(-K, K + 1)) % Q
    take = np.ix_(cols, cols)
    dim = (2 * K + 1) ** 2
    entries = np.empty((dim, dim), dtype=np.complex128)
    row = 0
    inv_area = 1.0 / (Q * Q)
    for m1 in range(-K, K + 1):
        base = (A[m1] if m1 >= 0 else np.conj(A[-m1])) * twist
        for m2 in range(-K, K + 1):
            G = base * (B[m2] if m2 >= 0 else np.conj(B[-m2]))
            C = np.fft.fft2(G)
            entries[row] = C[take].ravel() * inv_area
            row += 1
    return entries


def pointwise_apply(spec: MapSpec, obs: Observable | None, nu: float,
                    u_vec: np.ndarray, K: int,
                    points: np.ndarray) -> np.ndarray:
    """Matrix-free oracle: (L_nu u)(p) = sum_{F(y)=p} e^{i nu tau(y)} u(y)
    / det DF(y), evaluated through exact preimage sets."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pre = preimages_batch(spec, pts)                    # (P, deg, 2)
    P, deg = pre.shape[0], pre.shape[1]
    flat = pre.reshape(P * deg, 2)
    a11, a12, a21, a22 = jacobian_batch(spec, flat[:, 0], flat[:, 1])
    det = (a11 * a22 - a12 * a21).reshape(P, deg)
    uvals = synth_vector(u_vec, K, flat).reshape(P, deg)
    if nu != 0.0:
        tau = obs.coeffs.compiled().eval(pre[..., 0], pre[..., 1])
        uvals = uvals * np.exp(1j * nu * tau)
    return (uvals / det).sum(axis=1)


# ---------------------------------------------------------------------------
# Spectrum
# ---------------------------------------------------------------------------

@dataclass
class SpectralData:
    eigenvalues: np.ndarray
    right_vectors: np.ndarray
    left_vectors: np.ndarray | None
    peripheral_count: int
    gap: float
    residuals: np.ndarray
    K: int
    nu: float

    def to_json_dict(self) -> dict:
        return {
            "eigenvalues": [[float(z.real), float(z.imag)]
                            for z in self.eigenvalues],
            "peripheral_count": int(self.peripheral_count),
            "gap": float(self.gap),
            "residuals": [float(r) for r in self.residuals],
            "K": int(self.K),
            "nu": float(self.nu),
        }


def _refine_left(M: np.ndarray, lam: complex, u: np.ndarray,
                 norm: float) -> np.ndarray:
    """Sharpen a left eigenvector by shifted inverse iteration on M^H.

    Needed because the Galerkin operator is heavily non-normal: LAPACK's
    back-transformed left vectors carry O(1e-6) residuals, while the right
    vectors come out at machine precision.
    """
    A = M.conj().T - np.conj(lam) * np.eye(M.shape[0])
    A.flat[:: M.shape[0] + 1] += 1e-13 * norm
    lu = scipy.linalg.lu_factor(A)
    for _ in range(2):
        u = scipy.linalg.lu_solve(lu, u)
        u = u / np.linalg.norm(u)
    return u


def spectrum(op: OperatorMatrix, count: int = 8, gap_tol: float = 0.05,
             want_left: bool = True) -> SpectralData:
    """Leading eigenpairs by modulus.

    Dense decomposition up to DENSE_CUTOFF, restarted Krylov above.  The
    reported residuals ||M v - lambda v|| (and, when requested, the left
    residuals after refinement) are gated at 1e-8 times the Frobenius norm.
    """
    M = op.entries
    dim = M.shape[0]
    if count > dim:
        raise ValidationError("count exceeds matrix dimension")
    norm = np.linalg.norm(M)
    if dim <= DENSE_CUTOFF:
        if want_left:
            w, vl, vr = scipy.linalg.eig(M, left=True, right=True)
        else:
            w, vr = scipy.linalg.eig(M)
            vl = None
        order = np.argsort(-np.abs(w))
        moduli_all = np.abs(w[order])
        keep = order[:count]
        w_k, vr_k = w[keep], vr[:, keep]
        vl_k = vl[:, keep] if want_left else None
        peripheral = int(np.sum(moduli_all > 1.0 - gap_tol))
        sub = moduli_all[moduli_all <= 1.0 - gap_tol]
        gap = float(sub[0]) if len(sub) else 0.0
    else:
        try:
            w_k, vr_k = scipy.sparse.linalg.eigs(M, k=count, which="LM")
            if want_left:
                wl, vl_raw = scipy.sparse.linalg.eigs(M.conj().T, k=count,
                                                      which="LM")
        except scipy.sparse.linalg.ArpackNoConvergence as exc:
            raise EigenSolverDiverged(f"Krylov iteration stalled: {exc}")
        order = np.argsort(-np.abs(w_k))
        w_k, vr_k = w_k[order], vr_k[:, order]
        if want_left:
            # align left vectors to the right eigenvalues (conjugate pairing)
            used, cols = [], []
            for lam in w_k:
                d = np.abs(np.conj(wl) - lam)
                d[used] = np.inf
                j = int(np.argmin(d))
                used.append(j)
                cols.append(j)
            vl_k = vl_raw[:, cols]
        else:
            vl_k = None
        moduli = np.abs(w_k)
        peripheral = int(np.sum(moduli > 1.0 - gap_tol))
        sub = moduli[moduli <= 1.0 - gap_tol]
        gap = float(sub[0]) if len(sub) else 0.0

    vr_k = vr_k / np.linalg.norm(vr_k, axis=0, keepdims=True)
    residuals = np.linalg.norm(M @ vr_k - vr_k * w_k[None, :], axis=0)
    if vl_k is not None:
        vl_k = vl_k / np.linalg.norm(vl_k, axis=0, keepdims=True)
        res_l = np.linalg.norm(
            M.conj().T @ vl_k - vl_k * np.conj(w_k)[None, :], axis=0)
        for j in np.nonzero(res_l > RESIDUAL_FACTOR * norm)[0]:
            vl_k[:, j] = _refine_left(M, w_k[j], vl_k[:, j], norm)
            res_l[j] = np.linalg.norm(
                M.conj().T @ vl_k[:, j] - np.conj(w_k[j]) * vl_k[:, j])
        residuals = np.maximum(residuals, res_l)
    if residuals.max() > RESIDUAL_FACTOR * norm:
        raise EigenSolverDiverged(
            f"eigen residual {residuals.max():.3e} exceeds "
            f"{RESIDUAL_FACTOR:.0e} * ||M|| = {RESIDUAL_FACTOR * norm:.3e}")
    return SpectralData(
        eigenvalues=w_k, right_vectors=vr_k, left_vectors=vl_k,
        peripheral_count=peripheral, gap=gap, residuals=residuals,
        K=op.K, nu=op.nu)


def unit_eigenspace(data: SpectralData, unit_tol: float = 1e-6):
    """Indices of eigenvalues within unit_tol of 1 (the acip eigenspace)."""
    return np.nonzero(np.abs(data.eigenvalues - 1.0) < unit_tol)[0]


# ---------------------------------------------------------------------------
# Twisted eigenvalue curves
# ---------------------------------------------------------------------------

@dataclass
class TwistedCurve:
    nu_grid: np.ndarray
    branches: np.ndarray           # (ell, len(nu_grid)) complex
    matched: bool
    mu_tau: np.ndarray             # per-branch mu_k(tau) from lambda'(0)/i
    sigma2: np.ndarray             # per-branch -(log lambda)''(0), step h
    sigma2_half: np.ndarray        # same at step h/2 (Richardson check)
    richardson_ok: bool
    min_overlap: float
    K: int
    Q: int

    def to_json_dict(self) -> dict:
        return {
            "nu_grid": [float(v) for v in self.nu_grid],
            "branches": [[[float(z.real), float(z.imag)] for z in row]
                         for row in self.branches],
            "matched": bool(self.matched),
            "mu_tau": [float(v) for v in self.mu_tau],
            "sigma2": [float(v) for v in self.sigma2],
            "sigma2_half": [float(v) for v in self.sigma2_half],
            "richardson_ok": bool(self.richardson_ok),
            "min_overlap": float(self.min_overlap),
            "K": int(self.K),
            "Q": int(self.Q),
        }


def default_nu_grid(h: float = 0.02) -> np.ndarray:
    """Nine-point symmetric grid at spacing h/2: supports the 5-point
    stencils at steps h and h/2 around 0."""
    return np.round(np.arange(-4, 5) * (h / 2.0), 12)


def _flip_conj(vec: np.ndarray, K: int) -> np.ndarray:
    """Coefficient vector of conj(u) from that of u: w[m] = conj(u[-m])."""
    n = 2 * K + 1
    arr = vec.reshape(n, n)
    return np.conj(arr[::-1, ::-1]).reshape(-1)


def _match(prev: np.ndarray, new_vecs: np.ndarray):
    """Assign columns of new_vecs to columns of prev by maximal overlap."""
    overlap = np.abs(prev.conj().T @ new_vecs)
    rows, cols = scipy.optimize.linear_sum_assignment(-overlap)
    perm = np.empty(prev.shape[1], dtype=int)
    scores = np.empty(prev.shape[1])
    for r, c in zip(rows, cols):
        perm[r] = c
        scores[r] = overlap[r, c]
    return perm, scores


def twisted_curve(spec: MapSpec, obs: Observable, nu_grid=None, K: int = 12,
                  Q: int | None = None, ell: int = 1,
                  overlap_threshold: float = OVERLAP_THRESHOLD) -> TwistedCurve:
    """Continue the ell leading eigenvalue branches across nu_grid and
    differentiate them at 0.

    Branch identity is fixed at the first positive grid point, where the
    perturbation has split the unit eigenvalue; the nu=0 spectrum only needs
    to contain the branch vectors in its unit eigenspace (enforced through
    the projection overlap), and the negative side is seeded by the
    conjugate-flip symmetry lambda_k(-nu) = conj(lambda_k(nu)).
    """
    if nu_grid is None:
        nu_grid = default_nu_grid()
    nus = np.asarray(sorted(float(v) for v in nu_grid))
    if len(nus) < 5 or not np.any(nus == 0.0):
        raise ValidationError("nu grid must contain 0 and >= 5 points")
    steps = np.diff(nus)
    if steps.max() - steps.min() > 1e-12:
        raise ValidationError("nu grid must be uniform")
    if steps.max() > 0.05 / 2 + 1e-12:
        raise ValidationError("nu grid spacing must not exceed 0.025 "
                              "(5-point stencil at h <= 0.05)")
    if abs(nus[0] + nus[-1]) > 1e-12:
        raise ValidationError("nu grid must be symmetric about 0")
    i0 = int(np.nonzero(nus == 0.0)[0][0])

    solves = []
    for nu in nus:
        op = assemble(spec, obs, nu=float(nu), K=K, Q=Q)
        dat = spectrum(op, count=max(ell + 2, 4), want_left=False)
        solves.append(dat)

    # orthonormal basis of the unit eigenspace at nu = 0
    data0 = solves[i0]
    idx_unit = np.argsort(np.abs(data0.eigenvalues - 1.0))[:ell]
    V0, _ = np.linalg.qr(data0.right_vectors[:, idx_unit])

    npts = len(nus)
    branches = np.full((ell, npts), np.nan + 0j, dtype=np.complex128)
    min_overlap = 1.0

    # fix branch identity just right of 0
    d1 = solves[i0 + 1]
    order = np.argsort(-np.abs(d1.eigenvalues))[:ell]
    # canonical, reproducible branch order: descending imaginary part of the
    # split eigenvalues, ties by real part
    lam1 = d1.eigenvalues[order]
    key = np.lexsort((-lam1.real, -lam1.imag))
    order = order[key]
    cur = d1.right_vectors[:, order]
    proj = np.linalg.norm(V0.conj().T @ cur, axis=0)
    min_overlap = min(min_overlap, float(proj.min()))
    if proj.min() < overlap_threshold:
        raise BranchMatchingFailed(
            f"first split vectors leave the unit eigenspace "
            f"(projection {proj.min():.3f} < {overlap_threshold})")
    branches[:, i0 + 1] = d1.eigenvalues[order]

    # nu = 0 values: pair unit-cluster eigenvalues with the split vectors
    perm, scores = _match(cur, data0.right_vectors[:, idx_unit])
    branches[:, i0] = data0.eigenvalues[idx_unit][perm]

    # continue outward on the positive side
    vecs = cur
    for i in range(i0 + 2, npts):
        dat = solves[i]
        top = np.argsort(-np.abs(dat.eigenvalues))[:ell]
        perm, scores = _match(vecs, dat.right_vectors[:, top])
        min_overlap = min(min_overlap, float(scores.min()))
        if scores.min() < overlap_threshold:
            raise BranchMatchingFailed(
                f"overlap {scores.min():.3f} < {overlap_threshold} "
                f"at nu = {nus[i]:.4f}")
        branches[:, i] = dat.eigenvalues[top][perm]
        vecs = dat.right_vectors[:, top][:, perm]

    # negative side, seeded by conjugate symmetry of the +h vectors
    vecs = np.stack([_flip_conj(cur[:, k], K) for k in range(ell)], axis=1)
    vecs = vecs / np.linalg.norm(vecs, axis=0, keepdims=True)
    for i in range(i0 - 1, -1, -1):
        dat = solves[i]
        top = np.argsort(-np.abs(dat.eigenvalues))[:ell]
        perm, scores = _match(vecs, dat.right_vectors[:, top])
        min_overlap = min(min_overlap, float(scores.min()))
        if scores.min() < overlap_threshold:
            raise BranchMatchingFailed(
                f"overlap {scores.min():.3f} < {overlap_threshold} "
                f"at nu = {nus[i]:.4f}")
        branches[:, i] = dat.eigenvalues[top][perm]
        vecs = dat.right_vectors[:, top][:, perm]

    mu, s2, s2h = _curve_derivatives(nus, branches, i0)
    return TwistedCurve(
        nu_grid=nus, branches=branches, matched=True,
        mu_tau=mu, sigma2=s2, sigma2_half=s2h,
        richardson_ok=bool(np.abs(s2 - s2h).max() <= RICHARDSON_TOL),
        min_overlap=min_overlap, K=K, Q=Q if Q is not None else -1)


def _curve_derivatives(nus: np.ndarray, branches: np.ndarray, i0: int):
    """5-point central first/second derivatives of log-branch data at 0,
    evaluated at steps 2*delta and delta (Richardson pair)."""
    delta = nus[1] - nus[0]

    def stencil(s: int):
        h = s * delta
        lam = {o: branches[:, i0 + o * s] for o in (-2, -1, 0, 1, 2)}
        d1 = (-lam[2] + 8 * lam[1] - 8 * lam[-1] + lam[-2]) / (12 * h)
        d2 = (-lam[2] + 16 * lam[1] - 30 * lam[0] + 16 * lam[-1]
              - lam[-2]) / (12 * h * h)
        mu = (d1 / 1j).real
        sigma2 = (-d2 + d1 * d1).real
        return mu, sigma2

    if i0 - 4 < 0 or i0 + 4 >= len(nus):
        raise ValidationError("nu grid too short for the stencil pair")
    mu_h, s2_h = stencil(2)
    mu_half, s2_half = stencil(1)
    return mu_h, s2_h, s2_half


# ---------------------------------------------------------------------------
# Unit-disk diagnostic
# ---------------------------------------------------------------------------

def unit_disk_diagnostic(spec: MapSpec, obs: Observable, nu_list,
                         K: int = 12, Q: int | None = None):
    """Largest eigenvalue modulus of L_nu per nu; values >= 1 - 1e-4 flag
    coboundary or lattice structure in the observable."""
    out = []
    for nu in nu_list:
        nu = float(nu)
        if nu == 0.0:
            raise ValidationError("nu_list must exclude 0")
        op = assemble(spec, obs, nu=nu, K=K, Q=Q)
        w = scipy.linalg.eigvals(op.entries)
        out.append((nu, float(np.abs(w).max())))
    return out
