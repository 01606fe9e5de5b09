"""Ergodic decomposition: invariant densities, basins, masses, CLT weights.

The peripheral eigendata of the transfer operator and long-orbit
statistics must tell the same story.  The dimension of the eigenvalue-1
cluster fixes the number ell of absolutely continuous components; orbits
started from every grid cell are clustered by their occupation
histograms, and the two counts have to agree.  Basin indicators are then
projected onto the unit eigenspace (the closed form of the Cesaro
average lim (1/T) sum_t M^t applied to the indicator), producing one
invariant density rho_k per component with m(rho_k) equal to the basin's
Lebesgue mass, plus the probability density mu_k = rho_k / m(rho_k).

Basins of distinct components can be riddled (intermingled at fine
scales, as happens when two invariant circles attract side by side), in
which case a basin-indicator seed projects onto a mixture of densities.
The extraction therefore anchors each density to its orbit cluster's
empirical measure -- an unbiased image of the physical measure no matter
how tangled the basin -- by matching the low Fourier modes of the
cluster (orbit averages of e^{-2 pi i m.z}) with a small least-squares
fit inside the unit eigenspace.  Coarse occupation histograms are still
what the clustering itself runs on.

Any disagreement -- multiplicity vs cluster count, poor basin coverage,
densities that ring negative beyond the allowed tier -- raises
DecompositionInconsistent instead of producing a best guess.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (DecompositionInconsistent, ValidationError,
                     WeightMismatch)
from .maps import MapSpec, dithered_step
from .spectral import (OperatorMatrix, SpectralData, grid_to_vec, mode_list,
                       mode_to_index, vec_to_grid, zero_mode_index)

# |lambda - 1| window for the eigenvalue-1 cluster.  Deliberately wider
# than the 1e-6 used for K-refinement checks: a component whose density
# is nearly singular (mass piling up along an invariant circle or band)
# is represented at cutoff K by an eigenvalue that reaches 1 only as
# K -> infinity, and truncation can push one member of a degenerate pair
# slightly past 1 (the exact 1 always survives through the mass row).
# 8e-3 keeps such components on both sides while staying well below the
# first genuinely sub-peripheral distance on all shipped fixtures
# (>= 1.1e-2).
UNIT_CLUSTER_TOL = 8e-3
PERIPHERAL_WINDOW = 0.05      # matches the default gap_tol of spectrum()
CLUSTER_TOL = 0.2             # L1 distance between occupation histograms
NEG_TOL = 1e-3                # ringing tier: clip below, error above
COVERAGE_MIN = 0.99
MIN_CLUSTER_FRACTION = 0.005  # smaller clusters dissolve to unassigned


# ---------------------------------------------------------------------------
# Small vector utilities (coefficient vectors on the cutoff-K mode box)
# ---------------------------------------------------------------------------

def _conj_reflect(vec: np.ndarray) -> np.ndarray:
    """conj(v[-q]) as a vector over q; equals v itself for real functions."""
    n = int(round(np.sqrt(vec.size)))
    return vec.reshape(n, n)[::-1, ::-1].conj().ravel()


def realify(vec: np.ndarray) -> np.ndarray:
    """Nearest coefficient vector of a real-valued function."""
    return 0.5 * (vec + _conj_reflect(vec))


def pair_mean(u: np.ndarray, v: np.ndarray) -> complex:
    """m(u.v) = sum_q u_q v_{-q}: the mean of the pointwise product."""
    if u.size != v.size:
        raise ValidationError("coefficient vectors live on different boxes")
    n = int(round(np.sqrt(u.size)))
    return complex(np.sum(u * v.reshape(n, n)[::-1, ::-1].ravel()))


def vec_mul(u: np.ndarray, v: np.ndarray, K: int) -> np.ndarray:
    """Coefficients of the pointwise product u.v, truncated to the K box.

    Sampled on a (4K+4)^2 lattice, which is alias-free for the retained
    modes: the exact product has band 2K, and 2K - (4K + 4) < -K.
    """
    G = 4 * K + 4
    prod = vec_to_grid(u, K, G) * vec_to_grid(v, K, G)
    return grid_to_vec(prod, K)


# ---------------------------------------------------------------------------
# Orbit statistics
# ---------------------------------------------------------------------------

FEATURE_BAND = 2  # orbit averages of e^{-2 pi i m.z} for max|m| <= this


def orbit_statistics(spec: MapSpec, grid: int, burn: int, orbit_len: int,
                     hist_bins: int = 6, seed: int = 0,
                     feature_band: int = FEATURE_BAND):
    """Occupation histograms and low-mode averages of dithered orbits.

    Runs one orbit from every grid-cell center ((i+0.5)/grid, (j+0.5)/grid)
    and returns (hists, feats):
      hists: (grid^2, hist_bins^2), L1-normalized occupation histograms;
      feats: (grid^2, (2*feature_band+1)^2) complex, time averages of
             e^{-2 pi i m.z}, i.e. empirical Fourier coefficients of the
             orbit's limit measure, mode order as in mode_list.
    """
    if orbit_len <= 0 or burn < 0:
        raise ValidationError("need orbit_len > 0 and burn >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    c = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(c, c, indexing="ij")
    x = X.ravel().copy()
    t = T.ravel().copy()
    for _ in range(burn):
        x, t = dithered_step(spec, x, t, rng)
    B = hist_bins
    F = feature_band
    counts = np.zeros((x.size, B * B))
    feats = np.zeros((x.size, (2 * F + 1) ** 2), dtype=np.complex128)
    rows = np.arange(x.size)

    def powers(z):
        # columns e^{-2 pi i m z}, m = -F..F, from one exp and conjugates
        base = np.exp(-2j * np.pi * z)
        cols = np.empty((z.size, 2 * F + 1), dtype=np.complex128)
        cols[:, F] = 1.0
        for m in range(1, F + 1):
            cols[:, F + m] = cols[:, F + m - 1] * base
            cols[:, F - m] = cols[:, F + m].conj()
        return cols

    for _ in range(orbit_len):
        x, t = dithered_step(spec, x, t, rng)
        ix = np.minimum((x * B).astype(np.int64), B - 1)
        it = np.minimum((t * B).astype(np.int64), B - 1)
        counts[rows, ix * B + it] += 1.0
        ex = powers(x)
        et = powers(t)
        feats += (ex[:, :, None] * et[:, None, :]).reshape(x.size, -1)
    return counts / orbit_len, feats / orbit_len


def _cluster_histograms(hists: np.ndarray, tol: float):
    """Greedy-leader clustering in L1, followed by a mean-refinement pass.

    Returns (labels, means): labels[i] = cluster of cell i or -1, means in
    first-encounter order.  Clusters below MIN_CLUSTER_FRACTION dissolve.
    """
    n = len(hists)
    leaders: list[np.ndarray] = []
    assign = np.empty(n, dtype=np.int64)
    for i, row in enumerate(hists):
        best, best_d = -1, tol
        for c, lead in enumerate(leaders):
            d = float(np.abs(row - lead).sum())
            if d < best_d:
                best, best_d = c, d
        if best < 0:
            leaders.append(row)
            best = len(leaders) - 1
        assign[i] = best
    means = [hists[assign == c].mean(axis=0) for c in range(len(leaders))]

    # merge means that drifted within half the threshold of each other
    merged = True
    while merged and len(means) > 1:
        merged = False
        for a in range(len(means)):
            for b in range(a + 1, len(means)):
                if np.abs(means[a] - means[b]).sum() < 0.5 * tol:
                    sel = np.isin(assign, (a, b))
                    means[a] = hists[sel].mean(axis=0)
                    del means[b]
                    assign[assign == b] = a
                    assign[assign > b] -= 1
                    merged = True
                    break
            if merged:
                break

    dist = np.stack([np.abs(hists - m).sum(axis=1) for m in means], axis=1)
    labels = np.where(dist.min(axis=1) < tol, dist.argmin(axis=1), -1)
    keep = []
    floor = max(2, int(MIN_CLUSTER_FRACTION * n))
    for c in range(len(means)):
        if int((labels == c).sum()) >= floor:
            keep.append(c)
    remap = {c: k for k, c in enumerate(keep)}
    labels = np.array([remap.get(int(l), -1) for l in labels], dtype=np.int64)
    means = [hists[labels == k].mean(axis=0) for k in range(len(keep))]
    return labels, means


# ---------------------------------------------------------------------------
# The decomposition
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ErgodicDecomposition:
    """Densities, basins and masses of the finitely many components.

    rho[k] integrates to mass[k]; mu[k] = rho[k]/mass[k] is a probability
    density.  rho_raw[k] is the un-clipped unit-eigenspace representative;
    rho[k] equals it up to a cosmetic clip applied only when the ringing
    is below 1e-3 (clipping bigger lobes is self-defeating: re-truncation
    to the mode box restores them, so near-singular components keep their
    eigenspace representative and report the undershoot instead).  biorth
    holds mu_k(rho_m) after rescaling rows to unit diagonal; the raw
    diagonal values are kept in biorth_scale (1 for a density that is
    uniform on its own basin, larger the more it concentrates).
    """

    ell: int
    K: int
    grid: int
    hist_bins: int
    seed: int
    rho: np.ndarray               # (ell, dim) complex, Hermitian rows
    rho_raw: np.ndarray           # (ell, dim) pre-clip eigenspace reps
    mu: np.ndarray                # (ell, dim) probability densities
    basins: np.ndarray            # (grid, grid) int, -1 = unassigned
    mass: np.ndarray              # (ell,)
    ringing: np.ndarray           # (ell,) relative undershoot -min/max
    unit_eigenvalues: np.ndarray  # (ell,) complex
    peripheral_extras: np.ndarray  # near-unit-circle eigenvalues not in cluster
    biorth: np.ndarray            # (ell, ell), unit diagonal
    biorth_scale: np.ndarray      # (ell,) raw mu_k(rho_k)
    unassigned: float

    def to_json_dict(self) -> dict:
        def cvec(vec):
            out = []
            for (m1, m2), val in zip(mode_list(self.K), vec):
                if abs(val) > 1e-12:
                    out.append([int(m1), int(m2), float(val.real),
                                float(val.imag)])
            return out

        flat = self.basins.ravel()
        rle = []
        i = 0
        while i < flat.size:
            j = i
            while j < flat.size and flat[j] == flat[i]:
                j += 1
            rle.append([int(flat[i]), j - i])
            i = j
        return {
            "ell": self.ell,
            "K": self.K,
            "grid": self.grid,
            "hist_bins": self.hist_bins,
            "seed": self.seed,
            "mass": [float(m) for m in self.mass],
            "ringing": [float(r) for r in self.ringing],
            "unit_eigenvalues": [[float(l.real), float(l.imag)]
                                 for l in self.unit_eigenvalues],
            "peripheral_extras": [[float(l.real), float(l.imag)]
                                  for l in self.peripheral_extras],
            "biorthogonality": self.biorth.tolist(),
            "biorthogonality_scale": self.biorth_scale.tolist(),
            "unassigned_fraction": self.unassigned,
            "rho": [cvec(r) for r in self.rho],
            "basins_rle": rle,
        }


def _basin_integrals(dec: ErgodicDecomposition, vec: np.ndarray) -> np.ndarray:
    """m(f 1_{D_j}) by cell-center quadrature, normalized over assigned cells.

    Normalizing by the assigned count (not grid^2) keeps sum_j mass_j = 1
    and the clt_weights cross-check consistent when a few cells (< 1%)
    are unassigned.
    """
    vals = vec_to_grid(vec, dec.K, dec.grid, offset=0.5).real.ravel()
    labels = dec.basins.ravel()
    assigned = labels >= 0
    total = int(assigned.sum())
    out = np.zeros(dec.ell)
    for j in range(dec.ell):
        out[j] = vals[labels == j].sum() / total
    return out


def decompose(spec: MapSpec, spectral: SpectralData, grid: int = 64,
              burn: int = 2048, orbit_len: int = 16384, hist_bins: int = 6,
              seed: int = 0, unit_tol: float = UNIT_CLUSTER_TOL,
              cluster_tol: float = CLUSTER_TOL,
              neg_tol: float = NEG_TOL) -> ErgodicDecomposition:
    """Split the dynamics into its absolutely continuous components.

    spectral must be the nu=0 eigendata with enough eigenvalues to see
    past the peripheral window (count >= peripheral_count + 1).
    """
    if spectral.nu != 0.0:
        raise ValidationError("decomposition needs the untwisted operator")
    K = spectral.K
    if grid <= 2 * K:
        raise ValidationError("grid must resolve the mode box: grid > 2K")

    lam = spectral.eigenvalues
    unit_idx = np.flatnonzero(np.abs(lam - 1.0) <= unit_tol)
    if unit_idx.size == 0:
        raise ValidationError("no eigenvalue near 1; not a transfer matrix?")
    ell = int(unit_idx.size)
    periph = np.flatnonzero(np.abs(lam) > 1.0 - PERIPHERAL_WINDOW)
    if periph.size >= lam.size:
        raise ValidationError(
            "every computed eigenvalue is peripheral; increase count")
    extras = np.array([lam[i] for i in periph if i not in set(unit_idx)],
                      dtype=np.complex128)

    hists, feats = orbit_statistics(spec, grid, burn, orbit_len, hist_bins,
                                    seed)
    labels, means = _cluster_histograms(hists, cluster_tol)
    n_clusters = len(means)
    if n_clusters != ell:
        sizes = [int((labels == c).sum()) for c in range(n_clusters)]
        raise DecompositionInconsistent(ell, n_clusters,
                                        detail=f"cluster sizes {sizes}")
    coverage = float((labels >= 0).mean())
    if coverage < COVERAGE_MIN:
        raise DecompositionInconsistent(
            ell, n_clusters, detail=f"basin coverage {coverage:.4f}")

    counts = np.bincount(labels[labels >= 0], minlength=ell)
    mass = counts / counts.sum()
    labels_grid = labels.reshape(grid, grid)

    # Each cluster's mean feature vector is an unbiased estimate of the
    # low Fourier modes of its physical measure (riddled basins
    # included), so fit each density inside the unit eigenspace to match
    # mass_j * mean-feature_j coefficient-by-coefficient.  The eigenspace
    # restriction is the closed form of the Cesaro limit (1/T) sum M^t;
    # the feature anchoring replaces indicator seeds, which mix the
    # components whenever basins intermingle.
    V = spectral.right_vectors[:, unit_idx]
    basis_cols = []
    for j in range(ell):
        basis_cols.append(realify(V[:, j]))
        basis_cols.append(realify(1j * V[:, j]))
    W = np.stack(basis_cols, axis=1)          # (dim, 2 ell), rank ell
    feat_rows = [mode_to_index(K, int(m1), int(m2))
                 for m1, m2 in mode_list(FEATURE_BAND)]
    design_c = W[feat_rows, :]                # (n_feat, 2 ell) complex
    design = np.vstack([design_c.real, design_c.imag])
    zero = zero_mode_index(K)
    dim = W.shape[0]
    rho_raw = np.empty((ell, dim), dtype=np.complex128)
    rho = np.empty_like(rho_raw)
    ring = np.zeros(ell)
    G_eval = max(128, 4 * K)
    for j in range(ell):
        target_c = mass[j] * feats[labels == j].mean(axis=0)
        target = np.concatenate([target_c.real, target_c.imag])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        proj = realify(W @ coef)
        lead = proj[zero].real
        if lead <= 0:
            raise DecompositionInconsistent(
                ell, n_clusters, detail=f"component {j} has mean {lead:.2e}")
        rho_raw[j] = proj * (mass[j] / lead)

        vals = vec_to_grid(rho_raw[j], K, G_eval).real
        top = float(vals.max())
        ring[j] = max(0.0, -float(vals.min())) / top
        if ring[j] > neg_tol:
            raise DecompositionInconsistent(
                ell, n_clusters,
                detail=(f"density {j} rings to -{ring[j]:.3g} of its peak, "
                        f"beyond neg_tol={neg_tol:g}"))
        vec = rho_raw[j]
        if 0.0 < ring[j] <= NEG_TOL:
            vec = realify(grid_to_vec(np.maximum(vals, 0.0), K))
        rho[j] = vec * (mass[j] / vec[zero].real)
    mu = rho / mass[:, None]

    raw_pair = np.empty((ell, ell))
    for k in range(ell):
        for m in range(ell):
            raw_pair[k, m] = pair_mean(mu[k], rho[m]).real
    scale = np.diag(raw_pair).copy()
    if np.any(scale <= 0):
        raise DecompositionInconsistent(ell, n_clusters,
                                        detail="non-positive pairing diagonal")
    biorth = raw_pair / scale[:, None]

    return ErgodicDecomposition(
        ell=ell, K=K, grid=grid, hist_bins=hist_bins, seed=seed,
        rho=rho, rho_raw=rho_raw, mu=mu, basins=labels_grid.astype(np.int16),
        mass=mass, ringing=ring, unit_eigenvalues=lam[unit_idx],
        peripheral_extras=extras, biorth=biorth, biorth_scale=scale,
        unassigned=1.0 - coverage)


def project(f_vec: np.ndarray, dec: ErgodicDecomposition) -> np.ndarray:
    """Projection onto the invariant densities:

        Pi(f) = sum_j m(f 1_{D_j}) rho_j / mass_j,

    with the basin integrals taken by cell-center quadrature over the
    stored labeling.
    """
    weights = _basin_integrals(dec, f_vec) / dec.mass
    return (weights[:, None] * dec.rho).sum(axis=0)


def clt_weights(dec: ErgodicDecomposition, f_m: np.ndarray,
                tol: float = 1e-3) -> np.ndarray:
    """Component weights c_k = m(rho_k) mu_k(f_m) of the initial density f_m.

    Cross-checked against direct basin-mass quadrature m(f_m 1_{D_k});
    disagreement beyond tol means the decomposition's densities do not
    match its basins (e.g. near-singular components) and raises
    WeightMismatch rather than returning a silently wrong mixture.
    """
    zero = zero_mode_index(dec.K)
    if abs(f_m[zero] - 1.0) > 1e-6:
        raise ValidationError("initial density must have unit mean")
    vals = vec_to_grid(f_m, dec.K, max(128, 4 * dec.K)).real
    if vals.min() < -1e-6:
        raise ValidationError("initial density must be non-negative")
    c = np.array([dec.mass[k] * pair_mean(dec.mu[k], f_m).real
                  for k in range(dec.ell)])
    cross = _basin_integrals(dec, f_m)
    err = float(np.abs(c - cross).max())
    if err > tol:
        raise WeightMismatch(
            f"spectral weights {np.round(c, 6)} vs basin quadrature "
            f"{np.round(cross, 6)} differ by {err:.3g} (tol {tol:g})")
    return c


def acip_correlation_sequence(op: OperatorMatrix, dec: ErgodicDecomposition,
                              k: int, phi_vec: np.ndarray,
                              psi_vec: np.ndarray, n_max: int) -> np.ndarray:
    """corr_j = mu_k(phi . psi o F^j) - mu_k(phi) mu_k(psi), j = 0..n_max.

    Evaluated spectrally: mu_k(phi . psi o F^j) = m(psi . M^j(phi mu_k)).
    """
    if op.nu != 0.0:
        raise ValidationError("correlations use the untwisted operator")
    g = dec.mu[k]
    u = vec_mul(phi_vec, g, dec.K)
    mean_phi = pair_mean(phi_vec, g).real
    mean_psi = pair_mean(psi_vec, g).real
    out = np.empty(n_max + 1)
    for j in range(n_max + 1):
        out[j] = pair_mean(psi_vec, u).real - mean_phi * mean_psi
        if j < n_max:
            u = op.apply(u)
    return out
