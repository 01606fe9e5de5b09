"""Diffusion coefficients and Monte-Carlo limit-theorem verification.

sigma_k^2 is computed along two independent routes -- a truncated
Green-Kubo sum whose correlations come from powers of the transfer
operator applied to tau*rho_k, and the curvature of the leading twisted
eigenvalue branches -- and the two must agree.  The Monte-Carlo side
samples starts from an explicit initial density, classifies each start
by its basin, subtracts the per-basin mean, and compares Birkhoff-sum
statistics against the c_k-weighted Gaussian mixture: Kolmogorov-
Smirnov distance for the CLT, a log-log rate fit for Berry-Esseen, and
smoothed / interval counts for the local limit theorem.

All Gaussian factors are probability-normalized: the mixture CDF is
sum_k c_k Phi(z / sigma_k) and the LLT comparison density is
(1/sigma_k) n(z / (sigma_k sqrt(n))) with n the standard normal pdf.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .decomposition import ErgodicDecomposition, acip_correlation_sequence, \
    clt_weights, pair_mean
from .errors import DegenerateComponent, NonDecayingCorrelations, \
    ValidationError
from .fourier import CoeffTable
from .maps import MapSpec, Observable, dithered_step
from .spectral import assemble, vec_from_table, zero_mode_index

GK_J_DEFAULT = 32
GK_J_MAX = 64
SIGMA_FLOOR = 0.05        # below this, a component is treated as degenerate
                          # (coboundary noise floor sigma^2 ~ 1e-3 sits under it)
MC_CHUNK = 200_000        # walkers per substream; fixed so results do not
                          # depend on available memory
_SQRT2PI = np.sqrt(2.0 * np.pi)


def _npdf(y):
    return np.exp(-0.5 * np.square(y)) / _SQRT2PI


# ---------------------------------------------------------------------------
# Initial measures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitialMeasure:
    """Absolutely continuous initial distribution dm = f_m d(Lebesgue).

    f_m is a real trigonometric density given by its coefficient table;
    sup_bound must dominate max f_m (it is the rejection-sampling
    envelope, so a loose bound only costs acceptance rate).
    """

    f_m: CoeffTable
    sup_bound: float = 1.0

    def validate(self, grid: int = 128) -> None:
        hit = np.where((self.f_m.modes == 0).all(axis=1))[0]
        mean = float(self.f_m.values[hit[0]].real) if hit.size else 0.0
        if abs(mean - 1.0) > 1e-8:
            raise ValidationError("initial density must have mean 1")
        c = (np.arange(grid) + 0.5) / grid
        X, T = np.meshgrid(c, c, indexing="ij")
        vals = self.f_m.eval(X, T)
        if vals.min() < -1e-9:
            raise ValidationError(
                f"initial density is negative (min {vals.min():.3e})")
        if vals.max() > self.sup_bound + 1e-9:
            raise ValidationError(
                f"sup_bound {self.sup_bound} < max f_m = {vals.max():.6f}")

    @classmethod
    def uniform(cls) -> "InitialMeasure":
        return cls(f_m=CoeffTable.from_dict({(0, 0): 1.0}), sup_bound=1.0)


def sample_initial(m: InitialMeasure, N: int, seed: int) -> np.ndarray:
    """N i.i.d. starts from dm = f_m d(Lebesgue) by rejection sampling.

    Deterministic for a fixed seed: proposals are drawn in fixed-size
    batches from one generator stream.
    """
    m.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    ev = m.f_m.compiled()
    out = np.empty((N, 2))
    have = 0
    batch = max(4096, int(1.2 * N * m.sup_bound))
    while have < N:
        pts = rng.random((batch, 2))
        u = rng.random(batch)
        keep = u * m.sup_bound <= ev.eval(pts[:, 0], pts[:, 1])
        take = pts[keep][:N - have]
        out[have:have + len(take)] = take
        have += len(take)
    return out


# ---------------------------------------------------------------------------
# Centering and diffusion coefficients
# ---------------------------------------------------------------------------

def center(obs: Observable, dec: ErgodicDecomposition) -> Observable:
    """Per-component means mu_k(tau), attached as centering offsets.

    The returned observable carries centered_offsets[k] = mu_k(tau);
    Birkhoff sums over orbits started in basin k subtract offsets[k]
    per step, so the effective observable has mu_k mean zero on every
    component.
    """
    tau = vec_from_table(obs.coeffs, dec.K)
    offsets = tuple(float(pair_mean(dec.mu[k], tau).real)
                    for k in range(dec.ell))
    return Observable(coeffs=obs.coeffs, centered_offsets=offsets)


def _centered_vec(obs: Observable, dec: ErgodicDecomposition,
                  k: int) -> np.ndarray:
    tau = vec_from_table(obs.coeffs, dec.K)
    if obs.centered_offsets is not None:
        off = obs.centered_offsets[k]
    else:
        off = pair_mean(dec.mu[k], tau).real
    tau[zero_mode_index(dec.K)] -= off
    return tau


def green_kubo(spec: MapSpec, obs: Observable, dec: ErgodicDecomposition,
               k: int, J: int = GK_J_DEFAULT):
    """Truncated Green-Kubo diffusion coefficient on component k.

    sigma^2 = mu_k(tau~^2) + 2 sum_{j=1}^J mu_k(tau~ . tau~ o F^j) with
    tau~ centered on basin k and every correlation computed spectrally
    (j-th term = pairing of tau~ against M^j(tau~ rho_k) / mass_k).
    Returns (sigma2, tail_estimate) where the tail is the geometric
    continuation |C_J| r / (1 - r) of the fitted decay ratio r.
    """
    if not 0 <= k < dec.ell:
        raise ValidationError(f"component index {k} out of range")
    if not 1 <= J <= GK_J_MAX:
        raise ValidationError(f"need 1 <= J <= {GK_J_MAX}")
    op = assemble(spec, None, nu=0.0, K=dec.K)
    tau = _centered_vec(obs, dec, k)
    corr = acip_correlation_sequence(op, dec, k, tau, tau, J).real
    sigma2 = float(corr[0] + 2.0 * corr[1:].sum())

    # decay audit: moduli past the transient must shrink geometrically,
    # otherwise the truncation (and the limit theorem itself) is unsound
    tiny = 1e-13 * max(abs(corr[0]), 1e-30)
    mods = np.abs(corr[5:])
    live = mods > tiny
    tail = 0.0
    if live.sum() >= 3:
        js = np.arange(5, J + 1)[live]
        slope = np.polyfit(js, np.log(mods[live]), 1)[0]
        r = float(np.exp(slope))
        if r >= 1.0 - 1e-9:
            raise NonDecayingCorrelations(
                f"component {k}: correlation ratio {r:.4f} >= 1 past j=5")
        if mods[-1] > tiny and live[-1]:
            tail = float(2.0 * mods[-1] * r / (1.0 - r))
    return sigma2, tail


def twisted_sigma(curve, dec: ErgodicDecomposition,
                  obs: Observable) -> np.ndarray:
    """Per-component sigma^2 from a twisted eigenvalue curve.

    Branches are matched to decomposition components by their first
    derivative mu_k(tau) (the centering offsets); with a single
    component this is the identity.
    """
    if curve.branches.shape[0] != dec.ell:
        raise ValidationError("curve was continued with a different ell")
    offsets = (obs.centered_offsets if obs.centered_offsets is not None
               else center(obs, dec).centered_offsets)
    order = np.full(dec.ell, -1, dtype=int)
    taken = set()
    for k in range(dec.ell):
        costs = [abs(curve.mu_tau[b] - offsets[k]) if b not in taken
                 else np.inf for b in range(dec.ell)]
        b = int(np.argmin(costs))
        order[k] = b
        taken.add(b)
    return np.asarray(curve.sigma2, dtype=np.float64)[order]


# ---------------------------------------------------------------------------
# Monte-Carlo engine
# ---------------------------------------------------------------------------

def classify_starts(dec: ErgodicDecomposition,
                    starts: np.ndarray) -> np.ndarray:
    """Basin label of each start (-1 where the cell is unassigned)."""
    g = dec.grid
    ix = np.minimum((starts[:, 0] * g).astype(np.int64), g - 1)
    it = np.minimum((starts[:, 1] * g).astype(np.int64), g - 1)
    return dec.basins[ix, it].astype(np.int64)


def _tau_eval(obs):
    if isinstance(obs, Observable):
        return obs.coeffs.compiled().eval
    if callable(obs):
        return obs
    raise ValidationError("observable must be an Observable or a callable")


def birkhoff_snapshots(spec: MapSpec, obs, starts: np.ndarray,
                       offsets_per_walker: np.ndarray, n_list,
                       seed: int) -> np.ndarray:
    """Centered Birkhoff sums tau_n for every start, at each n in n_list.

    One dithered orbit per walker; sums are recorded at the requested
    horizons of a single pass (n_list need not be contiguous).  Walkers
    are processed in fixed-size chunks with independently spawned RNG
    substreams, so results are deterministic for a fixed seed and
    independent of chunking concerns.  Returns (len(n_list), N).
    """
    n_list = sorted(int(n) for n in n_list)
    if n_list[0] <= 0:
        raise ValidationError("horizons must be positive")
    ev = _tau_eval(obs)
    N = len(starts)
    out = np.empty((len(n_list), N))
    n_chunks = (N + MC_CHUNK - 1) // MC_CHUNK
    streams = np.random.SeedSequence(seed).spawn(n_chunks)
    for ci in range(n_chunks):
        sl = slice(ci * MC_CHUNK, min((ci + 1) * MC_CHUNK, N))
        rng = np.random.default_rng(streams[ci])
        x = starts[sl, 0].copy()
        t = starts[sl, 1].copy()
        off = offsets_per_walker[sl]
        acc = np.zeros(x.size)
        done = 0
        for row, n in enumerate(n_list):
            for _ in range(n - done):
                acc += ev(x, t)
                x, t = dithered_step(spec, x, t, rng)
            done = n
            out[row, sl] = acc - n * off
    return out


def _per_walker_offsets(obs: Observable, labels: np.ndarray,
                        c: np.ndarray) -> np.ndarray:
    """Centering offset for each walker; unassigned starts get the
    c-weighted mean offset (they are < 1% by the decomposition gate)."""
    offs = np.asarray(obs.centered_offsets, dtype=np.float64)
    out = np.where(labels >= 0, offs[np.maximum(labels, 0)],
                   float(c @ offs))
    return out


def _check_sigma(sigma, ell):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (ell,):
        raise ValidationError(f"need one sigma per component ({ell})")
    for k, s in enumerate(sigma):
        if s < SIGMA_FLOOR:
            raise DegenerateComponent(k, float(s * s))
    return sigma


def mixture_cdf(z, c, sigma):
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros_like(z)
    for ck, sk in zip(c, sigma):
        out += ck * ndtr(z / sk)
    return out


def ks_distance(samples: np.ndarray, c, sigma) -> float:
    s = np.sort(samples)
    F = mixture_cdf(s, c, sigma)
    i = np.arange(1, len(s) + 1)
    return float(np.maximum(np.abs(i / len(s) - F),
                            np.abs((i - 1) / len(s) - F)).max())


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CLTResult:
    n_list: tuple
    ks: np.ndarray            # per-n KS distance
    ks_stderr: float          # 1/(2 sqrt N): worst-case CDF band
    c: np.ndarray
    sigma: np.ndarray
    var_over_n: np.ndarray    # per-n Var(tau_n)/n
    basin_fractions: np.ndarray
    N: int
    seed: int

    def ks_per_n(self) -> dict:
        return {int(n): float(d) for n, d in zip(self.n_list, self.ks)}


def clt_experiment(spec: MapSpec, obs: Observable, m: InitialMeasure,
                   n_list, N: int, dec: ErgodicDecomposition,
                   sigma, seed: int) -> CLTResult:
    """Empirical CDF of tau_n / sqrt(n) against the Gaussian mixture.

    Starts are sampled from m, classified by basin, and centered with
    the per-basin offsets; all horizons in n_list are recorded from the
    same orbit stream.
    """
    if obs.centered_offsets is None:
        raise ValidationError("observable must be centered first")
    sigma = _check_sigma(sigma, dec.ell)
    n_list = tuple(sorted(int(n) for n in n_list))
    starts = sample_initial(m, N, seed)
    labels = classify_starts(dec, starts)
    c = clt_weights(dec, vec_from_table(m.f_m, dec.K))
    sums = birkhoff_snapshots(spec, obs, starts,
                              _per_walker_offsets(obs, labels, c),
                              n_list, seed + 1)
    ks = np.empty(len(n_list))
    var = np.empty(len(n_list))
    for row, n in enumerate(n_list):
        scaled = sums[row] / np.sqrt(n)
        ks[row] = ks_distance(scaled, c, sigma)
        var[row] = scaled.var()
    frac = np.array([(labels == k).mean() for k in range(dec.ell)])
    assigned = frac.sum()
    if assigned > 0:
        frac = frac / assigned
    return CLTResult(n_list=n_list, ks=ks, ks_stderr=0.5 / np.sqrt(N),
                     c=c, sigma=sigma, var_over_n=var,
                     basin_fractions=frac, N=N, seed=seed)


@dataclass(frozen=True)
class BEFit:
    C: float
    exponent: float
    C_stderr: float
    exponent_stderr: float


def berry_esseen_fit(ks_per_n: dict) -> BEFit:
    """Least-squares fit of log D(n) = log C - e log n.

    Needs >= 5 horizons (geometrically spaced in practice); standard
    errors come from the fit covariance.
    """
    if len(ks_per_n) < 5:
        raise ValidationError("rate fit needs at least 5 horizons")
    ns = np.array(sorted(ks_per_n), dtype=np.float64)
    ds = np.array([ks_per_n[int(n)] for n in ns], dtype=np.float64)
    if np.any(ds <= 0):
        raise ValidationError("KS distances must be positive to fit a rate")
    coef, cov = np.polyfit(np.log(ns), np.log(ds), 1, cov=True)
    slope, intercept = coef
    return BEFit(C=float(np.exp(intercept)), exponent=float(-slope),
                 C_stderr=float(np.exp(intercept) * np.sqrt(cov[1, 1])),
                 exponent_stderr=float(np.sqrt(cov[0, 0])))


def triangle_bump(width: float):
    """Tent of full base width w and height 1: g(u) = (1 - 2|u|/w)_+.

    Lebesgue integral w/2; continuous, compactly supported, so it is an
    admissible smoothing kernel for the local limit comparison."""
    if width <= 0:
        raise ValidationError("bump width must be positive")

    def g(u):
        return np.maximum(0.0, 1.0 - 2.0 * np.abs(u) / width)

    g.width = width
    g.lebesgue = width / 2.0
    return g


@dataclass(frozen=True)
class LLTResult:
    z_grid: np.ndarray
    lhs: np.ndarray           # sqrt(n) E_m g(tau_n - z)
    rhs: np.ndarray           # Leb(g) sum_k c_k (1/sigma_k) npdf(z/(sigma_k sqrt n))
    stderr: np.ndarray        # Monte-Carlo band of lhs
    sup_error: float
    n: int
    N: int


def llt_experiment(spec: MapSpec, obs, m: InitialMeasure, g_width: float,
                   z_grid, n: int, N: int, dec: ErgodicDecomposition,
                   sigma, seed: int) -> LLTResult:
    """Smoothed local limit comparison over a grid of offsets z.

    lhs(z) = sqrt(n) * mean g(tau_n - z) with g the triangle bump;
    rhs(z) = Leb(g) sum_k c_k (1/sigma_k) npdf(z / (sigma_k sqrt n)).
    The observable may be a callable (for lattice-valued negative
    controls that have no finite Fourier table); callables are taken
    as already centered.
    """
    sigma = _check_sigma(sigma, dec.ell)
    if min(sigma) * np.sqrt(n) < 10.0:
        raise ValidationError("n too small: need sigma sqrt(n) >= 10")
    z_grid = np.asarray(z_grid, dtype=np.float64)
    g = triangle_bump(g_width)
    starts = sample_initial(m, N, seed)
    labels = classify_starts(dec, starts)
    c = clt_weights(dec, vec_from_table(m.f_m, dec.K))
    if isinstance(obs, Observable):
        if obs.centered_offsets is None:
            raise ValidationError("observable must be centered first")
        offsets = _per_walker_offsets(obs, labels, c)
    else:
        offsets = np.zeros(N)
    sums = birkhoff_snapshots(spec, obs, starts, offsets, [n], seed + 1)[0]
    lhs = np.empty(len(z_grid))
    err = np.empty(len(z_grid))
    root = np.sqrt(n)
    for i, z in enumerate(z_grid):
        vals = g(sums - z)
        lhs[i] = root * vals.mean()
        err[i] = root * vals.std() / np.sqrt(N)
    rhs = np.zeros(len(z_grid))
    for ck, sk in zip(c, sigma):
        rhs += ck * _npdf(z_grid / (sk * root)) / sk
    rhs *= g.lebesgue
    return LLTResult(z_grid=z_grid, lhs=lhs, rhs=rhs, stderr=err,
                     sup_error=float(np.abs(lhs - rhs).max()), n=n, N=N)


@dataclass(frozen=True)
class IntervalLLT:
    prob_emp: float
    prob_mix: float
    deviation: float          # |prob_emp - prob_mix|
    bound: float              # max_k npdf(a/sigma_k) / n^(1/2-1/delta) + (b-a)/sqrt(n)
    stderr: float             # binomial sqrt(p(1-p)/N)


def interval_llt(spec: MapSpec, obs: Observable, m: InitialMeasure,
                 a: float, b: float, n: int, N: int, delta: float,
                 dec: ErgodicDecomposition, sigma, seed: int) -> IntervalLLT:
    """Interval version: P_m(tau_n / sqrt(n) in [a,b]) by direct counting
    against the mixture probability, with the theoretical envelope."""
    if not 0 < b - a < 1:
        raise ValidationError("need 0 < b - a < 1")
    if delta <= 2:
        raise ValidationError("need delta > 2")
    if obs.centered_offsets is None:
        raise ValidationError("observable must be centered first")
    sigma = _check_sigma(sigma, dec.ell)
    starts = sample_initial(m, N, seed)
    labels = classify_starts(dec, starts)
    c = clt_weights(dec, vec_from_table(m.f_m, dec.K))
    sums = birkhoff_snapshots(spec, obs, starts,
                              _per_walker_offsets(obs, labels, c),
                              [n], seed + 1)[0] / np.sqrt(n)
    p = float(((sums >= a) & (sums <= b)).mean())
    pm = float(mixture_cdf(np.array([b]), c, sigma)[0]
               - mixture_cdf(np.array([a]), c, sigma)[0])
    bound = float(max(_npdf(a / sk) for sk in sigma) / n ** (0.5 - 1.0 / delta)
                  + (b - a) / np.sqrt(n))
    return IntervalLLT(prob_emp=p, prob_mix=pm, deviation=abs(p - pm),
                       bound=bound, stderr=float(np.sqrt(p * (1 - p) / N)))


# ---------------------------------------------------------------------------
# Aggregate report
# ---------------------------------------------------------------------------

@dataclass
class LimitLawReport:
    """Everything the limit-law stage produced, JSON-ready.

    sigma carries both estimation routes and their absolute difference;
    ks / llt entries are keyed by horizon n.
    """

    sigma_green_kubo: list
    sigma_twisted: list
    sigma_diff: list
    gk_tails: list
    c: list
    ks: dict
    ks_stderr: float
    be_fit: BEFit | None
    llt_sup_error: dict
    interval: list
    N: int
    seed: int
    notes: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "sigma_green_kubo": [float(v) for v in self.sigma_green_kubo],
            "sigma_twisted": [float(v) for v in self.sigma_twisted],
            "sigma_diff": [float(v) for v in self.sigma_diff],
            "gk_tails": [float(v) for v in self.gk_tails],
            "c": [float(v) for v in self.c],
            "ks": {str(n): float(d) for n, d in self.ks.items()},
            "ks_stderr": float(self.ks_stderr),
            "be_fit": None if self.be_fit is None else {
                "C": self.be_fit.C, "exponent": self.be_fit.exponent,
                "C_stderr": self.be_fit.C_stderr,
                "exponent_stderr": self.be_fit.exponent_stderr,
            },
            "llt_sup_error": {str(n): float(v)
                              for n, v in self.llt_sup_error.items()},
            "interval": list(self.interval),
            "N": int(self.N),
            "seed": int(self.seed),
            "notes": list(self.notes),
        }
