"""Command-line front end.

Subcommands mirror the library layers:

    check      assumption audit (invertibility, cones, pinching, order sums)
    spectrum   assemble the weighted operator and report leading eigenvalues
    decompose  ergodic components: densities, basins, masses
    diffusion  per-component sigma^2 by Green-Kubo and the twisted curve
    clt        empirical CDF of scaled Birkhoff sums against the mixture
    llt        smoothed local limit comparison on a grid of offsets
    full       run every stage from a preset or an experiment config

Exit codes: 0 success, 2 invalid input, 3 numerical diagnostic raised.
`full` also exits 3 when any stage recorded a diagnostic in the bundle.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

import numpy as np

from .config import ExperimentConfig, load_config
from .decomposition import decompose
from .errors import NumericalDiagnostic, SvphError, ValidationError
from .fourier import CoeffTable
from .hyperbolicity import ConeParams, a6_rate, check_a1_a5, check_cones
from .limit_laws import (
    InitialMeasure,
    center,
    clt_experiment,
    green_kubo,
    llt_experiment,
    twisted_sigma,
)
from .maps import MapSpec, Observable
from .pipeline import run_full, summary_lines, write_bundle
from .presets import PRESET_NAMES, load_preset
from .spectral import assemble, spectrum, twisted_curve, zero_mode_index


def _ints(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}")


def _map_from(path: str) -> MapSpec:
    return MapSpec.from_json_dict(_load_json(path))


def _obs_from(path: str | None) -> Observable | None:
    if path is None:
        return None
    return Observable.from_json_dict(_load_json(path))


def _init_from(arg: str) -> InitialMeasure:
    if arg == "uniform":
        return InitialMeasure.uniform()
    doc = _load_json(arg)
    m = InitialMeasure(f_m=CoeffTable.from_rows(doc.get("coeffs", [])),
                       sup_bound=float(doc.get("sup_bound", 1.0)))
    m.validate()
    return m


def _dump(doc: dict, path: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        with open(path, "w") as fh:
            fh.write(text + "\n")


def _prepare(args):
    """spec file -> (spec, dec, centered obs, sigma): the shared chain
    behind diffusion/clt/llt."""
    spec = _map_from(args.config)
    obs = _obs_from(args.obs)
    if obs is None:
        raise ValidationError("this subcommand needs --obs")
    op = assemble(spec, None, nu=0.0, K=args.K, Q=args.Q)
    data = spectrum(op, count=args.count, want_left=True)
    dec = decompose(spec, data, grid=args.grid, burn=args.burn,
                    orbit_len=args.orbit_len, seed=args.seed,
                    neg_tol=args.neg_tol)
    obs = center(obs, dec)
    gk = [green_kubo(spec, obs, dec, k, J=args.J)
          for k in range(dec.ell)]
    sigma = np.sqrt(np.maximum([g[0] for g in gk], 0.0))
    return spec, dec, obs, sigma, gk


def _decomposition_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--K", type=int, default=12,
                   help="mode cutoff per axis (default 12)")
    p.add_argument("--Q", type=int, default=None,
                   help="quadrature grid, power of two > 2K")
    p.add_argument("--count", type=int, default=8,
                   help="eigenvalues to resolve (default 8)")
    p.add_argument("--grid", type=int, default=64,
                   help="basin grid resolution (default 64)")
    p.add_argument("--burn", type=int, default=2048)
    p.add_argument("--orbit-len", type=int, default=16384)
    p.add_argument("--neg-tol", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_check(args) -> int:
    spec = _map_from(args.config)
    cones = ConeParams(chi_u=args.chi_u, chi_c=args.chi_c)
    a15 = check_a1_a5(spec, grid=args.grid)
    cone_rep = check_cones(spec, cones, grid=args.grid)
    trans = a6_rate(spec, _ints(args.orders), cones,
                    samples=args.samples, seed=args.seed)
    doc = {
        "a1_a5": dataclasses.asdict(a15),
        "cones": cone_rep.to_json_dict(),
        "transversality": trans.to_json_dict(),
    }
    _dump(doc, args.out)
    print(f"invertible: {a15.a1_ok}  dominated: {a15.a5_ok}  "
          f"iota_star: {cone_rep.iota_star:.4f}  "
          f"pinching: {cone_rep.pinching_margin:.4f}  "
          f"order sums decaying: {trans.a6_ok}")
    return 0


def _cmd_spectrum(args) -> int:
    spec = _map_from(args.config)
    obs = _obs_from(args.obs)
    op = assemble(spec, obs, nu=args.nu, K=args.K, Q=args.Q)
    data = spectrum(op, count=args.count, want_left=True)
    z = zero_mode_index(args.K)
    row = np.array(op.entries[z])
    row[z] -= 1.0
    doc = data.to_json_dict()
    doc["mass_row_residual"] = float(np.abs(row).max())
    _dump(doc, args.out)
    mods = np.abs(data.eigenvalues)
    print(f"K={args.K} nu={args.nu}: leading moduli "
          f"{np.array2string(mods[:min(6, len(mods))], precision=6)}  "
          f"gap={data.gap:.6f}")
    return 0


def _cmd_decompose(args) -> int:
    spec = _map_from(args.config)
    op = assemble(spec, None, nu=0.0, K=args.K, Q=args.Q)
    data = spectrum(op, count=args.count, want_left=True)
    dec = decompose(spec, data, grid=args.grid, burn=args.burn,
                    orbit_len=args.orbit_len, seed=args.seed,
                    neg_tol=args.neg_tol)
    _dump(dec.to_json_dict(), args.out)
    print(f"ell={dec.ell}  masses={np.array2string(dec.mass, precision=4)}  "
          f"unassigned={dec.unassigned:.4f}")
    return 0


def _cmd_diffusion(args) -> int:
    spec, dec, obs, sigma, gk = _prepare(args)
    curve = twisted_curve(spec, obs, K=args.K, Q=args.Q, ell=dec.ell)
    tw = twisted_sigma(curve, dec, obs)
    doc = {
        "sigma2_green_kubo": [float(g[0]) for g in gk],
        "gk_tails": [float(g[1]) for g in gk],
        "sigma2_twisted": [float(v) for v in tw],
        "centered_offsets": [float(v) for v in obs.centered_offsets],
    }
    _dump(doc, args.out)
    for k in range(dec.ell):
        print(f"component {k}: sigma2_gk={gk[k][0]:.6f} "
              f"(tail {gk[k][1]:.2e})  sigma2_twisted={tw[k]:.6f}")
    return 0


def _cmd_clt(args) -> int:
    spec, dec, obs, sigma, _ = _prepare(args)
    m = _init_from(args.init)
    res = clt_experiment(spec, obs, m, _ints(args.n), args.N, dec,
                         sigma, args.seed)
    header = (["n", "KS", "KS_stderr"]
              + [f"sigma_{k}" for k in range(dec.ell)]
              + [f"c_{k}" for k in range(dec.ell)])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i, n in enumerate(res.n_list):
            w.writerow([n, repr(float(res.ks[i])), repr(float(res.ks_stderr))]
                       + [repr(float(s)) for s in res.sigma]
                       + [repr(float(v)) for v in res.c])
    for i, n in enumerate(res.n_list):
        print(f"n={n}: KS={res.ks[i]:.5f} (stderr {res.ks_stderr:.5f})")
    return 0


def _cmd_llt(args) -> int:
    spec, dec, obs, sigma, _ = _prepare(args)
    m = _init_from(args.init)
    res = llt_experiment(spec, obs, m, args.width, _floats(args.z),
                         args.n, args.N, dec, sigma, args.seed)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "lhs", "rhs", "stderr"])
        for i in range(len(res.z_grid)):
            w.writerow([repr(float(res.z_grid[i])),
                        repr(float(res.lhs[i])), repr(float(res.rhs[i])),
                        repr(float(res.stderr[i]))])
    print(f"n={res.n} N={res.N}: sup |lhs - rhs| = {res.sup_error:.5f}")
    return 0


def _cmd_full(args) -> int:
    if (args.preset is None) == (args.config is None):
        raise ValidationError("full needs exactly one of --preset/--config")
    cfg = (load_preset(args.preset) if args.preset is not None
           else load_config(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    bundle = run_full(cfg)
    paths = write_bundle(bundle, args.out_dir, cfg)
    for line in summary_lines(bundle):
        print(line)
    for p in paths:
        print(f"wrote {p}")
    return 3 if bundle["errors"] else 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="svph",
        description="spectral and Monte-Carlo limit-law toolkit for "
                    "expanding skew maps of the torus")
    sub = top.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="assumption audit for a map")
    p.add_argument("--config", required=True, help="map JSON")
    p.add_argument("--chi-u", type=float, default=0.75)
    p.add_argument("--chi-c", type=float, default=1.0)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--orders", default="2,4,6,8",
                   help="comma list of orders for the transversality sums")
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    p.set_defaults(fn=_cmd_check)

    p = sub.add_parser("spectrum", help="leading eigenvalues of the "
                                        "weighted operator")
    p.add_argument("--config", required=True, help="map JSON")
    p.add_argument("--obs", default=None,
                   help="observable JSON (needed when nu != 0)")
    p.add_argument("--nu", type=float, default=0.0)
    p.add_argument("--K", type=int, default=12)
    p.add_argument("--Q", type=int, default=None)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_spectrum)

    p = sub.add_parser("decompose", help="ergodic components and basins")
    p.add_argument("--config", required=True, help="map JSON")
    _decomposition_flags(p)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_decompose)

    p = sub.add_parser("diffusion", help="sigma^2 per component, both routes")
    p.add_argument("--config", required=True, help="map JSON")
    p.add_argument("--obs", required=True, help="observable JSON")
    _decomposition_flags(p)
    p.add_argument("--J", type=int, default=32,
                   help="correlation horizon (default 32)")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_diffusion)

    p = sub.add_parser("clt", help="scaled Birkhoff sums against the "
                                   "Gaussian mixture")
    p.add_argument("--config", required=True, help="map JSON")
    p.add_argument("--obs", required=True, help="observable JSON")
    _decomposition_flags(p)
    p.add_argument("--J", type=int, default=32)
    p.add_argument("--init", default="uniform",
                   help='"uniform" or a density JSON')
    p.add_argument("--n", default="64,256,1024,4096",
                   help="comma list of horizons")
    p.add_argument("--N", type=int, default=100_000)
    p.add_argument("--out", default="clt.csv")
    p.set_defaults(fn=_cmd_clt)

    p = sub.add_parser("llt", help="smoothed local limit comparison")
    p.add_argument("--config", required=True, help="map JSON")
    p.add_argument("--obs", required=True, help="observable JSON")
    _decomposition_flags(p)
    p.add_argument("--J", type=int, default=32)
    p.add_argument("--init", default="uniform")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--N", type=int, default=1_000_000)
    p.add_argument("--width", type=float, default=1.0,
                   help="triangle bump width")
    p.add_argument("--z", default="-1.0,-0.5,0.0,0.5,1.0",
                   help="comma list of offsets (use --z=-1,0,1 for "
                        "negative leads)")
    p.add_argument("--out", default="llt.csv")
    p.set_defaults(fn=_cmd_llt)

    p = sub.add_parser("full", help="every stage, report bundle + tables")
    p.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(fn=_cmd_full)

    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalDiagnostic as exc:
        print(f"diagnostic: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except SvphError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
