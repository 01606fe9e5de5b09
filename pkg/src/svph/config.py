"""Experiment configuration: one JSON document drives the full pipeline.

The document has named sections (map, observable, cones, spectral,
decomposition, montecarlo, llt, output); map and observable may be given
inline or as a path to a separate JSON file, resolved relative to the
config file.  Validation collects every offending field before raising,
so a malformed config reports all its problems at once.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .hyperbolicity import ConeParams
from .maps import MapSpec, Observable


@dataclass
class ExperimentConfig:
    map_spec: MapSpec
    observable: Observable
    cones: ConeParams
    K: int = 12
    Q: int | None = None
    count: int = 8
    grid: int = 48
    burn: int = 128
    orbit_len: int = 8192
    neg_tol: float = 1e-3
    gk_J: int = 32
    n_list: tuple = (64, 256, 1024, 4096)
    N: int = 20000
    seed: int = 7
    g_width: float = 1.0
    z_grid: tuple = tuple(np.linspace(-40.0, 40.0, 9))
    delta: float = 4.0
    llt_N: int | None = None          # defaults to N
    out_json: str = "report.json"
    out_clt_csv: str = "clt.csv"
    out_llt_csv: str = "llt.csv"
    name: str = ""

    def validate(self) -> None:
        bad = []
        counts = {"spectral.K": self.K, "spectral.count": self.count,
                  "decomposition.grid": self.grid,
                  "decomposition.orbit_len": self.orbit_len,
                  "montecarlo.N": self.N}
        for fieldname, value in counts.items():
            if int(value) <= 0:
                bad.append(f"{fieldname} must be positive (got {value})")
        if self.burn < 0:
            bad.append(f"decomposition.burn must be >= 0 (got {self.burn})")
        if self.Q is not None and self.Q <= 2 * self.K:
            bad.append(f"spectral.Q must exceed 2K (got {self.Q})")
        if not 1 <= self.gk_J <= 64:
            bad.append(f"montecarlo.gk_J must be in [1, 64] (got {self.gk_J})")
        ns = list(self.n_list)
        if len(ns) == 0 or any(int(n) <= 0 for n in ns):
            bad.append("montecarlo.n_list entries must be positive")
        elif any(b <= a for a, b in zip(ns, ns[1:])):
            bad.append(f"montecarlo.n_list must be increasing (got {ns})")
        if self.g_width <= 0:
            bad.append(f"llt.g_width must be positive (got {self.g_width})")
        if len(self.z_grid) == 0:
            bad.append("llt.z_grid must be nonempty")
        if self.delta <= 2:
            bad.append(f"llt.delta must exceed 2 (got {self.delta})")
        if self.llt_N is not None and self.llt_N <= 0:
            bad.append(f"llt.N must be positive (got {self.llt_N})")
        if bad:
            raise ValidationError("invalid config: " + "; ".join(bad))

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "map": self.map_spec.to_json_dict(),
            "observable": self.observable.to_json_dict(),
            "cones": {"chi_u": self.cones.chi_u, "chi_c": self.cones.chi_c},
            "spectral": {"K": self.K, "Q": self.Q, "count": self.count},
            "decomposition": {"grid": self.grid, "burn": self.burn,
                              "orbit_len": self.orbit_len,
                              "neg_tol": self.neg_tol},
            "montecarlo": {"n_list": list(self.n_list), "N": self.N,
                           "seed": self.seed, "gk_J": self.gk_J},
            "llt": {"g_width": self.g_width,
                    "z_grid": [float(z) for z in self.z_grid],
                    "delta": self.delta, "N": self.llt_N},
            "output": {"json": self.out_json, "clt_csv": self.out_clt_csv,
                       "llt_csv": self.out_llt_csv},
        }


def _resolve(section, base_dir: str, label: str, loader):
    """Inline dict -> loader(dict); string -> loader(json read from file)."""
    if isinstance(section, dict):
        return loader(section)
    if isinstance(section, str):
        path = section if os.path.isabs(section) else \
            os.path.join(base_dir, section)
        if not os.path.exists(path):
            raise ValidationError(f"{label}: referenced file {path} not found")
        with open(path) as fh:
            return loader(json.load(fh))
    raise ValidationError(f"{label} must be an inline object or a file path")


def config_from_json_dict(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    if "map" not in doc:
        raise ValidationError("config needs a 'map' section")
    spec = _resolve(doc["map"], base_dir, "map", MapSpec.from_json_dict)
    obs = _resolve(doc.get("observable", {"coeffs": [[1, 0, 0.5, 0.0]]}),
                   base_dir, "observable", Observable.from_json_dict)
    cone_doc = doc.get("cones", {})
    cones = ConeParams(chi_u=float(cone_doc.get("chi_u", 0.75)),
                       chi_c=float(cone_doc.get("chi_c", 1.0)))
    sp = doc.get("spectral", {})
    dc = doc.get("decomposition", {})
    mc = doc.get("montecarlo", {})
    ll = doc.get("llt", {})
    out = doc.get("output", {})
    cfg = ExperimentConfig(
        map_spec=spec, observable=obs, cones=cones,
        K=int(sp.get("K", 12)),
        Q=None if sp.get("Q") is None else int(sp["Q"]),
        count=int(sp.get("count", 8)),
        grid=int(dc.get("grid", 48)), burn=int(dc.get("burn", 128)),
        orbit_len=int(dc.get("orbit_len", 8192)),
        neg_tol=float(dc.get("neg_tol", 1e-3)),
        gk_J=int(mc.get("gk_J", 32)),
        n_list=tuple(int(n) for n in mc.get("n_list", (64, 256, 1024, 4096))),
        N=int(mc.get("N", 20000)), seed=int(mc.get("seed", 7)),
        g_width=float(ll.get("g_width", 1.0)),
        z_grid=tuple(float(z) for z in
                     ll.get("z_grid", np.linspace(-40.0, 40.0, 9))),
        delta=float(ll.get("delta", 4.0)),
        llt_N=None if ll.get("N") is None else int(ll["N"]),
        out_json=str(out.get("json", "report.json")),
        out_clt_csv=str(out.get("clt_csv", "clt.csv")),
        out_llt_csv=str(out.get("llt_csv", "llt.csv")),
        name=str(doc.get("name", "")),
    )
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return config_from_json_dict(doc, base_dir=os.path.dirname(
        os.path.abspath(path)))
