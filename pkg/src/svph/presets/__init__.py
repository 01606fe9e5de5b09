"""Named benchmark configurations shipped with the package.

doubling_skew   mixing shear skew (2x, theta + 0.1 cos(2 pi x)); one acip,
                sigma^2 = 1/2 exactly for tau = cos(2 pi x).
two_basin       (2x, theta + 0.05 sin(2 pi x) sin(2 pi theta)); two circle
                attractors with intermingled basins, masses (1/2, 1/2),
                per-basin variances split by the (1 + cos theta) factor
                of the observable.
fast_slow       slow drifting fiber: omega scaled by epsilon = 1/2, no
                invariant circle, single smooth acip, slow correlation
                decay (the Green-Kubo tail estimate is exercised).
"""

import json
from importlib import resources

from ..config import ExperimentConfig, config_from_json_dict
from ..errors import ValidationError

PRESET_NAMES = ("doubling_skew", "two_basin", "fast_slow")


def preset_text(name: str) -> str:
    if name not in PRESET_NAMES:
        raise ValidationError(
            f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    return resources.files("svph.presets").joinpath(f"{name}.json").read_text()


def load_preset(name: str) -> ExperimentConfig:
    return config_from_json_dict(json.loads(preset_text(name)))
