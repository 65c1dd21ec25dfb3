import math
from pathlib import Path

import numpy as np
import pytest

from ldo_lens.config import load_config
from ldo_lens.ldomodel import NOMINAL_A, ProposedParams

ROOT = Path(__file__).resolve().parent.parent
CONFIGS = ROOT / "configs"


def random_params(rng: np.random.Generator) -> ProposedParams:
    """Log-uniform over gm in [1e-5, 10] S, R in [1, 1e7] ohm, C in [1e-13, 1e-9] F."""

    def lu(a, b):
        return 10 ** rng.uniform(math.log10(a), math.log10(b))

    return ProposedParams(
        gm1=lu(1e-5, 10), gm2=lu(1e-5, 10), gmp=lu(1e-5, 10),
        ro1=lu(1, 1e7), ro2=lu(1, 1e7), ro=lu(1, 1e7),
        cm=lu(1e-13, 1e-9), cp=lu(1e-13, 1e-9), cf=lu(1e-13, 1e-9),
        cf_override=True,
    )


def match_roots(expected, found):
    """Greedy nearest matching; returns list of (expected, found) pairs."""
    left = [complex(x) for x in found]
    pairs = []
    for e in expected:
        e = complex(e)
        k = min(range(len(left)), key=lambda i: abs(left[i] - e))
        pairs.append((e, left.pop(k)))
    return pairs


@pytest.fixture(scope="session")
def nominal():
    return NOMINAL_A


@pytest.fixture(scope="session")
def calibrated_cfg():
    return load_config(CONFIGS / "calibrated.cfg")


@pytest.fixture(scope="session")
def nominal_cfg_path():
    return CONFIGS / "nominal_a.cfg"


@pytest.fixture(scope="session")
def calibrated_cfg_path():
    return CONFIGS / "calibrated.cfg"
