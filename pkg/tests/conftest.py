import sys

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from nrsfm.model import AffineCamera, DeformationWeights, ShapeBases, build_tracking, compose_shapes


def random_model(m=40, n=30, k=2, seed=0, weights=None, varying_scale=False):
    """Random cameras, bases and weights; first weight column is 1."""
    rng = np.random.default_rng(seed)
    bases = ShapeBases(rng.standard_normal((k, 3, n)))
    if weights is None:
        weights = np.column_stack([np.ones(m)] + [0.5 * rng.standard_normal(m) for _ in range(k - 1)])
    R = Rotation.random(m, random_state=rng).as_matrix()
    s = rng.uniform(0.5, 2.0, m) if varying_scale else np.ones(m)
    cams = [AffineCamera(s[i] * R[i][:2], rng.uniform(-5, 5, 2)) for i in range(m)]
    W = DeformationWeights(weights)
    return cams, bases, W, R


@pytest.fixture
def model():
    def make(**kw):
        cams, bases, W, R = random_model(**kw)
        T = build_tracking(cams, bases, W)
        return T, cams, bases, W, R, compose_shapes(bases, W)

    return make


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
