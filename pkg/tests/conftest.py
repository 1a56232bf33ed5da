import numpy as np
import pytest

from antiblur.grid import DeformationField, Image


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, dims):
    return Image(rng.uniform(0.0, 1.0, size=dims))


def random_field(rng, dims, scale=1.0, float32_grade=False):
    data = rng.uniform(-scale, scale, size=tuple(dims) + (len(dims),))
    if float32_grade:
        data = data.astype(np.float32).astype(np.float64)
    return DeformationField(data)


def rel_err(analytic, numeric):
    """Max-norm relative error, robust to tiny entries."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def away_from_kinks(positions, h, margin=2.0):
    """Mask of coordinates whose fractional part is farther than ``margin*h`` from an integer."""
    frac = positions - np.round(positions)
    return np.abs(frac) > margin * h


def voxel_kink_mask(channel_positions, h, margin=5.0):
    """Channel-first mask excluding whole voxels where any listed position is near a kink.

    A stage-loss perturbation of one increment component moves every component
    of the composed position (through the Jacobian of the previous field), so
    exclusion has to be per voxel and wide enough for that motion.
    """
    ok = np.ones(channel_positions[0].shape[1:], dtype=bool)
    for pos in channel_positions:
        ok &= np.all(away_from_kinks(pos, h, margin), axis=0)
    return np.broadcast_to(ok, channel_positions[0].shape)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
