import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from splatcher.model import ParticleChunk

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, printed at the end of the run
CRITERIA = {}


def record(number, title, passed, detail=""):
    CRITERIA[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))


def image_space_chunk(n, width, height, seed, big_fraction=0.02, max_big=None):
    """Colorized particles already in image space, radii spanning sub-pixel
    to several tiles."""
    rng = np.random.default_rng(seed)
    margin = 20.0
    r = np.exp(rng.uniform(np.log(0.3), np.log(12.0), n))
    big = rng.random(n) < big_fraction
    hi = max_big or 0.6 * max(width, height)
    r[big] = rng.uniform(min(40.0, hi / 2), hi, big.sum())
    return ParticleChunk.from_arrays(
        x=rng.uniform(-margin, width + margin, n).astype(np.float32),
        y=rng.uniform(-margin, height + margin, n).astype(np.float32),
        r=r.astype(np.float32),
        red=rng.random(n).astype(np.float32),
        green=rng.random(n).astype(np.float32),
        blue=rng.random(n).astype(np.float32),
    )


def rel_close(a, b, rtol):
    """Per-element ``|a - b| <= rtol * max(|a|, |b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) <= rtol * np.maximum(np.abs(a), np.abs(b))


@pytest.fixture
def chunk_factory():
    return image_space_chunk
