import functools

import numpy as np
import pytest
from hypothesis import strategies as st

from tissuescan.phantom import MotionProfile, Scene, make_phantom, profile_motion
from tissuescan.se3 import RigidTransform, apply, quaternion_to_matrix
from tissuescan.tracker import AppearanceDescriptor, Roi, RoiState


@st.composite
def rigid_transforms(draw, scale: float = 100.0):
    q = draw(st.lists(st.floats(-1, 1, allow_nan=False), min_size=4, max_size=4)
             .filter(lambda v: np.linalg.norm(v) > 1e-3))
    t = draw(st.lists(st.floats(-scale, scale, allow_nan=False), min_size=3, max_size=3))
    return RigidTransform(quaternion_to_matrix(q), t)


@functools.lru_cache(maxsize=4)
def _phantom(seed: int):
    return make_phantom(seed)


def scene_for(profile: int = 1, axis: str = "x", seed: int = 0, **kwargs) -> Scene:
    """Scene on the cached phantom; profile 0 is a static platform."""
    motion = MotionProfile() if profile == 0 else profile_motion(profile, axis, seed=seed)
    return Scene(_phantom(seed), motion, seed=seed, **kwargs)


_BLANK = AppearanceDescriptor(np.full(32, 1 / 32), np.full(8, 1 / 8))


def make_rois(reference, current, stopped=()) -> list[Roi]:
    """Synthetic ROIs carrying only 3D correspondences."""
    return [Roi(id=i, u=0.0, v=0.0, width=20, height=25,
                state=RoiState.STOPPED if i in stopped else RoiState.TRACKING,
                reference_appearance=_BLANK, reference_point=np.asarray(p, float),
                template=np.zeros((25, 20)), current_point=None if i in stopped else np.asarray(q, float))
            for i, (p, q) in enumerate(zip(reference, current))]


def outlier_instance(rng, n=12, outlier_fraction=0.3, sigma=0.3, displacement=10.0):
    """Tissue-like point set moved by a random motion, with noise and displaced outliers."""
    truth = RigidTransform(quaternion_to_matrix(np.r_[1.0, rng.normal(scale=0.05, size=3)]),
                           rng.normal(scale=3.0, size=3))
    ref = rng.uniform([-30, -25, 150], [30, 25, 190], size=(n, 3))
    cur = apply(truth, ref) + rng.normal(scale=sigma, size=(n, 3))
    bad = rng.choice(n, int(round(outlier_fraction * n)), replace=False)
    dirs = rng.normal(size=(len(bad), 3))
    cur[bad] += displacement * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return truth, ref, cur, bad


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line immediately and keep it for the end-of-run summary."""
    def emit(number: int, ok: bool, detail: str) -> None:
        line = f"ACCEPTANCE {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
