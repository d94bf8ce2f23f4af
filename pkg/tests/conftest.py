import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from app.core.parallel import set_threads
from app.schemas.fields import FlowField, Image


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        plus = x.copy()
        minus = x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def smooth_texture(size: int, seed: int = 0, sigma: float = 2.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    tex = gaussian_filter(rng.random((size, size)), sigma)
    return (tex - tex.min()) / (tex.max() - tex.min())


def fractional_flow(rng: np.random.Generator, height: int, width: int, scale: float = 2.0) -> FlowField:
    """Random flow whose source coordinates never sit on lattice lines."""
    base_u = rng.integers(-int(scale), int(scale) + 1, size=(height, width))
    base_v = rng.integers(-int(scale), int(scale) + 1, size=(height, width))
    return FlowField(
        u=base_u + rng.uniform(0.2, 0.8, size=(height, width)),
        v=base_v + rng.uniform(0.2, 0.8, size=(height, width)),
    )


@pytest.fixture(autouse=True)
def serial_threads():
    set_threads(1)
    yield
    set_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def translated_pair():
    """64x64 smoothed texture and the same texture moved so that the flow is (2, 1)."""
    big = smooth_texture(70, seed=7)
    I1 = Image(data=big[3:67, 3:67])
    I2 = Image(data=big[2:66, 1:65])
    return I1, I2
