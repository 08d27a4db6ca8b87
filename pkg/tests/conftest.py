import numpy as np
import pytest

from t1qc.dataset import PhantomSpec, generate_phantoms
from t1qc.volume import Volume3D


@pytest.fixture(scope="session")
def clean_phantom():
    """One noiseless, jitter-free phantom with exact constant tissues."""
    spec = PhantomSpec(
        rotation_jitter=0.0,
        translation_jitter=0.0,
        axis_jitter=0.0,
        perturbation=0.0,
        noise_sigma=0.0,
        seed=0,
    )
    items, manifest = generate_phantoms(spec, 1)
    return items[0]


@pytest.fixture(scope="session")
def phantom_corpus20():
    """20 scaled phantoms with a noise floor, used for calibration and
    severity-ordering checks."""
    spec = PhantomSpec(
        wm_intensity=400.0,
        gm_intensity=300.0,
        noise_sigma=2.0,
        seed=21,
    )
    items, manifest = generate_phantoms(spec, 20)
    return items


@pytest.fixture()
def random_volume():
    rng = np.random.default_rng(1234)
    return Volume3D(rng.normal(size=(12, 11, 10)).astype(np.float32))
