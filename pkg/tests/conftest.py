import numpy as np
import pytest

from debiaslab.data import BiasSpec, generate_synthetic, make_validation_split, as_generator


def build_splits(rho, seed, n_train=5000, n_val=1500, n_test=2000, **spec_kwargs):
    """Standard desk-scale train/val/test triple.

    Train at the given rho, validation re-generated at 1/N_T, test freshly
    generated at 1/N_T.
    """
    spec = BiasSpec(rho=rho, seed=seed, **spec_kwargs)
    rng = as_generator(seed)
    pool = generate_synthetic(spec, n_train + n_val, rng)
    train, val = make_validation_split(pool, fraction=n_val / (n_train + n_val), rng=rng)
    test = None
    if n_test:
        test = generate_synthetic(
            BiasSpec(rho=1.0 / spec.n_classes, seed=seed, **spec_kwargs), n_test, rng
        )
    return train, val, test


@pytest.fixture
def rng():
    return np.random.default_rng(0)
