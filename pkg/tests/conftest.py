import numpy as np
import pytest

from fairfl.data import ClientDataset, SynthSpec, mirrored_counts, partition_fixed, synth_gaussian
from fairfl.numerics import Rng


def make_client(n=60, d=3, seed=0, client_id=0, p_s1=0.4):
    spec = SynthSpec.from_separations(d, 2.0, 1.5, p_s1=p_s1, p_y1_given_s=(0.6, 0.35), n=n)
    data = synth_gaussian(spec, Rng(seed, 99))
    return ClientDataset(data.X, data.s, data.y, client_id)


def flipped_federation(seed=0, n_per=100, d=3):
    """One client with an 80:20 s-ratio, four with 20:80."""
    spec = SynthSpec.from_separations(d, 2.0, 3.0, p_s1=0.5, p_y1_given_s=(0.7, 0.3), n=4000)
    pool = synth_gaussian(spec, Rng(seed, 10))
    a, b = int(0.8 * n_per), int(0.2 * n_per)
    train = partition_fixed(pool, [(a, b)] + [(b, a)] * 4, Rng(seed, 11))
    test_pool = synth_gaussian(spec, Rng(seed, 12))
    test = partition_fixed(test_pool, mirrored_counts(train, 1.0), Rng(seed, 13))
    return train, test


@pytest.fixture
def client():
    return make_client()


@pytest.fixture
def federation():
    return flipped_federation()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, w, step=1e-5):
    g = np.zeros_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = step
        g[k] = (f(w + e) - f(w - e)) / (2 * step)
    return g


def max_rel_err(analytic, numeric, floor=1e-6):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
