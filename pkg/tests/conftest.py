"""Shared fixtures: the frozen desk-scale pipeline artifacts.

Heavy artifacts (trained detector, denoiser) are session-scoped so the
suite trains them once.
"""

import numpy as np
import pytest

from distillab import presets
from distillab.data import synthesize_toy_dataset
from distillab.models import LatentCodec, train_autoencoder, train_detector
from distillab.numerics import SeededRng


@pytest.fixture(scope="session")
def toy_spec():
    return presets.frozen_toy_spec()


@pytest.fixture(scope="session")
def toy_data(toy_spec):
    return synthesize_toy_dataset(toy_spec)


@pytest.fixture(scope="session")
def toy_train(toy_data):
    return toy_data[0]


@pytest.fixture(scope="session")
def toy_test(toy_data):
    return toy_data[1]


@pytest.fixture(scope="session")
def detector(toy_train):
    return train_detector(toy_train, presets.frozen_detector_config(), SeededRng(presets.DETECTOR_SEED))


@pytest.fixture(scope="session")
def identity_codec(toy_train):
    ae = train_autoencoder(
        toy_train, presets.frozen_detector_config(), SeededRng(0), mode="identity"
    )
    return LatentCodec.from_autoencoder(ae)


@pytest.fixture(scope="session")
def codec(toy_train):
    return presets.build_frozen_codec(toy_train)


@pytest.fixture(scope="session")
def frozen_schedule():
    return presets.frozen_schedule()


@pytest.fixture(scope="session")
def train_latents(codec, toy_train):
    return codec.encode(toy_train.images)


@pytest.fixture(scope="session")
def denoiser(toy_train, train_latents, frozen_schedule):
    from distillab.diffusion import train_denoiser

    return train_denoiser(
        train_latents,
        toy_train.labels,
        frozen_schedule,
        presets.frozen_denoiser_config(),
        SeededRng(presets.DENOISER_SEED),
    )


@pytest.fixture(scope="session")
def weak_denoiser(toy_train, train_latents, frozen_schedule):
    from distillab.diffusion import train_denoiser

    return train_denoiser(
        train_latents,
        toy_train.labels,
        frozen_schedule,
        presets.frozen_defect_prone_denoiser_config(),
        SeededRng(presets.DENOISER_SEED),
    )


def gradient_check(loss_fn, params, rng, probes=60, step=1e-5, rel_tol=1e-3):
    """Central-difference gradient check over randomly probed parameters.

    ``loss_fn() -> (loss, grads)`` where grads aligns with ``params``;
    params must be float64 arrays (probing float32 storage is too noisy).
    """
    _, grads = loss_fn()
    flat_sizes = [p.size for p in params]
    total = int(np.sum(flat_sizes))
    checked = 0
    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(total))
        ai = 0
        while k >= flat_sizes[ai]:
            k -= flat_sizes[ai]
            ai += 1
        p = params[ai].reshape(-1)
        orig = p[k]
        p[k] = orig + step
        lp, _ = loss_fn()
        p[k] = orig - step
        lm, _ = loss_fn()
        p[k] = orig
        num = (lp - lm) / (2 * step)
        ana = grads[ai].reshape(-1)[k]
        denom = max(abs(num), abs(ana), 1e-8)
        rel = abs(num - ana) / denom
        worst = max(worst, rel)
        assert rel < rel_tol, f"param block {ai} idx {k}: analytic {ana} vs numeric {num}"
        checked += 1
    return checked, worst
