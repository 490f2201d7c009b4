"""Frozen desk-scale configuration shared by tests, demos, and CLI defaults.

These values were tuned once against the acceptance thresholds (detector
accuracy, autoencoder reconstruction, generation class fidelity, ablation
runtime) and then frozen; change them only together with the acceptance
suite.
"""

from __future__ import annotations

from .data import ToyDataSpec

DETECTOR_SEED = 2024
AUTOENCODER_SEED = 2025
DENOISER_SEED = 2026


def frozen_toy_spec() -> ToyDataSpec:
    """The frozen procedural dataset: 5 grating classes, 16x16 grayscale."""
    return ToyDataSpec(
        num_classes=5,
        train_per_class=500,
        test_per_class=100,
        image_shape=(1, 16, 16),
        amplitude=0.9,
        amplitude_jitter=0.1,
        noise_std=0.05,
        seed=0,
    )


def frozen_detector_config():
    from .models import TrainConfig

    return TrainConfig(
        epochs=20,
        batch_size=64,
        learning_rate=1e-3,
        cutmix_alpha=1.0,
        use_cutmix=True,
        hidden_sizes=(128, 64),
    )


AUTOENCODER_LATENT_DIM = 32
AUTOENCODER_HIDDEN = 128


def frozen_autoencoder_config():
    from .models import TrainConfig

    return TrainConfig(
        epochs=30,
        batch_size=64,
        learning_rate=2e-3,
        use_cutmix=False,
        hidden_sizes=(AUTOENCODER_HIDDEN,),
    )


def build_frozen_codec(train, mode: str = "mlp"):
    """Train the frozen latent codec (trained autoencoder by default)."""
    from .models import LatentCodec, train_autoencoder
    from .numerics import SeededRng

    ae = train_autoencoder(
        train,
        frozen_autoencoder_config(),
        SeededRng(AUTOENCODER_SEED),
        latent_dim=AUTOENCODER_LATENT_DIM,
        hidden_size=AUTOENCODER_HIDDEN,
        mode=mode,
    )
    return LatentCodec.from_autoencoder(ae)


def frozen_schedule():
    from .diffusion import build_schedule

    return build_schedule(timesteps=200, beta_start=1e-4, beta_end=0.03)


def frozen_denoiser_config():
    from .diffusion import DenoiserTrainConfig

    return DenoiserTrainConfig(
        epochs=100,
        batch_size=64,
        learning_rate=1e-3,
        hidden_sizes=(256, 256),
        time_embed_dim=16,
        label_embed_dim=32,
        label_dropout=0.1,
    )


def frozen_defect_prone_denoiser_config():
    """Deliberately under-trained generator for the refinement experiments.

    Produces roughly 10-20% label-inconsistent samples on the frozen toy
    spec, the regime where anomaly filtering has something to fix; the
    confidence gate at beta=0.9 binds hard under this generator.
    """
    from .diffusion import DenoiserTrainConfig

    return DenoiserTrainConfig(
        epochs=50,
        batch_size=64,
        learning_rate=1e-3,
        hidden_sizes=(256, 256),
        time_embed_dim=16,
        label_embed_dim=32,
        label_dropout=0.1,
    )


def frozen_distill_config(**overrides):
    from .refine import DistillConfig

    base = dict(
        ipc=10,
        beta=0.9,
        top_k=2,
        num_candidates=20,
        guidance_scale=10.0,
        strength=0.7,
        seed=0,
        selection_mode="tplus_s",
    )
    base.update(overrides)
    return DistillConfig(**base)


def frozen_downstream_config():
    """Classifier trained on the distilled set: no CutMix, longer schedule."""
    from .models import TrainConfig

    return TrainConfig(
        epochs=200,
        batch_size=16,
        learning_rate=1e-3,
        use_cutmix=False,
        hidden_sizes=(128, 64),
    )
