"""Frozen synthetic tasks and training configurations shared across tests.

These settings were calibrated once and are deliberately fixed: tests assert
behavior of the library on these exact tasks, so changing a number here
changes what the suite measures.
"""

import numpy as np

from qefilters import RegConfig, SpectralBump, SynthSpec, TrainConfig, gen_synthetic

HYKO_GRID = tuple(np.linspace(470.0, 630.0, 15))
BASE = (SpectralBump(550.0, 120.0, 0.4),)
BASE_HIGH = (SpectralBump(550.0, 120.0, 0.5),)


def planted3_spec(subset: int, images: int) -> SynthSpec:
    """Three classes; classes 1/2 add a band at normalized 0.25 / 0.70."""
    classes = (
        BASE,
        BASE + (SpectralBump(510.0, 30.0, 0.35),),
        BASE + (SpectralBump(582.0, 30.0, 0.35),),
    )
    return SynthSpec(
        class_bumps=classes,
        planted_centers_nm=(510.0, 582.0),
        wavelengths_nm=HYKO_GRID,
        noise_sigma=0.15,
        images=images,
        height=28,
        width=28,
        blobs_per_image=6,
        seed=100,
        subset=subset,
    )


def planted3_data():
    train = gen_synthetic(planted3_spec(0, 16))
    val = gen_synthetic(planted3_spec(1, 6))
    return train, val


def planted3_config(seed: int, head: str = "linear") -> TrainConfig:
    return TrainConfig(
        learning_rate=2e-2,
        max_epochs=600,
        patience=80,
        batch_size=4,
        seed=seed,
        reg=RegConfig(d_min=0.25),
        head=head,
    )


def metameric_spec(subset: int, images: int) -> SynthSpec:
    """Metameric pair (classes 0/1) at 490 nm, buried under channel noise.

    The high-variance structure lives far away: a +-0.55 contrast between
    classes 2/3 at 566 nm and a bump at 610 nm shared by classes 2/3. The
    contrasts are sign-balanced, so the pair direction is uncorrelated with
    both and ranks below them; a two-component PCA keeps the two big
    directions and discards the pair.
    """
    classes = (
        BASE_HIGH + (SpectralBump(490.0, 14.0, -0.18),),
        BASE_HIGH + (SpectralBump(490.0, 14.0, +0.18),),
        BASE_HIGH + (SpectralBump(566.0, 14.0, -0.55), SpectralBump(610.0, 14.0, 0.5)),
        BASE_HIGH + (SpectralBump(566.0, 14.0, +0.55), SpectralBump(610.0, 14.0, 0.5)),
    )
    return SynthSpec(
        class_bumps=classes,
        planted_centers_nm=(490.0,),
        wavelengths_nm=HYKO_GRID,
        noise_sigma=0.15,
        images=images,
        height=28,
        width=28,
        blobs_per_image=8,
        seed=200,
        subset=subset,
    )


def metameric_config(seed: int) -> TrainConfig:
    return TrainConfig(
        learning_rate=2e-2,
        max_epochs=600,
        patience=80,
        batch_size=4,
        seed=seed,
        reg=RegConfig(d_min=0.45, lambda_reg=0.3),
    )


def control_spec(subset: int, images: int) -> SynthSpec:
    """Variance-aligned control: the class contrasts are the biggest variance."""
    classes = (
        BASE,
        BASE + (SpectralBump(510.0, 30.0, 0.5),),
        BASE + (SpectralBump(582.0, 30.0, 0.5),),
    )
    return SynthSpec(
        class_bumps=classes,
        planted_centers_nm=(510.0, 582.0),
        wavelengths_nm=HYKO_GRID,
        noise_sigma=0.15,
        images=images,
        height=28,
        width=28,
        blobs_per_image=6,
        seed=300,
        subset=subset,
    )


def bands3_spec(subset: int, images: int) -> SynthSpec:
    """Four classes, three planted bands at normalized 0.2 / 0.5 / 0.8."""
    classes = (
        BASE,
        BASE + (SpectralBump(502.0, 16.0, 0.4),),
        BASE + (SpectralBump(550.0, 16.0, 0.4),),
        BASE + (SpectralBump(598.0, 16.0, 0.4),),
    )
    return SynthSpec(
        class_bumps=classes,
        planted_centers_nm=(502.0, 550.0, 598.0),
        wavelengths_nm=HYKO_GRID,
        noise_sigma=0.12,
        images=images,
        height=28,
        width=28,
        blobs_per_image=8,
        seed=400,
        subset=subset,
    )


def bands3_config(seed: int, enabled=("dominance", "separation", "bandwidth")) -> TrainConfig:
    return TrainConfig(
        learning_rate=5e-3,
        max_epochs=600,
        patience=80,
        batch_size=4,
        seed=seed,
        reg=RegConfig(d_min=0.22, lambda_reg=1.0, enabled=tuple(enabled)),
    )


def dominant_centroids_sorted(params) -> np.ndarray:
    star = params.dominant_peaks()
    return np.sort(params.centroids[np.arange(params.num_filters), star])
