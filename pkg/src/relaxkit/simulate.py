"""Model-based synthesis of training and evaluation data.

Ground-truth parameter maps are built from tissue label maps: each patch draws
one value per tissue from that tissue's normal prior (uniform properties within
a patch, distinct across patches), adds voxel-wise jitter for intra-tissue
variation, and shares a single inversion-efficiency value B = 2 - |N(0, 0.2)|
per patch. Weighted series are the forward model plus i.i.d. Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .containers import (
    AcquisitionProtocol,
    ParameterMap,
    SequenceKind,
    TissueLabelMap,
    WeightedSeries,
)
from .errors import InvariantError
from .models import forward
from .rng import SeededRng

# Reference amplitude for SNR labels: SNR = 0.7 / sigma. The training noise
# range [0.0065, 0.255] then maps to SNR ~ [2.7, 108], bracketing the nominal
# 3..100 span from both endpoints.
SNR_REFERENCE_AMPLITUDE = 0.7

_B_FLOOR = 1e-3
_T_FLOOR_MS = 1.0


def snr_to_sigma(snr: float) -> float:
    if snr <= 0:
        raise InvariantError("SNR must be positive")
    return SNR_REFERENCE_AMPLITUDE / float(snr)


def sigma_to_snr(sigma: float) -> float:
    if sigma <= 0:
        raise InvariantError("sigma must be positive")
    return SNR_REFERENCE_AMPLITUDE / float(sigma)


@dataclass(frozen=True)
class TissuePrior:
    """Normal priors for one tissue: relaxation times in ms, A as CSF fraction."""

    mu_t1: float
    sd_t1: float
    mu_t2: float
    sd_t2: float
    mu_a: float
    sd_a: float

    def __post_init__(self):
        if min(self.mu_t1, self.mu_t2, self.mu_a) <= 0:
            raise InvariantError("tissue prior means must be positive")
        if min(self.sd_t1, self.sd_t2, self.sd_a) < 0:
            raise InvariantError("tissue prior stds must be non-negative")


# Label ids are stable across the toolkit; 0 is background.
TISSUE_LABELS = {
    1: "csf",
    2: "gray_matter",
    3: "white_matter",
    4: "fat",
    5: "muscle",
    6: "muscle_skin",
    7: "skull",
    8: "vessels",
    9: "connective",
    10: "dura_mater",
    11: "marrow",
}

_DEFAULT_PRIORS = {
    "csf": TissuePrior(3500.0, 300.0, 2000.0, 300.0, 1.0, 0.3),
    "gray_matter": TissuePrior(1400.0, 300.0, 110.0, 30.0, 0.85, 0.3),
    "white_matter": TissuePrior(780.0, 250.0, 80.0, 20.0, 0.65, 0.3),
    "fat": TissuePrior(420.0, 100.0, 70.0, 20.0, 0.9, 0.3),
    "muscle": TissuePrior(1200.0, 300.0, 50.0, 20.0, 0.7, 0.3),
    "muscle_skin": TissuePrior(1230.0, 300.0, 50.0, 20.0, 0.7, 0.3),
    "skull": TissuePrior(400.0, 100.0, 30.0, 10.0, 0.9, 0.3),
    "vessels": TissuePrior(1980.0, 300.0, 275.0, 70.0, 1.0, 0.3),
    "connective": TissuePrior(900.0, 250.0, 80.0, 20.0, 0.7, 0.3),
    "dura_mater": TissuePrior(900.0, 250.0, 70.0, 20.0, 0.7, 0.3),
    "marrow": TissuePrior(580.0, 100.0, 50.0, 20.0, 0.8, 0.3),
}


@dataclass(frozen=True)
class TissuePriorTable:
    """Per-tissue parameter priors, keyed by tissue name."""

    tissues: dict[str, TissuePrior] = field(
        default_factory=lambda: dict(_DEFAULT_PRIORS)
    )

    def __getitem__(self, name: str) -> TissuePrior:
        return self.tissues[name]

    def to_json(self) -> dict:
        return {
            name: {
                "mu_t1": p.mu_t1, "sd_t1": p.sd_t1,
                "mu_t2": p.mu_t2, "sd_t2": p.sd_t2,
                "mu_a": p.mu_a, "sd_a": p.sd_a,
            }
            for name, p in sorted(self.tissues.items())
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TissuePriorTable":
        return cls({name: TissuePrior(**vals) for name, vals in payload.items()})


@dataclass(frozen=True)
class NoiseConfig:
    """Observation- and parameter-noise settings for data synthesis."""

    sigma_acq_range: tuple[float, float] = (0.0065, 0.255)
    sigma_gamma: float = 0.2  # half-normal scale for the B = 2 - gamma shortfall
    intratissue_frac: float = 0.05  # voxel jitter std as fraction of tissue mean

    def __post_init__(self):
        lo, hi = self.sigma_acq_range
        if not (0 < lo <= hi):
            raise InvariantError("sigma_acq_range endpoints must be positive and ordered")
        if self.sigma_gamma <= 0:
            raise InvariantError("sigma_gamma must be positive")
        if self.intratissue_frac < 0:
            raise InvariantError("intratissue_frac must be non-negative")

    def to_json(self) -> dict:
        return {
            "sigma_acq_range": list(self.sigma_acq_range),
            "sigma_gamma": self.sigma_gamma,
            "intratissue_frac": self.intratissue_frac,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "NoiseConfig":
        return cls(
            sigma_acq_range=tuple(payload["sigma_acq_range"]),
            sigma_gamma=float(payload["sigma_gamma"]),
            intratissue_frac=float(payload["intratissue_frac"]),
        )


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, SeededRng):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected SeededRng or numpy Generator, got {type(rng).__name__}")


def draw_acquisition_sigma(noise: NoiseConfig, rng) -> float:
    """One log-uniform draw from the acquisition-noise range."""
    gen = _as_generator(rng)
    lo, hi = noise.sigma_acq_range
    return float(np.exp(gen.uniform(np.log(lo), np.log(hi))))


def sample_parameter_map(
    labels: TissueLabelMap,
    priors: TissuePriorTable,
    noise: NoiseConfig,
    rng,
    kind: SequenceKind = SequenceKind.INVERSION_RECOVERY,
) -> ParameterMap:
    """Draw a ground-truth parameter map for one patch.

    Tissue-level draws are shared by all voxels of a tissue within the patch;
    voxel-wise jitter (std = intratissue_frac * tissue mean) is added to every
    parameter except B, which is one 2 - |N(0, sigma_gamma)| draw per patch.
    Values are clamped to validity and background voxels get A = 0.
    """
    gen = _as_generator(rng)
    lab = labels.labels
    present = [int(v) for v in np.unique(lab) if v != 0]
    unknown = [v for v in present if labels.legend.get(v) not in priors.tissues]
    if unknown:
        raise InvariantError(f"no prior for labels {unknown}")

    b_patch = 2.0 - abs(gen.normal(0.0, noise.sigma_gamma))

    t_field = np.zeros(lab.shape, dtype=np.float64)
    a_field = np.zeros(lab.shape, dtype=np.float64)
    mu_t_field = np.zeros(lab.shape, dtype=np.float64)
    mu_a_field = np.zeros(lab.shape, dtype=np.float64)
    use_t1 = kind is SequenceKind.INVERSION_RECOVERY
    for value in present:
        prior = priors[labels.legend[value]]
        t1_draw = gen.normal(prior.mu_t1, prior.sd_t1)
        t2_draw = gen.normal(prior.mu_t2, prior.sd_t2)
        a_draw = gen.normal(prior.mu_a, prior.sd_a)
        where = lab == value
        t_field[where] = t1_draw if use_t1 else t2_draw
        a_field[where] = a_draw
        mu_t_field[where] = prior.mu_t1 if use_t1 else prior.mu_t2
        mu_a_field[where] = prior.mu_a

    frac = noise.intratissue_frac
    t_field = t_field + gen.standard_normal(lab.shape) * (frac * mu_t_field)
    a_field = a_field + gen.standard_normal(lab.shape) * (frac * mu_a_field)

    t_field = np.maximum(t_field, _T_FLOOR_MS)
    a_field = np.maximum(a_field, 0.0)
    mask = lab > 0
    a_field[~mask] = 0.0
    t_field[~mask] = _T_FLOOR_MS

    if use_t1:
        b = float(np.clip(b_patch, _B_FLOOR, 2.0))
        data = np.stack([a_field, np.full(lab.shape, b), t_field], axis=-1)
        channels = SequenceKind.INVERSION_RECOVERY.channels
    else:
        data = np.stack([a_field, t_field], axis=-1)
        channels = SequenceKind.SPIN_ECHO_DECAY.channels
    return ParameterMap(channels, data, mask)


def simulate_series(
    kappa: ParameterMap,
    protocol: AcquisitionProtocol,
    sigma_acq: float,
    rng,
) -> WeightedSeries:
    """Forward-model the map and add zero-mean Gaussian noise of std sigma_acq."""
    if protocol.sequence_kind is not kappa.sequence_kind:
        raise InvariantError(
            f"protocol is {protocol.sequence_kind.value} but map is "
            f"{kappa.sequence_kind.value}"
        )
    if sigma_acq < 0 or not np.isfinite(sigma_acq):
        raise InvariantError("sigma_acq must be finite and non-negative")
    clean = forward(kappa.data, protocol.tau_ms, kappa.sequence_kind)
    if sigma_acq > 0:
        gen = _as_generator(rng)
        clean = clean + gen.normal(0.0, sigma_acq, size=clean.shape)
    recorded = protocol.with_sigma(sigma_acq if sigma_acq > 0 else None)
    return WeightedSeries(recorded, clean)


def extract_patch(volume: TissueLabelMap, center: tuple[int, int], size: int) -> TissueLabelMap:
    """Crop a size x size patch around center; outside pixels become background."""
    row, col = int(center[0]), int(center[1])
    h, w = volume.shape
    if not (0 <= row < h and 0 <= col < w) or volume.labels[row, col] == 0:
        raise InvariantError(f"patch center {center} is outside the tissue mask")
    half = size // 2
    out = np.zeros((size, size), dtype=np.int32)
    r0, c0 = row - half, col - half
    src_r0, src_c0 = max(r0, 0), max(c0, 0)
    src_r1, src_c1 = min(r0 + size, h), min(c0 + size, w)
    out[src_r0 - r0 : src_r1 - r0, src_c0 - c0 : src_c1 - c0] = volume.labels[
        src_r0:src_r1, src_c0:src_c1
    ]
    return TissueLabelMap(out, volume.legend)


def random_patch_center(volume: TissueLabelMap, rng) -> tuple[int, int]:
    """Uniform draw over all in-mask pixel coordinates."""
    gen = _as_generator(rng)
    coords = np.argwhere(volume.labels > 0)
    if coords.size == 0:
        raise InvariantError("label map has no tissue pixels")
    row, col = coords[int(gen.integers(len(coords)))]
    return int(row), int(col)


def make_procedural_labelmap(size: int, rng) -> TissueLabelMap:
    """Generate a head-like label map containing every supported tissue.

    Nested smooth-boundary layers (skin, fat, muscle, skull with a marrow
    band, dura, CSF rim, gray matter, white matter core) plus ventricles,
    a connective midline streak, and vessel dots. Deterministic given the
    rng stream; all 11 tissues are present for size >= 128.
    """
    if size < 64:
        raise InvariantError("procedural label maps need size >= 64")
    gen = _as_generator(rng)
    cy = cx = (size - 1) / 2.0
    ry, rx = 0.46 * size, 0.40 * size

    rows, cols = np.indices((size, size), dtype=np.float64)
    yn = (rows - cy) / ry
    xn = (cols - cx) / rx
    theta = np.arctan2(yn, xn)
    wobble = np.ones_like(theta)
    for k in (2, 3, 4):
        amp = gen.uniform(0.005, 0.025)
        phase = gen.uniform(0.0, 2.0 * np.pi)
        wobble += amp * np.cos(k * theta + phase)
    rho = np.hypot(yn, xn) / wobble

    lab = np.zeros((size, size), dtype=np.int32)
    # outermost first; later assignments overwrite inner regions
    bands = [
        (1.000, 6),   # muscle skin
        (0.955, 4),   # fat
        (0.910, 5),   # muscle
        (0.875, 7),   # skull (outer table)
        (0.850, 11),  # marrow band inside the skull
        (0.825, 7),   # skull (inner table)
        (0.800, 10),  # dura mater
        (0.775, 1),   # csf rim
        (0.730, 2),   # gray matter
        (0.520, 3),   # white matter core
    ]
    for outer, value in bands:
        lab[rho <= outer] = value

    # lateral ventricles: two tilted CSF ellipses beside the midline
    for side in (-1.0, 1.0):
        vy = cy + gen.uniform(-0.02, 0.02) * size
        vx = cx + side * 0.11 * size
        tilt = side * gen.uniform(0.25, 0.45)
        sy, sx = 0.085 * size, 0.032 * size
        dy, dx = rows - vy, cols - vx
        ur = dy * np.cos(tilt) - dx * np.sin(tilt)
        uc = dy * np.sin(tilt) + dx * np.cos(tilt)
        lab[((ur / sy) ** 2 + (uc / sx) ** 2 <= 1.0) & (rho <= 0.52)] = 1

    # connective midline streak (falx) through the white matter core
    half_w = max(1, int(round(0.012 * size)))
    streak_len = int(round(0.20 * size))
    r0 = int(round(cy)) - streak_len
    r1 = int(round(cy)) - int(round(0.04 * size))
    c0 = int(round(cx)) - half_w
    streak = np.zeros_like(lab, dtype=bool)
    streak[r0:r1, c0 : c0 + 2 * half_w] = True
    lab[streak & (rho <= 0.50)] = 9

    # vessel dots sprinkled through parenchyma
    n_vessels = 6
    radius = max(1.0, 0.012 * size)
    for _ in range(n_vessels):
        ang = gen.uniform(0.0, 2.0 * np.pi)
        rad = gen.uniform(0.20, 0.65)
        py = cy + rad * ry * np.sin(ang)
        px = cx + rad * rx * np.cos(ang)
        lab[(rows - py) ** 2 + (cols - px) ** 2 <= radius**2] = 8

    return TissueLabelMap(lab, dict(TISSUE_LABELS))


@dataclass(frozen=True)
class PatchSimulator:
    """Deterministic patch factory: indices -> (labels, ground truth, series)."""

    volumes: Sequence[TissueLabelMap]
    patch_size: int
    protocol: AcquisitionProtocol
    priors: TissuePriorTable
    noise: NoiseConfig
    rng: SeededRng
    sigma_acq: Optional[float] = None  # None = draw log-uniformly per patch

    def sample(self, *indices: int):
        gen = self.rng.stream(*indices).generator()
        volume = self.volumes[int(gen.integers(len(self.volumes)))]
        center = random_patch_center(volume, gen)
        labels = extract_patch(volume, center, self.patch_size)
        kappa = sample_parameter_map(
            labels, self.priors, self.noise, gen, self.protocol.sequence_kind
        )
        sigma = self.sigma_acq
        if sigma is None:
            sigma = draw_acquisition_sigma(self.noise, gen)
        series = simulate_series(kappa, self.protocol, sigma, gen)
        return labels, kappa, series


def default_volume_pool(
    rng: SeededRng, count: int = 10, size: int = 128
) -> list[TissueLabelMap]:
    """Pool of procedural label volumes used when no files are supplied."""
    return [make_procedural_labelmap(size, rng.stream(7001, i)) for i in range(count)]
