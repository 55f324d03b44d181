"""Synthetic geolocated chips with known causal ground truth.

A unit's latent brightness sets both the chip's mean level and its
texture: bright chips carry more fine-scale value noise, dark chips are
smooth. Embeddings standardise each band per image, so the level alone is
invisible to them and the texture is what makes brightness recoverable.
"""

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from .frame import CausalFrame, write_frame
from .recordstore import write_records

OUTCOME_BRIGHTNESS_COEF = 2.0  # delta in y = tau*w + delta*b + noise
FIELD_AMPLITUDE = 0.2
COARSE_GRID = 4
LON_RANGE = (30.0, 35.0)
LAT_RANGE = (0.0, 4.0)


@dataclass
class SynthSpec:
    n_units: int = 2000
    chip_size: int = 32
    bands: int = 1
    tau_true: Union[float, Sequence[float]] = 1.0
    confounding_strength: float = 4.0
    noise_sd: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_units < 10:
            raise ValueError("n_units must be >= 10")
        if self.chip_size < 8:
            raise ValueError("chip_size must be >= 8")
        if self.noise_sd <= 0:
            raise ValueError("noise_sd must be > 0")
        if self.bands < 1:
            raise ValueError("bands must be >= 1")


@dataclass
class SynthData:
    chips: Optional[np.ndarray]  # (N, H, W, C) float32
    frame: CausalFrame
    truth: dict
    e_true: Optional[np.ndarray] = None
    brightness: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


def value_noise(rng, size, grid):
    """Bilinear interpolation of a (grid+1)^2 standard-normal lattice, unit variance."""
    lattice = rng.standard_normal((grid + 1, grid + 1))
    t = (np.arange(size) + 0.5) * grid / size
    i0 = np.floor(t).astype(int)
    f = t - i0
    fy, fx = f[:, None], f[None, :]
    a = lattice[np.ix_(i0, i0)]
    b = lattice[np.ix_(i0, i0 + 1)]
    c = lattice[np.ix_(i0 + 1, i0)]
    d = lattice[np.ix_(i0 + 1, i0 + 1)]
    field = a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx
    sd = field.std()
    return (field - field.mean()) / (sd if sd > 0 else 1.0)


def make_chip(rng, size, bands, level, roughness):
    """Chip whose mean sits near ``level``; ``roughness`` in [0, 1] mixes in fine texture."""
    chip = np.empty((size, size, bands), dtype=np.float32)
    fine_grid = max(size // 2, COARSE_GRID + 1)
    for band in range(bands):
        coarse = value_noise(rng, size, COARSE_GRID)
        fine = value_noise(rng, size, fine_grid)
        texture = np.sqrt(1 - roughness) * coarse + np.sqrt(roughness) * fine
        chip[:, :, band] = level + FIELD_AMPLITUDE * texture
    return chip


def unit_rng(seed, i):
    return np.random.default_rng([seed, i])


def _keys(n):
    width = max(5, len(str(n - 1)))
    return [f"u{i:0{width}d}" for i in range(n)]


def _coords(rng, n):
    return rng.uniform(*LON_RANGE, size=n), rng.uniform(*LAT_RANGE, size=n)


def gen_confounded(spec: SynthSpec, chips: bool = True) -> SynthData:
    """Observational data where brightness drives both treatment and outcome.

    b ~ U(0,1); e = logistic(gamma (b - 1/2)); w ~ Bernoulli(e);
    y = tau w + 2 b + N(0, sigma^2).
    """
    if not np.isscalar(spec.tau_true):
        raise ValueError("gen_confounded needs a scalar tau_true")
    n = spec.n_units
    rng = np.random.default_rng(spec.seed)
    b = rng.uniform(size=n)
    e_true = expit(spec.confounding_strength * (b - 0.5))
    w = (rng.uniform(size=n) < e_true).astype(np.float64)
    y = spec.tau_true * w + OUTCOME_BRIGHTNESS_COEF * b + rng.normal(0.0, spec.noise_sd, size=n)
    lon, lat = _coords(rng, n)
    keys = _keys(n)
    images = None
    if chips:
        images = np.stack(
            [make_chip(unit_rng(spec.seed, i), spec.chip_size, spec.bands, b[i], b[i]) for i in range(n)]
        )
    frame = CausalFrame(w, y, None, keys, lon, lat)
    truth = {"kind": "confounded", "spec": asdict(spec), "tau": float(spec.tau_true),
             "delta": OUTCOME_BRIGHTNESS_COEF}
    return SynthData(images, frame, truth, e_true=e_true, brightness=b)


def regime_level(k, n_clusters):
    return (k + 0.5) / n_clusters


def gen_heterogeneous(spec: SynthSpec, chips: bool = True) -> SynthData:
    """Randomised experiment whose effect depends on the chip's brightness regime.

    Cluster labels are uniform over K; cluster k has brightness (and
    roughness) near (k + 1/2)/K; w ~ Bernoulli(1/2); y = tau_k w + N(0, sigma^2).
    """
    taus = np.atleast_1d(np.asarray(spec.tau_true, dtype=np.float64))
    k = len(taus)
    n = spec.n_units
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, k, size=n)
    jitter = rng.uniform(-0.25, 0.25, size=n) / k
    b = np.array([regime_level(c, k) for c in labels]) + jitter
    w = (rng.uniform(size=n) < 0.5).astype(np.float64)
    y = taus[labels] * w + rng.normal(0.0, spec.noise_sd, size=n)
    lon, lat = _coords(rng, n)
    keys = _keys(n)
    images = None
    if chips:
        images = np.stack(
            [make_chip(unit_rng(spec.seed, i), spec.chip_size, spec.bands, b[i], b[i]) for i in range(n)]
        )
    frame = CausalFrame(w, y, None, keys, lon, lat)
    truth = {"kind": "heterogeneous", "spec": asdict(spec), "taus": taus.tolist(),
             "labels": labels.tolist()}
    return SynthData(images, frame, truth, brightness=b, labels=labels)


def oracle_hajek(frame: CausalFrame, e_true) -> float:
    """Hajek contrast with known propensities, by explicit accumulation."""
    num_t = den_t = num_c = den_c = 0.0
    for wi, yi, ei in zip(frame.w.tolist(), frame.y.tolist(), list(np.asarray(e_true, dtype=float))):
        if wi == 1:
            num_t += yi / ei
            den_t += 1.0 / ei
        else:
            num_c += yi / (1.0 - ei)
            den_c += 1.0 / (1.0 - ei)
    return num_t / den_t - num_c / den_c


def write_synth(data: SynthData, out_dir):
    """Write chips.circ, frame.csv and truth.json into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "records": os.path.join(out_dir, "chips.circ"),
        "frame": os.path.join(out_dir, "frame.csv"),
        "truth": os.path.join(out_dir, "truth.json"),
    }
    write_records(zip(data.frame.keys, data.chips), paths["records"])
    write_frame(data.frame, paths["frame"])
    truth = dict(data.truth)
    if data.e_true is not None:
        truth["e_true"] = data.e_true.tolist()
    if data.brightness is not None:
        truth["brightness"] = data.brightness.tolist()
    with open(paths["truth"], "w") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
    return paths
