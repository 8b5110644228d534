"""
Synthetic CCD frames of a trapped ion.

The forward model: thermal Gaussian spread of the ion convolved with a Gaussian
PSF of 1/e^2 radius ``psf_radius``, integrated over each pixel, scaled to the
expected detected photon number, then Poisson shot noise, Gaussian read noise
and a baseline offset. All lengths are object-plane.

Pixel (row i, column j) covers x in [j p, (j+1) p], y in [i p, (i+1) p].
Rotation angles are measured from +x towards +y.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# 4-point Gauss-Legendre on [-1/2, 1/2] (weights sum to 1)
_GL_T, _GL_W = np.polynomial.legendre.leggauss(4)
GL_NODES = 0.5 * _GL_T
GL_WEIGHTS = 0.5 * _GL_W

TRUNCATION_FRACTION = 0.999
MIN_TRAJECTORY_SAMPLES = 1000


class InsufficientSamplesError(ValueError):
    pass


@dataclass
class IonImage:
    counts: np.ndarray  # (height, width); integer-valued unless rendered noiseless
    pixel_pitch: float  # m, object plane
    n_photons_expected: float = 0.0
    seed: int | None = None
    truncated: bool = False
    on_chip_fraction: float = 1.0
    baseline_offset: float = 0.0
    read_noise: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.counts.shape[0]

    @property
    def width(self):
        return self.counts.shape[1]

    def pixel_centers(self):
        """Object-plane (x, y) of every pixel centre, each shaped like ``counts``."""
        p = self.pixel_pitch
        y, x = np.mgrid[0:self.height, 0:self.width]
        return (x + 0.5) * p, (y + 0.5) * p


def expected_spot_radius(sigma, w_i):
    """1/e^2 radius of a thermal Gaussian (std ``sigma``) seen through a Gaussian PSF."""
    return np.sqrt(4.0 * np.asarray(sigma) ** 2 + np.asarray(w_i) ** 2)


def _rotated_density(x, y, x0, y0, w1, w2, phi):
    c, s = math.cos(phi), math.sin(phi)
    u = (x - x0) * c + (y - y0) * s
    v = -(x - x0) * s + (y - y0) * c
    return 2.0 / (math.pi * w1 * w2) * np.exp(-2.0 * u**2 / w1**2 - 2.0 * v**2 / w2**2)


def pixel_probabilities(width, height, pitch, x0, y0, w1, w2, rotation_deg):
    """Fraction of a normalised rotated 2D Gaussian landing on each pixel."""
    if not (w1 > 0 and w2 > 0):
        raise ValueError("spot radii must be positive (need psf_radius > 0 or sigma > 0)")
    phi = math.radians(rotation_deg)
    yc, xc = np.mgrid[0:height, 0:width]
    xc = (xc + 0.5) * pitch
    yc = (yc + 0.5) * pitch
    prob = np.zeros((height, width))
    for tx, wx in zip(GL_NODES, GL_WEIGHTS):
        for ty, wy in zip(GL_NODES, GL_WEIGHTS):
            prob += wx * wy * _rotated_density(xc + tx * pitch, yc + ty * pitch, x0, y0, w1, w2, phi)
    return prob * pitch * pitch


def _add_camera_noise(signal_mean, imaging, rng):
    counts = rng.poisson(signal_mean).astype(float) + imaging.baseline_offset
    if imaging.read_noise > 0:
        counts = counts + rng.normal(0.0, imaging.read_noise, counts.shape)
    return np.clip(np.rint(counts), 0, None).astype(np.int64)


def render_image(sigma_x, sigma_y, spot_rotation, imaging, n_photons_expected, seed=None,
                 noise=True, center=None, shape=None):
    """Render an ion image of a thermal spot with stds (sigma_x, sigma_y).

    ``spot_rotation`` (deg) rotates the sigma_x axis away from the image x axis.
    With ``noise=False`` the returned counts are the exact expected values.
    The truncated flag is set when less than 99.9 % of the spot lands on chip.
    """
    if sigma_x < 0 or sigma_y < 0:
        raise ValueError("sigma must be non-negative")
    if not n_photons_expected > 0:
        raise ValueError("n_photons_expected must be positive")
    height, width = shape or (imaging.height, imaging.width)
    p = imaging.pixel_pitch
    if center is None:
        center = (0.5 * width * p, 0.5 * height * p)
    w1 = float(expected_spot_radius(sigma_x, imaging.psf_radius))
    w2 = float(expected_spot_radius(sigma_y, imaging.psf_radius))
    prob = pixel_probabilities(width, height, p, center[0], center[1], w1, w2, spot_rotation)
    frac = float(prob.sum())
    mean = n_photons_expected * imaging.quantum_efficiency * prob
    if noise:
        rng = np.random.default_rng(seed)
        counts = _add_camera_noise(mean, imaging, rng)
    else:
        counts = mean + imaging.baseline_offset
    meta = {"sigma_x_m": sigma_x, "sigma_y_m": sigma_y, "spot_rotation_deg": spot_rotation,
            "psf_radius_m": imaging.psf_radius}
    return IonImage(counts, p, n_photons_expected, seed, frac < TRUNCATION_FRACTION, frac,
                    imaging.baseline_offset, imaging.read_noise if noise else 0.0, meta)


def render_from_trajectory(trajectory, imaging, n_photons_expected, seed=None, center=None, shape=None):
    """Render an image from sampled ion positions.

    Each detected photon is emitted at a sample chosen with probability
    proportional to the instantaneous scattering rate, displaced by a PSF
    draw, and binned. Needs at least 1000 samples.
    """
    if len(trajectory) < MIN_TRAJECTORY_SAMPLES:
        raise InsufficientSamplesError(
            f"need >= {MIN_TRAJECTORY_SAMPLES} trajectory samples, got {len(trajectory)}")
    if not n_photons_expected > 0:
        raise ValueError("n_photons_expected must be positive")
    height, width = shape or (imaging.height, imaging.width)
    p = imaging.pixel_pitch
    if center is None:
        center = (0.5 * width * p, 0.5 * height * p)
    rng = np.random.default_rng(seed)

    weights = np.clip(np.asarray(trajectory.rate, dtype=float), 0, None)
    total = weights.sum()
    weights = weights / total if total > 0 else np.full(len(weights), 1.0 / len(weights))
    n_det = rng.poisson(n_photons_expected * imaging.quantum_efficiency)
    idx = rng.choice(len(weights), size=n_det, p=weights)

    phi = math.radians(trajectory.axis_angle)
    c, s = math.cos(phi), math.sin(phi)
    pos = trajectory.position[idx]
    x = center[0] + pos[:, 0] * c - pos[:, 1] * s
    y = center[1] + pos[:, 0] * s + pos[:, 1] * c
    blur = 0.5 * imaging.psf_radius
    x = x + rng.normal(0.0, blur, n_det)
    y = y + rng.normal(0.0, blur, n_det)

    hist, _, _ = np.histogram2d(y, x, bins=(height, width), range=((0, height * p), (0, width * p)))
    on_chip = hist.sum() / n_det if n_det else 1.0
    counts = hist + imaging.baseline_offset
    if imaging.read_noise > 0:
        counts = counts + rng.normal(0.0, imaging.read_noise, counts.shape)
    counts = np.clip(np.rint(counts), 0, None).astype(np.int64)
    meta = {"source": "trajectory", "samples": len(trajectory), "psf_radius_m": imaging.psf_radius}
    return IonImage(counts, p, n_photons_expected, seed, on_chip < TRUNCATION_FRACTION, float(on_chip),
                    imaging.baseline_offset, imaging.read_noise, meta)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_pgm(image, path):
    """16-bit binary PGM (P5, maxval 65535, big-endian) plus a ``.meta`` sidecar."""
    path = Path(path)
    data = np.clip(np.rint(image.counts), 0, 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())
    meta = {
        "pixel_pitch_object_m": repr(float(image.pixel_pitch)),
        "width_px": str(image.width),
        "height_px": str(image.height),
        "n_photons_expected": repr(float(image.n_photons_expected)),
        "seed": str(image.seed),
        "truncated": str(int(image.truncated)),
        "on_chip_fraction": repr(float(image.on_chip_fraction)),
        "baseline_offset": repr(float(image.baseline_offset)),
        "read_noise": repr(float(image.read_noise)),
    }
    for k, v in sorted(image.meta.items()):
        meta.setdefault(k, repr(v) if isinstance(v, float) else str(v))
    sidecar = path.with_suffix(path.suffix + ".meta")
    sidecar.write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
    return path


def _pgm_tokens(raw):
    # header tokens may be separated by whitespace and '#' comments
    tokens, pos = [], 2
    while len(tokens) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos + 1


def read_pgm(path, pixel_pitch=None):
    """Read a binary PGM and its sidecar; ``pixel_pitch`` overrides the sidecar."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5)")
    (width, height, maxval), start = _pgm_tokens(raw)
    dtype = ">u2" if maxval > 255 else "u1"
    counts = np.frombuffer(raw, dtype=dtype, count=width * height, offset=start)
    counts = counts.reshape(height, width).astype(np.int64)
    meta = {}
    sidecar = path.with_suffix(path.suffix + ".meta")
    if sidecar.is_file():
        for line in sidecar.read_text().splitlines():
            if "=" in line:
                k, _, v = (s.strip() for s in line.partition("="))
                meta[k] = v
    if pixel_pitch is None:
        if "pixel_pitch_object_m" not in meta:
            raise ValueError(f"{path}: no sidecar pixel pitch; pass pixel_pitch")
        pixel_pitch = float(meta["pixel_pitch_object_m"])
    return IonImage(
        counts, pixel_pitch,
        float(meta.get("n_photons_expected", 0.0)),
        None if meta.get("seed", "None") == "None" else int(meta["seed"]),
        bool(int(meta.get("truncated", 0))),
        float(meta.get("on_chip_fraction", 1.0)),
        float(meta.get("baseline_offset", 0.0)),
        float(meta.get("read_noise", 0.0)),
        meta,
    )


def write_image_csv(image, path):
    """Pixel grid as CSV with object-plane coordinates, one row per pixel."""
    x, y = image.pixel_centers()
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["row", "col", "x_m", "y_m", "counts"])
        for i in range(image.height):
            for j in range(image.width):
                out.writerow([i, j, f"{x[i, j]:.6e}", f"{y[i, j]:.6e}", f"{image.counts[i, j]:.6g}"])
