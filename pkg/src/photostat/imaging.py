"""Synthetic confocal raster scans and spot-level polarization series.

Geometry: ``image[iy, ix]`` is the pixel whose centre sits at
``x = (ix + 0.5) * dx``, ``y = (iy + 0.5) * dy`` micrometres, with
``dx = field_size[0] / pixels[0]``. Positions are in um, PSF widths in nm.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import trim_mean

from .core import make_rng, write_json
from .errors import InvalidConfig, IoFailure, NonConvergence, SingularJacobian
from .models.lm import LMOptions, levenberg_marquardt
from .models.polarization import axial_deviation_deg, fit_polarization, orientation_spread

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # 2.3548
RED_SITE_OFFSET_DEG = 7.0


@dataclass
class ScanConfig:
    field_size: tuple = (16.0, 16.0)  # um
    pixels: tuple = (200, 200)
    psf_fwhm: float = 400.0  # nm
    dwell_rate_scale: float = 200.0  # peak counts per unit brightness
    background_rate: float = 2.0  # counts / pixel
    polarizer_angle_deg: float = 0.0
    seed: int = 0
    window_fwhm: float = 3.0  # fit / integration window edge, in PSF FWHM
    annulus_fwhm: tuple = (2.0, 3.0)  # background annulus radii, in PSF FWHM

    def validate(self):
        if len(self.field_size) != 2 or min(self.field_size) <= 0:
            raise InvalidConfig("field_size must be two positive lengths (um)")
        if len(self.pixels) != 2 or min(self.pixels) <= 0 or any(int(p) != p for p in self.pixels):
            raise InvalidConfig("pixels must be two positive integers")
        if not self.psf_fwhm > 0:
            raise InvalidConfig("psf_fwhm must be positive")
        if self.dwell_rate_scale < 0 or self.background_rate < 0:
            raise InvalidConfig("dwell_rate_scale and background_rate must be non-negative")
        if not 0 < self.annulus_fwhm[0] < self.annulus_fwhm[1]:
            raise InvalidConfig("annulus_fwhm must be (inner, outer) with 0 < inner < outer")
        return self

    @property
    def pixel_size(self):
        """(dx, dy) in um."""
        return self.field_size[0] / self.pixels[0], self.field_size[1] / self.pixels[1]

    @property
    def psf_sigma_um(self):
        return self.psf_fwhm / 1000.0 / FWHM_PER_SIGMA

    def pixel_centers(self):
        dx, dy = self.pixel_size
        return (np.arange(self.pixels[0]) + 0.5) * dx, (np.arange(self.pixels[1]) + 0.5) * dy

    def with_angle(self, angle_deg):
        d = asdict(self)
        d["polarizer_angle_deg"] = float(angle_deg)
        return ScanConfig(**d)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("field_size", "pixels", "annulus_fwhm"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class Emitter:
    x: float  # um
    y: float  # um
    dipole_angle_deg: float = 0.0
    brightness: float = 1.0
    angle_offset_deg: float = 0.0  # e.g. RED_SITE_OFFSET_DEG for red-site molecules
    group: int = 0  # crystal index

    @property
    def effective_angle_deg(self):
        return self.dipole_angle_deg + self.angle_offset_deg


@dataclass
class EmitterLayout:
    emitters: list = field(default_factory=list)
    density_hint: float = 0.4  # emitters / um^2

    def out_of_field(self, config):
        w, h = config.field_size
        return [i for i, e in enumerate(self.emitters) if not (0 <= e.x <= w and 0 <= e.y <= h)]

    def to_dict(self):
        return {"density_hint": self.density_hint, "emitters": [asdict(e) for e in self.emitters]}

    @classmethod
    def from_dict(cls, d):
        return cls([Emitter(**e) for e in d.get("emitters", [])], d.get("density_hint", 0.4))


@dataclass
class SpotDetection:
    centroid: tuple  # (x, y) um
    amplitude: float  # peak counts above background
    fwhm_est: float  # nm
    isolation_flag: bool
    background: float = 0.0  # counts / pixel
    extended: bool = False  # fitted width > 1.1 PSF: likely merged emitters

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["centroid"] = tuple(d["centroid"])
        return cls(**d)


def random_layout(config, n=None, rng=None, min_separation=None, margin=None):
    """Uniform random emitters; ``n`` defaults to a Poisson draw at ``density_hint``.

    ``min_separation`` (um) enforces spacing by rejection; ``margin`` keeps
    emitters away from the edges.
    """
    config.validate()
    rng = rng if rng is not None else make_rng(config.seed, 4)
    w, h = config.field_size
    layout = EmitterLayout()
    if n is None:
        n = int(rng.poisson(layout.density_hint * w * h))
    margin = margin if margin is not None else 0.0
    pts = []
    for _ in range(1000 * max(n, 1)):
        if len(pts) == n:
            break
        x, y = rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)
        if min_separation and any(math.hypot(x - px, y - py) < min_separation for px, py in pts):
            continue
        pts.append((x, y))
    if len(pts) < n:
        raise InvalidConfig(f"could not place {n} emitters with separation {min_separation} um")
    angles = rng.uniform(0.0, 180.0, n)
    layout.emitters = [Emitter(x, y, float(a)) for (x, y), a in zip(pts, angles)]
    return layout


def expected_image(layout, config, include_background=True):
    """Noise-free expected counts per pixel."""
    config.validate()
    xs, ys = config.pixel_centers()
    s2 = 2.0 * config.psf_sigma_um**2
    img = np.full((config.pixels[1], config.pixels[0]), config.background_rate if include_background else 0.0)
    cut = 8.0 * config.psf_sigma_um  # exp(-32) is below double-precision relevance here
    for e in layout.emitters:
        amp = e.brightness * math.cos(math.radians(config.polarizer_angle_deg - e.effective_angle_deg)) ** 2
        amp *= config.dwell_rate_scale
        if amp == 0.0:
            continue
        ix = np.flatnonzero(np.abs(xs - e.x) < cut)
        iy = np.flatnonzero(np.abs(ys - e.y) < cut)
        if ix.size == 0 or iy.size == 0:
            continue
        gx = np.exp(-((xs[ix] - e.x) ** 2) / s2)
        gy = np.exp(-((ys[iy] - e.y) ** 2) / s2)
        img[iy[0]:iy[-1] + 1, ix[0]:ix[-1] + 1] += amp * np.outer(gy, gx)
    return img


def _angle_key(angle_deg):
    return int(round(float(np.mod(angle_deg, 360.0)) * 1e6))


def render_scan(layout, config):
    """Poisson-sampled scan. Each pixel row draws from its own sub-stream
    ``(seed, 3, angle key, row)`` so rows can be rendered independently."""
    lam = expected_image(layout, config)
    out = np.empty(lam.shape, dtype=np.int64)
    key = _angle_key(config.polarizer_angle_deg)
    for row in range(lam.shape[0]):
        out[row] = make_rng(config.seed, 3, key, row).poisson(lam[row])
    return out


def _gauss2d(params, xx, yy):
    a, x0, y0, sig, bg = params
    return a * np.exp(-((xx - x0) ** 2 + (yy - y0) ** 2) / (2 * sig**2)) + bg


def _gauss2d_jac(params, xx, yy):
    a, x0, y0, sig, bg = params
    r2 = (xx - x0) ** 2 + (yy - y0) ** 2
    g = np.exp(-r2 / (2 * sig**2))
    return np.column_stack([
        g,
        a * g * (xx - x0) / sig**2,
        a * g * (yy - y0) / sig**2,
        a * g * r2 / sig**3,
        np.ones_like(g),
    ])


def _window(shape, iy, ix, half):
    y0, y1 = max(iy - half, 0), min(iy + half + 1, shape[0])
    x0, x1 = max(ix - half, 0), min(ix + half + 1, shape[1])
    return slice(y0, y1), slice(x0, x1)


def _fit_spot(img, iy, ix, config, bg):
    """Gaussian fit in the window around pixel (iy, ix); returns (a, x, y, sigma) in um."""
    dx, dy = config.pixel_size
    half = int(round(config.window_fwhm * config.psf_fwhm / 1000.0 / dx / 2))
    sy, sx = _window(img.shape, iy, ix, half)
    xs, ys = config.pixel_centers()
    xx, yy = np.meshgrid(xs[sx], ys[sy])
    xx, yy, c = xx.ravel(), yy.ravel(), img[sy, sx].astype(float).ravel()
    x0 = [max(float(img[iy, ix]) - bg, 1.0), xs[ix], ys[iy], config.psf_sigma_um, bg]
    lo = [0.0, xs[sx][0] - dx, ys[sy][0] - dy, 0.25 * min(dx, dy), 0.0]
    hi = [np.inf, xs[sx][-1] + dx, ys[sy][-1] + dy, 10 * config.psf_sigma_um, np.inf]
    try:
        res = levenberg_marquardt(
            lambda p: _gauss2d(p, xx, yy), x0, c, sigma=np.sqrt(np.maximum(c, 1.0)),
            jacobian=lambda p: _gauss2d_jac(p, xx, yy), bounds=(lo, hi),
            options=LMOptions(max_iter=100, raise_on_failure=False),
        )
        a, x, y, sig, b = res.values
        if res.converged and a > 0:
            return a, x, y, sig, b
    except (NonConvergence, SingularJacobian):
        pass
    # intensity-weighted centroid fallback
    w = np.maximum(c - bg, 0.0)
    if w.sum() <= 0:
        return None
    return float(w.max()), float((w * xx).sum() / w.sum()), float((w * yy).sum() / w.sum()), config.psf_sigma_um, bg


def detect_spots(image, config, threshold_sigma=5.0):
    """Local maxima of the PSF-smoothed image above ``bg + k sqrt(bg)``,
    refined by a 2D Gaussian fit over a ``window_fwhm`` x PSF-FWHM window.

    Emitters closer than about one PSF FWHM give a single detection whose
    fitted width exceeds the PSF; it is marked ``extended``. The isolation
    flag only considers other detections within 3 PSF FWHM.
    """
    config.validate()
    img = np.asarray(image, dtype=float)
    if img.shape != (config.pixels[1], config.pixels[0]):
        raise InvalidConfig(f"image shape {img.shape} does not match pixels {config.pixels}")
    if not np.any(img):
        return []
    dx, dy = config.pixel_size
    sig_px = config.psf_sigma_um / dx
    bg = float(np.median(img))
    smooth = ndimage.gaussian_filter(img, sig_px, mode="nearest")
    fwhm_px = config.psf_fwhm / 1000.0 / dx
    size = 2 * int(math.ceil(fwhm_px)) + 1
    peaks = (smooth == ndimage.maximum_filter(smooth, size=size, mode="nearest"))
    # white noise of variance bg has sd sqrt(bg) / (2 sqrt(pi) sigma_px) after smoothing
    noise = math.sqrt(max(bg, 1.0)) / (2.0 * math.sqrt(math.pi) * sig_px)
    peaks &= smooth > bg + threshold_sigma * noise
    spots = []
    for iy, ix in zip(*np.nonzero(peaks)):
        fit = _fit_spot(img, iy, ix, config, bg)
        if fit is None:
            continue
        a, x, y, sig, b = fit
        fwhm = sig * FWHM_PER_SIGMA * 1000.0
        # a real spot is at least PSF-wide and inside the scanned field
        if fwhm < 0.5 * config.psf_fwhm or not (0 <= x <= config.field_size[0] and 0 <= y <= config.field_size[1]):
            continue
        spots.append(SpotDetection((float(x), float(y)), float(a), float(fwhm), True, float(b),
                                   bool(fwhm > 1.1 * config.psf_fwhm)))
    radius = 3.0 * config.psf_fwhm / 1000.0
    for i, s in enumerate(spots):
        s.isolation_flag = not any(
            math.hypot(s.centroid[0] - o.centroid[0], s.centroid[1] - o.centroid[1]) < radius
            for j, o in enumerate(spots) if j != i
        )
    spots.sort(key=lambda s: (s.centroid[1], s.centroid[0]))
    return spots


@dataclass
class PolarizationSeries:
    spot: SpotDetection
    angles_deg: np.ndarray
    intensity: np.ndarray  # background-subtracted, normalised to max
    raw_signal: np.ndarray  # background-subtracted counts in the window
    flags: list = field(default_factory=list)

    def points(self):
        return np.column_stack([self.angles_deg, self.intensity])


def _masks(config, spot):
    xs, ys = config.pixel_centers()
    fwhm = config.psf_fwhm / 1000.0
    half = config.window_fwhm * fwhm / 2
    r_in, r_out = config.annulus_fwhm[0] * fwhm, config.annulus_fwhm[1] * fwhm
    xx, yy = np.meshgrid(xs, ys)
    dxs, dys = xx - spot.centroid[0], yy - spot.centroid[1]
    window = (np.abs(dxs) <= half) & (np.abs(dys) <= half)
    r = np.hypot(dxs, dys)
    annulus = (r >= r_in) & (r < r_out) & ~window
    return window, annulus


def extract_polarization_series(images, spots, config, floor_sigma=3.0):
    """Per spot: window sum minus annulus (trimmed-mean) background, normalised to max.

    ``images`` is a list of ``(polarizer_angle_deg, image)``. Spots whose
    signal never clears ``floor_sigma`` times the background noise are
    returned with the ``SpotLost`` flag.
    """
    config.validate()
    if not images:
        raise InvalidConfig("no images given")
    shape = (config.pixels[1], config.pixels[0])
    for _, im in images:
        if np.shape(im) != shape:
            raise InvalidConfig("all images must share the configured geometry")
    angles = np.array([float(a) for a, _ in images])
    out = []
    for spot in spots:
        window, annulus = _masks(config, spot)
        n_win = int(window.sum())
        n_ann = int(annulus.sum())
        sig = np.empty(len(images))
        noise = np.empty(len(images))
        for k, (_, im) in enumerate(images):
            im = np.asarray(im, dtype=float)
            # trimmed mean: the median of integer counts is quantised and biases the sum
            bg = float(trim_mean(im[annulus], 0.1)) if annulus.any() else 0.0
            sig[k] = im[window].sum() - bg * n_win
            # window shot noise plus the scaled-up error of the background estimate
            noise[k] = math.sqrt(max(bg, 1.0) * n_win * (1.0 + n_win / max(n_ann, 1)))
        flags = []
        if not np.any(sig > floor_sigma * noise):
            flags.append("SpotLost")
        top = sig.max()
        if top > 0:
            norm = sig / top
        else:
            norm = sig.copy()
            flags.append("non_positive_signal")
        out.append(PolarizationSeries(spot, angles, norm, sig, flags))
    return out


def fit_series(series):
    """Malus fit of each series; returns list of FitResult."""
    return [fit_polarization(s.points()) for s in series]


def angle_grid(spec):
    """'0:180:15' -> [0, 15, ..., 165] (stop exclusive)."""
    parts = str(spec).split(":")
    if len(parts) != 3:
        raise InvalidConfig(f"angle range must be start:stop:step, got {spec!r}")
    start, stop, step = (float(p) for p in parts)
    if not step > 0 or stop <= start:
        raise InvalidConfig("angle range needs step > 0 and stop > start")
    return start + step * np.arange(int(math.ceil((stop - start) / step - 1e-9)))


def scan_series(layout, config, angles):
    """Rendered frames ``[(angle, image)]`` at each polarizer angle."""
    return [(float(a), render_scan(layout, config.with_angle(a))) for a in angles]


def detection_image(frames):
    """Sum over polarizer angles; every dipole shows up in it."""
    return np.sum([im for _, im in frames], axis=0)


@dataclass
class CrystalBatchResult:
    true_angles: np.ndarray
    fitted_angles: np.ndarray
    groups: np.ndarray
    spread_deg: np.ndarray  # deviation from per-crystal axial mean
    errors_deg: np.ndarray  # fitted - true (axial)
    n_detected: int
    n_expected: int

    def histogram(self, bin_deg=2.0, limit=30.0):
        edges = np.arange(-limit, limit + bin_deg / 2, bin_deg)
        counts, edges = np.histogram(self.spread_deg, bins=edges)
        return edges, counts

    def fraction_within(self, deg):
        return float(np.mean(np.abs(self.spread_deg) <= deg)) if self.spread_deg.size else 0.0


def _split(total, parts, rng):
    base = np.full(parts, total // parts)
    base[rng.choice(parts, total - base.sum(), replace=False)] += 1
    return base


def crystal_batch(n_molecules=58, n_crystals=12, spread_deg=3.0, angles=None, config=None, seed=0,
                  red_site_fraction=0.0):
    """Synthetic multi-crystal polarization study with known truth.

    Each crystal is one scan field with a shared dipole axis; molecules
    scatter around it by ``spread_deg`` (Gaussian sd). Molecules are
    placed well apart so every spot is isolated.
    """
    config = config or ScanConfig(field_size=(8.0, 8.0), pixels=(100, 100), seed=seed)
    angles = np.arange(0.0, 180.0, 15.0) if angles is None else np.asarray(angles, float)
    rng = make_rng(seed, 5)
    per = _split(n_molecules, n_crystals, rng)
    fwhm = config.psf_fwhm / 1000.0
    true, fitted, groups = [], [], []
    n_detected = 0
    for c, n in enumerate(per):
        axis = float(rng.uniform(0.0, 180.0))
        layout = random_layout(config, n=int(n), rng=rng, min_separation=4 * fwhm, margin=2.5 * fwhm)
        for e in layout.emitters:
            e.dipole_angle_deg = axis + float(rng.normal(0.0, spread_deg))
            e.group = c
            if rng.uniform() < red_site_fraction:
                e.angle_offset_deg = RED_SITE_OFFSET_DEG
        cfg = ScanConfig.from_dict({**config.to_dict(), "seed": int(seed * 1000 + c)})
        frames = scan_series(layout, cfg, angles)
        spots = detect_spots(detection_image(frames) / len(frames), cfg)
        n_detected += len(spots)
        series = extract_polarization_series(frames, spots, cfg)
        for s in series:
            near = min(layout.emitters, key=lambda e: math.hypot(e.x - s.spot.centroid[0], e.y - s.spot.centroid[1]))
            res = fit_polarization(s.points())
            true.append(near.effective_angle_deg % 180.0)
            fitted.append(res.derived["dipole_angle_deg"][0])
            groups.append(c)
    true, fitted, groups = np.array(true), np.array(fitted), np.array(groups)
    return CrystalBatchResult(
        true_angles=true,
        fitted_angles=fitted,
        groups=groups,
        spread_deg=orientation_spread(fitted, groups) if fitted.size else fitted,
        errors_deg=axial_deviation_deg(fitted, 0.0) - axial_deviation_deg(true, 0.0) if fitted.size else fitted,
        n_detected=n_detected,
        n_expected=int(n_molecules),
    )


def write_image(image, config, path):
    """CSV matrix (rows = y) plus ``<file name>.json`` with geometry."""
    path = Path(path)
    arr = np.asarray(image)
    fmt = "%d" if np.issubdtype(arr.dtype, np.integer) else "%.17g"
    np.savetxt(path, arr, fmt=fmt, delimiter=",")
    dx, dy = config.pixel_size
    meta = {
        "scan_config": config.to_dict(),
        "pixel_size_um": [dx, dy],
        "pixel_centers": "x = (ix + 0.5) * dx, y = (iy + 0.5) * dy; rows are y",
        "shape": list(arr.shape),
    }
    write_json(meta, image_sidecar(path))


def image_sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_image(path):
    """Returns ``(image, ScanConfig or None)``."""
    path = Path(path)
    try:
        img = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    side = image_sidecar(path)
    cfg = None
    if side.exists():
        cfg = ScanConfig.from_dict(json.loads(side.read_text())["scan_config"])
    if np.all(img == np.round(img)):
        img = img.astype(np.int64)
    return img, cfg
