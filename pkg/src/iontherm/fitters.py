"""
Damped nonlinear least squares and the two lineshape models fitted to data:
a rotated 2D Gaussian for ion images and a Lorentzian with a smoothed step
cutoff for fluorescence spectra.

Fits run in scaled units (pixels and normalised counts for images, MHz and
normalised rates for spectra) and are reported in SI.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import GL_NODES, GL_WEIGHTS


class RankDeficiencyError(np.linalg.LinAlgError):
    """Normal equations are singular: some parameters are not identifiable."""


class FlatImageError(ValueError):
    pass


class InsufficientSpanError(ValueError):
    pass


@dataclass
class FitResult:
    params: np.ndarray
    covariance: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    names: tuple = ()
    model: object = None
    message: str = ""
    history: list = field(default_factory=list, repr=False)

    @property
    def errors(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))

    def to_text(self):
        """Flat ``parameter value one_sigma`` lines plus fit diagnostics."""
        names = self.names or tuple(f"p{i}" for i in range(len(self.params)))
        lines = [f"{n} {v:.9e} {e:.9e}" for n, v, e in zip(names, self.params, self.errors)]
        lines.append(f"residual_norm {self.residual_norm:.9e}")
        lines.append(f"iterations {self.iterations}")
        lines.append(f"converged {int(self.converged)}")
        return "\n".join(lines)


def least_squares(fun, x0, max_iter=500, xtol=1e-8, ftol=1e-10):
    """Levenberg-Marquardt minimisation of ||r(p)||^2.

    ``fun(p)`` returns ``(residuals, jacobian)``. Damping is Marquardt's
    diagonal scaling; the first trial step is undamped Gauss-Newton.
    Converges when the relative step falls below ``xtol`` or the relative
    cost decrease of an accepted step falls below ``ftol``. The residual norm
    never increases between accepted iterates.

    Raises RankDeficiencyError if the Jacobian is rank deficient at the start
    or at the solution. After ``max_iter`` iterations returns the best point
    with ``converged=False``.
    """
    p = np.array(x0, dtype=float)
    r, J = fun(p)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(J))):
        raise ValueError("non-finite residuals or Jacobian at the initial guess")
    n = p.size
    if np.linalg.matrix_rank(J) < n:
        raise RankDeficiencyError("Jacobian is rank deficient at the initial guess")
    cost = float(r @ r)
    history = [math.sqrt(cost)]
    lam = 0.0
    it = 0
    converged = cost == 0.0
    message = "zero residual" if converged else ""

    while not converged and it < max_iter:
        it += 1
        A = J.T @ J
        g = J.T @ r
        d = np.diag(A).copy()
        floor = max(d.max(), 1.0) * 1e-15
        d[d < floor] = floor
        accepted = False
        while True:
            try:
                h = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                h = None
            if h is not None and np.all(np.isfinite(h)):
                p_new = p + h
                r_new, J_new = fun(p_new)
                cost_new = float(r_new @ r_new)
                if np.isfinite(cost_new) and np.all(np.isfinite(J_new)) and cost_new <= cost:
                    accepted = True
                    break
                if np.linalg.norm(h) <= xtol * (np.linalg.norm(p) + xtol):
                    converged, message = True, "step below xtol"
                    break
            lam = max(10.0 * lam, 1e-3)
            if lam > 1e16:
                converged, message = True, "no descent at machine precision"
                break
        if not accepted:
            break
        rel_dec = (cost - cost_new) / cost
        small = np.linalg.norm(h) <= xtol * (np.linalg.norm(p) + xtol)
        p, r, J, cost = p_new, r_new, J_new, cost_new
        history.append(math.sqrt(cost))
        lam = lam / 10.0 if lam > 1e-12 else 0.0
        if cost == 0.0:
            converged, message = True, "zero residual"
        elif small:
            converged, message = True, "step below xtol"
        elif rel_dec < ftol:
            converged, message = True, "cost decrease below ftol"

    if not converged:
        message = f"no convergence after {max_iter} iterations"
    if np.linalg.matrix_rank(J) < n:
        raise RankDeficiencyError("Jacobian is rank deficient at the solution")
    m = r.size
    s2 = cost / (m - n) if m > n else 0.0
    cov = s2 * np.linalg.inv(J.T @ J)
    cov = 0.5 * (cov + cov.T)
    return FitResult(p, cov, math.sqrt(cost), it, converged, message=message, history=history)


# ---------------------------------------------------------------------------
# rotated 2D Gaussian
# ---------------------------------------------------------------------------

GAUSS2D_NAMES = ("amplitude", "x0", "y0", "w_x", "w_y", "rotation_deg", "offset")


@dataclass(frozen=True)
class Gauss2DParams:
    amplitude: float  # counts
    x0: float  # m
    y0: float  # m
    w_x: float  # m, 1/e^2
    w_y: float  # m, 1/e^2
    rotation: float = 0.0  # deg
    offset: float = 0.0  # counts

    def as_array(self):
        return np.array([self.amplitude, self.x0, self.y0, self.w_x, self.w_y, self.rotation, self.offset])


def gauss2d_model(params, x, y):
    """Rotated 2D Gaussian A exp(-2u^2/wx^2 - 2v^2/wy^2) + B and its Jacobian.

    ``params`` is a Gauss2DParams or array (A, x0, y0, wx, wy, phi_deg, B).
    Returns (values, jacobian) with jacobian shape x.shape + (7,).
    """
    if isinstance(params, Gauss2DParams):
        params = params.as_array()
    A, x0, y0, wx, wy, phi_deg, B = params
    phi = math.radians(phi_deg)
    c, s = math.cos(phi), math.sin(phi)
    dx = np.asarray(x) - x0
    dy = np.asarray(y) - y0
    u = dx * c + dy * s
    v = -dx * s + dy * c
    ax = 1.0 / wx**2
    ay = 1.0 / wy**2
    E = np.exp(-2.0 * (u * u * ax + v * v * ay))
    AE = A * E
    J = np.empty(E.shape + (7,))
    J[..., 0] = E
    J[..., 1] = 4.0 * AE * (u * c * ax - v * s * ay)
    J[..., 2] = 4.0 * AE * (u * s * ax + v * c * ay)
    J[..., 3] = 4.0 * AE * u * u * ax / wx
    J[..., 4] = 4.0 * AE * v * v * ay / wy
    J[..., 5] = 4.0 * AE * u * v * (ay - ax) * (math.pi / 180.0)
    J[..., 6] = 1.0
    return AE + B, J


def gauss2d_pixel_model(params, x, y, pitch):
    """gauss2d_model averaged over square pixels of side ``pitch`` centred at (x, y)."""
    val = 0.0
    jac = 0.0
    for tx, wx in zip(GL_NODES, GL_WEIGHTS):
        for ty, wy in zip(GL_NODES, GL_WEIGHTS):
            f, J = gauss2d_model(params, x + tx * pitch, y + ty * pitch)
            val = val + wx * wy * f
            jac = jac + wx * wy * J
    return val, jac


def _separable_pixel_model(p, xs, ys, free):
    """Axis-aligned pixel-averaged Gaussian on a grid (unit pitch).

    With no rotation the tensor Gauss-Legendre average factorises into two 1D
    averages, so this equals gauss2d_pixel_model at phi = 0 at a fraction of
    the cost. Returns values (h*w,) and Jacobian columns for ``free``.
    """
    A, x0, y0, wx, wy, _, B = p
    t = GL_NODES[:, None]
    wts = GL_WEIGHTS[:, None]
    dx = xs[None, :] + t - x0
    dy = ys[None, :] + t - y0
    ex = np.exp(-2.0 * dx * dx / wx**2)
    ey = np.exp(-2.0 * dy * dy / wy**2)
    gx = (wts * ex).sum(axis=0)
    gy = (wts * ey).sum(axis=0)
    gx_x0 = (wts * ex * 4.0 * dx / wx**2).sum(axis=0)
    gy_y0 = (wts * ey * 4.0 * dy / wy**2).sum(axis=0)
    gx_w = (wts * ex * 4.0 * dx * dx / wx**3).sum(axis=0)
    gy_w = (wts * ey * 4.0 * dy * dy / wy**3).sum(axis=0)
    cols = {
        0: np.outer(gy, gx),
        1: A * np.outer(gy, gx_x0),
        2: A * np.outer(gy_y0, gx),
        3: A * np.outer(gy, gx_w),
        4: A * np.outer(gy_w, gx),
        6: np.ones((len(ys), len(xs))),
    }
    f = A * cols[0] + B
    J = np.stack([cols[k].ravel() for k in free], axis=1)
    return f.ravel(), J


def _moment_guess(img, fit_rotation):
    h, w = img.shape
    border = np.concatenate([img[0], img[-1], img[1:-1, 0], img[1:-1, -1]])
    offset = float(np.median(border))
    d = img - offset
    peak = d.max()
    mask = d > 0.05 * peak
    wts = np.where(mask, d, 0.0)
    total = wts.sum()
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cx = (wts * xx).sum() / total
    cy = (wts * yy).sum() / total
    vxx = (wts * (xx - cx) ** 2).sum() / total + 1.0 / 12
    vyy = (wts * (yy - cy) ** 2).sum() / total + 1.0 / 12
    vxy = (wts * (xx - cx) * (yy - cy)).sum() / total
    if fit_rotation:
        evals, evecs = np.linalg.eigh(np.array([[vxx, vxy], [vxy, vyy]]))
        major = evecs[:, 1]
        phi = math.degrees(math.atan2(major[1], major[0]))
        wx, wy = 2.0 * math.sqrt(max(evals[1], 0.0625)), 2.0 * math.sqrt(max(evals[0], 0.0625))
    else:
        phi = 0.0
        wx, wy = 2.0 * math.sqrt(vxx), 2.0 * math.sqrt(vyy)
    amp = float(img.max() - img.min())
    return np.array([amp, cx, cy, wx, wy, phi, offset])


def _wrap_angle(phi):
    return (phi + 90.0) % 180.0 - 90.0


def _shot_noise_covariance(fun, q, p, z, wt, image, scale):
    # Sandwich estimate (J'W J)^-1 J'W V W J (J'W J)^-1 with V the expected
    # per-pixel variance (Poisson signal from the fitted model plus read noise).
    r, Jw = fun(q)
    signal = (r / wt if wt is not None else r) + z
    var = np.maximum(signal - image.baseline_offset / scale, 0.0) / scale + (image.read_noise / scale) ** 2
    wv = var if wt is None else var * wt * wt
    bread = np.linalg.inv(Jw.T @ Jw)
    meat = Jw.T @ (Jw * wv[:, None])
    cov = bread @ meat @ bread
    return 0.5 * (cov + cov.T)


def fit_ion_image(image, fit_rotation=False, pixel_integrate=True, weights=None, max_iter=500,
                  covariance="shot-noise"):
    """Fit a 2D Gaussian to an IonImage.

    Initialised from moments (border median offset, thresholded centroid and
    second moments, max-min amplitude). The model is averaged over each pixel
    unless ``pixel_integrate`` is False. ``weights="poisson"`` weights each
    pixel by 1/sqrt(max(counts - offset + read variance, 1)).

    The parameter covariance defaults to the shot-noise sandwich estimate:
    the fitted model gives each pixel's Poisson variance (plus read noise),
    which is what the background-dominated residual variance underestimates.
    ``covariance="residual"`` returns the plain residual-scaled estimate.

    Returns a FitResult in SI units (centre and radii in metres, measured
    from the image corner) with a Gauss2DParams in ``.model``.
    """
    counts = np.asarray(image.counts, dtype=float)
    scale = float(counts.max() - counts.min())
    if not scale > 0:
        raise FlatImageError("image is flat; nothing to fit")
    data = counts / scale
    h, w = data.shape
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    xx = xx.ravel()
    yy = yy.ravel()
    z = data.ravel()
    if weights == "poisson":
        wt = 1.0 / np.sqrt(np.maximum(counts.ravel(), 1.0)) * scale
    elif weights is None:
        wt = None
    else:
        wt = np.asarray(weights, dtype=float).ravel()

    p0 = _moment_guess(data, fit_rotation)
    free = [0, 1, 2, 3, 4, 5, 6] if fit_rotation else [0, 1, 2, 3, 4, 6]

    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5

    def fun(q):
        p = p0.copy()
        p[free] = q
        if pixel_integrate and not fit_rotation:
            f, J = _separable_pixel_model(p, xs, ys, free)
        elif pixel_integrate:
            f, J = gauss2d_pixel_model(p, xx, yy, 1.0)
        else:
            f, J = gauss2d_model(p, xx, yy)
        if J.shape[1] != len(free):
            J = J[:, free]
        r = f - z
        if wt is not None:
            r = r * wt
            J = J * wt[:, None]
        return r, J

    res = least_squares(fun, p0[free], max_iter=max_iter)
    p = p0.copy()
    p[free] = res.params
    cov = np.zeros((7, 7))
    if covariance == "shot-noise":
        cov[np.ix_(free, free)] = _shot_noise_covariance(fun, res.params, p, z, wt, image, scale)
    elif covariance == "residual":
        cov[np.ix_(free, free)] = res.covariance
    else:
        raise ValueError("covariance must be 'shot-noise' or 'residual'")

    pitch = image.pixel_pitch
    p[3], p[4] = abs(p[3]), abs(p[4])
    p[5] = _wrap_angle(p[5])
    units = np.array([scale, pitch, pitch, pitch, pitch, 1.0, scale])
    p_si = p * units
    cov_si = cov * np.outer(units, units)
    model = Gauss2DParams(*p_si)
    return FitResult(p_si, cov_si, res.residual_norm * scale, res.iterations, res.converged,
                     GAUSS2D_NAMES, model, res.message, res.history)


# ---------------------------------------------------------------------------
# cutoff Lorentzian for fluorescence spectra
# ---------------------------------------------------------------------------

SPECTRUM_NAMES = ("amplitude", "nu0_hz", "gamma_t_hz", "laser_linewidth_hz", "offset")


@dataclass(frozen=True)
class SpectrumParams:
    amplitude: float  # rate * Hz^2
    nu0: float  # Hz, resonance (relative to the scan origin)
    gamma_t: float  # Hz, total FWHM
    laser_linewidth: float  # Hz, step width
    offset: float  # rate

    def as_array(self):
        return np.array([self.amplitude, self.nu0, self.gamma_t, self.laser_linewidth, self.offset])


@dataclass
class SpectrumScan:
    """Fluorescence samples: laser frequency offset (Hz, negative = red), rate (1/s), dwell (s)."""
    detuning_hz: np.ndarray
    rate: np.ndarray
    dwell: np.ndarray

    def __post_init__(self):
        self.detuning_hz = np.asarray(self.detuning_hz, dtype=float)
        self.rate = np.asarray(self.rate, dtype=float)
        self.dwell = np.broadcast_to(np.asarray(self.dwell, dtype=float), self.detuning_hz.shape).copy()

    def __len__(self):
        return len(self.detuning_hz)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["detuning_hz", "rate_per_s", "dwell_s"])
            for d, r, t in zip(self.detuning_hz, self.rate, self.dwell):
                out.writerow([f"{d:.9e}", f"{r:.9e}", f"{t:.9e}"])

    @classmethod
    def from_csv(cls, path):
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"detuning_hz", "rate_per_s"} <= set(rows[0]):
            raise ValueError(f"{path}: expected columns detuning_hz, rate_per_s[, dwell_s]")
        det = [float(r["detuning_hz"]) for r in rows]
        rate = [float(r["rate_per_s"]) for r in rows]
        dwell = [float(r.get("dwell_s") or 1.0) for r in rows]
        return cls(det, rate, dwell)


def _step(dn, dl, literal):
    if literal:
        return np.arctan(dn / dl)
    return 0.5 + np.arctan(dn / dl) / math.pi


def spectrum_model(params, nu_l, literal=False):
    """Cutoff Lorentzian A/(dn^2 + (G/2)^2) * step(dn/D) + B with dn = nu0 - nu_L.

    The step is 1/2 + arctan(dn/D)/pi, so fluorescence survives red of
    resonance (dn > 0) and is cut off on the blue side. ``literal=True`` uses
    the bare arctan instead (can go negative). Returns (values, jacobian).
    """
    if isinstance(params, SpectrumParams):
        params = params.as_array()
    A, nu0, gt, dl, B = params
    dn = nu0 - np.asarray(nu_l, dtype=float)
    hw2 = 0.25 * gt * gt
    L = 1.0 / (dn * dn + hw2)
    st = _step(dn, dl, literal)
    k = 1.0 if literal else 1.0 / math.pi
    dst_ddn = k * dl / (dl * dl + dn * dn)
    dst_ddl = -k * dn / (dl * dl + dn * dn)
    J = np.empty(dn.shape + (5,))
    J[..., 0] = L * st
    J[..., 1] = A * (-2.0 * dn * L * L * st + L * dst_ddn)
    J[..., 2] = A * st * (-L * L * 0.5 * gt)
    J[..., 3] = A * L * dst_ddl
    J[..., 4] = 1.0
    return A * L * st + B, J


def _spectrum_guess(nu, y, laser_linewidth):
    order = np.argsort(nu)
    nu, y = nu[order], y[order]
    offset = float(y.min())
    i_pk = int(np.argmax(y))
    slope = np.diff(y) / np.diff(nu)
    blue = np.arange(i_pk, len(nu) - 1)
    j = blue[np.argmin(slope[blue])]
    nu0 = 0.5 * (nu[j] + nu[j + 1])
    half = offset + 0.5 * (y[i_pk] - offset)
    red = np.nonzero(y[:i_pk + 1] < half)[0]
    if red.size:
        k = red[-1]
        t = (half - y[k]) / (y[k + 1] - y[k])
        nu_half = nu[k] + t * (nu[k + 1] - nu[k])
    else:
        nu_half = nu[0]
    gt = max(2.0 * (nu0 - nu_half), 2.0 * float(np.median(np.diff(nu))))
    dl = laser_linewidth if laser_linewidth and laser_linewidth > 0 else float(np.median(np.diff(nu)))
    st = 0.5 + math.atan((nu0 - nu[i_pk]) / dl) / math.pi
    amp = (y[i_pk] - offset) * ((nu0 - nu[i_pk]) ** 2 + 0.25 * gt * gt) / max(st, 1e-3)
    return np.array([amp, nu0, gt, dl, offset])


def fit_spectrum(scan, laser_linewidth=None, literal=False, weights=None, max_iter=500,
                 fix_linewidth=False):
    """Fit the cutoff Lorentzian to a SpectrumScan.

    ``laser_linewidth`` (Hz) seeds the step width; with ``fix_linewidth``
    the step width is held at that value instead of fitted. Needs >= 8
    points with at least two on each side of the fluorescence maximum.
    ``weights="poisson"`` weights points by their shot-noise standard
    deviation.
    """
    if fix_linewidth and not (laser_linewidth and laser_linewidth > 0):
        raise ValueError("fix_linewidth needs a positive laser_linewidth")
    nu = np.asarray(scan.detuning_hz, dtype=float)
    y = np.asarray(scan.rate, dtype=float)
    if len(nu) < 8:
        raise InsufficientSpanError(f"need >= 8 scan points, got {len(nu)}")
    order = np.argsort(nu)
    nu, y, dwell = nu[order], y[order], np.asarray(scan.dwell, dtype=float)[order]
    i_pk = int(np.argmax(y))
    if i_pk < 2 or i_pk > len(nu) - 3:
        raise InsufficientSpanError("scan must span both the red wing and the blue cutoff of the peak")
    yscale = float(y.max())
    if not yscale > 0:
        raise InsufficientSpanError("no fluorescence in scan")
    f_mhz = nu * 1e-6
    z = y / yscale
    p0 = _spectrum_guess(f_mhz, z, None if laser_linewidth is None else laser_linewidth * 1e-6)
    if weights == "poisson":
        var = np.maximum(y, 1.0 / dwell) / dwell
        wt = yscale / np.sqrt(var)
    else:
        wt = None

    free = [0, 1, 2, 4] if fix_linewidth else [0, 1, 2, 3, 4]

    def fun(q):
        p = p0.copy()
        p[free] = q
        f, J = spectrum_model(p, f_mhz, literal)
        r = f - z
        J = J[:, free]
        if wt is not None:
            r = r * wt
            J = J * wt[:, None]
        return r, J

    res = least_squares(fun, p0[free], max_iter=max_iter)
    p = p0.copy()
    p[free] = res.params
    p[2], p[3] = abs(p[2]), abs(p[3])
    cov = np.zeros((5, 5))
    cov[np.ix_(free, free)] = res.covariance
    units = np.array([yscale * 1e12, 1e6, 1e6, 1e6, yscale])
    p_si = p * units
    cov_si = cov * np.outer(units, units)
    return FitResult(p_si, cov_si, res.residual_norm * yscale, res.iterations, res.converged,
                     SPECTRUM_NAMES, SpectrumParams(*p_si), res.message, res.history)
