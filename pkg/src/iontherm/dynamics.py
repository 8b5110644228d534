"""
Semiclassical single-ion motion in the image plane.

The ion moves in a 2D harmonic well (principal axes 1 and 2) and is driven by
a single cooling beam (radiation pressure from a two-level scattering rate),
recoil diffusion from absorption and spontaneous emission, and an optional
white force noise along a fixed coupling direction.

Frames: positions and velocities are stored along the trap principal axes.
The beam makes an angle ``trap.axis_rotation`` with principal axis 1, so its
projection on the principal axes is (cos theta, sin theta). In the image the
first principal axis sits at ``laser.direction_angle - theta``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import wofz

from . import _kernel
from .physcore import HBAR, KB, TWO_PI, Config, IonSpecies, SimulationConfig


class NoSteadyStateError(ValueError):
    """Doppler cooling has no steady state (laser on or blue of resonance)."""


class UnstableIntegrationError(RuntimeError):
    """An ensemble member left the trap region (escape bound exceeded)."""


# ---------------------------------------------------------------------------
# closed-form rates
# ---------------------------------------------------------------------------

def scattering_rate(velocity_along_beam, laser, ion):
    """Photon scattering rate (1/s) of an ion moving along the beam."""
    gamma = ion.natural_linewidth
    s = laser.saturation
    det = 2.0 * (laser.detuning - ion.wavenumber * np.asarray(velocity_along_beam)) / gamma
    return 0.5 * gamma * s / (1.0 + s + det**2)


def analytic_doppler_temperature(detuning, saturation, ion):
    """Textbook 1D Doppler-cooling temperature (K) at red detuning."""
    if not detuning < 0:
        raise NoSteadyStateError(f"Doppler cooling needs red detuning, got {detuning!r} rad/s")
    gamma = ion.natural_linewidth
    x = 2.0 * abs(detuning) / gamma
    return HBAR * gamma / (4.0 * KB) * (1.0 + saturation + x**2) / x


def cooling_rate(detuning, saturation, ion):
    """Linear-response energy damping rate (1/s) for motion along the beam.

    Negative for blue detuning (anti-damping).
    """
    gamma = ion.natural_linewidth
    d = 1.0 + saturation + (2.0 * detuning / gamma) ** 2
    return -4.0 * HBAR * ion.wavenumber**2 * saturation * detuning / (ion.mass * gamma * d**2)


def heating_rate_from_noise(noise, ion):
    """dT/dt (K/s) per principal axis from the white force noise."""
    c = np.asarray(noise.coupling, dtype=float)
    return noise.force_psd * c**2 / (2.0 * ion.mass * KB)


def laser_projection(trap):
    """Cosines between the beam and principal axes 1, 2."""
    th = math.radians(trap.axis_rotation)
    return np.array([math.cos(th), math.sin(th)])


def principal_axis_angle(trap, laser):
    """Image-plane angle (deg) of principal axis 1."""
    return laser.direction_angle - trap.axis_rotation


def doppler_limit(ion):
    return HBAR * ion.natural_linewidth / (2.0 * KB)


# ---------------------------------------------------------------------------
# thermal balance model (Gaussian-velocity closure)
# ---------------------------------------------------------------------------

def _lorentz_average(delta, sigma, b):
    """<1/(b^2+D^2)> and its delta-derivative for D ~ N(delta, sigma^2)."""
    if sigma < 1e-9 * b:
        lor = 1.0 / (b * b + delta * delta)
        return lor, -2.0 * delta * lor * lor
    z = (delta + 1j * b) / (sigma * math.sqrt(2.0))
    w = wofz(z)
    voigt = w.real / (sigma * math.sqrt(2.0 * math.pi))
    dvoigt = -(z * w).real / (sigma * sigma * math.sqrt(math.pi))
    return math.pi / b * voigt, math.pi / b * dvoigt


def _axis_temperatures(sigma_v, c, laser, noise, ion, emission_factor):
    gamma = ion.natural_linewidth
    s = laser.saturation
    k = ion.wavenumber
    m = ion.mass
    b = 0.5 * gamma * math.sqrt(1.0 + s)
    amp = (0.5 * gamma) ** 3 * s
    mean, dmean = _lorentz_average(laser.detuning, k * sigma_v, b)
    rate = amp * mean
    dforce = -HBAR * k * k * amp * dmean  # <dF/dv>
    n = np.asarray(noise.coupling, dtype=float)
    heat = (c**2 + emission_factor) * (HBAR * k) ** 2 * rate / (2 * m) + noise.force_psd * n**2 / (2 * m)
    temps = np.full(2, np.inf)
    for a in range(2):
        damping = c[a] ** 2 * (-dforce)
        if damping > 0:
            temps[a] = heat[a] * m / (damping * KB)
    return temps


def balance_temperatures(trap, laser, noise, ion, emission_factor=0.5):
    """Steady-state temperatures from per-axis energy balance.

    Velocities are taken as Gaussian at the per-axis temperatures; the mean
    scattering rate and mean friction are then Voigt averages of the two-level
    response. Returns (T array, converged array); axes with no stable
    solution get T = inf.
    """
    c = laser_projection(trap)
    m = ion.mass

    def g(log_sv):
        sv = math.exp(log_sv)
        t = _axis_temperatures(sv, c, laser, noise, ion, emission_factor)
        used = [a for a in range(2) if c[a] ** 2 > 0]
        if any(not np.isfinite(t[a]) for a in used):
            return math.inf
        model = sum(c[a] ** 2 * KB * t[a] / m for a in used)
        return math.log(model) - 2.0 * log_sv

    grid = np.linspace(math.log(1e-5), math.log(1e3), 400)
    vals = [g(x) for x in grid]
    root = None
    for i in range(len(grid) - 1):
        if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) and vals[i] > 0 >= vals[i + 1]:
            root = brentq(g, grid[i], grid[i + 1], xtol=1e-12)
            break
    if root is None:
        return np.full(2, np.inf), np.zeros(2, dtype=bool)
    temps = _axis_temperatures(math.exp(root), c, laser, noise, ion, emission_factor)
    return temps, np.isfinite(temps)


def noise_psd_for_temperature(target, trap, laser, noise_coupling, ion, axis=0, emission_factor=0.5):
    """White-noise force PSD (N^2/Hz) that holds ``axis`` at ``target`` K in the balance model."""
    from .physcore import NoiseDriveConfig

    def resid(log_psd):
        nz = NoiseDriveConfig(force_psd=math.exp(log_psd), coupling=tuple(noise_coupling))
        t, ok = balance_temperatures(trap, laser, nz, ion, emission_factor)
        return math.log(t[axis]) - math.log(target) if ok[axis] else 50.0

    return math.exp(brentq(resid, math.log(1e-55), math.log(1e-38), xtol=1e-10))


# ---------------------------------------------------------------------------
# stochastic integration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionState:
    position: tuple = (0.0, 0.0)  # m, principal axes
    velocity: tuple = (0.0, 0.0)  # m/s
    time: float = 0.0

    def as_array(self):
        return np.array([*self.position, *self.velocity], dtype=float)


@dataclass
class Trajectory:
    """Sampled motion of one or more ensemble members (rows concatenated)."""
    time: np.ndarray
    position: np.ndarray  # (n, 2) principal axes
    velocity: np.ndarray
    rate: np.ndarray  # scattering rate at each sample
    axis_angle: float = 0.0  # image-plane angle of principal axis 1, deg
    escaped: bool = False

    def __len__(self):
        return len(self.time)

    def states(self):
        return [MotionState(tuple(p), tuple(v), t) for t, p, v in zip(self.time, self.position, self.velocity)]

    def energy(self, trap, ion):
        """Per-axis mechanical energy (J), shape (n, 2)."""
        w = trap.omega
        return 0.5 * ion.mass * (self.velocity**2 + (w * self.position) ** 2)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["time_s", "x_m", "y_m", "vx_ms", "vy_ms"])
            for t, p, v in zip(self.time, self.position, self.velocity):
                out.writerow([f"{t:.9e}", f"{p[0]:.9e}", f"{p[1]:.9e}", f"{v[0]:.9e}", f"{v[1]:.9e}"])


def max_timestep(trap):
    return 1.0 / (50.0 * max(trap.nu_x, trap.nu_y))


def member_seeds(seed, n_members):
    """Kernel seeds and init-RNG seeds derived from (seed, member index)."""
    kernel = np.empty(n_members, dtype=np.int64)
    init = []
    for i in range(n_members):
        state = np.random.SeedSequence([int(seed), i]).generate_state(2)
        kernel[i] = int(state[0])
        init.append(int(state[1]))
    return kernel, init


def thermal_states(temps, trap, ion, init_seeds):
    """One thermal (position, velocity) draw per seed at per-axis temperatures."""
    temps = np.asarray(temps, dtype=float)
    sv = np.sqrt(KB * temps / ion.mass)
    sx = sv / trap.omega
    out = np.empty((len(init_seeds), 4))
    for i, s in enumerate(init_seeds):
        rng = np.random.default_rng(s)
        out[i, :2] = rng.normal(0.0, sx)
        out[i, 2:] = rng.normal(0.0, sv)
    return out


def _run(state0, kernel_seeds, trap, laser, noise, ion, sim, dt, detunings, seg_steps,
         window_start, stride, gaussian=False):
    c = laser_projection(trap)
    n = np.asarray(noise.coupling, dtype=float)
    return _kernel.integrate(
        np.ascontiguousarray(state0, dtype=float),
        kernel_seeds,
        trap.omega.astype(float),
        c,
        n,
        np.asarray(detunings, dtype=float),
        int(seg_steps),
        float(dt),
        float(ion.natural_linewidth),
        float(laser.saturation),
        float(ion.wavenumber),
        float(ion.recoil_velocity),
        float(sim.emission_factor),
        math.sqrt(noise.force_psd * dt) / ion.mass,
        float(sim.escape_bound),
        int(window_start),
        int(sim.n_blocks),
        max(int(stride), 1),
        sim.recoil == "events",
        bool(gaussian),
    )


def simulate_trajectory(initial, trap, laser, noise, ion, duration, dt, seed,
                        sim=None, sample_every=1, gaussian=False):
    """Integrate one ion and return its sampled trajectory.

    Deterministic for a given seed. Raises UnstableIntegrationError when the
    ion passes ``sim.escape_bound``.
    """
    sim = sim or SimulationConfig()
    if not duration > 0:
        raise ValueError("duration must be positive")
    if dt > max_timestep(trap) * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} s exceeds 1/(50 max nu) = {max_timestep(trap):g} s")
    n_steps = int(math.ceil(duration / dt - 1e-9))
    kseeds, _ = member_seeds(seed, 1)
    out = _run(initial.as_array()[None, :], kseeds, trap, laser, noise, ion, sim, dt,
               [laser.detuning], n_steps, n_steps, sample_every, gaussian)
    final, _, _, _, _, samples, status, steps_done = out
    n_keep = int(steps_done[0]) // max(int(sample_every), 1)
    s = samples[0, :n_keep]
    times = initial.time + dt * sample_every * np.arange(1, n_keep + 1)
    traj = Trajectory(times, s[:, :2].copy(), s[:, 2:4].copy(), s[:, 4].copy(),
                      principal_axis_angle(trap, laser), bool(status[0]))
    if status[0] != _kernel.STATUS_OK:
        raise UnstableIntegrationError(
            f"ion exceeded escape bound {sim.escape_bound:g} m at t={initial.time + steps_done[0] * dt:g} s")
    return traj


@dataclass
class SteadyStateTemps:
    T: np.ndarray  # K per principal axis (position estimator)
    converged: np.ndarray  # bool per axis
    stat_err: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    T_velocity: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    T_velocity_err: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    trajectory: Trajectory | None = None
    duration: float = 0.0
    members: int = 0

    def to_csv(self, path, mode_label=None):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            head = ["axis", "T_K", "T_stat_err_K", "converged"]
            out.writerow(head + (["mode"] if mode_label else []))
            for a in range(2):
                row = [a + 1, f"{self.T[a]:.9e}", f"{self.stat_err[a]:.9e}", int(bool(self.converged[a]))]
                out.writerow(row + ([mode_label] if mode_label else []))


def _converged_axes(blocks, gamma_axes, window):
    """Per-axis equilibration check from linear relaxation and block trends."""
    ok = np.ones(2, dtype=bool)
    n_mem, n_blocks, _ = blocks.shape
    h = max(n_blocks // 4, 1)
    for a in range(2):
        if not gamma_axes[a] * window >= 3.0:
            ok[a] = False
            continue
        first = blocks[:, :h, a].mean(axis=1)
        last = blocks[:, -h:, a].mean(axis=1)
        diff = last - first
        if n_mem > 1:
            se = diff.std(ddof=1) / math.sqrt(n_mem)
        else:
            se = blocks[0, :, a].std(ddof=1) * math.sqrt(2.0 / h)
        if diff.mean() > 4.0 * se and diff.mean() > 0.1 * first.mean():
            ok[a] = False
    return ok


def steady_state_anisotropic(trap, laser, noise, ion, sim=None, seed=0, ensemble=None,
                             duration=None, initial_temperature=None, sample_every=None,
                             keep_samples=True, gaussian=False):
    """Per-axis steady-state temperatures from an ensemble of trajectories.

    Members start thermal at ``initial_temperature`` (default: the balance
    model's prediction; axes that cannot relax within the run start at the
    cooled axis temperature instead);
    the first ``sim.transient_fraction`` of each run is discarded.
    Axes that have not equilibrated report their late-time temperature as a
    lower bound with ``converged`` False.
    """
    sim = sim or SimulationConfig()
    ensemble = int(ensemble or sim.ensemble)
    duration = float(duration or sim.duration)
    dt = 1.0 / (sim.steps_per_period * max(trap.nu_x, trap.nu_y))
    n_steps = int(math.ceil(duration / dt))
    window_start = int(round(sim.transient_fraction * n_steps))

    c = laser_projection(trap)
    gamma_axes = cooling_rate(laser.detuning, laser.saturation, ion) * c**2
    window = (n_steps - window_start) * dt
    if initial_temperature is None:
        # axes that cannot relax within the window start cold, so their
        # late-time temperature is approached from below (a lower bound)
        t0, _ = balance_temperatures(trap, laser, noise, ion, sim.emission_factor)
        usable = np.isfinite(t0) & (gamma_axes * window >= 3.0)
        fill = t0[usable].min() if usable.any() else doppler_limit(ion)
        initial_temperature = np.where(usable, t0, fill)
    t_init = np.broadcast_to(np.asarray(initial_temperature, dtype=float), (2,))

    kseeds, iseeds = member_seeds(seed, ensemble)
    state0 = thermal_states(t_init, trap, ion, iseeds)
    if sample_every is None:
        sample_every = max(n_steps // 4000, 1)
        if sample_every % int(sim.steps_per_period) == 0:
            sample_every += 7
    out = _run(state0, kseeds, trap, laser, noise, ion, sim, dt, [laser.detuning], n_steps,
               window_start, sample_every, gaussian)
    final, x2, v2, blocks, _, samples, status, steps_done = out
    if np.any(status != _kernel.STATUS_OK):
        bad = int(np.argmax(status != _kernel.STATUS_OK))
        raise UnstableIntegrationError(
            f"member {bad} exceeded escape bound {sim.escape_bound:g} m after {steps_done[bad] * dt:g} s")

    m = ion.mass
    w2 = trap.omega**2
    t_mem = m * w2 * x2 / KB  # (M, 2)
    tv_mem = m * v2 / KB
    T = t_mem.mean(axis=0)
    Tv = tv_mem.mean(axis=0)
    if ensemble > 1:
        err = t_mem.std(axis=0, ddof=1) / math.sqrt(ensemble)
        verr = tv_mem.std(axis=0, ddof=1) / math.sqrt(ensemble)
    else:
        tb = m * w2 * blocks[0] / KB
        err = tb.std(axis=0, ddof=1) / math.sqrt(blocks.shape[1])
        verr = np.full(2, np.nan)

    conv = _converged_axes(blocks, gamma_axes, window)
    h = max(sim.n_blocks // 4, 1)
    late = m * w2 * blocks[:, -h:, :].mean(axis=(0, 1)) / KB
    T = np.where(conv, T, late)

    traj = None
    if keep_samples:
        first = window_start // sample_every
        s = samples[:, first:, :].reshape(-1, 5)
        n_per = samples.shape[1] - first
        times = np.tile(dt * sample_every * np.arange(first + 1, first + 1 + n_per), ensemble)
        traj = Trajectory(times, s[:, :2].copy(), s[:, 2:4].copy(), s[:, 4].copy(),
                          principal_axis_angle(trap, laser))
    return SteadyStateTemps(T, conv, err, Tv, verr, traj, duration, ensemble)


def steady_state_from_config(cfg: Config, seed=0, **kw):
    return steady_state_anisotropic(cfg.trap, cfg.laser, cfg.noise, cfg.ion, cfg.sim, seed=seed, **kw)


def simulate_spectral_scan(cfg: Config, detunings, dwell, seed=0, ensemble=None,
                           initial_temperature=None, detection_efficiency=None):
    """Fluorescence scan with the ion's motion evolving while the laser is swept.

    ``detunings`` (rad/s) are visited in order, ``dwell`` seconds each. Each
    ensemble member is an independent repetition of the whole sweep; detected
    counts are Poisson around the collected photon number. Returns a
    SpectrumScan and the number of members lost (escape bound exceeded).
    """
    from .fitters import SpectrumScan

    trap, laser, noise, ion, sim = cfg.trap, cfg.laser, cfg.noise, cfg.ion, cfg.sim
    ensemble = int(ensemble or sim.ensemble)
    detunings = np.asarray(detunings, dtype=float)
    dt = 1.0 / (sim.steps_per_period * max(trap.nu_x, trap.nu_y))
    seg_steps = max(int(round(dwell / dt)), 1)
    if initial_temperature is None:
        first = laser.__class__(detunings[0], laser.saturation, laser.linewidth, laser.direction)
        t0, _ = balance_temperatures(trap, first, noise, ion, sim.emission_factor)
        initial_temperature = np.where(np.isfinite(t0), t0, 1.0)
    kseeds, iseeds = member_seeds(seed, ensemble)
    state0 = thermal_states(np.broadcast_to(initial_temperature, (2,)), trap, ion, iseeds)
    n_total = seg_steps * len(detunings)
    out = _run(state0, kseeds, trap, laser, noise, ion, sim, dt, detunings, seg_steps,
               n_total, n_total + 1)
    seg_rate, status = out[4], out[6]
    eff = cfg.imaging.collection_efficiency * cfg.imaging.quantum_efficiency
    if detection_efficiency is not None:
        eff = detection_efficiency
    dwell_eff = seg_steps * dt
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2**31 - 1]))
    counts = rng.poisson(eff * seg_rate.sum(axis=0) * dwell_eff)
    rate = counts / (ensemble * dwell_eff)
    scan = SpectrumScan(detunings / TWO_PI, rate.astype(float), np.full(len(detunings), dwell_eff * ensemble))
    return scan, int(np.count_nonzero(status))


def thermal_spectrum(detunings, temperature, laser, ion, trap=None):
    """Mean scattering rate of a static thermal ion at each laser detuning (rad/s).

    The velocity along the beam is Maxwell-Boltzmann at ``temperature``; the
    result is the exact Voigt average of the two-level rate. No dynamics: the
    temperature does not respond to the detuning.
    """
    gamma = ion.natural_linewidth
    s = laser.saturation
    b = 0.5 * gamma * math.sqrt(1.0 + s)
    amp = (0.5 * gamma) ** 3 * s
    sigma = ion.wavenumber * math.sqrt(KB * temperature / ion.mass)
    return np.array([amp * _lorentz_average(float(d), sigma, b)[0] for d in np.atleast_1d(detunings)])


def ensemble_equipartition(result: SteadyStateTemps):
    """Difference between position and velocity temperature estimates in units of their joint error."""
    err = np.hypot(result.stat_err, result.T_velocity_err)
    return (result.T - result.T_velocity) / err


def ion_temperature_sigma(T, nu, ion: IonSpecies):
    """Thermal position spread (m) for temperature T in a trap of frequency nu."""
    return np.sqrt(KB * np.asarray(T) / ion.mass) / (TWO_PI * np.asarray(nu))
