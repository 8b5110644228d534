"""Compiled Langevin stepper for the planar ion model.

Each step is a Strang splitting: exact harmonic flow for dt/2, a velocity kick
(radiation pressure, recoil, white force noise), exact harmonic flow for dt/2.
Members are integrated one after another, each from its own seed, so a
member's trajectory does not depend on the ensemble it is part of.

Stochastic increments are two-point (+1/-1) variables by default (simplified
weak Euler scheme: same mean and variance per step as Gaussian increments,
about 10x cheaper). ``gaussian=True`` switches to standard normal draws.
"""
import math

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_ESCAPED = 1


@njit(cache=True)
def _signs(n_bits):
    # one uniform draw -> n_bits independent +/-1 values packed in an int
    return int(np.random.random() * (1 << n_bits))


@njit(cache=True)
def _pm(bits, i):
    return 1.0 - 2.0 * ((bits >> i) & 1)


@njit(cache=True)
def integrate(state0, seeds, omega, c_laser, c_noise, detunings, seg_steps, dt,
              gamma, sat, k, recoil_v, zeta, noise_kick, escape, window_start,
              n_blocks, stride, events, gaussian):
    n_mem = state0.shape[0]
    n_seg = detunings.shape[0]
    n_steps = n_seg * seg_steps
    n_samp = n_steps // stride
    n_win = n_steps - window_start

    final = state0.copy()
    x2 = np.zeros((n_mem, 2))
    v2 = np.zeros((n_mem, 2))
    blocks = np.zeros((n_mem, n_blocks, 2))
    seg_rate = np.zeros((n_mem, n_seg))
    samples = np.zeros((n_mem, n_samp, 5))
    status = np.zeros(n_mem, dtype=np.int64)
    steps_done = np.zeros(n_mem, dtype=np.int64)

    w0 = omega[0]
    w1 = omega[1]
    ch0 = math.cos(0.5 * w0 * dt)
    sh0 = math.sin(0.5 * w0 * dt)
    ch1 = math.cos(0.5 * w1 * dt)
    sh1 = math.sin(0.5 * w1 * dt)
    a0 = sh0 / w0
    b0 = w0 * sh0
    a1 = sh1 / w1
    b1 = w1 * sh1
    half_g = 0.5 * gamma
    two_over_g = 2.0 / gamma
    e_scale = recoil_v * math.sqrt(zeta)
    esc2 = escape * escape
    block_len = max(n_win // n_blocks, 1)
    cl0 = c_laser[0]
    cl1 = c_laser[1]
    cn0 = c_noise[0]
    cn1 = c_noise[1]
    with_noise = noise_kick > 0.0

    for m in range(n_mem):
        np.random.seed(seeds[m])
        x0 = state0[m, 0]
        x1 = state0[m, 1]
        v0 = state0[m, 2]
        v1 = state0[m, 3]
        i = 0
        next_sample = stride
        block = 0
        block_left = block_len
        escaped = False
        for seg in range(n_seg):
            delta = detunings[seg]
            rate_sum = 0.0
            for _ in range(seg_steps):
                a = x0 * ch0 + v0 * a0
                v0 = v0 * ch0 - x0 * b0
                x0 = a
                a = x1 * ch1 + v1 * a1
                v1 = v1 * ch1 - x1 * b1
                x1 = a

                vk = cl0 * v0 + cl1 * v1
                det = (delta - k * vk) * two_over_g
                rate = half_g * sat / (1.0 + sat + det * det)
                mu = rate * dt
                if events:
                    if mu > 0.0:
                        n_ev = np.random.poisson(mu)
                        dv = recoil_v * n_ev
                        v0 += dv * cl0
                        v1 += dv * cl1
                        for _e in range(n_ev):
                            phi = 2.0 * math.pi * np.random.random()
                            v0 += recoil_v * math.cos(phi)
                            v1 += recoil_v * math.sin(phi)
                    if with_noise:
                        if gaussian:
                            g = noise_kick * np.random.standard_normal()
                        else:
                            g = noise_kick * _pm(_signs(1), 0)
                        v0 += g * cn0
                        v1 += g * cn1
                else:
                    if gaussian:
                        r0 = np.random.standard_normal()
                        r1 = np.random.standard_normal()
                        r2 = np.random.standard_normal()
                        r3 = np.random.standard_normal() if with_noise else 0.0
                    else:
                        bits = _signs(4)
                        r0 = _pm(bits, 0)
                        r1 = _pm(bits, 1)
                        r2 = _pm(bits, 2)
                        r3 = _pm(bits, 3)
                    sq = math.sqrt(mu)
                    dv = recoil_v * (mu + sq * r0)
                    e = e_scale * sq
                    g = noise_kick * r3 if with_noise else 0.0
                    v0 += dv * cl0 + e * r1 + g * cn0
                    v1 += dv * cl1 + e * r2 + g * cn1

                a = x0 * ch0 + v0 * a0
                v0 = v0 * ch0 - x0 * b0
                x0 = a
                a = x1 * ch1 + v1 * a1
                v1 = v1 * ch1 - x1 * b1
                x1 = a

                rate_sum += rate
                if i >= window_start:
                    xx0 = x0 * x0
                    xx1 = x1 * x1
                    x2[m, 0] += xx0
                    x2[m, 1] += xx1
                    v2[m, 0] += v0 * v0
                    v2[m, 1] += v1 * v1
                    blocks[m, block, 0] += xx0
                    blocks[m, block, 1] += xx1
                    block_left -= 1
                    if block_left == 0 and block < n_blocks - 1:
                        block += 1
                        block_left = block_len
                i += 1
                if i == next_sample:
                    j = i // stride - 1
                    samples[m, j, 0] = x0
                    samples[m, j, 1] = x1
                    samples[m, j, 2] = v0
                    samples[m, j, 3] = v1
                    samples[m, j, 4] = rate
                    next_sample += stride
                if x0 * x0 + x1 * x1 > esc2 or not math.isfinite(v0 + v1):
                    escaped = True
                    break
            seg_rate[m, seg] = rate_sum / seg_steps
            if escaped:
                status[m] = STATUS_ESCAPED
                break
        steps_done[m] = i
        final[m, 0] = x0
        final[m, 1] = x1
        final[m, 2] = v0
        final[m, 3] = v1

    for b in range(n_blocks):
        length = block_len if b < n_blocks - 1 else n_win - block_len * (n_blocks - 1)
        if length > 0:
            for m in range(n_mem):
                blocks[m, b, 0] /= length
                blocks[m, b, 1] /= length
    if n_win > 0:
        for m in range(n_mem):
            for a in range(2):
                x2[m, a] /= n_win
                v2[m, a] /= n_win
    return final, x2, v2, blocks, seg_rate, samples, status, steps_done
