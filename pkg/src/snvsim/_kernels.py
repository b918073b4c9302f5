"""Compiled inner loops for one repetition of the jump process.

State codes: 0 ground, 1 excited, 2 dark. Segment mode 0 simulates every
optical transition; mode 1 treats ground+excited as one bright state that
switches with the reduced telegraph rates and emits a Poisson photon stream.
"""

import numpy as np
from numba import njit

TO_DARK = 1
TO_BRIGHT = 2
DARK_STATE = 2


@njit(cache=True, nogil=True)
def _grow(buf, n):
    if n < buf.shape[0]:
        return buf
    out = np.empty(2 * buf.shape[0], dtype=buf.dtype)
    out[:n] = buf[:n]
    return out


@njit(cache=True, nogil=True)
def run_rep(rng, state, t0s, durs, mode, k_pump, gamma, k_ion, k_rec,
            k_off, k_on, bright_rate, p_exc, bg, record, eta):
    photons = np.empty(64)
    n_ph = 0
    sw_t = np.empty(16)
    sw_k = np.empty(16, dtype=np.int8)
    n_sw = 0
    for i in range(t0s.shape[0]):
        t = t0s[i]
        end = t + durs[i]
        if mode[i] == 0:
            while True:
                kp = k_pump[i]
                if state == 0:
                    a = kp
                elif state == 1:
                    a = kp + gamma[i] + k_ion[i]
                else:
                    a = k_rec[i]
                if a <= 0.0:
                    break
                t += rng.exponential(1.0 / a)
                if t >= end:
                    break
                if state == 0:
                    state = 1
                elif state == 1:
                    u = rng.random() * a
                    if u < gamma[i]:
                        state = 0
                        if record[i] and rng.random() < eta:
                            photons = _grow(photons, n_ph)
                            photons[n_ph] = t
                            n_ph += 1
                    elif u < gamma[i] + kp:
                        state = 0
                    else:
                        state = 2
                        sw_t = _grow(sw_t, n_sw)
                        sw_k = _grow(sw_k, n_sw)
                        sw_t[n_sw] = t
                        sw_k[n_sw] = TO_DARK
                        n_sw += 1
                else:
                    state = 0
                    sw_t = _grow(sw_t, n_sw)
                    sw_k = _grow(sw_k, n_sw)
                    sw_t[n_sw] = t
                    sw_k[n_sw] = TO_BRIGHT
                    n_sw += 1
        else:
            bright = state != 2
            while True:
                rate = k_off[i] if bright else k_on[i]
                t_next = end
                switch = False
                if rate > 0.0:
                    cand = t + rng.exponential(1.0 / rate)
                    if cand < end:
                        t_next = cand
                        switch = True
                if bright and record[i] and bright_rate[i] > 0.0:
                    span = t_next - t
                    n = rng.poisson(bright_rate[i] * span)
                    for _ in range(n):
                        photons = _grow(photons, n_ph)
                        photons[n_ph] = t + rng.random() * span
                        n_ph += 1
                if not switch:
                    break
                bright = not bright
                sw_t = _grow(sw_t, n_sw)
                sw_k = _grow(sw_k, n_sw)
                sw_t[n_sw] = t_next
                sw_k[n_sw] = TO_BRIGHT if bright else TO_DARK
                n_sw += 1
                t = t_next
            if not bright:
                state = 2
            elif rng.random() < p_exc[i]:
                state = 1
            else:
                state = 0
        if record[i] and bg[i] > 0.0:
            n = rng.poisson(bg[i] * durs[i])
            for _ in range(n):
                photons = _grow(photons, n_ph)
                photons[n_ph] = t0s[i] + rng.random() * durs[i]
                n_ph += 1
    return np.sort(photons[:n_ph]), sw_t[:n_sw].copy(), sw_k[:n_sw].copy(), state
