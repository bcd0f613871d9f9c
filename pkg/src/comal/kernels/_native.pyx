# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-step kernels; semantics identical to kernels._numpy."""
import numpy as np

from libc.math cimport fmax, pow, sqrt


def idm_acceleration(double[::1] v, double[::1] dv, double[::1] gap,
                     double[::1] v0, double[::1] T, double[::1] a_max,
                     double[::1] b, double[::1] delta, double[::1] s0):
    """Car-following acceleration for each vehicle (see kernels._numpy)."""
    cdef Py_ssize_t n = v.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double s_star, z, x, x2, free
    for i in range(n):
        s_star = s0[i] + fmax(0.0, v[i] * T[i] + v[i] * dv[i] / (2.0 * sqrt(a_max[i] * b[i])))
        z = s_star / gap[i]
        x = v[i] / v0[i]
        if delta[i] == 4.0:  # the default exponent; skip the generic pow
            x2 = x * x
            free = x2 * x2
        else:
            free = pow(x, delta[i])
        out[i] = a_max[i] * (1.0 - free - z * z)
    return out_arr


def safe_speed(double[::1] gap, double[::1] leader_speed, double dt, double b_max):
    """One-step-safe speed cap for each vehicle (see kernels._numpy)."""
    cdef Py_ssize_t n = gap.shape[0]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i
    cdef double bd = b_max * dt
    cdef double g
    for i in range(n):
        g = fmax(gap[i], 0.0)
        out[i] = -bd + sqrt(bd * bd + leader_speed[i] * leader_speed[i] + 2.0 * b_max * g)
    return out_arr
