# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled renewal kernels.

Uniforms come straight from the generator's ``bitgen_t``; ``next_double`` is
the same routine ``Generator.random`` uses, so these loops see exactly the
stream the pure-Python fallback reads.
"""

from cpython.pycapsule cimport PyCapsule_GetPointer, PyCapsule_IsValid
from numpy.random cimport bitgen_t

import numpy as np
cimport numpy as cnp

cnp.import_array()

DEF MODE_DETERMINISTIC = 0


cdef bitgen_t *_bitgen(object rng) except NULL:
    capsule = rng.bit_generator.capsule
    if not PyCapsule_IsValid(capsule, "BitGenerator"):
        raise ValueError("generator does not expose a BitGenerator capsule")
    return <bitgen_t *> PyCapsule_GetPointer(capsule, "BitGenerator")


def walk(object rng, long long j0, long long jmax, double p, Py_ssize_t horizon):
    cdef bitgen_t *bg = _bitgen(rng)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.empty(horizon, dtype=np.int64)
    cdef long long[::1] o = out
    cdef long long j = j0
    cdef Py_ssize_t k
    o[0] = j
    with rng.bit_generator.lock, nogil:
        for k in range(horizon - 1):
            if bg.next_double(bg.state) < p:
                if j < jmax:
                    j += 1
            else:
                j -= 1
            o[k + 1] = j
    return out


def phi_delta(object rng, double phi0, double phi_max, long long j0,
              long long jmax, long long jlo, double[::1] h_table, double theta,
              double p, int mode, double q, double stop_level, long long stop_k,
              long long cap, bint record):
    cdef bitgen_t *bg = _bitgen(rng)
    cdef Py_ssize_t cap_buf = 1024
    cdef cnp.ndarray phis_a = np.empty(cap_buf if record else 0, dtype=np.float64)
    cdef cnp.ndarray js_a = np.empty(cap_buf if record else 0, dtype=np.int64)
    cdef cnp.ndarray vs_a = np.empty(cap_buf if record else 0, dtype=np.float64)
    cdef cnp.ndarray ws_a = np.empty(cap_buf if record else 0, dtype=np.uint8)
    cdef double[::1] phis = phis_a
    cdef long long[::1] js = js_a
    cdef double[::1] vs = vs_a
    cdef unsigned char[::1] ws = ws_a
    cdef double phi = phi0, drift, v, new
    cdef long long j = j0, k = 0, idx
    cdef int status
    cdef bint up
    cdef Py_ssize_t ntab = h_table.shape[0]

    with rng.bit_generator.lock:
        while True:
            if record:
                if k + 1 >= cap_buf:
                    cap_buf *= 2
                    phis_a = np.resize(phis_a, cap_buf)
                    js_a = np.resize(js_a, cap_buf)
                    vs_a = np.resize(vs_a, cap_buf)
                    ws_a = np.resize(ws_a, cap_buf)
                    phis = phis_a
                    js = js_a
                    vs = vs_a
                    ws = ws_a
                phis[k] = phi
                js[k] = j
            if phi <= stop_level or (stop_k >= 0 and k >= stop_k):
                status = 0
                break
            if k >= cap:
                status = 1
                break
            up = bg.next_double(bg.state) < p
            idx = j - jlo
            if idx < 0:
                idx = 0
            elif idx >= ntab:
                idx = ntab - 1
            drift = theta * h_table[idx]
            if mode == MODE_DETERMINISTIC:
                v = -drift
            elif bg.next_double(bg.state) < q:
                v = -2.0 * drift / q
            else:
                v = drift / (1.0 - q)
            new = phi + v
            if new < 0.0:
                new = 0.0
            elif new > phi_max:
                new = phi_max
            if record:
                vs[k] = new - phi
                ws[k] = up
            phi = new
            if up:
                if j < jmax:
                    j += 1
            else:
                j -= 1
            k += 1

    if record:
        return (status, k, phis_a[:k + 1].copy(), js_a[:k + 1].copy(),
                vs_a[:k].copy(), ws_a[:k].astype(bool))
    return (status, k, np.empty(0), np.empty(0, dtype=np.int64),
            np.empty(0), np.empty(0, dtype=bool))
