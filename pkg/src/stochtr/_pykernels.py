"""Pure-Python renewal kernels.

Reference implementation of the loops in ``_ckernels.pyx``. Both consume
uniforms from the generator in the same order, so for a given seed they
return identical traces.
"""

import numpy as np

_CHUNK = 4096

MODE_DETERMINISTIC = 0
MODE_TWO_POINT = 1


class _Uniforms:
    """Sequential reader over a generator's ``random()`` stream."""

    def __init__(self, rng):
        self._rng = rng
        self._start = rng.bit_generator.state
        self._buf = rng.random(_CHUNK).tolist()
        self._pos = 0
        self._used = 0

    def next(self):
        if self._pos == _CHUNK:
            self._buf = self._rng.random(_CHUNK).tolist()
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        self._used += 1
        return u

    def finish(self):
        """Leave the generator exactly past the uniforms actually used."""
        self._rng.bit_generator.state = self._start
        if self._used:
            self._rng.random(self._used)


def walk(rng, j0, jmax, p, horizon):
    out = np.empty(horizon, dtype=np.int64)
    u = rng.random(horizon - 1).tolist()
    j = j0
    out[0] = j
    for k in range(horizon - 1):
        if u[k] < p:
            j = j + 1 if j < jmax else jmax
        else:
            j -= 1
        out[k + 1] = j
    return out


def phi_delta(rng, phi0, phi_max, j0, jmax, jlo, h_table, theta, p, mode, q,
              stop_level, stop_k, cap, record):
    draws = _Uniforms(rng)
    h = h_table.tolist()
    ntab = len(h)
    phis, js, vs, ws = [], [], [], []
    phi = phi0
    j = j0
    k = 0
    while True:
        if record:
            phis.append(phi)
            js.append(j)
        if phi <= stop_level or (stop_k >= 0 and k >= stop_k):
            status = 0
            break
        if k >= cap:
            status = 1
            break
        up = draws.next() < p
        idx = j - jlo
        drift = theta * h[min(max(idx, 0), ntab - 1)]
        if mode == MODE_DETERMINISTIC:
            v = -drift
        elif draws.next() < q:
            v = -2.0 * drift / q
        else:
            v = drift / (1.0 - q)
        new = phi + v
        if new < 0.0:
            new = 0.0
        elif new > phi_max:
            new = phi_max
        if record:
            vs.append(new - phi)
            ws.append(up)
        phi = new
        if up:
            j = j + 1 if j < jmax else jmax
        else:
            j -= 1
        k += 1
    draws.finish()
    return (
        status,
        k,
        np.asarray(phis, dtype=np.float64),
        np.asarray(js, dtype=np.int64),
        np.asarray(vs, dtype=np.float64),
        np.asarray(ws, dtype=bool),
    )
