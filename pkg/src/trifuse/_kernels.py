"""Compiled inner loops of the fused GRU node (see ``autodiff.gru_sequence``).

Arrays are time-major: ``GX[t]`` is the B×3d_h block of input projections
``x_t W + b`` with gate columns ordered (reset, update, candidate).
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


@njit(cache=True)
def _tanh(x):
    # libm tanh is several times slower than exp here
    return 1.0 - 2.0 / (1.0 + math.exp(2.0 * x))


@njit(cache=True)
def gru_fwd(GX, Urz, Uh, h0, H, RZ, RH, C):
    T, B, _ = GX.shape
    dh = Uh.shape[0]
    h = h0.copy()
    for t in range(T):
        a = np.dot(h, Urz)
        for b in range(B):
            for j in range(2 * dh):
                RZ[t, b, j] = _sigmoid(a[b, j] + GX[t, b, j])
            for j in range(dh):
                RH[t, b, j] = RZ[t, b, j] * h[b, j]
        c = np.dot(RH[t], Uh)
        for b in range(B):
            for j in range(dh):
                cj = _tanh(c[b, j] + GX[t, b, 2 * dh + j])
                C[t, b, j] = cj
                H[t, b, j] = h[b, j] + RZ[t, b, dh + j] * (cj - h[b, j])
        h = H[t].copy()


@njit(cache=True)
def gru_bwd(G, H, h0, RZ, C, Urz, Uh, DA):
    """Fill DA[t] with d(loss)/d(gate pre-activations) given output grads G."""
    T, B, dh = G.shape
    UhT = np.ascontiguousarray(Uh.T)
    UrzT = np.ascontiguousarray(Urz.T)
    carry = np.zeros((B, dh))
    gh = np.empty((B, dh))
    for t in range(T - 1, -1, -1):
        hp = H[t - 1] if t > 0 else h0
        for b in range(B):
            for j in range(dh):
                gh[b, j] = G[t, b, j] + carry[b, j]
                c = C[t, b, j]
                z = RZ[t, b, dh + j]
                DA[t, b, 2 * dh + j] = gh[b, j] * z * (1.0 - c * c)
                DA[t, b, dh + j] = gh[b, j] * (c - hp[b, j]) * z * (1.0 - z)
        drh = np.dot(np.ascontiguousarray(DA[t, :, 2 * dh:]), UhT)
        for b in range(B):
            for j in range(dh):
                r = RZ[t, b, j]
                DA[t, b, j] = drh[b, j] * hp[b, j] * r * (1.0 - r)
        back = np.dot(np.ascontiguousarray(DA[t, :, : 2 * dh]), UrzT)
        for b in range(B):
            for j in range(dh):
                z = RZ[t, b, dh + j]
                carry[b, j] = back[b, j] + gh[b, j] * (1.0 - z) + drh[b, j] * RZ[t, b, j]
