"""Single-layer GRU sequence encoders (one per modality stream).

Row-vector convention throughout: a timestep is a 1×d_in row, so the gate
pre-activations are ``x W + h U + b`` with ``W`` of shape d_in×d_h.  The
update gate mixes toward the candidate:

    r = σ(x W_r + h U_r + b_r)
    z = σ(x W_z + h U_z + b_z)
    ĥ = tanh(x W_h + (r ⊙ h) U_h + b_h)
    h' = (1 − z) ⊙ h + z ⊙ ĥ

so ``z → 0`` carries the previous state through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ContractError

__all__ = ["GruParams", "ModalityEncoding", "init_gru", "gru_forward", "as_batch"]


@dataclass
class GruParams:
    W_r: ad.Node
    W_z: ad.Node
    W_h: ad.Node
    U_r: ad.Node
    U_z: ad.Node
    U_h: ad.Node
    b_r: ad.Node
    b_z: ad.Node
    b_h: ad.Node

    def __post_init__(self):
        d_in, d_h = self.W_r.shape
        for name in ("W_r", "W_z", "W_h"):
            if getattr(self, name).shape != (d_in, d_h):
                raise ContractError(f"{name} has shape {list(getattr(self, name).shape)}, expected [{d_in}, {d_h}]")
        for name in ("U_r", "U_z", "U_h"):
            if getattr(self, name).shape != (d_h, d_h):
                raise ContractError(f"{name} has shape {list(getattr(self, name).shape)}, expected [{d_h}, {d_h}]")
        for name in ("b_r", "b_z", "b_h"):
            if getattr(self, name).shape != (d_h,):
                raise ContractError(f"{name} has shape {list(getattr(self, name).shape)}, expected [{d_h}]")

    @property
    def d_in(self) -> int:
        return self.W_r.shape[0]

    @property
    def d_h(self) -> int:
        return self.W_r.shape[1]

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class ModalityEncoding:
    """Hidden states of one stream for a batch of B sequences.

    ``H`` stacks the states time-major, shape (T·B)×d_h: row ``t·B + b`` is
    h_t of sample b.  ``final`` is the B×d_h block of the last timestep.
    """

    H: ad.Node
    T: int
    B: int
    final: ad.Node

    @property
    def d_h(self) -> int:
        return self.H.shape[1]

    @property
    def steps(self) -> list:
        return [ad.index(self.H, (slice(t * self.B, (t + 1) * self.B), slice(None))) for t in range(self.T)]

    def hidden(self, b: int = 0) -> np.ndarray:
        """T×d_h hidden-state matrix of sample ``b``."""
        return self.H.data.reshape(self.T, self.B, -1)[:, b, :].copy()

    @classmethod
    def from_steps(cls, steps) -> "ModalityEncoding":
        steps = list(steps)
        H = steps[0] if len(steps) == 1 else ad.concat(steps, axis=0)
        return cls(H, len(steps), steps[0].shape[0], steps[-1])

    @classmethod
    def zeros(cls, T: int, B: int, d_h: int) -> "ModalityEncoding":
        """Stand-in for an ablated stream: all-zero states, no parameters."""
        H = ad.constant(np.zeros((T * B, d_h)))
        return cls(H, T, B, ad.constant(np.zeros((B, d_h))))


def uniform_init(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_gru(d_in: int, d_h: int, rng: np.random.Generator) -> GruParams:
    if d_in < 1 or d_h < 1:
        raise ContractError(f"init_gru: dims must be >= 1, got d_in={d_in}, d_h={d_h}")
    s = 1.0 / np.sqrt(d_h)
    W = [ad.param(uniform_init(rng, (d_in, d_h), s)) for _ in range(3)]
    U = [ad.param(uniform_init(rng, (d_h, d_h), s)) for _ in range(3)]
    b = [ad.param(np.zeros(d_h)) for _ in range(3)]
    return GruParams(*W, *U, *b)


def as_batch(x) -> np.ndarray:
    """Coerce a FeatureSequence, T×d or B×T×d array to a float64 B×T×d array."""
    data = getattr(x, "data", x)
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1] < 1:
        raise ContractError(f"expected a T×d or B×T×d sequence, got shape {list(arr.shape)}")
    return arr


def gru_forward(p: GruParams, x, h0=None, fused: bool = True) -> ModalityEncoding:
    """Run the GRU over ``x`` (T×d_in or B×T×d_in) from ``h0`` (zeros by default).

    ``fused=True`` evaluates the whole sequence as one graph node
    (:func:`trifuse.autodiff.gru_sequence`); ``fused=False`` builds the same
    recurrence op by op, which is slower but differentiable with respect to
    a parameterised ``h0``.
    """
    X = as_batch(x)
    B, T, d = X.shape
    if d != p.d_in:
        raise ContractError(f"gru_forward: input dim {d} does not match GRU d_in {p.d_in}")
    dh = p.d_h
    if h0 is not None and not isinstance(h0, ad.Node):
        h0 = np.asarray(h0, dtype=np.float64)
        if h0.shape == (dh,):
            h0 = np.tile(h0, (B, 1))
        if h0.shape != (B, dh):
            raise ContractError(f"gru_forward: h0 shape {list(h0.shape)}, expected [{B}, {dh}]")
    if fused and not isinstance(h0, ad.Node):
        H = ad.gru_sequence(X, tuple(p.named().values()), h0)
        final = H if T == 1 else ad.index(H, (slice((T - 1) * B, T * B), slice(None)))
        return ModalityEncoding(H, T, B, final)

    if h0 is None:
        h = ad.constant(np.zeros((B, dh)))
    elif isinstance(h0, ad.Node):
        if h0.shape != (B, dh):
            raise ContractError(f"gru_forward: h0 shape {list(h0.shape)}, expected [{B}, {dh}]")
        h = h0
    else:
        h = ad.constant(h0)
    W = ad.concat([p.W_r, p.W_z, p.W_h], axis=1)
    U_rz = ad.concat([p.U_r, p.U_z], axis=1)
    bias = ad.concat([p.b_r, p.b_z, p.b_h], axis=0)
    rz_cols = (slice(None), slice(0, 2 * dh))
    h_cols = (slice(None), slice(2 * dh, 3 * dh))
    steps = []
    for t in range(T):
        gx = ad.add_rowvec(ad.matmul(ad.constant(X[:, t, :]), W), bias)
        rz = ad.sigmoid(ad.add(ad.index(gx, rz_cols), ad.matmul(h, U_rz)))
        r = ad.index(rz, (slice(None), slice(0, dh)))
        z = ad.index(rz, (slice(None), slice(dh, 2 * dh)))
        cand = ad.tanh(ad.add(ad.index(gx, h_cols), ad.matmul(ad.mul(r, h), p.U_h)))
        h = ad.add(h, ad.mul(z, ad.sub(cand, h)))
        steps.append(h)
    return ModalityEncoding.from_steps(steps)
