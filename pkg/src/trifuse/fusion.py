"""Two-stage cross-attention: the image state queries video, then text.

Single head, learned W_Q/W_K/W_V, scale 1/√d_h, no output projection,
residual or normalization.  Keys and values are the full hidden-state
sequence of the attended stream unless ``kv="final"``, in which case only
its last state is attended (softmax over one element, weight 1).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .encoders import ModalityEncoding, uniform_init
from .errors import ContractError

__all__ = ["AttentionParams", "FusionOutput", "init_attention", "cross_attention", "fuse"]


@dataclass
class AttentionParams:
    W_Q: ad.Node
    W_K: ad.Node
    W_V: ad.Node

    def __post_init__(self):
        d = self.W_Q.shape[0]
        for f in fields(self):
            if getattr(self, f.name).shape != (d, d):
                raise ContractError(f"{f.name} must be {d}×{d}, got {list(getattr(self, f.name).shape)}")

    @property
    def d_h(self) -> int:
        return self.W_Q.shape[0]

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class FusionOutput:
    z_iv: ad.Node
    z_it: ad.Node
    fused: ad.Node
    weights_iv: np.ndarray
    weights_it: np.ndarray


def init_attention(d_h: int, rng: np.random.Generator) -> AttentionParams:
    s = 1.0 / np.sqrt(d_h)
    return AttentionParams(*(ad.param(uniform_init(rng, (d_h, d_h), s)) for _ in range(3)))


@lru_cache(maxsize=64)
def _tiling(B: int, T: int):
    """(T·B)×B matrix repeating each query once per timestep, and its transpose."""
    tile = np.tile(np.eye(B), (T, 1))
    return ad.Tensor(tile), ad.Tensor(tile.T)


def _keys(kv, B: int):
    """Return (time-major (T·B)×d_h node, T) for any accepted KV form."""
    if isinstance(kv, ModalityEncoding):
        return kv.H, kv.T
    if isinstance(kv, ad.Node):
        if kv.data.ndim != 2:
            raise ContractError(f"cross_attention: KV must be a matrix, got {list(kv.shape)}")
        if B != 1 and kv.shape[0] % B:
            raise ContractError(f"cross_attention: {kv.shape[0]} KV rows for a batch of {B}")
        return kv, kv.shape[0] // B
    steps = list(kv)
    if not steps:
        return None, 0
    return (steps[0] if len(steps) == 1 else ad.concat(steps, axis=0)), len(steps)


def cross_attention(q: ad.Node, kv, p: AttentionParams, return_weights: bool = False):
    """Attend from B×d_h queries over T key/value rows per sample.

    ``kv`` is a ModalityEncoding, a list of B×d_h nodes (one per timestep),
    or a (T·B)×d_h node stacked time-major (for B = 1, simply T×d_h).
    Returns the B×d_h attended values, plus the B×T weights when
    ``return_weights`` is set.
    """
    if q.data.ndim == 1:
        q = ad.reshape(q, (1, q.shape[0]))
    B, d = q.shape
    KV, T = _keys(kv, B)
    if T < 1:
        raise ContractError("cross_attention: KV has no rows")
    if d != p.d_h or KV.shape[1] != d:
        raise ContractError(
            f"cross_attention: query dim {d}, KV dim {KV.shape[1]}, attention d_h {p.d_h}"
        )

    Qp = ad.matmul(q, p.W_Q)
    Kp = ad.matmul(KV, p.W_K)
    Vp = ad.matmul(KV, p.W_V)
    tile, gather = _tiling(B, T)
    Qt = ad.matmul(ad.constant(tile), Qp)
    scores = ad.sum_rows(ad.mul(Qt, Kp))
    scores = ad.scale(ad.transpose(ad.reshape(scores, (T, B))), 1.0 / np.sqrt(d))
    w = ad.softmax_rows(scores)
    wcol = ad.reshape(ad.transpose(w), (T * B, 1))
    out = ad.matmul(ad.constant(gather), ad.scale_rows(Vp, wcol))
    if return_weights:
        return out, w.data
    return out


def fuse(enc_v: ModalityEncoding, enc_i: ModalityEncoding, enc_t: ModalityEncoding,
         p_iv: AttentionParams, p_it: AttentionParams, kv: str = "sequence") -> FusionOutput:
    """Image-final-state queries over video then text; outputs concatenated."""
    dims = {e.d_h for e in (enc_v, enc_i, enc_t)} | {p_iv.d_h, p_it.d_h}
    if len(dims) != 1:
        raise ContractError(f"fuse: encodings and attention disagree on d_h: {sorted(dims)}")
    if kv == "sequence":
        kv_v, kv_t = enc_v, enc_t
    elif kv == "final":
        kv_v, kv_t = [enc_v.final], [enc_t.final]
    else:
        raise ContractError(f"fuse: kv must be 'sequence' or 'final', got {kv!r}")
    q = enc_i.final
    z_iv, w_iv = cross_attention(q, kv_v, p_iv, return_weights=True)
    z_it, w_it = cross_attention(q, kv_t, p_it, return_weights=True)
    return FusionOutput(z_iv, z_it, ad.concat([z_iv, z_it], axis=1), w_iv, w_it)
