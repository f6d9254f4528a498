"""Finite-difference audit of every differentiable component.

Each check builds a small random instance from one seeded generator and
returns the max relative error reported by :func:`autodiff.grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import GruParams, ModalityEncoding, gru_forward, init_gru
from .fusion import AttentionParams, cross_attention, fuse, init_attention
from .heads import HeadParams, focal_loss, head_forward, init_decoder, init_head, mse_loss, recon_loss
from .model import ModelParams, batch_loss, init_model

__all__ = ["AuditResult", "OP_CASES", "gradient_audit"]

# binary wrappers over each primitive; a is 3×4, b is 3×4
OP_CASES = {
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "transpose": lambda a, b: ad.transpose(a),
    "reshape": lambda a, b: ad.reshape(a, (4, 3)),
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "scale": lambda a, b: ad.scale(a, -1.7),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "relu": lambda a, b: ad.relu(a),
    "log": lambda a, b: ad.log(ad.add(ad.mul(a, a), ad.constant(np.full((3, 4), 0.5)))),
    "power": lambda a, b: ad.power(ad.add(ad.mul(a, a), ad.constant(np.full((3, 4), 0.1))), 2.5),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "index": lambda a, b: ad.index(a, (slice(1, 3), slice(None))),
    "add_rowvec": lambda a, b: ad.add_rowvec(a, ad.index(b, 0)),
    "scale_rows": lambda a, b: ad.scale_rows(a, ad.index(b, (slice(None), slice(0, 1)))),
    "sum_rows": lambda a, b: ad.sum_rows(a),
    "softmax_rows": lambda a, b: ad.softmax_rows(a),
    "sum_all": lambda a, b: ad.sum_all(a),
    "mean_all": lambda a, b: ad.mean_all(a),
}


@dataclass
class AuditResult:
    name: str
    error: float

    def __post_init__(self):
        self.error = float(self.error)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.error < tol


def _contract(out: ad.Node, w: np.ndarray) -> ad.Node:
    """Scalar readout sum(out * w) so that every output entry matters."""
    return ad.sum_all(ad.mul(out, ad.constant(w)))


def _arrays(named: dict) -> list:
    return [v.data for v in named.values()]


def _op_checks(rng, eps):
    for name, op in OP_CASES.items():
        a, b = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))
        shape = op(ad.constant(a), ad.constant(b)).shape
        w = rng.uniform(-1, 1, shape)
        yield f"op.{name}", ad.grad_check(lambda x, y: _contract(op(x, y), w), [a, b], eps)


def _gru_check(rng, eps):
    p = init_gru(3, 4, rng)
    x = rng.normal(size=(5, 3))
    w = rng.uniform(-1, 1, (5, 4))
    f = lambda *ls: _contract(gru_forward(GruParams(*ls), x).H, w)
    return ad.grad_check(f, _arrays(p.named()), eps)


def _fusion_checks(rng, eps):
    d = 4
    p = init_attention(d, rng)
    q, kv = rng.uniform(-1, 1, (1, d)), rng.uniform(-1, 1, (6, d))
    w = rng.uniform(-1, 1, (1, d))
    f = lambda q_, kv_, *ls: _contract(cross_attention(q_, kv_, AttentionParams(*ls)), w)
    yield "cross_attention", ad.grad_check(f, [q, kv, *_arrays(p.named())], eps)

    H = [rng.uniform(-0.9, 0.9, (T, d)) for T in (5, 5, 3)]
    p_iv, p_it = init_attention(d, rng), init_attention(d, rng)
    w2 = rng.uniform(-1, 1, (1, 2 * d))

    def g(hv, hi, ht, *ls):
        # each T×d matrix stands in for one stream's hidden states (B = 1)
        encs = [ModalityEncoding.from_steps([ad.index(h, (slice(t, t + 1), slice(None))) for t in range(h.shape[0])])
                for h in (hv, hi, ht)]
        return _contract(fuse(*encs, AttentionParams(*ls[:3]), AttentionParams(*ls[3:])).fused, w2)

    yield "fuse", ad.grad_check(g, [*H, *_arrays(p_iv.named()), *_arrays(p_it.named())], eps)


def _head_checks(rng, eps):
    x = rng.uniform(-1, 1, (3, 8))
    hc = init_head(8, 4, "classification", rng)
    y = np.array([[1], [0], [1]])
    f = lambda *ls: focal_loss(head_forward(HeadParams(*ls), ad.constant(x)), y)
    yield "head+focal", ad.grad_check(f, _arrays(hc.named()), eps)

    hr = init_head(8, 4, "regression", rng)
    t = rng.uniform(-1, 1, (3, 2))
    f = lambda *ls: mse_loss(head_forward(HeadParams(*ls), ad.constant(x)), t)
    yield "head+mse", ad.grad_check(f, _arrays(hr.named()), eps)

    dec = init_decoder(4, rng)
    finals = rng.uniform(-1, 1, (3, 12))
    f = lambda fused, W, b: recon_loss(type(dec)(W, b), fused, ad.constant(finals))
    yield "recon", ad.grad_check(f, [x, dec.W_d.data, dec.b_d.data], eps)


def _pipeline_checks(rng, eps):
    dims = {"video": 6, "image": 6, "text": 6}
    streams = [rng.normal(size=(1, T, 6)) for T in (16, 16, 4)]
    for task, label in (("classification", np.array([[1.0]])), ("regression", rng.uniform(-1, 1, (1, 2)))):
        params = init_model(dims, 4, task, "full", recon=True, rng=rng)
        names = list(params.named())

        def f(*ls, task=task, label=label, names=names):
            model = ModelParams.from_nodes(dict(zip(names, ls)))
            return batch_loss(model, *streams, label, task, lam=0.1)

        yield f"pipeline.{task}", ad.grad_check(f, list(params.arrays().values()), eps)


def gradient_audit(seed: int = 0, eps: float = 1e-5) -> list[AuditResult]:
    """Run every check; results are in a fixed order."""
    rng = np.random.default_rng(seed)
    out = [AuditResult(n, e) for n, e in _op_checks(rng, eps)]
    out.append(AuditResult("gru_forward", _gru_check(rng, eps)))
    out += [AuditResult(n, e) for n, e in _fusion_checks(rng, eps)]
    out += [AuditResult(n, e) for n, e in _head_checks(rng, eps)]
    out += [AuditResult(n, e) for n, e in _pipeline_checks(rng, eps)]
    return out
