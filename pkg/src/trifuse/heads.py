"""Prediction head, task losses and the optional reconstruction term."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .encoders import uniform_init
from .errors import ContractError

__all__ = [
    "HeadParams",
    "DecoderParams",
    "init_head",
    "init_decoder",
    "head_forward",
    "focal_loss",
    "mse_loss",
    "recon_loss",
    "total_loss",
]

TASK_OUT = {"classification": 1, "regression": 2}


@dataclass
class HeadParams:
    W1: ad.Node
    b1: ad.Node
    W2: ad.Node
    b2: ad.Node

    def __post_init__(self):
        d_in, hidden = self.W1.shape
        if self.b1.shape != (hidden,) or self.W2.shape[0] != hidden or self.b2.shape != (self.W2.shape[1],):
            raise ContractError("head parameter shapes are inconsistent")
        if self.W2.shape[1] not in (1, 2):
            raise ContractError(f"head output must be 1 or 2 wide, got {self.W2.shape[1]}")

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def out(self) -> int:
        return self.W2.shape[1]

    def named(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class DecoderParams:
    W_d: ad.Node
    b_d: ad.Node

    def named(self) -> dict:
        return {"W_d": self.W_d, "b_d": self.b_d}


def init_head(d_in: int, hidden: int, task: str, rng: np.random.Generator) -> HeadParams:
    if task not in TASK_OUT:
        raise ContractError(f"unknown task {task!r}")
    out = TASK_OUT[task]
    return HeadParams(
        ad.param(uniform_init(rng, (d_in, hidden), 1.0 / np.sqrt(d_in))),
        ad.param(np.zeros(hidden)),
        ad.param(uniform_init(rng, (hidden, out), 1.0 / np.sqrt(hidden))),
        ad.param(np.zeros(out)),
    )


def init_decoder(d_h: int, rng: np.random.Generator) -> DecoderParams:
    return DecoderParams(
        ad.param(uniform_init(rng, (2 * d_h, 3 * d_h), 1.0 / np.sqrt(2 * d_h))),
        ad.param(np.zeros(3 * d_h)),
    )


def _rows(x: ad.Node) -> ad.Node:
    return ad.reshape(x, (1, x.shape[0])) if x.data.ndim == 1 else x


def head_forward(p: HeadParams, fused: ad.Node) -> ad.Node:
    """relu(fused W1 + b1) W2 + b2, for a B×d_in batch (or a single vector)."""
    fused = _rows(fused)
    if fused.shape[1] != p.d_in:
        raise ContractError(f"head_forward: input width {fused.shape[1]} but head expects {p.d_in}")
    hidden = ad.relu(ad.add_rowvec(ad.matmul(fused, p.W1), p.b1))
    return ad.add_rowvec(ad.matmul(hidden, p.W2), p.b2)


def focal_loss(logit: ad.Node, y, alpha: float = 0.25, gamma: float = 2.0) -> ad.Node:
    """Mean binary focal loss over all logits; ``y`` holds 0/1 labels of the same shape."""
    if not 0.0 < alpha < 1.0:
        raise ContractError(f"focal_loss: alpha must lie in (0, 1), got {alpha}")
    if gamma < 0:
        raise ContractError(f"focal_loss: gamma must be >= 0, got {gamma}")
    y = np.asarray(y, dtype=np.float64).reshape(logit.shape)
    p = ad.sigmoid(logit)
    q = ad.sub(ad.constant(np.ones(logit.shape)), p)
    pos = ad.mul(ad.power(q, gamma), ad.log(p))
    neg = ad.mul(ad.power(p, gamma), ad.log(q))
    per = ad.add(ad.mul(ad.constant(-alpha * y), pos), ad.mul(ad.constant(-(1.0 - alpha) * (1.0 - y)), neg))
    return ad.mean_all(per)


def mse_loss(pred: ad.Node, target) -> ad.Node:
    target = target if isinstance(target, ad.Node) else ad.constant(np.asarray(target, dtype=np.float64))
    if pred.shape != target.shape:
        raise ContractError(f"mse_loss: prediction {list(pred.shape)} vs target {list(target.shape)}")
    diff = ad.sub(pred, target)
    return ad.mean_all(ad.mul(diff, diff))


def recon_loss(d: DecoderParams, fused: ad.Node, finals: ad.Node) -> ad.Node:
    """MSE between the decoded fused embedding and the (given) final stream states."""
    fused, finals = _rows(fused), _rows(finals)
    if fused.shape[1] != d.W_d.shape[0] or finals.shape[1] != d.W_d.shape[1]:
        raise ContractError(
            f"recon_loss: decoder {list(d.W_d.shape)} vs fused {list(fused.shape)}, finals {list(finals.shape)}"
        )
    return mse_loss(ad.add_rowvec(ad.matmul(fused, d.W_d), d.b_d), finals)


def total_loss(task: str, head_out: ad.Node, label, recon: ad.Node | None = None, lam: float = 0.0,
               alpha: float = 0.25, gamma: float = 2.0) -> ad.Node:
    if lam < 0:
        raise ContractError(f"total_loss: lambda must be >= 0, got {lam}")
    if task == "classification":
        loss = focal_loss(head_out, label, alpha, gamma)
    elif task == "regression":
        loss = mse_loss(head_out, np.asarray(label, dtype=np.float64).reshape(head_out.shape))
    else:
        raise ContractError(f"unknown task {task!r}")
    if recon is not None and lam > 0:
        loss = ad.add(loss, ad.scale(recon, lam))
    return loss
