"""The full three-stream network: GRU encoders → cross-attention → head.

``mode`` selects the variant trained by the ablation driver:

* ``full``:   image queries video and text (the fusion model)
* ``concat``: naive fusion: the three final GRU states concatenated
* ``video`` / ``image`` / ``text``: one stream kept; the other two
  encodings are replaced by zeros before fusion, parameters unchanged
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoders import GruParams, ModalityEncoding, gru_forward, init_gru
from .errors import ContractError
from .fusion import AttentionParams, fuse, init_attention
from .heads import DecoderParams, HeadParams, head_forward, init_decoder, init_head, recon_loss, total_loss

__all__ = ["MODES", "ModelParams", "Forward", "init_model", "model_forward", "batch_loss", "predict"]

MODES = ("full", "concat", "video", "image", "text")
STREAMS = ("video", "image", "text")


@dataclass
class ModelParams:
    gru: dict
    attention: dict | None
    head: HeadParams
    decoder: DecoderParams | None = None

    def named(self) -> dict:
        """Flat ``{"gru.video.W_r": node, ...}`` view, in a fixed order."""
        out = {}
        for s in STREAMS:
            for k, v in self.gru[s].named().items():
                out[f"gru.{s}.{k}"] = v
        if self.attention is not None:
            for stage in ("iv", "it"):
                for k, v in self.attention[stage].named().items():
                    out[f"attn.{stage}.{k}"] = v
        for k, v in self.head.named().items():
            out[f"head.{k}"] = v
        if self.decoder is not None:
            for k, v in self.decoder.named().items():
                out[f"decoder.{k}"] = v
        return out

    @property
    def d_h(self) -> int:
        return self.gru["video"].d_h

    @classmethod
    def from_arrays(cls, arrays: dict, leaf=ad.param) -> "ModelParams":
        """Rebuild from a ``named()``-keyed dict of arrays (e.g. a checkpoint)."""
        return cls.from_nodes({k: leaf(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()})

    @classmethod
    def from_nodes(cls, node: dict) -> "ModelParams":
        """Assemble from a ``named()``-keyed dict of graph nodes."""
        gru = {s: GruParams(*(node[f"gru.{s}.{k}"] for k in GruParams.__dataclass_fields__)) for s in STREAMS}
        attention = None
        if "attn.iv.W_Q" in node:
            attention = {st: AttentionParams(*(node[f"attn.{st}.{k}"] for k in ("W_Q", "W_K", "W_V")))
                         for st in ("iv", "it")}
        head = HeadParams(*(node[f"head.{k}"] for k in ("W1", "b1", "W2", "b2")))
        decoder = DecoderParams(node["decoder.W_d"], node["decoder.b_d"]) if "decoder.W_d" in node else None
        return cls(gru, attention, head, decoder)

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.named().items()}

    def frozen(self) -> "ModelParams":
        """Copy whose leaves are constants (no gradient bookkeeping)."""
        return ModelParams.from_arrays(self.arrays(), leaf=ad.constant)


def init_model(dims: dict, d_h: int, task: str, mode: str = "full", recon: bool = False,
               rng: np.random.Generator | None = None) -> ModelParams:
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    rng = rng if rng is not None else np.random.default_rng(0)
    gru = {s: init_gru(dims[s], d_h, rng) for s in STREAMS}
    attention = None
    if mode != "concat":
        attention = {"iv": init_attention(d_h, rng), "it": init_attention(d_h, rng)}
    fused_width = 3 * d_h if mode == "concat" else 2 * d_h
    head = init_head(fused_width, d_h, task, rng)
    decoder = None
    if recon:
        decoder = init_decoder(d_h, rng)
        if mode == "concat":
            decoder = DecoderParams(ad.param(rng.uniform(-1, 1, (3 * d_h, 3 * d_h)) / np.sqrt(3 * d_h)),
                                    ad.param(np.zeros(3 * d_h)))
    return ModelParams(gru, attention, head, decoder)


@dataclass
class Forward:
    out: ad.Node
    fused: ad.Node
    finals: ad.Node
    attention_weights: tuple = ()


def model_forward(params: ModelParams, video, image, text, mode: str = "full", kv: str = "sequence",
                  squash: bool = False) -> Forward:
    """Forward a B-sample batch; stream arrays are B×T×d (or T×d for one sample)."""
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    inputs = {"video": np.asarray(video, dtype=np.float64), "image": np.asarray(image, dtype=np.float64),
              "text": np.asarray(text, dtype=np.float64)}
    inputs = {k: v[None] if v.ndim == 2 else v for k, v in inputs.items()}
    B = inputs["video"].shape[0]
    d_h = params.d_h
    keep = STREAMS if mode in ("full", "concat") else (mode,)
    enc = {}
    for s in STREAMS:
        if s in keep:
            enc[s] = gru_forward(params.gru[s], inputs[s])
        else:
            enc[s] = ModalityEncoding.zeros(inputs[s].shape[1], B, d_h)
    finals = ad.concat([enc[s].final for s in STREAMS], axis=1)
    weights = ()
    if mode == "concat":
        fused = finals
    else:
        fo = fuse(enc["video"], enc["image"], enc["text"], params.attention["iv"], params.attention["it"], kv=kv)
        fused, weights = fo.fused, (fo.weights_iv, fo.weights_it)
    out = head_forward(params.head, fused)
    if squash:
        out = ad.tanh(out)
    return Forward(out, fused, finals, weights)


def batch_loss(params: ModelParams, video, image, text, labels, task: str, mode: str = "full",
               kv: str = "sequence", lam: float = 0.0, alpha: float = 0.25, gamma: float = 2.0,
               squash: bool = False) -> ad.Node:
    """Mean task loss over the batch plus ``lam`` times the reconstruction term."""
    fw = model_forward(params, video, image, text, mode, kv, squash)
    recon = None
    if params.decoder is not None and lam > 0:
        recon = recon_loss(params.decoder, fw.fused, fw.finals)
    return total_loss(task, fw.out, labels, recon, lam, alpha, gamma)


def predict(params: ModelParams, video, image, text, task: str, mode: str = "full", kv: str = "sequence",
            squash: bool = False, chunk: int = 512) -> np.ndarray:
    """Probabilities (classification, N×1) or raw valence/arousal pairs (N×2)."""
    frozen = params.frozen()
    outs = []
    for lo in range(0, len(video), chunk):
        sl = slice(lo, lo + chunk)
        outs.append(model_forward(frozen, video[sl], image[sl], text[sl], mode, kv, squash).out.data)
    out = np.concatenate(outs, axis=0)
    if task == "classification":
        return 0.5 * (1.0 + np.tanh(0.5 * out))
    return out
