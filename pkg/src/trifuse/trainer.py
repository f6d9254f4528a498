"""AdamW training with early stopping, checkpoints, evaluation and fold/ablation drivers."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import MODALITIES, Dataset, Manifest, augment, decode_block, encode_block, load_dataset
from .errors import ConfigError, ContractError, ParseError
from .metrics import aggregate_folds, ccc_va, f1_binary
from .model import MODES, ModelParams, batch_loss, init_model, predict

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "Checkpoint",
    "TrainResult",
    "adamw_step",
    "train",
    "evaluate",
    "score",
    "save_checkpoint",
    "load_checkpoint",
    "cross_validate",
    "run_ablation",
]

log = logging.getLogger(__name__)

METRIC = {"classification": "F1", "regression": "CCC"}


@dataclass
class TrainConfig:
    task: str = "classification"
    lr: float = 3e-4
    batch: int = 8
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    patience: int = 10
    max_epochs: int = 50
    seed: int = 0
    augment: bool = True
    sigma: float = 0.01
    mask_p: float = 0.1
    recon: bool = False
    lam: float = 0.1
    d_h: int = 32
    kv: str = "sequence"
    mode: str = "full"
    val_fold: int = 5
    alpha: float = 0.25
    gamma: float = 2.0
    squash: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.task not in METRIC:
            raise ConfigError(f"task must be one of {sorted(METRIC)}, got {self.task!r}")
        if self.lr < 0 or self.batch < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError("need lr >= 0, batch >= 1, patience >= 1, max_epochs >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.kv not in ("sequence", "final"):
            raise ConfigError(f"kv must be 'sequence' or 'final', got {self.kv!r}")
        if not 1 <= self.val_fold <= 5:
            raise ConfigError(f"val_fold must be in 1..5, got {self.val_fold}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class OptimizerState:
    """Adam moments for all parameters, flattened in ``names`` order."""

    m: np.ndarray | None = None
    v: np.ndarray | None = None
    t: int = 0
    names: tuple = ()


def adamw_step(params: dict, grads: dict, state: OptimizerState, cfg: TrainConfig) -> OptimizerState:
    """One decoupled-weight-decay Adam update.

    Each parameter node receives a new immutable value; the moments live
    in one flat vector so the update is a handful of vector ops.
    """
    names = tuple(params)
    for name in names:
        if grads[name].shape != params[name].shape:
            raise ContractError(
                f"adamw_step: gradient {list(grads[name].shape)} for parameter {name} {list(params[name].shape)}"
            )
    theta = np.concatenate([params[n].data.reshape(-1) for n in names])
    g = np.concatenate([np.asarray(grads[n], dtype=np.float64).reshape(-1) for n in names])
    if state.m is None:
        state.m, state.v, state.names = np.zeros_like(theta), np.zeros_like(theta), names
    elif state.names != names or state.m.shape != theta.shape:
        raise ContractError("adamw_step: parameter set changed between steps")
    b1, b2 = cfg.betas
    state.t += 1
    state.m *= b1
    state.m += (1.0 - b1) * g
    state.v *= b2
    state.v += (1.0 - b2) * (g * g)
    step = (state.m / (1.0 - b1 ** state.t)) / (np.sqrt(state.v / (1.0 - b2 ** state.t)) + cfg.eps)
    new = theta * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * step
    lo = 0
    for n in names:
        node = params[n]
        hi = lo + node.data.size
        node.value = ad.Tensor._own(new[lo:hi].reshape(node.shape))
        lo = hi
    return state


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    dims: dict
    epoch: int
    best_score: float

    def model(self) -> ModelParams:
        return ModelParams.from_arrays(self.params)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    stopped_early: bool


def score(task: str, preds: np.ndarray, labels: np.ndarray) -> float:
    if task == "classification":
        return f1_binary(preds, labels)
    return ccc_va(preds, labels)


def _predict(params: ModelParams, data: Dataset, cfg: TrainConfig) -> np.ndarray:
    return predict(params, data.video, data.image, data.text, cfg.task, cfg.mode, cfg.kv, cfg.squash)


def train(cfg: TrainConfig, data, log_fn=None) -> TrainResult:
    """Train on every fold except ``cfg.val_fold``; keep the best-validation weights.

    ``data`` is a Manifest or an already loaded Dataset.  ``log_fn`` receives
    each epoch's record as it is produced.
    """
    if isinstance(data, Manifest):
        data = load_dataset(data, cfg.task)
    if data.task != cfg.task:
        raise ConfigError(f"config task {cfg.task!r} but data labels are {data.task!r}")
    tr, va = data.split(cfg.val_fold)
    if len(tr) == 0 or len(va) == 0:
        raise ConfigError(f"empty split: {len(tr)} training and {len(va)} validation windows")

    init_seq, shuffle_seq, aug_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    params = init_model(data.dims, cfg.d_h, cfg.task, cfg.mode, cfg.recon, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    aug_rng = np.random.default_rng(aug_seq)
    named = params.named()
    state = OptimizerState()
    lam = cfg.lam if cfg.recon else 0.0

    best, best_epoch, best_params, bad = -np.inf, 0, params.arrays(), 0
    history = []
    stopped = False
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(tr))
        total = 0.0
        for lo in range(0, len(order), cfg.batch):
            idx = order[lo:lo + cfg.batch]
            streams = [getattr(tr, m)[idx] for m in MODALITIES]
            if cfg.augment:
                streams = [augment(x, cfg.sigma, cfg.mask_p, aug_rng) for x in streams]
            loss = batch_loss(params, *streams, tr.labels[idx], cfg.task, cfg.mode, cfg.kv, lam,
                              cfg.alpha, cfg.gamma, cfg.squash)
            ad.zero_grad(named.values())
            ad.backward(loss)
            adamw_step(named, {k: n.grad for k, n in named.items()}, state, cfg)
            total += float(loss.data[0]) * len(idx)
        val = score(cfg.task, _predict(params, va, cfg), va.labels)
        improved = val > best
        if improved:
            best, best_epoch, best_params, bad = val, epoch, params.arrays(), 0
        else:
            bad += 1
        rec = {"epoch": epoch, "train_loss": total / len(tr), "val_" + METRIC[cfg.task]: val,
               "best": best, "improved": improved}
        history.append(rec)
        if log_fn is not None:
            log_fn(rec)
        log.info("epoch %d loss %.6f val %s %.4f", epoch, rec["train_loss"], METRIC[cfg.task], val)
        if bad >= cfg.patience:
            stopped = True
            break
    ckpt = Checkpoint(dict(best_params), cfg, data.dims, best_epoch, float(best))
    return TrainResult(ckpt, history, stopped)


def evaluate(ckpt: Checkpoint, data, split="val") -> dict:
    """Score a checkpoint on ``split``: "val", "train", "all" or a fold number."""
    cfg = ckpt.config
    if isinstance(data, Manifest):
        if data.task() != cfg.task:
            raise ConfigError(f"checkpoint task {cfg.task!r} but manifest labels are {data.task()!r}")
        data = load_dataset(data, cfg.task)
    if data.task != cfg.task:
        raise ConfigError(f"checkpoint task {cfg.task!r} but data labels are {data.task!r}")
    if split == "val":
        part = data.split(cfg.val_fold)[1]
    elif split == "train":
        part = data.split(cfg.val_fold)[0]
    elif split == "all":
        part = data
    else:
        part = data.subset(np.flatnonzero(data.folds == int(split)))
    if len(part) == 0:
        raise ConfigError(f"split {split!r} is empty")
    value = score(cfg.task, _predict(ckpt.model(), part, cfg), part.labels)
    return {"metric": METRIC[cfg.task], "score": value, "split": str(split), "n": len(part),
            "task": cfg.task, "mode": cfg.mode, "val_fold": cfg.val_fold}


# -- checkpoint files ---------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``<path>.json`` (index + metadata) and ``<path>.bin`` (tensor blocks).

    Tensors reuse the feature-file block layout with version 2 (float64
    payload) so reloading is bit-exact; 1-D tensors are stored as 1×n.
    """
    path = Path(path)
    blob = bytearray()
    index = {}
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype=np.float64)
        index[name] = {"offset": len(blob), "shape": list(arr.shape)}
        blob += encode_block(arr.reshape(1, -1) if arr.ndim == 1 else arr, version=2)
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(bytes(blob))
    meta = {
        "format": "trifuse-checkpoint/1",
        "blob": bin_path.name,
        "tensors": index,
        "config": ckpt.config.to_dict(),
        "dims": ckpt.dims,
        "epoch": ckpt.epoch,
        "best_score": ckpt.best_score,
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return json_path


def load_checkpoint(path) -> Checkpoint:
    json_path = Path(path).with_suffix(".json")
    meta = json.loads(json_path.read_text())
    buf = (json_path.parent / meta["blob"]).read_bytes()
    params = {}
    for name, entry in meta["tensors"].items():
        mat, _ = decode_block(buf, entry["offset"], versions=(2,))
        if list(mat.shape) != entry["shape"] and [mat.size] != entry["shape"]:
            raise ParseError(f"tensor {name} shape {list(mat.shape)} disagrees with index {entry['shape']}",
                             entry["offset"])
        params[name] = mat.reshape(entry["shape"]).astype(np.float64)
    return Checkpoint(params, TrainConfig.from_dict(meta["config"]), meta["dims"], meta["epoch"],
                      meta["best_score"])


# -- drivers --------------------------------------------------------------------


def cross_validate(cfg: TrainConfig, data, log_fn=None):
    """Train once per validation fold and aggregate the five validation scores."""
    if isinstance(data, Manifest):
        data = load_dataset(data, cfg.task)
    scores = []
    for fold in range(1, 6):
        res = train(replace(cfg, val_fold=fold), data, log_fn)
        scores.append(evaluate(res.checkpoint, data, "val")["score"])
    return aggregate_folds(scores, METRIC[cfg.task])


def run_ablation(cfg: TrainConfig, data, seeds=(0, 1, 2), modes=MODES, progress=None) -> dict:
    """Best validation score of every mode under every seed, plus per-mode means."""
    if isinstance(data, Manifest):
        data = load_dataset(data, cfg.task)
    table = {}
    for mode in modes:
        runs = []
        for seed in seeds:
            res = train(replace(cfg, mode=mode, seed=seed), data)
            runs.append({"seed": seed, "score": res.checkpoint.best_score, "epochs": len(res.log),
                         "best_epoch": res.checkpoint.epoch})
            if progress is not None:
                progress(mode, runs[-1])
        table[mode] = {"runs": runs, "mean": float(np.mean([r["score"] for r in runs]))}
    return {"metric": METRIC[cfg.task], "task": cfg.task, "modes": table}
