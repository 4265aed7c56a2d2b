"""Two-stage training.

Stage 1 fits one autoencoder per modality with the reconstruction loss.
Stage 2 loads both trained encoders, freezes them, and fits the fusion
module and a fresh decoder with the fusion loss.  ``train_one_stage``
fits everything jointly from scratch (ablation).
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, TextIO

import numpy as np

from . import losses
from .autograd import ParamStore, Tape
from .checkpoint import ArchitectureMismatchError, Checkpoint, apply_params
from .config import FuseConfig
from .imageio import ImageReadError, as_gray, read_image
from .model import AutoEncoder, FusionNet

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png")
ENCODER_FIELDS = ("stem_channels", "stage_channels", "growth", "dense_layers")


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = 4
    batch_size: int = 2
    lr0: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 2
    momentum: float = 0.9
    seed: int = 0
    image_size: int = 64
    steps_per_epoch: int = 0  # 0: one pass over the corpus per epoch
    clip_norm: float = 10.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        for name in ("epochs", "batch_size", "decay_every", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "TrainConfig":
        defaults = {1: dict(epochs=4, batch_size=2), 2: dict(epochs=8, batch_size=8)}[stage]
        return cls(stage=stage, **{**defaults, **overrides})


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """``lr0`` divided by ``1/lr_decay`` once per ``decay_every`` epochs."""
    k = epoch // cfg.decay_every
    return cfg.lr0 / (1.0 / cfg.lr_decay) ** k


# ----------------------------------------------------------------------------
# optimiser


class SGD:
    """Momentum SGD: ``v <- m*v + g``, ``p <- p - lr*v`` on trainable entries."""

    def __init__(self, params: ParamStore, momentum: float = 0.9, clip_norm: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = {n: np.zeros_like(p.data) for n, p in params.trainable()}

    def step(self, lr: float) -> float:
        """Apply one update; returns the (pre-clipping) global gradient norm."""
        live = self.params.trainable()
        for name, p in live:
            if p.grad is None:
                raise RuntimeError(f"parameter {name} has no gradient")
        norm = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in live))
        scale = 1.0
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for name, p in live:
            v = self.velocity[name]
            v *= self.momentum
            v += scale * p.grad
            p.data -= lr * v
        return norm


def sgd_step(params: ParamStore, lr: float, momentum: float = 0.9, state: SGD | None = None) -> SGD:
    opt = state or SGD(params, momentum)
    opt.step(lr)
    return opt


# ----------------------------------------------------------------------------
# data


@dataclass
class Pair:
    stem: str
    ir: np.ndarray
    vi: np.ndarray


def _load_gray(path: Path) -> np.ndarray:
    return as_gray(read_image(path))


def load_corpus(root, image_size: int | None = None) -> list[Pair]:
    """Pair ``<stem>_ir.<ext>`` with ``<stem>_vi.<ext>`` in lexicographic stem order.

    Unreadable files, unpaired stems and images that are not square with a
    side divisible by 8 (or not ``image_size`` when given) are skipped with a
    warning.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"corpus directory {root} does not exist")
    found: dict[str, dict[str, Path]] = {}
    for path in sorted(root.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        for tag in ("ir", "vi"):
            if path.stem.endswith("_" + tag):
                found.setdefault(path.stem[: -len(tag) - 1], {})[tag] = path
    pairs = []
    for stem in sorted(found):
        entry = found[stem]
        if set(entry) != {"ir", "vi"}:
            log.warning("skipping %s: missing %s image", stem, "ir" if "ir" not in entry else "vi")
            continue
        try:
            ir, vi = _load_gray(entry["ir"]), _load_gray(entry["vi"])
        except ImageReadError as exc:
            log.warning("skipping %s: %s", stem, exc)
            continue
        if ir.shape != vi.shape or ir.shape[0] != ir.shape[1] or ir.shape[0] % 8:
            log.warning("skipping %s: images must be equal squares with side divisible by 8", stem)
            continue
        if image_size is not None and ir.shape[0] != image_size:
            log.warning("skipping %s: size %d != %d", stem, ir.shape[0], image_size)
            continue
        pairs.append(Pair(stem, ir, vi))
    return pairs


def batches(n: int, cfg: TrainConfig, rng: np.random.Generator) -> Iterator[list[list[int]]]:
    """Yield, per epoch, the list of index batches (deterministic given ``rng``)."""
    per_epoch = cfg.steps_per_epoch or math.ceil(n / cfg.batch_size)
    pending: list[int] = []
    for _ in range(cfg.epochs):
        epoch = []
        for _ in range(per_epoch):
            if len(pending) < cfg.batch_size and (cfg.steps_per_epoch or not pending):
                pending.extend(int(i) for i in rng.permutation(n))
            epoch.append(pending[: cfg.batch_size])
            pending = pending[cfg.batch_size:]
        pending = [] if not cfg.steps_per_epoch else pending
        yield epoch


# ----------------------------------------------------------------------------
# logging


class TrainLog:
    """Append-only text log, one comma-separated line per optimiser step."""

    def __init__(self, sink: str | Path | TextIO | None = None):
        self.records: list[dict] = []
        self._fh = None
        self._own = False
        if isinstance(sink, (str, Path)):
            self._fh = open(sink, "a")
            self._own = True
        elif sink is not None:
            self._fh = sink

    def write(self, step: int, stage: int, lr: float, **terms: float) -> None:
        rec = {"step": step, "stage": stage, "lr": lr, **terms}
        self.records.append(rec)
        if self._fh is not None:
            self._fh.write(", ".join([str(step), str(stage), repr(lr)] + [repr(float(v)) for v in terms.values()]) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._own and self._fh is not None:
            self._fh.close()


# ----------------------------------------------------------------------------
# stage 1


@dataclass
class Stage1Result:
    ir: Checkpoint
    vi: Checkpoint
    history: list[dict] = field(default_factory=list)


def _stack(pairs: list[Pair], idx: list[int], attr: str) -> np.ndarray:
    return np.stack([getattr(pairs[i], attr) for i in idx])


def _require(pairs: list[Pair]) -> None:
    if not pairs:
        raise ValueError("training corpus is empty")


def autoencoder_loss(ae: AutoEncoder, images: np.ndarray, w: losses.LossWeights) -> dict:
    return losses.auto_terms(images, ae(images), w)


def train_stage1(pairs: list[Pair], cfg: TrainConfig, model_cfg: FuseConfig | None = None,
                 log_sink=None) -> Stage1Result:
    _require(pairs)
    model_cfg = model_cfg or FuseConfig()
    w = losses.LossWeights(model_cfg.w_s, model_cfg.w_g)
    rng = np.random.default_rng(cfg.seed)
    aes = {"ir": AutoEncoder(model_cfg, rng, "ir"), "vi": AutoEncoder(model_cfg, rng, "vi")}
    stores = {m: ae.param_store() for m, ae in aes.items()}
    opts = {m: SGD(stores[m], cfg.momentum, cfg.clip_norm) for m in aes}
    tlog = TrainLog(log_sink)
    step = 0
    try:
        for epoch, epoch_batches in enumerate(batches(len(pairs), cfg, rng)):
            lr = learning_rate(cfg, epoch)
            for idx in epoch_batches:
                totals = {"total": 0.0, "mse": 0.0, "ssim": 0.0}
                for m, ae in aes.items():
                    images = _stack(pairs, idx, m)
                    stores[m].zero_grad()
                    with Tape() as tape:
                        terms = autoencoder_loss(ae, images, w)
                    tape.backward(terms["total"])
                    opts[m].step(lr)
                    for k in totals:
                        totals[k] += terms[k].item()
                step += 1
                tlog.write(step, 1, lr, loss_total=totals["total"], loss_mse=totals["mse"],
                           loss_ssim=totals["ssim"])
    finally:
        tlog.close()
    state = rng.bit_generator.state
    ck = {m: Checkpoint("autoencoder", model_cfg, stores[m].snapshot(), step, state, m) for m in aes}
    return Stage1Result(ck["ir"], ck["vi"], tlog.records)


def evaluate_autoencoder(ckpt: Checkpoint, images: np.ndarray) -> float:
    ae = build_autoencoder(ckpt)
    w = losses.LossWeights(ckpt.config.w_s, ckpt.config.w_g)
    return autoencoder_loss(ae, images, w)["total"].item()


def build_autoencoder(ckpt: Checkpoint) -> AutoEncoder:
    if ckpt.kind != "autoencoder":
        raise ArchitectureMismatchError(f"expected an autoencoder checkpoint, got {ckpt.kind!r}")
    ae = AutoEncoder(ckpt.config, np.random.default_rng(0), ckpt.modality or "ir")
    apply_params(ae.param_store(), ckpt.params)
    return ae


# ----------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Result:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)


def build_fusion_model(ckpt: Checkpoint) -> FusionNet:
    if ckpt.kind != "fusion":
        raise ArchitectureMismatchError(f"expected a fusion checkpoint, got {ckpt.kind!r}")
    model = FusionNet(ckpt.config, np.random.default_rng(0))
    apply_params(model.param_store(), ckpt.params)
    return model


def _check_encoder_arch(model_cfg: FuseConfig, enc: Checkpoint, modality: str) -> None:
    if enc.kind != "autoencoder":
        raise ArchitectureMismatchError(f"{modality} checkpoint is a {enc.kind!r} checkpoint")
    for name in ENCODER_FIELDS:
        if getattr(enc.config, name) != getattr(model_cfg, name):
            raise ArchitectureMismatchError(
                f"{modality} encoder {name}={getattr(enc.config, name)} but config has {getattr(model_cfg, name)}")


def _fusion_loop(model: FusionNet, store: ParamStore, pairs: list[Pair], cfg: TrainConfig,
                 rng: np.random.Generator, w: losses.LossWeights, tlog: TrainLog, stage: int) -> int:
    opt = SGD(store, cfg.momentum, cfg.clip_norm)
    step = 0
    for epoch, epoch_batches in enumerate(batches(len(pairs), cfg, rng)):
        lr = learning_rate(cfg, epoch)
        for idx in epoch_batches:
            ir, vi = _stack(pairs, idx, "ir"), _stack(pairs, idx, "vi")
            store.zero_grad()
            with Tape() as tape:
                terms = losses.cam_terms(model(ir, vi), ir, vi, w)
            tape.backward(terms["total"])
            opt.step(lr)
            step += 1
            tlog.write(step, stage, lr, loss_total=terms["total"].item(), loss_int=terms["int"].item(),
                       loss_gra=terms["gra"].item())
    return step


def train_stage2(pairs: list[Pair], enc_ir: Checkpoint, enc_vi: Checkpoint, cfg: TrainConfig,
                 model_cfg: FuseConfig | None = None, log_sink=None) -> Stage2Result:
    """Train fusion module + decoder on top of frozen stage-1 encoders."""
    _require(pairs)
    model_cfg = model_cfg or enc_ir.config
    _check_encoder_arch(model_cfg, enc_ir, "ir")
    _check_encoder_arch(model_cfg, enc_vi, "vi")
    w = losses.LossWeights(model_cfg.w_s, model_cfg.w_g)
    rng = np.random.default_rng(cfg.seed)
    model = FusionNet(model_cfg, rng)
    store = model.param_store()
    apply_params(store, enc_ir.params, {"encoder.": "enc_ir."})
    apply_params(store, enc_vi.params, {"encoder.": "enc_vi."})
    for name, p in store.items():
        if name.startswith(("enc_ir.", "enc_vi.")):
            # frozen: never updated, and no tape nodes are recorded through them
            p.trainable = False
            p.requires_grad = False
    tlog = TrainLog(log_sink)
    try:
        step = _fusion_loop(model, store, pairs, cfg, rng, w, tlog, 2)
    finally:
        tlog.close()
    ck = Checkpoint("fusion", model_cfg, store.snapshot(), step, rng.bit_generator.state)
    return Stage2Result(ck, tlog.records)


def train_one_stage(pairs: list[Pair], cfg: TrainConfig, model_cfg: FuseConfig | None = None,
                    log_sink=None) -> Stage2Result:
    """Encoders, fusion module and decoder trained jointly with the fusion loss."""
    _require(pairs)
    model_cfg = dataclasses.replace(model_cfg or FuseConfig(), two_stage=False)
    w = losses.LossWeights(model_cfg.w_s, model_cfg.w_g)
    rng = np.random.default_rng(cfg.seed)
    model = FusionNet(model_cfg, rng)
    store = model.param_store()
    tlog = TrainLog(log_sink)
    try:
        step = _fusion_loop(model, store, pairs, cfg, rng, w, tlog, 2)
    finally:
        tlog.close()
    ck = Checkpoint("fusion", model_cfg, store.snapshot(), step, rng.bit_generator.state)
    return Stage2Result(ck, tlog.records)


def fuse_arrays(model: FusionNet, ir: np.ndarray, vi: np.ndarray) -> np.ndarray:
    """Fuse one grey pair (H, W) -> (H, W) in (0, 1)."""
    return model(np.asarray(ir, dtype=np.float64)[None], np.asarray(vi, dtype=np.float64)[None]).data[0]


TrainFn = Callable[..., Stage2Result]
