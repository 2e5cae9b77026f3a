"""Pre-training and fine-tuning loops.

Every random draw of step ``i`` comes from a generator seeded by
``(seed, i)`` and the sample order of epoch ``e`` from ``(seed, e)``, so a
run resumed from a checkpoint replays the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import diffops as D
from ..datapipe import (LabeledVolume, Volume, list_labeled, list_volumes, preprocess_ct, read_labeled,
                        read_volume, sample_labeled, sample_subvolume)
from ..diffops import ParamStore, Tape
from ..errors import ConfigError, NumericError
from ..metrics import dice
from ..model import ENCODER_FIELDS, SwinUNETR
from ..ssl import make_views, pretrain_losses
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .infer import predict_labels
from .optim import OptimState, adamw_step, lr_schedule

log = logging.getLogger(__name__)

_STEP_TAG, _ORDER_TAG = 1, 2
LOSS_NAMES = ("inpaint", "contrast", "rot")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list = field(default_factory=list)  # dicts with step, lr and loss terms
    val_history: list = field(default_factory=list)  # (step, mean foreground Dice)
    steps_to_target: int | None = None


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _STEP_TAG, step])


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Indices for 1-based ``step``; every epoch is a fresh seeded permutation."""
    out, cache = [], {}
    for j in range(batch_size):
        pos = (step - 1) * batch_size + j
        epoch = pos // n
        if epoch not in cache:
            cache[epoch] = np.random.default_rng([seed, _ORDER_TAG, epoch]).permutation(n)
        out.append(int(cache[epoch][pos % n]))
    return out


def _optim(cfg: RunConfig) -> OptimState:
    return OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                      weight_decay=cfg.weight_decay)


def _schedule(cfg: RunConfig, step: int) -> float:
    return lr_schedule(step, min(cfg.warmup, cfg.steps), cfg.steps, cfg.lr)


class CurveWriter:
    """Tab-separated training curve; float columns written with ``repr`` (round-trip exact)."""

    def __init__(self, path, columns, resume_step: int = 0):
        self.path = Path(path) if path else None
        self.columns = list(columns)
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept = []
        if resume_step and self.path.exists():
            lines = self.path.read_text().splitlines()[1:]
            kept = [ln for ln in lines if ln and int(ln.split("\t", 1)[0]) <= resume_step]
        self.path.write_text("\t".join(self.columns) + "\n" + "".join(ln + "\n" for ln in kept))

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write("\t".join(_fmt(row[c]) for c in self.columns) + "\n")


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_curve(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    cols = lines[0].split("\t")
    rows = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        rows.append({c: (int(v) if c == "step" else float(v)) for c, v in zip(cols, vals)})
    return rows


def _load_unlabeled(cfg: RunConfig) -> list[Volume]:
    paths = list_volumes(cfg.data_dir)
    if not paths:
        raise ConfigError(f"no volumes in {cfg.data_dir}")
    return [read_volume(p) for p in paths]


def _load_labeled(directory, n_classes: int) -> list[LabeledVolume]:
    stems = list_labeled(directory)
    if not stems:
        raise ConfigError(f"no labeled volumes in {directory}")
    return [read_labeled(s) for s in stems]


def _maybe_window(cfg: RunConfig, v: Volume) -> Volume:
    return preprocess_ct(v) if cfg.ct_window else v


def _resume(cfg: RunConfig, params: ParamStore, opt: OptimState) -> tuple[int, OptimState]:
    if not cfg.resume:
        return 0, opt
    ck = load_checkpoint(cfg.resume)
    _check_model(ck.config, cfg, ENCODER_FIELDS + ("n_classes", "embed_dim"))
    params.update_from(ck.params)
    if ck.opt is None:
        raise ConfigError(f"{cfg.resume} has no optimizer state to resume from")
    return ck.step, ck.opt


def _check_model(saved: RunConfig, cfg: RunConfig, names) -> None:
    for name in names:
        a, b = getattr(saved, name), getattr(cfg, name)
        if a != b:
            raise ConfigError(f"checkpoint {name}={a!r} does not match config {name}={b!r}")


def _finite(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what} loss at step {step}")
    return value


def _out(cfg: RunConfig, name: str) -> Path | None:
    return Path(cfg.out_dir) / name if cfg.out_dir else None


def pretrain(cfg: RunConfig, volumes=None) -> TrainResult:
    """Self-supervised pre-training of the encoder with the three proxy heads.

    Args:
        cfg: run configuration (``roi`` is the crop size).
        volumes: optional in-memory :class:`Volume` list; read from
            ``cfg.data_dir`` when omitted.

    Returns:
        :class:`TrainResult` holding the final checkpoint (heads flagged
        detachable) and the per-step curve.
    """
    volumes = [_maybe_window(cfg, v) for v in (volumes if volumes is not None else _load_unlabeled(cfg))]
    model = SwinUNETR(cfg.model, seed=cfg.seed, with_decoder=False, with_heads=True)
    params = model.params
    opt = _optim(cfg)
    start, opt = _resume(cfg, params, opt)
    active = [n for n, lam in zip(LOSS_NAMES, cfg.lambdas) if lam > 0]
    writer = CurveWriter(_out(cfg, "curve.tsv"), ["step", "lr"] + active + ["total"], start)
    enc_p, head_p = params.view("enc"), params.view("ssl")

    def snapshot(step):
        return Checkpoint(cfg, params, step, opt, ("ssl.",))

    curve = []
    for step in range(start + 1, cfg.steps + 1):
        rng = step_rng(cfg.seed, step)
        idx = batch_indices(cfg.seed, step, cfg.batch_size, len(volumes))
        batch = [sample_subvolume(volumes[i], cfg.roi, rng) for i in idx]
        views = make_views(batch, rng, s=cfg.s, fill=cfg.cutout_fill)
        params.zero_grad()
        with Tape() as tape:
            losses = pretrain_losses(views, cfg.model.encoder, enc_p, head_p, cfg.t, cfg.lambdas)
        total = _finite(float(losses["total"].data), "total", step)
        tape.backward(losses["total"])
        lr = _schedule(cfg, step)
        adamw_step(params, opt, lr)
        row = {"step": step, "lr": lr, **{n: float(losses[n].data) for n in active}, "total": total}
        curve.append(row)
        writer.write(row)
        log.info("pretrain step %d lr %.3g total %.5f", step, lr, total)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and cfg.out_dir:
            save_checkpoint(Path(cfg.out_dir) / f"step{step:06d}.swck", snapshot(step))
    final = snapshot(max(start, cfg.steps))
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, final)
    return TrainResult(final, curve)


def segmentation_loss(logits, labels: np.ndarray, smooth: float = 1e-5):
    """Soft Dice (mean over all classes) plus voxel-mean cross-entropy.

    Returns:
        ``(total, dice_term, ce_term)`` tensors.
    """
    K = logits.shape[0]
    onehot = np.moveaxis(np.eye(K, dtype=logits.dtype)[labels], -1, 0)
    n_vox = labels.size
    logp = D.log_softmax(logits, axis=0)
    ce = -D.sum(logp * onehot) * (1.0 / n_vox)
    p = D.exp(logp)
    axes = (1, 2, 3)
    inter = D.sum(p * onehot, axis=axes)
    denom = D.sum(p, axis=axes) + onehot.sum(axis=axes)
    dice_term = 1.0 - D.mean((inter * 2.0 + smooth) / (denom + smooth))
    return dice_term + ce, dice_term, ce


def mean_dice(labels: np.ndarray, pred: np.ndarray, n_classes: int) -> float:
    """Dice averaged over foreground classes."""
    return float(np.mean([dice(labels == c, pred == c) for c in range(1, n_classes)]))


def validate(model: SwinUNETR, data, cfg: RunConfig) -> float:
    scores = []
    for lv in data:
        roi = tuple(min(r, n) for r, n in zip(cfg.roi, lv.image.extents))
        pred = predict_labels(lv.image, model, roi, cfg.overlap)
        scores.append(mean_dice(lv.labels, pred, cfg.n_classes))
    return float(np.mean(scores))


def _flip(rng, img: np.ndarray, lbl: np.ndarray, prob: float):
    if prob <= 0:
        return img, lbl
    for ax in range(3):
        if rng.random() < prob:
            img, lbl = np.flip(img, ax + 1), np.flip(lbl, ax)
    return np.ascontiguousarray(img), np.ascontiguousarray(lbl)


def load_encoder(model: SwinUNETR, init: Checkpoint, cfg: RunConfig) -> None:
    """Copy encoder weights from ``init``; its heads and any decoder are ignored."""
    _check_model(init.config, cfg, ENCODER_FIELDS)
    enc = model.params.subset("enc.")
    missing = [k for k in enc if k not in init.params]
    if missing:
        raise ConfigError(f"checkpoint lacks encoder parameter {missing[0]}")
    for k in enc:
        if init.params[k].shape != enc[k].shape:
            raise ConfigError(f"encoder parameter {k} has shape {init.params[k].shape}, expected {enc[k].shape}")
        model.params.set(k, init.params[k].data)


def finetune(cfg: RunConfig, init=None, train=None, val=None) -> TrainResult:
    """Supervised segmentation training with soft Dice + cross-entropy.

    Args:
        cfg: run configuration; ``roi`` is the training crop.
        init: optional pre-trained :class:`Checkpoint` or path (falls back to
            ``cfg.init_checkpoint``). Only its encoder is used.
        train: labeled volumes (read from ``cfg.data_dir`` when omitted).
        val: validation volumes (``cfg.val_dir``; defaults to ``train``).

    Returns:
        :class:`TrainResult`. ``steps_to_target`` is the first validation step
        reaching ``cfg.target_dice``, after which training stops.
    """
    train = train if train is not None else _load_labeled(cfg.data_dir, cfg.n_classes)
    if val is None:
        val = _load_labeled(cfg.val_dir, cfg.n_classes) if cfg.val_dir else train
    for lv in list(train) + list(val):
        if lv.n_classes > cfg.n_classes or int(lv.labels.max()) >= cfg.n_classes:
            raise ConfigError(f"labels use {max(lv.n_classes, int(lv.labels.max()) + 1)} classes "
                              f"but n_classes={cfg.n_classes}")
    if cfg.ct_window:
        train = [LabeledVolume(preprocess_ct(lv.image), lv.labels, lv.n_classes) for lv in train]
        val = [LabeledVolume(preprocess_ct(lv.image), lv.labels, lv.n_classes) for lv in val]
    model = SwinUNETR(cfg.model, seed=cfg.seed, with_decoder=True)
    init = init if init is not None else (cfg.init_checkpoint or None)
    if init is not None:
        load_encoder(model, load_checkpoint(init) if isinstance(init, (str, Path)) else init, cfg)
    params = model.params
    opt = _optim(cfg)
    start, opt = _resume(cfg, params, opt)
    writer = CurveWriter(_out(cfg, "curve.tsv"), ["step", "lr", "dice", "ce", "total"], start)
    val_writer = CurveWriter(_out(cfg, "val.tsv"), ["step", "dice"], start)
    roi = cfg.roi

    def snapshot(step):
        return Checkpoint(cfg, params, step, opt)

    result = TrainResult(snapshot(start))
    for step in range(start + 1, cfg.steps + 1):
        rng = step_rng(cfg.seed, step)
        idx = batch_indices(cfg.seed, step, cfg.batch_size, len(train))
        params.zero_grad()
        terms = np.zeros(3)
        with Tape() as tape:
            losses = []
            for i in idx:
                crop = sample_labeled(train[i], tuple(min(r, n) for r, n in zip(roi, train[i].image.extents)), rng)
                img, lbl = _flip(rng, crop.image.data, crop.labels, cfg.flip_prob)
                total, d_term, ce = segmentation_loss(model.logits(img), lbl)
                losses.append(total)
                terms += [float(d_term.data), float(ce.data), float(total.data)]
            loss = D.stack(losses).mean()
        _finite(float(loss.data), "segmentation", step)
        tape.backward(loss)
        lr = _schedule(cfg, step)
        adamw_step(params, opt, lr)
        terms /= len(idx)
        row = {"step": step, "lr": lr, "dice": float(terms[0]), "ce": float(terms[1]), "total": float(loss.data)}
        result.curve.append(row)
        writer.write(row)
        if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and cfg.out_dir:
            save_checkpoint(Path(cfg.out_dir) / f"step{step:06d}.swck", snapshot(step))
        if cfg.val_every and (step % cfg.val_every == 0 or step == cfg.steps):
            score = validate(model, val, cfg)
            result.val_history.append((step, score))
            val_writer.write({"step": step, "dice": score})
            log.info("finetune step %d loss %.5f val dice %.4f", step, row["total"], score)
            if cfg.target_dice and score >= cfg.target_dice:
                result.steps_to_target = step
                result.checkpoint = snapshot(step)
                break
        result.checkpoint = snapshot(step)
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, result.checkpoint)
    return result
