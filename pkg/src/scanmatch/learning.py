"""Triplet ranking objectives, Adam with global-norm clipping, and the training loop."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attention import ScanConfig, score_grid_batch
from .encoders import ModelParams, encode_batch
from .errors import ConfigError, DomainError, TrainingError
from .evaluation import KS, encode_images, evaluate_grid, score_grid

log = logging.getLogger(__name__)


class LossMode(str, enum.Enum):
    ALL = "all"
    HARDEST = "hardest"


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.2
    mode: LossMode = LossMode.HARDEST

    def __post_init__(self):
        object.__setattr__(self, "mode", LossMode(self.mode))
        if not self.margin >= 0:
            raise ConfigError(f"margin must be >= 0, got {self.margin}")


# -- losses -----------------------------------------------------------------

def _diag(S):
    b = ad.value(S).shape[0]
    r = np.arange(b)
    return S[r, r]


def _check_square(S):
    shape = ad.value(S).shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise DomainError(f"score matrix must be square, got {shape}")
    return shape[0]


def triplet_loss_all(S, cfg):
    """Hinge loss summed over every in-batch negative sentence and image."""
    b = _check_square(S)
    if b < 2:
        return 0.0
    d = _diag(S)
    off = ~np.eye(b, dtype=bool)
    cost_s = ad.relu(cfg.margin - ad.reshape(d, (b, 1)) + S) * off  # negative sentences
    cost_im = ad.relu(cfg.margin - ad.reshape(d, (1, b)) + S) * off  # negative images
    return ad.sum(cost_s) + ad.sum(cost_im)


def hardest_negatives(S):
    """``(sentence_idx, image_idx)``: for positive ``a``, argmax over ``S[a, d != a]`` and ``S[m != a, a]``.

    Ties go to the lowest index.
    """
    S = np.asarray(ad.value(S))
    b = _check_square(S)
    filled = np.where(np.eye(b, dtype=bool), -np.inf, S)
    return np.argmax(filled, axis=1), np.argmax(filled, axis=0)


def triplet_loss_hard(S, cfg):
    """Hinge loss against the hardest negative sentence and image of each positive pair."""
    b = _check_square(S)
    if b < 2:
        raise DomainError("hardest-negative loss needs a batch of at least 2 pairs")
    d = _diag(S)
    off = ~np.eye(b, dtype=bool)
    hard_s = ad.amax(S, axis=1, mask=off)
    hard_im = ad.amax(S, axis=0, mask=off)
    return ad.sum(ad.relu(cfg.margin - d + hard_s)) + ad.sum(ad.relu(cfg.margin - d + hard_im))


def triplet_loss(S, cfg):
    if cfg.mode is LossMode.HARDEST:
        return triplet_loss_hard(S, cfg)
    return triplet_loss_all(S, cfg)


# -- optimisation -----------------------------------------------------------

def global_norm(grads):
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, max_norm):
    """Rescale all gradients together so their joint L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


class Adam:
    def __init__(self, lr=0.0002, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=2.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update ``params`` (name -> array mapping) in place; returns the pre-clip norm."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {name!r} at step {self.t + 1}")
        grads, norm = clip_gradients(grads, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    scan: ScanConfig = field(default_factory=ScanConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 16
    lr: float = 0.002
    lr_decay_epoch: int = 10
    lr_decay: float = 0.1
    epochs: int = 20
    clip_norm: float = 2.0
    bidirectional: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.lr > 0 or self.epochs < 0 or not self.clip_norm > 0:
            raise ConfigError("lr and clip_norm must be positive, epochs non-negative")

    def replace(self, **changes):
        return replace(self, **changes)

    def lr_at(self, epoch):
        """Learning rate for 0-based ``epoch``."""
        return self.lr * (self.lr_decay if epoch >= self.lr_decay_epoch else 1.0)


def batch_scores(features, sentences, params, cfg, bidirectional=True):
    """``B x B`` score matrix of images against sentences (diagonal = aligned pairs)."""
    V, rmask = encode_images(features, params)
    E, wmask = encode_batch(sentences, params, bidirectional=bidirectional)
    return score_grid_batch(V, E, cfg, rmask, wmask)


def loss_and_grads(params, features, sentences, cfg):
    tape = ad.Tape()
    pv = {name: tape.param(name, arr) for name, arr in params.items()}
    S = batch_scores(features, sentences, pv, cfg.scan, cfg.bidirectional)
    loss = triplet_loss(S, cfg.loss)
    if not isinstance(loss, ad.Var):  # no negatives in the batch
        return float(loss), {n: np.zeros_like(a) for n, a in params.items()}
    return float(loss.value), tape.backward(loss)


def epoch_batches(train_ids, captions_by_image, batch_size, rng):
    """Batches of (image, caption) pairs in which no image appears twice.

    Round ``r`` pairs each image with one not-yet-used caption, and batches
    never cross rounds, so every caption is seen once per epoch.  A leftover
    single pair at the end of a round is skipped since it has no negatives.
    """
    order = {i: rng.permutation(len(captions_by_image[i])) for i in train_ids}
    rounds = max(len(c) for c in captions_by_image.values())
    batches = []
    for r in range(rounds):
        imgs = [i for i in train_ids if r < len(order[i])]
        imgs = [imgs[j] for j in rng.permutation(len(imgs))]
        for s in range(0, len(imgs), batch_size):
            chunk = imgs[s:s + batch_size]
            if len(chunk) >= 2:
                batches.append([(i, captions_by_image[i][order[i][r]]) for i in chunk])
    return batches


@dataclass
class TrainResult:
    params: ModelParams  # best by validation recall sum (final params when there is no validation split)
    final_params: ModelParams
    history: list
    best_epoch: int | None


def _val_record(res):
    rec = {}
    for key, short in (("sentence", "sent"), ("image", "img")):
        for k in KS:
            rec[f"val_{short}_r{k}"] = res[key].recalls[k]
    rec["val_rsum"] = res["rsum"]
    return rec


def train(dataset, params, cfg, seed=0, threads=1, on_epoch=None):
    """Train on ``dataset.splits['train']``; validate on ``'val'`` after every epoch.

    Deterministic for a fixed ``seed``.  ``on_epoch`` receives each history record.
    """
    params = params.copy()
    rng = np.random.default_rng((seed, 1))
    train_ids = list(dataset.splits.get("train", range(len(dataset.features))))
    if not train_ids:
        raise DomainError("empty training split")
    caps = {i: [] for i in train_ids}
    for img, words in dataset.captions:
        if img in caps:
            caps[img].append(dataset.vocab.encode(words)[0])
    caps = {i: c for i, c in caps.items() if c}
    train_ids = [i for i in train_ids if i in caps]
    has_val = bool(dataset.splits.get("val"))
    if has_val:
        vfeats, vsents, vowner = dataset.subset("val")

    opt = Adam(lr=cfg.lr, clip_norm=cfg.clip_norm)
    history, best, best_rsum, best_epoch = [], params.copy(), -math.inf, None
    for epoch in range(cfg.epochs):
        opt.lr = cfg.lr_at(epoch)
        total, pairs = 0.0, 0
        for bi, batch in enumerate(epoch_batches(train_ids, caps, cfg.batch_size, rng)):
            feats = [dataset.features[i] for i, _ in batch]
            sents = [s for _, s in batch]
            loss, grads = loss_and_grads(params.arrays, feats, sents, cfg)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}, batch {bi + 1}")
            try:
                opt.step(params.arrays, grads)
            except TrainingError as exc:
                raise TrainingError(f"{exc} (epoch {epoch + 1}, batch {bi + 1})") from None
            total += loss
            pairs += len(batch)
        rec = {"epoch": epoch + 1, "lr": opt.lr, "train_loss": total / max(pairs, 1)}
        if has_val:
            res = evaluate_grid(score_grid(vfeats, vsents, vowner, params, cfg.scan,
                                           cfg.bidirectional, threads=threads))
            rec.update(_val_record(res))
            if res["rsum"] > best_rsum:
                best_rsum, best, best_epoch = res["rsum"], params.copy(), epoch + 1
        else:
            best, best_epoch = params.copy(), epoch + 1
        history.append(rec)
        log.info("epoch %d lr %.6g loss %.6f", rec["epoch"], rec["lr"], rec["train_loss"])
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(best, params, history, best_epoch)
