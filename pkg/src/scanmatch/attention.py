"""Stacked Cross Attention scoring between region and word features.

All pipeline stages accept arrays with arbitrary leading batch dimensions
(``V``: ``(..., k, h)``, ``E``: ``(..., n, h)``) and optional boolean masks
for padded regions/words, so the same code scores a single pair, or a full
images x sentences grid through broadcasting.  Inputs may be tape variables.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DimensionError, DomainError


class Direction(str, enum.Enum):
    IMAGE_TEXT = "i-t"
    TEXT_IMAGE = "t-i"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("_", "-")
        aliases = {
            "i-t": cls.IMAGE_TEXT, "i2t": cls.IMAGE_TEXT, "image-text": cls.IMAGE_TEXT,
            "imagetext": cls.IMAGE_TEXT,
            "t-i": cls.TEXT_IMAGE, "t2i": cls.TEXT_IMAGE, "text-image": cls.TEXT_IMAGE,
            "textimage": cls.TEXT_IMAGE,
        }
        if key not in aliases:
            raise ConfigError(f"unknown direction {s!r}")
        return aliases[key]


class Pooling(str, enum.Enum):
    LSE = "lse"
    AVG = "avg"
    SUM = "sum"
    MAX = "max"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        try:
            return cls(str(s).lower())
        except ValueError:
            raise ConfigError(f"unknown pooling {s!r}") from None


class Method(str, enum.Enum):
    SCAN = "scan"
    SUM_MAX = "sum-max"

    @classmethod
    def parse(cls, s):
        if isinstance(s, cls):
            return s
        key = str(s).lower().replace("_", "-")
        if key in ("summax", "sum-max"):
            return cls.SUM_MAX
        if key == "scan":
            return cls.SCAN
        raise ConfigError(f"unknown method {s!r}")


@dataclass(frozen=True)
class ScanConfig:
    direction: Direction = Direction.IMAGE_TEXT
    pooling: Pooling = Pooling.AVG
    lambda1: float = 4.0
    lambda2: float = 5.0
    max_regions: int | None = None
    method: Method = Method.SCAN
    summax_cosine: bool = False

    def __post_init__(self):
        object.__setattr__(self, "direction", Direction.parse(self.direction))
        object.__setattr__(self, "pooling", Pooling.parse(self.pooling))
        object.__setattr__(self, "method", Method.parse(self.method))
        if not self.lambda1 > 0:
            raise ConfigError(f"lambda1 must be positive, got {self.lambda1}")
        if self.pooling is Pooling.LSE and not self.lambda2 > 0:
            raise ConfigError(f"lambda2 must be positive for LSE pooling, got {self.lambda2}")
        if self.max_regions is not None and self.max_regions < 1:
            raise ConfigError(f"max_regions must be >= 1, got {self.max_regions}")

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "direction": self.direction.value,
            "pooling": self.pooling.value,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "max_regions": self.max_regions,
            "method": self.method.value,
            "summax_cosine": self.summax_cosine,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class AttentionTrace:
    """Every intermediate of one pair's score.

    ``weights`` is always ``k x n``: rows sum to one for Image-Text (softmax
    over words), columns sum to one for Text-Image (softmax over regions).
    """

    direction: Direction
    sim: np.ndarray
    sim_normalized: np.ndarray
    weights: np.ndarray
    attended: np.ndarray
    relevance: np.ndarray
    score: float
    extra: dict = field(default_factory=dict)


REGION_AXIS = -2
WORD_AXIS = -1


def _check_width(V, E):
    if ad.value(V).shape[-1] != ad.value(E).shape[-1]:
        raise DimensionError(
            f"embedding widths differ: regions {ad.value(V).shape} vs words {ad.value(E).shape}")


def _pair_mask(region_mask, word_mask):
    if region_mask is None and word_mask is None:
        return None
    rm = True if region_mask is None else np.asarray(region_mask, dtype=bool)[..., :, None]
    wm = True if word_mask is None else np.asarray(word_mask, dtype=bool)[..., None, :]
    return np.logical_and(rm, wm)


def similarity_matrix(V, E):
    """Cosine similarity between every region and every word, ``(..., k, n)``."""
    _check_width(V, E)
    vn = V / ad.safe_norm(V, axis=-1)
    en = E / ad.safe_norm(E, axis=-1)
    return vn @ ad.transpose(en)


def threshold_normalize(S, axis, mask=None):
    """Clamp at zero and L2-normalise along ``axis`` (``"over_regions"`` or ``"over_words"``).

    Slices with no positive entry come out as zeros.
    """
    ax = {"over_regions": REGION_AXIS, "over_words": WORD_AXIS}.get(axis, axis)
    if ax not in (REGION_AXIS, WORD_AXIS):
        raise ConfigError(f"unknown normalisation axis {axis!r}")
    clamped = ad.relu(S)
    if mask is not None:
        clamped = clamped * mask
    return clamped / ad.safe_norm(clamped, axis=ax)


def attend(S_norm, targets, lambda1, direction, region_mask=None, word_mask=None):
    """Attention-weighted targets; returns ``(attended, weights)``.

    Image-Text: each region attends over the words (``targets`` = word features).
    Text-Image: each word attends over the regions (``targets`` = region features).
    """
    direction = Direction.parse(direction)
    logits = lambda1 * S_norm
    if direction is Direction.IMAGE_TEXT:
        m = None if word_mask is None else np.asarray(word_mask, dtype=bool)[..., None, :]
        weights = ad.softmax(logits, axis=WORD_AXIS, mask=m)
        attended = weights @ targets
    else:
        m = None if region_mask is None else np.asarray(region_mask, dtype=bool)[..., :, None]
        weights = ad.softmax(logits, axis=REGION_AXIS, mask=m)
        attended = ad.transpose(weights) @ targets
    return attended, weights


def relevance(anchor, attended):
    """Row-wise cosine between anchors and their attended vectors."""
    dot = ad.sum(anchor * attended, axis=-1)
    return dot / (ad.safe_norm(anchor, keepdims=False) * ad.safe_norm(attended, keepdims=False))


def pool(R, pooling, lambda2=None, mask=None):
    """Reduce relevance values along the last axis to a single score."""
    pooling = Pooling.parse(pooling)
    if ad.value(R).shape[-1] == 0:
        raise DomainError("cannot pool an empty relevance vector")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
    if pooling is Pooling.LSE:
        if lambda2 is None or not lambda2 > 0:
            raise DomainError(f"LSE pooling needs lambda2 > 0, got {lambda2}")
        return ad.logsumexp(lambda2 * R, axis=-1, mask=mask) / lambda2
    if pooling is Pooling.MAX:
        return ad.amax(R, axis=-1, mask=mask)
    masked = R if mask is None else R * mask
    total = ad.sum(masked, axis=-1)
    if pooling is Pooling.SUM:
        return total
    count = ad.value(R).shape[-1] if mask is None else np.broadcast_to(mask, ad.value(R).shape).sum(-1)
    return total / count


def _scan(V, E, cfg, region_mask=None, word_mask=None):
    pm = _pair_mask(region_mask, word_mask)
    sim = similarity_matrix(V, E)
    if cfg.direction is Direction.IMAGE_TEXT:
        sbar = threshold_normalize(sim, "over_regions", pm)
        attended, weights = attend(sbar, E, cfg.lambda1, cfg.direction, region_mask, word_mask)
        rel = relevance(V, attended)
        pool_mask = region_mask
    else:
        sbar = threshold_normalize(sim, "over_words", pm)
        attended, weights = attend(sbar, V, cfg.lambda1, cfg.direction, region_mask, word_mask)
        rel = relevance(E, attended)
        pool_mask = word_mask
    score = pool(rel, cfg.pooling, cfg.lambda2, pool_mask)
    return score, (sim, sbar, weights, attended, rel)


def sum_max_score(V, E, direction, cosine=False, region_mask=None, word_mask=None):
    """Attention-free baseline: per-word (t-i) or per-region (i-t) max, summed.

    Region-word similarity is the raw dot product unless ``cosine`` is set.
    """
    direction = Direction.parse(direction)
    _check_width(V, E)
    sim = similarity_matrix(V, E) if cosine else V @ ad.transpose(E)
    rm = None if region_mask is None else np.asarray(region_mask, dtype=bool)[..., :, None]
    wm = None if word_mask is None else np.asarray(word_mask, dtype=bool)[..., None, :]
    if direction is Direction.TEXT_IMAGE:
        best = ad.amax(sim, axis=REGION_AXIS, mask=rm)
        outer = word_mask
    else:
        best = ad.amax(sim, axis=WORD_AXIS, mask=wm)
        outer = region_mask
    if outer is not None:
        best = best * np.asarray(outer, dtype=bool)
    return ad.sum(best, axis=-1)


def pair_scores(V, E, cfg, region_mask=None, word_mask=None):
    """Score all broadcast (image, sentence) combinations; no trace kept."""
    if cfg.max_regions is not None:
        V = V[..., : cfg.max_regions, :]
        if region_mask is not None:
            region_mask = np.asarray(region_mask)[..., : cfg.max_regions]
    if cfg.method is Method.SUM_MAX:
        return sum_max_score(V, E, cfg.direction, cfg.summax_cosine, region_mask, word_mask)
    return _scan(V, E, cfg, region_mask, word_mask)[0]


def score_grid_batch(V, E, cfg, region_mask=None, word_mask=None):
    """``(Bi, k, h)`` images x ``(Bc, n, h)`` sentences -> ``(Bi, Bc)`` scores."""
    Vb = ad.expand_dims(V, 1) if isinstance(V, ad.Var) else np.asarray(V)[:, None]
    Eb = ad.expand_dims(E, 0) if isinstance(E, ad.Var) else np.asarray(E)[None]
    rm = None if region_mask is None else np.asarray(region_mask, dtype=bool)[:, None]
    wm = None if word_mask is None else np.asarray(word_mask, dtype=bool)[None]
    return pair_scores(Vb, Eb, cfg, rm, wm)


def score_pair(V, E, cfg):
    """Score one (image, sentence) pair and keep every intermediate."""
    V = np.asarray(V, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if V.ndim != 2 or E.ndim != 2 or len(V) == 0 or len(E) == 0:
        raise DimensionError(f"expected non-empty k x h and n x h matrices, got {V.shape}, {E.shape}")
    if cfg.max_regions is not None:
        V = V[: cfg.max_regions]
    if cfg.method is Method.SUM_MAX:
        sim = similarity_matrix(V, E) if cfg.summax_cosine else V @ E.T
        score = float(sum_max_score(V, E, cfg.direction, cfg.summax_cosine))
        empty = np.zeros((0,))
        return AttentionTrace(cfg.direction, sim, sim, np.zeros_like(sim), empty, empty, score)
    score, (sim, sbar, weights, attended, rel) = _scan(V, E, cfg)
    return AttentionTrace(cfg.direction, sim, sbar, weights, attended, rel, float(score))


def ensemble_score(scores):
    scores = list(scores)
    if not scores:
        raise DomainError("cannot ensemble an empty list of scores")
    return float(np.mean(scores))
