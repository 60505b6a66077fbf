"""Cross-modal retrieval evaluation: score grids, Recall@K, score-level ensembles."""

from __future__ import annotations

import enum
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import attention
from .encoders import encode_batch, project_regions
from .errors import DimensionError, DomainError

log = logging.getLogger(__name__)

KS = (1, 5, 10)


class Retrieval(str, enum.Enum):
    SENTENCE = "sentence"  # image query, sentence candidates
    IMAGE = "image"  # sentence query, image candidates


@dataclass
class ScoreGrid:
    """``scores[i, j]`` = similarity of image ``i`` and sentence ``j``; ``owner[j]`` = its image."""

    scores: np.ndarray
    owner: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.owner = np.asarray(self.owner, dtype=np.int64)
        if self.scores.ndim != 2 or self.owner.shape != (self.scores.shape[1],):
            raise DimensionError(f"grid {self.scores.shape} does not match {self.owner.shape} ground truth")
        if np.any(self.owner < 0) or np.any(self.owner >= self.scores.shape[0]):
            raise DimensionError("ground-truth image index out of range")
        if not np.all(np.isfinite(self.scores)):
            raise DomainError("score grid contains non-finite values")


@dataclass
class RecallReport:
    direction: Retrieval
    recalls: dict  # K -> percentage
    queries: int
    notes: list = field(default_factory=list)

    def __getitem__(self, k):
        return self.recalls[k]

    def to_dict(self):
        return {"direction": self.direction.value, "queries": self.queries,
                **{f"R@{k}": v for k, v in self.recalls.items()}, "notes": list(self.notes)}


def pad_regions(features):
    """Stack ``k_i x D`` matrices into ``(B, k_max, D)`` plus a region mask."""
    k_max = max(len(f) for f in features)
    d = features[0].shape[1]
    out = np.zeros((len(features), k_max, d))
    mask = np.zeros((len(features), k_max), dtype=bool)
    for i, f in enumerate(features):
        out[i, : len(f)] = f
        mask[i, : len(f)] = True
    return out, mask


def encode_images(features, params):
    raw, mask = pad_regions(features)
    return project_regions(raw, params), mask


def _chunked_grid(V, rmask, E, wmask, cfg, threads, chunk):
    starts = list(range(0, V.shape[0], chunk))

    def cell(s):
        return attention.score_grid_batch(V[s:s + chunk], E, cfg, rmask[s:s + chunk], wmask)

    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(cell, starts))
    else:
        parts = [cell(s) for s in starts]
    return np.concatenate(parts, axis=0)


def score_grid(features, sentences, owner, params, cfg, bidirectional=True, threads=1, chunk=8):
    """Score every image against every sentence.

    Each cell depends only on its own image and sentence, so the result is
    identical for any ``threads``/``chunk`` setting.
    """
    V, rmask = encode_images(features, params)
    E, wmask = encode_batch(sentences, params, bidirectional=bidirectional)
    return ScoreGrid(_chunked_grid(V, rmask, E, wmask, cfg, threads, chunk), owner)


def _ranks_of_truth(grid, direction):
    """Best (0-based) rank of a ground-truth item for every query, ties to lower index."""
    S, owner = grid.scores, grid.owner
    if direction is Retrieval.IMAGE:
        n_img, n_sent = S.shape
        truth = S[owner, np.arange(n_sent)]  # (sentences,)
        higher = S > truth[None, :]
        tied_before = (S == truth[None, :]) & (np.arange(n_img)[:, None] < owner[None, :])
        return (higher | tied_before).sum(axis=0)
    ranks = []
    idx = np.arange(S.shape[1])
    for i in range(S.shape[0]):
        gts = np.flatnonzero(owner == i)
        if len(gts) == 0:
            continue
        row = S[i]
        best = min(int(np.sum((row > row[j]) | ((row == row[j]) & (idx < j)))) for j in gts)
        ranks.append(best)
    return np.asarray(ranks, dtype=np.int64)


def recall_at_k(grid, k, direction):
    """Percentage of queries whose ground truth is among the top ``k`` candidates."""
    direction = Retrieval(direction)
    if k < 1:
        raise DomainError(f"K must be >= 1, got {k}")
    n_cand = grid.scores.shape[1] if direction is Retrieval.SENTENCE else grid.scores.shape[0]
    if k > n_cand:
        log.info("R@%d clamped to %d candidates", k, n_cand)
        k = n_cand
    ranks = _ranks_of_truth(grid, direction)
    if len(ranks) == 0:
        raise DomainError("no queries with ground truth")
    return 100.0 * int(np.count_nonzero(ranks < k)) / len(ranks)


def recall_report(grid, direction, ks=KS):
    direction = Retrieval(direction)
    n_cand = grid.scores.shape[1] if direction is Retrieval.SENTENCE else grid.scores.shape[0]
    notes = [f"R@{k} clamped to {n_cand} candidates" for k in ks if k > n_cand]
    queries = len(_ranks_of_truth(grid, direction))
    return RecallReport(direction, {k: recall_at_k(grid, k, direction) for k in ks}, queries, notes)


def evaluate_grid(grid, ks=KS):
    """Both retrieval directions plus the recall sum used for model selection."""
    sent = recall_report(grid, Retrieval.SENTENCE, ks)
    img = recall_report(grid, Retrieval.IMAGE, ks)
    return {"sentence": sent, "image": img,
            "rsum": sum(sent.recalls.values()) + sum(img.recalls.values())}


def fold_grids(grid, fold_size):
    """Split into consecutive folds of ``fold_size`` images with their own captions.

    A trailing fold smaller than ``fold_size`` is dropped.
    """
    n_img = grid.scores.shape[0]
    folds = []
    for start in range(0, n_img - fold_size + 1, fold_size):
        imgs = np.arange(start, start + fold_size)
        cols = np.flatnonzero(np.isin(grid.owner, imgs))
        folds.append(ScoreGrid(grid.scores[np.ix_(imgs, cols)], grid.owner[cols] - start))
    if not folds:
        raise DomainError(f"fold size {fold_size} exceeds the {n_img} images in the grid")
    return folds


def evaluate_folds(grid, fold_size, ks=KS):
    """Average recalls over image folds."""
    results = [evaluate_grid(g, ks) for g in fold_grids(grid, fold_size)]
    avg = {}
    for key in ("sentence", "image"):
        reps = [r[key] for r in results]
        avg[key] = RecallReport(reps[0].direction,
                                {k: float(np.mean([r.recalls[k] for r in reps])) for k in ks},
                                sum(r.queries for r in reps),
                                [f"averaged over {len(results)} folds of {fold_size} images"])
    avg["rsum"] = sum(avg["sentence"].recalls.values()) + sum(avg["image"].recalls.values())
    return avg


def ensemble_grids(grids):
    """Element-wise mean of score grids sharing shape and ground truth."""
    grids = list(grids)
    if not grids:
        raise DomainError("nothing to ensemble")
    first = grids[0]
    for g in grids[1:]:
        if g.scores.shape != first.scores.shape or not np.array_equal(g.owner, first.owner):
            raise DimensionError("ensembled grids must share shape and ground truth")
    if len(grids) == 1:
        return ScoreGrid(first.scores.copy(), first.owner.copy())
    return ScoreGrid(np.mean([g.scores for g in grids], axis=0), first.owner.copy())


def format_table(rows):
    """Render ``[(name, result), ...]`` as a sentence/image retrieval R@K table."""
    name_w = max(12, *(len(n) for n, _ in rows))
    head = f"{'':<{name_w}}  {'Sentence Retrieval':^34}  {'Image Retrieval':^34}"
    cols = f"{'Method':<{name_w}}  " + "  ".join(f"{'R@' + str(k):>10}" for k in KS) + "  " + \
        "  ".join(f"{'R@' + str(k):>10}" for k in KS)
    lines = [head, cols, "-" * len(cols)]
    for name, res in rows:
        vals = [res["sentence"].recalls[k] for k in KS] + [res["image"].recalls[k] for k in KS]
        lines.append(f"{name:<{name_w}}  " + "  ".join(f"{v:10.6f}" for v in vals[:3]) + "  " +
                     "  ".join(f"{v:10.6f}" for v in vals[3:]))
    return "\n".join(lines)
