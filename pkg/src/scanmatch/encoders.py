"""Region projection and bidirectional GRU sentence encoder.

Encoder functions take ``params`` as any mapping from parameter name to array
(a :class:`ModelParams`, or a dict of tape variables while training).
Row-vector convention throughout: ``W x`` is computed as ``x @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DimensionError, VocabularyError

GATE_WEIGHTS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def param_names():
    names = ["W_v", "b_v", "W_e"]
    for side in ("fwd", "bwd"):
        names += [f"{side}.{g}" for g in GATE_WEIGHTS]
    return names


def _glorot(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class ModelParams:
    """The complete trainable state, keyed by :func:`param_names`."""

    arrays: dict

    def __post_init__(self):
        missing = set(param_names()) - set(self.arrays)
        if missing:
            raise DimensionError(f"missing parameters: {sorted(missing)}")
        h = self.arrays["W_v"].shape[0]
        if self.arrays["b_v"].shape != (h,) or self.arrays["fwd.U_z"].shape != (h, h):
            raise DimensionError("joint embedding width differs between projection and GRU")

    @classmethod
    def init(cls, raw_dim, vocab_size, hidden=64, embed_dim=32, seed=0):
        rng = np.random.default_rng(seed)
        arrays = {
            "W_v": _glorot(rng, hidden, raw_dim),
            "b_v": np.zeros(hidden),
            "W_e": rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim)),
        }
        for side in ("fwd", "bwd"):
            for g in ("z", "r", "h"):
                arrays[f"{side}.W_{g}"] = _glorot(rng, hidden, embed_dim)
                arrays[f"{side}.U_{g}"] = _glorot(rng, hidden, hidden)
                arrays[f"{side}.b_{g}"] = np.zeros(hidden)
        return cls({k: arrays[k] for k in param_names()})

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(param_names())

    def items(self):
        return [(k, self.arrays[k]) for k in param_names()]

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    @property
    def hidden(self):
        return self.arrays["W_v"].shape[0]

    @property
    def raw_dim(self):
        return self.arrays["W_v"].shape[1]

    @property
    def vocab_size(self):
        return self.arrays["W_e"].shape[0]

    @property
    def embed_dim(self):
        return self.arrays["W_e"].shape[1]

    def dims(self):
        return {"hidden": self.hidden, "raw_dim": self.raw_dim,
                "vocab_size": self.vocab_size, "embed_dim": self.embed_dim}


def gates_of(params, side):
    return {g: params[f"{side}.{g}"] for g in GATE_WEIGHTS}


def project_regions(feats, params):
    """``v_i = W_v f_i + b_v`` for every region row of ``feats`` (``(..., k, D)``)."""
    W, b = params["W_v"], params["b_v"]
    d_raw = ad.value(W).shape[1]
    if np.shape(feats)[-1] != d_raw:
        raise DimensionError(f"region features have width {np.shape(feats)[-1]}, projection expects {d_raw}")
    return np.asarray(feats, dtype=np.float64) @ ad.transpose(W) + b


def _check_tokens(tokens, vocab_size):
    tokens = np.asarray(tokens, dtype=np.int64)
    bad = (tokens < 0) | (tokens >= vocab_size)
    if bad.any():
        raise VocabularyError(f"token index {int(tokens[bad][0])} outside vocabulary of size {vocab_size}")
    return tokens


def embed_words(tokens, params):
    """Embedding rows for each token index."""
    W_e = params["W_e"]
    return ad.take_rows(W_e, _check_tokens(tokens, ad.value(W_e).shape[0]))


def gru_step(x, h_prev, gates):
    """One GRU update; ``x``: ``(..., emb)``, ``h_prev``: ``(..., g)``."""
    g = gates
    z = ad.sigmoid(x @ ad.transpose(g["W_z"]) + h_prev @ ad.transpose(g["U_z"]) + g["b_z"])
    r = ad.sigmoid(x @ ad.transpose(g["W_r"]) + h_prev @ ad.transpose(g["U_r"]) + g["b_r"])
    h_tilde = ad.tanh(x @ ad.transpose(g["W_h"]) + (r * h_prev) @ ad.transpose(g["U_h"]) + g["b_h"])
    return (1.0 - z) * h_prev + z * h_tilde


def pad_tokens(sentences):
    """Right-pad token lists with index 0; returns ``(tokens, mask)``, both ``(B, n_max)``."""
    if not sentences or any(len(s) == 0 for s in sentences):
        raise DimensionError("every sentence needs at least one token")
    n_max = max(len(s) for s in sentences)
    tokens = np.zeros((len(sentences), n_max), dtype=np.int64)
    mask = np.zeros((len(sentences), n_max), dtype=bool)
    for i, s in enumerate(sentences):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


def _scan_gru(x, mask, gates, hidden, reverse):
    B, n = mask.shape
    h = np.zeros((B, hidden))
    states = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        h_new = gru_step(x[:, t, :], h, gates)
        # padded steps carry the previous state unchanged
        h = ad.where(mask[:, t, None], h_new, h)
        states[t] = h
    return ad.stack(states, axis=1)


def encode_batch(sentences, params, bidirectional=True):
    """Encode token lists; returns ``(E, mask)`` with ``E`` of shape ``(B, n_max, h)``.

    Padded positions are zero.  Each sentence is processed exactly as it would
    be at its natural length.
    """
    tokens, mask = pad_tokens(sentences)
    hidden = ad.value(params["W_v"]).shape[0]
    x = embed_words(tokens, params)
    fwd = _scan_gru(x, mask, gates_of(params, "fwd"), hidden, reverse=False)
    if bidirectional:
        bwd = _scan_gru(x, mask, gates_of(params, "bwd"), hidden, reverse=True)
        out = (fwd + bwd) / 2.0
    else:
        out = fwd
    return ad.where(mask[:, :, None], out, 0.0), mask


def encode_sentence(tokens, params):
    """Context word features ``e_i = (h_fwd_i + h_bwd_i) / 2`` for one sentence."""
    E, _ = encode_batch([list(tokens)], params, bidirectional=True)
    return E[0]


def encode_sentence_unidirectional(tokens, params):
    E, _ = encode_batch([list(tokens)], params, bidirectional=False)
    return E[0]
