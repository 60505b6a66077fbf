"""Region-feature files, vocabularies, captions and the synthetic dataset.

SCNF feature file (little-endian)::

    b"SCNF"  u32 version=1  u32 image_count
    per image: u32 k, u32 D, k*D float32 values (regions in confidence order)

Captions are ``image_id<TAB>tok tok tok`` lines; the vocabulary is one token
per line with the unknown-token sentinel on line 0.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .checkpoint import atomic_write
from .errors import FormatError, SpecError

MAGIC = b"SCNF"
VERSION = 1
MAX_REGIONS = 128
UNK = "<unk>"
FILLERS = ("a", "is", "the", "of", "on", "with")


# -- features ---------------------------------------------------------------

def encode_features(features):
    parts = [MAGIC, struct.pack("<II", VERSION, len(features))]
    for i, f in enumerate(features):
        f = np.asarray(f)
        if f.ndim != 2:
            raise FormatError(f"image {i}: expected a k x D matrix, got shape {f.shape}")
        k, d = f.shape
        if not 1 <= k <= MAX_REGIONS:
            raise FormatError(f"image {i}: region count {k} outside [1, {MAX_REGIONS}]")
        if not np.all(np.isfinite(f)):
            raise FormatError(f"image {i}: non-finite feature values")
        parts.append(struct.pack("<II", k, d))
        parts.append(np.ascontiguousarray(f, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_features(buf):
    """Parse SCNF bytes into a list of float64 ``k x D`` arrays."""
    if len(buf) < 12:
        raise FormatError(f"file too short for SCNF header: expected 12 bytes, got {len(buf)}", 0)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported SCNF version {version}", 4)
    pos = 12
    out = []
    for i in range(count):
        if pos + 8 > len(buf):
            raise FormatError(f"image {i}: truncated region header, expected 8 bytes, "
                              f"got {len(buf) - pos}", pos)
        k, d = struct.unpack_from("<II", buf, pos)
        if not 1 <= k <= MAX_REGIONS:
            raise FormatError(f"image {i}: region count {k} outside [1, {MAX_REGIONS}]", pos)
        pos += 8
        need = 4 * k * d
        if pos + need > len(buf):
            raise FormatError(f"image {i}: truncated payload, expected {need} bytes, "
                              f"got {len(buf) - pos}", pos)
        vals = np.frombuffer(buf, dtype="<f4", count=k * d, offset=pos)
        if not np.all(np.isfinite(vals)):
            bad = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise FormatError(f"image {i}: non-finite feature value", pos + 4 * bad)
        out.append(vals.astype(np.float64).reshape(k, d))
        pos += need
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {count} images", pos)
    return out


def write_features(path, features):
    atomic_write(path, encode_features(features))


def read_features(path):
    with open(path, "rb") as f:
        return decode_features(f.read())


# -- vocabulary and captions ------------------------------------------------

class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if not tokens or tokens[0] != UNK:
            raise FormatError(f"vocabulary line 0 must be the sentinel {UNK!r}")
        self.tokens = tokens
        self.index = {}
        for i, t in enumerate(tokens):
            if t in self.index:
                raise FormatError(f"duplicate vocabulary token {t!r} on line {i}")
            self.index[t] = i

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, words):
        """Map words to indices; unknown words map to 0. Returns ``(ids, unknown_words)``."""
        ids, unknown = [], []
        for w in words:
            i = self.index.get(w, 0)
            if i == 0 and w != UNK:
                unknown.append(w)
            ids.append(i)
        return ids, unknown

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def load_vocab(path):
    with open(path, encoding="utf-8") as f:
        return Vocabulary(line.rstrip("\n") for line in f)


def save_vocab(path, vocab):
    atomic_write(path, "".join(t + "\n" for t in vocab.tokens).encode("utf-8"))


def read_captions(path):
    """Return ``[(image_id, [word, ...]), ...]`` in file order."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                img, text = line.split("\t", 1)
                out.append((int(img), text.split()))
            except ValueError:
                raise FormatError(f"captions line {lineno}: expected 'image_id<TAB>tokens'") from None
    return out


def write_captions(path, captions):
    lines = "".join(f"{img}\t{' '.join(words)}\n" for img, words in captions)
    atomic_write(path, lines.encode("utf-8"))


# -- datasets ---------------------------------------------------------------

@dataclass
class Dataset:
    features: list
    captions: list  # (image_id, [word, ...])
    vocab: Vocabulary
    splits: dict = field(default_factory=dict)  # name -> sorted image ids
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for img, words in self.captions:
            if not 0 <= img < len(self.features):
                raise FormatError(f"caption refers to missing image {img}")
            if not words:
                raise FormatError(f"empty caption for image {img}")

    @property
    def raw_dim(self):
        return self.features[0].shape[1]

    def subset(self, name):
        """Features, token-id captions and ground truth for one split.

        Returns ``(features, sentences, owner)`` where ``owner[j]`` is the
        position in ``features`` of caption ``j``'s image.
        """
        ids = self.splits[name] if name is not None else list(range(len(self.features)))
        pos = {img: i for i, img in enumerate(ids)}
        feats = [self.features[i] for i in ids]
        sentences, owner = [], []
        for img, words in self.captions:
            if img in pos:
                sentences.append(self.vocab.encode(words)[0])
                owner.append(pos[img])
        return feats, sentences, np.asarray(owner, dtype=np.int64)


FILES = {"features": "features.scnf", "captions": "captions.tsv", "vocab": "vocab.txt",
         "splits": "splits.json", "meta": "meta.json"}


def save_dataset(directory, ds):
    os.makedirs(directory, exist_ok=True)
    write_features(os.path.join(directory, FILES["features"]), ds.features)
    write_captions(os.path.join(directory, FILES["captions"]), ds.captions)
    save_vocab(os.path.join(directory, FILES["vocab"]), ds.vocab)
    atomic_write(os.path.join(directory, FILES["splits"]),
                 json.dumps(ds.splits, sort_keys=True, indent=1).encode())
    atomic_write(os.path.join(directory, FILES["meta"]),
                 json.dumps(ds.meta, sort_keys=True, indent=1).encode())


def load_dataset(directory):
    def p(key):
        return os.path.join(directory, FILES[key])

    feats = read_features(p("features"))
    vocab = load_vocab(p("vocab"))
    captions = read_captions(p("captions"))
    splits, meta = {}, {}
    if os.path.exists(p("splits")):
        with open(p("splits")) as f:
            splits = json.load(f)
    if os.path.exists(p("meta")):
        with open(p("meta")) as f:
            meta = json.load(f)
    return Dataset(feats, captions, vocab, splits, meta)


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    concepts: int = 30
    images: int = 150
    regions: int = 6
    captions_per_image: int = 5
    noise: float = 0.1
    seed: int = 7
    raw_dim: int = 64
    filler_rate: float = 0.2
    min_mentions: int | None = None  # concepts per caption; default ceil(regions / 2)

    def validate(self):
        if self.concepts < 2:
            raise SpecError(f"need at least 2 concepts, got {self.concepts}")
        if self.regions < 1 or self.regions > MAX_REGIONS:
            raise SpecError(f"regions per image must be in [1, {MAX_REGIONS}], got {self.regions}")
        if self.images < 1 or self.captions_per_image < 1 or self.raw_dim < 1:
            raise SpecError("images, captions_per_image and raw_dim must be positive")
        if self.noise < 0:
            raise SpecError(f"noise must be >= 0, got {self.noise}")
        if not 0 <= self.filler_rate < 1:
            raise SpecError(f"filler_rate must be in [0, 1), got {self.filler_rate}")
        if self.min_mentions is not None and not 1 <= self.min_mentions <= self.regions:
            raise SpecError(f"min_mentions must be in [1, {self.regions}]")


def concept_token(c):
    return f"c{c:02d}"


def generate_synthetic(spec):
    """Images whose regions are noisy copies of concept prototypes, captioned by concept tokens.

    ``meta["region_concepts"][i]`` lists the latent concept of each region of
    image ``i``; ``meta["prototypes"]`` holds the unit prototypes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    protos = rng.normal(size=(spec.concepts, spec.raw_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    vocab = Vocabulary([UNK, *FILLERS, *(concept_token(c) for c in range(spec.concepts))])
    lo = spec.min_mentions or math.ceil(spec.regions / 2)

    features, captions, region_concepts = [], [], []
    for img in range(spec.images):
        concepts = rng.choice(spec.concepts, size=spec.regions, replace=spec.concepts < spec.regions)
        regions = protos[concepts] + rng.normal(scale=spec.noise, size=(spec.regions, spec.raw_dim))
        # stored as float32, keep the in-memory copy identical to the file
        features.append(regions.astype(np.float32).astype(np.float64))
        region_concepts.append([int(c) for c in concepts])
        distinct = sorted(set(int(c) for c in concepts))
        for _ in range(spec.captions_per_image):
            m = int(rng.integers(min(lo, len(distinct)), len(distinct) + 1))
            picked = rng.permutation(distinct)[:m]
            words = [concept_token(int(c)) for c in picked]
            n_fill = round(m * spec.filler_rate / (1 - spec.filler_rate))
            for _ in range(n_fill):
                words.insert(int(rng.integers(0, len(words) + 1)), FILLERS[int(rng.integers(len(FILLERS)))])
            captions.append((img, words))

    meta = {"spec": asdict(spec), "region_concepts": region_concepts,
            "prototypes": protos.tolist()}
    return Dataset(features, captions, vocab, {}, meta)


def default_split_counts(m):
    held = m // 6
    return (m - 2 * held, held, held)


def split(dataset, counts=None, seed=0):
    """Seeded image-level train/val/test partition; captions follow their image."""
    m = len(dataset.features)
    counts = tuple(counts) if counts is not None else default_split_counts(m)
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise SpecError(f"split counts must be three non-negative integers, got {counts}")
    if sum(counts) > m:
        raise SpecError(f"split counts {counts} exceed the {m} available images")
    perm = np.random.default_rng(seed).permutation(m)
    a, b, c = counts
    splits = {
        "train": sorted(int(i) for i in perm[:a]),
        "val": sorted(int(i) for i in perm[a:a + b]),
        "test": sorted(int(i) for i in perm[a + b:a + b + c]),
    }
    return Dataset(dataset.features, dataset.captions, dataset.vocab, splits, dict(dataset.meta))
