"""Captions, vocabulary, dataset splits and the synthetic dataset generator.

Captions file (UTF-8 JSON)::

    {"images": [{"id": "img0001", "split": "train", "captions": ["...", x5]}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .fusion import FeatureStore, load_features, save_features

__all__ = [
    "PAD", "START", "END", "UNK", "SPLITS", "CAPTIONS_PER_IMAGE",
    "DatasetError",
    "Vocabulary",
    "CaptionRecord",
    "DatasetSplit",
    "DatasetBundle",
    "tokenize",
    "build_vocab",
    "encode_caption",
    "load_captions",
    "save_captions",
    "dump_captions",
    "load_dataset",
    "SyntheticSpec",
    "generate_synthetic",
]

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)
SPLITS = ("train", "val", "test")
CAPTIONS_PER_IMAGE = 5

_PUNCT = set(string.punctuation)


class DatasetError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, drop ASCII punctuation.

    Hyphens survive only between two alphanumeric characters.
    """
    tokens = []
    for word in text.lower().split():
        kept = []
        for i, ch in enumerate(word):
            if ch not in _PUNCT:
                kept.append(ch)
            elif ch == "-" and 0 < i < len(word) - 1 and word[i - 1].isalnum() and word[i + 1].isalnum():
                kept.append(ch)
        tok = "".join(kept)
        if tok:
            tokens.append(tok)
    return tokens


class Vocabulary:
    """Token/id mapping; id 0 is padding, followed by start, end and unk."""

    def __init__(self, words: Iterable[str] = ()):
        self.id_to_token: list[str] = list(SPECIALS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIALS)}
        for w in words:
            if w in self.token_to_id:
                raise ValueError(f"duplicate vocabulary token {w!r}")
            self.token_to_id[w] = len(self.id_to_token)
            self.id_to_token.append(w)

    pad_id, start_id, end_id, unk_id = 0, 1, 2, 3

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        """Number of ids excluding padding; the output layer has ``size + 1`` slots."""
        return len(self.id_to_token) - 1

    @property
    def words(self) -> list[str]:
        return self.id_to_token[len(SPECIALS):]

    def encode_tokens(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Tokens for ``ids`` with pad/start/end removed."""
        skip = (self.pad_id, self.start_id, self.end_id)
        return [self.id_to_token[i] for i in ids if i not in skip]

    def to_dict(self) -> dict:
        return {"tokens": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.id_to_token).encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token


@dataclass
class CaptionRecord:
    image_id: str
    split: str
    captions: list[str]

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DatasetError(f"image {self.image_id!r}: unknown split {self.split!r}")
        if len(self.captions) != CAPTIONS_PER_IMAGE:
            raise DatasetError(f"image {self.image_id!r}: expected {CAPTIONS_PER_IMAGE} captions, "
                               f"got {len(self.captions)}")


def build_vocab(records: Sequence[CaptionRecord], min_count: int = 1) -> Vocabulary:
    """Vocabulary over train-split captions, ordered by (frequency desc, token asc)."""
    counts: Counter[str] = Counter()
    n_train = 0
    for rec in records:
        if rec.split != "train":
            continue
        n_train += 1
        for cap in rec.captions:
            counts.update(tokenize(cap))
    if n_train == 0:
        raise DatasetError("cannot build a vocabulary without training records")
    kept = [t for t, c in counts.items() if c >= min_count and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def encode_caption(v: Vocabulary, text: str, max_len: int) -> list[int]:
    """``start, ids..., end`` right-padded to ``max_len + 2``; long captions are cut before ``end``."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = v.encode_tokens(tokenize(text))[:max_len]
    seq = [v.start_id] + ids + [v.end_id]
    return seq + [v.pad_id] * (max_len + 2 - len(seq))


# --------------------------------------------------------------------------
# captions file IO
# --------------------------------------------------------------------------


def _parse_records(doc) -> list[CaptionRecord]:
    if not isinstance(doc, dict) or not isinstance(doc.get("images"), list):
        raise DatasetError('captions file must be an object with an "images" list')
    records, seen = [], set()
    for i, item in enumerate(doc["images"]):
        if not isinstance(item, dict) or set(item) != {"id", "split", "captions"}:
            raise DatasetError(f"images[{i}] must have exactly the keys id, split, captions")
        rec = CaptionRecord(str(item["id"]), item["split"], [str(c) for c in item["captions"]])
        if rec.image_id in seen:
            raise DatasetError(f"images[{i}]: duplicate image id {rec.image_id!r}")
        seen.add(rec.image_id)
        records.append(rec)
    return records


def load_captions(path) -> list[CaptionRecord]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return _parse_records(doc)


def dump_captions(records: Sequence[CaptionRecord]) -> str:
    doc = {"images": [{"id": r.image_id, "split": r.split, "captions": list(r.captions)} for r in records]}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def save_captions(records: Sequence[CaptionRecord], path) -> None:
    Path(path).write_text(dump_captions(records), encoding="utf-8")


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    name: str
    image_ids: list[str]
    captions: list[list[str]]
    references: list[list[list[str]]]
    encoded: np.ndarray  # (images, 5, max_len + 2) int64
    features_a: np.ndarray
    features_b: np.ndarray

    def __len__(self) -> int:
        return len(self.image_ids)


@dataclass
class DatasetBundle:
    vocab: Vocabulary
    max_len: int
    splits: dict[str, DatasetSplit]
    store_a: FeatureStore
    store_b: FeatureStore
    records: list[CaptionRecord] = field(default_factory=list)

    @property
    def train(self) -> DatasetSplit:
        return self.splits["train"]

    @property
    def val(self) -> DatasetSplit:
        return self.splits["val"]

    @property
    def test(self) -> DatasetSplit:
        return self.splits["test"]


def load_dataset(captions_path, features_a_path, features_b_path, max_len: int | None = None,
                 min_count: int = 1) -> DatasetBundle:
    records = load_captions(captions_path)
    store_a = load_features(features_a_path)
    store_b = load_features(features_b_path)
    missing = [r.image_id for r in records if r.image_id not in store_a or r.image_id not in store_b]
    if missing:
        raise DatasetError(f"no features for image ids: {', '.join(missing)}")
    vocab = build_vocab(records, min_count)
    if max_len is None:
        max_len = max(len(tokenize(c)) for r in records if r.split == "train" for c in r.captions)
        max_len = max(max_len, 1)
    splits = {}
    for name in SPLITS:
        recs = [r for r in records if r.split == name]
        ids = [r.image_id for r in recs]
        L = max_len + 2
        encoded = np.array([[encode_caption(vocab, c, max_len) for c in r.captions] for r in recs],
                           dtype=np.int64).reshape(len(recs), CAPTIONS_PER_IMAGE, L)
        splits[name] = DatasetSplit(
            name, ids, [list(r.captions) for r in recs],
            [[tokenize(c) for c in r.captions] for r in recs], encoded,
            store_a.matrix(ids) if ids else np.zeros((0, store_a.dim)),
            store_b.matrix(ids) if ids else np.zeros((0, store_b.dim)),
        )
    return DatasetBundle(vocab, max_len, splits, store_a, store_b, records)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

DEFAULT_POOL = (
    "two", "three", "four", "many",
    "red", "green", "white", "gray",
    "planes", "ships", "cars", "trees", "houses",
    "airport", "harbor", "forest", "farmland", "city",
)
SLOTS = ("count", "color", "object", "scene")
TEMPLATES = (
    "there are {count} {color} {object} in the {scene}",
    "{count} {color} {object} are in the {scene}",
    "the {scene} has {count} {color} {object}",
    "in the {scene} there are {count} {color} {object}",
    "{count} {color} {object} sit in the {scene}",
)
LATENT_PER_SLOT = 2


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a learnable toy captioning dataset.

    Every image draws one word per slot (count, color, object, scene) from
    ``vocab_pool``, split into four consecutive equal-ish groups.  Each word
    has a fixed random code; both feature streams are noisy linear maps of
    the concatenated codes, and the captions fill templates with the words.
    ``paraphrases`` templates are cycled over the five captions, so with the
    default of 1 all five captions of an image are identical.
    """

    num_images: int = 20
    feature_dim_a: int = 8
    feature_dim_b: int = 8
    vocab_pool: tuple[str, ...] = DEFAULT_POOL
    max_len: int = 8
    seed: int = 0
    num_val: int = 2
    num_test: int = 2
    paraphrases: int = 1
    noise: float = 0.01

    def __post_init__(self):
        if len(self.vocab_pool) < 2 * len(SLOTS) or len(set(self.vocab_pool)) != len(self.vocab_pool):
            raise ValueError(f"vocab_pool needs >= {2 * len(SLOTS)} distinct words")
        if self.num_val + self.num_test >= self.num_images:
            raise ValueError("need at least one training image")
        if not 1 <= self.paraphrases <= len(TEMPLATES):
            raise ValueError(f"paraphrases must be in [1, {len(TEMPLATES)}]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "vocab_pool" in d:
            d["vocab_pool"] = tuple(d["vocab_pool"])
        return cls(**d)

    def slot_words(self) -> dict[str, tuple[str, ...]]:
        # consecutive groups; when sizes differ the later slots get the extra word
        base, extra = divmod(len(self.vocab_pool), len(SLOTS))
        sizes = [base + (i >= len(SLOTS) - extra) for i in range(len(SLOTS))]
        bounds = np.cumsum([0] + sizes)
        return {slot: tuple(self.vocab_pool[bounds[i] : bounds[i + 1]]) for i, slot in enumerate(SLOTS)}

    def templates(self) -> list[str]:
        fitting = [t for t in TEMPLATES if len(t.split()) <= self.max_len]
        if not fitting:
            raise ValueError(f"no caption template fits max_len={self.max_len}")
        return fitting[: self.paraphrases]


@dataclass
class SyntheticData:
    records: list[CaptionRecord]
    store_a: FeatureStore
    store_b: FeatureStore
    latents: np.ndarray
    attributes: list[dict[str, str]]


def make_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """In-memory synthetic dataset; :func:`generate_synthetic` writes it to disk."""
    rng = np.random.default_rng(spec.seed)
    slots = spec.slot_words()
    codes = {w: rng.normal(size=LATENT_PER_SLOT) for slot in SLOTS for w in slots[slot]}
    latent_dim = LATENT_PER_SLOT * len(SLOTS)
    map_a = rng.normal(size=(spec.feature_dim_a, latent_dim)) / np.sqrt(latent_dim)
    map_b = rng.normal(size=(spec.feature_dim_b, latent_dim)) / np.sqrt(latent_dim)
    templates = spec.templates()
    n_train = spec.num_images - spec.num_val - spec.num_test
    records, latents, attributes = [], [], []
    vec_a, vec_b = {}, {}
    for idx in range(spec.num_images):
        attrs = {slot: slots[slot][rng.integers(len(slots[slot]))] for slot in SLOTS}
        z = np.concatenate([codes[attrs[slot]] for slot in SLOTS])
        image_id = f"img{idx:04d}"
        vec_a[image_id] = (map_a @ z + spec.noise * rng.normal(size=spec.feature_dim_a)).astype(np.float32)
        vec_b[image_id] = (map_b @ z + spec.noise * rng.normal(size=spec.feature_dim_b)).astype(np.float32)
        split = "train" if idx < n_train else ("val" if idx < n_train + spec.num_val else "test")
        caps = [templates[k % len(templates)].format(**attrs) for k in range(CAPTIONS_PER_IMAGE)]
        records.append(CaptionRecord(image_id, split, caps))
        latents.append(z)
        attributes.append(attrs)
    return SyntheticData(
        records,
        FeatureStore("synthetic-a", spec.feature_dim_a, vec_a),
        FeatureStore("synthetic-b", spec.feature_dim_b, vec_b),
        np.array(latents),
        attributes,
    )


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, Path, Path]:
    """Write ``captions.json``, ``features_a.msef`` and ``features_b.msef`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = make_synthetic(spec)
    paths = (out / "captions.json", out / "features_a.msef", out / "features_b.msef")
    save_captions(data.records, paths[0])
    save_features(data.store_a, paths[1])
    save_features(data.store_b, paths[2])
    return paths
