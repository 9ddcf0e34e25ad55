"""Corpus ingestion, category mapping, feature storage, synthetic data.

Two input styles feed the same pipeline: VQA-style JSON question/annotation
files with precomputed image-feature files, and a fully synthetic generator
that plants pixel-derivable attributes into small images so every answer
can be re-derived from the image tensor itself.
"""

from __future__ import annotations

import json
import struct
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .errors import DataError, ParseError, ShapeError
from .text import (
    ANSWER_LEN,
    QUESTION_LEN,
    TokenSeq,
    Vocabulary,
    build_vocab,
    encode,
    make_pad_mask,
    tokenize,
)

# The 16 answer categories, id = position.
CATEGORY_NAMES = (
    "activity",
    "animal",
    "attribute",
    "binary",
    "color",
    "count",
    "food",
    "location",
    "material",
    "object",
    "other",
    "predicate",
    "shape",
    "spatial",
    "stuff",
    "time",
)
CATEGORY_IDS = {name: i for i, name in enumerate(CATEGORY_NAMES)}


def _normalize_key(text: str) -> str:
    """Case/whitespace-normalized form used for answer lookup."""
    return " ".join(unicodedata.normalize("NFC", text).casefold().split())


class CategoryMap:
    """Answer string -> category name, over the fixed 16-name set."""

    def __init__(self, entries: dict[str, str]):
        self._entries: dict[str, str] = {}
        for answer, category in entries.items():
            if category not in CATEGORY_IDS:
                raise DataError(f"unknown category {category!r} for answer {answer!r}")
            self._entries[_normalize_key(answer)] = category

    def __len__(self) -> int:
        return len(self._entries)

    def category_for(self, answer: str) -> str | None:
        return self._entries.get(_normalize_key(answer))

    def category_id_for(self, answer: str) -> int | None:
        name = self.category_for(answer)
        return None if name is None else CATEGORY_IDS[name]

    def categories_present(self) -> set[str]:
        return set(self._entries.values())


def load_category_map(path: str | Path) -> CategoryMap:
    """TSV rows "answer<TAB>category"; unknown categories fail by row number."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(f"{path}: row {lineno}: expected answer<TAB>category")
            answer, _, category = line.partition("\t")
            category = category.strip()
            if category not in CATEGORY_IDS:
                raise ParseError(
                    f"{path}: row {lineno}: {category!r} is not one of the 16 category names"
                )
            key = _normalize_key(answer)
            if key in entries:
                raise ParseError(f"{path}: row {lineno}: duplicate answer {answer!r}")
            entries[key] = category
    return CategoryMap(entries)


# ---- samples ----


@dataclass(frozen=True)
class RawSample:
    """One retained record before vocabulary encoding."""

    image_id: int
    question: str
    answer: str
    category: str


@dataclass(frozen=True)
class Sample:
    image_id: int
    question: TokenSeq  # fixed length 20, end token appended
    answer: TokenSeq  # fixed length 5
    category_id: int


@dataclass(frozen=True)
class DatasetStats:
    n_questions: int
    n_images: int
    max_len: int
    min_len: int
    avg_len: float

    def to_json_dict(self) -> dict:
        return {
            "questions": self.n_questions,
            "images": self.n_images,
            "max": self.max_len,
            "min": self.min_len,
            "avg": self.avg_len,
        }


def compute_stats(samples: Sequence[RawSample]) -> DatasetStats:
    """Raw word counts (pre-truncation) over retained samples."""
    if not samples:
        return DatasetStats(0, 0, 0, 0, 0.0)
    lengths = [len(tokenize(s.question)) for s in samples]
    return DatasetStats(
        n_questions=len(samples),
        n_images=len({s.image_id for s in samples}),
        max_len=max(lengths),
        min_len=min(lengths),
        avg_len=sum(lengths) / len(lengths),
    )


# ---- VQA-style ingestion ----


def _load_json_records(path: str | Path, wrapper_key: str) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if isinstance(payload, dict):
        payload = payload.get(wrapper_key)
    if not isinstance(payload, list):
        raise ParseError(f"{path}: expected a list of records (or a {{{wrapper_key!r}: [...]}})")
    return payload


def _field(record, index: int, path, key: str, kinds) -> object:
    if not isinstance(record, dict) or key not in record:
        raise ParseError(f"{path}: record {index}: missing key {key!r}")
    value = record[key]
    if not isinstance(value, kinds):
        raise ParseError(f"{path}: record {index}: key {key!r} has wrong type")
    return value


@dataclass(frozen=True)
class IngestResult:
    samples: list[Sample]
    raw: list[RawSample]  # aligned with samples
    stats: DatasetStats
    vocab: Vocabulary


def ingest(
    questions_path: str | Path,
    annotations_path: str | Path,
    category_map: CategoryMap,
    vocab: Vocabulary | None = None,
) -> IngestResult:
    """Join questions with annotations, filter by category mapping, encode.

    Questions file: list of {image_id, question_id, question}. Annotations
    file: list of {question_id, multiple_choice_answer, ...}; matching uses
    the primary answer only. Records whose answer has no category mapping
    are dropped. Statistics run over retained samples before truncation.
    When vocab is None, one is built from retained questions and answers
    plus all 16 category names as atomic tokens.
    """
    q_records = _load_json_records(questions_path, "questions")
    a_records = _load_json_records(annotations_path, "annotations")

    questions: dict[int, tuple[int, str]] = {}
    for i, rec in enumerate(q_records):
        qid = int(_field(rec, i, questions_path, "question_id", (int,)))
        image_id = int(_field(rec, i, questions_path, "image_id", (int,)))
        text = str(_field(rec, i, questions_path, "question", (str,)))
        if qid in questions:
            raise ParseError(f"{questions_path}: record {i}: duplicate question_id {qid}")
        questions[qid] = (image_id, text)

    raw: list[RawSample] = []
    seen_qids: set[int] = set()
    for i, rec in enumerate(a_records):
        qid = int(_field(rec, i, annotations_path, "question_id", (int,)))
        answer = str(_field(rec, i, annotations_path, "multiple_choice_answer", (str,)))
        if qid not in questions:
            raise DataError(f"{annotations_path}: record {i}: question_id {qid} has no question")
        if qid in seen_qids:
            raise DataError(f"{annotations_path}: record {i}: duplicate question_id {qid}")
        seen_qids.add(qid)
        category = category_map.category_for(answer)
        if category is None:
            continue  # unmappable answer: dropped, per the top-answers filter
        image_id, text = questions[qid]
        raw.append(RawSample(image_id=image_id, question=text, answer=answer, category=category))

    stats = compute_stats(raw)
    if vocab is None:
        docs = [s.question for s in raw] + [s.answer for s in raw]
        vocab = build_vocab(docs, atomic_tokens=CATEGORY_NAMES) if raw else Vocabulary([])
    samples = encode_samples(raw, vocab)
    return IngestResult(samples=samples, raw=raw, stats=stats, vocab=vocab)


def encode_samples(raw: Sequence[RawSample], vocab: Vocabulary) -> list[Sample]:
    out = []
    for s in raw:
        out.append(
            Sample(
                image_id=s.image_id,
                question=encode(tokenize(s.question), vocab, QUESTION_LEN, append_end=True),
                answer=encode(tokenize(s.answer), vocab, ANSWER_LEN),
                category_id=CATEGORY_IDS[s.category],
            )
        )
    return out


# ---- feature store ----

_MAGIC = b"VQGF"
_VERSION = 1


class FeatureStore:
    """image_id -> flat float64 feature vector of one uniform width.

    Synthetic raw images are stored flattened (3*32*32 = 3072); the model
    config decides whether a width is a plain feature vector or an image.
    """

    def __init__(self, features: dict[int, np.ndarray]):
        self._features: dict[int, np.ndarray] = {}
        width = None
        for image_id, vec in features.items():
            vec = np.asarray(vec, dtype=np.float64).reshape(-1)
            if width is None:
                width = vec.shape[0]
            elif vec.shape[0] != width:
                raise ShapeError(
                    f"feature width mismatch: image {image_id} has {vec.shape[0]}, store has {width}"
                )
            self._features[int(image_id)] = vec
        self._width = 0 if width is None else int(width)

    def __len__(self) -> int:
        return len(self._features)

    def __contains__(self, image_id: int) -> bool:
        return int(image_id) in self._features

    @property
    def width(self) -> int:
        return self._width

    def ids(self) -> list[int]:
        return sorted(self._features)

    def get(self, image_id: int) -> np.ndarray:
        try:
            return self._features[int(image_id)]
        except KeyError:
            raise DataError(f"image_id {image_id} not in feature store") from None

    def batch(self, image_ids: Sequence[int]) -> np.ndarray:
        return np.stack([self.get(i) for i in image_ids])

    def save(self, path: str | Path) -> None:
        """Binary: "VQGF", version u32, count u32, width u32, then records
        of (image_id u64, width x f64), all little-endian, ids ascending."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<III", _VERSION, len(self._features), self._width))
            for image_id in self.ids():
                fh.write(struct.pack("<Q", image_id))
                fh.write(self._features[image_id].astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FeatureStore":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != _MAGIC:
                raise ParseError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
            header = fh.read(12)
            if len(header) != 12:
                raise ParseError(f"{path}: truncated header")
            version, count, width = struct.unpack("<III", header)
            if version != _VERSION:
                raise ParseError(f"{path}: unsupported version {version}")
            features: dict[int, np.ndarray] = {}
            record = 8 + 8 * width
            for i in range(count):
                blob = fh.read(record)
                if len(blob) != record:
                    raise ParseError(f"{path}: truncated at record {i}")
                (image_id,) = struct.unpack_from("<Q", blob)
                vec = np.frombuffer(blob, dtype="<f8", offset=8).copy()
                features[image_id] = vec
            if fh.read(1):
                raise ParseError(f"{path}: trailing bytes after {count} records")
        return cls(features)


# ---- synthetic corpus ----

IMAGE_SHAPE = (3, 32, 32)
IMAGE_WIDTH = 3 * 32 * 32

# Color attribute: dominant channel, boosted on rows 2..31.
_COLOR_WORDS = ("লাল", "সবুজ", "নীল")  # red, green, blue = channel 0, 1, 2
_COLOR_BOOST = 0.4
# Count attribute: bright 3x3 blobs at fixed anchors, value overwritten.
_BLOB_ANCHORS = ((6, 6), (6, 20), (16, 6), (16, 20))
_COUNT_WORDS = ("একটি", "দুটি", "তিনটি", "চারটি")  # one..four
_BLOB_VALUE = 0.95
# Binary attribute: 2x2 patch at rows 0..1, cols 0..1, exactly 0 or 1.
_BINARY_WORDS = ("না", "হ্যাঁ")  # no, yes
# Every other category: a 2x2 marker patch in rows 0..1 whose quantized
# level encodes the answer index.
_MARKER_WORDS = {
    "activity": ("খেলা", "দৌড়ানো", "পড়া"),
    "animal": ("বিড়াল", "কুকুর", "পাখি"),
    "attribute": ("বড়", "ছোট", "লম্বা"),
    "food": ("ভাত", "রুটি", "ফল"),
    "location": ("ঘরে", "বাইরে", "পার্কে"),
    "material": ("কাঠ", "ধাতু", "কাচ"),
    "object": ("বল", "বই", "গাছ", "ঘর"),
    "other": ("জিনিস", "ছায়া", "আলো"),
    "predicate": ("আছে", "নেই", "চলছে"),
    "shape": ("গোল", "চৌকো", "তিনকোণা"),
    "spatial": ("উপরে", "নিচে", "পাশে"),
    "stuff": ("পানি", "বালি", "ঘাস"),
    "time": ("দিন", "রাত", "সকাল"),
}
_MARKER_COLS = {name: 2 + 2 * i for i, name in enumerate(sorted(_MARKER_WORDS))}

QUESTION_TEMPLATES = {
    "color": ("ছবির প্রধান রং কি ?", "এখানে কোন রং বেশি দেখা যায় ?"),
    "count": ("ছবিতে কয়টি বস্তু আছে ?", "মোট কতগুলো বস্তু দেখা যাচ্ছে ?"),
    "binary": ("ছবিতে কি সাদা চিহ্ন আছে ?", "সাদা চিহ্নটি কি দেখা যাচ্ছে ?"),
    "activity": ("ছবিতে কি করা হচ্ছে ?", "এখানে কোন কাজ চলছে ?"),
    "animal": ("ছবিতে কোন প্রাণী আছে ?", "এখানে কোন প্রাণীটি দেখা যায় ?"),
    "attribute": ("বস্তুটির ধরন কেমন ?", "জিনিসটি দেখতে কেমন ?"),
    "food": ("ছবিতে কোন খাবার আছে ?", "এখানে কি খাবার দেখা যাচ্ছে ?"),
    "location": ("দৃশ্যটি কোথায় ?", "এই ছবিটি কোথাকার ?"),
    "material": ("বস্তুটি কিসের তৈরি ?", "এটি কোন উপাদানে বানানো ?"),
    "object": ("ছবিতে কোন জিনিসটি আছে ?", "এখানে প্রধান বস্তুটি কি ?"),
    "other": ("ছবিতে আর কি আছে ?", "এখানে অন্য কি দেখা যায় ?"),
    "predicate": ("বস্তুটির অবস্থা কি ?", "এখানে কি ঘটছে ?"),
    "shape": ("বস্তুটির আকৃতি কেমন ?", "এটি কোন আকারের ?"),
    "spatial": ("বস্তুটি কোথায় রাখা ?", "চিহ্নটি কোন দিকে আছে ?"),
    "stuff": ("মাটিতে কি ছড়ানো আছে ?", "পটভূমিতে কি আছে ?"),
    "time": ("ছবিটি কোন সময়ের ?", "এটি দিনের কোন ভাগ ?"),
}

# Generation order: structural categories and one marker first, so small
# n_categories prefixes cover varied answer mechanics.
SYNTH_CATEGORY_ORDER = ("color", "count", "binary", "object") + tuple(
    n for n in CATEGORY_NAMES if n not in ("color", "count", "binary", "object")
)


def answer_words(category: str) -> tuple[str, ...]:
    if category == "color":
        return _COLOR_WORDS
    if category == "count":
        return _COUNT_WORDS
    if category == "binary":
        return _BINARY_WORDS
    return _MARKER_WORDS[category]


def derive_answer(image: np.ndarray, category: str) -> str:
    """Re-derive the planted answer for a category from pixels alone."""
    image = np.asarray(image, dtype=np.float64).reshape(IMAGE_SHAPE)
    if category == "color":
        sums = image[:, 2:, :].sum(axis=(1, 2))
        return _COLOR_WORDS[int(np.argmax(sums))]
    if category == "count":
        count = 0
        for r, c in _BLOB_ANCHORS:
            block = image[:, r : r + 3, c : c + 3].min(axis=0)
            if block.mean() > 0.5:
                count += 1
        if not 1 <= count <= len(_COUNT_WORDS):
            raise DataError(f"blob count {count} outside the planted range")
        return _COUNT_WORDS[count - 1]
    if category == "binary":
        return _BINARY_WORDS[int(image[:, 0:2, 0:2].mean() > 0.5)]
    words = _MARKER_WORDS[category]
    col = _MARKER_COLS[category]
    level = image[:, 0:2, col : col + 2].mean()
    idx = int(round(level * (len(words) + 1))) - 1
    if not 0 <= idx < len(words):
        raise DataError(f"marker level {level} for {category!r} decodes out of range")
    return words[idx]


def template_for(category: str, answer_idx: int) -> str:
    templates = QUESTION_TEMPLATES[category]
    return templates[answer_idx % len(templates)]


def make_synthetic(
    n_images: int, n_categories: int, seed: int
) -> tuple[FeatureStore, list[RawSample]]:
    """Seeded corpus of planted-attribute images and templated questions.

    Every image carries all attribute structures; samples are emitted for
    the first n_categories categories of SYNTH_CATEGORY_ORDER, one sample
    per (image, category). Answers are deterministic functions of the
    pixels (derive_answer is the oracle).
    """
    if not 0 <= n_categories <= len(CATEGORY_NAMES):
        raise DataError(f"n_categories must be in [0, 16], got {n_categories}")
    if n_images < 0:
        raise DataError(f"n_images must be nonnegative, got {n_images}")
    categories = SYNTH_CATEGORY_ORDER[:n_categories]
    features: dict[int, np.ndarray] = {}
    samples: list[RawSample] = []
    for image_id in range(n_images):
        gen = rng.generator(seed, rng.ROLE_SYNTH, image_id)
        image = gen.uniform(0.0, 0.25, size=IMAGE_SHAPE)

        channel = int(gen.integers(0, 3))
        image[channel, 2:, :] += _COLOR_BOOST

        n_blobs = int(gen.integers(1, len(_BLOB_ANCHORS) + 1))
        for r, c in _BLOB_ANCHORS[:n_blobs]:
            image[:, r : r + 3, c : c + 3] = _BLOB_VALUE

        binary_idx = int(gen.integers(0, 2))
        image[:, 0:2, 0:2] = float(binary_idx)

        marker_idx: dict[str, int] = {}
        for name in sorted(_MARKER_WORDS):
            words = _MARKER_WORDS[name]
            idx = int(gen.integers(0, len(words)))
            marker_idx[name] = idx
            col = _MARKER_COLS[name]
            image[:, 0:2, col : col + 2] = (idx + 1) / (len(words) + 1)

        features[image_id] = image.reshape(-1)
        answer_index = {
            "color": channel,
            "count": n_blobs - 1,
            "binary": binary_idx,
            **marker_idx,
        }
        for category in categories:
            idx = answer_index[category]
            samples.append(
                RawSample(
                    image_id=image_id,
                    question=template_for(category, idx),
                    answer=answer_words(category)[idx],
                    category=category,
                )
            )
    return FeatureStore(features), samples


def split_by_image(
    samples: Sequence[RawSample], n_val_images: int
) -> tuple[list[RawSample], list[RawSample]]:
    """Hold out the samples of the last n_val_images image ids."""
    ids = sorted({s.image_id for s in samples})
    if n_val_images > len(ids):
        raise DataError(f"cannot hold out {n_val_images} of {len(ids)} images")
    held = set(ids[len(ids) - n_val_images :])
    train = [s for s in samples if s.image_id not in held]
    val = [s for s in samples if s.image_id in held]
    return train, val


# ---- batching ----


@dataclass(frozen=True)
class Batch:
    image_ids: np.ndarray  # (B,) int64
    features: np.ndarray | None  # (B, W) float64, None when no store
    question_ids: np.ndarray  # (B, 20) int64
    answer_ids: np.ndarray  # (B, 5) int64
    category_ids: np.ndarray  # (B,) int64
    question_mask: np.ndarray  # (B, 1, 20) bool
    answer_mask: np.ndarray  # (B, 1, 5) bool

    @property
    def size(self) -> int:
        return int(self.image_ids.shape[0])


def batches(
    samples: Sequence[Sample],
    store: FeatureStore | None,
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Seeded epoch batching; the final short batch is emitted.

    The shuffle order is a pure function of (seed, epoch, len(samples)), so
    resumed runs regenerate the identical stream without carried RNG state.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    n = len(samples)
    order = rng.permutation(seed, epoch, n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        chosen = [samples[i] for i in order[start : start + batch_size]]
        image_ids = np.asarray([s.image_id for s in chosen], dtype=np.int64)
        question_ids = np.stack([s.question.ids for s in chosen])
        answer_ids = np.stack([s.answer.ids for s in chosen])
        yield Batch(
            image_ids=image_ids,
            features=store.batch(image_ids) if store is not None else None,
            question_ids=question_ids,
            answer_ids=answer_ids,
            category_ids=np.asarray([s.category_id for s in chosen], dtype=np.int64),
            question_mask=make_pad_mask(question_ids),
            answer_mask=make_pad_mask(answer_ids),
        )
