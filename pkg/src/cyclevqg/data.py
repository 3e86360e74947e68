"""Dataset ingestion: VQA-format annotations, vocabulary, splits, toy data.

The training corpus is a list of ``Sample`` tuples (image ref, question
token ids, answer-category id).  Questions are tokenized with a shared
lowercase/punctuation-stripping tokenizer that the metrics module reuses,
so similarity scores and the vocabulary agree on token boundaries.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
import torch

# Special token ids are fixed: everything else is frequency-indexed above them.
PAD, START, END, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<start>", "<end>", "<unk>")

# Category names listed by the upstream annotation scheme this loader targets.
DEFAULT_CATEGORY_NAMES = (
    "count", "binary", "object", "color", "attribute", "materials",
    "spatial", "food", "shape", "location", "predicate", "time", "activity",
)

_TOKEN_RE = re.compile(r"[a-z0-9']+")

CACHE_MAGIC = b"CVQGREC1"


class DataError(Exception):
    """Malformed input files or inconsistent dataset configuration."""


def tokenize(text):
    """Lowercase and split on punctuation/whitespace; keeps in-word apostrophes."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Sample:
    """One training tuple: image reference, question token ids, category id."""

    image_id: str
    question: tuple
    category: int


class Vocabulary:
    """Token/index bijection with fixed pad/start/end/unk specials."""

    def __init__(self, tokens, min_freq=1):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.min_freq = min_freq
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    @classmethod
    def build(cls, texts, min_freq=1):
        """Index every token whose corpus frequency is >= min_freq."""
        counts = Counter()
        for text in texts:
            counts.update(tokenize(text))
        kept = sorted(t for t, c in counts.items() if c >= min_freq)
        return cls(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)

    def encode(self, text, max_len=None):
        """Token ids for ``text`` wrapped in start/end markers.

        Words beyond ``max_len - 2`` are dropped so the framed sequence fits.
        """
        words = tokenize(text)
        if max_len is not None:
            words = words[: max_len - 2]
        return [START] + [self.index.get(w, UNK) for w in words] + [END]

    def decode(self, ids):
        """Text for a token id sequence; specials are dropped, stops at end."""
        words = []
        for i in ids:
            if i == END:
                break
            if i in (PAD, START):
                continue
            words.append(self.tokens[i])
        return " ".join(words)


class CategoryMap:
    """Answer-string to category-id table over a fixed category name list."""

    def __init__(self, names, answer_to_category=None):
        self.names = list(names)
        self.answer_to_category = dict(answer_to_category or {})
        n = len(self.names)
        for answer, cat in self.answer_to_category.items():
            if not 0 <= cat < n:
                raise DataError(f"category id {cat} for answer {answer!r} out of range")

    def __len__(self):
        return len(self.names)

    def lookup(self, answer):
        """Category id for an answer string, or None when unmapped."""
        return self.answer_to_category.get(answer.strip().lower())

    @classmethod
    def from_tsv(cls, path, names=None):
        """Read a two-column UTF-8 TSV of (answer, category name).

        When ``names`` is omitted, category ids follow first appearance in
        the file; otherwise the file may only use the given names.
        """
        rows = []
        try:
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.rstrip("\n")
                    if not line or line.startswith("#"):
                        continue
                    parts = line.split("\t")
                    if len(parts) != 2:
                        raise DataError(f"{path}:{lineno}: expected 2 tab-separated columns")
                    rows.append((parts[0].strip().lower(), parts[1].strip().lower()))
        except OSError as exc:
            raise DataError(f"cannot read category map: {exc}") from exc

        if names is None:
            names = []
            for _, cat in rows:
                if cat not in names:
                    names.append(cat)
        name_ids = {name: i for i, name in enumerate(names)}
        table = {}
        for answer, cat in rows:
            if cat not in name_ids:
                raise DataError(f"unknown category {cat!r} for answer {answer!r}")
            table[answer] = name_ids[cat]
        return cls(names, table)


@dataclass
class LoadReport:
    """Per-ingestion tallies: what was read, kept, dropped, or skipped."""

    total_questions: int = 0
    kept: int = 0
    unmapped_answers: int = 0
    malformed: int = 0


@dataclass
class LoadResult:
    samples: list
    vocab: Vocabulary
    report: LoadReport


def _majority_answer(answers):
    """Most frequent answer string among the annotations; ties break lexicographically."""
    counts = Counter(a.strip().lower() for a in answers if a and a.strip())
    if not counts:
        return None
    return min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def load_vqa(annotations_path, questions_path, category_map,
             vocab=None, min_token_freq=1, max_len=20):
    """Ingest VQA-schema JSON files into Samples.

    Questions file: {"questions": [{"question_id", "image_id", "question"}]}.
    Annotations file: {"annotations": [{"question_id", "answers": [{"answer"}]}]}.
    Each question's category is the majority answer's entry in
    ``category_map``; questions with unmapped majority answers are dropped
    and tallied in the report.  A vocabulary is built from the kept
    questions unless one is supplied.
    """
    try:
        with open(questions_path, encoding="utf-8") as fh:
            questions_json = json.load(fh)
        with open(annotations_path, encoding="utf-8") as fh:
            annotations_json = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read VQA input: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in VQA input: {exc}") from exc

    report = LoadReport()
    answers_by_qid = {}
    for record in annotations_json.get("annotations", []):
        try:
            qid = record["question_id"]
            answers = [a["answer"] for a in record["answers"]]
        except (KeyError, TypeError):
            report.malformed += 1
            continue
        answers_by_qid[qid] = answers

    rows = []
    for record in questions_json.get("questions", []):
        report.total_questions += 1
        try:
            qid = record["question_id"]
            image_id = str(record["image_id"])
            text = record["question"]
        except (KeyError, TypeError):
            report.malformed += 1
            continue
        if qid not in answers_by_qid or not tokenize(text):
            report.malformed += 1
            continue
        majority = _majority_answer(answers_by_qid[qid])
        if majority is None:
            report.malformed += 1
            continue
        category = category_map.lookup(majority)
        if category is None:
            report.unmapped_answers += 1
            continue
        rows.append((image_id, text, category))

    if vocab is None:
        vocab = Vocabulary.build((text for _, text, _ in rows), min_freq=min_token_freq)

    samples = [
        Sample(image_id, tuple(vocab.encode(text, max_len=max_len)), category)
        for image_id, text, category in rows
    ]
    report.kept = len(samples)
    return LoadResult(samples, vocab, report)


@dataclass
class DatasetSplit:
    train: list
    val: list
    ratio: float


def split(samples, ratio, seed):
    """Seed-deterministic shuffle followed by a ratio cut."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    cut = round(len(samples) * ratio)
    shuffled = [samples[i] for i in order]
    return DatasetSplit(train=shuffled[:cut], val=shuffled[cut:], ratio=ratio)


# ---------------------------------------------------------------------------
# Toy dataset: colored geometric shapes with per-category question templates.
# ---------------------------------------------------------------------------

TOY_SHAPES = ("circle", "square", "triangle")
TOY_COLORS = ("red", "green", "blue")
TOY_COUNT_WORDS = ("one", "two", "three")

# Template per category; the slot words are read off the image content, so
# a correct generation needs both the category and the visual cues.  The
# templates share their frame on purpose: only one word identifies the
# category, so category-consistent generation is not already implied by
# plain sequence likelihood.
TOY_TEMPLATES = (
    ("color", "guess the color of the {count} {shape} shapes"),
    ("shape", "guess the shape of the {count} {color} shapes"),
    ("count", "guess the count of the {color} {shape} shapes"),
    ("location", "guess the place of the {count} {color} shapes"),
    ("binary", "guess the presence of the {count} {color} shapes"),
)

_TOY_CATEGORY_WORDS = {
    "color": "color",
    "shape": "shape",
    "count": "count",
    "place": "location",
    "presence": "binary",
}


def toy_category_of_question(text):
    """Name of the template category a question matches, or None."""
    words = tokenize(text)
    if len(words) >= 3 and words[0] == "guess" and words[1] == "the":
        return _TOY_CATEGORY_WORDS.get(words[2])
    return None


def _parse_toy_id(image_id):
    parts = image_id.split("-")
    if len(parts) != 5 or parts[0] != "toy":
        raise DataError(f"not a toy image id: {image_id!r}")
    _, index, shape, color, count = parts
    return int(index), shape, color, int(count)


def render_toy_image(image_id, size=64):
    """Deterministically rasterize the scene encoded in a toy image id.

    ``count`` large shapes of one color on a faintly color-tinted
    background, jittered inside separate grid cells so they never merge.
    Returns a float64 array of shape (3, size, size) in [0, 1].
    """
    index, shape, color, count = _parse_toy_id(image_id)
    rng = np.random.default_rng(
        int.from_bytes(hashlib.sha256(image_id.encode()).digest()[:8], "little")
    )
    channel = {"red": 0, "green": 1, "blue": 2}[color]
    img = np.full((3, size, size), 0.10, dtype=np.float64)
    img[channel] += 0.08
    radius = size // 6
    ys, xs = np.mgrid[0:size, 0:size]
    cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
    for cell in [cells[i] for i in rng.permutation(4)[:count]]:
        half = size // 2
        jitter = half - 2 * radius - 2
        cx = cell[1] * half + radius + 1 + int(rng.integers(max(jitter, 1)))
        cy = cell[0] * half + radius + 1 + int(rng.integers(max(jitter, 1)))
        if shape == "circle":
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius ** 2
        elif shape == "square":
            mask = (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
        else:  # triangle: |dx| under a sloped cap, clipped to height
            dx = xs - cx
            dy = ys - cy
            mask = (dy >= -radius) & (dy <= radius) & (np.abs(dx) <= (dy + radius) / 2)
        img[channel][mask] = 0.95
        img[(channel + 1) % 3][mask] = 0.2
        img[(channel + 2) % 3][mask] = 0.2
    return img


def make_toy_dataset(n_images, n_categories, seed):
    """Procedural shapes-and-templates corpus for desk-scale checks.

    Yields one sample per (image, category) pair: ``n_images * n_categories``
    total, each question instantiated from that category's template with the
    slot word taken from the image content.
    """
    if n_categories < 2:
        raise ValueError("toy dataset needs at least 2 categories")
    if n_categories > len(TOY_TEMPLATES):
        raise ValueError(f"at most {len(TOY_TEMPLATES)} toy categories available")
    rng = np.random.default_rng(seed)
    templates = TOY_TEMPLATES[:n_categories]
    category_map = CategoryMap([name for name, _ in templates])

    texts, rows = [], []
    for i in range(n_images):
        shape = TOY_SHAPES[rng.integers(len(TOY_SHAPES))]
        color = TOY_COLORS[rng.integers(len(TOY_COLORS))]
        count = int(rng.integers(1, 4))
        image_id = f"toy-{i:04d}-{shape}-{color}-{count}"
        slots = {"shape": shape, "color": color, "count": TOY_COUNT_WORDS[count - 1]}
        for cat_id, (_, template) in enumerate(templates):
            text = template.format(**slots)
            texts.append(text)
            rows.append((image_id, text, cat_id))

    vocab = Vocabulary.build(texts, min_freq=1)
    samples = [
        Sample(image_id, tuple(vocab.encode(text)), cat_id)
        for image_id, text, cat_id in rows
    ]
    return samples, vocab, category_map


# ---------------------------------------------------------------------------
# Image sources: map Sample.image_id to a model-ready tensor.
# ---------------------------------------------------------------------------

class ToyImageSource:
    """Renders toy image ids on demand; caches rasterized scenes."""

    def __init__(self, size=64):
        self.size = size
        self._cache = {}

    def get(self, image_id):
        if image_id not in self._cache:
            arr = render_toy_image(image_id, size=self.size)
            self._cache[image_id] = torch.from_numpy(arr)
        return self._cache[image_id]

    def batch(self, image_ids):
        return torch.stack([self.get(i) for i in image_ids])


class DirectoryImageSource:
    """Loads ``<root>/<image_id>`` image files, resized to a square."""

    def __init__(self, root, size=64):
        self.root = root
        self.size = size

    def get(self, image_id):
        from PIL import Image

        path = os.path.join(self.root, image_id)
        with Image.open(path) as img:
            img = img.convert("RGB").resize((self.size, self.size))
            arr = np.asarray(img, dtype=np.float64) / 255.0
        return torch.from_numpy(arr.transpose(2, 0, 1))

    def batch(self, image_ids):
        return torch.stack([self.get(i) for i in image_ids])


class FeatureImageSource:
    """Serves precomputed feature vectors from an .npz keyed by image id."""

    def __init__(self, path):
        self._archive = np.load(path)

    def get(self, image_id):
        if image_id not in self._archive:
            raise DataError(f"no precomputed features for image {image_id!r}")
        return torch.from_numpy(np.asarray(self._archive[image_id], dtype=np.float64))

    def batch(self, image_ids):
        return torch.stack([self.get(i) for i in image_ids])


@dataclass
class DatasetBundle:
    """Everything training needs: samples plus the shared lookup tables."""

    samples: list
    vocab: Vocabulary
    category_names: list
    images: object
    report: LoadReport = field(default_factory=LoadReport)


# ---------------------------------------------------------------------------
# Sample cache: length-prefixed binary records plus a JSON manifest sidecar.
# ---------------------------------------------------------------------------

def save_records(path, samples, vocab, category_names, image_mode="path",
                 image_root="", extra=None):
    """Write samples as length-prefixed records with a .json manifest.

    Record payload layout (little endian): u16 image-id length, utf-8
    image id, u16 token count, u32 token ids, u16 category id.
    """
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<Q", len(samples)))
        for s in samples:
            ref = s.image_id.encode("utf-8")
            payload = struct.pack("<H", len(ref)) + ref
            payload += struct.pack("<H", len(s.question))
            payload += struct.pack(f"<{len(s.question)}I", *s.question)
            payload += struct.pack("<H", s.category)
            fh.write(struct.pack("<I", len(payload)))
            fh.write(payload)
    manifest = {
        "format_version": 1,
        "count": len(samples),
        "vocab": vocab.tokens,
        "min_token_freq": vocab.min_freq,
        "categories": list(category_names),
        "image_mode": image_mode,
        "image_root": image_root,
    }
    manifest.update(extra or {})
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_records(path, image_size=64):
    """Read a record cache back into a DatasetBundle."""
    try:
        with open(path + ".json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise DataError(f"missing cache manifest: {exc}") from exc

    samples = []
    try:
        with open(path, "rb") as fh:
            if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
                raise DataError(f"{path}: not a sample cache file")
            (count,) = struct.unpack("<Q", fh.read(8))
            for _ in range(count):
                (size,) = struct.unpack("<I", fh.read(4))
                payload = fh.read(size)
                if len(payload) != size:
                    raise DataError(f"{path}: truncated record")
                off = 0
                (ref_len,) = struct.unpack_from("<H", payload, off)
                off += 2
                image_id = payload[off:off + ref_len].decode("utf-8")
                off += ref_len
                (n_tok,) = struct.unpack_from("<H", payload, off)
                off += 2
                tokens = struct.unpack_from(f"<{n_tok}I", payload, off)
                off += 4 * n_tok
                (category,) = struct.unpack_from("<H", payload, off)
                samples.append(Sample(image_id, tokens, category))
    except (OSError, struct.error) as exc:
        raise DataError(f"corrupt sample cache {path}: {exc}") from exc

    vocab = Vocabulary(manifest["vocab"], min_freq=manifest.get("min_token_freq", 1))
    mode = manifest.get("image_mode", "path")
    if mode == "toy":
        images = ToyImageSource(size=image_size)
    elif mode == "features":
        images = FeatureImageSource(manifest["image_root"])
    else:
        images = DirectoryImageSource(manifest.get("image_root", ""), size=image_size)
    return DatasetBundle(samples, vocab, list(manifest["categories"]), images)
