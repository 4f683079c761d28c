"""Paired image-embedding/caption corpora: ingestion, tokenization, vocabulary.

A corpus joins images (precomputed embedding vectors) with their ground-truth
captions (tokenized text). All structures are immutable after construction and
safe to share read-only across threads.
"""

import itertools
import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .validation import check_positive_int

UNK_TOKEN = "<UNK>"
UNK_ID = 0
MAX_CAPTION_TOKENS = 30

EMBEDDINGS_MAGIC = b"MCIC"
EMBEDDINGS_VERSION = 1

_NON_ALPHA = re.compile(r"[^A-Za-z]+")


class CorpusFormatError(ValueError):
    """A corpus file record could not be parsed or violates a corpus invariant.

    Carries the offending file and record ordinal so bad inputs can be located.
    """

    def __init__(self, path, ordinal, reason):
        self.path = str(path)
        self.ordinal = ordinal
        self.reason = reason
        super().__init__(f"{path}: record {ordinal}: {reason}")


def tokenize(text: str) -> list[str]:
    """Normalize raw caption text into at most 30 lowercase alphabetic tokens.

    Every character outside [a-zA-Z] is replaced by a space, the result is
    lowercased and whitespace-split, and the token list is truncated to the
    first 30 entries.
    """
    return _NON_ALPHA.sub(" ", text).lower().split()[:MAX_CAPTION_TOKENS]


class Vocabulary:
    """Token/id bijection with a reserved unknown token at id 0.

    Ids are assigned deterministically: tokens sorted by descending corpus
    count, ties broken lexicographically. Only tokens occurring at least
    ``min_count`` times in the building corpus are retained.
    """

    def __init__(self, tokens: list[str], min_count: int = 5):
        if UNK_TOKEN in tokens:
            raise ValueError(f"{UNK_TOKEN} is reserved and cannot be a vocabulary token")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.min_count = min_count
        self._id_to_token = [UNK_TOKEN] + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}

    @classmethod
    def build(cls, token_lists, min_count: int = 5) -> "Vocabulary":
        """Build from pre-tokenized captions (iterable of token-string lists)."""
        counts = Counter()
        for toks in token_lists:
            counts.update(toks)
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept, min_count=min_count)

    def __len__(self):
        return len(self._id_to_token)

    def __contains__(self, token):
        return token in self._token_to_id

    def id_of(self, token: str) -> int:
        """Id for a token; unknown tokens map to the UNK id."""
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def encode(self, tokens: list[str]) -> list[int]:
        """Map tokens to ids, sending out-of-vocabulary tokens to UNK."""
        get = self._token_to_id.get
        return [get(t, UNK_ID) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._id_to_token[i] for i in ids]

    def save(self, path) -> None:
        """One token per line; the line number is the id, line 0 is reserved."""
        with open(path, "w", encoding="utf-8") as fh:
            for token in self._id_to_token:
                fh.write(token + "\n")

    @classmethod
    def load(cls, path, min_count: int = 5) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        if not lines or lines[0] != UNK_TOKEN:
            raise CorpusFormatError(path, 0, f"line 0 must be the reserved token {UNK_TOKEN}")
        return cls(lines[1:], min_count=min_count)


def build_vocabulary(token_lists, min_count: int = 5) -> Vocabulary:
    """Functional alias for :meth:`Vocabulary.build`."""
    return Vocabulary.build(token_lists, min_count=min_count)


@dataclass(frozen=True)
class CaptionRecord:
    """One ground-truth caption: raw text plus its encoded token ids."""

    caption_id: str
    image_id: str
    raw_text: str
    tokens: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.tokens) > MAX_CAPTION_TOKENS:
            raise ValueError(f"caption {self.caption_id}: more than "
                             f"{MAX_CAPTION_TOKENS} tokens")


@dataclass(frozen=True)
class ImageRecord:
    """One image, represented only by its fixed-length embedding vector."""

    image_id: str
    embedding: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float32)
        if emb.ndim != 1:
            raise ValueError(f"image {self.image_id}: embedding must be 1-D")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"image {self.image_id}: embedding contains non-finite values")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


class PairedCorpus:
    """Images joined with their captions, plus the vocabulary they were encoded with.

    Invariants enforced at construction: every caption's image resolves, every
    image has at least one caption, caption ids are unique corpus-wide, all
    embeddings share one dimension, and every token id is inside the vocabulary.
    """

    def __init__(self, images, captions, vocab: Vocabulary):
        self.images = tuple(images)
        self.captions = tuple(captions)
        self.vocab = vocab

        if not self.images:
            raise ValueError("corpus has no images")
        dims = {img.embedding.shape[0] for img in self.images}
        if len(dims) != 1:
            raise ValueError(f"embedding dimension mismatch across images: {sorted(dims)}")
        self.d_img = dims.pop()

        self._image_by_id = {}
        for img in self.images:
            if img.image_id in self._image_by_id:
                raise ValueError(f"duplicate image_id {img.image_id!r}")
            self._image_by_id[img.image_id] = img

        self._caption_by_id = {}
        grouped = {img.image_id: [] for img in self.images}
        for cap in self.captions:
            if cap.caption_id in self._caption_by_id:
                raise ValueError(f"duplicate caption_id {cap.caption_id!r}")
            if cap.image_id not in self._image_by_id:
                raise ValueError(f"caption {cap.caption_id!r} references missing "
                                 f"image {cap.image_id!r}")
            if any(t >= len(vocab) or t < 0 for t in cap.tokens):
                raise ValueError(f"caption {cap.caption_id!r} has token ids outside "
                                 f"the vocabulary (size {len(vocab)})")
            self._caption_by_id[cap.caption_id] = cap
            grouped[cap.image_id].append(cap.caption_id)

        empty = [iid for iid, caps in grouped.items() if not caps]
        if empty:
            raise ValueError(f"images without captions: {empty[:5]}")
        self.image_to_captions = {iid: tuple(caps) for iid, caps in grouped.items()}

    def __len__(self):
        return len(self.captions)

    @property
    def n_images(self):
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        return self._image_by_id[image_id]

    def caption(self, caption_id: str) -> CaptionRecord:
        return self._caption_by_id[caption_id]

    def has_caption(self, caption_id: str) -> bool:
        return caption_id in self._caption_by_id

    def siblings(self, caption_id: str) -> tuple:
        """Caption ids sharing the query's image, excluding the query itself."""
        cap = self._caption_by_id[caption_id]
        return tuple(c for c in self.image_to_captions[cap.image_id] if c != caption_id)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_captions_jsonl(captions, path) -> None:
    """One JSON object per line: {"caption_id", "image_id", "text"}."""
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captions:
            rec = {"caption_id": cap.caption_id, "image_id": cap.image_id,
                   "text": cap.raw_text}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_captions_jsonl(path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, lineno, f"invalid JSON ({exc.msg})") from exc
            for key in ("caption_id", "image_id", "text"):
                if key not in obj or not isinstance(obj[key], str):
                    raise CorpusFormatError(path, lineno, f"missing or non-string field {key!r}")
            rows.append(obj)
    return rows


def write_embeddings(images, path) -> None:
    """Binary embedding store: MCIC header, then (id, f32 vector) records."""
    images = list(images)
    dims = {img.embedding.shape[0] for img in images}
    if len(dims) > 1:
        raise ValueError(f"embedding dimension mismatch: {sorted(dims)}")
    dim = dims.pop() if dims else 0
    with open(path, "wb") as fh:
        binio.write_header(fh, EMBEDDINGS_MAGIC, EMBEDDINGS_VERSION)
        binio.write_u32(fh, dim)
        binio.write_u64(fh, len(images))
        for img in images:
            binio.write_string(fh, img.image_id)
            binio.write_f32_array(fh, img.embedding)


def read_embeddings(path) -> list[ImageRecord]:
    with open(path, "rb") as fh:
        version = binio.read_header(fh, EMBEDDINGS_MAGIC, path)
        if version != EMBEDDINGS_VERSION:
            raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
        dim = binio.read_u32(fh, path)
        count = binio.read_u64(fh, path)
        images = []
        for i in range(count):
            try:
                image_id = binio.read_string(fh, path)
                vec = binio.read_f32_array(fh, dim, path)
            except binio.BinaryFormatError as exc:
                raise CorpusFormatError(path, i, str(exc)) from exc
            if not np.all(np.isfinite(vec)):
                raise CorpusFormatError(path, i, f"image {image_id!r} has non-finite embedding")
            images.append(ImageRecord(image_id=image_id, embedding=vec))
    return images


def load_paired_corpus(captions_path, embeddings_path, min_count: int = 5,
                       vocab: Vocabulary | None = None) -> PairedCorpus:
    """Join a captions JSON-lines file with a binary embedding store.

    The vocabulary is built from the loaded caption texts unless one is
    supplied. Captions referencing unknown images, duplicate ids, and images
    left without captions are all rejected with the offending record named.
    """
    rows = read_captions_jsonl(captions_path)
    images = read_embeddings(embeddings_path)
    image_ids = {img.image_id for img in images}

    seen = {}
    for lineno, row in enumerate(rows, start=1):
        if row["caption_id"] in seen:
            raise CorpusFormatError(captions_path, lineno,
                                    f"duplicate caption_id {row['caption_id']!r} "
                                    f"(first seen at record {seen[row['caption_id']]})")
        seen[row["caption_id"]] = lineno
        if row["image_id"] not in image_ids:
            raise CorpusFormatError(captions_path, lineno,
                                    f"caption {row['caption_id']!r} references missing "
                                    f"image {row['image_id']!r}")

    token_lists = [tokenize(row["text"]) for row in rows]
    if vocab is None:
        vocab = Vocabulary.build(token_lists, min_count=min_count)

    captions = [CaptionRecord(caption_id=row["caption_id"], image_id=row["image_id"],
                              raw_text=row["text"], tokens=tuple(vocab.encode(toks)))
                for row, toks in zip(rows, token_lists)]
    return PairedCorpus(images, captions, vocab)


def write_paired_corpus(corpus: PairedCorpus, captions_path, embeddings_path) -> None:
    write_captions_jsonl(corpus.captions, captions_path)
    write_embeddings(corpus.images, embeddings_path)


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

def _alphabetic_words(n: int) -> list[str]:
    """First n distinct lowercase words in length-then-lexicographic order."""
    words = []
    for length in itertools.count(2):
        for combo in itertools.product(string.ascii_lowercase, repeat=length):
            words.append("".join(combo))
            if len(words) == n:
                return words


def generate_synthetic_corpus(seed: int, n_images: int, captions_per_image: int,
                              vocab_size: int = 120, d_img: int = 64,
                              content_words: int = 8,
                              noise_sigma: float = 0.1) -> PairedCorpus:
    """Deterministic desk-scale corpus with a planted image/caption signal.

    Each image samples its captions from a private topic distribution over a
    shared alphabetic vocabulary. The image embedding is a fixed random linear
    map applied to the mean token-count vector of its own captions, plus
    Gaussian noise, so image/caption compatibility is learnable by
    construction.
    """
    check_positive_int(n_images, "n_images")
    if captions_per_image < 2:
        raise ValueError("captions_per_image must be at least 2 "
                         "(sibling ranks need multiple ground truths)")
    if vocab_size < content_words + 2:
        raise ValueError(f"vocab_size must exceed content_words={content_words}")
    check_positive_int(d_img, "d_img")

    rng = np.random.default_rng(seed)
    words = _alphabetic_words(vocab_size)
    # One linear map shared by every image; scaled so the planted signal
    # dominates the additive noise.
    projection = rng.normal(0.0, 1.0, size=(d_img, vocab_size)) / np.sqrt(vocab_size)

    images = []
    captions = []
    for i in range(n_images):
        image_id = f"img{i:05d}"
        topic_words = rng.choice(vocab_size, size=content_words, replace=False)
        topic_weights = rng.dirichlet(np.full(content_words, 0.8))
        probs = np.full(vocab_size, 0.02 / vocab_size)
        probs[topic_words] += 0.98 * topic_weights
        probs /= probs.sum()

        counts = np.zeros(vocab_size, dtype=np.float64)
        for j in range(captions_per_image):
            length = int(rng.integers(6, 13))
            token_idx = rng.choice(vocab_size, size=length, p=probs)
            text = " ".join(words[k] for k in token_idx)
            captions.append((f"{image_id}-c{j}", image_id, text))
            np.add.at(counts, token_idx, 1.0)

        mean_counts = counts / captions_per_image
        emb = projection @ mean_counts + rng.normal(0.0, noise_sigma, size=d_img)
        images.append(ImageRecord(image_id=image_id, embedding=emb.astype(np.float32)))

    token_lists = [tokenize(text) for _, _, text in captions]
    vocab = Vocabulary.build(token_lists, min_count=1)
    records = [CaptionRecord(caption_id=cid, image_id=iid, raw_text=text,
                             tokens=tuple(vocab.encode(toks)))
               for (cid, iid, text), toks in zip(captions, token_lists)]
    return PairedCorpus(images, records, vocab)
