"""Caption embeddings: PV-DBOW trained with a full-softmax loss.

Each caption is a document with its own trainable vector; every token of the
caption is predicted from that vector alone through a shared softmax output
layer. A grid search over (dim, epochs) selects the operating point by mean
sibling rank, the retrieval quality measure defined below.
"""

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import binio
from .corpus import PairedCorpus
from .validation import check_positive_int

CHECKPOINT_MAGIC = b"PVDB"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PVHyperParams:
    """Training knobs for one PV-DBOW run.

    ``negative=0`` selects the exact full-softmax loss; a positive value
    switches to negative sampling with that many noise words per step.
    """

    dim: int
    epochs: int
    initial_lr: float = 0.025
    seed: int = 0
    negative: int = 0

    def __post_init__(self):
        check_positive_int(self.dim, "dim")
        check_positive_int(self.epochs, "epochs")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if self.negative < 0:
            raise ValueError("negative must be >= 0")


@dataclass(frozen=True)
class PVGrid:
    dims: tuple
    epochs_list: tuple

    def __post_init__(self):
        if not self.dims or not self.epochs_list:
            raise ValueError("grid must be non-empty")


class PVModel:
    """Trained caption vectors plus the softmax output weights.

    ``hyper`` is None for models loaded from a checkpoint, which stores only
    the learned tensors.
    """

    def __init__(self, doc_vectors, word_weights, caption_ids,
                 hyper: PVHyperParams | None = None, epoch_mean_losses=()):
        self.doc_vectors = np.ascontiguousarray(doc_vectors, dtype=np.float32)
        self.word_weights = np.ascontiguousarray(word_weights, dtype=np.float32)
        self.caption_ids = tuple(caption_ids)
        self.hyper = hyper
        self.epoch_mean_losses = tuple(epoch_mean_losses)
        if self.doc_vectors.ndim != 2 or self.word_weights.ndim != 2:
            raise ValueError("doc_vectors and word_weights must be matrices")
        if self.doc_vectors.shape[0] != len(self.caption_ids):
            raise ValueError("one doc vector per caption required")
        if self.doc_vectors.shape[1] != self.word_weights.shape[1]:
            raise ValueError("doc and word dimensions differ")
        if not np.all(np.isfinite(self.doc_vectors)):
            raise ValueError("doc_vectors contain non-finite values")
        if not np.all(np.isfinite(self.word_weights)):
            raise ValueError("word_weights contain non-finite values")
        self._row = {cid: i for i, cid in enumerate(self.caption_ids)}

    @property
    def dim(self):
        return self.doc_vectors.shape[1]

    def row_of(self, caption_id: str) -> int:
        try:
            return self._row[caption_id]
        except KeyError:
            raise KeyError(f"unknown caption_id {caption_id!r}") from None

    def vector(self, caption_id: str) -> np.ndarray:
        return self.doc_vectors[self.row_of(caption_id)]

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            binio.write_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
            binio.write_u32(fh, self.dim)
            binio.write_u64(fh, self.doc_vectors.shape[0])
            binio.write_u64(fh, self.word_weights.shape[0])
            for cid in self.caption_ids:
                binio.write_string(fh, cid)
            binio.write_f32_array(fh, self.doc_vectors)
            binio.write_f32_array(fh, self.word_weights)

    @classmethod
    def load(cls, path) -> "PVModel":
        with open(path, "rb") as fh:
            version = binio.read_header(fh, CHECKPOINT_MAGIC, path)
            if version != CHECKPOINT_VERSION:
                raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
            dim = binio.read_u32(fh, path)
            m = binio.read_u64(fh, path)
            v = binio.read_u64(fh, path)
            caption_ids = [binio.read_string(fh, path) for _ in range(m)]
            doc = binio.read_f32_array(fh, m * dim, path).reshape(m, dim)
            words = binio.read_f32_array(fh, v * dim, path).reshape(v, dim)
        return cls(doc, words, caption_ids)


def softmax_loss_and_grads(doc_vector, word_weights, target_id):
    """Loss and analytic gradients of one full-softmax step, in 64-bit.

    Returns (loss, grad wrt doc_vector, grad wrt word_weights). Shared by the
    trainer and by finite-difference verification.
    """
    d = np.asarray(doc_vector, dtype=np.float64)
    w = np.asarray(word_weights, dtype=np.float64)
    logits = w @ d
    peak = logits.max()
    exp = np.exp(logits - peak)
    total = exp.sum()
    loss = float(np.log(total) + peak - logits[target_id])
    g = exp / total
    g[target_id] -= 1.0
    return loss, w.T @ g, np.outer(g, d)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _train(corpus: PairedCorpus, hp: PVHyperParams):
    if len(corpus) == 0:
        raise ValueError("corpus has no captions")
    rng = np.random.default_rng(hp.seed)
    n_captions = len(corpus.captions)
    vocab_size = len(corpus.vocab)
    bound = 0.5 / hp.dim
    doc = rng.uniform(-bound, bound, size=(n_captions, hp.dim))
    words = np.zeros((vocab_size, hp.dim))

    tokens_per_caption = [cap.tokens for cap in corpus.captions]
    steps_per_epoch = sum(len(t) for t in tokens_per_caption)
    if steps_per_epoch == 0:
        raise ValueError("corpus has no tokens to train on")
    total_steps = hp.epochs * steps_per_epoch
    final_lr = hp.initial_lr / 100.0

    if hp.negative > 0:
        counts = np.zeros(vocab_size)
        for toks in tokens_per_caption:
            np.add.at(counts, list(toks), 1.0)
        noise = counts ** 0.75
        noise /= noise.sum()

    epoch_mean_losses = []
    step = 0
    for _ in range(hp.epochs):
        epoch_loss = 0.0
        for row, tokens in enumerate(tokens_per_caption):
            d = doc[row]
            for target in tokens:
                if total_steps == 1:
                    lr = hp.initial_lr
                else:
                    frac = step / (total_steps - 1)
                    lr = hp.initial_lr + (final_lr - hp.initial_lr) * frac
                if hp.negative == 0:
                    loss, grad_d, grad_w = softmax_loss_and_grads(d, words, target)
                    words -= lr * grad_w
                    d -= lr * grad_d
                else:
                    negs = rng.choice(vocab_size, size=hp.negative, p=noise)
                    negs = negs[negs != target]
                    rows = np.concatenate(([target], negs))
                    signs = np.ones(len(rows))
                    signs[1:] = -1.0
                    acts = _sigmoid(signs * (words[rows] @ d))
                    loss = float(-np.log(np.maximum(acts, 1e-300)).sum())
                    coef = signs * (acts - 1.0)
                    grad_d = coef @ words[rows]
                    words[rows] += -lr * np.outer(coef, d)
                    d -= lr * grad_d
                epoch_loss += loss
                step += 1
        epoch_mean_losses.append(epoch_loss / steps_per_epoch)

    model = PVModel(doc.astype(np.float32), words.astype(np.float32),
                    [cap.caption_id for cap in corpus.captions],
                    hyper=hp, epoch_mean_losses=epoch_mean_losses)
    return model


def train_pv(corpus: PairedCorpus, hp: PVHyperParams) -> PVModel:
    """Train one PV-DBOW model over every caption of the corpus.

    One SGD step per (caption, token position) per epoch, in corpus order,
    with the learning rate decaying linearly from initial_lr to
    initial_lr/100 over the run. Deterministic given hp.seed.
    """
    return _train(corpus, hp)


class PVEmbedding(TransformerMixin, BaseEstimator):
    """Estimator-shaped wrapper: fit on a corpus, transform caption ids to vectors."""

    def __init__(self, dim=64, epochs=5, initial_lr=0.025, seed=0, negative=0):
        self.dim = dim
        self.epochs = epochs
        self.initial_lr = initial_lr
        self.seed = seed
        self.negative = negative

    def fit(self, corpus: PairedCorpus, y=None):
        hp = PVHyperParams(dim=self.dim, epochs=self.epochs,
                           initial_lr=self.initial_lr, seed=self.seed,
                           negative=self.negative)
        self.model_ = _train(corpus, hp)
        self.epoch_mean_losses_ = self.model_.epoch_mean_losses
        return self

    def transform(self, caption_ids):
        rows = [self.model_.row_of(cid) for cid in caption_ids]
        return self.model_.doc_vectors[rows].copy()


def _require_siblings(corpus: PairedCorpus):
    lonely = [iid for iid, caps in corpus.image_to_captions.items() if len(caps) < 2]
    if lonely:
        raise ValueError(f"sibling ranks undefined: images with < 2 captions: {lonely[:5]}")


def mgs_rank(model: PVModel, corpus: PairedCorpus, top_n: int | None = None) -> float:
    """Mean cosine-distance rank of same-image sibling captions.

    For each caption, every other corpus caption is ranked by ascending
    cosine distance (ties by caption_id ascending) and the ranks of the
    caption's same-image siblings are collected; the result is the mean over
    all (caption, sibling) pairs. With ``top_n`` set, ranking is restricted
    to the top-N cosine neighborhood and siblings outside it count as N+1.
    """
    _require_siblings(corpus)
    if set(model.caption_ids) != {c.caption_id for c in corpus.captions}:
        raise ValueError("model and corpus caption sets differ")

    if top_n is not None:
        from .simsearch import CosineIndex

        index = CosineIndex(model, corpus)
        total, pairs = 0.0, 0
        for cap in corpus.captions:
            neighbors = index.query(cap.caption_id, top_n, exclude_same_image=False)
            position = {cid: i + 1 for i, (cid, _) in enumerate(neighbors.entries)}
            for sib in corpus.siblings(cap.caption_id):
                total += position.get(sib, top_n + 1)
                pairs += 1
        return total / pairs

    doc = model.doc_vectors.astype(np.float64)
    norms = np.linalg.norm(doc, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm doc vector: cosine rank undefined")
    unit = doc / norms[:, None]
    ids = np.array(model.caption_ids)

    total, pairs = 0.0, 0
    for cap in corpus.captions:
        i = model.row_of(cap.caption_id)
        sims = unit @ unit[i]
        for sib in corpus.siblings(cap.caption_id):
            j = model.row_of(sib)
            ahead = int(np.count_nonzero(sims > sims[j]))
            ahead += int(np.count_nonzero((sims == sims[j]) & (ids < ids[j])))
            if sims[i] > sims[j] or (sims[i] == sims[j] and ids[i] < ids[j]):
                ahead -= 1
            total += 1 + ahead
            pairs += 1
    return total / pairs


def optimize_pv(corpus: PairedCorpus, grid: PVGrid, base_hp: PVHyperParams):
    """Grid search over (dim, epochs) minimizing mean sibling rank.

    Ties prefer the smaller dim, then the fewer epochs. Returns the winning
    hyper-parameters, the winning model, and the full search table as a list
    of (dim, epochs, rank) rows.
    """
    table = []
    best = None
    for dim in grid.dims:
        for epochs in grid.epochs_list:
            hp = replace(base_hp, dim=dim, epochs=epochs)
            model = train_pv(corpus, hp)
            rank = mgs_rank(model, corpus)
            table.append((dim, epochs, rank))
            key = (rank, dim, epochs)
            if best is None or key < best[0]:
                best = (key, hp, model)
    return best[1], best[2], table
