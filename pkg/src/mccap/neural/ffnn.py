"""Feed-forward two-class comprehension model.

A candidate caption is represented by the mean of its word embeddings,
concatenated with a learned linear projection of the image embedding. Two
ReLU layers feed a binary softmax ("is this caption the true one?"). Every
(image, candidate) pair is an independent training example; prediction picks
the candidate with the highest yes-probability.
"""

import numpy as np
from sklearn.base import BaseEstimator

from .. import binio
from ..corpus import MAX_CAPTION_TOKENS, PairedCorpus, tokenize
from ..dataset import by_split
from .ops import cross_entropy, glorot_uniform, relu, softmax
from .optim import Adagrad, TrainConfig, clip_global_norm
from .trainlog import TrainLogRow

CHECKPOINT_MAGIC = b"FFNN"
FORMAT_VERSION = 1

TENSOR_NAMES = ("emb", "img_w", "img_b", "w1", "b1", "w2", "b2", "w_out", "b_out")


class FFNNParams:
    """Named parameter tensors with shape-chain validation."""

    def __init__(self, tensors: dict):
        missing = [n for n in TENSOR_NAMES if n not in tensors]
        if missing:
            raise ValueError(f"missing parameter tensors: {missing}")
        emb, img_w, w1, w2, w_out = (tensors[n] for n in
                                     ("emb", "img_w", "w1", "w2", "w_out"))
        if img_w.shape[1] != emb.shape[1]:
            raise ValueError("image projection must land in the word-embedding dim")
        if w1.shape[0] != 2 * emb.shape[1]:
            raise ValueError("first hidden layer must consume the concatenated input")
        if w2.shape[0] != w1.shape[1] or w_out.shape[0] != w2.shape[1]:
            raise ValueError("hidden layer shapes do not chain")
        if w_out.shape[1] != 2:
            raise ValueError("output layer must have two classes")
        self.tensors = tensors

    @property
    def vocab_size(self):
        return self.tensors["emb"].shape[0]

    @property
    def d_w(self):
        return self.tensors["emb"].shape[1]

    @property
    def d_img(self):
        return self.tensors["img_w"].shape[0]

    def copy(self) -> "FFNNParams":
        return FFNNParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "FFNNParams":
        return FFNNParams({k: v.astype(dtype) for k, v in self.tensors.items()})


def init_ffnn_params(seed: int, vocab_size: int, d_img: int, d_w: int = 64,
                     h1: int = 64, h2: int = 16, dtype=np.float32) -> FFNNParams:
    rng = np.random.default_rng(seed)
    t = {
        "emb": glorot_uniform(rng, vocab_size, d_w, (vocab_size, d_w), dtype),
        "img_w": glorot_uniform(rng, d_img, d_w, (d_img, d_w), dtype),
        "img_b": np.zeros(d_w, dtype=dtype),
        "w1": glorot_uniform(rng, 2 * d_w, h1, (2 * d_w, h1), dtype),
        "b1": np.zeros(h1, dtype=dtype),
        "w2": glorot_uniform(rng, h1, h2, (h1, h2), dtype),
        "b2": np.zeros(h2, dtype=dtype),
        "w_out": glorot_uniform(rng, h2, 2, (h2, 2), dtype),
        "b_out": np.zeros(2, dtype=dtype),
    }
    return FFNNParams(t)


def candidate_token_ids(candidate, corpus: PairedCorpus) -> tuple:
    """Token ids for a candidate, preferring the corpus record over re-encoding."""
    if corpus.has_caption(candidate.caption_id):
        return corpus.caption(candidate.caption_id).tokens
    return tuple(corpus.vocab.encode(tokenize(candidate.text)))[:MAX_CAPTION_TOKENS]


def _mean_embeddings(emb: np.ndarray, token_lists) -> np.ndarray:
    out = np.zeros((len(token_lists), emb.shape[1]), dtype=emb.dtype)
    for i, ids in enumerate(token_lists):
        if len(ids) == 0:
            raise ValueError("cannot embed an empty caption")
        out[i] = emb[list(ids)].mean(axis=0)
    return out


def _forward(t: dict, images: np.ndarray, token_lists):
    mean_emb = _mean_embeddings(t["emb"], token_lists)
    img_proj = images @ t["img_w"] + t["img_b"]
    x = np.concatenate([img_proj, mean_emb], axis=1)
    a1 = x @ t["w1"] + t["b1"]
    z1 = relu(a1)
    a2 = z1 @ t["w2"] + t["b2"]
    z2 = relu(a2)
    logits = z2 @ t["w_out"] + t["b_out"]
    cache = (images, token_lists, x, a1, z1, a2, z2)
    return logits, cache


def ffnn_forward(params: FFNNParams, image: np.ndarray, token_ids) -> np.ndarray:
    """Two-class probabilities (no, yes) for one image/caption pair."""
    image = np.asarray(image, dtype=params.tensors["emb"].dtype)
    logits, _ = _forward(params.tensors, image[None, :], [tuple(token_ids)])
    return softmax(logits)[0]


def ffnn_loss_and_grads(params, images: np.ndarray, token_lists, labels):
    """Mean cross-entropy over the batch plus gradients for every tensor.

    ``params`` may be an FFNNParams or a bare tensor dict (gradient checks
    mutate the dict in place).
    """
    t = params.tensors if isinstance(params, FFNNParams) else params
    labels = np.asarray(labels, dtype=np.int64)
    logits, cache = _forward(t, images, token_lists)
    losses, dlogits = cross_entropy(logits, labels)
    loss = float(losses.mean())
    images_, token_lists_, x, a1, z1, a2, z2 = cache

    dlogits = dlogits * (1.0 / len(labels))
    grads = {
        "w_out": z2.T @ dlogits,
        "b_out": dlogits.sum(axis=0),
    }
    dz2 = dlogits @ t["w_out"].T
    da2 = dz2 * (a2 > 0)
    grads["w2"] = z1.T @ da2
    grads["b2"] = da2.sum(axis=0)
    dz1 = da2 @ t["w2"].T
    da1 = dz1 * (a1 > 0)
    grads["w1"] = x.T @ da1
    grads["b1"] = da1.sum(axis=0)
    dx = da1 @ t["w1"].T

    d_w = t["emb"].shape[1]
    d_img_proj = dx[:, :d_w]
    d_mean = dx[:, d_w:]
    grads["img_w"] = images_.T @ d_img_proj
    grads["img_b"] = d_img_proj.sum(axis=0)
    demb = np.zeros_like(t["emb"])
    for i, ids in enumerate(token_lists_):
        np.add.at(demb, list(ids), d_mean[i] / len(ids))
    grads["emb"] = demb
    return loss, grads


def predict_instance(params: FFNNParams, instance, corpus: PairedCorpus) -> int:
    """Index of the candidate with the highest yes-probability (ties → lowest)."""
    image = corpus.image(instance.image_id).embedding
    yes = [ffnn_forward(params, image, candidate_token_ids(c, corpus))[1]
           for c in instance.candidates]
    return int(np.argmax(yes))


def _instance_accuracy(params: FFNNParams, instances, corpus) -> float:
    hits = sum(predict_instance(params, inst, corpus) == inst.target_index
               for inst in instances)
    return hits / len(instances)


def _pairs(instances, corpus):
    pairs = []
    for inst in instances:
        image = np.asarray(corpus.image(inst.image_id).embedding)
        for cand in inst.candidates:
            pairs.append((image, candidate_token_ids(cand, corpus), int(cand.label)))
    return pairs


def _pair_loss(params: FFNNParams, pairs) -> float:
    dtype = params.tensors["emb"].dtype
    images = np.stack([p[0] for p in pairs]).astype(dtype)
    tokens = [p[1] for p in pairs]
    labels = [p[2] for p in pairs]
    loss, _ = ffnn_loss_and_grads(params, images, tokens, labels)
    return loss


def ffnn_train(instances, corpus: PairedCorpus, cfg: TrainConfig,
               d_w: int = 64, h1: int = 64, h2: int = 16):
    """Train on the train split, track the dev split, keep the best-dev params.

    Returns (best FFNNParams, list of TrainLogRow).
    """
    splits = by_split(instances)
    train, dev = splits.get("train", []), splits.get("dev", [])
    if not train:
        raise ValueError("training requires a non-empty train split")
    if not dev:
        raise ValueError("training requires a non-empty dev split for selection")

    params = init_ffnn_params(cfg.seed, len(corpus.vocab), corpus.d_img,
                              d_w=d_w, h1=h1, h2=h2)
    dtype = params.tensors["emb"].dtype
    opt = Adagrad(params.tensors, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    pairs = _pairs(train, corpus)
    dev_pairs = _pairs(dev, corpus)

    order = rng.permutation(len(pairs))
    cursor = 0
    best = None
    rows = []
    running, running_n = 0.0, 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(order):
            order = rng.permutation(len(pairs))
            cursor = 0
        batch = [pairs[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        images = np.stack([p[0] for p in batch]).astype(dtype)
        tokens = [p[1] for p in batch]
        labels = [p[2] for p in batch]
        loss, grads = ffnn_loss_and_grads(params, images, tokens, labels)
        clip_global_norm(grads, cfg.clip_norm)
        opt.step(params.tensors, grads)
        running += loss
        running_n += 1

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            dev_acc = _instance_accuracy(params, dev, corpus)
            rows.append(TrainLogRow(step, "train", loss=running / running_n))
            rows.append(TrainLogRow(step, "dev", loss=_pair_loss(params, dev_pairs),
                                    accuracy=dev_acc))
            running, running_n = 0.0, 0
            if best is None or dev_acc > best[0]:
                best = (dev_acc, params.copy())
    return best[1], rows


class FFNNClassifier(BaseEstimator):
    """Estimator facade over ffnn_train / predict_instance."""

    def __init__(self, d_w: int = 64, h1: int = 64, h2: int = 16,
                 lr: float = 0.01, clip_norm: float = 4.0, batch_size: int = 20,
                 max_steps: int = 2000, seed: int = 0, eval_every: int = 200):
        self.d_w = d_w
        self.h1 = h1
        self.h2 = h2
        self.lr = lr
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed
        self.eval_every = eval_every

    def _config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, clip_norm=self.clip_norm,
                           batch_size=self.batch_size, max_steps=self.max_steps,
                           seed=self.seed, eval_every=self.eval_every)

    def fit(self, instances, corpus: PairedCorpus):
        self.params_, self.log_ = ffnn_train(instances, corpus, self._config(),
                                             d_w=self.d_w, h1=self.h1, h2=self.h2)
        self.corpus_ = corpus
        return self

    def predict(self, instances) -> np.ndarray:
        return np.array([predict_instance(self.params_, inst, self.corpus_)
                         for inst in instances], dtype=np.int64)

    def score(self, instances) -> float:
        return _instance_accuracy(self.params_, instances, self.corpus_)


def save_ffnn(params: FFNNParams, path) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, CHECKPOINT_MAGIC, FORMAT_VERSION)
        binio.write_named_tensors(fh, params.tensors)


def load_ffnn(path) -> FFNNParams:
    with open(path, "rb") as fh:
        version = binio.read_header(fh, CHECKPOINT_MAGIC, path)
        if version != FORMAT_VERSION:
            raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
        tensors = binio.read_named_tensors(fh, path)
    return FFNNParams(tensors)
