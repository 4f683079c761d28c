"""Multi-task encoder-decoder comprehension model.

The image embedding is projected and fed as the single input step of a
two-layer GRU encoder. A two-layer GRU decoder, initialized from the encoder
states, consumes the caption under teacher forcing; each step attends to a
one-element memory (the encoder output, so the attention weight is
identically 1), combines it with the decoder state through a tanh layer, and
emits a vocabulary softmax. A two-layer ReLU head over the encoder output
and the mean decoder output makes the yes/no call. The loss adds the
generation cross-entropy of true captions, averaged over caption positions
and weighted by lambda_gen, to the classification cross-entropy of all
candidates.

The model's vocabulary extends the corpus vocabulary with two control ids:
a start-of-sequence id V and an end-of-sequence id V+1.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .. import binio
from ..corpus import PairedCorpus
from ..dataset import by_split
from ..metrics import cider, corpus_rouge_l
from .ffnn import candidate_token_ids
from .gru import gru_backward, gru_forward, init_gru_params
from .ops import cross_entropy, glorot_uniform, relu, softmax
from .optim import Adagrad, TrainConfig, clip_global_norm
from .trainlog import TrainLogRow

CHECKPOINT_MAGIC = b"V2SQ"
FORMAT_VERSION = 1

GRU_PREFIXES = ("enc1.", "enc2.", "dec1.", "dec2.")
HEAD_NAMES = ("emb", "img_w", "img_b", "att_w", "att_b", "out_w", "out_b",
              "cls_w1", "cls_b1", "cls_w2", "cls_b2", "cls_w3", "cls_b3")


class Vec2seqParams:
    """Named tensors of the encoder-decoder plus its classification head."""

    def __init__(self, tensors: dict):
        missing = [n for n in HEAD_NAMES if n not in tensors]
        for prefix in GRU_PREFIXES:
            missing += [prefix + n for n in
                        ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")
                        if prefix + n not in tensors]
        if missing:
            raise ValueError(f"missing parameter tensors: {missing[:6]}")
        dim = tensors["img_w"].shape[1]
        if tensors["emb"].shape[1] != dim:
            raise ValueError("word embeddings must match the model dim")
        if tensors["att_w"].shape != (2 * dim, dim):
            raise ValueError("attention combine layer has the wrong shape")
        if tensors["out_w"].shape[0] != dim:
            raise ValueError("output projection must consume the model dim")
        if tensors["cls_w1"].shape[0] != 2 * dim:
            raise ValueError("classification head must consume encoder + mean "
                             "decoder outputs")
        self.tensors = tensors

    @property
    def dim(self):
        return self.tensors["img_w"].shape[1]

    @property
    def model_vocab(self):
        return self.tensors["emb"].shape[0]

    @property
    def go_id(self):
        return self.model_vocab - 2

    @property
    def eos_id(self):
        return self.model_vocab - 1

    def copy(self) -> "Vec2seqParams":
        return Vec2seqParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "Vec2seqParams":
        return Vec2seqParams({k: v.astype(dtype) for k, v in self.tensors.items()})


def init_vec2seq_params(seed: int, vocab_size: int, d_img: int, dim: int = 64,
                        h1: int = 64, h2: int = 16,
                        dtype=np.float32) -> Vec2seqParams:
    rng = np.random.default_rng(seed)
    v2 = vocab_size + 2
    t = {
        "emb": glorot_uniform(rng, v2, dim, (v2, dim), dtype),
        "img_w": glorot_uniform(rng, d_img, dim, (d_img, dim), dtype),
        "img_b": np.zeros(dim, dtype=dtype),
    }
    for prefix in GRU_PREFIXES:
        t.update(init_gru_params(rng, dim, dim, dtype, prefix=prefix))
    t["att_w"] = glorot_uniform(rng, 2 * dim, dim, (2 * dim, dim), dtype)
    t["att_b"] = np.zeros(dim, dtype=dtype)
    t["out_w"] = glorot_uniform(rng, dim, v2, (dim, v2), dtype)
    t["out_b"] = np.zeros(v2, dtype=dtype)
    t["cls_w1"] = glorot_uniform(rng, 2 * dim, h1, (2 * dim, h1), dtype)
    t["cls_b1"] = np.zeros(h1, dtype=dtype)
    t["cls_w2"] = glorot_uniform(rng, h1, h2, (h1, h2), dtype)
    t["cls_b2"] = np.zeros(h2, dtype=dtype)
    t["cls_w3"] = glorot_uniform(rng, h2, 2, (h2, 2), dtype)
    t["cls_b3"] = np.zeros(2, dtype=dtype)
    return Vec2seqParams(t)


@dataclass(frozen=True)
class LoweredInstance:
    """One instance reduced to raw model inputs."""

    image: np.ndarray
    candidates: tuple  # of (token-id tuple, label int)


def lower_instances(instances, corpus: PairedCorpus) -> list:
    lowered = []
    for inst in instances:
        cands = []
        for cand in inst.candidates:
            ids = candidate_token_ids(cand, corpus)
            if not ids:
                raise ValueError(f"candidate {cand.caption_id!r} has no tokens")
            cands.append((tuple(ids), int(cand.label)))
        image = np.asarray(corpus.image(inst.image_id).embedding)
        lowered.append(LoweredInstance(image, tuple(cands)))
    return lowered


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the forward pass of one candidate produces."""

    encoder_state: np.ndarray
    decoder_outputs: np.ndarray
    vocab_probs: np.ndarray
    attention: np.ndarray
    class_probs: np.ndarray


def _tensors(params) -> dict:
    return params.tensors if isinstance(params, Vec2seqParams) else params


def _pack_rows(t: dict, lowered):
    """Flatten candidates into padded id/mask matrices."""
    v2 = t["emb"].shape[0]
    go, eos = v2 - 2, v2 - 1
    rows = []
    for ii, inst in enumerate(lowered):
        for ids, label in inst.candidates:
            if len(ids) == 0:
                raise ValueError("cannot encode an empty caption")
            rows.append((ii, tuple(ids), int(label)))
    dtype = t["emb"].dtype
    n_rows = len(rows)
    lengths = np.array([len(ids) + 1 for _, ids, _ in rows], dtype=np.int64)
    max_t = int(lengths.max())
    ids_in = np.full((n_rows, max_t), eos, dtype=np.int64)
    ids_tgt = np.zeros((n_rows, max_t), dtype=np.int64)
    mask = np.zeros((n_rows, max_t), dtype=dtype)
    for s, (_, ids, _) in enumerate(rows):
        seq_in = (go,) + ids
        ids_in[s, :len(seq_in)] = seq_in
        ids_tgt[s, :len(seq_in)] = ids + (eos,)
        mask[s, :len(seq_in)] = 1.0
    images = np.stack([lowered[ii].image for ii, _, _ in rows]).astype(dtype)
    labels = np.array([lab for _, _, lab in rows], dtype=np.int64)
    inst_index = np.array([ii for ii, _, _ in rows], dtype=np.int64)
    return rows, images, labels, inst_index, ids_in, ids_tgt, mask, lengths


def _batch_forward(t: dict, lowered, keep_caches: bool):
    (rows, images, labels, inst_index,
     ids_in, ids_tgt, mask, lengths) = _pack_rows(t, lowered)
    dtype = t["emb"].dtype
    dim = t["img_w"].shape[1]
    n_rows, max_t = ids_in.shape
    zeros = np.zeros((n_rows, dim), dtype=dtype)

    enc_x = images @ t["img_w"] + t["img_b"]
    e1, cache_e1 = gru_forward(t, enc_x, zeros, prefix="enc1.")
    e2, cache_e2 = gru_forward(t, e1, zeros, prefix="enc2.")
    o_e = e2

    h1, h2 = e1, e2
    obars = np.zeros((n_rows, max_t, dim), dtype=dtype)
    gen_losses = np.zeros(n_rows, dtype=np.float64)
    step_caches = []
    for tt in range(max_t):
        m = mask[:, tt:tt + 1]
        x_t = t["emb"][ids_in[:, tt]]
        g1n, c1 = gru_forward(t, x_t, h1, prefix="dec1.")
        s1 = m * g1n + (1.0 - m) * h1
        g2n, c2 = gru_forward(t, s1, h2, prefix="dec2.")
        s2 = m * g2n + (1.0 - m) * h2
        combined = np.concatenate([s2, o_e], axis=1)
        a_t = combined @ t["att_w"] + t["att_b"]
        obar = np.tanh(a_t)
        logits = obar @ t["out_w"] + t["out_b"]
        losses, dlog = cross_entropy(logits, ids_tgt[:, tt])
        gen_losses += losses.astype(np.float64) * mask[:, tt].astype(np.float64)
        obars[:, tt] = obar
        if keep_caches:
            step_caches.append((c1, c2, combined, obar, dlog))
        h1, h2 = s1, s2

    gen_losses /= lengths.astype(np.float64)
    lengths_col = lengths.astype(dtype)[:, None]
    mean_obar = (obars * mask[..., None]).sum(axis=1) / lengths_col
    feats = np.concatenate([o_e, mean_obar], axis=1)
    a1 = feats @ t["cls_w1"] + t["cls_b1"]
    z1 = relu(a1)
    a2 = z1 @ t["cls_w2"] + t["cls_b2"]
    z2 = relu(a2)
    cls_logits = z2 @ t["cls_w3"] + t["cls_b3"]
    cls_losses, cls_dlog = cross_entropy(cls_logits, labels)

    return {
        "rows": rows, "images": images, "labels": labels,
        "inst_index": inst_index, "ids_in": ids_in, "mask": mask,
        "lengths_col": lengths_col, "enc_x": enc_x,
        "cache_e1": cache_e1, "cache_e2": cache_e2, "o_e": o_e,
        "step_caches": step_caches, "gen_losses": gen_losses,
        "feats": feats, "a1": a1, "z1": z1, "a2": a2, "z2": z2,
        "cls_logits": cls_logits, "cls_losses": cls_losses, "cls_dlog": cls_dlog,
        "n_instances": len(lowered),
    }


def loss_components(params, lowered, lambda_gen: float):
    """(total, classification term, generation term), forward pass only."""
    fwd = _batch_forward(_tensors(params), lowered, keep_caches=False)
    n = fwd["n_instances"]
    cls_term = float(fwd["cls_losses"].astype(np.float64).sum() / n)
    gen_term = float((fwd["gen_losses"] * (fwd["labels"] == 1)).sum() / n)
    return cls_term + lambda_gen * gen_term, cls_term, gen_term


def multitask_loss(params, instances, corpus: PairedCorpus,
                   lambda_gen: float) -> float:
    """The training objective over a batch of instances."""
    return loss_components(params, lower_instances(instances, corpus),
                           lambda_gen)[0]


def classification_loss(params, lowered) -> float:
    """The classification-only objective (the lambda_gen = 0 special case)."""
    return loss_components(params, lowered, 0.0)[1]


def vec2seq_loss_and_grads(params, lowered, lambda_gen: float):
    """Objective and gradients for every tensor over a batch of instances."""
    t = _tensors(params)
    dtype = t["emb"].dtype
    dim = t["img_w"].shape[1]
    fwd = _batch_forward(t, lowered, keep_caches=True)
    n = fwd["n_instances"]
    labels, mask = fwd["labels"], fwd["mask"]
    n_rows, max_t = fwd["ids_in"].shape

    cls_term = float(fwd["cls_losses"].astype(np.float64).sum() / n)
    gen_term = float((fwd["gen_losses"] * (labels == 1)).sum() / n)
    loss = cls_term + lambda_gen * gen_term

    w_cls = np.full(n_rows, 1.0 / n, dtype=dtype)
    row_lengths = fwd["lengths_col"][:, 0].astype(np.float64)
    w_gen = (np.where(labels == 1, lambda_gen / n, 0.0) / row_lengths).astype(dtype)

    grads = {name: np.zeros_like(p) for name, p in t.items()}

    # classification head
    dcls = fwd["cls_dlog"] * w_cls[:, None]
    grads["cls_w3"] += fwd["z2"].T @ dcls
    grads["cls_b3"] += dcls.sum(axis=0)
    dz2 = dcls @ t["cls_w3"].T
    da2 = dz2 * (fwd["a2"] > 0)
    grads["cls_w2"] += fwd["z1"].T @ da2
    grads["cls_b2"] += da2.sum(axis=0)
    dz1 = da2 @ t["cls_w2"].T
    da1 = dz1 * (fwd["a1"] > 0)
    grads["cls_w1"] += fwd["feats"].T @ da1
    grads["cls_b1"] += da1.sum(axis=0)
    dfeats = da1 @ t["cls_w1"].T
    d_oe = dfeats[:, :dim].copy()
    d_mean = dfeats[:, dim:]

    dh1_next = np.zeros((n_rows, dim), dtype=dtype)
    dh2_next = np.zeros((n_rows, dim), dtype=dtype)
    for tt in reversed(range(max_t)):
        c1, c2, combined, obar, dlog = fwd["step_caches"][tt]
        m = mask[:, tt:tt + 1]
        dobar = d_mean * (m / fwd["lengths_col"])
        dlogits = dlog * (w_gen * mask[:, tt])[:, None]
        grads["out_w"] += obar.T @ dlogits
        grads["out_b"] += dlogits.sum(axis=0)
        dobar += dlogits @ t["out_w"].T
        da_t = dobar * (1.0 - obar * obar)
        grads["att_w"] += combined.T @ da_t
        grads["att_b"] += da_t.sum(axis=0)
        dcombined = da_t @ t["att_w"].T
        ds2 = dcombined[:, :dim] + dh2_next
        d_oe += dcombined[:, dim:]
        dg2n = ds2 * m
        dx2, dh2_in = gru_backward(t, c2, dg2n, grads, prefix="dec2.")
        dh2_next = ds2 * (1.0 - m) + dh2_in
        ds1 = dx2 + dh1_next
        dg1n = ds1 * m
        dx1, dh1_in = gru_backward(t, c1, dg1n, grads, prefix="dec1.")
        dh1_next = ds1 * (1.0 - m) + dh1_in
        np.add.at(grads["emb"], fwd["ids_in"][:, tt], dx1)

    d_e2 = d_oe + dh2_next
    dx_e2, _ = gru_backward(t, fwd["cache_e2"], d_e2, grads, prefix="enc2.")
    d_e1 = dx_e2 + dh1_next
    dx_e1, _ = gru_backward(t, fwd["cache_e1"], d_e1, grads, prefix="enc1.")
    grads["img_w"] += fwd["images"].T @ dx_e1
    grads["img_b"] += dx_e1.sum(axis=0)
    return loss, grads


def vec2seq_forward(params, image, token_ids) -> ForwardTrace:
    """Trace of one candidate: encoder state, per-position decoder outputs and
    vocabulary distributions, the (degenerate) attention weights, and the
    two-class probabilities."""
    t = _tensors(params)
    ids = tuple(token_ids)
    if not ids:
        raise ValueError("cannot encode an empty caption")
    lowered = [LoweredInstance(np.asarray(image), (((ids), 1),))]
    fwd = _batch_forward(t, lowered, keep_caches=True)
    obars = np.stack([cache[3][0] for cache in fwd["step_caches"]])
    logits = obars @ t["out_w"] + t["out_b"]
    return ForwardTrace(
        encoder_state=fwd["o_e"][0],
        decoder_outputs=obars,
        vocab_probs=softmax(logits),
        attention=np.ones((len(ids) + 1, 1), dtype=t["emb"].dtype),
        class_probs=softmax(fwd["cls_logits"])[0],
    )


def predict_batch(params, lowered) -> np.ndarray:
    """Chosen candidate index per lowered instance (ties → lowest index)."""
    t = _tensors(params)
    fwd = _batch_forward(t, lowered, keep_caches=False)
    yes = softmax(fwd["cls_logits"])[:, 1]
    choices = []
    cursor = 0
    for inst in lowered:
        k = len(inst.candidates)
        choices.append(int(np.argmax(yes[cursor:cursor + k])))
        cursor += k
    return np.array(choices, dtype=np.int64)


def generate_caption(params, image, max_len: int = 30) -> list:
    """Greedy decode from the encoder state; stops at the end id or max_len."""
    t = _tensors(params)
    p = params if isinstance(params, Vec2seqParams) else Vec2seqParams(params)
    dtype = t["emb"].dtype
    dim = p.dim
    image = np.asarray(image, dtype=dtype)[None, :]
    zeros = np.zeros((1, dim), dtype=dtype)
    enc_x = image @ t["img_w"] + t["img_b"]
    e1, _ = gru_forward(t, enc_x, zeros, prefix="enc1.")
    e2, _ = gru_forward(t, e1, zeros, prefix="enc2.")
    o_e = e2

    h1, h2 = e1, e2
    token = p.go_id
    out = []
    for _ in range(max_len):
        x = t["emb"][np.array([token])]
        h1, _ = gru_forward(t, x, h1, prefix="dec1.")
        h2, _ = gru_forward(t, h1, h2, prefix="dec2.")
        combined = np.concatenate([h2, o_e], axis=1)
        obar = np.tanh(combined @ t["att_w"] + t["att_b"])
        logits = (obar @ t["out_w"] + t["out_b"])[0]
        token = int(np.argmax(logits))
        if token == p.eos_id:
            break
        out.append(token)
    return out


def _dev_metrics(params, dev_lowered, dev_instances, corpus):
    predictions = predict_batch(params, dev_lowered)
    acc = float(np.mean([p == inst.target_index
                         for p, inst in zip(predictions, dev_instances)]))
    image_ids = sorted({inst.image_id for inst in dev_instances})
    hyps = {iid: tuple(generate_caption(params, corpus.image(iid).embedding))
            for iid in image_ids}
    refs = {iid: [corpus.caption(cid).tokens
                  for cid in corpus.image_to_captions[iid]]
            for iid in image_ids}
    rouge = corpus_rouge_l(hyps, refs)
    cid = cider(hyps, refs) if len(refs) >= 2 else None
    return acc, rouge, cid


def vec2seq_train(instances, corpus: PairedCorpus, cfg: TrainConfig,
                  dim: int = 64, h1: int = 64, h2: int = 16):
    """Train on the train split; the best dev-accuracy checkpoint wins.

    Returns (best Vec2seqParams, list of TrainLogRow), with dev rouge/cider
    logged at every evaluation point.
    """
    splits = by_split(instances)
    train, dev = splits.get("train", []), splits.get("dev", [])
    if not train:
        raise ValueError("training requires a non-empty train split")
    if not dev:
        raise ValueError("training requires a non-empty dev split for selection")

    params = init_vec2seq_params(cfg.seed, len(corpus.vocab), corpus.d_img,
                                 dim=dim, h1=h1, h2=h2)
    opt = Adagrad(params.tensors, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    train_lowered = lower_instances(train, corpus)
    dev_lowered = lower_instances(dev, corpus)

    order = rng.permutation(len(train_lowered))
    cursor = 0
    best = None
    rows = []
    running, running_n = 0.0, 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= len(order):
            order = rng.permutation(len(train_lowered))
            cursor = 0
        batch = [train_lowered[i] for i in order[cursor:cursor + cfg.batch_size]]
        cursor += cfg.batch_size
        loss, grads = vec2seq_loss_and_grads(params, batch, cfg.lambda_gen)
        clip_global_norm(grads, cfg.clip_norm)
        opt.step(params.tensors, grads)
        running += loss
        running_n += 1

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            dev_loss = loss_components(params, dev_lowered, cfg.lambda_gen)[0]
            acc, rouge, cid = _dev_metrics(params, dev_lowered, dev, corpus)
            rows.append(TrainLogRow(step, "train", loss=running / running_n))
            rows.append(TrainLogRow(step, "dev", loss=dev_loss, accuracy=acc,
                                    rouge_l=rouge, cider=cid))
            running, running_n = 0.0, 0
            if best is None or acc > best[0]:
                best = (acc, params.copy())
    return best[1], rows


class EncDecClassifier(BaseEstimator):
    """Estimator facade over vec2seq_train / predict_batch."""

    def __init__(self, dim: int = 64, h1: int = 64, h2: int = 16,
                 lr: float = 0.01, clip_norm: float = 4.0, batch_size: int = 20,
                 max_steps: int = 2000, seed: int = 0, lambda_gen: float = 0.0,
                 eval_every: int = 200):
        self.dim = dim
        self.h1 = h1
        self.h2 = h2
        self.lr = lr
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.seed = seed
        self.lambda_gen = lambda_gen
        self.eval_every = eval_every

    def _config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, clip_norm=self.clip_norm,
                           batch_size=self.batch_size, max_steps=self.max_steps,
                           seed=self.seed, lambda_gen=self.lambda_gen,
                           eval_every=self.eval_every)

    def fit(self, instances, corpus: PairedCorpus):
        self.params_, self.log_ = vec2seq_train(instances, corpus, self._config(),
                                                dim=self.dim, h1=self.h1, h2=self.h2)
        self.corpus_ = corpus
        return self

    def predict(self, instances) -> np.ndarray:
        return predict_batch(self.params_, lower_instances(instances, self.corpus_))

    def score(self, instances) -> float:
        predictions = self.predict(instances)
        return float(np.mean([p == inst.target_index
                              for p, inst in zip(predictions, instances)]))

    def generate(self, image_embedding, max_len: int = 30) -> list:
        return generate_caption(self.params_, image_embedding, max_len=max_len)


def save_vec2seq(params: Vec2seqParams, path) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, CHECKPOINT_MAGIC, FORMAT_VERSION)
        binio.write_named_tensors(fh, params.tensors)


def load_vec2seq(path) -> Vec2seqParams:
    with open(path, "rb") as fh:
        version = binio.read_header(fh, CHECKPOINT_MAGIC, path)
        if version != FORMAT_VERSION:
            raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
        tensors = binio.read_named_tensors(fh, path)
    return Vec2seqParams(tensors)
