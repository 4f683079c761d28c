"""Linear comprehension baselines over random-projected embeddings.

Three rungs of the ladder: regress image→caption (I2C), regress
caption→image (C2I), and learn a bilinear compatibility matrix with a
max-margin hinge. All three operate in fixed random projections of the image
and caption embedding spaces, so model sizes stay independent of the
upstream encoders.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import binio
from .corpus import PairedCorpus
from .pvembed import PVModel

LINEAR_MAGIC = b"LMAP"
BILINEAR_MAGIC = b"BLIN"
FORMAT_VERSION = 1

DIRECTIONS = ("i2c", "c2i")


class ProjectionPair:
    """Frozen Gaussian projections of the image and caption spaces.

    Entries are i.i.d. normal with standard deviation 1/sqrt(out_dim), which
    preserves expected squared norms under projection.
    """

    def __init__(self, seed: int, d_img: int, d_pv: int, out_dim: int = 256):
        self.seed = seed
        self.out_dim = out_dim
        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(out_dim)
        self.image_matrix = rng.normal(0.0, scale, size=(d_img, out_dim))
        self.caption_matrix = rng.normal(0.0, scale, size=(d_pv, out_dim))

    def project_images(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.image_matrix

    def project_captions(self, vectors) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.caption_matrix


def make_projections(seed: int, d_img: int, d_pv: int, out_dim: int = 256) -> ProjectionPair:
    return ProjectionPair(seed, d_img, d_pv, out_dim=out_dim)


class LinearMapBaseline(BaseEstimator):
    """Closed-form ridge regression between the projected spaces (no intercept)."""

    def __init__(self, direction: str = "i2c", ridge: float = 1e-3):
        self.direction = direction
        self.ridge = ridge

    def fit(self, inputs, targets):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")
        x = np.asarray(inputs, dtype=np.float64)
        y = np.asarray(targets, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ValueError(f"incompatible training shapes {x.shape} and {y.shape}")
        gram = x.T @ x + self.ridge * np.eye(x.shape[1])
        self.weights_ = np.linalg.solve(gram, x.T @ y)
        return self

    def predict(self, inputs) -> np.ndarray:
        return np.asarray(inputs, dtype=np.float64) @ self.weights_


def fit_linear_map(inputs, targets, ridge: float = 1e-3,
                   direction: str = "i2c") -> LinearMapBaseline:
    return LinearMapBaseline(direction=direction, ridge=ridge).fit(inputs, targets)


@dataclass(frozen=True)
class BilinearConfig:
    lr: float = 0.01
    epochs: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1:
            raise ValueError("lr must be positive and epochs >= 1")


class InstanceArrays:
    """Instances lowered to aligned arrays in the projected spaces.

    images: (n, out_dim); candidates: (n, k, out_dim); target_idx: (n,).
    """

    def __init__(self, images, candidates, target_idx):
        self.images = np.asarray(images, dtype=np.float64)
        self.candidates = np.asarray(candidates, dtype=np.float64)
        self.target_idx = np.asarray(target_idx, dtype=np.int64)
        if len(self.images) != len(self.candidates) or len(self.images) != len(self.target_idx):
            raise ValueError("instance arrays disagree on length")

    def __len__(self):
        return len(self.images)


def project_instances(instances, corpus: PairedCorpus, pv: PVModel,
                      projections: ProjectionPair) -> InstanceArrays:
    """Lower instances to projected arrays for the linear baselines."""
    if not instances:
        raise ValueError("no instances to project")
    counts = {len(inst.candidates) for inst in instances}
    if len(counts) != 1:
        raise ValueError(f"instances disagree on candidate count: {sorted(counts)}")
    images = projections.project_images(
        np.stack([corpus.image(inst.image_id).embedding for inst in instances]))
    flat = [pv.vector(c.caption_id) for inst in instances for c in inst.candidates]
    k = counts.pop()
    cands = projections.project_captions(np.stack(flat)).reshape(len(instances), k, -1)
    target_idx = [inst.target_index for inst in instances]
    return InstanceArrays(images, cands, target_idx)


def _nearest_cosine(predicted, pool) -> int:
    """Index of the pool row nearest to predicted; ties go to the lowest index."""
    p = predicted / max(np.linalg.norm(predicted), 1e-300)
    rows = pool / np.maximum(np.linalg.norm(pool, axis=1, keepdims=True), 1e-300)
    return int(np.argmax(rows @ p))


def predict_i2c(lin: LinearMapBaseline, arrays: InstanceArrays) -> np.ndarray:
    """Chosen candidate index per instance under the image→caption regressor."""
    if lin.direction != "i2c":
        raise ValueError(f"expected an i2c map, got {lin.direction!r}")
    predicted = lin.predict(arrays.images)
    return np.array([_nearest_cosine(predicted[i], arrays.candidates[i])
                     for i in range(len(arrays))], dtype=np.int64)


def predict_c2i(lin: LinearMapBaseline, arrays: InstanceArrays) -> np.ndarray:
    """Chosen candidate index per instance under the caption→image regressor."""
    if lin.direction != "c2i":
        raise ValueError(f"expected a c2i map, got {lin.direction!r}")
    choices = []
    for i in range(len(arrays)):
        predicted_images = lin.predict(arrays.candidates[i])
        choices.append(_nearest_cosine(arrays.images[i], predicted_images))
    return np.array(choices, dtype=np.int64)


def eval_i2c_arrays(lin: LinearMapBaseline, arrays: InstanceArrays) -> float:
    return float(np.mean(predict_i2c(lin, arrays) == arrays.target_idx))


def eval_c2i_arrays(lin: LinearMapBaseline, arrays: InstanceArrays) -> float:
    return float(np.mean(predict_c2i(lin, arrays) == arrays.target_idx))


def eval_i2c(lin: LinearMapBaseline, projections: ProjectionPair, instances,
             corpus: PairedCorpus, pv: PVModel) -> float:
    return eval_i2c_arrays(lin, project_instances(instances, corpus, pv, projections))


def eval_c2i(lin: LinearMapBaseline, projections: ProjectionPair, instances,
             corpus: PairedCorpus, pv: PVModel) -> float:
    return eval_c2i_arrays(lin, project_instances(instances, corpus, pv, projections))


class BilinearClassifier(BaseEstimator):
    """Max-margin bilinear compatibility between projected image and caption.

    The score of a candidate is image^T theta caption. Training takes one
    subgradient step per violated instance: the worst offending decoy (the
    lowest-index one on ties) is pushed down and the target pushed up. The
    margin is counted as violated at exact equality too, otherwise a
    zero-initialized model would never move. After each epoch the model is
    scored on the dev set and the best epoch wins (earliest on ties).
    """

    def __init__(self, lr: float = 0.01, epochs: int = 20, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.seed = seed

    def fit(self, train: InstanceArrays, dev: InstanceArrays | None = None):
        BilinearConfig(lr=self.lr, epochs=self.epochs, seed=self.seed)
        if len(train) == 0:
            raise ValueError("empty training set")
        dim_img = train.images.shape[1]
        dim_cap = train.candidates.shape[2]
        theta = np.zeros((dim_img, dim_cap))
        rng = np.random.default_rng(self.seed)

        best = None
        history = []
        for epoch in range(self.epochs):
            for i in rng.permutation(len(train)):
                img = train.images[i]
                cands = train.candidates[i]
                target = int(train.target_idx[i])
                others = [j for j in range(len(cands)) if j != target]
                if not others:
                    continue
                scores = cands @ (theta.T @ img)
                offender = max(others, key=lambda j: (scores[j], -j))
                if scores[offender] - scores[target] >= 0.0:
                    theta -= self.lr * np.outer(img, cands[offender] - cands[target])
            dev_acc = (self._accuracy(theta, dev) if dev is not None and len(dev)
                       else self._accuracy(theta, train))
            history.append(dev_acc)
            if best is None or dev_acc > best[0]:
                best = (dev_acc, theta.copy())
        self.theta_ = best[1]
        self.dev_accuracy_ = best[0]
        self.epoch_accuracies_ = history
        return self

    @staticmethod
    def _accuracy(theta, arrays: InstanceArrays) -> float:
        correct = 0
        for i in range(len(arrays)):
            scores = arrays.candidates[i] @ (theta.T @ arrays.images[i])
            if int(np.argmax(scores)) == int(arrays.target_idx[i]):
                correct += 1
        return correct / len(arrays)

    def predict(self, arrays: InstanceArrays) -> np.ndarray:
        choices = [int(np.argmax(arrays.candidates[i] @ (self.theta_.T @ arrays.images[i])))
                   for i in range(len(arrays))]
        return np.array(choices, dtype=np.int64)


def train_bilinear(train_instances, dev_instances, projections: ProjectionPair,
                   corpus: PairedCorpus, pv: PVModel,
                   cfg: BilinearConfig = BilinearConfig()) -> BilinearClassifier:
    model = BilinearClassifier(lr=cfg.lr, epochs=cfg.epochs, seed=cfg.seed)
    train = project_instances(train_instances, corpus, pv, projections)
    dev = (project_instances(dev_instances, corpus, pv, projections)
           if dev_instances else None)
    return model.fit(train, dev)


def eval_bilinear(model: BilinearClassifier, projections: ProjectionPair, instances,
                  corpus: PairedCorpus, pv: PVModel) -> float:
    return eval_bilinear_arrays(model, project_instances(instances, corpus, pv, projections))


def eval_bilinear_arrays(model: BilinearClassifier, arrays: InstanceArrays) -> float:
    return float(np.mean(model.predict(arrays) == arrays.target_idx))


def hinge_loss(theta, arrays: InstanceArrays) -> float:
    """Summed margin violations; zero iff every target beats all its decoys."""
    total = 0.0
    for i in range(len(arrays)):
        target = int(arrays.target_idx[i])
        if len(arrays.candidates[i]) == 1:
            continue
        scores = arrays.candidates[i] @ (theta.T @ arrays.images[i])
        worst = max(s for j, s in enumerate(scores) if j != target)
        total += max(0.0, float(worst - scores[target]))
    return total


def save_linear_map(lin: LinearMapBaseline, path) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, LINEAR_MAGIC, FORMAT_VERSION)
        binio.write_string(fh, lin.direction)
        binio.write_f64(fh, lin.ridge)
        binio.write_u32(fh, lin.weights_.shape[0])
        binio.write_u32(fh, lin.weights_.shape[1])
        binio.write_f32_array(fh, lin.weights_)


def load_linear_map(path) -> LinearMapBaseline:
    with open(path, "rb") as fh:
        version = binio.read_header(fh, LINEAR_MAGIC, path)
        if version != FORMAT_VERSION:
            raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
        direction = binio.read_string(fh, path)
        ridge = binio.read_f64(fh, path)
        rows = binio.read_u32(fh, path)
        cols = binio.read_u32(fh, path)
        weights = binio.read_f32_array(fh, rows * cols, path).reshape(rows, cols)
    lin = LinearMapBaseline(direction=direction, ridge=ridge)
    lin.weights_ = weights.astype(np.float64)
    return lin


def save_bilinear(model: BilinearClassifier, path) -> None:
    with open(path, "wb") as fh:
        binio.write_header(fh, BILINEAR_MAGIC, FORMAT_VERSION)
        binio.write_u32(fh, model.theta_.shape[0])
        binio.write_u32(fh, model.theta_.shape[1])
        binio.write_f32_array(fh, model.theta_)


def load_bilinear(path) -> BilinearClassifier:
    with open(path, "rb") as fh:
        version = binio.read_header(fh, BILINEAR_MAGIC, path)
        if version != FORMAT_VERSION:
            raise binio.BinaryFormatError(f"{path}: unsupported version {version}")
        rows = binio.read_u32(fh, path)
        cols = binio.read_u32(fh, path)
        theta = binio.read_f32_array(fh, rows * cols, path).reshape(rows, cols)
    model = BilinearClassifier()
    model.theta_ = theta.astype(np.float64)
    return model


def training_pairs(instances, corpus: PairedCorpus, pv: PVModel,
                   projections: ProjectionPair, direction: str):
    """(inputs, targets) regression pairs from instances' true candidates."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    images = projections.project_images(
        np.stack([corpus.image(inst.image_id).embedding for inst in instances]))
    captions = projections.project_captions(
        np.stack([pv.vector(inst.target.caption_id) for inst in instances]))
    if direction == "i2c":
        return images, captions
    return captions, images
