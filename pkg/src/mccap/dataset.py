"""Adversarial multiple-choice instances: mining, splitting, serialization.

For every (image, caption) pair, the miner pulls the caption's top cosine
neighbors from other images, scores each as a decoy, keeps the positive ones,
and emits an instance only when enough survive. Decoys are stored
score-descending with the true caption appended last; consumers that present
instances to people shuffle at presentation time, never here, so the files
stay diffable.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .corpus import PairedCorpus
from .pvembed import PVModel
from .scoring import ScoreParams, bleu_surface, combine
from .simsearch import CosineIndex

SPLITS = ("train", "dev", "test")


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno, reason):
        self.path = str(path)
        self.lineno = lineno
        self.reason = reason
        super().__init__(f"{path}: line {lineno}: {reason}")


@dataclass(frozen=True)
class Candidate:
    """One choice shown for an instance; the target carries no decoy score."""

    caption_id: str
    text: str
    label: bool
    decoy_score: float | None = None

    def __post_init__(self):
        if self.label and self.decoy_score is not None:
            raise ValueError(f"target candidate {self.caption_id!r} must not "
                             f"carry a decoy score")
        if not self.label:
            if self.decoy_score is None or not self.decoy_score > 0:
                raise ValueError(f"decoy {self.caption_id!r} needs a positive "
                                 f"decoy score")


@dataclass(frozen=True)
class Instance:
    """One image with its decoys plus the single true caption (stored last)."""

    instance_id: str
    image_id: str
    candidates: tuple
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"instance {self.instance_id!r}: unknown split "
                             f"{self.split!r}")
        labels = [c.label for c in self.candidates]
        if labels.count(True) != 1:
            raise ValueError(f"instance {self.instance_id!r}: exactly one "
                             f"candidate must be the target")
        decoys = [c for c in self.candidates if not c.label]
        for d in decoys:
            if d.caption_id == self.target.caption_id:
                raise ValueError(f"instance {self.instance_id!r}: target appears "
                                 f"among its own decoys")
        for a, b in zip(decoys, decoys[1:]):
            if a.decoy_score < b.decoy_score or (
                    a.decoy_score == b.decoy_score and a.caption_id > b.caption_id):
                raise ValueError(f"instance {self.instance_id!r}: decoys out of "
                                 f"score order at {b.caption_id!r}")

    @property
    def target(self) -> Candidate:
        return next(c for c in self.candidates if c.label)

    @property
    def target_index(self) -> int:
        return next(i for i, c in enumerate(self.candidates) if c.label)


@dataclass(frozen=True)
class SplitSpec:
    dev_image_count: int
    test_image_count: int
    seed: int = 0

    def __post_init__(self):
        if self.dev_image_count < 0 or self.test_image_count < 0:
            raise ValueError("split counts must be non-negative")


def generate_mcic(corpus: PairedCorpus, pv: PVModel, params: ScoreParams,
                  n_threads: int = 1) -> list[Instance]:
    """Mine one instance per (image, caption) pair that clears the decoy bar.

    Per pair: top-N cosine neighbors from other images, each scored as a
    decoy against the pair's caption; positive-score survivors are sorted by
    descending score (ties by ascending caption_id) and the best nr_decoys
    become the instance, target last. Pairs with fewer survivors emit
    nothing. Output is sorted by (image_id, target caption_id) so results do
    not depend on thread count.
    """
    index = CosineIndex(pv, corpus)

    def mine(cap):
        neighbors = index.query(cap.caption_id, params.top_n,
                                exclude_same_image=True)
        scored = []
        for cid, sim in neighbors.entries:
            surface = bleu_surface(corpus.caption(cid).tokens, cap.tokens)
            value = combine(sim, surface, params.blend_lambda, params.threshold)
            if value > 0.0:
                scored.append((cid, value))
        if len(scored) < params.nr_decoys:
            return None
        scored.sort(key=lambda pair: (-pair[1], pair[0]))
        decoys = [Candidate(caption_id=cid, text=corpus.caption(cid).raw_text,
                            label=False, decoy_score=value)
                  for cid, value in scored[:params.nr_decoys]]
        target = Candidate(caption_id=cap.caption_id, text=cap.raw_text, label=True)
        return Instance(instance_id=cap.caption_id, image_id=cap.image_id,
                        candidates=tuple(decoys + [target]))

    if n_threads == 1:
        mined = [mine(cap) for cap in corpus.captions]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            mined = list(pool.map(mine, corpus.captions))
    instances = [inst for inst in mined if inst is not None]
    instances.sort(key=lambda inst: (inst.image_id, inst.instance_id))
    return instances


def split_dataset(instances, spec: SplitSpec) -> list[Instance]:
    """Assign whole images to dev/test/train by a seeded shuffle.

    Images are shuffled deterministically; the first dev_image_count become
    dev, the next test_image_count become test, the rest train. Every
    instance of an image lands in that image's split.
    """
    image_ids = sorted({inst.image_id for inst in instances})
    if spec.dev_image_count + spec.test_image_count >= len(image_ids):
        raise ValueError(f"split infeasible: dev {spec.dev_image_count} + test "
                         f"{spec.test_image_count} must leave at least one of "
                         f"{len(image_ids)} images for train")
    rng = np.random.default_rng(spec.seed)
    shuffled = [image_ids[i] for i in rng.permutation(len(image_ids))]
    assignment = {}
    for pos, iid in enumerate(shuffled):
        if pos < spec.dev_image_count:
            assignment[iid] = "dev"
        elif pos < spec.dev_image_count + spec.test_image_count:
            assignment[iid] = "test"
        else:
            assignment[iid] = "train"
    return [replace(inst, split=assignment[inst.image_id]) for inst in instances]


def by_split(instances) -> dict:
    out = {name: [] for name in SPLITS}
    for inst in instances:
        out[inst.split].append(inst)
    return out


def write_dataset(instances, path) -> None:
    """JSON-lines, one instance per line, decoy order and scores preserved."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            cands = []
            for c in inst.candidates:
                obj = {"caption_id": c.caption_id, "text": c.text, "label": c.label}
                if c.decoy_score is not None:
                    obj["decoy_score"] = c.decoy_score
                cands.append(obj)
            fh.write(json.dumps({"instance_id": inst.instance_id,
                                 "image_id": inst.image_id,
                                 "split": inst.split,
                                 "candidates": cands}, ensure_ascii=False) + "\n")


def read_dataset(path) -> list[Instance]:
    instances = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(path, lineno, f"invalid JSON ({exc.msg})") from exc
            try:
                candidates = tuple(
                    Candidate(caption_id=c["caption_id"], text=c["text"],
                              label=c["label"], decoy_score=c.get("decoy_score"))
                    for c in obj["candidates"])
                instances.append(Instance(instance_id=obj["instance_id"],
                                          image_id=obj["image_id"],
                                          candidates=candidates,
                                          split=obj["split"]))
            except (KeyError, TypeError) as exc:
                raise DatasetFormatError(path, lineno, f"missing field {exc}") from exc
            except ValueError as exc:
                raise DatasetFormatError(path, lineno, str(exc)) from exc
    return instances
