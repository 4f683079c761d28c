"""Exact top-N cosine retrieval over caption embeddings.

Decoy mining needs correct neighborhoods, not approximate ones, so this is a
full scan: one blocked matrix product per query set, 64-bit accumulation over
the 32-bit stored vectors, and an explicit tie rule (equal similarity orders
by ascending caption_id) so results are reproducible everywhere.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .corpus import PairedCorpus
from .pvembed import PVModel
from .validation import check_positive_int, check_vector


class SimSearchError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborList:
    """Query result: (caption_id, cosine similarity) pairs, best first."""

    query_id: str
    entries: tuple
    n: int


def cosine(u, v) -> float:
    """Cosine similarity with 64-bit accumulation; zero-norm inputs are errors."""
    u = check_vector(u, "u")
    v = check_vector(v, "v", dim=u.shape[0])
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero-norm input")
    return float(u @ v / (nu * nv))


class CosineIndex:
    """Read-only search structure shared by every query against one model.

    Precomputes unit-normalized 64-bit rows once so repeated queries cost one
    matrix-vector product each. Safe for concurrent use after construction.
    """

    def __init__(self, model: PVModel, corpus: PairedCorpus):
        doc = model.doc_vectors.astype(np.float64)
        norms = np.linalg.norm(doc, axis=1)
        if np.any(norms == 0.0):
            bad = model.caption_ids[int(np.flatnonzero(norms == 0.0)[0])]
            raise SimSearchError(f"zero-norm doc vector for caption {bad!r}")
        self._unit = doc / norms[:, None]
        self._ids = np.array(model.caption_ids)
        self._images = np.array([corpus.caption(cid).image_id
                                 for cid in model.caption_ids])
        self._row = {cid: i for i, cid in enumerate(model.caption_ids)}

    def query(self, caption_id: str, n: int, exclude_same_image: bool = True) -> NeighborList:
        check_positive_int(n, "n")
        try:
            row = self._row[caption_id]
        except KeyError:
            raise SimSearchError(f"unknown caption_id {caption_id!r}") from None

        sims = self._unit @ self._unit[row]
        mask = np.ones(sims.shape[0], dtype=bool)
        mask[row] = False
        if exclude_same_image:
            mask &= self._images != self._images[row]
        allowed = np.flatnonzero(mask)

        if allowed.size > n:
            pool = sims[allowed]
            top = np.argpartition(-pool, n - 1)[:n]
            threshold = pool[top].min()
            allowed = allowed[pool >= threshold]
        order = sorted(allowed, key=lambda k: (-sims[k], self._ids[k]))[:n]
        entries = tuple((str(self._ids[k]), float(sims[k])) for k in order)
        return NeighborList(query_id=caption_id, entries=entries, n=n)


def top_n(model: PVModel, corpus: PairedCorpus, caption_id: str, n: int,
          exclude_same_image: bool = True) -> NeighborList:
    """The N highest-cosine captions from other images (ties by caption_id).

    Convenience wrapper that builds a fresh index; use CosineIndex or
    batch_top_n when issuing many queries.
    """
    return CosineIndex(model, corpus).query(caption_id, n,
                                            exclude_same_image=exclude_same_image)


def batch_top_n(model: PVModel, corpus: PairedCorpus, caption_ids, n: int,
                n_threads: int = 1, exclude_same_image: bool = True) -> list:
    """Sequential-equivalent batched queries, optionally thread-parallel.

    Results are returned in query order and are identical for any thread
    count; the first failing query aborts the batch with its id attached.
    """
    caption_ids = list(caption_ids)
    if not caption_ids:
        return []
    check_positive_int(n_threads, "n_threads")
    index = CosineIndex(model, corpus)

    def run(cid):
        try:
            return index.query(cid, n, exclude_same_image=exclude_same_image)
        except SimSearchError:
            raise
        except Exception as exc:
            raise SimSearchError(f"query {cid!r}: {exc}") from exc

    if n_threads == 1:
        return [run(cid) for cid in caption_ids]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(run, caption_ids))
