"""Decoy scoring: surface similarity, the combined score, and the λ search.

A decoy should read like the ground truth without being a paraphrase of it.
The combined score therefore blends embedding cosine with n-gram surface
similarity, and zeroes out any candidate whose surface similarity crosses the
"too similar" threshold.
"""

import csv
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .corpus import PairedCorpus
from .pvembed import PVModel
from .simsearch import CosineIndex

DEFAULT_LAMBDA = 0.3
DEFAULT_THRESHOLD = 0.5
DEFAULT_TOP_N = 500
DEFAULT_NR_DECOYS = 4


@dataclass(frozen=True)
class ScoreParams:
    blend_lambda: float = DEFAULT_LAMBDA
    threshold: float = DEFAULT_THRESHOLD
    top_n: int = DEFAULT_TOP_N
    nr_decoys: int = DEFAULT_NR_DECOYS

    def __post_init__(self):
        if not 0.0 <= self.blend_lambda <= 1.0:
            raise ValueError("blend_lambda must lie in [0, 1]")
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must lie in (0, 1]")
        if self.nr_decoys < 1:
            raise ValueError("nr_decoys must be >= 1")
        if self.top_n < self.nr_decoys:
            raise ValueError("top_n must be >= nr_decoys")


def _ngram_counts(tokens, order):
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def bleu_surface(candidate, reference) -> float:
    """Single-reference BLEU with the brevity penalty fixed to 1.

    Geometric mean of clipped n-gram precisions for n = 1..min(4, candidate
    length), unsmoothed: any included order with zero matches gives 0, as
    does an empty candidate.
    """
    candidate = list(candidate)
    reference = list(reference)
    if not candidate:
        return 0.0
    max_order = min(4, len(candidate))
    log_sum = 0.0
    for order in range(1, max_order + 1):
        cand_counts = _ngram_counts(candidate, order)
        ref_counts = _ngram_counts(reference, order)
        matched = sum(min(count, ref_counts[gram])
                      for gram, count in cand_counts.items())
        if matched == 0:
            return 0.0
        log_sum += np.log(matched / sum(cand_counts.values()))
    return float(np.exp(log_sum / max_order))


def score(pv: PVModel, params: ScoreParams, corpus: PairedCorpus,
          candidate_id: str, groundtruth_id: str) -> float:
    """Decoy quality of candidate against one ground-truth caption.

    Zero when the candidate's surface similarity reaches the threshold;
    otherwise the λ-blend of embedding cosine and surface similarity.
    """
    candidate = corpus.caption(candidate_id)
    groundtruth = corpus.caption(groundtruth_id)
    surface = bleu_surface(candidate.tokens, groundtruth.tokens)
    if surface >= params.threshold:
        return 0.0
    u = pv.vector(candidate_id).astype(np.float64)
    v = pv.vector(groundtruth_id).astype(np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine undefined for zero-norm doc vector")
    sim_pv = float(u @ v / (nu * nv))
    return params.blend_lambda * sim_pv + (1.0 - params.blend_lambda) * surface


def combine(sim_pv, surface, blend_lambda, threshold):
    """The combined score on precomputed similarity components."""
    if surface >= threshold:
        return 0.0
    return blend_lambda * sim_pv + (1.0 - blend_lambda) * surface


def _neighbor_stats(pv: PVModel, corpus: PairedCorpus, top_n: int):
    """Per caption: its inclusive top-N neighbor list with (id, cosine, surface).

    Siblings stay in the pool here (unlike decoy mining) because their rank
    inside the neighborhood is the quantity being measured.
    """
    index = CosineIndex(pv, corpus)
    stats = {}
    for cap in corpus.captions:
        neighbors = index.query(cap.caption_id, top_n, exclude_same_image=False)
        rows = [(cid, sim, bleu_surface(corpus.caption(cid).tokens, cap.tokens))
                for cid, sim in neighbors.entries]
        stats[cap.caption_id] = rows
    return stats


def _ranks_from_stats(rows, siblings, blend_lambda, threshold, top_n):
    scored = sorted(((- combine(sim, surface, blend_lambda, threshold), cid)
                     for cid, sim, surface in rows))
    position = {cid: i + 1 for i, (_, cid) in enumerate(scored)}
    return [position.get(sib, top_n + 1) for sib in siblings]


def sibling_score_ranks(pv: PVModel, params: ScoreParams, corpus: PairedCorpus,
                        caption_id: str) -> list[int]:
    """Ranks of one caption's siblings after re-scoring its neighborhood.

    The caption's top-N cosine neighbors (same-image captions included) are
    re-ranked by descending combined score, ties by ascending caption_id; a
    sibling missing from the neighborhood gets rank N+1.
    """
    siblings = corpus.siblings(caption_id)
    if not siblings:
        return []
    index = CosineIndex(pv, corpus)
    neighbors = index.query(caption_id, params.top_n, exclude_same_image=False)
    target = corpus.caption(caption_id)
    rows = [(cid, sim, bleu_surface(corpus.caption(cid).tokens, target.tokens))
            for cid, sim in neighbors.entries]
    return _ranks_from_stats(rows, siblings, params.blend_lambda,
                             params.threshold, params.top_n)


def wmgs_rank(pv: PVModel, params: ScoreParams, corpus: PairedCorpus) -> float:
    """Mean re-scored sibling rank over every (caption, sibling) pair."""
    _require_siblings(corpus)
    stats = _neighbor_stats(pv, corpus, params.top_n)
    total, pairs = 0.0, 0
    for cap in corpus.captions:
        ranks = _ranks_from_stats(stats[cap.caption_id],
                                  corpus.siblings(cap.caption_id),
                                  params.blend_lambda, params.threshold,
                                  params.top_n)
        total += sum(ranks)
        pairs += len(ranks)
    return total / pairs


def _require_siblings(corpus: PairedCorpus):
    lonely = [iid for iid, caps in corpus.image_to_captions.items() if len(caps) < 2]
    if lonely:
        raise ValueError(f"sibling ranks undefined: images with < 2 captions: {lonely[:5]}")


def optimize_lambda(pv: PVModel, corpus: PairedCorpus, lambda_grid,
                    threshold: float = DEFAULT_THRESHOLD,
                    top_n: int = DEFAULT_TOP_N):
    """Pick the grid λ minimizing the mean re-scored sibling rank.

    Neighborhoods and surface similarities are λ-independent, so they are
    computed once and only the blend is re-evaluated per grid point. Ties
    prefer the smallest λ. Returns (best λ, [(λ, rank), ...]).
    """
    lambda_grid = list(lambda_grid)
    if not lambda_grid:
        raise ValueError("lambda grid is empty")
    _require_siblings(corpus)
    stats = _neighbor_stats(pv, corpus, top_n)

    table = []
    for lam in lambda_grid:
        total, pairs = 0.0, 0
        for cap in corpus.captions:
            ranks = _ranks_from_stats(stats[cap.caption_id],
                                      corpus.siblings(cap.caption_id),
                                      lam, threshold, top_n)
            total += sum(ranks)
            pairs += len(ranks)
        table.append((lam, total / pairs))
    best = min(table, key=lambda row: (row[1], row[0]))
    return best[0], table


def write_grid_table(rows, param_name, path) -> None:
    """Grid-search table as CSV with header param,value,rank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "rank"])
        for value, rank in rows:
            writer.writerow([param_name, value, repr(float(rank))])
