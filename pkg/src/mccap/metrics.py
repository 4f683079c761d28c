"""Comprehension accuracy and from-scratch caption-generation metrics.

The generation metrics follow the COCO evaluation toolkit conventions:
ROUGE-L as an LCS F-measure with beta = 1.2 (per-reference F, per-image max),
and CIDEr-D over n-grams of order 1..4 with a Gaussian length penalty
(sigma = 6) scaled by 10. Token sequences are compared as-is; callers
tokenize beforehand.
"""

import csv
import math
from collections import Counter, defaultdict

ROUGE_BETA = 1.2
CIDER_MAX_ORDER = 4
CIDER_SIGMA = 6.0


def accuracy(predictions, instances) -> float:
    """Fraction of instances whose predicted candidate index is the target."""
    predictions = list(predictions)
    instances = list(instances)
    if len(predictions) != len(instances):
        raise ValueError(f"{len(predictions)} predictions for "
                         f"{len(instances)} instances")
    if not instances:
        raise ValueError("no instances to score")
    hits = sum(int(p) == inst.target_index
               for p, inst in zip(predictions, instances))
    return hits / len(instances)


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(hypothesis, references) -> float:
    """Best F-measure of the hypothesis against any single reference."""
    hypothesis = list(hypothesis)
    if not hypothesis:
        return 0.0
    if not references:
        raise ValueError("at least one reference required")
    best = 0.0
    beta_sq = ROUGE_BETA ** 2
    for ref in references:
        ref = list(ref)
        if not ref:
            continue
        lcs = _lcs_length(hypothesis, ref)
        if lcs == 0:
            continue
        prec = lcs / len(hypothesis)
        rec = lcs / len(ref)
        f = ((1 + beta_sq) * prec * rec) / (rec + beta_sq * prec)
        best = max(best, f)
    return best


def corpus_rouge_l(hypotheses: dict, references: dict) -> float:
    """Mean per-image ROUGE-L; hypotheses and references keyed by image id."""
    _check_keys(hypotheses, references)
    return sum(rouge_l(hyp, references[iid])
               for iid, hyp in hypotheses.items()) / len(hypotheses)


def _ngram_counts(tokens, max_order: int = CIDER_MAX_ORDER) -> Counter:
    counts = Counter()
    tokens = tuple(tokens)
    for order in range(1, max_order + 1):
        for i in range(len(tokens) - order + 1):
            counts[tokens[i:i + order]] += 1
    return counts


def _tfidf_vector(counts: Counter, doc_freq, log_n_images: float):
    """Per-order tf-idf maps, their norms, and the toolkit length proxy."""
    vecs = [defaultdict(float) for _ in range(CIDER_MAX_ORDER)]
    norms = [0.0] * CIDER_MAX_ORDER
    length = 0
    for ngram, term_freq in counts.items():
        idf = log_n_images - math.log(max(1.0, doc_freq[ngram]))
        order = len(ngram) - 1
        vecs[order][ngram] = term_freq * idf
        norms[order] += vecs[order][ngram] ** 2
        if order == 1:
            length += term_freq
    return vecs, [math.sqrt(n) for n in norms], length


def cider(hypotheses: dict, references: dict) -> float:
    """Corpus CIDEr-D of per-image hypotheses against their reference sets."""
    _check_keys(hypotheses, references)
    if len(references) < 2:
        raise ValueError("CIDEr needs at least 2 images to form document "
                         "frequencies")
    ref_counts = {iid: [_ngram_counts(r) for r in refs]
                  for iid, refs in references.items()}
    doc_freq = Counter()
    for counts_list in ref_counts.values():
        seen = set()
        for counts in counts_list:
            seen.update(counts)
        for ngram in seen:
            doc_freq[ngram] += 1
    log_n = math.log(len(references))

    total = 0.0
    for iid, hyp in hypotheses.items():
        hyp_vec, hyp_norm, hyp_len = _tfidf_vector(_ngram_counts(hyp),
                                                   doc_freq, log_n)
        per_order = [0.0] * CIDER_MAX_ORDER
        for counts in ref_counts[iid]:
            ref_vec, ref_norm, ref_len = _tfidf_vector(counts, doc_freq, log_n)
            delta = float(hyp_len - ref_len)
            penalty = math.exp(-(delta ** 2) / (2 * CIDER_SIGMA ** 2))
            for order in range(CIDER_MAX_ORDER):
                val = 0.0
                for ngram, weight in hyp_vec[order].items():
                    val += min(weight, ref_vec[order][ngram]) * ref_vec[order][ngram]
                if hyp_norm[order] != 0 and ref_norm[order] != 0:
                    val /= hyp_norm[order] * ref_norm[order]
                per_order[order] += val * penalty
        n_refs = len(ref_counts[iid])
        image_score = sum(v / n_refs for v in per_order) / CIDER_MAX_ORDER * 10.0
        total += image_score
    return total / len(hypotheses)


def _check_keys(hypotheses: dict, references: dict) -> None:
    if not hypotheses:
        raise ValueError("no hypotheses to score")
    missing = [iid for iid in hypotheses if iid not in references]
    if missing:
        raise ValueError(f"images without references: {missing[:5]}")
    empty = [iid for iid, refs in references.items() if not refs]
    if empty:
        raise ValueError(f"images with empty reference sets: {empty[:5]}")


def write_eval_report(rows, path) -> None:
    """Write (metric, split, value) triples as the standard report CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("metric", "split", "value"))
        for metric, split, value in rows:
            writer.writerow((metric, split, repr(float(value))))
