"""Surface similarity, the combined decoy score, and sibling re-ranking."""

import numpy as np
import pytest

from mccap import scoring
from mccap.corpus import CaptionRecord, ImageRecord, PairedCorpus, Vocabulary
from mccap.pvembed import PVModel
from mccap.scoring import ScoreParams, bleu_surface, optimize_lambda, score


class TestBleuSurface:
    def test_identical_sentences(self):
        assert bleu_surface(["a", "b", "c"], ["a", "b", "c"]) == 1.0

    def test_token_disjoint(self):
        assert bleu_surface(["a", "b"], ["c", "d"]) == 0.0

    def test_zero_match_higher_order_zeroes_result(self):
        # p1 = 2/3 and p2 = 1/2 but p3 = 0, so the whole score is 0.
        assert bleu_surface(["a", "b", "c"], ["a", "b", "d"]) == 0.0

    def test_short_candidate_caps_order(self):
        # Orders run only to the candidate length: 2 here, both precisions 1.
        assert bleu_surface(["a", "b"], ["a", "b", "x", "y"]) == 1.0

    def test_counts_are_clipped(self):
        value = bleu_surface(["a", "a"], ["a", "x"])
        # p1 = 1/2 after clipping "a" to one reference occurrence; p2 = 0.
        assert value == 0.0
        assert bleu_surface(["a"], ["a", "x"]) == 1.0

    def test_geometric_mean_over_four_orders(self):
        # cand "a b c d x" vs ref "a b c d": precisions 4/5, 3/4, 2/3, 1/2.
        value = bleu_surface(list("abcdx"), list("abcd"))
        assert value == pytest.approx((4 / 5 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25,
                                      abs=1e-12)

    def test_higher_order_zero_kills_repeated_token_candidate(self):
        # cand "a b a" vs ref "a b x": p1 and p2 positive but p3 = 0.
        assert bleu_surface(["a", "b", "a"], ["a", "b", "x"]) == 0.0

    def test_empty_candidate(self):
        assert bleu_surface([], ["a"]) == 0.0
        assert bleu_surface(["a"], []) == 0.0

    def test_range_property(self):
        rng = np.random.default_rng(0)
        alphabet = list("abcd")
        for _ in range(200):
            cand = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(1, 8))]
            ref = [alphabet[i] for i in rng.integers(0, 4, size=rng.integers(1, 8))]
            value = bleu_surface(cand, ref)
            assert 0.0 <= value <= 1.0
            assert bleu_surface(cand, cand) == 1.0


def _scoring_fixture(angles_deg, image_of, tokens_of):
    """Captions on the unit circle with controlled pairwise cosines."""
    ids = sorted(angles_deg)
    all_tokens = sorted({t for toks in tokens_of.values() for t in toks})
    vocab = Vocabulary(all_tokens)
    images = [ImageRecord(iid, np.ones(2, dtype=np.float32))
              for iid in sorted(set(image_of.values()))]
    captions = [CaptionRecord(cid, image_of[cid], " ".join(tokens_of[cid]),
                              tuple(vocab.encode(tokens_of[cid])))
                for cid in ids]
    corpus = PairedCorpus(images, captions, vocab)
    theta = np.deg2rad([angles_deg[cid] for cid in ids])
    vecs = np.stack([np.cos(theta), np.sin(theta)], axis=1).astype(np.float32)
    model = PVModel(vecs, np.zeros((2, 2), dtype=np.float32), ids)
    return corpus, model


def _exact_cos_fixture():
    """Two token-disjoint captions whose doc cosine is exactly 4/5."""
    vocab = Vocabulary(["left", "right"])
    images = [ImageRecord("iA", np.ones(2, dtype=np.float32)),
              ImageRecord("iB", np.ones(2, dtype=np.float32))]
    captions = [CaptionRecord("a0", "iA", "left", (1,)),
                CaptionRecord("a1", "iA", "left left", (1, 1)),
                CaptionRecord("b0", "iB", "right", (2,)),
                CaptionRecord("b1", "iB", "right right", (2, 2))]
    corpus = PairedCorpus(images, captions, vocab)
    vecs = np.array([[1, 0], [0, 1], [4, 3], [3, 4]], dtype=np.float32)
    model = PVModel(vecs, np.zeros((2, 2), dtype=np.float32),
                    ["a0", "a1", "b0", "b1"])
    return corpus, model


class TestScore:
    def test_threshold_branch(self):
        corpus, model = _exact_cos_fixture()
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=4, nr_decoys=1)
        # b0 repeats a0's sole token type, so surface similarity is 1 ≥ L.
        vocab = corpus.vocab
        clone = PairedCorpus(
            corpus.images,
            [corpus.caption("a0"), corpus.caption("a1"),
             CaptionRecord("b0", "iB", "left", (1,)), corpus.caption("b1")],
            vocab)
        assert score(model, params, clone, "b0", "a0") == 0.0

    def test_blend_value_is_exact_in_64_bit(self):
        corpus, model = _exact_cos_fixture()
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=4, nr_decoys=1)
        got = score(model, params, corpus, "b0", "a0")
        assert got == 0.3 * 0.8

    def test_identical_caption_scores_zero(self):
        corpus, model = _exact_cos_fixture()
        params = ScoreParams(threshold=1.0)
        assert score(model, params, corpus, "a0", "a0") == 0.0

    def test_unknown_id_rejected(self):
        corpus, model = _exact_cos_fixture()
        with pytest.raises(KeyError):
            score(model, ScoreParams(), corpus, "nope", "a0")

    def test_lambda_one_orders_by_cosine(self):
        angles = {"q": 0.0, "x1": 10.0, "x2": 20.0, "x3": 35.0}
        image_of = {"q": "i0", "x1": "i1", "x2": "i2", "x3": "i3"}
        tokens_of = {"q": ["qq"], "x1": ["aa"], "x2": ["bb"], "x3": ["cc"]}
        corpus, model = _scoring_fixture(angles, image_of, tokens_of)
        params = ScoreParams(blend_lambda=1.0, threshold=0.5, top_n=3, nr_decoys=1)
        values = [score(model, params, corpus, cid, "q") for cid in ("x1", "x2", "x3")]
        assert values == sorted(values, reverse=True)

    def test_lambda_zero_equals_surface(self):
        texts = {"q": "a b c d", "near": "a b c d x",
                 "mid": "a b c d x y", "far": "a b c d x y z"}
        vocab = Vocabulary(sorted("abcdxyz"))
        images = [ImageRecord(f"i{k}", np.ones(2, dtype=np.float32)) for k in range(4)]
        captions = [CaptionRecord(cid, f"i{k}", text,
                                  tuple(vocab.encode(text.split())))
                    for k, (cid, text) in enumerate(texts.items())]
        corpus = PairedCorpus(images, captions, vocab)
        # Cosine deliberately contradicts the surface order; λ=0 ignores it.
        vecs = np.array([[1, 0], [0, 1], [0.5, 0.86], [0.99, 0.1]], dtype=np.float32)
        model = PVModel(vecs, np.zeros((2, 2), dtype=np.float32), list(texts))
        params = ScoreParams(blend_lambda=0.0, threshold=0.9, top_n=3, nr_decoys=1)
        for cid in ("near", "mid", "far"):
            surface = bleu_surface(corpus.caption(cid).tokens,
                                   corpus.caption("q").tokens)
            assert 0.0 < surface < 0.9
            assert score(model, params, corpus, cid, "q") == surface


class TestSiblingRanks:
    def _ranked_fixture(self):
        angles = {"q": 0.0, "f1": 10.0, "s1": 20.0, "f2": 30.0, "s2": 40.0, "f3": 50.0}
        image_of = {"q": "iQ", "s1": "iQ", "s2": "iQ",
                    "f1": "iF1", "f2": "iF2", "f3": "iF3"}
        tokens_of = {cid: [f"tok{c}"] for c, cid in
                     zip("abcdef", sorted(angles))}
        return _scoring_fixture(angles, image_of, tokens_of)

    def test_positions_follow_cosine_when_surface_is_zero(self):
        corpus, model = self._ranked_fixture()
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=5, nr_decoys=1)
        ranks = scoring.sibling_score_ranks(model, params, corpus, "q")
        assert ranks == [2, 4]

    def test_near_duplicate_sibling_sinks(self):
        angles = {"q": 0.0, "twin": 1.0, "f1": 10.0, "f2": 20.0}
        image_of = {"q": "iQ", "twin": "iQ", "f1": "iF", "f2": "iF"}
        tokens_of = {"q": ["w", "x"], "twin": ["w", "x"],
                     "f1": ["y"], "f2": ["z"]}
        corpus, model = _scoring_fixture(angles, image_of, tokens_of)
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=3, nr_decoys=1)
        # The twin is nearest by cosine but identical in surface, so its
        # combined score is zeroed and it drops below both fillers.
        ranks = scoring.sibling_score_ranks(model, params, corpus, "q")
        assert ranks == [3]

    def test_missing_sibling_gets_n_plus_one(self):
        corpus, model = self._ranked_fixture()
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=3, nr_decoys=1)
        ranks = scoring.sibling_score_ranks(model, params, corpus, "q")
        assert ranks == [2, 4]  # s2 at cosine position 4 misses the top-3 pool

    def test_wmgs_flat_mean_and_oracle(self):
        corpus, model = self._ranked_fixture()
        params = ScoreParams(blend_lambda=0.3, threshold=0.5, top_n=5, nr_decoys=1)
        with pytest.raises(ValueError, match="< 2 captions"):
            scoring.wmgs_rank(model, params, corpus)

    def test_wmgs_matches_brute_force(self):
        angles = {"a0": 0.0, "a1": 12.0, "b0": 24.0, "b1": 36.0, "c0": 48.0, "c1": 60.0}
        image_of = {"a0": "iA", "a1": "iA", "b0": "iB", "b1": "iB",
                    "c0": "iC", "c1": "iC"}
        tokens_of = {"a0": ["p", "q"], "a1": ["p", "r"], "b0": ["s"],
                     "b1": ["s", "t"], "c0": ["u"], "c1": ["u", "v"]}
        corpus, model = _scoring_fixture(angles, image_of, tokens_of)
        params = ScoreParams(blend_lambda=0.4, threshold=0.5, top_n=5, nr_decoys=1)

        ids = sorted(angles)
        unit = model.doc_vectors.astype(np.float64)
        unit /= np.linalg.norm(unit, axis=1, keepdims=True)
        ranks = []
        for cid in ids:
            i = ids.index(cid)
            pool = sorted((k for k in range(6) if k != i),
                          key=lambda k: (-(unit[k] @ unit[i]), ids[k]))[:5]
            def eq1(k):
                surface = bleu_surface(corpus.caption(ids[k]).tokens,
                                       corpus.caption(cid).tokens)
                if surface >= 0.5:
                    return 0.0
                return 0.4 * float(unit[k] @ unit[i]) + 0.6 * surface
            reranked = sorted(pool, key=lambda k: (-eq1(k), ids[k]))
            for sib in corpus.siblings(cid):
                j = ids.index(sib)
                ranks.append(reranked.index(j) + 1 if j in reranked else 6)
        assert scoring.wmgs_rank(model, params, corpus) == pytest.approx(np.mean(ranks))


class TestOptimizeLambda:
    def test_single_point(self):
        angles = {"a0": 0.0, "a1": 15.0, "b0": 30.0, "b1": 45.0}
        image_of = {"a0": "iA", "a1": "iA", "b0": "iB", "b1": "iB"}
        tokens_of = {"a0": ["w1"], "a1": ["w2"], "b0": ["w3"], "b1": ["w4"]}
        corpus, model = _scoring_fixture(angles, image_of, tokens_of)
        best, table = optimize_lambda(model, corpus, [0.7], top_n=3)
        assert best == 0.7
        assert len(table) == 1

    def test_all_zero_surface_returns_smallest_lambda(self):
        angles = {"a0": 0.0, "a1": 15.0, "b0": 30.0, "b1": 45.0}
        image_of = {"a0": "iA", "a1": "iA", "b0": "iB", "b1": "iB"}
        tokens_of = {"a0": ["w1"], "a1": ["w2"], "b0": ["w3"], "b1": ["w4"]}
        corpus, model = _scoring_fixture(angles, image_of, tokens_of)
        best, table = optimize_lambda(model, corpus, [0.9, 0.2, 0.5], top_n=3)
        values = {rank for _, rank in table}
        assert len(values) == 1
        assert best == 0.2

    def test_grid_table_csv(self, tmp_path):
        path = tmp_path / "grid.csv"
        scoring.write_grid_table([(0.3, 13.0), (0.5, 14.25)], "lambda", path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "param,value,rank"
        assert lines[1] == "lambda,0.3,13.0"
