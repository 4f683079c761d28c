"""Tests for the neural stack: primitives, GRU, FFNN, encoder-decoder."""

import numpy as np
import pytest

from mccap.corpus import CaptionRecord, ImageRecord, PairedCorpus, Vocabulary
from mccap.dataset import Candidate, Instance
from mccap.neural import (
    Adagrad,
    EncDecClassifier,
    FFNNClassifier,
    FFNNParams,
    TrainConfig,
    clip_global_norm,
    ffnn_forward,
    ffnn_train,
    generate_caption,
    global_norm,
    grad_check,
    gru_backward,
    gru_forward,
    init_ffnn_params,
    init_gru_params,
    init_vec2seq_params,
    load_ffnn,
    load_vec2seq,
    multitask_loss,
    numeric_gradient,
    predict_instance,
    save_ffnn,
    save_vec2seq,
    vec2seq_forward,
    vec2seq_train,
)
from mccap.neural.encdec import (
    LoweredInstance,
    Vec2seqParams,
    classification_loss,
    loss_components,
    lower_instances,
    predict_batch,
    vec2seq_loss_and_grads,
)
from mccap.neural.ffnn import ffnn_loss_and_grads
from mccap.neural.ops import cross_entropy, log_softmax, sigmoid, softmax
from mccap.neural.trainlog import TrainLogRow, write_training_log


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

class TestOps:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        probs = softmax(rng.normal(size=(5, 7)))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(probs > 0)

    def test_log_softmax_stable_for_huge_logits(self):
        logits = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
        lp = log_softmax(logits)
        assert np.all(np.isfinite(lp))
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-12)

    def test_cross_entropy_matches_manual(self):
        logits = np.array([[0.2, -0.3, 1.0]])
        losses, dlogits = cross_entropy(logits, np.array([2]))
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        assert losses[0] == pytest.approx(-np.log(p[2]), abs=1e-12)
        np.testing.assert_allclose(dlogits[0], p - np.array([0, 0, 1]), atol=1e-12)

    def test_sigmoid_matches_reference_both_signs(self):
        x = np.array([-30.0, -2.0, 0.0, 2.0, 30.0])
        np.testing.assert_allclose(sigmoid(x), _sigmoid(x), atol=1e-15)


# ---------------------------------------------------------------------------
# Optimizer and clipping
# ---------------------------------------------------------------------------

class TestOptim:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(clip_norm=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(lambda_gen=-0.5)
        TrainConfig(lambda_gen=0.0)  # zero is allowed

    def test_global_norm_matches_manual(self):
        grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
        assert global_norm(grads) == pytest.approx(5.0, abs=1e-12)

    def test_clip_scales_norm_ten_to_four(self):
        g = {"a": np.array([6.0, 8.0])}  # norm 10
        pre = clip_global_norm(g, 4.0)
        assert pre == pytest.approx(10.0, abs=1e-12)
        assert global_norm(g) == pytest.approx(4.0, abs=1e-12)

    def test_clip_leaves_small_gradients_untouched(self):
        g = {"a": np.array([1.0, 2.0])}
        before = g["a"].copy()
        clip_global_norm(g, 4.0)
        np.testing.assert_array_equal(g["a"], before)

    def test_adagrad_first_step_uses_initial_accumulator(self):
        params = {"w": np.array([1.0])}
        opt = Adagrad(params, lr=0.5, initial_accumulator=0.1)
        opt.step(params, {"w": np.array([2.0])})
        expected = 1.0 - 0.5 * 2.0 / np.sqrt(0.1 + 4.0)
        assert params["w"][0] == pytest.approx(expected, abs=1e-12)

    def test_accumulators_nondecreasing(self):
        rng = np.random.default_rng(1)
        params = {"w": rng.normal(size=(3, 3))}
        opt = Adagrad(params, lr=0.01)
        prev = opt.accumulators["w"].copy()
        for _ in range(5):
            opt.step(params, {"w": rng.normal(size=(3, 3))})
            now = opt.accumulators["w"]
            assert np.all(now >= prev)
            prev = now.copy()

    def test_bad_initial_accumulator_rejected(self):
        with pytest.raises(ValueError):
            Adagrad({"w": np.zeros(1)}, initial_accumulator=0.0)


# ---------------------------------------------------------------------------
# GRU cell
# ---------------------------------------------------------------------------

def _zero_gru(d_in, d_h, dtype=np.float64):
    rng = np.random.default_rng(0)
    params = init_gru_params(rng, d_in, d_h, dtype)
    return {k: np.zeros_like(v) for k, v in params.items()}


class TestGRU:
    def test_zero_parameters_halve_the_state(self):
        params = _zero_gru(3, 2)
        h = np.array([[0.8, -0.4]])
        x = np.array([[1.0, 2.0, 3.0]])
        h_new, _ = gru_forward(params, x, h)
        np.testing.assert_allclose(h_new, 0.5 * h, atol=1e-15)

    def test_handcrafted_cell_matches_manual_evaluation(self):
        params = {
            "w_z": np.array([[0.1, -0.2]]), "u_z": np.array([[0.3, 0.0], [0.1, 0.2]]),
            "b_z": np.array([0.05, -0.05]),
            "w_r": np.array([[-0.1, 0.4]]), "u_r": np.array([[0.2, 0.1], [0.0, -0.3]]),
            "b_r": np.array([0.0, 0.1]),
            "w_h": np.array([[0.5, 0.5]]), "u_h": np.array([[-0.2, 0.2], [0.3, 0.1]]),
            "b_h": np.array([-0.1, 0.0]),
        }
        x = np.array([[2.0]])
        h = np.array([[0.5, -1.0]])
        z = _sigmoid(x @ params["w_z"] + h @ params["u_z"] + params["b_z"])
        r = _sigmoid(x @ params["w_r"] + h @ params["u_r"] + params["b_r"])
        h_cand = np.tanh(x @ params["w_h"] + (r * h) @ params["u_h"] + params["b_h"])
        expected = (1 - z) * h + z * h_cand
        h_new, _ = gru_forward(params, x, h)
        np.testing.assert_allclose(h_new, expected, atol=1e-15)

    def test_gates_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        params = init_gru_params(rng, 4, 3, np.float64)
        x = rng.normal(size=(6, 4)) * 10
        h = rng.normal(size=(6, 3)) * 10
        _, (_, _, z, r, _) = gru_forward(params, x, h)
        assert np.all(z > 0) and np.all(z < 1)
        assert np.all(r > 0) and np.all(r < 1)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        params = init_gru_params(rng, 3, 4, np.float64)
        x = rng.normal(size=(2, 3))
        h = rng.normal(size=(2, 4))
        probe = rng.normal(size=(2, 4))

        def loss():
            h_new, _ = gru_forward(params, x, h)
            return float((h_new * probe).sum())

        h_new, cache = gru_forward(params, x, h)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        dx, dh = gru_backward(params, cache, probe.copy(), grads)
        for name, analytic in grads.items():
            numeric = numeric_gradient(loss, params[name])
            np.testing.assert_allclose(analytic, numeric, atol=1e-7)
        np.testing.assert_allclose(dx, numeric_gradient(loss, x), atol=1e-7)
        np.testing.assert_allclose(dh, numeric_gradient(loss, h), atol=1e-7)


# ---------------------------------------------------------------------------
# FFNN
# ---------------------------------------------------------------------------

def _tiny_corpus(n_images=8, caps_per_image=2, d_img=4, seed=0, marker=False):
    """Corpus whose captions are short token-id sequences; when ``marker``,
    token id 1 appears exactly in first captions (the later targets)."""
    rng = np.random.default_rng(seed)
    vocab = Vocabulary([f"w{i}" for i in range(1, 10)], min_count=1)
    images, captions = [], []
    for i in range(n_images):
        iid = f"img{i:03d}"
        images.append(ImageRecord(iid, rng.normal(size=d_img)))
        for j in range(caps_per_image):
            ids = tuple(int(t) for t in rng.integers(2, 10, size=4))
            if marker and j == 0:
                ids = (1,) + ids[1:]
            captions.append(CaptionRecord(f"{iid}-c{j}", iid, "w", ids))
    return PairedCorpus(images, captions, vocab)


def _instances_from(corpus, split="train", nr_decoys=3):
    """One instance per image: its first caption is the target, decoys are the
    first captions of the following images."""
    image_ids = [img.image_id for img in corpus.images]
    instances = []
    for i, iid in enumerate(image_ids):
        target_cid = corpus.image_to_captions[iid][0]
        decoy_cids = sorted(
            corpus.image_to_captions[image_ids[(i + k) % len(image_ids)]][1]
            for k in range(1, nr_decoys + 1))
        cands = tuple(Candidate(c, "w", False, decoy_score=float(nr_decoys - k))
                      for k, c in enumerate(decoy_cids))
        cands += (Candidate(target_cid, "w", True),)
        instances.append(Instance(f"inst-{iid}", iid, cands, split=split))
    return instances


class TestFFNN:
    def test_zero_parameters_give_even_odds(self):
        params = init_ffnn_params(0, vocab_size=5, d_img=3, d_w=4, h1=4, h2=2)
        zeroed = FFNNParams({k: np.zeros_like(v) for k, v in params.tensors.items()})
        probs = ffnn_forward(zeroed, np.array([1.0, -2.0, 3.0]), (1, 2))
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)

    def test_handcrafted_forward_matches_manual_arithmetic(self):
        t = {
            "emb": np.array([[0.0, 0.0], [0.1, 0.2], [0.3, -0.1]]),
            "img_w": np.array([[1.0, 0.0], [0.0, 1.0]]),
            "img_b": np.array([0.1, -0.1]),
            "w1": np.array([[0.2, -0.1], [0.0, 0.3], [0.4, 0.0], [-0.2, 0.1]]),
            "b1": np.array([0.05, 0.0]),
            "w2": np.array([[1.0, -1.0], [0.5, 0.5]]),
            "b2": np.array([0.0, 0.1]),
            "w_out": np.array([[2.0, -2.0], [1.0, 1.0]]),
            "b_out": np.array([0.0, 0.5]),
        }
        params = FFNNParams({k: v.astype(np.float64) for k, v in t.items()})
        image = np.array([1.0, 2.0])
        x = np.concatenate([image @ t["img_w"] + t["img_b"], t["emb"][1]])
        z1 = np.maximum(x @ t["w1"] + t["b1"], 0)
        z2 = np.maximum(z1 @ t["w2"] + t["b2"], 0)
        logits = z2 @ t["w_out"] + t["b_out"]
        expected = np.exp(logits) / np.exp(logits).sum()
        got = ffnn_forward(params, image, (1,))
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_token_order_does_not_matter(self):
        params = init_ffnn_params(3, vocab_size=9, d_img=4, d_w=8, h1=8,
                                  h2=4, dtype=np.float64)
        image = np.arange(4.0)
        a = ffnn_forward(params, image, (1, 5, 2, 2))
        b = ffnn_forward(params, image, (2, 1, 2, 5))
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_empty_caption_rejected(self):
        params = init_ffnn_params(0, vocab_size=5, d_img=2, d_w=4, h1=4, h2=2)
        with pytest.raises(ValueError):
            ffnn_forward(params, np.zeros(2), ())

    def test_predict_instance_matches_exhaustive_argmax(self):
        corpus = _tiny_corpus()
        instances = _instances_from(corpus)
        params = init_ffnn_params(7, vocab_size=len(corpus.vocab),
                                  d_img=corpus.d_img, d_w=8, h1=8, h2=4)
        for inst in instances[:4]:
            image = corpus.image(inst.image_id).embedding
            yes = []
            for cand in inst.candidates:
                ids = corpus.caption(cand.caption_id).tokens
                yes.append(ffnn_forward(params, image, ids)[1])
            best = max(range(len(yes)), key=lambda j: (yes[j], -j))
            assert predict_instance(params, inst, corpus) == best

    def test_predict_all_equal_prefers_index_zero(self):
        corpus = _tiny_corpus()
        instances = _instances_from(corpus)
        params = init_ffnn_params(0, vocab_size=len(corpus.vocab),
                                  d_img=corpus.d_img, d_w=4, h1=4, h2=2)
        zeroed = FFNNParams({k: np.zeros_like(v) for k, v in params.tensors.items()})
        assert predict_instance(zeroed, instances[0], corpus) == 0

    def test_gradients_match_finite_differences(self):
        params = init_ffnn_params(5, vocab_size=6, d_img=3, d_w=4, h1=4, h2=2,
                                  dtype=np.float64)
        rng = np.random.default_rng(6)
        images = rng.normal(size=(3, 3))
        tokens = [(1, 2), (3, 3, 4), (5,)]  # includes a repeated token
        labels = [1, 0, 1]
        err = grad_check("ffnn", params.tensors, (images, tokens, labels))
        assert err < 1e-4

    def test_training_memorizes_marked_targets(self):
        corpus = _tiny_corpus(n_images=20, marker=True, seed=4)
        train = _instances_from(corpus, split="train")[:16]
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in _instances_from(corpus)[16:]]
        cfg = TrainConfig(max_steps=2000, seed=0, eval_every=500)
        params, rows = ffnn_train(train + dev, corpus, cfg, d_w=8, h1=8, h2=4)
        train_acc = np.mean([predict_instance(params, inst, corpus)
                             == inst.target_index for inst in train])
        assert train_acc == 1.0
        assert any(r.split == "dev" and r.accuracy is not None for r in rows)

    def test_training_is_deterministic(self):
        corpus = _tiny_corpus(n_images=10, marker=True)
        insts = _instances_from(corpus)
        train = insts[:8]
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in insts[8:]]
        cfg = TrainConfig(max_steps=60, seed=1, eval_every=30)
        p1, _ = ffnn_train(train + dev, corpus, cfg, d_w=4, h1=4, h2=2)
        p2, _ = ffnn_train(train + dev, corpus, cfg, d_w=4, h1=4, h2=2)
        for name in p1.tensors:
            np.testing.assert_array_equal(p1.tensors[name], p2.tensors[name])

    def test_train_rejects_missing_splits(self):
        corpus = _tiny_corpus()
        train_only = _instances_from(corpus)
        with pytest.raises(ValueError):
            ffnn_train(train_only, corpus, TrainConfig(max_steps=2))
        with pytest.raises(ValueError):
            ffnn_train([], corpus, TrainConfig(max_steps=2))

    def test_estimator_wrapper(self):
        corpus = _tiny_corpus(n_images=10, marker=True)
        insts = _instances_from(corpus)
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in insts[8:]]
        clf = FFNNClassifier(d_w=4, h1=4, h2=2, max_steps=40, eval_every=20, seed=2)
        clf.fit(insts[:8] + dev, corpus)
        preds = clf.predict(insts[:8])
        assert preds.shape == (8,)
        assert 0.0 <= clf.score(insts[:8]) <= 1.0
        assert clf.get_params()["d_w"] == 4

    def test_checkpoint_roundtrip(self, tmp_path):
        params = init_ffnn_params(9, vocab_size=7, d_img=3, d_w=4, h1=4, h2=2)
        path = tmp_path / "model.ffnn"
        save_ffnn(params, path)
        loaded = load_ffnn(path)
        assert set(loaded.tensors) == set(params.tensors)
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], params.tensors[name])


# ---------------------------------------------------------------------------
# Encoder-decoder
# ---------------------------------------------------------------------------

def _lowered_fixture(seed=0, n_instances=2, n_cands=2, d_img=3, max_tokens=3,
                     vocab=5):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        cands = []
        for j in range(n_cands):
            length = int(rng.integers(1, max_tokens + 1))
            ids = tuple(int(t) for t in rng.integers(0, vocab, size=length))
            cands.append((ids, 1 if j == 0 else 0))
        out.append(LoweredInstance(rng.normal(size=d_img), tuple(cands)))
    return out


class TestEncDec:
    def test_attention_is_degenerate_and_probs_normalized(self):
        params = init_vec2seq_params(0, vocab_size=5, d_img=3, dim=4, h1=4, h2=2,
                                     dtype=np.float64)
        trace = vec2seq_forward(params, np.array([0.5, -1.0, 2.0]), (1, 2, 0))
        np.testing.assert_array_equal(trace.attention, np.ones((4, 1)))
        np.testing.assert_allclose(trace.vocab_probs.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(trace.class_probs.sum(), 1.0, atol=1e-6)
        assert trace.decoder_outputs.shape == (4, 4)
        assert trace.vocab_probs.shape == (4, 7)

    def test_empty_caption_rejected(self):
        params = init_vec2seq_params(0, vocab_size=5, d_img=3, dim=4, h1=4, h2=2)
        with pytest.raises(ValueError):
            vec2seq_forward(params, np.zeros(3), ())

    def test_one_token_trace_matches_manual_evaluation(self):
        rng = np.random.default_rng(11)
        params = init_vec2seq_params(11, vocab_size=2, d_img=2, dim=2, h1=2, h2=2,
                                     dtype=np.float64)
        t = params.tensors
        image = rng.normal(size=2)
        ids = (1,)
        go, eos = params.go_id, params.eos_id

        def gru(prefix, x, h):
            z = _sigmoid(x @ t[prefix + "w_z"] + h @ t[prefix + "u_z"] + t[prefix + "b_z"])
            r = _sigmoid(x @ t[prefix + "w_r"] + h @ t[prefix + "u_r"] + t[prefix + "b_r"])
            cand = np.tanh(x @ t[prefix + "w_h"] + (r * h) @ t[prefix + "u_h"]
                           + t[prefix + "b_h"])
            return (1 - z) * h + z * cand

        zeros = np.zeros((1, 2))
        enc_x = image[None, :] @ t["img_w"] + t["img_b"]
        e1 = gru("enc1.", enc_x, zeros)
        e2 = gru("enc2.", e1, zeros)
        h1, h2 = e1, e2
        obars = []
        for tok in (go,) + ids:
            x = t["emb"][[tok]]
            h1 = gru("dec1.", x, h1)
            h2 = gru("dec2.", h1, h2)
            obars.append(np.tanh(np.concatenate([h2, e2], axis=1) @ t["att_w"]
                                 + t["att_b"])[0])
        obars = np.stack(obars)
        feats = np.concatenate([e2[0], obars.mean(axis=0)])
        z1 = np.maximum(feats @ t["cls_w1"] + t["cls_b1"], 0)
        z2 = np.maximum(z1 @ t["cls_w2"] + t["cls_b2"], 0)
        logits = z2 @ t["cls_w3"] + t["cls_b3"]
        expected_probs = np.exp(logits) / np.exp(logits).sum()

        trace = vec2seq_forward(params, image, ids)
        np.testing.assert_allclose(trace.encoder_state, e2[0], atol=1e-12)
        np.testing.assert_allclose(trace.decoder_outputs, obars, atol=1e-12)
        np.testing.assert_allclose(trace.class_probs, expected_probs, atol=1e-12)

    def test_lambda_zero_equals_classification_loss(self):
        params = init_vec2seq_params(1, vocab_size=5, d_img=3, dim=4, h1=4, h2=2,
                                     dtype=np.float64)
        lowered = _lowered_fixture(seed=2)
        total, cls_term, gen_term = loss_components(params, lowered, 0.0)
        assert gen_term > 0.0  # the term exists; lambda removes it
        assert abs(total - classification_loss(params, lowered)) < 1e-12

    def test_decoy_tokens_do_not_touch_generation_term(self):
        params = init_vec2seq_params(2, vocab_size=5, d_img=3, dim=4, h1=4, h2=2,
                                     dtype=np.float64)
        lowered = _lowered_fixture(seed=3)
        _, _, gen_before = loss_components(params, lowered, 1.0)
        # rewrite every decoy's tokens
        perturbed = []
        for inst in lowered:
            cands = tuple((ids, lab) if lab == 1 else ((0, 0, 0, 0), lab)
                          for ids, lab in inst.candidates)
            perturbed.append(LoweredInstance(inst.image, cands))
        _, _, gen_after = loss_components(params, perturbed, 1.0)
        assert gen_before == gen_after

    def test_gradients_match_finite_differences(self):
        params = init_vec2seq_params(4, vocab_size=5, d_img=3, dim=4, h1=3, h2=2,
                                     dtype=np.float64)
        lowered = _lowered_fixture(seed=5)
        err = grad_check("vec2seq", params.tensors, (lowered, 0.7))
        assert err < 1e-4

    def test_generate_caption_respects_max_len(self):
        params = init_vec2seq_params(6, vocab_size=5, d_img=3, dim=4, h1=4, h2=2,
                                     dtype=np.float64)
        # Make the end id unreachable: its output logit is forced far down.
        params.tensors["out_b"][params.eos_id] = -1e9
        out = generate_caption(params, np.array([0.3, -0.2, 1.0]), max_len=30)
        assert len(out) == 30
        assert params.eos_id not in out

    def test_generate_caption_deterministic(self):
        params = init_vec2seq_params(7, vocab_size=5, d_img=3, dim=4, h1=4, h2=2)
        image = np.array([1.0, 0.5, -0.5])
        assert generate_caption(params, image) == generate_caption(params, image)

    def test_overfit_single_pair_regenerates_caption(self):
        caption = (1, 3, 2)
        lowered = [LoweredInstance(np.array([1.0, -0.5]), ((caption, 1),))]
        params = init_vec2seq_params(8, vocab_size=5, d_img=2, dim=16, h1=8, h2=4,
                                     dtype=np.float64)
        opt = Adagrad(params.tensors, lr=0.1)
        for _ in range(300):
            _, grads = vec2seq_loss_and_grads(params, lowered, 4.0)
            clip_global_norm(grads, 4.0)
            opt.step(params.tensors, grads)
        assert tuple(generate_caption(params, lowered[0].image)) == caption

    def test_training_loss_halves_on_tiny_fixture(self):
        corpus = _tiny_corpus(n_images=12, caps_per_image=2, d_img=4, seed=9)
        insts = _instances_from(corpus, nr_decoys=2)
        train = insts[:10]
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in insts[10:]]
        cfg = TrainConfig(max_steps=1000, batch_size=10, seed=0, eval_every=200,
                          lambda_gen=0.5)
        start = loss_components(
            init_vec2seq_params(cfg.seed, len(corpus.vocab), corpus.d_img,
                                dim=16, h1=8, h2=4),
            lower_instances(train, corpus), cfg.lambda_gen)[0]
        _, rows = vec2seq_train(train + dev, corpus, cfg, dim=16, h1=8, h2=4)
        train_losses = [r.loss for r in rows if r.split == "train"]
        assert train_losses[-1] <= 0.5 * start
        dev_rows = [r for r in rows if r.split == "dev"]
        assert all(r.rouge_l is not None and r.cider is not None for r in dev_rows)

    def test_training_deterministic(self):
        corpus = _tiny_corpus(n_images=8, caps_per_image=2, d_img=4, seed=10)
        insts = _instances_from(corpus, nr_decoys=2)
        train = insts[:6]
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in insts[6:]]
        cfg = TrainConfig(max_steps=20, batch_size=6, seed=3, eval_every=10)
        p1, _ = vec2seq_train(train + dev, corpus, cfg, dim=8, h1=4, h2=2)
        p2, _ = vec2seq_train(train + dev, corpus, cfg, dim=8, h1=4, h2=2)
        for name in p1.tensors:
            np.testing.assert_array_equal(p1.tensors[name], p2.tensors[name])

    def test_multitask_loss_instance_level(self):
        corpus = _tiny_corpus(n_images=6, caps_per_image=2, d_img=4, seed=12)
        insts = _instances_from(corpus, nr_decoys=2)
        params = init_vec2seq_params(0, vocab_size=len(corpus.vocab),
                                     d_img=corpus.d_img, dim=8, h1=4, h2=2,
                                     dtype=np.float64)
        with_gen = multitask_loss(params, insts, corpus, 2.0)
        without = multitask_loss(params, insts, corpus, 0.0)
        assert with_gen > without

    def test_predict_batch_ties_prefer_lowest(self):
        params = init_vec2seq_params(0, vocab_size=5, d_img=3, dim=4, h1=4, h2=2)
        zeroed = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        lowered = _lowered_fixture(seed=13, n_instances=3, n_cands=4)
        choices = predict_batch(Vec2seqParams(zeroed), lowered)
        assert choices.tolist() == [0, 0, 0]

    def test_estimator_wrapper(self):
        corpus = _tiny_corpus(n_images=8, caps_per_image=2, d_img=4, seed=14)
        insts = _instances_from(corpus, nr_decoys=2)
        dev = [Instance(i.instance_id, i.image_id, i.candidates, split="dev")
               for i in insts[6:]]
        clf = EncDecClassifier(dim=8, h1=4, h2=2, max_steps=20, eval_every=10,
                               seed=0, lambda_gen=0.5)
        clf.fit(insts[:6] + dev, corpus)
        assert clf.predict(insts[:6]).shape == (6,)
        assert isinstance(clf.generate(corpus.images[0].embedding), list)

    def test_checkpoint_roundtrip(self, tmp_path):
        params = init_vec2seq_params(15, vocab_size=6, d_img=3, dim=4, h1=4, h2=2)
        path = tmp_path / "model.v2sq"
        save_vec2seq(params, path)
        loaded = load_vec2seq(path)
        assert set(loaded.tensors) == set(params.tensors)
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name],
                                          params.tensors[name])

    def test_lower_instances_rejects_empty_tokens(self):
        vocab = Vocabulary(["a"], min_count=1)
        images = [ImageRecord("img0", np.ones(2)), ImageRecord("img1", np.ones(2))]
        captions = [CaptionRecord("img0-c0", "img0", "a", (1,)),
                    CaptionRecord("img0-c1", "img0", "", ()),
                    CaptionRecord("img1-c0", "img1", "a", (1,))]
        corpus = PairedCorpus(images, captions, vocab)
        inst = Instance("i0", "img0", (
            Candidate("img0-c1", "", False, decoy_score=1.0),
            Candidate("img0-c0", "a", True)))
        with pytest.raises(ValueError):
            lower_instances([inst], corpus)


# ---------------------------------------------------------------------------
# Training log CSV
# ---------------------------------------------------------------------------

class TestTrainLog:
    def test_csv_shape_and_empty_cells(self, tmp_path):
        rows = [TrainLogRow(10, "train", loss=1.5),
                TrainLogRow(10, "dev", loss=1.2, accuracy=0.5, rouge_l=0.3,
                            cider=2.0)]
        path = tmp_path / "log.csv"
        write_training_log(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,split,loss,accuracy,rouge_l,cider"
        assert lines[1] == "10,train,1.5,,,"
        assert lines[2] == "10,dev,1.2,0.5,0.3,2.0"
