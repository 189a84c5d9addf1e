import json

import numpy as np
import pytest

from latentlm import tensor as tz
from latentlm.corpus import TaskSpec, Vocabulary, encode_problem, generate_corpus
from latentlm.curriculum import (
    AdamW,
    CurriculumConfig,
    SequenceOverflow,
    annotate_corpus,
    compute_confidences,
    corpus_loss,
    cosine_lr,
    insert_thinking,
    plain_annotation,
    run_curriculum,
    stage1_train,
    stage2_train,
    stage3_train,
    static_annotation,
)
from latentlm.latent import LATENT, FusionConfig, lt_forward
from latentlm.model import ModelConfig, init_model, load_checkpoint
from latentlm.tensor import Tensor

VOCAB = Vocabulary()


def toy_model_cfg(**overrides):
    base = dict(n_layers=2, n_heads=2, d_model=16, d_ff=32,
                vocab_size=VOCAB.size, max_seq_len=160, tied_embeddings=True, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def toy_corpus(n=10, seed=0, steps=(1, 2)):
    spec = TaskSpec(n_steps_range=steps, operand_range=(2, 5), n_examples=n, seed=seed)
    return [encode_problem(p, VOCAB) for p in generate_corpus(spec)]


def toy_fusion(**overrides):
    base = dict(thinking_id=VOCAB.thinking_id, top_p=1.0, context_layer=-1, max_latent_run=2)
    base.update(overrides)
    return FusionConfig(**base)


def toy_ccfg(**overrides):
    base = dict(stage_epochs=(2, 2, 2), learning_rates=(3e-3, 1e-3, 1e-3),
                batch_size=4, seed=0)
    base.update(overrides)
    return CurriculumConfig(**base)


# -- optimizer -------------------------------------------------------------


def test_adamw_zero_grad_is_noop():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    opt.step()
    assert p.data.tolist() == [1.0, -2.0]


def test_adamw_first_step_magnitude():
    p = Tensor([1.0, 1.0, 1.0], requires_grad=True)
    p.grad = np.array([0.5, -2.0, 1e-3])
    opt = AdamW([p], lr=0.01, weight_decay=0.0)
    opt.step()
    # first step: m_hat/sqrt(v_hat) = sign(g) up to eps correction
    moved = np.array([1.0, 1.0, 1.0]) - p.data
    assert np.allclose(moved, [0.01, -0.01, 0.01], rtol=1e-4)


def test_adamw_quadratic_bowl_converges():
    p = Tensor([3.0, -2.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.0)
    total = 500
    loss = None
    for step in range(total):
        opt.zero_grad()
        loss = (p * p).sum()
        loss.backward()
        opt.step(cosine_lr(step, total, 0.1))
    assert loss.item() < 1e-6


def test_adamw_weight_decay_shrinks_params():
    # params with grad=None are skipped entirely; zero-valued grads still decay
    p = Tensor([1.0], requires_grad=True)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    assert p.data[0] == 1.0
    p.grad = np.array([0.0])
    opt.step()
    assert p.data[0] == pytest.approx(0.95)


# -- schedule ----------------------------------------------------------------


def test_cosine_endpoints():
    assert cosine_lr(0, 100, 2.0) == 2.0
    assert cosine_lr(100, 100, 2.0) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(50, 100, 2.0) == pytest.approx(1.0)


def test_cosine_rejects_zero_total():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)


def test_cosine_warmup():
    assert cosine_lr(0, 100, 1.0, warmup_steps=10) == pytest.approx(0.1)
    assert cosine_lr(9, 100, 1.0, warmup_steps=10) == pytest.approx(1.0)


# -- confidences ---------------------------------------------------------------


def uniform_rigged_model():
    m = init_model(toy_model_cfg(seed=1))
    m.ln_f_gain.data[:] = 0.0
    m.ln_f_bias.data[:] = 0.0
    return m


def test_confidences_uniform_model():
    m = uniform_rigged_model()
    ex = toy_corpus(1)[0]
    conf = compute_confidences(m, ex)
    assert np.allclose(conf, 1.0 / VOCAB.size, atol=0)
    assert len(conf) == len(ex.full_ids()) - 1


def test_confidences_match_independent_recomputation():
    m = init_model(toy_model_cfg(seed=2))
    ex = toy_corpus(1, seed=3)[0]
    conf = compute_confidences(m, ex)
    ids = ex.full_ids()
    with tz.no_grad():
        logits = m.forward(m.embed(ids)).logits.data
    for t in range(1, len(ids)):
        p = np.exp(logits[t - 1]) / np.exp(logits[t - 1]).sum()
        assert conf[t - 1] == pytest.approx(p[ids[t]], abs=1e-10)
    assert np.all((conf > 0) & (conf < 1))


# -- insertion ------------------------------------------------------------------


def test_insert_nothing_when_confident():
    ex = toy_corpus(1, seed=4)[0]
    conf = np.full(len(ex.full_ids()) - 1, 0.99)
    ann = insert_thinking(ex, conf, 0.7, 2, rng_seed=0,
                          thinking_id=VOCAB.thinking_id, max_seq_len=64)
    assert ann.ids == ex.full_ids()
    assert ann.anchors == []
    assert all(m != LATENT for m in ann.modes)


def test_insert_at_single_uncertain_position():
    ex = toy_corpus(1, seed=5)[0]
    ids = ex.full_ids()
    conf = np.full(len(ids) - 1, 0.99)
    target = ex.question_len + 3
    conf[target - 1] = 0.65
    inserted_any = False
    for seed in range(12):
        ann = insert_thinking(ex, conf, 0.7, 2, rng_seed=seed,
                              thinking_id=VOCAB.thinking_id, max_seq_len=64)
        assert ann.anchors == [target]
        n = len(ann.ids) - len(ids)
        assert 0 <= n <= 2
        if n:
            inserted_any = True
            # the inserted run sits immediately before the anchored token
            assert ann.ids[target : target + n] == [VOCAB.thinking_id] * n
            assert ann.ids[target + n] == ids[target]
        ann.validate(VOCAB.thinking_id, max_run=2)
    assert inserted_any


def test_insert_deterministic_per_seed():
    ex = toy_corpus(1, seed=6)[0]
    rng = np.random.Generator(np.random.PCG64(7))
    conf = rng.uniform(0.3, 1.0, size=len(ex.full_ids()) - 1)
    a = insert_thinking(ex, conf, 0.7, 2, rng_seed=11, thinking_id=VOCAB.thinking_id, max_seq_len=96)
    b = insert_thinking(ex, conf, 0.7, 2, rng_seed=11, thinking_id=VOCAB.thinking_id, max_seq_len=96)
    assert a.ids == b.ids and a.modes == b.modes and a.anchors == b.anchors


def test_insert_anchor_set_matches_threshold_rescan():
    ex = toy_corpus(1, seed=8)[0]
    rng = np.random.Generator(np.random.PCG64(9))
    conf = rng.uniform(0.2, 1.0, size=len(ex.full_ids()) - 1)
    tau = 0.7
    ann = insert_thinking(ex, conf, tau, 2, rng_seed=1, thinking_id=VOCAB.thinking_id, max_seq_len=128)
    expected = [t for t in range(ex.question_len, len(ex.full_ids())) if conf[t - 1] < tau]
    assert ann.anchors == expected
    assert all(not ann.loss_mask[i] for i in range(ex.question_len))
    assert all(ann.loss_mask[ex.question_len:])


def test_insert_overflow_dropped_not_truncated():
    ex = toy_corpus(1, seed=10)[0]
    conf = np.zeros(len(ex.full_ids()) - 1)  # maximally uncertain everywhere
    with pytest.raises(SequenceOverflow):
        insert_thinking(ex, conf, 0.7, 2, rng_seed=0,
                        thinking_id=VOCAB.thinking_id, max_seq_len=len(ex.full_ids()) + 1)

    m = uniform_rigged_model()
    corpus = toy_corpus(6, seed=11)
    ann, dropped = annotate_corpus(m, corpus, toy_ccfg(), VOCAB.thinking_id,
                                   max_seq_len=48, seed=0)
    assert len(ann) + dropped == len(corpus)


def test_static_annotation_run_after_question():
    ex = toy_corpus(1, seed=12)[0]
    ann = static_annotation(ex, k=3, thinking_id=VOCAB.thinking_id, max_seq_len=96)
    q = ex.question_len
    assert ann.ids[q : q + 3] == [VOCAB.thinking_id] * 3
    assert ann.anchors == [q]
    ann.validate(VOCAB.thinking_id, max_run=3)


# -- stage training -----------------------------------------------------------


def test_stage1_loss_decreases():
    corpus = toy_corpus(10, seed=13)
    model = init_model(toy_model_cfg(seed=3))
    _, history = stage1_train(model, corpus, toy_ccfg(stage_epochs=(20, 1, 1)))
    losses = [h["loss"] for h in history]
    assert len(losses) >= 50
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_stage1_memorizes_single_example():
    corpus = toy_corpus(1, seed=14)
    model = init_model(toy_model_cfg(seed=4))
    _, history = stage1_train(model, corpus, toy_ccfg(stage_epochs=(400, 1, 1), batch_size=1,
                                                      learning_rates=(5e-3, 1e-3, 1e-3)))
    assert history[-1]["loss"] < 0.05


def test_stage1_bitwise_deterministic():
    corpus = toy_corpus(6, seed=15)
    cfg = toy_ccfg(stage_epochs=(3, 1, 1))
    m1 = init_model(toy_model_cfg(seed=5))
    _, h1 = stage1_train(m1, corpus, cfg)
    m2 = init_model(toy_model_cfg(seed=5))
    _, h2 = stage1_train(m2, corpus, cfg)
    assert [h["loss"] for h in h1] == [h["loss"] for h in h2]
    for pa, pb in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_stage1_empty_corpus_errors():
    with pytest.raises(ValueError, match="empty corpus"):
        stage1_train(init_model(toy_model_cfg()), [], toy_ccfg())


def test_stage2_without_latents_equals_stage1_bitwise():
    corpus = toy_corpus(6, seed=16)
    cfg = toy_ccfg(stage_epochs=(2, 2, 2), learning_rates=(1e-3, 1e-3, 1e-3))
    m1 = init_model(toy_model_cfg(seed=6))
    _, h1 = stage1_train(m1, corpus, cfg)
    m2 = init_model(toy_model_cfg(seed=6))
    plain = [plain_annotation(ex) for ex in corpus]
    _, h2 = stage2_train(m2, plain, toy_fusion(mode="raw_hidden"), cfg)
    assert [h["loss"] for h in h1] == [h["loss"] for h in h2]
    for pa, pb in zip(m1.parameters(), m2.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_stage2_learns_to_predict_thinking():
    corpus = toy_corpus(1, seed=17)
    model = init_model(toy_model_cfg(seed=7))
    ex = corpus[0]
    ids = ex.full_ids()
    conf = np.full(len(ids) - 1, 0.99)
    conf[ex.question_len + 1] = 0.01  # force insertion before one target
    ann = insert_thinking(ex, conf, 0.7, 2, rng_seed=3,
                          thinking_id=VOCAB.thinking_id, max_seq_len=64)
    assert ann.latent_positions(), "fixture must actually insert"
    cfg = toy_ccfg(stage_epochs=(1, 200, 1), batch_size=1, learning_rates=(1e-3, 3e-3, 1e-3))
    _, history = stage2_train(model, [ann], toy_fusion(mode="raw_hidden"), cfg)
    assert history[-1]["loss"] < np.mean([h["loss"] for h in history[:3]])

    # teacher-forcing probe: thinking is now likelier than chance right before the run
    res = lt_forward(model, ann, toy_fusion(mode="raw_hidden"))
    first_latent = ann.latent_positions()[0]
    row = res.logits.data[first_latent - 1]
    p = np.exp(row - row.max())
    p /= p.sum()
    assert p[VOCAB.thinking_id] > 1.0 / VOCAB.size


def test_stage3_alpha_one_matches_stage2_step_exactly():
    corpus = toy_corpus(4, seed=18)
    m = uniform_rigged_model()
    ann, _ = annotate_corpus(m, corpus, toy_ccfg(), VOCAB.thinking_id, 160, seed=5)
    assert any(a.latent_positions() for a in ann)
    cfg = toy_ccfg(stage_epochs=(1, 1, 1), learning_rates=(1e-3, 1e-3, 1e-3))

    m2 = init_model(toy_model_cfg(seed=8))
    stage2_train(m2, ann, toy_fusion(mode="raw_hidden"), cfg)
    m3 = init_model(toy_model_cfg(seed=8))
    stage3_train(m3, ann, toy_fusion(mode="fusion", alpha=1.0), cfg)
    for pa, pb in zip(m2.parameters(), m3.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_stage3_gradients_reach_unseen_embedding_rows():
    # untied head: embedding-table gradients can only arrive via inputs or e_pred
    corpus = toy_corpus(1, seed=19)
    m = init_model(toy_model_cfg(seed=9, tied_embeddings=False))
    ex = corpus[0]
    ids = ex.full_ids()
    conf = np.full(len(ids) - 1, 0.99)
    conf[ex.question_len + 1] = 0.01
    ann = insert_thinking(ex, conf, 0.7, 2, rng_seed=1,
                          thinking_id=VOCAB.thinking_id, max_seq_len=64)
    assert ann.latent_positions()
    m.zero_grad()
    res = lt_forward(m, ann, toy_fusion(mode="fusion"))
    loss = tz.cross_entropy(res.logits[:-1], ann.ids[1:], ann.loss_mask[1:])
    loss.backward()
    used = set(ann.ids)
    support = res.fused_steps[0].distribution > 0
    unseen_support = [w for w in np.flatnonzero(support) if w not in used]
    assert unseen_support, "fixture needs support outside the input tokens"
    grads = np.abs(m.token_embedding.grad[unseen_support]).sum(axis=1)
    assert np.all(grads > 0)


def test_stage3_loss_decreases():
    corpus = toy_corpus(6, seed=20)
    m = uniform_rigged_model()
    ann, _ = annotate_corpus(m, corpus, toy_ccfg(), VOCAB.thinking_id, 160, seed=6)
    model = init_model(toy_model_cfg(seed=10))
    cfg = toy_ccfg(stage_epochs=(1, 1, 30), batch_size=3)
    _, history = stage3_train(model, ann, toy_fusion(mode="fusion"), cfg)
    losses = [h["loss"] for h in history]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


# -- full pipeline ---------------------------------------------------------------


def small_pipeline(tmp_path, ablation=None, seed=0, name="run"):
    corpus = toy_corpus(8, seed=21)
    out = tmp_path / name
    return run_curriculum(
        corpus,
        toy_model_cfg(seed=seed),
        toy_ccfg(stage_epochs=(6, 3, 3), batch_size=4, seed=seed),
        toy_fusion(),
        out_dir=str(out),
        ablation=ablation,
    ), out


def test_run_curriculum_smoke(tmp_path):
    result, out = small_pipeline(tmp_path)
    for stage in result.manifest["stages"]:
        assert stage["final_loss"] < stage["initial_loss"]
    assert (out / "manifest.json").exists()
    assert (out / "losses.csv").exists()
    assert (out / "stage1.ltt").exists() and (out / "stage3.ltt").exists()


def test_run_curriculum_no_stage3_manifest_mode(tmp_path):
    result, _ = small_pipeline(tmp_path, ablation="no_stage3")
    assert result.manifest["stage_modes"]["stage3"] == "raw_hidden"
    assert result.manifest["eval_mode"] == "raw_hidden"


def test_run_curriculum_checkpoints_reproduce_val_loss(tmp_path):
    result, out = small_pipeline(tmp_path)
    corpus = toy_corpus(8, seed=21)
    val_plain = [plain_annotation(ex) for ex in corpus[:16]]
    for stage in result.manifest["stages"]:
        model = load_checkpoint(out / stage["checkpoint"])
        got = corpus_loss(model, val_plain, toy_fusion(mode="text_only"))
        assert got == pytest.approx(stage["val_text_loss"], abs=1e-9)


def test_run_curriculum_ablations_distinguishable(tmp_path):
    manifests = {}
    for ab in ("pause", "no_tt_latent", "no_stage2"):
        result, _ = small_pipeline(tmp_path, ablation=ab, name=f"run-{ab}")
        manifests[ab] = result.manifest
    assert manifests["pause"]["stage_modes"] == {"stage2": "pause", "stage3": "pause"}
    assert manifests["no_tt_latent"]["eval_mode"] == "text_only"
    assert manifests["no_tt_latent"]["stage_modes"]["stage3"] == "fusion"
    assert [s["name"] for s in manifests["no_stage2"]["stages"]] == ["stage1", "stage3"]


def test_run_curriculum_bitwise_deterministic(tmp_path):
    _, out1 = small_pipeline(tmp_path, seed=2, name="a")
    _, out2 = small_pipeline(tmp_path, seed=2, name="b")
    for fname in ("manifest.json", "losses.csv", "stage1.ltt", "stage2.ltt", "stage3.ltt"):
        assert (out1 / fname).read_bytes() == (out2 / fname).read_bytes(), fname


def test_run_curriculum_rejects_unknown_ablation(tmp_path):
    with pytest.raises(ValueError, match="unknown ablation"):
        run_curriculum(toy_corpus(2), toy_model_cfg(), toy_ccfg(), toy_fusion(),
                       ablation="bogus")
