import json

import numpy as np
import pytest

from todkit import autodiff as ad
from todkit.autodiff import NumericsError, Tensor
from todkit.corpus import BlendConfig
from todkit.objectives import SamplerConfig
from todkit.pipeline import build_examples
from todkit.synthetic import default_schema, generate_synthetic_corpus, synthetic_database
from todkit.training import (
    Adam,
    TrainPlan,
    adam_step,
    cosine_warmup_lr,
    encode_examples,
    train_joint_alternating,
    train_pure_generative,
    train_retrieval,
    train_two_stage,
    vocab_from_examples,
    write_logs,
)

TINY_OVERRIDES = {
    "model_dim": 24,
    "heads": 2,
    "encoder_layers": 2,
    "forked_layers": 1,
    "decoder_layers": 1,
    "ff_dim": 48,
    "max_seq_len": 96,
}


@pytest.fixture(scope="module")
def tiny_data():
    schema = default_schema()
    db = synthetic_database(schema, 21)
    corpus = generate_synthetic_corpus(schema, 30, 21, db)
    examples = build_examples(corpus, db)
    vocab = vocab_from_examples(examples)
    return examples, vocab


class TestAdam:
    def test_first_step_is_signed_lr(self):
        p = ad.parameter(np.array([1.0, -2.0, 3.0]))
        opt = Adam({"p": p})
        g = np.array([0.3, -0.7, 0.0001])
        before = p.data.copy()
        adam_step(opt, {"p": g}, lr=0.001)
        delta = p.data - before
        np.testing.assert_allclose(delta, -0.001 * np.sign(g), rtol=1e-3)

    def test_zero_gradient_no_change(self):
        p = ad.parameter(np.array([1.0, 2.0]))
        opt = Adam({"p": p})
        before = p.data.copy()
        opt.step({"p": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(p.data, before)

    def test_descends_quadratic(self):
        p = ad.parameter(np.array([1.0]))
        opt = Adam({"p": p})
        for _ in range(100):
            opt.step({"p": 2.0 * p.data}, lr=0.05)
        assert abs(p.data[0]) < 0.5

    def test_nan_gradient_aborts(self):
        p = ad.parameter(np.array([1.0]))
        opt = Adam({"p": p})
        with pytest.raises(NumericsError):
            opt.step({"p": np.array([float("nan")])}, lr=0.1)


class TestCosineWarmup:
    def test_peak_at_warmup_end(self):
        assert cosine_warmup_lr(100, 100, 1000, 0.01) == pytest.approx(0.01)

    def test_zero_at_total(self):
        assert cosine_warmup_lr(1000, 100, 1000, 0.01) == 0.0

    def test_half_peak_at_midpoint(self):
        assert cosine_warmup_lr(550, 100, 1000, 0.01) == pytest.approx(0.005)

    def test_linear_in_warmup(self):
        assert cosine_warmup_lr(50, 100, 1000, 0.01) == pytest.approx(0.005)

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            cosine_warmup_lr(1, 0, 10, 0.1)


class TestPlan:
    def test_regime_validated(self):
        with pytest.raises(ValueError):
            TrainPlan(regime="sometimes")
        with pytest.raises(ValueError):
            TrainPlan(regime="two_stage", retrieval_model=None)

    def test_json_round_trip(self):
        plan = TrainPlan(
            regime="two_stage",
            retrieval_model="action_single",
            epochs=3,
            blend=BlendConfig(0.4),
            sampler=SamplerConfig(4, 3),
            seed=7,
        )
        again = TrainPlan.from_json(plan.to_json())
        assert again == plan


def _plan(**kw):
    base = dict(
        regime="generative",
        epochs=2,
        retrieval_epochs=2,
        batch_size=8,
        sampler=SamplerConfig(4, 3),
        seed=5,
        model_overrides=TINY_OVERRIDES,
    )
    base.update(kw)
    return TrainPlan(**base)


class TestGenerativeTraining:
    def test_smoke_loss_decreases(self, tiny_data):
        examples, vocab = tiny_data
        plan = _plan(epochs=3)
        model, logs = train_pure_generative(plan, examples, vocab)
        state = [l["value"] for l in logs if l["loss_name"] == "gen/state"]
        n = len(state)
        # epoch-mean losses strictly decrease over the first 3 epochs
        epoch_means = [np.mean(state[i * n // 3 : (i + 1) * n // 3]) for i in range(3)]
        assert epoch_means[0] > epoch_means[1] > epoch_means[2]

    def test_deterministic(self, tiny_data):
        examples, vocab = tiny_data
        a, _ = train_pure_generative(_plan(), examples, vocab)
        b, _ = train_pure_generative(_plan(), examples, vocab)
        for (n1, t1), (n2, t2) in zip(sorted(a.named_params()), sorted(b.named_params())):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_hint_token_appears_at_most_once(self, tiny_data):
        from todkit.training import _hint_prefix
        from todkit.text import HINT

        examples, vocab = tiny_data
        plan = _plan(blend=BlendConfig(0.4))
        cfg = plan.model_config(len(vocab))
        encoded = encode_examples(examples, vocab, plan, cfg)
        rng = np.random.default_rng(0)
        hint_id = vocab.index[HINT]
        cache = {}
        for enc in encoded[:50]:
            enc.ex.hint = "some [name] hint <|hint|> sneaky"
            prefix = _hint_prefix(enc, vocab, plan, rng, {})
            # the injected hint token is stripped context, prefix adds exactly one
            assert prefix.count(hint_id) <= 2  # marker + at most the quoted literal
            enc.ex.hint = "plain hint text"
            prefix = _hint_prefix(enc, vocab, plan, rng, cache)
            assert prefix.count(hint_id) == 1


class TestRetrievalTraining:
    @pytest.mark.parametrize("kind", ["action_single", "action_dual", "dual", "poly"])
    def test_each_kind_trains_and_loss_drops(self, tiny_data, kind):
        examples, vocab = tiny_data
        plan = _plan(regime="two_stage", retrieval_model=kind, retrieval_epochs=3)
        cfg = plan.model_config(len(vocab))
        encoded = encode_examples(examples, vocab, plan, cfg)
        model, logs = train_retrieval(plan, encoded, vocab)
        values = [l["value"] for l in logs]
        assert np.mean(values[-5:]) < np.mean(values[:5])
        assert model.w.item() > 0


class TestTwoStage:
    def test_smoke_and_hints_attached(self, tiny_data):
        examples, vocab = tiny_data
        plan = _plan(regime="two_stage", retrieval_model="action_single", epochs=2)
        retriever, gen, index, logs = train_two_stage(plan, examples, vocab)
        assert len(index) == len(examples)
        retrieval_losses = [l["value"] for l in logs if l["loss_name"].startswith("retrieval")]
        assert retrieval_losses[-1] < retrieval_losses[0]

    def test_alpha_one_decoder_never_sees_retrieved_text(self, tiny_data):
        from todkit.training import _hint_prefix

        examples, vocab = tiny_data
        plan = _plan(blend=BlendConfig(1.0))
        cfg = plan.model_config(len(vocab))
        encoded = encode_examples(examples, vocab, plan, cfg)
        rng = np.random.default_rng(1)
        for enc in encoded[:40]:
            enc.ex.hint = "retrieved text that must be replaced"
            prefix = _hint_prefix(enc, vocab, plan, rng, {})
            from todkit.text import HINT, tokenize

            hint_ids = prefix[prefix.index(vocab.index[HINT]) + 1 :]
            expected = vocab.encode(tokenize(enc.ex.response_target))[: plan.hint_max_tokens]
            assert hint_ids == expected


class TestJointAlternating:
    def test_parameter_ownership_partition(self, tiny_data):
        examples, vocab = tiny_data
        plan = _plan(regime="joint_alternating", epochs=1)
        model, index, logs = train_joint_alternating(plan, examples[:60], vocab)
        retrieval = set(model.retrieval_group())
        generation = set(model.generation_group())
        assert not retrieval & generation
        assert retrieval | generation == set(model.param_dict())
        # fork/db/projection/w names live in the retrieval group only
        assert any(k.startswith("fork_layers") for k in retrieval)
        assert any(k == "log_w" for k in retrieval)
        assert any(k.startswith("enc_layers") for k in generation)

    def test_only_owned_parameters_move(self, tiny_data):
        import todkit.training as T

        examples, vocab = tiny_data
        plan = _plan(regime="joint_alternating", epochs=1)
        cfg = plan.model_config(len(vocab))
        from todkit.models import build_model

        # snapshot after retrieval-only step: run one manual alternation
        model = build_model("hybrid", cfg, plan.seed)
        encoded = T.encode_examples(examples[:60], vocab, plan, cfg)
        retrieval_params = model.retrieval_group()
        generation_params = model.generation_group()
        opt_r = T.Adam(retrieval_params)
        rng = np.random.default_rng(0)
        groups = T.sample_action_batch(encoded, plan.sampler, rng)
        flat = [e for _, members in groups for e in members]
        gen_before = {k: t.data.copy() for k, t in generation_params.items()}
        with ad.Tape() as tape:
            emb = T.embed_sorted(T.context_embedder(model), flat, T.ctx_length_of(model))
            m, n = plan.sampler.actions_per_batch, plan.sampler.examples_per_action
            loss = T.ge2e_loss(T.ge2e_similarity(ad.reshape(emb, (m, n, cfg.model_dim)), model.w))
        tape.backward(loss)
        opt_r.step(T._grads_by_name(tape, retrieval_params), 1e-3)
        for k, t in generation_params.items():
            np.testing.assert_array_equal(t.data, gen_before[k])

    def test_smoke_retrieval_loss_decreases(self, tiny_data):
        examples, vocab = tiny_data
        plan = _plan(regime="joint_alternating", epochs=3)
        model, index, logs = train_joint_alternating(plan, examples, vocab)
        r = [l["value"] for l in logs if l["loss_name"] == "retrieval/ge2e"]
        assert np.mean(r[-5:]) < np.mean(r[:5])

    def test_deterministic_checkpoints(self, tiny_data, tmp_path):
        from todkit.models import save_checkpoint

        examples, vocab = tiny_data
        plan = _plan(regime="joint_alternating", epochs=1)
        paths = []
        for run in range(2):
            model, index, _ = train_joint_alternating(plan, examples[:60], vocab)
            path = tmp_path / f"run{run}.npz"
            save_checkpoint(path, vocab, {"gen": model}, index=index)
            paths.append(path)
        import numpy as np_

        with np_.load(paths[0]) as a, np_.load(paths[1]) as b:
            assert sorted(a.files) == sorted(b.files)
            for key in a.files:
                np_.testing.assert_array_equal(a[key], b[key])


def test_write_logs_jsonl(tmp_path):
    logs = [
        {"step": 1, "loss_name": "gen/state", "value": 1.0, "lr": 0.001},
        {"step": 2, "loss_name": "gen/state", "value": 0.9, "lr": 0.001},
    ]
    path = tmp_path / "log.jsonl"
    write_logs(logs, path)
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == logs
    assert set(lines[0]) == {"step", "loss_name", "value", "lr"}


def test_hints_refresh_after_each_epoch(tiny_data):
    """Mid-training embedding movement must change at least one hint."""
    import todkit.training as T

    examples, vocab = tiny_data
    plan = _plan(regime="joint_alternating", epochs=2)
    cfg = plan.model_config(len(vocab))
    snapshots = []
    original = T.refresh_corpus_hints

    def spy(model, encoded, kind, index):
        original(model, encoded, kind, index)
        snapshots.append([e.ex.hint for e in encoded])

    T.refresh_corpus_hints = spy
    try:
        train_joint_alternating(plan, examples[:80], vocab)
    finally:
        T.refresh_corpus_hints = original
    assert len(snapshots) == 3  # initial + one per epoch
    assert any(a != b for a, b in zip(snapshots[0], snapshots[1]))
