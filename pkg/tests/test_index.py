import numpy as np
import pytest

from todkit.corpus import ActionLabel, TrainingExample
from todkit.index import IndexError_, RetrievalIndex, refresh_hints


def make_examples(n, rng, d=8):
    examples = []
    vectors = rng.standard_normal((n, d))
    vectors /= np.linalg.norm(vectors, axis=-1, keepdims=True)
    for i in range(n):
        examples.append(
            TrainingExample(
                context_text=f"ctx {i}",
                state_update_target="",
                response_target=f"response {i}",
                actions=frozenset({ActionLabel("inform", f"slot{i % 5}")}),
                db_counts={},
                dialog_id=f"d{i // 4}",
                turn_idx=(i % 4) * 2 + 1,
            )
        )
    return examples, vectors


class TestBuild:
    def test_one_entry_per_turn(self):
        rng = np.random.default_rng(0)
        examples, vectors = make_examples(12, rng)
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        assert len(idx) == 12

    def test_rebuild_identical(self):
        rng = np.random.default_rng(1)
        examples, vectors = make_examples(6, rng)
        a = RetrievalIndex.build(examples, lambda _: vectors, "context")
        b = RetrievalIndex.build(examples, lambda _: vectors, "context")
        np.testing.assert_array_equal(a.vectors, b.vectors)

    def test_unit_norm_enforced(self):
        rng = np.random.default_rng(2)
        examples, vectors = make_examples(4, rng)
        with pytest.raises(ValueError):
            RetrievalIndex.build(examples, lambda _: vectors * 3.0, "context")

    def test_empty_rejected(self):
        with pytest.raises(IndexError_):
            RetrievalIndex.build([], lambda _: np.zeros((0, 4)), "context")

    def test_bad_mode_rejected(self):
        rng = np.random.default_rng(3)
        examples, vectors = make_examples(4, rng)
        with pytest.raises(ValueError):
            RetrievalIndex.build(examples, lambda _: vectors, "both")


class TestTop1:
    def test_exact_vector_returns_self(self):
        rng = np.random.default_rng(4)
        examples, vectors = make_examples(10, rng)
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        response, actions, sim = idx.top1(vectors[7])
        assert response == "response 7"
        assert sim == pytest.approx(1.0, abs=1e-12)

    def test_two_entry_preference(self):
        examples, _ = make_examples(2, np.random.default_rng(5), d=2)
        vectors = np.array([[1.0, 0.0], [0.0, 1.0]])
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        q = np.array([0.9, 0.1])
        q /= np.linalg.norm(q)
        assert idx.top1(q)[0] == "response 0"

    def test_tie_breaks_to_lowest_turn(self):
        examples, _ = make_examples(3, np.random.default_rng(6), d=2)
        vectors = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        assert idx.top1(np.array([1.0, 0.0]))[0] == "response 0"

    def test_matches_linear_scan_on_1000_entries(self):
        rng = np.random.default_rng(7)
        examples, vectors = make_examples(1000, rng, d=16)
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        agree = 0
        for _ in range(200):
            q = rng.standard_normal(16)
            q /= np.linalg.norm(q)
            best = int(np.argmax(vectors @ q))  # independent linear scan
            agree += idx.top1(q)[0] == f"response {best}"
        assert agree == 200

    def test_similarity_dominates_all_entries(self):
        rng = np.random.default_rng(8)
        examples, vectors = make_examples(50, rng)
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        q = rng.standard_normal(8)
        q /= np.linalg.norm(q)
        _, _, sim = idx.top1(q)
        assert np.all(vectors @ q <= sim + 1e-12)

    def test_all_excluded_rejected(self):
        examples, _ = make_examples(1, np.random.default_rng(9), d=2)
        idx = RetrievalIndex.build(examples, lambda _: np.array([[1.0, 0.0]]), "context")
        with pytest.raises(IndexError_):
            idx.top1(np.array([1.0, 0.0]), exclude=RetrievalIndex.turn_key(examples[0]))


class TestRefreshHints:
    def test_identical_turns_hint_each_other(self):
        examples, _ = make_examples(2, np.random.default_rng(10), d=2)
        vectors = np.array([[1.0, 0.0], [1.0, 0.0]])
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        refresh_hints(examples, idx, lambda _: vectors)
        assert examples[0].hint == "response 1"
        assert examples[1].hint == "response 0"

    def test_never_own_response(self):
        rng = np.random.default_rng(11)
        examples, vectors = make_examples(30, rng)
        idx = RetrievalIndex.build(examples, lambda _: vectors, "context")
        refresh_hints(examples, idx, lambda _: vectors)
        for ex in examples:
            assert ex.hint is not None
            assert ex.hint != ex.response_target


def test_dump_load_round_trip(tmp_path):
    rng = np.random.default_rng(12)
    examples, vectors = make_examples(8, rng)
    idx = RetrievalIndex.build(examples, lambda _: vectors, "response")
    path = tmp_path / "index.npz"
    idx.dump(path)
    loaded = RetrievalIndex.load(path)
    np.testing.assert_array_equal(loaded.vectors, idx.vectors)
    assert loaded.responses == idx.responses
    assert loaded.actions == idx.actions
    assert loaded.embed_mode == "response"
