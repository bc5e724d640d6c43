import pytest

from todkit.corpus import delexicalize, save_corpus
from todkit.database import query
from todkit.pipeline import build_examples
from todkit.synthetic import (
    ConfigError,
    CorpusSchema,
    default_schema,
    generate_synthetic_corpus,
    synthetic_database,
)
from todkit.text import detokenize, tokenize

SCHEMA = default_schema()


@pytest.fixture(scope="module")
def corpus_and_db():
    db = synthetic_database(SCHEMA, 11)
    return generate_synthetic_corpus(SCHEMA, 200, 11, db), db


def test_single_dialog_well_formed():
    db = synthetic_database(SCHEMA, 3)
    (dialog,) = generate_synthetic_corpus(SCHEMA, 1, 3, db)
    assert dialog.turns[0].speaker == "user"
    assert dialog.turns[-1].speaker == "system"
    assert len(dialog.turns) % 2 == 0
    for i, turn in enumerate(dialog.turns):
        assert turn.speaker == ("user" if i % 2 == 0 else "system")
        if turn.speaker == "system":
            assert turn.actions
            assert turn.delexicalized is not None
    assert dialog.goal


def test_same_seed_byte_identical(tmp_path):
    a = generate_synthetic_corpus(SCHEMA, 25, 9)
    b = generate_synthetic_corpus(SCHEMA, 25, 9)
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    save_corpus(a, pa)
    save_corpus(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_action_set_variety(corpus_and_db):
    corpus, _ = corpus_and_db
    sets_seen = {t.actions for d in corpus for t in d.turns if t.speaker == "system"}
    assert len(sets_seen) >= 30


def test_spans_reproduce_delexicalization(corpus_and_db):
    corpus, _ = corpus_and_db
    for d in corpus:
        for t in d.turns:
            if t.speaker == "system":
                assert delexicalize(t.utterance, t.spans) == t.delexicalized


def test_templates_are_tokenization_stable(corpus_and_db):
    corpus, _ = corpus_and_db
    for d in corpus:
        for t in d.turns:
            if t.speaker == "system":
                assert detokenize(tokenize(t.delexicalized)) == t.delexicalized


def test_goal_constraints_match_database(corpus_and_db):
    corpus, db = corpus_and_db
    for d in corpus:
        for domain, g in d.goal.items():
            assert query(db, domain, g["constraints"]), (d.id, domain)


def test_states_accumulate_and_domains_in_schema(corpus_and_db):
    corpus, _ = corpus_and_db
    for d in corpus:
        prev: dict = {}
        for t in d.turns:
            for domain, slots in t.state_after.items():
                assert domain in SCHEMA.domains
                for slot, value in slots.items():
                    assert value
            # states only grow in this generator (no deletions)
            for domain, slots in prev.items():
                assert set(slots) <= set(t.state_after.get(domain, {}))
            prev = t.state_after


def test_empty_schema_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic_corpus(CorpusSchema(domains={}), 5, 0)


def test_build_examples_shape(corpus_and_db):
    corpus, db = corpus_and_db
    examples = build_examples(corpus, db)
    n_system = sum(1 for d in corpus for t in d.turns if t.speaker == "system")
    assert len(examples) == n_system
    for ex in examples[:200]:
        assert ex.response_target
        assert ex.actions
        assert 0 <= ex.db_bin <= 7
        # context holds at most 5 utterances
        n_utts = ex.context_text.count("<|user|>") + ex.context_text.count("<|system|>")
        assert 1 <= n_utts <= 5
        if ex.db_counts:
            assert ex.active_domain in ex.db_counts


def test_examples_first_turn_has_update(corpus_and_db):
    corpus, db = corpus_and_db
    examples = build_examples(corpus, db)
    first = [ex for ex in examples if ex.turn_idx == 1]
    assert all(ex.state_update_target for ex in first)
