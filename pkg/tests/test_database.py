import pytest
from hypothesis import given
from hypothesis import strategies as st

from todkit.database import (
    DomainError,
    active_domain,
    bin_count,
    count_string,
    damerau_levenshtein,
    fuzzy_equal,
    load_database,
    query,
    save_database,
)

DB = {
    "restaurant": [
        {"name": "the golden fork", "area": "centre", "food": "italian", "pricerange": "cheap"},
        {"name": "the jade dragon", "area": "north", "food": "chinese", "pricerange": "moderate"},
        {"name": "the olive table", "area": "centre", "food": "italian", "pricerange": "expensive"},
    ],
    "hotel": [
        {"name": "the acorn lodge", "area": "south", "stars": "4"},
    ],
}


class TestFuzzyMatching:
    def test_exact_after_normalization(self):
        assert fuzzy_equal("Centre ", "centre")
        assert fuzzy_equal("guest-house", "guesthouse")

    def test_canonical_alias_pair_matches(self):
        # centre/center differ by one adjacent transposition: 1/6 <= 0.2
        assert damerau_levenshtein("centre", "center") == 1
        assert fuzzy_equal("center", "centre")

    def test_distinct_values_do_not_match(self):
        assert not fuzzy_equal("north", "south")
        assert not fuzzy_equal("cheap", "expensive")
        assert not fuzzy_equal("italian", "indian")

    def test_distance_oracle(self):
        # brute-force recursive definition on short strings
        def osa(a, b):
            import functools

            @functools.lru_cache(maxsize=None)
            def d(i, j):
                if i == 0 or j == 0:
                    return max(i, j)
                best = min(
                    d(i - 1, j) + 1,
                    d(i, j - 1) + 1,
                    d(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
                )
                if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                    best = min(best, d(i - 2, j - 2) + 1)
                return best

            return d(len(a), len(b))

        import random

        rnd = random.Random(5)
        alphabet = "abcde"
        for _ in range(200):
            a = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(0, 7)))
            b = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(0, 7)))
            assert damerau_levenshtein(a, b) == osa(a, b), (a, b)


class TestQuery:
    def test_fuzzy_value_matches(self):
        out = query(DB, "restaurant", {"area": "center"})
        assert {e["name"] for e in out} == {"the golden fork", "the olive table"}

    def test_empty_constraints_all_entities(self):
        assert len(query(DB, "restaurant", {})) == 3

    def test_absent_value_empty_result(self):
        assert query(DB, "restaurant", {"food": "german"}) == []

    def test_unknown_domain(self):
        with pytest.raises(DomainError):
            query(DB, "train", {})

    def test_booking_slots_ignored(self):
        out = query(DB, "hotel", {"area": "south", "bookday": "monday"})
        assert len(out) == 1

    def test_monotone_in_constraints(self):
        base = query(DB, "restaurant", {"area": "centre"})
        tighter = query(DB, "restaurant", {"area": "centre", "pricerange": "cheap"})
        assert len(tighter) <= len(base)
        names = {e["name"] for e in base}
        assert all(e["name"] in names for e in tighter)

    def test_exact_subset_of_fuzzy(self):
        for entity in DB["restaurant"]:
            out = query(DB, "restaurant", {"area": entity["area"], "food": entity["food"]})
            assert entity in out


class TestActiveDomain:
    def test_single_domain_update(self):
        assert active_domain({}, {"hotel": {"area": "north"}}) == "hotel"

    def test_empty_update_falls_back(self):
        s = {"train": {"day": "monday"}}
        assert active_domain(s, s, fallback="train") == "train"

    def test_sequence_walkthrough(self):
        s0: dict = {}
        s1 = {"restaurant": {"food": "thai"}}
        s2 = {"restaurant": {"food": "thai"}, "taxi": {"departure": "alpha"}}
        first = active_domain(s0, s1, fallback=None)
        second = active_domain(s1, s2, fallback=first)
        assert (first, second) == ("restaurant", "taxi")

    def test_two_domain_update_lexicographically_last(self):
        new = {"hotel": {"area": "north"}, "restaurant": {"food": "thai"}}
        assert active_domain({}, new) == "restaurant"


class TestBinCount:
    @pytest.mark.parametrize(
        "queried,n,label",
        [
            (False, 0, 0),
            (False, 99, 0),
            (True, 0, 1),
            (True, 1, 2),
            (True, 2, 3),
            (True, 3, 4),
            (True, 4, 5),
            (True, 5, 5),
            (True, 6, 6),
            (True, 10, 6),
            (True, 11, 7),
            (True, 15, 7),
            (True, 1000, 7),
        ],
    )
    def test_mapping(self, queried, n, label):
        assert bin_count(queried, n) == label

    @given(st.integers(0, 10_000))
    def test_total_and_bounded(self, n):
        assert 0 <= bin_count(True, n) <= 7
        assert bin_count(False, n) == 0

    def test_surjective_and_monotone(self):
        seen = {bin_count(False, 0)} | {bin_count(True, n) for n in range(0, 40)}
        assert seen == set(range(8))
        labels = [bin_count(True, n) for n in range(0, 200)]
        assert all(a <= b for a, b in zip(labels, labels[1:]))


class TestCountString:
    def test_single(self):
        assert count_string({"train": 6}) == "train: 6"

    def test_empty(self):
        assert count_string({}) == ""

    def test_lexicographic(self):
        assert count_string({"train": 0, "hotel": 3}) == "hotel: 3 train: 0"


def test_database_io_round_trip(tmp_path):
    p = tmp_path / "db.json"
    save_database(DB, p)
    assert load_database(p) == DB
