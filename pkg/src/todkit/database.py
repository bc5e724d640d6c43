"""Entity database with fuzzy slot matching and result-count discretization."""

from __future__ import annotations

import json
import logging
import string
from pathlib import Path

from .corpus import DialogState, state_diff

logger = logging.getLogger(__name__)

# domain -> list of entities (slot -> value)
Database = dict[str, list[dict[str, str]]]

# Normalized Damerau-Levenshtein cutoff. Calibrated on alias pairs that must
# match (centre/center at 1/6, guesthouse/guest house at 1/10) while keeping
# distinct slot values apart (north/south at 3/5).
FUZZY_THRESHOLD = 0.2

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


class DomainError(KeyError):
    """Query against a domain the database does not contain."""


def normalize_value(value: str) -> str:
    """Lowercase, trim, fold punctuation, collapse whitespace."""
    folded = value.lower().strip().translate(_PUNCT_TABLE)
    return " ".join(folded.split())


def damerau_levenshtein(a: str, b: str) -> int:
    """Optimal string alignment distance (edits + adjacent transpositions)."""
    la, lb = len(a), len(b)
    if la == 0 or lb == 0:
        return max(la, lb)
    prev2: list[int] = []
    prev = list(range(lb + 1))
    for i in range(1, la + 1):
        cur = [i] + [0] * lb
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
            if (
                i > 1
                and j > 1
                and a[i - 1] == b[j - 2]
                and a[i - 2] == b[j - 1]
            ):
                cur[j] = min(cur[j], prev2[j - 2] + 1)
        prev2, prev = prev, cur
    return prev[lb]


def fuzzy_equal(a: str, b: str, threshold: float = FUZZY_THRESHOLD) -> bool:
    na, nb = normalize_value(a), normalize_value(b)
    if na == nb:
        return True
    longest = max(len(na), len(nb))
    if longest == 0:
        return True
    return damerau_levenshtein(na, nb) / longest <= threshold


def query(db: Database, domain: str, constraints: dict[str, str]) -> list[dict[str, str]]:
    """Entities of `domain` fuzzily satisfying every applicable constraint.

    Constraints on slots the domain's entities do not carry (booking slots
    like `bookday`) are ignored; unconstrained slots are ignored.
    """
    if domain not in db:
        raise DomainError(domain)
    entities = db[domain]
    entity_slots = set().union(*(e.keys() for e in entities)) if entities else set()
    applicable = {s: v for s, v in constraints.items() if s in entity_slots}
    return [
        e
        for e in entities
        if all(fuzzy_equal(e.get(slot, ""), value) for slot, value in applicable.items())
    ]


def active_domain(
    prev_state: DialogState, new_state: DialogState, fallback: str | None = None
) -> str | None:
    """Domain touched by the latest state update, or the fallback if none."""
    touched = sorted(state_diff(prev_state, new_state))
    if not touched:
        return fallback
    if len(touched) > 1:
        logger.debug("update touched several domains %s; using %s", touched, touched[-1])
    return touched[-1]


def bin_count(queried: bool, n: int) -> int:
    """Discretize a result count into the 8-way label scheme.

    0 reserved for "domain not queried"; 1 for a query with zero matches;
    2-4 for 1-3 matches; 5 for 4-5; 6 for 6-10; 7 for 11 or more.
    """
    if n < 0:
        raise ValueError("count must be non-negative")
    if not queried:
        return 0
    if n == 0:
        return 1
    if n <= 3:
        return n + 1
    if n <= 5:
        return 5
    if n <= 10:
        return 6
    return 7


def count_string(counts: dict[str, int]) -> str:
    """`domain: n` pairs for queried domains, lexicographic, space-separated."""
    return " ".join(f"{d}: {counts[d]}" for d in sorted(counts))


def load_database(path) -> Database:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: database must map domains to entity lists")
    return {d: [dict(e) for e in ents] for d, ents in raw.items()}


def save_database(db: Database, path) -> None:
    Path(path).write_text(json.dumps(db, indent=1, sort_keys=True))
