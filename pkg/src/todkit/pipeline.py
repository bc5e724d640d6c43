"""Turn corpora into model-ready training examples.

One example per system turn: serialized generation context, state-update
target, response target, action annotation, and the active-domain database
count feeding both the decoder's count string and the retrieval side.
"""

from __future__ import annotations

from .corpus import Dialog, TrainingExample, serialize_context, serialize_retrieval_context, state_diff, serialize_state
from .database import Database, active_domain, bin_count, count_string, query

MAX_CONTEXT_UTTS = 5


def db_counts_for_state(db: Database, state, active: str | None) -> dict[str, int]:
    """Result count for the active domain only; inactive domains are filtered."""
    if active is None or active not in db or active not in state:
        return {}
    return {active: len(query(db, active, state[active]))}


def build_examples(
    dialogs: list[Dialog], db: Database, max_utts: int = MAX_CONTEXT_UTTS
) -> list[TrainingExample]:
    examples = []
    for dialog in dialogs:
        active: str | None = None
        for i, turn in enumerate(dialog.turns):
            if turn.speaker != "system":
                continue
            user_turn = dialog.turns[i - 1]
            initial_state = dialog.turns[i - 2].state_after if i >= 2 else {}
            updated_state = user_turn.state_after
            active = active_domain(initial_state, updated_state, fallback=active)
            counts = db_counts_for_state(db, updated_state, active)
            count_str = count_string(counts)
            queried = bool(counts)
            n = counts.get(active, 0) if active else 0
            examples.append(
                TrainingExample(
                    context_text=serialize_context(
                        dialog.turns[:i], initial_state, max_utts
                    ),
                    state_update_target=serialize_state(
                        state_diff(initial_state, updated_state)
                    ),
                    response_target=turn.delexicalized or "",
                    actions=turn.actions or frozenset(),
                    db_counts=counts,
                    dialog_id=dialog.id,
                    turn_idx=i,
                    retrieval_context_text=serialize_retrieval_context(
                        updated_state, count_str, dialog.turns[:i], max_utts
                    ),
                    db_bin=bin_count(queried, n),
                    active_domain=active,
                )
            )
    return examples


def example_texts(examples: list[TrainingExample]) -> list[str]:
    """Every text surface the tokenizer must cover."""
    texts = []
    for ex in examples:
        texts.append(ex.context_text)
        texts.append(ex.retrieval_context_text)
        texts.append(ex.state_update_target)
        texts.append(ex.response_target)
        texts.append(count_string(ex.db_counts))
    return texts
