"""Corpus schema, dialog-state algebra, input serialization, and corpus IO.

The on-disk corpus format is a JSON list of dialogs::

    [
      {
        "id": "dlg-0001",
        "goal": {"restaurant": {"constraints": {"area": "north"},
                                 "requests": ["phone"], "book": true}},
        "turns": [
          {"speaker": "user", "utterance": "...", "state_after": {...}},
          {"speaker": "system", "utterance": "...", "delexicalized": "...",
           "state_after": {...}, "actions": ["offer-name"],
           "spans": [["name", 10, 24]]}
        ]
      }
    ]

`goal` is optional and only consumed by the Inform/Success evaluator.
Action labels are domain-stripped on load (`train-inform-price` becomes
`inform-price`).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .text import NONE_VALUE, SYSTEM, USER

# domain -> slot -> value; values are non-empty strings
DialogState = dict[str, dict[str, str]]

KNOWN_DOMAINS = frozenset(
    {
        "restaurant",
        "hotel",
        "attraction",
        "train",
        "taxi",
        "hospital",
        "police",
        "bus",
    }
)


class CorpusError(Exception):
    """Corpus file violates the documented schema."""


class AnnotationError(Exception):
    """Span annotation is inconsistent with the utterance."""


@dataclass(frozen=True, order=True)
class ActionLabel:
    act: str
    slot: str | None = None

    def __str__(self) -> str:
        return self.act if self.slot is None else f"{self.act}-{self.slot}"

    @classmethod
    def parse(cls, raw: str, domains: frozenset[str] = KNOWN_DOMAINS) -> "ActionLabel":
        parts = raw.strip().lower().split("-")
        if parts and parts[0] in domains:
            parts = parts[1:]
        if not parts or not parts[0]:
            raise CorpusError(f"empty action label: {raw!r}")
        if len(parts) == 1:
            return cls(parts[0])
        return cls(parts[0], "-".join(parts[1:]))


@dataclass
class Turn:
    speaker: str  # "user" | "system"
    utterance: str
    state_after: DialogState
    delexicalized: str | None = None
    actions: frozenset[ActionLabel] | None = None
    spans: list[tuple[str, int, int]] | None = None


@dataclass
class Dialog:
    id: str
    turns: list[Turn]
    goal: dict | None = None


@dataclass(frozen=True)
class BlendConfig:
    """Probability of swapping the retrieved hint for the ground truth."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class TrainingExample:
    context_text: str
    state_update_target: str
    response_target: str
    actions: frozenset[ActionLabel]
    db_counts: dict[str, int]
    dialog_id: str = ""
    turn_idx: int = -1
    retrieval_context_text: str = ""
    db_bin: int = 0
    active_domain: str | None = None
    hint: str | None = None


# ---------------------------------------------------------------------------
# State algebra
# ---------------------------------------------------------------------------


def state_diff(old: DialogState, new: DialogState) -> DialogState:
    """Minimal update turning `old` into `new`; deletions carry <none>."""
    diff: DialogState = {}
    for domain, slots in new.items():
        old_slots = old.get(domain, {})
        for slot, value in slots.items():
            if old_slots.get(slot) != value:
                diff.setdefault(domain, {})[slot] = value
    for domain, slots in old.items():
        new_slots = new.get(domain, {})
        for slot in slots:
            if slot not in new_slots:
                diff.setdefault(domain, {})[slot] = NONE_VALUE
    return diff


def apply_state_update(state: DialogState, update: DialogState) -> DialogState:
    """Merge `update` into `state`; <none> values delete slots."""
    merged = copy.deepcopy(state)
    for domain, slots in update.items():
        target = merged.setdefault(domain, {})
        for slot, value in slots.items():
            if value == NONE_VALUE:
                target.pop(slot, None)
            else:
                target[slot] = value
        if not target:
            del merged[domain]
    return {d: s for d, s in merged.items() if s}


def serialize_state(state: DialogState) -> str:
    """`domain [slot: value, ...] ...` with lexicographic domain/slot order."""
    parts = []
    for domain in sorted(state):
        slots = state[domain]
        inner = ", ".join(f"{s}: {slots[s]}" for s in sorted(slots))
        parts.append(f"{domain} [{inner}]")
    return " ".join(parts)


def parse_state_tokens(tokens: list[str]) -> DialogState:
    """Inverse of serialize_state over the token stream.

    Tolerant of model output: malformed fragments are skipped rather than
    raised, since decoded state updates may be garbage early in training.
    """
    state: DialogState = {}
    i = 0
    n = len(tokens)
    while i < n:
        domain = tokens[i]
        if i + 1 >= n or tokens[i + 1] != "[":
            i += 1
            continue
        i += 2
        while i < n and tokens[i] != "]":
            # slot : value-tokens... (value runs until , or ])
            slot_toks = []
            while i < n and tokens[i] not in (":", "]", ","):
                slot_toks.append(tokens[i])
                i += 1
            if i >= n or tokens[i] != ":":
                if i < n and tokens[i] == ",":
                    i += 1
                continue
            i += 1
            value_toks = []
            while i < n and tokens[i] not in (",", "]"):
                value_toks.append(tokens[i])
                i += 1
            if i < n and tokens[i] == ",":
                i += 1
            if slot_toks and value_toks:
                state.setdefault(domain, {})["".join(slot_toks)] = " ".join(value_toks)
        i += 1
    return {d: s for d, s in state.items() if s}


def parse_state_string(text: str) -> DialogState:
    from .text import tokenize

    return parse_state_tokens(tokenize(text))


# ---------------------------------------------------------------------------
# Serialization of model inputs
# ---------------------------------------------------------------------------

_SPEAKER_PREFIX = {"user": USER, "system": SYSTEM}


def serialize_context(
    history: list[Turn], initial_state: DialogState, max_utts: int = 5
) -> str:
    """Speaker-prefixed last `max_utts` utterances followed by the state string."""
    if max_utts < 1:
        raise ValueError("max_utts must be >= 1")
    parts = [
        f"{_SPEAKER_PREFIX[t.speaker]} {t.utterance}" for t in history[-max_utts:]
    ]
    state_str = serialize_state(initial_state)
    if state_str:
        parts.append(state_str)
    return " ".join(parts)


def serialize_retrieval_context(
    updated_state: DialogState,
    count_str: str,
    history: list[Turn],
    max_utts: int = 5,
) -> str:
    """Retriever input: updated state, then DB counts, then past utterances."""
    parts = []
    state_str = serialize_state(updated_state)
    if state_str:
        parts.append(state_str)
    if count_str:
        parts.append(count_str)
    parts.extend(f"{_SPEAKER_PREFIX[t.speaker]} {t.utterance}" for t in history[-max_utts:])
    return " ".join(parts)


def delexicalize(utterance: str, spans: list[tuple[str, int, int]]) -> str:
    """Replace each annotated span with its `[slot]` placeholder.

    Spans are applied right to left so character indices stay valid.
    """
    ordered = sorted(spans, key=lambda s: s[1])
    for (_, _, end), (_, start, _) in zip(ordered, ordered[1:]):
        if start < end:
            raise AnnotationError("overlapping slot spans")
    out = utterance
    for slot, start, end in reversed(ordered):
        if not (0 <= start < end <= len(utterance)):
            raise AnnotationError(
                f"span ({slot}, {start}, {end}) out of range for {utterance!r}"
            )
        out = out[:start] + f"[{slot}]" + out[end:]
    return out


def blend_hint(hint: str, ground_truth: str, cfg: BlendConfig, rng) -> str:
    """With probability alpha show the ground truth instead of the hint."""
    return ground_truth if rng.random() < cfg.alpha else hint


# ---------------------------------------------------------------------------
# Corpus IO
# ---------------------------------------------------------------------------


def _require(cond: bool, where: str, message: str):
    if not cond:
        raise CorpusError(f"{where}: {message}")


def _load_state(raw, where: str) -> DialogState:
    _require(isinstance(raw, dict), where, "state_after must be an object")
    state: DialogState = {}
    for domain, slots in raw.items():
        _require(isinstance(slots, dict), where, f"domain {domain!r} must map slots")
        for slot, value in slots.items():
            _require(
                isinstance(value, str) and value != "",
                where,
                f"slot {domain}.{slot} has an empty or non-string value",
            )
            state.setdefault(domain, {})[slot] = value
    return state


def load_corpus(path) -> list[Dialog]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: not valid JSON ({e})") from e
    _require(isinstance(raw, list), str(path), "top level must be a list of dialogs")
    dialogs = []
    for d_idx, rd in enumerate(raw):
        where = f"dialog {rd.get('id', d_idx)!r}"
        _require(isinstance(rd, dict), where, "dialog must be an object")
        _require("id" in rd, where, "missing id")
        _require(isinstance(rd.get("turns"), list) and rd["turns"], where, "missing turns")
        turns = []
        for t_idx, rt in enumerate(rd["turns"]):
            twhere = f"{where} turn {t_idx}"
            _require(isinstance(rt, dict), twhere, "turn must be an object")
            speaker = rt.get("speaker")
            _require(speaker in ("user", "system"), twhere, f"bad speaker {speaker!r}")
            expected = "user" if t_idx % 2 == 0 else "system"
            _require(speaker == expected, twhere, f"expected {expected} turn")
            _require(
                isinstance(rt.get("utterance"), str), twhere, "missing utterance"
            )
            state = _load_state(rt.get("state_after", {}), twhere)
            if speaker == "system":
                _require(
                    isinstance(rt.get("actions"), list) and rt["actions"],
                    twhere,
                    "system turn missing actions",
                )
                actions = frozenset(ActionLabel.parse(a) for a in rt["actions"])
                spans = [tuple(s) for s in rt.get("spans", [])]
                for slot, start, end in spans:
                    _require(
                        0 <= start < end <= len(rt["utterance"]),
                        twhere,
                        f"span ({slot}, {start}, {end}) out of range",
                    )
                delex = rt.get("delexicalized")
                if delex is None:
                    delex = delexicalize(rt["utterance"], list(spans))
                turns.append(
                    Turn(speaker, rt["utterance"], state, delex, actions, list(spans))
                )
            else:
                turns.append(Turn(speaker, rt["utterance"], state))
        dialogs.append(Dialog(str(rd["id"]), turns, rd.get("goal")))
    return dialogs


def save_corpus(dialogs: list[Dialog], path) -> None:
    out = []
    for d in dialogs:
        rd: dict = {"id": d.id}
        if d.goal is not None:
            rd["goal"] = d.goal
        rd["turns"] = []
        for t in d.turns:
            rt: dict = {
                "speaker": t.speaker,
                "utterance": t.utterance,
                "state_after": t.state_after,
            }
            if t.speaker == "system":
                rt["delexicalized"] = t.delexicalized
                rt["actions"] = sorted(str(a) for a in t.actions or ())
                rt["spans"] = [list(s) for s in t.spans or []]
            rd["turns"].append(rt)
        out.append(rd)
    Path(path).write_text(json.dumps(out, indent=1, sort_keys=True))
