"""Synthetic multi-domain task-oriented corpus generator.

Desk-scale stand-in for MultiWOZ-format data: goal-driven dialogs with
gold states, domain-stripped action annotation, slot spans on system
turns, and a consistent entity database. Everything is deterministic
given the seed.

System templates are written pre-tokenized (spaces around punctuation) so
that detokenize(tokenize(t)) == t, which keeps exact-match metrics honest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import ActionLabel, Dialog, Turn
from .database import Database


class ConfigError(Exception):
    """Schema unusable for generation."""


@dataclass(frozen=True)
class DomainSpec:
    name: str
    noun: str
    informable: dict[str, tuple[str, ...]]
    requestable: tuple[str, ...]
    book_slots: dict[str, tuple[str, ...]] = field(default_factory=dict)

    @property
    def bookable(self) -> bool:
        return bool(self.book_slots)


@dataclass(frozen=True)
class CorpusSchema:
    domains: dict[str, DomainSpec]
    entities_per_domain: int = 12


_DAYS = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
_AREAS = ("north", "south", "east", "west", "centre")
# word numerals keep people counts lexically distinct from stars/stay digits
_PEOPLE = ("two", "three", "four", "five", "six")


def default_schema() -> CorpusSchema:
    return CorpusSchema(
        domains={
            "restaurant": DomainSpec(
                name="restaurant",
                noun="restaurant",
                informable={
                    "food": ("italian", "chinese", "indian", "british", "thai", "french"),
                    "area": _AREAS,
                    "pricerange": ("cheap", "moderate", "expensive"),
                },
                requestable=("phone", "address", "postcode"),
                book_slots={
                    "bookday": _DAYS,
                    "bookpeople": _PEOPLE,
                },
            ),
            "hotel": DomainSpec(
                name="hotel",
                noun="hotel",
                informable={
                    "area": _AREAS,
                    "pricerange": ("cheap", "moderate", "expensive"),
                    "stars": ("2", "3", "4", "5"),
                },
                requestable=("phone", "address", "postcode"),
                book_slots={
                    "bookday": _DAYS,
                    "bookpeople": _PEOPLE,
                    "bookstay": ("1", "2", "3", "4", "5"),
                },
            ),
            "attraction": DomainSpec(
                name="attraction",
                noun="attraction",
                informable={
                    "area": _AREAS,
                    "type": ("museum", "park", "theatre", "cinema", "college"),
                },
                requestable=("phone", "address", "postcode"),
            ),
        }
    )


_NAME_PARTS = {
    "restaurant": (
        ("golden", "silver", "royal", "jade", "little", "blue", "olive", "amber"),
        ("fork", "dragon", "garden", "table", "spice", "kitchen", "lantern", "plate"),
    ),
    "hotel": (
        ("acorn", "willow", "crown", "garden", "north", "harbour", "maple", "stone"),
        ("lodge", "arms", "house", "inn", "court", "villa", "rest", "manor"),
    ),
    "attraction": (
        ("city", "riverside", "castle", "victoria", "science", "old", "grand", "summer"),
        ("museum", "gallery", "park", "theatre", "college", "gardens", "hall", "cinema"),
    ),
}

_STREETS = ("mill", "king", "bridge", "station", "market", "church", "park", "regent")


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def synthetic_database(schema: CorpusSchema, seed: int) -> Database:
    """Entity database matching the schema; stable for a given seed."""
    rng = np.random.default_rng([int(seed), 17])
    db: Database = {}
    for domain, spec in schema.domains.items():
        firsts, seconds = _NAME_PARTS.get(
            domain, (("new", "old", "east", "west"), ("place", "spot", "stop", "point"))
        )
        combos = [(f, s) for f in firsts for s in seconds]
        order = rng.permutation(len(combos))
        entities = []
        for k in range(schema.entities_per_domain):
            f, s = combos[order[k] % len(combos)]
            entity = {"name": f"the {f} {s}"}
            for slot, values in spec.informable.items():
                entity[slot] = _pick(rng, values)
            if "phone" in spec.requestable:
                entity["phone"] = f"01223 {rng.integers(100000, 999999)}"
            if "address" in spec.requestable:
                entity["address"] = f"{rng.integers(1, 99)} {_pick(rng, _STREETS)} street"
            if "postcode" in spec.requestable:
                entity["postcode"] = f"cb{rng.integers(1, 5)}{rng.integers(1, 9)}"
            entities.append(entity)
        db[domain] = entities
    return db


# --------------------------------------------------------------------------
# Surface templates
# --------------------------------------------------------------------------

_CONSTRAINT_CLAUSES = {
    "food": ("serving {v} food", "that serves {v} food"),
    "area": ("in the {v}", "in the {v} part of town"),
    "pricerange": ("in the {v} price range", "with {v} prices"),
    "stars": ("with {v} stars", "rated {v} stars"),
    "type": ("of the {v} kind", ", ideally a {v}"),
}

_OPENERS = (
    "i am looking for a {noun} {clauses}",
    "i need a {noun} {clauses}",
    "can you find me a {noun} {clauses} ?",
    "hello , i want a {noun} {clauses}",
)

_SWITCH_OPENERS = (
    "i am also looking for a {noun} {clauses}",
    "thanks . could you also find a {noun} {clauses} ?",
    "great . i additionally need a {noun} {clauses}",
)

_ANSWERS = (
    "i would like something {clauses}",
    "something {clauses} please",
    "{clauses} would be great",
)

_REQUEST_WORDING = {"phone": "phone number", "address": "address", "postcode": "postcode"}

_USER_REQUESTS_ONE = (
    "what is the {r1} ?",
    "can i get the {r1} ?",
    "may i have the {r1} , please ?",
)

_USER_REQUESTS_TWO = (
    "what is the {r1} and the {r2} ?",
    "can i get the {r1} and the {r2} ?",
    "please give me the {r1} and the {r2}",
)

_SYSTEM_REQUEST_ONE = (
    "what {s1} do you have in mind ?",
    "is there a particular {s1} you prefer ?",
    "do you have a preferred {s1} ?",
    "any preference on the {s1} ?",
)

_SYSTEM_REQUEST_TWO = (
    "what {s1} and {s2} would you like ?",
    "could you tell me the {s1} and the {s2} you prefer ?",
    "any preference on {s1} or {s2} ?",
)

_REQUEST_SLOT_WORDING = {
    "food": "food type",
    "area": "area",
    "pricerange": "price range",
    "stars": "star rating",
    "type": "attraction type",
}

_OFFER_BASE = (
    "how about [name] ?",
    "i recommend [name] .",
    "[name] would be a great choice .",
    "you could try [name] .",
)

_OFFER_ATTR_CLAUSES = {
    "area": "it is in the [area]",
    "food": "it serves [food] food",
    "pricerange": "it is in the [pricerange] price range",
    "stars": "it has [stars] stars",
    "type": "it is a [type]",
}

_INFORM_ONE = (
    "the {r1} is [{r1}] .",
    "sure , the {r1} is [{r1}] .",
    "of course , their {r1} is [{r1}] .",
)

_INFORM_TWO = (
    "the {r1} is [{r1}] and the {r2} is [{r2}] .",
    "certainly , the {r1} is [{r1}] and the {r2} is [{r2}] .",
)

_INFORM_THREE = (
    "the {r1} is [{r1}] , the {r2} is [{r2}] and the {r3} is [{r3}] .",
)

_USER_BOOK_RESTAURANT = (
    "please book a table for {bookpeople} people on {bookday}",
    "can you book it for {bookpeople} people on {bookday} ?",
    "book it for {bookpeople} on {bookday} please",
)

_USER_BOOK_HOTEL = (
    "please book it for {bookpeople} people for {bookstay} nights starting {bookday}",
    "can you book it for {bookpeople} people and {bookstay} nights from {bookday} ?",
    "i need it for {bookpeople} people , {bookstay} nights , starting {bookday}",
)

_SYSTEM_BOOK = (
    "booking was successful . your reference number is [ref] .",
    "all set ! the reference number is [ref] .",
    "done , the booking went through . reference number [ref] .",
    "your table is booked , reference [ref] .",
)

_REQMORE_TAILS = (
    "is there anything else i can help you with ?",
    "can i help you with anything else ?",
    "anything else i can do for you ?",
)

_USER_CLOSINGS = (
    "thank you , that is all .",
    "thanks , goodbye .",
    "that is everything , thanks !",
)

_SYSTEM_CLOSINGS = (
    "you are welcome . goodbye !",
    "happy to help , goodbye !",
    "glad i could be of assistance . bye !",
    "enjoy your day , goodbye !",
)


def _fill_placeholders(template: str, values: dict[str, str]):
    """Replace [slot] placeholders; returns (text, delex, spans)."""
    out = []
    spans = []
    pos = 0
    cursor = 0
    while True:
        start = template.find("[", cursor)
        if start < 0:
            out.append(template[cursor:])
            break
        end = template.index("]", start)
        slot = template[start + 1 : end]
        literal = template[cursor:start]
        out.append(literal)
        pos += len(literal)
        value = values[slot]
        out.append(value)
        spans.append((slot, pos, pos + len(value)))
        pos += len(value)
        cursor = end + 1
    return "".join(out), template, spans


class _DialogBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.turns: list[Turn] = []
        self.state: dict = {}

    def user(self, text: str, update: dict[str, dict[str, str]]):
        state = {d: dict(s) for d, s in self.state.items()}
        for domain, slots in update.items():
            state.setdefault(domain, {}).update(slots)
        self.state = state
        self.turns.append(Turn("user", text, state))

    def system(self, template: str, values: dict[str, str], actions: set[ActionLabel]):
        text, delex, spans = _fill_placeholders(template, values)
        self.turns.append(
            Turn("system", text, self.state, delex, frozenset(actions), spans)
        )


def _constraint_clause(rng, slot: str, value: str) -> str:
    return _pick(rng, _CONSTRAINT_CLAUSES[slot]).format(v=value)


def _sample_goal(rng, schema: CorpusSchema, db: Database, domain: str) -> dict:
    spec = schema.domains[domain]
    entity = _pick(rng, db[domain])
    n_constraints = int(rng.integers(1, len(spec.informable) + 1)) if len(spec.informable) > 1 else 1
    n_constraints = max(n_constraints, min(2, len(spec.informable)))
    slots = list(spec.informable)
    rng.shuffle(slots)
    constraints = {s: entity[s] for s in slots[:n_constraints]}
    n_requests = int(rng.integers(0, len(spec.requestable) + 1))
    reqs = list(spec.requestable)
    rng.shuffle(reqs)
    requests = sorted(reqs[:n_requests])
    book = spec.bookable and rng.random() < 0.6
    book_values = (
        {s: _pick(rng, vals) for s, vals in spec.book_slots.items()} if book else {}
    )
    return {
        "entity": entity,
        "constraints": constraints,
        "requests": requests,
        "book": book,
        "book_values": book_values,
    }


def _domain_segment(b: _DialogBuilder, rng, spec: DomainSpec, goal: dict, first: bool):
    domain = spec.name
    entity = goal["entity"]
    items = list(goal["constraints"].items())
    rng.shuffle(items)
    if len(items) >= 2 and rng.random() < 0.55:
        cut = int(rng.integers(1, len(items)))
        groups = [items[:cut], items[cut:]]
    else:
        groups = [items]

    # opener with the first constraint group
    noun = spec.noun
    group = groups[0]
    mentioned = dict(group)
    if domain == "attraction" and "type" in mentioned:
        noun = mentioned["type"]
        group = [(s, v) for s, v in group if s != "type"]
    clauses = " ".join(_constraint_clause(rng, s, v) for s, v in group)
    opener = _pick(rng, _OPENERS if first else _SWITCH_OPENERS)
    text = opener.format(noun=noun, clauses=clauses).replace("  ", " ").strip()
    b.user(text, {domain: mentioned})

    # system asks for the remaining groups, user answers
    for pending in groups[1:]:
        slots = [s for s, _ in pending]
        wording = [_REQUEST_SLOT_WORDING[s] for s in slots]
        if len(slots) == 1:
            ask = _pick(rng, _SYSTEM_REQUEST_ONE).format(s1=wording[0])
        else:
            ask = _pick(rng, _SYSTEM_REQUEST_TWO).format(s1=wording[0], s2=wording[1])
        b.system(ask, {}, {ActionLabel("request", s) for s in slots})
        clauses = " and ".join(_constraint_clause(rng, s, v) for s, v in pending)
        b.user(_pick(rng, _ANSWERS).format(clauses=clauses), {domain: dict(pending)})

    # offer, optionally enriched with 1-2 attribute mentions
    offer_actions = {ActionLabel("offer", "name")}
    template = _pick(rng, _OFFER_BASE)
    attrs = [s for s in spec.informable]
    rng.shuffle(attrs)
    n_extra = int(rng.choice([0, 1, 1, 2]))
    extra = attrs[:n_extra]
    if extra:
        template = template.rstrip(" .?") + " . " + " and ".join(
            _OFFER_ATTR_CLAUSES[s] for s in extra
        ) + " ."
        offer_actions |= {ActionLabel("inform", s) for s in extra}
    b.system(template, {s: entity[s] for s in ["name"] + extra}, offer_actions)

    # requested slots
    requests = list(goal["requests"])
    while requests:
        take = 2 if len(requests) >= 2 and rng.random() < 0.45 else 1
        take = 3 if len(requests) == 3 and rng.random() < 0.2 else take
        batch, requests = requests[:take], requests[take:]
        wording = [_REQUEST_WORDING[r] for r in batch]
        if take == 1:
            ask = _pick(rng, _USER_REQUESTS_ONE).format(r1=wording[0])
            answer = _pick(rng, _INFORM_ONE).format(r1=batch[0])
        elif take == 2:
            ask = _pick(rng, _USER_REQUESTS_TWO).format(r1=wording[0], r2=wording[1])
            answer = _pick(rng, _INFORM_TWO).format(r1=batch[0], r2=batch[1])
        else:
            ask = _pick(rng, _USER_REQUESTS_TWO).format(r1=wording[0], r2=wording[1])
            ask = ask.rstrip(" ?") + f" and the {wording[2]} ?"
            answer = _INFORM_THREE[0].format(r1=batch[0], r2=batch[1], r3=batch[2])
        b.user(ask, {})
        acts = {ActionLabel("inform", r) for r in batch}
        if not requests and not goal["book"] and rng.random() < 0.4:
            answer = answer + " " + _pick(rng, _REQMORE_TAILS)
            acts.add(ActionLabel("reqmore"))
        b.system(answer, {r: entity[r] for r in batch}, acts)

    # booking
    if goal["book"]:
        values = goal["book_values"]
        if domain == "hotel":
            ask = _pick(rng, _USER_BOOK_HOTEL).format(**values)
        else:
            ask = _pick(rng, _USER_BOOK_RESTAURANT).format(**values)
        b.user(ask, {domain: dict(values)})
        ref = "".join(_pick(rng, "abcdefghjkmnpqrstuvwxyz23456789") for _ in range(8))
        template = _pick(rng, _SYSTEM_BOOK)
        acts = {ActionLabel("book", "ref")}
        if rng.random() < 0.4:
            template = template + " " + _pick(rng, _REQMORE_TAILS)
            acts.add(ActionLabel("reqmore"))
        b.system(template, {"ref": ref}, acts)


def generate_synthetic_corpus(
    schema: CorpusSchema, n_dialogs: int, seed: int, db: Database | None = None
) -> list[Dialog]:
    """Goal-driven dialogs over the schema; deterministic for a given seed."""
    if not schema.domains or len(schema.domains) < 2:
        raise ConfigError("schema needs at least two domains")
    for spec in schema.domains.values():
        if not spec.informable:
            raise ConfigError(f"domain {spec.name} has no informable slots")
    if schema.entities_per_domain < 5:
        raise ConfigError("need at least 5 entities per domain")
    if db is None:
        db = synthetic_database(schema, seed)

    rng = np.random.default_rng([int(seed), 29])
    dialogs = []
    domain_names = sorted(schema.domains)
    for i in range(n_dialogs):
        n_domains = 2 if rng.random() < 0.4 else 1
        order = [str(x) for x in rng.permutation(domain_names)]
        picked = order[:n_domains]
        b = _DialogBuilder(rng)
        goal = {}
        for pos, domain in enumerate(picked):
            g = _sample_goal(rng, schema, db, domain)
            goal[domain] = {
                "constraints": g["constraints"],
                "requests": g["requests"],
                "book": g["book"],
            }
            _domain_segment(b, rng, schema.domains[domain], g, first=(pos == 0))
        b.user(_pick(rng, _USER_CLOSINGS), {})
        b.system(_pick(rng, _SYSTEM_CLOSINGS), {}, {ActionLabel("bye")})
        dialogs.append(Dialog(f"syn-{seed}-{i:04d}", b.turns, goal))
    return dialogs
