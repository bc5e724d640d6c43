"""Assembled dialog systems: checkpoint IO, the live inference loop, and
batch prediction passes used by the evaluator.

The per-turn loop mirrors the processing order used in training: encode the
context, decode the state update greedily, merge it, query the database for
the active domain, discretize and embed the result count, retrieve a hint,
then decode and lexicalize the final response.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .corpus import (
    DialogState,
    Dialog,
    Turn,
    apply_state_update,
    parse_state_tokens,
    serialize_context,
    serialize_retrieval_context,
    serialize_state,
    state_diff,
)
from .database import Database, active_domain, bin_count, count_string, query
from .index import RetrievalIndex
from .models import (
    GenerativeDialogModel,
    HybridDialogModel,
    PolyEncoderModel,
    decode_beam,
    decode_greedy,
    encode_ids,
    load_checkpoint,
    pad_batch,
    save_checkpoint,
)
from .text import HINT, Vocab, tokenize

logger = logging.getLogger(__name__)

FALLBACK_RESPONSE = "sorry , could you say that again ?"


@dataclass
class TurnTrace:
    state_update: DialogState
    merged_state: DialogState
    db_counts: dict[str, int]
    bin_label: int
    hint: str | None
    hint_similarity: float | None
    delexicalized_response: str
    lexicalized_response: str

    def to_json(self) -> dict:
        return {
            "state_update": self.state_update,
            "merged_state": self.merged_state,
            "db_counts": self.db_counts,
            "bin_label": self.bin_label,
            "hint": self.hint,
            "hint_similarity": self.hint_similarity,
            "delexicalized_response": self.delexicalized_response,
            "lexicalized_response": self.lexicalized_response,
        }


@dataclass
class ChatSession:
    session_id: str
    seed: int = 0
    history: list[Turn] = field(default_factory=list)
    state: DialogState = field(default_factory=dict)
    active: str | None = None
    last_results: list[dict] = field(default_factory=list)
    turn_count: int = 0


class DialogSystem:
    """A generation model plus (optionally) its retrieval side and index."""

    def __init__(
        self,
        gen: GenerativeDialogModel,
        vocab: Vocab,
        db: Database | None = None,
        retriever=None,
        index: RetrievalIndex | None = None,
        meta: dict | None = None,
    ):
        self.gen = gen
        self.vocab = vocab
        self.db = db or {}
        self.retriever = retriever
        self.index = index
        self.meta = meta or {}

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        parts = {"gen": self.gen}
        if self.retriever is not None:
            parts["retriever"] = self.retriever
        save_checkpoint(path, self.vocab, parts, meta=self.meta, index=self.index)

    @classmethod
    def load(cls, path, db: Database | None = None) -> "DialogSystem":
        parts, vocab, meta, index = load_checkpoint(path)
        return cls(
            parts["gen"], vocab, db=db, retriever=parts.get("retriever"), index=index, meta=meta
        )

    @property
    def retrieval_capable(self) -> bool:
        if self.index is None:
            return False
        return self.retriever is not None or isinstance(self.gen, HybridDialogModel)

    # -- single-turn pieces ----------------------------------------------------

    def _encode_context(self, context_text: str):
        ids = encode_ids(self.vocab, context_text, self.gen.cfg.max_seq_len)
        enc_ids, enc_pad = pad_batch([ids])
        memory = self.gen.encode_context(enc_ids, enc_pad)
        return ids, enc_pad, memory

    def predict_state_update(self, memory, enc_pad, max_len: int = 40) -> DialogState:
        tokens = decode_greedy(
            self.gen, "state", [[self.vocab.bos_id]], memory, enc_pad,
            eos_id=self.vocab.eos_id, max_len=max_len,
        )[0]
        return parse_state_tokens(self.vocab.decode(tokens))

    def retrieve(
        self,
        context_ids: list[int],
        merged_state: DialogState,
        count_str: str,
        history: list[Turn],
        db_bin: int,
    ) -> tuple[str | None, float | None]:
        if not self.retrieval_capable:
            return None, None
        if isinstance(self.gen, HybridDialogModel):
            ids, pad = pad_batch([context_ids])
            emb = self.gen.retrieval_embed(ids, np.array([db_bin]), pad).data[0]
            response, _, sim = self.index.top1(emb)
            return response, sim
        text = serialize_retrieval_context(merged_state, count_str, history)
        ids = encode_ids(self.vocab, text, self.retriever.cfg.max_seq_len)
        if isinstance(self.retriever, PolyEncoderModel):
            from .training import poly_top1

            response, _, sim = poly_top1(self.retriever, ids, self.index)
            return response, sim
        padded, pad = pad_batch([ids])
        emb = self.retriever.embed_context(padded, pad).data[0]
        response, _, sim = self.index.top1(emb)
        return response, sim

    def _response_prefix(self, count_str: str, hint: str | None) -> list[int]:
        prefix = self.vocab.encode(tokenize(count_str)) if count_str else []
        if hint is not None:
            hint_ids = self.vocab.encode(tokenize(hint))[
                : self.meta.get("hint_max_tokens", 28)
            ]
            prefix = prefix + [self.vocab.index[HINT]] + hint_ids
        return prefix

    def generate_response(
        self, memory, enc_pad, count_str: str, hint: str | None,
        decode: str = "greedy", beam_size: int = 8, max_len: int = 36,
    ) -> str:
        prefix = self._response_prefix(count_str, hint)
        if decode == "beam":
            tokens = decode_beam(
                self.gen, "response", prefix + [self.vocab.bos_id], memory, enc_pad,
                eos_id=self.vocab.eos_id, max_len=max_len, beam_size=beam_size,
            )
        else:
            tokens = decode_greedy(
                self.gen, "response", [prefix + [self.vocab.bos_id]], memory, enc_pad,
                eos_id=self.vocab.eos_id, max_len=max_len,
            )[0]
        return " ".join(self.vocab.decode(tokens))

    # -- the live loop ---------------------------------------------------------

    def respond(
        self,
        session: ChatSession,
        user_utterance: str,
        decode: str = "greedy",
        beam_size: int = 8,
        on_stage=None,
    ) -> TurnTrace:
        """One full inference turn; appends both utterances to the history."""
        stage = on_stage or (lambda name: None)
        if not user_utterance.strip():
            return TurnTrace(
                state_update={},
                merged_state=session.state,
                db_counts={},
                bin_label=0,
                hint=None,
                hint_similarity=None,
                delexicalized_response=FALLBACK_RESPONSE,
                lexicalized_response=FALLBACK_RESPONSE,
            )

        history = session.history + [Turn("user", user_utterance, session.state)]
        context_text = serialize_context(history, session.state)
        stage("encode")
        context_ids, enc_pad, memory = self._encode_context(context_text)

        stage("state_update")
        update = self.predict_state_update(memory, enc_pad)
        merged = apply_state_update(session.state, update)

        stage("db_query")
        active = active_domain(session.state, merged, fallback=session.active)
        results: list[dict] = []
        counts: dict[str, int] = {}
        if active is not None and active in self.db and active in merged:
            results = query(self.db, active, merged[active])
            counts = {active: len(results)}
        count_str = count_string(counts)
        label = bin_count(bool(counts), counts.get(active, 0) if active else 0)

        stage("retrieve")
        hint, sim = self.retrieve(context_ids, merged, count_str, history, label)

        stage("respond")
        delex = self.generate_response(
            memory, enc_pad, count_str, hint, decode=decode, beam_size=beam_size
        )
        lexical = lexicalize(
            delex, results, merged, active,
            ref_seed=(session.seed, session.turn_count),
        )

        session.history.append(Turn("user", user_utterance, merged))
        session.history.append(Turn("system", lexical, merged))
        session.state = merged
        session.active = active
        session.last_results = results
        session.turn_count += 1
        return TurnTrace(
            state_update=update,
            merged_state=merged,
            db_counts=counts,
            bin_label=label,
            hint=hint,
            hint_similarity=sim,
            delexicalized_response=delex,
            lexicalized_response=lexical,
        )


def mint_reference(seed_parts) -> str:
    """Deterministic 8-char booking code from the session seed and turn."""
    digest = hashlib.sha256(repr(seed_parts).encode()).hexdigest()
    alphabet = "abcdefghjkmnpqrstuvwxyz23456789"
    return "".join(alphabet[int(digest[i * 2 : i * 2 + 2], 16) % len(alphabet)] for i in range(8))


def lexicalize(
    delex_response: str,
    db_results: list[dict],
    state: DialogState,
    active: str | None,
    ref_seed=(0, 0),
) -> str:
    """Fill [slot] placeholders from the top DB entity or the dialog state.

    Unfillable placeholders stay verbatim (and are logged); values are never
    invented.
    """
    entity = db_results[0] if db_results else {}
    domain_state = state.get(active, {}) if active else {}
    out = []
    cursor = 0
    text = delex_response
    while True:
        start = text.find("[", cursor)
        if start < 0:
            out.append(text[cursor:])
            break
        end = text.find("]", start)
        if end < 0:
            out.append(text[cursor:])
            break
        slot = text[start + 1 : end]
        out.append(text[cursor:start])
        if slot == "ref":
            out.append(mint_reference(ref_seed))
        elif slot in entity:
            out.append(str(entity[slot]))
        elif slot in domain_state:
            out.append(domain_state[slot])
        else:
            logger.debug("unfillable placeholder [%s]", slot)
            out.append(text[start : end + 1])
        cursor = end + 1
    return "".join(out)


# ---------------------------------------------------------------------------
# Batch prediction passes (evaluation)
# ---------------------------------------------------------------------------


def _gold_turn_inputs(dialogs: list[Dialog], db: Database):
    """Per system turn: gold context text, counts, bin, retrieval inputs."""
    rows = []
    for dialog in dialogs:
        active = None
        for i, turn in enumerate(dialog.turns):
            if turn.speaker != "system":
                continue
            initial = dialog.turns[i - 2].state_after if i >= 2 else {}
            updated = dialog.turns[i - 1].state_after
            active = active_domain(initial, updated, fallback=active)
            counts = {}
            if active is not None and active in db and active in updated:
                counts = {active: len(query(db, active, updated[active]))}
            rows.append(
                {
                    "dialog_id": dialog.id,
                    "turn_idx": i,
                    "context_text": serialize_context(dialog.turns[:i], initial),
                    "retrieval_text": serialize_retrieval_context(
                        updated, count_string(counts), dialog.turns[:i]
                    ),
                    "count_str": count_string(counts),
                    "db_bin": bin_count(bool(counts), counts.get(active, 0) if active else 0),
                    "gold_response": turn.delexicalized or "",
                    "gold_actions": turn.actions or frozenset(),
                    "active": active,
                }
            )
    return rows


def predict_responses(
    system: DialogSystem,
    dialogs: list[Dialog],
    db: Database,
    decode: str = "greedy",
    beam_size: int = 8,
    batch: int = 48,
    max_len: int = 36,
) -> list[dict]:
    """Generate one delexicalized response per system turn, gold contexts."""
    rows = _gold_turn_inputs(dialogs, db)
    # retrieval hints first (batched embeddings)
    if system.retrieval_capable:
        _attach_hints(system, rows, batch)
    else:
        for row in rows:
            row["hint"] = None
            row["hint_similarity"] = None

    for i in range(0, len(rows), batch):
        chunk = rows[i : i + batch]
        ctx_ids = [
            encode_ids(system.vocab, r["context_text"], system.gen.cfg.max_seq_len)
            for r in chunk
        ]
        enc_ids, enc_pad = pad_batch(ctx_ids)
        memory = system.gen.encode_context(enc_ids, enc_pad)
        if decode == "beam":
            for j, row in enumerate(chunk):
                mem_j = Tensor(memory.data[j : j + 1])
                prefix = system._response_prefix(row["count_str"], row["hint"])
                tokens = decode_beam(
                    system.gen, "response", prefix + [system.vocab.bos_id],
                    mem_j, enc_pad[j : j + 1], eos_id=system.vocab.eos_id,
                    max_len=max_len, beam_size=beam_size,
                )
                row["response"] = " ".join(system.vocab.decode(tokens))
        else:
            prefixes = [
                system._response_prefix(r["count_str"], r["hint"]) + [system.vocab.bos_id]
                for r in chunk
            ]
            outs = decode_greedy(
                system.gen, "response", prefixes, memory, enc_pad,
                eos_id=system.vocab.eos_id, max_len=max_len,
            )
            for row, tokens in zip(chunk, outs):
                row["response"] = " ".join(system.vocab.decode(tokens))
    return rows


def _attach_hints(system: DialogSystem, rows: list[dict], batch: int) -> None:
    hybrid = isinstance(system.gen, HybridDialogModel)
    poly = isinstance(system.retriever, PolyEncoderModel)
    for i in range(0, len(rows), batch):
        chunk = rows[i : i + batch]
        if hybrid:
            ids = [
                encode_ids(system.vocab, r["context_text"], system.gen.cfg.max_seq_len)
                for r in chunk
            ]
            padded, pad = pad_batch(ids)
            emb = system.gen.retrieval_embed(
                padded, np.array([r["db_bin"] for r in chunk]), pad
            ).data
        elif poly:
            for row in chunk:
                ids = encode_ids(system.vocab, row["retrieval_text"], system.retriever.cfg.max_seq_len)
                from .training import poly_top1

                response, acts, sim = poly_top1(system.retriever, ids, system.index)
                row["hint"], row["hint_actions"], row["hint_similarity"] = response, acts, sim
            continue
        else:
            ids = [
                encode_ids(system.vocab, r["retrieval_text"], system.retriever.cfg.max_seq_len)
                for r in chunk
            ]
            padded, pad = pad_batch(ids)
            emb = system.retriever.embed_context(padded, pad).data
        for row, e in zip(chunk, emb):
            response, acts, sim = system.index.top1(e)
            row["hint"], row["hint_actions"], row["hint_similarity"] = response, acts, sim


def evaluate_system(
    system: DialogSystem,
    dialogs: list[Dialog],
    db: Database,
    decode: str = "greedy",
    beam_size: int = 8,
) -> tuple["MetricReport", list[dict]]:
    """Full automatic-metric report plus per-turn prediction records."""
    from .evaluation import (
        MetricReport,
        action_metrics_over,
        corpus_bleu,
        diversity_metrics,
        hint_metrics,
        inform_success,
        joint_accuracy,
        silhouette,
        silhouette_multilabel,
        unique_hints_rate,
    )
    from .models import PolyEncoderModel

    rows = predict_responses(system, dialogs, db, decode=decode, beam_size=beam_size)
    responses = [r["response"] for r in rows]
    golds = [r["gold_response"] for r in rows]
    report = MetricReport()
    report.bleu = corpus_bleu(responses, golds)
    report.unique_trigrams, report.bigram_cond_entropy = diversity_metrics(responses)

    if system.retrieval_capable:
        hints = [r["hint"] for r in rows]
        report.hint_bleu, report.hint_copy_rate = hint_metrics(responses, hints)
        report.unique_hints_rate = unique_hints_rate(hints)
        pairs = [(r["hint_actions"], r["gold_actions"]) for r in rows]
        report.action_iou, report.full_match_rate, report.no_match_rate = (
            action_metrics_over(pairs)
        )
        if not isinstance(system.retriever, PolyEncoderModel):
            emb = _context_embeddings(system, rows)
            domains = [r["active"] for r in rows]
            keep = [i for i, d in enumerate(domains) if d is not None]
            if len({domains[i] for i in keep}) >= 2:
                report.silhouette_domain = silhouette(
                    emb[keep], [domains[i] for i in keep]
                )
            action_sets = [frozenset(str(a) for a in r["gold_actions"]) for r in rows]
            report.silhouette_action = silhouette_multilabel(emb, action_sets)

    # response records per dialog, in turn order, for Inform/Success
    responses_per_dialog: dict[str, list[str]] = {}
    for r in rows:
        responses_per_dialog.setdefault(r["dialog_id"], []).append(r["response"])
    if all(d.goal is not None for d in dialogs):
        report.inform, report.success = inform_success(
            dialogs, [responses_per_dialog[d.id] for d in dialogs], db
        )

    predicted, gold_states = track_states(system, dialogs)
    report.joint_accuracy = joint_accuracy(predicted, gold_states)
    for row, pred in zip(rows, predicted):
        row["predicted_state"] = pred
    return report, rows


def _context_embeddings(system: DialogSystem, rows: list[dict]) -> np.ndarray:
    from .models import encode_ids as enc_ids_fn

    out = []
    hybrid = isinstance(system.gen, HybridDialogModel)
    model = system.gen if hybrid else system.retriever
    for i in range(0, len(rows), 64):
        chunk = rows[i : i + 64]
        if hybrid:
            ids = [
                enc_ids_fn(system.vocab, r["context_text"], model.cfg.max_seq_len)
                for r in chunk
            ]
            padded, pad = pad_batch(ids)
            out.append(
                system.gen.retrieval_embed(
                    padded, np.array([r["db_bin"] for r in chunk]), pad
                ).data
            )
        else:
            ids = [
                enc_ids_fn(system.vocab, r["retrieval_text"], model.cfg.max_seq_len)
                for r in chunk
            ]
            padded, pad = pad_batch(ids)
            out.append(model.embed_context(padded, pad).data)
    return np.concatenate(out, axis=0)


def write_predictions(rows: list[dict], path) -> None:
    """Line-delimited JSON: {dialog_id, turn_idx, response, hint?, predicted_state}."""
    import json

    with open(path, "w") as fh:
        for r in rows:
            fh.write(
                json.dumps(
                    {
                        "dialog_id": r["dialog_id"],
                        "turn_idx": r["turn_idx"],
                        "response": r["response"],
                        "hint": r.get("hint"),
                        "predicted_state": r.get("predicted_state", {}),
                    }
                )
                + "\n"
            )


def track_states(
    system: DialogSystem, dialogs: list[Dialog], max_len: int = 40, batch: int = 64
) -> tuple[list[DialogState], list[DialogState]]:
    """Cumulative state tracking over whole dialogs.

    Each turn's context embeds the previous *predicted* state, so errors
    compound. Returns (predicted, gold) aligned per user turn across
    dialogs, in dialog order.
    """
    live = [
        {"dialog": d, "state": {}, "preds": [], "golds": []} for d in dialogs
    ]
    max_turns = max(len(d.turns) for d in dialogs)
    for t in range(0, max_turns, 2):  # user turns sit at even indices
        active_rows = [r for r in live if t < len(r["dialog"].turns)]
        if not active_rows:
            break
        for i in range(0, len(active_rows), batch):
            chunk = active_rows[i : i + batch]
            contexts = []
            for r in chunk:
                history = r["dialog"].turns[: t + 1]
                contexts.append(serialize_context(history, r["state"]))
            ctx_ids = [
                encode_ids(system.vocab, c, system.gen.cfg.max_seq_len) for c in contexts
            ]
            enc_ids, enc_pad = pad_batch(ctx_ids)
            memory = system.gen.encode_context(enc_ids, enc_pad)
            outs = decode_greedy(
                system.gen, "state", [[system.vocab.bos_id]] * len(chunk), memory,
                enc_pad, eos_id=system.vocab.eos_id, max_len=max_len,
            )
            for r, tokens in zip(chunk, outs):
                update = parse_state_tokens(system.vocab.decode(tokens))
                r["state"] = apply_state_update(r["state"], update)
                r["preds"].append(r["state"])
                r["golds"].append(r["dialog"].turns[t].state_after)
    predicted, gold = [], []
    for r in live:
        predicted.extend(r["preds"])
        gold.extend(r["golds"])
    return predicted, gold
