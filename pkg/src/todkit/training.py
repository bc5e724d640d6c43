"""Optimizers, LR schedule, and the training regimes.

Two-stage training fits a standalone retriever first, hints the corpus with
its self-excluded top-1 responses, then trains the generative model with
alpha-blending. Joint alternating training owns one hybrid model and two
optimizers: a sampled action batch updates the retrieval fork, then a
generation batch updates everything else; hints refresh after every epoch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor, Tape
from .corpus import BlendConfig, TrainingExample, blend_hint
from .index import RetrievalIndex, refresh_hints
from .models import (
    Dropout,
    DualEncoderModel,
    GenerativeDialogModel,
    HybridDialogModel,
    ModelConfig,
    PolyEncoderModel,
    SingleEncoderModel,
    build_model,
    encode_ids,
    pad_batch,
    poly_scores,
)
from .objectives import (
    SamplerConfig,
    aade_loss,
    de_loss,
    ge2e_loss,
    ge2e_similarity,
    inbatch_loss,
    sample_action_batch,
)
from .text import BOS, EOS, HINT, Vocab, tokenize

logger = logging.getLogger(__name__)

RETRIEVAL_KINDS = ("dual", "poly", "action_dual", "action_single")

# index stores context embeddings for single-encoder retrieval, response
# embeddings when a response encoder provides the candidates
EMBED_MODE = {
    "dual": "response",
    "poly": "response",
    "action_dual": "response",
    "action_single": "context",
    "hybrid": "context",
}


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class TrainPlan:
    regime: str  # generative | two_stage | joint_alternating
    retrieval_model: str | None = None
    epochs: int = 6
    retrieval_epochs: int = 10
    batch_size: int = 16
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    blend: BlendConfig = field(default_factory=lambda: BlendConfig(0.05))
    seed: int = 0
    peak_lr: float = 3e-3
    retrieval_peak_lr: float = 1e-3
    warmup_frac: float = 0.05
    max_state_len: int = 40
    max_response_len: int = 36
    hint_max_tokens: int = 28
    clip_norm: float = 1.0
    dropout: float = 0.1
    model_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.regime not in ("generative", "two_stage", "joint_alternating"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == "two_stage" and self.retrieval_model not in RETRIEVAL_KINDS:
            raise ValueError("two_stage requires a retrieval_model")

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self.model_overrides)

    def to_json(self) -> dict:
        return {
            "regime": self.regime,
            "retrieval_model": self.retrieval_model,
            "epochs": self.epochs,
            "retrieval_epochs": self.retrieval_epochs,
            "batch_size": self.batch_size,
            "sampler": {
                "actions_per_batch": self.sampler.actions_per_batch,
                "examples_per_action": self.sampler.examples_per_action,
            },
            "alpha": self.blend.alpha,
            "seed": self.seed,
            "peak_lr": self.peak_lr,
            "retrieval_peak_lr": self.retrieval_peak_lr,
            "warmup_frac": self.warmup_frac,
            "max_state_len": self.max_state_len,
            "max_response_len": self.max_response_len,
            "hint_max_tokens": self.hint_max_tokens,
            "clip_norm": self.clip_norm,
            "dropout": self.dropout,
            "model_overrides": self.model_overrides,
        }

    @classmethod
    def from_json(cls, raw: dict) -> "TrainPlan":
        raw = dict(raw)
        sampler = raw.pop("sampler", {})
        alpha = raw.pop("alpha", 0.05)
        return cls(
            sampler=SamplerConfig(**sampler) if sampler else SamplerConfig(),
            blend=BlendConfig(alpha),
            **raw,
        )


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed named parameter group."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.step_count = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, param in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(param.data)
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for {name} at step {t}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            param.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(opt: Adam, grads: dict[str, np.ndarray], lr: float) -> None:
    opt.step(grads, lr)


def cosine_warmup_lr(step: int, warmup: int, total: int, peak: float) -> float:
    """Linear 0 -> peak over `warmup` steps, then cosine decay to 0 at `total`."""
    if not 0 < warmup < total:
        raise ValueError("need 0 < warmup < total")
    if step <= warmup:
        return peak * step / warmup
    if step >= total:
        return 0.0
    progress = (step - warmup) / (total - warmup)
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))


def _grads_by_name(
    tape: Tape, params: dict[str, Tensor], clip_norm: float = 0.0
) -> dict[str, np.ndarray]:
    grads = {name: tape.grad(t) for name, t in params.items()}
    if clip_norm > 0:
        total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > clip_norm:
            scale = clip_norm / total
            grads = {name: g * scale for name, g in grads.items()}
    return grads


# ---------------------------------------------------------------------------
# Example encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedExample:
    ex: TrainingExample
    ctx_ids: list[int]
    retrieval_ctx_ids: list[int]
    state_tokens: list[int]
    resp_tokens: list[int]
    count_ids: list[int]

    @property
    def actions(self):
        return self.ex.actions

    @property
    def db_bin(self) -> int:
        return self.ex.db_bin


def encode_examples(
    examples: list[TrainingExample], vocab: Vocab, plan: TrainPlan, cfg: ModelConfig
) -> list[EncodedExample]:
    from .database import count_string

    out = []
    for ex in examples:
        out.append(
            EncodedExample(
                ex=ex,
                ctx_ids=encode_ids(vocab, ex.context_text, cfg.max_seq_len),
                retrieval_ctx_ids=encode_ids(vocab, ex.retrieval_context_text, cfg.max_seq_len),
                state_tokens=vocab.encode(tokenize(ex.state_update_target))[
                    : plan.max_state_len
                ],
                resp_tokens=vocab.encode(tokenize(ex.response_target))[
                    : plan.max_response_len
                ],
                count_ids=vocab.encode(tokenize(count_string(ex.db_counts))),
            )
        )
    return out


def vocab_from_examples(examples: list[TrainingExample]) -> Vocab:
    from .pipeline import example_texts

    return Vocab.from_texts(example_texts(examples))


def _decoder_batch(rows: list[tuple[list[int], list[int]]], vocab: Vocab):
    """Build (input ids, pad mask, targets, loss mask) for prefix+target rows."""
    inputs, targets, loss_masks = [], [], []
    for prefix, gen in rows:
        seq_in = prefix + [vocab.bos_id] + gen
        seq_tgt = [0] * len(prefix) + gen + [vocab.eos_id]
        seq_loss = [0.0] * len(prefix) + [1.0] * (len(gen) + 1)
        inputs.append(seq_in)
        targets.append(seq_tgt)
        loss_masks.append(seq_loss)
    ids, pad = pad_batch(inputs)
    width = ids.shape[1]
    tgt = np.zeros((len(rows), width), dtype=np.int64)
    lm = np.zeros((len(rows), width))
    for i, (t, l) in enumerate(zip(targets, loss_masks)):
        tgt[i, : len(t)] = t
        lm[i, : len(l)] = l
    return ids, pad, tgt, lm


def _hint_prefix(
    enc: EncodedExample,
    vocab: Vocab,
    plan: TrainPlan,
    rng: np.random.Generator | None,
    hint_cache: dict[str, list[int]],
) -> list[int]:
    """Decoder prefix: count string plus (at most one) hinted response."""
    prefix = list(enc.count_ids)
    hint = enc.ex.hint
    if hint is None:
        return prefix
    if rng is not None:
        hint = blend_hint(hint, enc.ex.response_target, plan.blend, rng)
    ids = hint_cache.get(hint)
    if ids is None:
        ids = vocab.encode(tokenize(hint))[: plan.hint_max_tokens]
        hint_cache[hint] = ids
    return prefix + [vocab.index[HINT]] + ids


def generation_loss(
    model: GenerativeDialogModel,
    batch: list[EncodedExample],
    vocab: Vocab,
    plan: TrainPlan,
    blend_rng: np.random.Generator | None,
    hint_cache: dict[str, list[int]],
    drop: Dropout | None = None,
) -> tuple[Tensor, Tensor]:
    """(state-update loss, response loss), token-level cross-entropies."""
    enc_ids, enc_pad = pad_batch([e.ctx_ids for e in batch])
    memory = model.encode_context(enc_ids, enc_pad, drop)

    s_ids, s_pad, s_tgt, s_lm = _decoder_batch(
        [([], e.state_tokens) for e in batch], vocab
    )
    s_logits = model.decoder_logits("state", s_ids, s_pad, memory, enc_pad, drop)
    v = s_logits.shape[-1]
    state_loss = ad.cross_entropy_rows(
        ad.reshape(s_logits, (-1, v)), s_tgt.reshape(-1), s_lm.reshape(-1)
    )

    rows = [
        (_hint_prefix(e, vocab, plan, blend_rng, hint_cache), e.resp_tokens)
        for e in batch
    ]
    r_ids, r_pad, r_tgt, r_lm = _decoder_batch(rows, vocab)
    r_logits = model.decoder_logits("response", r_ids, r_pad, memory, enc_pad, drop)
    resp_loss = ad.cross_entropy_rows(
        ad.reshape(r_logits, (-1, v)), r_tgt.reshape(-1), r_lm.reshape(-1)
    )
    return state_loss, resp_loss


# ---------------------------------------------------------------------------
# Retrieval embedding helpers (no-tape batched inference)
# ---------------------------------------------------------------------------


def embed_in_batches(embed_fn, encoded: list[EncodedExample], batch: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, len(encoded), batch):
        outs.append(embed_fn(encoded[i : i + batch]).data)
    return np.concatenate(outs, axis=0)


def embed_sorted(embed_fn, items: list[EncodedExample], length_of, chunk: int = 12) -> Tensor:
    """On-tape embedding in length-sorted chunks (less attention padding).

    Rows come back in the original item order via a gather node.
    """
    n = len(items)
    order = sorted(range(n), key=lambda i: (length_of(items[i]), i))
    parts = [
        embed_fn([items[j] for j in order[i : i + chunk]]) for i in range(0, n, chunk)
    ]
    stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    perm = np.empty(n, dtype=np.int64)
    perm[np.asarray(order)] = np.arange(n)
    if np.array_equal(perm, np.arange(n)):
        return stacked
    return ad.embedding(stacked, perm)


def _length_batches(
    rng: np.random.Generator, lengths: np.ndarray, batch_size: int
) -> list[np.ndarray]:
    """Shuffled batches of similar-length examples; batch order shuffled too."""
    idx = rng.permutation(len(lengths))
    idx = idx[np.argsort(lengths[idx] // 16, kind="stable")]
    batches = [idx[i : i + batch_size] for i in range(0, len(idx), batch_size)]
    return [batches[p] for p in rng.permutation(len(batches))]


def context_embedder(model, drop: Dropout | None = None):
    """Returns encoded-examples -> (n, d) unit context embeddings."""

    def fn(chunk: list[EncodedExample]) -> Tensor:
        if isinstance(model, HybridDialogModel):
            ids, pad = pad_batch([e.ctx_ids for e in chunk])
            bins = np.array([e.db_bin for e in chunk])
            return model.retrieval_embed(ids, bins, pad, drop)
        ids, pad = pad_batch([e.retrieval_ctx_ids for e in chunk])
        return model.embed_context(ids, pad, drop)

    return fn


def ctx_length_of(model):
    if isinstance(model, HybridDialogModel):
        return lambda e: len(e.ctx_ids)
    return lambda e: len(e.retrieval_ctx_ids)


def response_embedder(model, drop: Dropout | None = None):
    def fn(chunk: list[EncodedExample]) -> Tensor:
        ids, pad = pad_batch([e.resp_tokens for e in chunk])
        return model.embed_response(ids, pad, drop)

    return fn


def build_index(model, encoded: list[EncodedExample], kind: str) -> RetrievalIndex:
    mode = EMBED_MODE[kind]
    if mode == "response":
        embedder = lambda chunk: embed_in_batches(response_embedder(model), chunk)
    else:
        embedder = lambda chunk: embed_in_batches(context_embedder(model), chunk)
    return RetrievalIndex.build([e.ex for e in encoded], lambda _: embedder(encoded), mode)


def refresh_corpus_hints(model, encoded: list[EncodedExample], kind: str, index: RetrievalIndex) -> None:
    """Hint every training turn with its self-excluded nearest neighbor."""
    if kind == "poly":
        _poly_refresh(model, encoded, index)
        return
    queries = embed_in_batches(context_embedder(model), encoded)
    refresh_hints([e.ex for e in encoded], index, lambda _: queries)


def _poly_refresh(model: PolyEncoderModel, encoded: list[EncodedExample], index: RetrievalIndex):
    cands = Tensor(index.vectors[None, :, :])
    w = Tensor(1.0)
    pos = {RetrievalIndex.turn_key(e.ex): i for i, e in enumerate(encoded)}
    for i in range(0, len(encoded), 32):
        chunk = encoded[i : i + 32]
        ids, pad = pad_batch([e.retrieval_ctx_ids for e in chunk])
        summaries = model.context_summaries(ids, pad)
        scores = poly_scores(summaries, cands, w).data.copy()
        for j, e in enumerate(chunk):
            self_pos = pos.get(RetrievalIndex.turn_key(e.ex))
            if self_pos is not None:
                scores[j, self_pos] = -np.inf
            e.ex.hint = index.responses[int(np.argmax(scores[j]))]


def poly_top1(model: PolyEncoderModel, ctx_ids: list[int], index: RetrievalIndex):
    """Per-candidate attention scoring over every index entry."""
    ids, pad = pad_batch([ctx_ids])
    summaries = model.context_summaries(ids, pad)
    scores = poly_scores(summaries, Tensor(index.vectors[None, :, :]), Tensor(1.0)).data[0]
    best = int(np.argmax(scores))
    return index.responses[best], index.actions[best], float(scores[best])


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _log(logs: list, step: int, name: str, value: float, lr: float) -> None:
    logs.append({"step": step, "loss_name": name, "value": float(value), "lr": float(lr)})


def _check_finite(loss: Tensor, step: int, name: str) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {name} loss at step {step}")
    return value


def train_retrieval(
    plan: TrainPlan, encoded: list[EncodedExample], vocab: Vocab
) -> tuple[object, list[dict]]:
    kind = plan.retrieval_model
    cfg = plan.model_config(len(vocab))
    model = build_model(kind, cfg, plan.seed)
    params = model.param_dict()
    opt = Adam(params)
    rng = np.random.default_rng([plan.seed, 2])
    drop = Dropout(plan.dropout, np.random.default_rng([plan.seed, 4]))
    logs: list[dict] = []

    lengths = np.array([len(e.retrieval_ctx_ids) for e in encoded])
    if kind in ("action_single", "action_dual"):
        group_size = plan.sampler.actions_per_batch * plan.sampler.examples_per_action
        steps_per_epoch = max(1, len(encoded) // group_size)
    else:
        steps_per_epoch = max(1, int(np.ceil(len(encoded) / plan.batch_size)))
    total = plan.retrieval_epochs * steps_per_epoch
    warmup = max(1, int(plan.warmup_frac * total))
    step = 0
    length_of = ctx_length_of(model)

    for _epoch in range(plan.retrieval_epochs):
        if kind in ("dual", "poly"):
            batches = _length_batches(rng, lengths, plan.batch_size)
        for b in range(steps_per_epoch):
            step += 1
            lr = cosine_warmup_lr(step, warmup, total + 1, plan.retrieval_peak_lr)
            with Tape() as tape:
                if kind == "action_single":
                    groups = sample_action_batch(encoded, plan.sampler, rng)
                    flat = [e for _, members in groups for e in members]
                    emb = embed_sorted(context_embedder(model, drop), flat, length_of)
                    m, n = plan.sampler.actions_per_batch, plan.sampler.examples_per_action
                    batchT = ad.reshape(emb, (m, n, cfg.model_dim))
                    loss = ge2e_loss(ge2e_similarity(batchT, model.w))
                elif kind == "action_dual":
                    groups = sample_action_batch(encoded, plan.sampler, rng)
                    flat = [e for _, members in groups for e in members]
                    m, n = plan.sampler.actions_per_batch, plan.sampler.examples_per_action
                    emb = embed_sorted(context_embedder(model, drop), flat, length_of)
                    ctx = ad.reshape(emb, (m, n, cfg.model_dim))
                    resp = ad.reshape(response_embedder(model, drop)(flat), (m, n, cfg.model_dim))
                    loss = aade_loss(ctx, resp, model.w)
                else:
                    picks = batches[b] if b < len(batches) else []
                    if len(picks) < 2:
                        continue
                    batch = [encoded[i] for i in picks]
                    if kind == "dual":
                        ctx = context_embedder(model, drop)(batch)
                        resp = response_embedder(model, drop)(batch)
                        loss = de_loss(ctx, resp, model.w)
                    else:  # poly
                        ids, pad = pad_batch([e.retrieval_ctx_ids for e in batch])
                        summaries = model.context_summaries(ids, pad, drop)
                        resp = response_embedder(model, drop)(batch)
                        b_n = resp.shape[0]
                        cands = ad.reshape(resp, (1, b_n, cfg.model_dim))
                        loss = inbatch_loss(poly_scores(summaries, cands, model.w))
            value = _check_finite(loss, step, kind)
            tape.backward(loss)
            opt.step(_grads_by_name(tape, params, plan.clip_norm), lr)
            _log(logs, step, f"retrieval/{kind}", value, lr)
    return model, logs


def train_generative(
    plan: TrainPlan,
    encoded: list[EncodedExample],
    vocab: Vocab,
    use_hints: bool,
    model: GenerativeDialogModel | None = None,
) -> tuple[GenerativeDialogModel, list[dict]]:
    cfg = plan.model_config(len(vocab))
    if model is None:
        model = build_model("gen", cfg, plan.seed)
    params = model.param_dict()
    opt = Adam(params)
    shuffle_rng = np.random.default_rng([plan.seed, 1])
    blend_rng = np.random.default_rng([plan.seed, 3]) if use_hints else None
    drop = Dropout(plan.dropout, np.random.default_rng([plan.seed, 4]))
    logs: list[dict] = []
    hint_cache: dict[str, list[int]] = {}

    lengths = np.array([len(e.ctx_ids) for e in encoded])
    steps_per_epoch = max(1, int(np.ceil(len(encoded) / plan.batch_size)))
    total = plan.epochs * steps_per_epoch
    warmup = max(1, int(plan.warmup_frac * total))
    step = 0
    for _epoch in range(plan.epochs):
        for picks in _length_batches(shuffle_rng, lengths, plan.batch_size):
            if len(picks) == 0:
                continue
            step += 1
            lr = cosine_warmup_lr(step, warmup, total + 1, plan.peak_lr)
            batch = [encoded[i] for i in picks]
            with Tape() as tape:
                state_loss, resp_loss = generation_loss(
                    model, batch, vocab, plan, blend_rng, hint_cache, drop
                )
                loss = ad.add(state_loss, resp_loss)
            _check_finite(loss, step, "generation")
            tape.backward(loss)
            opt.step(_grads_by_name(tape, params, plan.clip_norm), lr)
            _log(logs, step, "gen/state", state_loss.item(), lr)
            _log(logs, step, "gen/response", resp_loss.item(), lr)
    return model, logs


def train_two_stage(plan: TrainPlan, examples: list[TrainingExample], vocab: Vocab):
    """Retriever first; its hints feed alpha-blended generator training."""
    if plan.regime != "two_stage":
        raise ValueError("plan regime must be two_stage")
    cfg = plan.model_config(len(vocab))
    encoded = encode_examples(examples, vocab, plan, cfg)
    retriever, logs = train_retrieval(plan, encoded, vocab)
    index = build_index(retriever, encoded, plan.retrieval_model)
    refresh_corpus_hints(retriever, encoded, plan.retrieval_model, index)
    gen, gen_logs = train_generative(plan, encoded, vocab, use_hints=True)
    return retriever, gen, index, logs + gen_logs


def train_pure_generative(plan: TrainPlan, examples: list[TrainingExample], vocab: Vocab):
    cfg = plan.model_config(len(vocab))
    encoded = encode_examples(examples, vocab, plan, cfg)
    return train_generative(plan, encoded, vocab, use_hints=False)


def train_joint_alternating(
    plan: TrainPlan, examples: list[TrainingExample], vocab: Vocab
) -> tuple[HybridDialogModel, RetrievalIndex, list[dict]]:
    """Alternating updates: retrieval fork via action batches, rest via
    generation batches; hints rebuilt from the live encoder each epoch."""
    if plan.regime != "joint_alternating":
        raise ValueError("plan regime must be joint_alternating")
    cfg = plan.model_config(len(vocab))
    encoded = encode_examples(examples, vocab, plan, cfg)
    model: HybridDialogModel = build_model("hybrid", cfg, plan.seed)

    retrieval_params = model.retrieval_group()
    generation_params = model.generation_group()
    assert not set(retrieval_params) & set(generation_params)
    opt_r = Adam(retrieval_params)
    opt_g = Adam(generation_params)

    shuffle_rng = np.random.default_rng([plan.seed, 1])
    sampler_rng = np.random.default_rng([plan.seed, 2])
    blend_rng = np.random.default_rng([plan.seed, 3])
    drop = Dropout(plan.dropout, np.random.default_rng([plan.seed, 4]))
    logs: list[dict] = []
    hint_cache: dict[str, list[int]] = {}

    lengths = np.array([len(e.ctx_ids) for e in encoded])
    steps_per_epoch = max(1, int(np.ceil(len(encoded) / plan.batch_size)))
    total = plan.epochs * steps_per_epoch
    warmup = max(1, int(plan.warmup_frac * total))
    step = 0
    length_of = ctx_length_of(model)

    index = build_index(model, encoded, "hybrid")
    refresh_corpus_hints(model, encoded, "hybrid", index)

    for _epoch in range(plan.epochs):
        for picks in _length_batches(shuffle_rng, lengths, plan.batch_size):
            if len(picks) == 0:
                continue
            step += 1
            lr_r = cosine_warmup_lr(step, warmup, total + 1, plan.retrieval_peak_lr)
            lr_g = cosine_warmup_lr(step, warmup, total + 1, plan.peak_lr)

            # retrieval update (fork + db table + projections + w only)
            groups = sample_action_batch(encoded, plan.sampler, sampler_rng)
            flat = [e for _, members in groups for e in members]
            with Tape() as tape:
                emb = embed_sorted(context_embedder(model, drop), flat, length_of)
                m, n = plan.sampler.actions_per_batch, plan.sampler.examples_per_action
                r_loss = ge2e_loss(ge2e_similarity(ad.reshape(emb, (m, n, cfg.model_dim)), model.w))
            r_value = _check_finite(r_loss, step, "retrieval")
            tape.backward(r_loss)
            opt_r.step(_grads_by_name(tape, retrieval_params, plan.clip_norm), lr_r)
            _log(logs, step, "retrieval/ge2e", r_value, lr_r)

            # generation update (shared encoder, decoders, embeddings)
            batch = [encoded[i] for i in picks]
            with Tape() as tape:
                state_loss, resp_loss = generation_loss(
                    model, batch, vocab, plan, blend_rng, hint_cache, drop
                )
                g_loss = ad.add(state_loss, resp_loss)
            _check_finite(g_loss, step, "generation")
            tape.backward(g_loss)
            opt_g.step(_grads_by_name(tape, generation_params, plan.clip_norm), lr_g)
            _log(logs, step, "gen/state", state_loss.item(), lr_g)
            _log(logs, step, "gen/response", resp_loss.item(), lr_g)

        index = build_index(model, encoded, "hybrid")
        refresh_corpus_hints(model, encoded, "hybrid", index)

    return model, index, logs


def write_logs(logs: list[dict], path) -> None:
    with open(path, "w") as fh:
        for record in logs:
            fh.write(json.dumps(record) + "\n")
