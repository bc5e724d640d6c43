"""Network stacks for generation and retrieval.

One shared context encoder feeds a state-update decoder and a response
decoder (the generative model). The hybrid variant forks the last L encoder
layers into a retrieval encoder conditioned on a discretized database-result
count, producing normalized context embeddings for response retrieval.
Standalone retrievers (dual/poly/single encoder) reuse the same blocks.

All math runs through todkit.autodiff so every model is gradient-checkable.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .text import Vocab, tokenize

logger = logging.getLogger(__name__)

N_DB_BINS = 8


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    model_dim: int = 64
    heads: int = 2
    encoder_layers: int = 4
    forked_layers: int = 1
    decoder_layers: int = 2
    db_embed_size: int = 4
    poly_codes: int = 16
    max_seq_len: int = 96
    ff_dim: int = 128

    def __post_init__(self):
        if not 1 <= self.forked_layers < self.encoder_layers:
            raise ValueError("need 1 <= forked_layers < encoder_layers")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.poly_codes < 1 or self.db_embed_size < 1:
            raise ValueError("poly_codes and db_embed_size must be >= 1")


class Module:
    """Tiny parameter registry: children and tensors found by attribute walk."""

    def named_params(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_params(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}.")

    def param_dict(self) -> dict[str, Tensor]:
        return dict(self.named_params())

    def n_params(self) -> int:
        return sum(t.data.size for _, t in self.named_params())

    def load_param_data(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        missing = set(params) ^ set(arrays)
        if missing:
            raise ValueError(f"checkpoint parameter names mismatch: {sorted(missing)[:5]}")
        for name, tensor in params.items():
            if tensor.data.shape != arrays[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            tensor.data[...] = arrays[name]


def _init(rng, *shape, scale=0.08):
    return ad.parameter(rng.standard_normal(shape) * scale)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int):
        self.w = _init(rng, d_in, d_out)
        self.b = ad.parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.affine(x, self.w, self.b)


class Dropout:
    """Training-time dropout state; pass None at inference."""

    def __init__(self, p: float, rng: np.random.Generator):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.p <= 0.0:
            return x
        return ad.dropout(x, self.p, self.rng)


def _drop(x: Tensor, drop: "Dropout | None") -> Tensor:
    return x if drop is None else drop(x)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        self.heads = heads
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        x = ad.reshape(x, (b, t, self.heads, d // self.heads))
        return ad.transpose(x, (0, 2, 1, 3))

    def __call__(self, q: Tensor, kv: Tensor, mask: np.ndarray | None) -> Tensor:
        b, t, d = q.shape
        heads_out = ad.attention(
            self._split(self.wq(q)),
            self._split(self.wk(kv)),
            self._split(self.wv(kv)),
            mask=None if mask is None else mask[:, None, :, :],
        )
        merged = ad.reshape(ad.transpose(heads_out, (0, 2, 1, 3)), (b, t, d))
        return self.wo(merged)


class FeedForward(Module):
    def __init__(self, rng, dim: int, hidden: int):
        self.w1 = Linear(rng, dim, hidden)
        self.w2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.relu(self.w1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, rng, dim: int, heads: int, ff_dim: int):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_dim)

    def __call__(self, x: Tensor, mask: np.ndarray | None, drop=None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, _drop(self.attn(h, h, mask), drop))
        return ad.add(x, _drop(self.ff(self.ln2(x)), drop))


class DecoderLayer(Module):
    def __init__(self, rng, dim: int, heads: int, ff_dim: int):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(rng, dim, heads)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(rng, dim, ff_dim)

    def __call__(self, x, memory, self_mask, cross_mask, drop=None) -> Tensor:
        h = self.ln1(x)
        x = ad.add(x, _drop(self.self_attn(h, h, self_mask), drop))
        x = ad.add(x, _drop(self.cross_attn(self.ln2(x), memory, cross_mask), drop))
        return ad.add(x, _drop(self.ff(self.ln3(x)), drop))


class TransformerDecoder(Module):
    """Decoder stack with the output head tied to the token embedding.

    Tying makes token copying (slot values lifted from the context) cheap
    to learn, which matters for from-scratch training at small width.
    """

    def __init__(self, rng, cfg: ModelConfig):
        self.layers = [
            DecoderLayer(rng, cfg.model_dim, cfg.heads, cfg.ff_dim)
            for _ in range(cfg.decoder_layers)
        ]
        self.ln = LayerNorm(cfg.model_dim)
        self.head_bias = ad.parameter(np.zeros(cfg.vocab_size))

    def __call__(self, x, memory, self_mask, cross_mask, token_emb: Tensor, drop=None) -> Tensor:
        for layer in self.layers:
            x = layer(x, memory, self_mask, cross_mask, drop)
        h = self.ln(x)
        return ad.add(ad.matmul(h, ad.transpose(token_emb, (1, 0))), self.head_bias)


def causal_mask(pad_mask: np.ndarray) -> np.ndarray:
    """(B, S) padding mask -> (B, S, S) causal self-attention mask."""
    s = pad_mask.shape[-1]
    tri = np.tril(np.ones((s, s), dtype=bool))
    return tri[None, :, :] & pad_mask[:, None, :]


def cross_mask(dec_pad: np.ndarray, enc_pad: np.ndarray) -> np.ndarray:
    return np.broadcast_to(enc_pad[:, None, :], (enc_pad.shape[0], dec_pad.shape[1], enc_pad.shape[1]))


_warned_truncation = False


def encode_ids(vocab: Vocab, text: str, max_len: int) -> list[int]:
    """Tokenize + encode; overlong inputs keep their most recent tokens."""
    ids = vocab.encode(tokenize(text))
    if len(ids) > max_len:
        global _warned_truncation
        level = logging.DEBUG if _warned_truncation else logging.WARNING
        logger.log(level, "truncating %d-token input to %d (keeping tail)", len(ids), max_len)
        _warned_truncation = True
        ids = ids[-max_len:]
    return ids


def pad_batch(seqs: list[list[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max; returns (ids, bool mask of real tokens)."""
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


class GenerativeDialogModel(Module):
    """Shared context encoder with state-update and response decoders."""

    kind = "gen"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.token_emb = _init(rng, cfg.vocab_size, d)
        self.pos_emb = _init(rng, cfg.max_seq_len, d)
        self.enc_layers = [
            EncoderLayer(rng, d, cfg.heads, cfg.ff_dim) for _ in range(cfg.encoder_layers)
        ]
        self.enc_ln = LayerNorm(d)
        self.state_decoder = TransformerDecoder(rng, cfg)
        self.response_decoder = TransformerDecoder(rng, cfg)

    # -- encoder -----------------------------------------------------------

    def embed_tokens(self, ids: np.ndarray, drop=None) -> Tensor:
        t = ids.shape[-1]
        tok = ad.embedding(self.token_emb, ids)
        pos = ad.embedding(self.pos_emb, np.arange(t))
        return _drop(ad.add(tok, pos), drop)

    def encode_context(
        self, ids: np.ndarray, pad_mask: np.ndarray | None = None, drop=None
    ) -> Tensor:
        """Full K-layer encoder output, one model_dim vector per token."""
        return self.encode_layers(ids, pad_mask, drop)[-1]

    def encode_layers(
        self, ids: np.ndarray, pad_mask: np.ndarray | None = None, drop=None
    ) -> list[Tensor]:
        """Hidden states after each encoder layer (last entry is final-norm)."""
        if ids.shape[-1] > self.cfg.max_seq_len:
            raise ValueError("input longer than max_seq_len; encode_ids should truncate")
        x = self.embed_tokens(ids, drop)
        mask = None
        if pad_mask is not None:
            mask = np.broadcast_to(pad_mask[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        states = []
        for layer in self.enc_layers:
            x = layer(x, mask, drop)
            states.append(x)
        states.append(self.enc_ln(x))
        return states

    # -- decoders ----------------------------------------------------------

    def decoder_logits(
        self,
        which: str,
        dec_ids: np.ndarray,
        dec_pad: np.ndarray,
        memory: Tensor,
        enc_pad: np.ndarray,
        drop=None,
    ) -> Tensor:
        decoder = self.state_decoder if which == "state" else self.response_decoder
        x = self.embed_tokens(dec_ids, drop)
        return decoder(
            x, memory, causal_mask(dec_pad), cross_mask(dec_pad, enc_pad), self.token_emb, drop
        )

    def retrieval_capable(self) -> bool:
        return False


class HybridDialogModel(GenerativeDialogModel):
    """Generative model plus a forked, DB-count-conditioned retrieval encoder."""

    kind = "hybrid"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        d = cfg.model_dim
        self.fork_layers = [
            EncoderLayer(rng, d, cfg.heads, cfg.ff_dim) for _ in range(cfg.forked_layers)
        ]
        # fork starts as a copy of the layers it forks from
        src = self.enc_layers[cfg.encoder_layers - cfg.forked_layers :]
        for fork, orig in zip(self.fork_layers, src):
            fork.load_param_data({k: v.data.copy() for k, v in orig.named_params()})
        self.db_emb = _init(rng, N_DB_BINS, cfg.db_embed_size)
        self.db_proj = Linear(rng, cfg.db_embed_size, d)
        self.out_proj = Linear(rng, d, d)
        self.log_w = ad.parameter(np.log(10.0))

    @property
    def w(self) -> Tensor:
        return ad.exp(self.log_w)

    def shared_states(self, ids: np.ndarray, pad_mask: np.ndarray | None = None, drop=None) -> Tensor:
        """Output of the K-L shared encoder layers (pre-fork)."""
        shared = self.cfg.encoder_layers - self.cfg.forked_layers
        x = self.embed_tokens(ids, drop)
        mask = None
        if pad_mask is not None:
            mask = np.broadcast_to(pad_mask[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        for layer in self.enc_layers[:shared]:
            x = layer(x, mask, drop)
        return x

    def retrieval_embed(
        self,
        ids: np.ndarray,
        db_labels: np.ndarray,
        pad_mask: np.ndarray | None = None,
        drop=None,
    ) -> Tensor:
        """Unit-norm context embedding conditioned on the DB-count bin."""
        db_labels = np.asarray(db_labels, dtype=np.int64)
        if np.any(db_labels < 0) or np.any(db_labels >= N_DB_BINS):
            raise IndexError("db bin label out of range")
        x = self.shared_states(ids, pad_mask, drop)
        cond = self.db_proj(ad.embedding(self.db_emb, db_labels))  # (B, d)
        x = ad.add(x, ad.reshape(cond, (ids.shape[0], 1, self.cfg.model_dim)))
        mask = None
        if pad_mask is not None:
            mask = np.broadcast_to(pad_mask[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        for layer in self.fork_layers:
            x = layer(x, mask, drop)
        pooled = ad.mean_pool(x, pad_mask)
        return ad.l2_normalize(self.out_proj(pooled))

    def retrieval_capable(self) -> bool:
        return True

    def retrieval_group(self) -> dict[str, Tensor]:
        """Parameters owned by the retrieval optimizer under joint training."""
        names = ("fork_layers", "db_emb", "db_proj", "out_proj", "log_w")
        return {
            k: v for k, v in self.named_params() if k.split(".")[0] in names
        }

    def generation_group(self) -> dict[str, Tensor]:
        retrieval = set(self.retrieval_group())
        return {k: v for k, v in self.named_params() if k not in retrieval}


class PooledTextEncoder(Module):
    """Token encoder -> average pooling -> linear reduction -> unit norm."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.model_dim
        self.token_emb = _init(rng, cfg.vocab_size, d)
        self.pos_emb = _init(rng, cfg.max_seq_len, d)
        self.layers = [
            EncoderLayer(rng, d, cfg.heads, cfg.ff_dim) for _ in range(cfg.encoder_layers)
        ]
        self.ln = LayerNorm(d)
        self.reduce = Linear(rng, d, d)

    def token_states(self, ids: np.ndarray, pad_mask: np.ndarray | None = None, drop=None) -> Tensor:
        x = _drop(
            ad.add(
                ad.embedding(self.token_emb, ids),
                ad.embedding(self.pos_emb, np.arange(ids.shape[-1])),
            ),
            drop,
        )
        mask = None
        if pad_mask is not None:
            mask = np.broadcast_to(pad_mask[:, None, :], (ids.shape[0], ids.shape[1], ids.shape[1]))
        for layer in self.layers:
            x = layer(x, mask, drop)
        return self.ln(x)

    def __call__(self, ids: np.ndarray, pad_mask: np.ndarray | None = None, drop=None) -> Tensor:
        pooled = ad.mean_pool(self.token_states(ids, pad_mask, drop), pad_mask)
        return ad.l2_normalize(self.reduce(pooled))


class SingleEncoderModel(Module):
    """One context encoder trained with the action-centroid objective."""

    kind = "action_single"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.context_encoder = PooledTextEncoder(cfg, rng)
        self.log_w = ad.parameter(np.log(10.0))

    @property
    def w(self) -> Tensor:
        return ad.exp(self.log_w)

    def embed_context(self, ids, pad_mask=None, drop=None) -> Tensor:
        return self.context_encoder(ids, pad_mask, drop)


class DualEncoderModel(Module):
    """Context and response encoders sharing an embedding space."""

    kind = "dual"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.context_encoder = PooledTextEncoder(cfg, rng)
        self.response_encoder = PooledTextEncoder(cfg, rng)
        self.log_w = ad.parameter(np.log(10.0))

    @property
    def w(self) -> Tensor:
        return ad.exp(self.log_w)

    def embed_context(self, ids, pad_mask=None, drop=None) -> Tensor:
        return self.context_encoder(ids, pad_mask, drop)

    def embed_response(self, ids, pad_mask=None, drop=None) -> Tensor:
        return self.response_encoder(ids, pad_mask, drop)


class PolyEncoderModel(Module):
    """Dual encoder whose context side keeps m learned query-code summaries."""

    kind = "poly"

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.context_encoder = PooledTextEncoder(cfg, rng)
        self.response_encoder = PooledTextEncoder(cfg, rng)
        self.codes = _init(rng, cfg.poly_codes, cfg.model_dim, scale=0.1)
        self.log_w = ad.parameter(np.log(10.0))

    @property
    def w(self) -> Tensor:
        return ad.exp(self.log_w)

    def context_summaries(self, ids, pad_mask=None, drop=None) -> Tensor:
        """First attention level: m code vectors summarize the context tokens."""
        states = self.context_encoder.token_states(ids, pad_mask, drop)  # (B, T, d)
        b, t, d = states.shape
        m = self.cfg.poly_codes
        q = ad.reshape(self.codes, (1, m, d))
        scores = ad.mul(
            ad.matmul(q, ad.transpose(states, (0, 2, 1))), np.float64(1.0 / np.sqrt(d))
        )  # (B, m, T)
        mask = None if pad_mask is None else np.broadcast_to(pad_mask[:, None, :], (b, m, t))
        return ad.matmul(ad.softmax(scores, mask), states)  # (B, m, d)

    def embed_response(self, ids, pad_mask=None, drop=None) -> Tensor:
        return self.response_encoder(ids, pad_mask, drop)


def poly_context_embed(summaries: Tensor, candidate: Tensor) -> Tensor:
    """Second attention level: the candidate queries the m summaries.

    summaries: (B, m, d); candidate: (B, C, d) unit rows.
    Returns normalized context embeddings of shape (B, C, d).
    """
    b, m, d = summaries.shape
    scores = ad.mul(
        ad.matmul(candidate, ad.transpose(summaries, (0, 2, 1))),
        np.float64(1.0 / np.sqrt(d)),
    )  # (B, C, m)
    agg = ad.matmul(ad.softmax(scores), summaries)  # (B, C, d)
    return ad.l2_normalize(agg)


def poly_scores(summaries: Tensor, candidates: Tensor, w: Tensor) -> Tensor:
    """(B, C) similarity matrix between contexts and candidate embeddings."""
    ctx = poly_context_embed(summaries, candidates)
    sims = ad.reduce_sum(ad.mul(ctx, candidates), axis=-1)  # (B, C)
    return ad.mul(sims, w)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def _step_logits(model, which, dec_ids, memory, enc_pad) -> np.ndarray:
    dec_pad = np.ones(dec_ids.shape, dtype=bool)
    logits = model.decoder_logits(which, dec_ids, dec_pad, memory, enc_pad)
    return logits.data[:, -1, :]


def _log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max(axis=-1, keepdims=True)
    e = np.exp(row - m)
    return row - m - np.log(e.sum(axis=-1, keepdims=True))


def decode_greedy(
    model,
    which: str,
    prefix_ids: list[list[int]],
    memory: Tensor,
    enc_pad: np.ndarray,
    eos_id: int,
    max_len: int,
) -> list[list[int]]:
    """Batched argmax decoding; stops each row at EOS or max_len tokens."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    batch = len(prefix_ids)
    seqs = [list(p) for p in prefix_ids]
    done = [False] * batch
    generated = [[] for _ in range(batch)]
    width = max(len(s) for s in seqs)
    for _ in range(max_len):
        if all(done):
            break
        if width >= model.cfg.max_seq_len:
            break
        padded, _ = pad_batch(seqs)
        # rows decode in lockstep; finished rows keep extending but their
        # output is frozen at the first EOS
        last = np.array([len(s) - 1 for s in seqs])
        dec_pad = np.zeros(padded.shape, dtype=bool)
        for i, s in enumerate(seqs):
            dec_pad[i, : len(s)] = True
        logits = model.decoder_logits(which, padded, dec_pad, memory, enc_pad)
        step = logits.data[np.arange(batch), last, :]
        nxt = step.argmax(axis=-1)
        for i in range(batch):
            if done[i]:
                continue
            token = int(nxt[i])
            if token == eos_id:
                done[i] = True
            else:
                generated[i].append(token)
                seqs[i].append(token)
        width = max(len(s) for s in seqs)
    return generated


def decode_beam(
    model,
    which: str,
    prefix_ids: list[int],
    memory: Tensor,
    enc_pad: np.ndarray,
    eos_id: int,
    max_len: int,
    beam_size: int,
) -> list[int]:
    """Length-normalized beam search for a single example.

    Hypothesis score is total log-probability divided by the number of
    generated tokens; the best finished hypothesis wins. beam_size=1
    reduces to greedy decoding.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    beams = [(list(prefix_ids), [], 0.0)]  # (full ids, generated, logprob)
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        if not beams:
            break
        if len(beams[0][0]) >= model.cfg.max_seq_len:
            for ids, gen, lp in beams:
                finished.append((gen, lp / max(1, len(gen))))
            break
        padded, _ = pad_batch([b[0] for b in beams])
        step = _step_logits(model, which, padded, _tile_memory(memory, len(beams)), np.tile(enc_pad, (len(beams), 1)))
        logp = _log_softmax(step)
        candidates = []
        for bi, (ids, gen, lp) in enumerate(beams):
            order = np.argsort(logp[bi])[::-1][: beam_size + 1]
            for token in order:
                candidates.append((lp + logp[bi, token], bi, int(token)))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_beams = []
        for total, bi, token in candidates:
            if len(new_beams) >= beam_size and len(finished) >= beam_size:
                break
            ids, gen, _ = beams[bi]
            if token == eos_id:
                finished.append((gen, total / max(1, len(gen))))
            elif len(new_beams) < beam_size:
                new_beams.append((ids + [token], gen + [token], total))
        beams = new_beams
    for ids, gen, lp in beams:
        finished.append((gen, lp / max(1, len(gen))))
    if not finished:
        return []
    finished.sort(key=lambda f: (-f[1], len(f[0])))
    return finished[0][0]


def _tile_memory(memory: Tensor, n: int) -> Tensor:
    if memory.shape[0] == n:
        return memory
    return Tensor(np.repeat(memory.data, n, axis=0))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MODEL_CLASSES = {}


def _register(cls):
    _MODEL_CLASSES[cls.kind] = cls
    return cls


for _cls in (
    GenerativeDialogModel,
    HybridDialogModel,
    SingleEncoderModel,
    DualEncoderModel,
    PolyEncoderModel,
):
    _register(_cls)


def build_model(kind: str, cfg: ModelConfig, seed: int):
    rng = np.random.default_rng([seed, 101])
    return _MODEL_CLASSES[kind](cfg, rng)


def save_checkpoint(path, vocab: Vocab, parts: dict[str, Module], meta: dict | None = None, index=None) -> None:
    """Self-describing npz: config + vocab + named parameters (+ index)."""
    payload: dict[str, np.ndarray] = {}
    header = {
        "parts": {},
        "vocab": vocab.tokens,
        "meta": meta or {},
        "has_index": index is not None,
    }
    for part_name, model in parts.items():
        header["parts"][part_name] = {
            "kind": model.kind,
            "config": asdict(model.cfg),
        }
        for pname, tensor in model.named_params():
            payload[f"param/{part_name}/{pname}"] = tensor.data
    if index is not None:
        header["index"] = index.metadata()
        payload["index/vectors"] = index.vectors
        payload["index/db_bins"] = np.asarray(index.db_bins, dtype=np.int64)
    payload["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_checkpoint(path, expect_config: ModelConfig | None = None):
    """Returns (parts dict, vocab, meta, index or None)."""
    from .index import RetrievalIndex

    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        vocab = Vocab(header["vocab"])
        parts = {}
        for part_name, info in header["parts"].items():
            cfg = ModelConfig(**info["config"])
            if expect_config is not None and cfg != expect_config:
                raise ValueError("checkpoint config does not match the expected config")
            model = _MODEL_CLASSES[info["kind"]](cfg, np.random.default_rng(0))
            prefix = f"param/{part_name}/"
            arrays = {
                k[len(prefix) :]: data[k] for k in data.files if k.startswith(prefix)
            }
            model.load_param_data(arrays)
            parts[part_name] = model
        index = None
        if header.get("has_index"):
            index = RetrievalIndex.from_arrays(
                header["index"], data["index/vectors"], data["index/db_bins"]
            )
    return parts, vocab, header.get("meta", {}), index
