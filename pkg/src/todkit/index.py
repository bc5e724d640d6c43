"""Exact nearest-neighbor store over normalized turn embeddings.

Entries are kept in corpus order (dialog, then turn), so the first argmax
hit is also the lowest turn id, which fixes tie-breaking. Linear scan only:
desk-scale corpora stay well under 1e5 turns and exactness keeps oracle
tests trivial.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import ActionLabel, TrainingExample


class IndexError_(Exception):
    """Empty index or fully-excluded query."""


class RetrievalIndex:
    def __init__(
        self,
        embed_mode: str,
        vectors: np.ndarray,
        responses: list[str],
        actions: list[frozenset[ActionLabel]],
        turn_keys: list[str],
        db_bins: list[int] | None = None,
    ):
        if embed_mode not in ("context", "response"):
            raise ValueError(f"unknown embed_mode {embed_mode!r}")
        if len(vectors) == 0:
            raise IndexError_("cannot build an empty index")
        norms = np.linalg.norm(vectors, axis=-1)
        if not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError("index vectors must be unit-normalized")
        self.embed_mode = embed_mode
        self.vectors = np.asarray(vectors, dtype=np.float64)
        self.responses = list(responses)
        self.actions = list(actions)
        self.turn_keys = list(turn_keys)
        self.db_bins = list(db_bins) if db_bins is not None else [0] * len(responses)
        self._key_to_pos = {k: i for i, k in enumerate(self.turn_keys)}

    def __len__(self) -> int:
        return len(self.responses)

    @staticmethod
    def turn_key(ex: TrainingExample) -> str:
        return f"{ex.dialog_id}#{ex.turn_idx}"

    @classmethod
    def build(
        cls, examples: list[TrainingExample], embedder, embed_mode: str
    ) -> "RetrievalIndex":
        """One entry per system turn; `embedder(examples) -> (n, d) array`."""
        if not examples:
            raise IndexError_("cannot build an index from an empty corpus")
        vectors = np.asarray(embedder(examples), dtype=np.float64)
        return cls(
            embed_mode,
            vectors,
            [ex.response_target for ex in examples],
            [ex.actions for ex in examples],
            [cls.turn_key(ex) for ex in examples],
            [ex.db_bin for ex in examples],
        )

    def similarities(self, query: np.ndarray) -> np.ndarray:
        return self.vectors @ np.asarray(query, dtype=np.float64)

    def top1(
        self, query: np.ndarray, exclude: str | None = None
    ) -> tuple[str, frozenset[ActionLabel], float]:
        """Best cosine match; ties resolve to the lowest turn id."""
        sims = self.similarities(query)
        if exclude is not None and exclude in self._key_to_pos:
            sims = sims.copy()
            sims[self._key_to_pos[exclude]] = -np.inf
        best = int(np.argmax(sims))
        if not np.isfinite(sims[best]):
            raise IndexError_("every index entry is excluded")
        return self.responses[best], self.actions[best], float(sims[best])

    # -- persistence --------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "embed_mode": self.embed_mode,
            "responses": self.responses,
            "actions": [sorted(str(a) for a in acts) for acts in self.actions],
            "turn_keys": self.turn_keys,
        }

    @classmethod
    def from_arrays(cls, meta: dict, vectors: np.ndarray, db_bins) -> "RetrievalIndex":
        actions = [
            frozenset(ActionLabel.parse(a) for a in acts) for acts in meta["actions"]
        ]
        return cls(
            meta["embed_mode"],
            vectors,
            meta["responses"],
            actions,
            meta["turn_keys"],
            list(np.asarray(db_bins, dtype=np.int64)),
        )

    def dump(self, path) -> None:
        np.savez_compressed(
            path,
            vectors=self.vectors,
            db_bins=np.asarray(self.db_bins, dtype=np.int64),
            meta=np.frombuffer(json.dumps(self.metadata()).encode(), dtype=np.uint8),
        )

    @classmethod
    def load(cls, path) -> "RetrievalIndex":
        with np.load(Path(path)) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            return cls.from_arrays(meta, data["vectors"], data["db_bins"])


def refresh_hints(
    examples: list[TrainingExample], index: RetrievalIndex, embedder
) -> list[TrainingExample]:
    """Assign every example the top-1 hint with its own turn excluded."""
    queries = np.asarray(embedder(examples), dtype=np.float64)
    for ex, q in zip(examples, queries):
        response, _, _ = index.top1(q, exclude=RetrievalIndex.turn_key(ex))
        ex.hint = response
    return examples
