"""Automatic metrics: BLEU, action overlap, diversity, hints, task success,
state tracking, and cluster separation.

All functions are pure and order-invariant over their dialog inputs. The
repo tokenizer is the single tokenization authority for BLEU and the
n-gram diversity measures; inputs are case-folded by that tokenizer.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import ActionLabel, Dialog, DialogState
from .database import Database, active_domain, query
from .text import tokenize

logger = logging.getLogger(__name__)


class MetricError(Exception):
    pass


@dataclass
class MetricReport:
    bleu: float | None = None
    action_iou: float | None = None
    full_match_rate: float | None = None
    no_match_rate: float | None = None
    unique_hints_rate: float | None = None
    inform: float | None = None
    success: float | None = None
    unique_trigrams: int | None = None
    bigram_cond_entropy: float | None = None
    hint_bleu: float | None = None
    hint_copy_rate: float | None = None
    joint_accuracy: float | None = None
    silhouette_domain: float | None = None
    silhouette_action: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str]) -> float:
    """Corpus-level BLEU-4 in [0, 100]: uniform weights, brevity penalty,
    no smoothing (a zero n-gram precision zeroes the score)."""
    if not hypotheses or len(hypotheses) != len(references):
        raise MetricError("need equally many non-empty hypothesis/reference lists")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = tokenize(hyp), tokenize(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, 5):
            h_counts = _ngrams(h, n)
            r_counts = _ngrams(r, n)
            totals[n - 1] += max(0, len(h) - n + 1)
            matches[n - 1] += sum(min(c, r_counts[g]) for g, c in h_counts.items())
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / 4.0
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_precision)


# ---------------------------------------------------------------------------
# Action-set agreement
# ---------------------------------------------------------------------------


def action_set_metrics(
    retrieved: frozenset[ActionLabel], gold: frozenset[ActionLabel]
) -> tuple[float, bool, bool]:
    """(IoU, full-match, no-match) between retrieved and gold action sets."""
    if not gold:
        raise MetricError("gold action set is empty")
    inter = len(retrieved & gold)
    union = len(retrieved | gold)
    return inter / union, retrieved == gold, inter == 0


def action_metrics_over(
    pairs: list[tuple[frozenset[ActionLabel], frozenset[ActionLabel]]]
) -> tuple[float, float, float]:
    """Mean IoU plus full-/no-match rates; empty-gold pairs skipped with a log."""
    ious, fulls, nos = [], 0, 0
    skipped = 0
    for retrieved, gold in pairs:
        if not gold:
            skipped += 1
            continue
        iou, full, no = action_set_metrics(retrieved, gold)
        ious.append(iou)
        fulls += full
        nos += no
    if skipped:
        logger.warning("skipped %d pairs with empty gold action sets", skipped)
    if not ious:
        raise MetricError("no pairs with non-empty gold actions")
    n = len(ious)
    return float(np.mean(ious)), fulls / n, nos / n


# ---------------------------------------------------------------------------
# Lexical diversity
# ---------------------------------------------------------------------------


def diversity_metrics(responses: list[str]) -> tuple[int, float]:
    """(# distinct token trigrams, bigram conditional entropy in bits)."""
    if not responses:
        raise MetricError("empty response list")
    trigrams = set()
    bigrams: Counter = Counter()
    for response in responses:
        toks = tokenize(response)
        trigrams.update(tuple(toks[i : i + 3]) for i in range(len(toks) - 2))
        bigrams.update(tuple(toks[i : i + 2]) for i in range(len(toks) - 1))
    total = sum(bigrams.values())
    if total == 0:
        return 0, 0.0
    first_counts: Counter = Counter()
    for (w1, _), c in bigrams.items():
        first_counts[w1] += c
    bce = 0.0
    for (w1, _), c in bigrams.items():
        p_joint = c / total
        p_cond = c / first_counts[w1]
        bce -= p_joint * math.log2(p_cond)
    return len(trigrams), bce


def unique_hints_rate(hints: list[str]) -> float:
    if not hints:
        raise MetricError("empty hint list")
    return len(set(hints)) / len(hints)


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def hint_metrics(responses: list[str], hints: list[str]) -> tuple[float, float]:
    """(Hint-BLEU, exact-copy rate) between generated responses and hints."""
    if len(responses) != len(hints):
        raise MetricError("responses and hints must align")
    copy = sum(
        _normalize_ws(r) == _normalize_ws(h) for r, h in zip(responses, hints)
    ) / len(responses)
    return corpus_bleu(responses, hints), copy


# ---------------------------------------------------------------------------
# Inform / Success
# ---------------------------------------------------------------------------


def _active_domain_walk(dialog: Dialog) -> list[str | None]:
    """Active domain at each system turn, from gold state updates."""
    domains = []
    active = None
    for i, turn in enumerate(dialog.turns):
        if turn.speaker != "system":
            continue
        initial = dialog.turns[i - 2].state_after if i >= 2 else {}
        updated = dialog.turns[i - 1].state_after
        active = active_domain(initial, updated, fallback=active)
        domains.append(active)
    return domains


def inform_success(
    dialogs: list[Dialog],
    responses_per_dialog: list[list[str]],
    db: Database,
) -> tuple[float, float]:
    """Dialog-level Inform and Success over delexicalized responses.

    Inform: for every goal domain, the database holds an entity satisfying
    the goal constraints and some system response in a turn where that
    domain is active offers an entity placeholder ([name]). Success:
    inform, plus every requested slot's placeholder (and [ref] for booking
    goals) appears in an active-domain response.
    """
    if len(dialogs) != len(responses_per_dialog):
        raise MetricError("responses must align with dialogs")
    informs, successes = [], []
    for dialog, responses in zip(dialogs, responses_per_dialog):
        if dialog.goal is None:
            raise MetricError(f"dialog {dialog.id} has no goal annotation")
        actives = _active_domain_walk(dialog)
        if len(actives) != len(responses):
            raise MetricError(f"dialog {dialog.id}: response count mismatch")
        by_domain: dict[str, list[str]] = {}
        for domain, response in zip(actives, responses):
            if domain is not None:
                by_domain.setdefault(domain, []).append(response)
        informed = True
        succeeded = True
        for domain, goal in dialog.goal.items():
            texts = " ".join(by_domain.get(domain, ()))
            solutions = query(db, domain, goal.get("constraints", {}))
            if not solutions or "[name]" not in texts:
                informed = False
            required = list(goal.get("requests", ()))
            if goal.get("book"):
                required.append("ref")
            if any(f"[{slot}]" not in texts for slot in required):
                succeeded = False
        informs.append(informed)
        successes.append(informed and succeeded)
    return float(np.mean(informs)), float(np.mean(successes))


# ---------------------------------------------------------------------------
# State tracking
# ---------------------------------------------------------------------------


def joint_accuracy(
    predicted: list[DialogState], gold: list[DialogState]
) -> float:
    """Fraction of turns whose full predicted state equals gold exactly.

    Predictions must come from cumulative decoding (each turn builds on the
    previous prediction), so early errors compound; this function only
    compares the aligned results.
    """
    if len(predicted) != len(gold):
        raise MetricError("predicted/gold turn counts differ")
    if not gold:
        raise MetricError("no turns to score")
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)


# ---------------------------------------------------------------------------
# Silhouettes
# ---------------------------------------------------------------------------


def _pairwise_distances(x: np.ndarray) -> np.ndarray:
    # exact difference form (not the a^2+b^2-2ab expansion): silhouette
    # oracles compare to 1e-10, which the expansion cannot hold
    n = x.shape[0]
    out = np.empty((n, n))
    step = max(1, 2**22 // max(1, n * x.shape[1]))
    for i in range(0, n, step):
        diff = x[i : i + step, None, :] - x[None, :, :]
        out[i : i + step] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def silhouette(embeddings: np.ndarray, labels: list) -> float:
    """Mean silhouette coefficient with Euclidean distance, single labels."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = list(labels)
    uniq = sorted(set(labels))
    if len(uniq) < 2:
        raise MetricError("need at least two clusters")
    dist = _pairwise_distances(x)
    members = {c: np.flatnonzero(np.asarray([l == c for l in labels])) for c in uniq}
    scores = np.zeros(len(labels))
    for i, label in enumerate(labels):
        own = members[label]
        if len(own) == 1:
            scores[i] = 0.0
            continue
        a = dist[i, own].sum() / (len(own) - 1)
        b = min(
            dist[i, members[c]].mean() for c in uniq if c != label and len(members[c])
        )
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(scores.mean())


def silhouette_multilabel(embeddings: np.ndarray, label_sets: list[frozenset]) -> float:
    """Silhouette for overlapping clusters, size-weighted over clusters.

    Each label is its own cluster and an example joins every cluster in its
    set. Per-member scores exclude the member itself from any cluster it
    appears in; singleton clusters contribute 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    clusters = sorted({label for s in label_sets for label in s}, key=str)
    if len(clusters) < 2:
        raise MetricError("need at least two clusters")
    dist = _pairwise_distances(x)
    members = {
        c: np.flatnonzero(np.asarray([c in s for s in label_sets])) for c in clusters
    }
    weighted = 0.0
    total_size = 0
    for c in clusters:
        own = members[c]
        size = len(own)
        if size == 0:
            continue
        total_size += size
        if size == 1:
            continue  # contributes 0
        cluster_score = 0.0
        for i in own:
            a = dist[i, own].sum() / (size - 1)
            b = math.inf
            for other in clusters:
                if other == c:
                    continue
                rest = members[other][members[other] != i]
                if len(rest):
                    b = min(b, dist[i, rest].mean())
            if not math.isfinite(b):
                continue
            denom = max(a, b)
            cluster_score += 0.0 if denom == 0 else (b - a) / denom
        weighted += cluster_score  # sum of member scores = size * mean
    if total_size == 0:
        raise MetricError("no cluster members")
    return weighted / total_size


# ---------------------------------------------------------------------------
# Paired t-test helper
# ---------------------------------------------------------------------------


def paired_t_test(a: list[float], b: list[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    from scipy import stats

    result = stats.ttest_rel(a, b)
    return float(result.statistic), float(result.pvalue)
