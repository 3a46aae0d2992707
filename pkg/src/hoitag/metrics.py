"""Tag-set metrics and the offline rubric used in place of a judge model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .data import HoiPairRecord
from .tokenizer import Tokenizer
from .vocab import ACTIONS, ENTITY_CLASSES, THREAT_ACTIONS

TOP_KS = (1, 3, 5)


@dataclass(frozen=True)
class TagMetricsReport:
    precision: float
    recall: float
    f1: float
    jaccard: float
    top_k: dict = field(default_factory=dict)
    n_samples: int = 0

    def as_row(self) -> dict:
        row = {"precision": self.precision, "recall": self.recall, "f1": self.f1, "jaccard": self.jaccard}
        row.update({f"top{k}": v for k, v in sorted(self.top_k.items())})
        return row


def _unique(seq: Iterable[str]) -> list[str]:
    seen, out = set(), []
    for t in seq:
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def sample_scores(ranked_pred: Sequence[str], truth: Iterable[str], ks=TOP_KS) -> dict:
    """Per-sample precision, recall, Jaccard and top-k hits.

    An empty prediction against an empty truth scores 1 everywhere; any
    other zero denominator scores 0.
    """
    pred = _unique(ranked_pred)
    truth = set(truth)
    if not pred and not truth:
        return {"precision": 1.0, "recall": 1.0, "jaccard": 1.0, **{k: 1.0 for k in ks}}
    p = set(pred)
    tp = len(p & truth)
    fp = len(p - truth)
    fn = len(truth - p)
    out = {
        "precision": tp / (tp + fp) if tp + fp else 0.0,
        "recall": tp / (tp + fn) if tp + fn else 0.0,
        "jaccard": tp / (tp + fp + fn),
    }
    for k in ks:
        out[k] = 1.0 if set(pred[:k]) & truth else 0.0
    return out


def tag_metrics(predictions: Sequence[Sequence[str]], truths: Sequence[Iterable[str]], ks=TOP_KS) -> TagMetricsReport:
    """Macro-averaged tag metrics.

    ``predictions`` holds one confidence-ranked tag list per sample (best
    first); ``truths`` one tag set per sample. F1 is the harmonic mean of the
    macro precision and macro recall.
    """
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} ground-truth samples")
    n = len(predictions)
    if n == 0:
        raise ValueError("at least one sample is required")
    per = [sample_scores(p, t, ks) for p, t in zip(predictions, truths)]
    P = sum(s["precision"] for s in per) / n
    R = sum(s["recall"] for s in per) / n
    J = sum(s["jaccard"] for s in per) / n
    f1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return TagMetricsReport(P, R, f1, J, {k: sum(s[k] for s in per) / n for k in ks}, n)


# ---------------------------------------------------------------------------
# Rubric
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RubricScore:
    coi_proxy: float
    bma_proxy: float
    tdo_proxy: float


def _set_f1(pred: set, truth: set) -> float:
    if not pred and not truth:
        return 1.0
    tp = len(pred & truth)
    if tp == 0:
        return 0.0
    p, r = tp / len(pred), tp / len(truth)
    return 2 * p * r / (p + r)


def extract_triples(text: str, vocab_entities=ENTITY_CLASSES, vocab_actions=ACTIONS) -> set[tuple[str, str, str]]:
    """(h_class, action, o_class) triples from relation sentences "The <h> <a> [and <a>]* the <o>."."""
    words = Tokenizer.split_words(text)
    sentences, cur = [], []
    for w in words:
        if w == ".":
            sentences.append(cur)
            cur = []
        else:
            cur.append(w)
    if cur:
        sentences.append(cur)
    ents, acts = set(vocab_entities), set(vocab_actions)
    found = set()
    for s in sentences:
        if len(s) < 5 or s[0] != "The" or s[1] not in ents or s[-2] != "the" or s[-1] not in ents:
            continue
        middle = s[2:-2]
        verbs = middle[0::2]
        joins = middle[1::2]
        if not verbs or any(v not in acts for v in verbs) or any(j != "and" for j in joins):
            continue
        found.update((s[1], v, s[-1]) for v in verbs)
    return found


def record_triple_names(record: HoiPairRecord, vocab_entities=ENTITY_CLASSES, vocab_actions=ACTIONS):
    return {
        (vocab_entities[record.entity(t.human_idx).class_id], vocab_actions[a],
         vocab_entities[record.entity(t.object_idx).class_id])
        for t in record.triples for a in t.action_ids
    }


def rubric_scores(
    caption: str,
    record: HoiPairRecord,
    vocab_entities=ENTITY_CLASSES,
    vocab_actions=ACTIONS,
    threat_actions=THREAT_ACTIONS,
) -> RubricScore:
    """Deterministic proxies for information correctness, behavior mapping and threat detail.

    coi: F1 of mentioned entity classes vs. the scene's classes.
    bma: F1 of grammar-extracted triples vs. the scene's triples.
    tdo: share of threat triples whose action and both entity names all
    appear in the text (1.0 when the scene has none).
    """
    words = set(Tokenizer.split_words(caption))
    mentioned = {w for w in words if w in vocab_entities}
    coi = _set_f1(mentioned, {vocab_entities[e.class_id] for e in record.entities})
    truth = record_triple_names(record, vocab_entities, vocab_actions)
    bma = _set_f1(extract_triples(caption, vocab_entities, vocab_actions), truth)
    threat = [t for t in truth if t[1] in threat_actions]
    tdo = sum(all(x in words for x in t) for t in threat) / len(threat) if threat else 1.0
    return RubricScore(coi, bma, tdo)


def mean_rubric(scores: Sequence[RubricScore]) -> RubricScore:
    n = len(scores)
    if n == 0:
        raise ValueError("no rubric scores to average")
    return RubricScore(
        sum(s.coi_proxy for s in scores) / n,
        sum(s.bma_proxy for s in scores) / n,
        sum(s.tdo_proxy for s in scores) / n,
    )
