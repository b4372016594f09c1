"""Feedback digestion: user simulator and query reformulators.

The simulator plays hidden judgments back as per-subtopic scores for the
documents just returned. Reformulators turn that record into the next
query: the default blends the old query vector with centroids of
positively and negatively judged documents, decaying the blend weight
geometrically over search iterations. Term-space variants (classic
Rocchio, naive query expansion) exist as ablation arms.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from dynrank.embedspace import embed_term_weights, embed_text, mean_vectors, tokenize
from dynrank.metrics import JudgmentSet


@dataclass(frozen=True)
class RocchioParams:
    """Blend weights: gamma decays per iteration, b/c weight positive/negative centroids."""

    gamma: float = 0.9
    b: float = 0.75
    c: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.b < 0 or self.c < 0:
            raise ValueError(f"b and c must be >= 0, got b={self.b}, c={self.c}")


@dataclass(frozen=True)
class FeedbackRecord:
    """Per-subtopic scores for one returned block of documents.

    ``entries`` holds (doc_id, subtopic_id, score) for every positive
    judgment among the returned documents; ``returned`` is the full block
    in rank order (needed to identify the documents that got no positive
    feedback). Subtopic ids are opaque labels.
    """

    iteration: int
    returned: tuple[str, ...]
    entries: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        if self.iteration < 1:
            raise ValueError(f"iteration must be >= 1, got {self.iteration}")
        block = set(self.returned)
        for doc, subtopic, score in self.entries:
            if doc not in block:
                raise ValueError(f"entry for {doc!r} which is not in the returned block")
            if score < 0:
                raise ValueError(f"negative score {score} for ({doc}, {subtopic})")

    def positive_docs(self) -> set[str]:
        return {doc for doc, _, score in self.entries if score > 0}

    def negative_docs(self) -> set[str]:
        return set(self.returned) - self.positive_docs()


def simulate_feedback(
    judgments: JudgmentSet, topic: str, returned_docs: Sequence[str], n: int
) -> FeedbackRecord:
    """Reveal the judged subtopic scores of one returned block.

    Emits one entry per (document, subtopic) with grade > 0; subtopic
    content and total count never leak beyond the labels present.
    """
    if not returned_docs:
        raise ValueError("returned_docs must be non-empty")
    if not judgments.has_topic(topic):
        raise ValueError(f"unknown topic {topic!r}")
    entries = []
    for doc in returned_docs:
        for subtopic, grade in sorted(judgments.coverage(topic, doc).items()):
            if grade > 0:
                entries.append((doc, subtopic, float(grade)))
    return FeedbackRecord(n, tuple(returned_docs), tuple(entries))


def _vector_map(corpus) -> Mapping[str, np.ndarray]:
    return corpus.vectors if hasattr(corpus, "vectors") else corpus


def rocchio_embed(
    q_n: np.ndarray,
    fb: FeedbackRecord,
    corpus,
    params: RocchioParams = RocchioParams(),
    n: int | None = None,
) -> np.ndarray:
    """Reformulate a query vector from one block of feedback.

    q' = (1 - gamma^n (b - c)) q + gamma^n (b mean(D_r) - c mean(D_nr)),
    where D_r are returned documents with any positive feedback and D_nr
    the remaining returned documents. Empty centroids are zero vectors.
    """
    q_n = np.asarray(q_n, dtype=np.float64)
    if n is None:
        n = fb.iteration
    if n < 1:
        raise ValueError(f"iteration must be >= 1, got {n}")
    vectors = _vector_map(corpus)
    dim = q_n.shape[0]

    def centroid(doc_ids) -> np.ndarray:
        vecs = []
        for doc in sorted(doc_ids):
            if doc not in vectors:
                raise ValueError(f"feedback document {doc!r} missing from corpus")
            vecs.append(vectors[doc])
        mean = mean_vectors(vecs, dim=dim)
        if mean.shape[0] != dim:
            raise ValueError(f"dimension mismatch: query {dim}, documents {mean.shape[0]}")
        return mean

    decay = params.gamma**n
    blend = (1.0 - decay * (params.b - params.c)) * q_n
    return blend + decay * (params.b * centroid(fb.positive_docs()) - params.c * centroid(fb.negative_docs()))


def _tf_unit(text: str) -> dict[str, float]:
    counts = Counter(tokenize(text))
    norm = float(np.sqrt(sum(c * c for c in counts.values())))
    if norm == 0.0:
        return {}
    return {t: c / norm for t, c in counts.items()}


def rocchio_classic(
    query_terms: Mapping[str, float],
    fb: FeedbackRecord,
    corpus_texts: Mapping[str, str],
    params: RocchioParams = RocchioParams(),
    n: int | None = None,
    top_terms: int = 50,
) -> dict[str, float]:
    """Classic term-space Rocchio over L2-normalized term frequencies.

    Same blend algebra as the embedding variant, applied to sparse term
    maps; the result keeps only the ``top_terms`` highest-weight terms.
    """
    if n is None:
        n = fb.iteration
    if n < 1:
        raise ValueError(f"iteration must be >= 1, got {n}")

    def centroid(doc_ids) -> dict[str, float]:
        docs = sorted(doc_ids)
        acc: dict[str, float] = {}
        for doc in docs:
            if doc not in corpus_texts:
                raise ValueError(f"feedback document {doc!r} has no text")
            for t, w in _tf_unit(corpus_texts[doc]).items():
                acc[t] = acc.get(t, 0.0) + w
        return {t: w / len(docs) for t, w in acc.items()} if docs else {}

    decay = params.gamma**n
    coef = 1.0 - decay * (params.b - params.c)
    result: dict[str, float] = {t: coef * w for t, w in query_terms.items()}
    for t, w in centroid(fb.positive_docs()).items():
        result[t] = result.get(t, 0.0) + decay * params.b * w
    for t, w in centroid(fb.negative_docs()).items():
        result[t] = result.get(t, 0.0) - decay * params.c * w
    # zero weights mean "absent" in sparse term space
    kept = sorted(
        ((t, w) for t, w in result.items() if w != 0.0),
        key=lambda kv: (-kv[1], kv[0]),
    )[:top_terms]
    return dict(kept)


def nqe_expand(
    query_text: str,
    fb: FeedbackRecord,
    corpus_texts: Mapping[str, str],
    top_m: int,
) -> str:
    """Append the most frequent novel terms of positively judged documents."""
    if top_m < 0:
        raise ValueError(f"top_m must be >= 0, got {top_m}")
    if top_m == 0:
        return query_text
    existing = set(tokenize(query_text))
    counts: Counter = Counter()
    for doc in sorted(fb.positive_docs()):
        if doc not in corpus_texts:
            raise ValueError(f"feedback document {doc!r} has no text")
        counts.update(t for t in tokenize(corpus_texts[doc]) if t not in existing)
    if not counts:
        return query_text
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top_m]
    return query_text + " " + " ".join(t for t, _ in ranked)


# --- Reformulators: callables (state, record) -> new query vector -------

class NoFeedback:
    """Identity reformulation: the query never changes."""

    name = "no-feedback"

    def __call__(self, state, record: FeedbackRecord) -> np.ndarray:
        return state.query


class EmbedRocchioFeedback:
    """Embedding-space Rocchio reformulator over a fixed corpus."""

    name = "embed-rocchio"

    def __init__(self, corpus, params: RocchioParams = RocchioParams()):
        self.vectors = _vector_map(corpus)
        self.params = params

    def __call__(self, state, record: FeedbackRecord) -> np.ndarray:
        return rocchio_embed(state.query, record, self.vectors, self.params, n=record.iteration)


class ClassicRocchioFeedback:
    """Term-space Rocchio; the reformulated term map is re-embedded by hashing.

    Tracks the current term map per topic across iterations.
    """

    name = "classic-rocchio"

    def __init__(
        self,
        corpus_texts: Mapping[str, str],
        query_texts: Mapping[str, str],
        params: RocchioParams = RocchioParams(),
        dim: int = 512,
        seed: int = 0,
        top_terms: int = 50,
    ):
        self.texts = corpus_texts
        self.query_texts = dict(query_texts)
        self.params = params
        self.dim = dim
        self.seed = seed
        self.top_terms = top_terms
        self._terms: dict[str, dict[str, float]] = {}

    def reset(self) -> None:
        self._terms.clear()

    def __call__(self, state, record: FeedbackRecord) -> np.ndarray:
        topic = state.topic_id
        if record.iteration == 1 or topic not in self._terms:
            # a fresh session restarts from the original query terms
            self._terms[topic] = _tf_unit(self.query_texts.get(topic, "") or "")
        new_terms = rocchio_classic(
            self._terms[topic], record, self.texts, self.params,
            n=record.iteration, top_terms=self.top_terms,
        )
        self._terms[topic] = new_terms
        return embed_term_weights(new_terms, self.dim, self.seed)


class NQEFeedback:
    """Naive query expansion; the expanded text is re-embedded by hashing."""

    name = "nqe"

    def __init__(
        self,
        corpus_texts: Mapping[str, str],
        query_texts: Mapping[str, str],
        dim: int = 512,
        seed: int = 0,
        top_m: int = 10,
    ):
        self.texts = corpus_texts
        self.query_texts = dict(query_texts)
        self.dim = dim
        self.seed = seed
        self.top_m = top_m
        self._current: dict[str, str] = {}

    def reset(self) -> None:
        self._current.clear()

    def __call__(self, state, record: FeedbackRecord) -> np.ndarray:
        topic = state.topic_id
        if record.iteration == 1:
            self._current.pop(topic, None)
        text = self._current.get(topic, self.query_texts.get(topic, "") or "")
        expanded = nqe_expand(text, record, self.texts, self.top_m)
        self._current[topic] = expanded
        return embed_text(expanded, self.dim, self.seed)


# --- Replay serialization (JSON lines) ----------------------------------

def records_to_jsonl(records: Sequence[FeedbackRecord]) -> str:
    """One line per entry; returned documents without positive feedback get
    a marker row with a null subtopic and score 0 so the block can be rebuilt."""
    lines = []
    for rec in records:
        by_doc: dict[str, list[tuple[str, float]]] = {d: [] for d in rec.returned}
        for doc, subtopic, score in rec.entries:
            by_doc[doc].append((subtopic, score))
        for doc in rec.returned:
            if by_doc[doc]:
                for subtopic, score in by_doc[doc]:
                    lines.append(json.dumps(
                        {"n": rec.iteration, "doc": doc, "subtopic": subtopic, "score": score},
                        sort_keys=True,
                    ))
            else:
                lines.append(json.dumps(
                    {"n": rec.iteration, "doc": doc, "subtopic": None, "score": 0.0},
                    sort_keys=True,
                ))
    return "\n".join(lines) + ("\n" if lines else "")


def records_from_jsonl(text: str) -> list[FeedbackRecord]:
    by_n: dict[int, tuple[list[str], list[tuple[str, str, float]]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
        n = int(row["n"])
        returned, entries = by_n.setdefault(n, ([], []))
        if row["doc"] not in returned:
            returned.append(row["doc"])
        if row["subtopic"] is not None:
            entries.append((row["doc"], row["subtopic"], float(row["score"])))
    return [
        FeedbackRecord(n, tuple(returned), tuple(entries))
        for n, (returned, entries) in sorted(by_n.items())
    ]
