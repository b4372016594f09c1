"""The ranking loop: epsilon-greedy selection, state transitions, rewards,
stepwise training and session evaluation.

A session ranks one topic: per search iteration, the policy picks
``docs_per_iteration`` documents one at a time (each pick conditions the
value network on the list ranked so far), then the simulated user judges
the block and the query is reformulated before the next iteration.
Training performs one squared-loss gradient step per ranked document.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from dynrank import valuenet
from dynrank.data import Dataset
from dynrank.feedback import FeedbackRecord, simulate_feedback
from dynrank.metrics import JudgmentSet, MetricSpec, RankedList, report_value, target_value
from dynrank.valuenet import ValueNetParams


@dataclass(frozen=True)
class PolicyConfig:
    """Exploration, session shape and stopping parameters."""

    epsilon: float = 0.5
    epsilon_decay: float = 0.9
    decay_period: int = 1000
    docs_per_iteration: int = 5
    iterations: int = 10
    selection: str = "sample"  # or "argmax"
    seed: int = 0
    epoch_cap: int = 5000
    stop_tol: float = 1e-4

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 < self.epsilon_decay <= 1.0:
            raise ValueError(f"epsilon_decay must be in (0, 1], got {self.epsilon_decay}")
        if self.decay_period < 1 or self.docs_per_iteration < 1 or self.iterations < 1:
            raise ValueError("decay_period, docs_per_iteration and iterations must be >= 1")
        if self.selection not in ("sample", "argmax"):
            raise ValueError(f"selection must be 'sample' or 'argmax', got {self.selection!r}")
        if self.epoch_cap < 1:
            raise ValueError(f"epoch_cap must be >= 1, got {self.epoch_cap}")


def epsilon_schedule(
    completed_epochs: int,
    epsilon0: float = 0.5,
    decay: float = 0.9,
    period: int = 1000,
) -> float:
    """Exploration rate after a number of completed epochs (decays stepwise)."""
    if completed_epochs < 0:
        raise ValueError(f"completed_epochs must be >= 0, got {completed_epochs}")
    return epsilon0 * decay ** (completed_epochs // period)


@dataclass
class SessionState:
    """Search context: current query, ranked list and remaining candidates."""

    topic_id: str
    query: np.ndarray
    vectors: Mapping[str, np.ndarray]
    ranked: tuple[tuple[str, np.ndarray], ...] = ()
    candidates: frozenset[str] = frozenset()
    n: int = 1
    # cached candidate matrix, built lazily for batched scoring
    _matrix: np.ndarray | None = field(default=None, repr=False)
    _row_of: dict[str, int] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"iteration index must be >= 1, got {self.n}")
        ranked_ids = [d for d, _ in self.ranked]
        if len(set(ranked_ids)) != len(ranked_ids):
            raise ValueError("duplicate documents in ranked list")
        if set(ranked_ids) & self.candidates:
            raise ValueError("ranked list and candidate set overlap")

    def ranked_ids(self) -> list[str]:
        return [d for d, _ in self.ranked]


def new_session(dataset: Dataset, topic: str) -> SessionState:
    """Fresh state for one topic: empty ranked list, full candidate pool."""
    if topic not in dataset.topics:
        raise ValueError(f"unknown topic {topic!r}")
    pool = dataset.pools[topic]
    vectors = {d: dataset.doc_vector(topic, d) for d in pool}
    return SessionState(
        topic_id=topic,
        query=dataset.query_vector(topic),
        vectors=vectors,
        candidates=frozenset(pool),
    )


def pair_input(doc_vec: np.ndarray, query: np.ndarray) -> np.ndarray:
    """One network input unit. Feature-mode queries are empty and the
    document's feature vector is the whole unit."""
    if query.size == 0:
        return doc_vec
    return np.concatenate([doc_vec, query])


def forward_inputs(state: SessionState, window: int | None = None) -> list[np.ndarray]:
    """Input sequence for the current ranked list, most recent last."""
    ranked = state.ranked if window is None else state.ranked[-window:]
    return [pair_input(vec, state.query) for _, vec in ranked]


def _ensure_matrix(state: SessionState) -> None:
    if state._matrix is None:
        ids = sorted(state.vectors)
        state._row_of = {d: i for i, d in enumerate(ids)}
        state._matrix = np.stack([state.vectors[d] for d in ids]) if ids else np.zeros((0, 0))


def score_candidates(params: ValueNetParams, state: SessionState) -> dict[str, float]:
    """Value of appending each candidate to the current ranked list.

    Pure eval-mode scoring; candidates share the ranked prefix, so the
    final network step runs batched across them.
    """
    if not state.candidates:
        raise ValueError("no candidates to score")
    _ensure_matrix(state)
    cands = sorted(state.candidates)
    window = params.config.window
    prefix = forward_inputs(state, window - 1) if window > 1 else []
    idx = np.array([state._row_of[c] for c in cands], dtype=np.intp)
    doc_rows = state._matrix[idx]
    if state.query.size:
        rows = np.empty((len(cands), doc_rows.shape[1] + state.query.size))
        rows[:, : doc_rows.shape[1]] = doc_rows
        rows[:, doc_rows.shape[1] :] = state.query
    else:
        rows = doc_rows
    values = valuenet.forward_candidates(params, prefix, rows)
    return {c: float(v) for c, v in zip(cands, values)}


def select_action(
    scores: Mapping[str, float],
    epsilon: float,
    mode: str,
    rng: np.random.Generator,
) -> str:
    """Epsilon-greedy pick over candidate scores.

    With probability epsilon a uniformly random candidate is returned.
    Otherwise 'sample' mode draws proportionally to the scores (shifted
    into the positive range when any score is <= 0) and 'argmax' returns
    the best score, ties broken by ascending doc id.
    """
    if not scores:
        raise ValueError("empty score map")
    ids = sorted(scores)
    if rng.random() < epsilon:
        return ids[rng.integers(len(ids))]
    if mode == "argmax":
        return min(ids, key=lambda d: (-scores[d], d))
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    vals = np.array([scores[d] for d in ids], dtype=np.float64)
    lo = vals.min()
    if lo <= 0.0:
        vals = vals - lo + 1e-6
    probs = vals / vals.sum()
    return ids[rng.choice(len(ids), p=probs)]


def step_transition(state: SessionState, doc_id: str) -> SessionState:
    """Append a candidate to the ranked list and drop it from the pool."""
    if doc_id not in state.candidates:
        raise ValueError(f"{doc_id!r} is not an available candidate")
    return dataclasses.replace(
        state,
        ranked=state.ranked + ((doc_id, state.vectors[doc_id]),),
        candidates=state.candidates - {doc_id},
    )


def session_transition(state: SessionState, new_query: np.ndarray) -> SessionState:
    """Replace the query for the next search iteration; the list stays."""
    new_query = np.asarray(new_query, dtype=np.float64)
    if new_query.shape != state.query.shape:
        raise ValueError(f"query dimension mismatch: {new_query.shape} vs {state.query.shape}")
    return dataclasses.replace(state, query=new_query, n=state.n + 1)


def step_reward(metric: MetricSpec, state: SessionState, judgments: JudgmentSet) -> float:
    """True metric value of the ranked list so far (the regression target)."""
    return target_value(judgments, state.topic_id, state.ranked_ids(), metric)


FeedbackFn = Callable[[SessionState, FeedbackRecord], np.ndarray]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    epsilon: float


def train_session(
    params: ValueNetParams,
    dataset: Dataset,
    feedback_fn: FeedbackFn | None,
    config: PolicyConfig,
    metric: MetricSpec | None = None,
    topics: Sequence[str] | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ValueNetParams, list[EpochStats]]:
    """Stepwise training over full search sessions.

    Every ranked document triggers one gradient step towards the true
    metric of the list so far; after each block the simulator's feedback
    reformulates the query through ``feedback_fn`` (None keeps the query
    fixed). Epochs stop at ``epoch_cap`` or when the relative epoch-loss
    improvement falls below ``stop_tol``.
    """
    metric = metric or MetricSpec()
    topic_list = list(topics) if topics is not None else dataset.topic_ids()
    if not topic_list:
        raise ValueError("empty training topic set")
    for t in topic_list:
        if not dataset.judgments.has_topic(t):
            raise ValueError(f"no judgments for training topic {t!r}")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    lr = params.config.learning_rate

    log: list[EpochStats] = []
    prev_loss: float | None = None
    for epoch in range(1, config.epoch_cap + 1):
        eps = epsilon_schedule(epoch - 1, config.epsilon, config.epsilon_decay, config.decay_period)
        losses: list[float] = []
        for topic in topic_list:
            state = new_session(dataset, topic)
            for it in range(1, config.iterations + 1):
                block: list[str] = []
                for _ in range(config.docs_per_iteration):
                    if not state.candidates:
                        break
                    scores = score_candidates(params, state)
                    action = select_action(scores, eps, config.selection, rng)
                    state = step_transition(state, action)
                    block.append(action)
                    target = step_reward(metric, state, dataset.judgments)
                    value, cache = valuenet.forward(
                        params, forward_inputs(state, params.config.window), mode="train", rng=rng
                    )
                    grad = valuenet.backward(params, cache, target)
                    params = valuenet.apply_update(params, grad, lr)
                    losses.append((value - target) ** 2)
                if it < config.iterations:
                    if block and feedback_fn is not None:
                        record = simulate_feedback(dataset.judgments, topic, block, state.n)
                        state = session_transition(state, feedback_fn(state, record))
                    else:
                        state = session_transition(state, state.query)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        log.append(EpochStats(epoch, mean_loss, eps))
        # plateau detection: epsilon-greedy losses are noisy, so a large
        # worsening continues training while a tiny change either way stops it
        if prev_loss is not None and prev_loss > 0:
            if abs(prev_loss - mean_loss) / prev_loss < config.stop_tol:
                break
        prev_loss = mean_loss
    return params, log


@dataclass
class EvalResult:
    """Per-topic ranked lists and per-iteration metric values."""

    topics: list[str]
    ranked: dict[str, RankedList]
    values: dict[tuple[str, int], list[float]]  # (metric, iteration) -> per-topic values

    def rows(self) -> list[tuple[int, str, float, float]]:
        """(iteration, metric_name, mean, stddev) rows, sorted."""
        out = []
        for (name, it), vals in self.values.items():
            arr = np.asarray(vals, dtype=np.float64)
            out.append((it, name, float(arr.mean()), float(arr.std())))
        return sorted(out, key=lambda r: (r[0], r[1]))


def evaluate_session(
    params: ValueNetParams,
    dataset: Dataset,
    feedback_fn: FeedbackFn | None,
    config: PolicyConfig,
    metric: MetricSpec | None = None,
    topics: Sequence[str] | None = None,
) -> EvalResult:
    """Greedy (epsilon = 0, argmax) sessions with per-iteration metrics.

    Iteration 1 is a pure one-shot ranking; feedback only applies between
    iterations. Cumulative report metrics are snapshotted after every
    iteration and averaged over topics by the caller via ``rows``.
    """
    metric = metric or MetricSpec()
    topic_list = list(topics) if topics is not None else dataset.topic_ids()
    if not topic_list:
        raise ValueError("empty evaluation topic set")
    for t in topic_list:
        if not dataset.judgments.has_topic(t):
            raise ValueError(f"no judgments for evaluation topic {t!r}")
    rng = np.random.default_rng(config.seed)  # unused at epsilon=0, kept for the API

    ranked_lists: dict[str, RankedList] = {}
    values: dict[tuple[str, int], list[float]] = {}
    for topic in topic_list:
        state = new_session(dataset, topic)
        boundaries: list[int] = []
        for it in range(1, config.iterations + 1):
            block: list[str] = []
            for _ in range(config.docs_per_iteration):
                if not state.candidates:
                    break
                scores = score_candidates(params, state)
                action = select_action(scores, 0.0, "argmax", rng)
                state = step_transition(state, action)
                block.append(action)
            if block:
                boundaries.append(len(state.ranked))
            snapshot = RankedList(topic, state.ranked_ids(), list(boundaries))
            for name in metric.report:
                val = report_value(
                    dataset.judgments, topic, snapshot, name, metric,
                    k_per_iteration=config.docs_per_iteration,
                )
                values.setdefault((name, it), []).append(val)
            if it < config.iterations:
                if block and feedback_fn is not None:
                    record = simulate_feedback(dataset.judgments, topic, block, state.n)
                    state = session_transition(state, feedback_fn(state, record))
                else:
                    state = session_transition(state, state.query)
        ranked_lists[topic] = RankedList(topic, state.ranked_ids(), boundaries)
    return EvalResult(topics=topic_list, ranked=ranked_lists, values=values)
