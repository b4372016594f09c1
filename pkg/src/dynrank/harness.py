"""Experiment orchestration: run configs, fold loops, ablations, layer
sweeps, offline scoring and deterministic report emission.

A run is fully determined by its config (seed included): random streams
are forked per fold from (seed, fold index, purpose), so fold results do
not depend on execution order and two identical runs produce
byte-identical report files. Wall time is kept out of the report files
and lands in a separate ``timing.json``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from dynrank import valuenet
from dynrank.data import DataError, Dataset, gen_synthetic, load_letor, load_trec_dd, split_folds
from dynrank.embedspace import cosine
from dynrank.feedback import (
    ClassicRocchioFeedback,
    EmbedRocchioFeedback,
    NQEFeedback,
    RocchioParams,
)
from dynrank.metrics import MetricSpec, RankedList, report_value
from dynrank.policy import EvalResult, PolicyConfig, evaluate_session, train_session
from dynrank.valuenet import NetConfig, init_glorot


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


ABLATION_VARIANTS = ("embed-rocchio", "classic-rocchio", "nqe", "no-feedback")
SWEEP_LAYERS = (1, 2, 3, 4)
COMMANDS = ("train", "evaluate", "ablate", "sweep-layers", "metrics")


@dataclass(frozen=True)
class DatasetSpec:
    """Where the data comes from: generated, topic/qrels/docs files, or LETOR."""

    kind: str = "synthetic"
    num_topics: int = 20
    docs_per_topic: int = 200
    subtopics_per_topic: int = 3
    dim: int = 64
    decoy_clusters: bool = False
    frac_high: float = 0.2
    frac_mid: float = 0.2
    topics_path: str | None = None
    qrels_path: str | None = None
    docs_path: str | None = None
    letor_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "trec_dd", "letor"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "trec_dd" and not (self.topics_path and self.qrels_path and self.docs_path):
            raise ConfigError("trec_dd datasets need topics_path, qrels_path and docs_path")
        if self.kind == "letor" and not self.letor_path:
            raise ConfigError("letor datasets need letor_path")


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = DatasetSpec()
    net: NetConfig = NetConfig()
    policy: PolicyConfig = PolicyConfig()
    rocchio: RocchioParams = RocchioParams()
    metric: MetricSpec = MetricSpec()
    feedback: str = "embed-rocchio"
    folds: int = 5
    seed: int = 0
    out_dir: str = "runs/out"

    def __post_init__(self):
        if self.feedback not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown feedback variant {self.feedback!r}")
        if self.folds < 1:
            raise ConfigError(f"folds must be >= 1, got {self.folds}")


def config_to_dict(config: RunConfig) -> dict:
    return {
        "dataset": dataclasses.asdict(config.dataset),
        "net": valuenet.config_to_dict(config.net),
        "policy": dataclasses.asdict(config.policy),
        "rocchio": dataclasses.asdict(config.rocchio),
        "metric": {
            "target": config.metric.target,
            "report": list(config.metric.report),
            "alpha": config.metric.alpha,
            "bq": config.metric.bq,
        },
        "feedback": config.feedback,
        "folds": config.folds,
        "seed": config.seed,
        "out_dir": config.out_dir,
    }


def config_from_dict(d: dict) -> RunConfig:
    known = {"dataset", "net", "policy", "rocchio", "metric", "feedback", "folds", "seed", "out_dir"}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        metric_d = dict(d.get("metric", {}))
        if "report" in metric_d:
            metric_d["report"] = tuple(metric_d["report"])
        return RunConfig(
            dataset=DatasetSpec(**d.get("dataset", {})),
            net=valuenet.config_from_dict({**valuenet.config_to_dict(NetConfig()), **d.get("net", {})}),
            policy=PolicyConfig(**d.get("policy", {})),
            rocchio=RocchioParams(**d.get("rocchio", {})),
            metric=MetricSpec(**metric_d),
            feedback=d.get("feedback", "embed-rocchio"),
            folds=d.get("folds", 5),
            seed=d.get("seed", 0),
            out_dir=d.get("out_dir", "runs/out"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return config_from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_dataset(spec: DatasetSpec, seed: int = 0) -> Dataset:
    if spec.kind == "synthetic":
        return gen_synthetic(
            spec.num_topics, spec.docs_per_topic, spec.subtopics_per_topic, spec.dim, seed,
            decoy_clusters=spec.decoy_clusters,
            frac_high=spec.frac_high, frac_mid=spec.frac_mid,
        )
    if spec.kind == "trec_dd":
        return load_trec_dd(spec.topics_path, spec.qrels_path, spec.docs_path, dim=spec.dim, seed=seed)
    return load_letor(spec.letor_path)


def _check_dims(config: RunConfig, dataset: Dataset) -> None:
    expected = dataset.input_dim()
    if config.net.input_dim != expected:
        raise ConfigError(
            f"net.input_dim={config.net.input_dim} but the dataset needs {expected} "
            f"({dataset.kind} mode, dim {dataset.dim})"
        )


def make_feedback(config: RunConfig, dataset: Dataset):
    """Build the query reformulator for a variant; returns (fn, notes).

    Term-space variants need document and query text; on vector-only
    corpora they fall back to the identity reformulation and say so.
    """
    name = config.feedback
    notes: list[str] = []
    if name == "no-feedback":
        return None, notes
    if dataset.kind == "feature":
        notes.append(f"feedback {name!r} requires embedded queries; feature mode runs without feedback")
        return None, notes
    if name == "embed-rocchio":
        return EmbedRocchioFeedback(dataset.corpus, config.rocchio), notes
    query_texts = {t: q for t, q in dataset.topics.items() if q}
    if not dataset.texts or len(query_texts) < len(dataset.topics):
        notes.append(f"feedback {name!r} needs document and query text; corpus is vector-only, "
                     "falling back to the identity reformulation")
        return None, notes
    if name == "classic-rocchio":
        return ClassicRocchioFeedback(
            dataset.texts, query_texts, config.rocchio, dim=dataset.dim, seed=config.seed
        ), notes
    return NQEFeedback(dataset.texts, query_texts, dim=dataset.dim, seed=config.seed), notes


@dataclass
class RunReport:
    """Everything a run produced, minus wall time (kept out of the files)."""

    command: str
    config: dict
    folds: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    wall_time: float | None = field(default=None, compare=False)


_SCHEMA = "dynrank-report/1"


def report_to_dict(report: RunReport) -> dict:
    return {
        "schema": _SCHEMA,
        "command": report.command,
        "config": report.config,
        "folds": report.folds,
        "tables": report.tables,
        "notes": report.notes,
    }


def report_from_dict(d: dict) -> RunReport:
    if d.get("schema") != _SCHEMA:
        raise ValueError(f"unsupported report schema {d.get('schema')!r}")
    return RunReport(
        command=d["command"],
        config=d["config"],
        folds=d["folds"],
        tables=d["tables"],
        notes=d["notes"],
    )


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(c) for c in row) + "\n")


def emit_report(report: RunReport, out_dir, formats: Sequence[str] = ("csv", "json")) -> list[Path]:
    """Write the report deterministically; returns the files written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        path = out / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report_to_dict(report), fh, sort_keys=True, indent=1)
            fh.write("\n")
        written.append(path)
    if "csv" in formats:
        for name, rows in sorted(report.tables.items()):
            if name == "evaluation":
                path = out / "evaluation.csv"
                _write_csv(path, ("iteration", "metric_name", "mean", "stddev"), rows)
            elif name == "evaluation_by_fold":
                path = out / "evaluation_by_fold.csv"
                _write_csv(path, ("fold", "iteration", "metric_name", "mean", "stddev"), rows)
            elif name == "ablation":
                path = out / "ablation_summary.csv"
                _write_csv(path, ("variant", "iteration", "metric_name", "mean", "stddev"), rows)
            elif name == "sweep":
                path = out / "sweep_layers.csv"
                _write_csv(path, ("layers", "metric_name", "value"), rows)
            else:
                continue
            written.append(path)
    if report.wall_time is not None:
        with open(out / "timing.json", "w", encoding="utf-8") as fh:
            json.dump({"wall_time_seconds": report.wall_time}, fh)
            fh.write("\n")
    return written


def _fold_rng(seed: int, fold: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng([seed, fold, purpose])


def _ckpt_path(out: Path, fold: int) -> Path:
    return out / "checkpoints" / f"fold{fold}.ckpt"


def _write_train_log(out: Path, fold: int, log) -> None:
    rows = [(s.epoch, float(s.mean_loss), float(s.epsilon)) for s in log]
    _write_csv(out / f"train_fold{fold}.csv", ("epoch", "mean_loss", "epsilon"), rows)


def train_run(config: RunConfig, dataset: Dataset | None = None) -> RunReport:
    """Train one network per fold; writes checkpoints and training logs."""
    if dataset is None:
        dataset = load_dataset(config.dataset, config.seed)
    _check_dims(config, dataset)
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    report = RunReport(command="train", config=config_to_dict(config))
    folds = split_folds(dataset, config.folds, config.seed)
    for i, (train_topics, test_topics) in enumerate(folds):
        params = init_glorot(config.net, _fold_rng(config.seed, i, 1))
        fb, notes = make_feedback(config, dataset)
        report.notes.extend(n for n in notes if n not in report.notes)
        trained, log = train_session(
            params, dataset, fb, config.policy, config.metric,
            topics=train_topics, rng=_fold_rng(config.seed, i, 2),
        )
        valuenet.save(trained, _ckpt_path(out, i))
        _write_train_log(out, i, log)
        report.folds.append({
            "fold": i,
            "train_topics": list(train_topics),
            "test_topics": list(test_topics),
            "epochs": len(log),
            "first_loss": float(log[0].mean_loss),
            "final_loss": float(log[-1].mean_loss),
        })
    return report


def _merge_values(into: dict, result: EvalResult) -> None:
    for (name, it), vals in result.values.items():
        into.setdefault((name, it), {}).update(zip(result.topics, vals))


def _rows_from_values(values: dict) -> list:
    """Aggregate per-topic values in sorted-topic order so identical results
    reduce to identical floats regardless of fold evaluation order."""
    rows = []
    for (name, it), by_topic in values.items():
        arr = np.asarray([by_topic[t] for t in sorted(by_topic)], dtype=np.float64)
        rows.append((it, name, float(arr.mean()), float(arr.std())))
    return sorted(rows, key=lambda r: (r[0], r[1]))


def _write_runfile(out: Path, ranked: dict[str, RankedList]) -> None:
    with open(out / "run.jsonl", "w", encoding="utf-8") as fh:
        for topic in sorted(ranked):
            for it, block in enumerate(ranked[topic].iteration_blocks(), start=1):
                fh.write(json.dumps(
                    {"topic_id": topic, "iteration": it, "doc_ids": block}, sort_keys=True
                ) + "\n")


def evaluate_run(config: RunConfig, dataset: Dataset | None = None) -> RunReport:
    """Greedy evaluation of every fold's test topics using its checkpoint."""
    if dataset is None:
        dataset = load_dataset(config.dataset, config.seed)
    _check_dims(config, dataset)
    out = Path(config.out_dir)
    report = RunReport(command="evaluate", config=config_to_dict(config))
    folds = split_folds(dataset, config.folds, config.seed)
    values: dict = {}
    ranked: dict[str, RankedList] = {}
    by_fold = []
    for i, (train_topics, test_topics) in enumerate(folds):
        path = _ckpt_path(out, i)
        if not path.exists():
            raise DataError(f"missing checkpoint {path}; run 'train' first")
        params = valuenet.load(path)
        fb, notes = make_feedback(config, dataset)
        report.notes.extend(n for n in notes if n not in report.notes)
        result = evaluate_session(
            params, dataset, fb, config.policy, config.metric, topics=test_topics
        )
        _merge_values(values, result)
        ranked.update(result.ranked)
        fold_values: dict = {}
        _merge_values(fold_values, result)
        fold_rows = _rows_from_values(fold_values)
        by_fold.extend((i, it, name, mean, std) for it, name, mean, std in fold_rows)
        report.folds.append({
            "fold": i,
            "test_topics": list(test_topics),
            "evaluation": fold_rows,
        })
    report.tables["evaluation"] = _rows_from_values(values)
    report.tables["evaluation_by_fold"] = by_fold
    out.mkdir(parents=True, exist_ok=True)
    _write_runfile(out, ranked)
    return report


def ablate_run(config: RunConfig, dataset: Dataset | None = None) -> RunReport:
    """Train and evaluate all feedback variants, everything else fixed."""
    if dataset is None:
        dataset = load_dataset(config.dataset, config.seed)
    report = RunReport(command="ablate", config=config_to_dict(config))
    summary = []
    for variant in ABLATION_VARIANTS:
        sub = dataclasses.replace(
            config,
            feedback=variant,
            out_dir=str(Path(config.out_dir) / "ablate" / variant),
        )
        train_rep = train_run(sub, dataset)
        eval_rep = evaluate_run(sub, dataset)
        report.notes.extend(n for n in train_rep.notes + eval_rep.notes if n not in report.notes)
        rows = eval_rep.tables["evaluation"]
        report.tables[f"evaluation:{variant}"] = rows
        emit_report(eval_rep, sub.out_dir)
        summary.extend((variant, it, name, mean, std) for it, name, mean, std in rows)
    report.tables["ablation"] = summary
    return report


def sweep_run(config: RunConfig, dataset: Dataset | None = None) -> RunReport:
    """Repeat training for each stack depth and report the final metric."""
    if dataset is None:
        dataset = load_dataset(config.dataset, config.seed)
    report = RunReport(command="sweep-layers", config=config_to_dict(config))
    primary = config.metric.report[0]
    rows = []
    for layers in SWEEP_LAYERS:
        hidden = config.net.hidden_dims
        if hidden is not None:
            hidden = (hidden[0],) * layers
        net = dataclasses.replace(config.net, layers=layers, hidden_dims=hidden)
        sub = dataclasses.replace(
            config, net=net, out_dir=str(Path(config.out_dir) / "sweep" / f"J{layers}")
        )
        train_run(sub, dataset)
        eval_rep = evaluate_run(sub, dataset)
        emit_report(eval_rep, sub.out_dir)
        final_it = max(it for it, _, _, _ in eval_rep.tables["evaluation"])
        value = next(
            mean for it, name, mean, _ in eval_rep.tables["evaluation"]
            if it == final_it and name == primary
        )
        rows.append((layers, primary, value))
        report.tables[f"evaluation:J{layers}"] = eval_rep.tables["evaluation"]
    report.tables["sweep"] = rows
    return report


def metrics_run(config: RunConfig, run_path, dataset: Dataset | None = None) -> RunReport:
    """Score a run file offline against the config's dataset judgments."""
    if dataset is None:
        dataset = load_dataset(config.dataset, config.seed)
    blocks: dict[str, dict[int, list[str]]] = {}
    with open(run_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                topic, it, doc_ids = str(row["topic_id"]), int(row["iteration"]), list(row["doc_ids"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{run_path}: line {lineno}: {exc}") from None
            blocks.setdefault(topic, {})[it] = doc_ids
    if not blocks:
        raise DataError(f"{run_path}: no run rows")
    max_it = max(max(its) for its in blocks.values())
    values: dict = {}
    for topic in sorted(blocks):
        if not dataset.judgments.has_topic(topic):
            raise DataError(f"{run_path}: no judgments for topic {topic!r}")
        doc_ids: list[str] = []
        boundaries: list[int] = []
        its = blocks[topic]
        for it in range(1, max_it + 1):
            if it in its:
                doc_ids.extend(its[it])
                boundaries.append(len(doc_ids))
            snapshot = RankedList(topic, list(doc_ids), list(boundaries))
            for name in config.metric.report:
                val = report_value(
                    dataset.judgments, topic, snapshot, name, config.metric,
                    k_per_iteration=config.policy.docs_per_iteration,
                )
                values.setdefault((name, it), {})[topic] = val
    report = RunReport(command="metrics", config=config_to_dict(config))
    report.tables["evaluation"] = _rows_from_values(values)
    return report


def run(config: RunConfig, command: str, run_path=None) -> RunReport:
    """Dispatch one command, time it, and write the report files."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    start = time.perf_counter()
    dataset = load_dataset(config.dataset, config.seed)
    if command == "train":
        report = train_run(config, dataset)
    elif command == "evaluate":
        report = evaluate_run(config, dataset)
    elif command == "ablate":
        report = ablate_run(config, dataset)
    elif command == "sweep-layers":
        report = sweep_run(config, dataset)
    else:
        report = metrics_run(config, run_path or Path(config.out_dir) / "run.jsonl", dataset)
    report.wall_time = time.perf_counter() - start
    emit_report(report, config.out_dir)
    return report


# --- Canned profiles --------------------------------------------------------

def default_config(out_dir: str = "runs/default", seed: int = 0) -> RunConfig:
    """Desk-scale dynamic-search profile: full sessions with Rocchio feedback.

    A five-fold train+evaluate takes on the order of ten minutes; pass
    --folds 2 or --iterations 3 to the CLI for quicker passes.
    """
    return RunConfig(
        dataset=DatasetSpec(kind="synthetic", num_topics=20, docs_per_topic=200,
                            subtopics_per_topic=3, dim=64),
        net=NetConfig(layers=3, input_dim=128, hidden_dims=(64, 64, 64),
                      dense_dims=(32, 16), window=5, dropout=0.0,
                      learning_rate=0.3, output="sigmoid", input_scale=16.0),
        policy=PolicyConfig(epsilon=0.5, docs_per_iteration=5, iterations=10,
                            selection="sample", seed=seed, epoch_cap=8, stop_tol=1e-4),
        metric=MetricSpec(target="alpha-ndcg", report=("alpha-ndcg", "nsdcg"), alpha=0.5),
        feedback="embed-rocchio",
        folds=5,
        seed=seed,
        out_dir=out_dir,
    )


def sanity_config(out_dir: str = "runs/sanity", seed: int = 0, folds: int = 5) -> RunConfig:
    """One-shot ranking profile on the desk corpus (no feedback, 1 iteration)."""
    return RunConfig(
        dataset=DatasetSpec(kind="synthetic", num_topics=20, docs_per_topic=200,
                            subtopics_per_topic=3, dim=64),
        net=NetConfig(layers=3, input_dim=128, hidden_dims=(64, 64, 64),
                      dense_dims=(32, 16), window=5, dropout=0.0,
                      learning_rate=0.3, output="sigmoid", input_scale=16.0),
        policy=PolicyConfig(epsilon=0.5, docs_per_iteration=5, iterations=1,
                            selection="sample", seed=seed, epoch_cap=40, stop_tol=0.0),
        metric=MetricSpec(target="ndcg", report=("ndcg@5",)),
        feedback="no-feedback",
        folds=folds,
        seed=seed,
        out_dir=out_dir,
    )


def trend_config(out_dir: str = "runs/trend", seed: int = 0) -> RunConfig:
    """Multi-subtopic profile where feedback matters: relevant documents are
    scarce and hidden facets are confusable with decoy clusters, so judged
    feedback is what steers later iterations."""
    return RunConfig(
        dataset=DatasetSpec(kind="synthetic", num_topics=12, docs_per_topic=200,
                            subtopics_per_topic=6, dim=32, decoy_clusters=True,
                            frac_high=0.06, frac_mid=0.06),
        net=NetConfig(layers=3, input_dim=64, hidden_dims=(32, 32, 32),
                      dense_dims=(16, 8), window=5, dropout=0.0,
                      learning_rate=0.3, output="sigmoid", input_scale=11.3),
        policy=PolicyConfig(epsilon=0.5, docs_per_iteration=5, iterations=10,
                            selection="sample", seed=seed, epoch_cap=20, stop_tol=0.0),
        metric=MetricSpec(target="alpha-ndcg", report=("alpha-ndcg",), alpha=0.5),
        feedback="embed-rocchio",
        folds=2,
        seed=seed,
        out_dir=out_dir,
    )


def sweep_config(out_dir: str = "runs/sweep", seed: int = 0) -> RunConfig:
    """Layer-sweep profile: the one-shot task at a reduced fold count."""
    return sanity_config(out_dir=out_dir, seed=seed, folds=2)


# --- Trivial baselines ----------------------------------------------------

def baseline_ranking(dataset: Dataset, topic: str, method: str, k: int, seed: int = 0) -> RankedList:
    """One-shot ranking by a trivial baseline: 'random' or 'cosine'."""
    pool = sorted(dataset.pools[topic])
    if method == "random":
        topic_key = int.from_bytes(hashlib.blake2b(topic.encode("utf-8"), digest_size=4).digest(), "little")
        rng = np.random.default_rng([seed, topic_key])
        order = [pool[i] for i in rng.permutation(len(pool))]
    elif method == "cosine":
        q = dataset.query_vector(topic)
        order = sorted(pool, key=lambda d: (-cosine(dataset.doc_vector(topic, d), q), d))
    else:
        raise ValueError(f"unknown baseline {method!r}")
    top = order[:k]
    return RankedList(topic, top, [len(top)] if top else [])


def evaluate_baseline(
    dataset: Dataset,
    topics: Sequence[str],
    method: str,
    metric_name: str,
    spec: MetricSpec,
    k: int,
    seed: int = 0,
) -> list[float]:
    """Per-topic values of one report metric for a trivial baseline."""
    out = []
    for topic in topics:
        ranked = baseline_ranking(dataset, topic, method, k, seed)
        out.append(report_value(dataset.judgments, topic, ranked, metric_name, spec, k_per_iteration=k))
    return out
