# End-to-end orchestration: reformulate, retrieve, normalize, fit, fuse, evaluate
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from src.config import load_config
from src.data_loader import load_corpus, load_qrels, load_run, load_sessions, write_all
from src.errors import ConfigError, StageError
from src.fusion import minmax_normalize
from src.metrics import evaluate_by_level, evaluate_run, parse_metric_spec
from src.reformulate import (
    VARIANT_NAMES,
    HttpChatClient,
    ResponseCache,
    dump_bundles,
    echo_client,
    get_template,
    level_statistics,
    load_fixtures,
    mock_client,
    reformulate_sessions,
)
from src.retrieval import BM25Retriever, Retriever, build_index
from src.session_io import ScoredList, parse_run, write_run
from src.weight_opt import apply_weights, fit_level_weights, group_by_level, parse_weight_table

logger = logging.getLogger(__name__)

FINAL_RUN_TAG = "apcir"


@contextmanager
def stage(name):
    """Re-raise any failure inside the block as a StageError naming the stage."""
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def make_client(config):
    """Chat client for ``reformulation.backend``: echo, mock or http."""
    options = config["reformulation"]
    backend = options["backend"]
    if backend == "echo":
        return echo_client()
    if backend == "mock":
        if not options.get("fixtures"):
            raise ConfigError("The mock backend needs reformulation.fixtures")
        return mock_client(load_fixtures(options["fixtures"]), echo_default=options.get("mock_default", False))
    if backend == "http":
        return HttpChatClient.from_env(model=options["model"], temperature=options["temperature"])
    raise ConfigError(f"Unknown reformulation backend {backend!r}")


def build_retriever(config, corpus):
    options = config["retrieval"]
    index = build_index(
        corpus,
        k1=options["k1"],
        b=options["b"],
        stopwords=options["stopwords"],
        passage_max_tokens=options["passage_max_tokens"] if options["truncate_passages"] else None,
    )
    return BM25Retriever(index)


def variant_tag(topic_id, variant):
    return f"{topic_id}__{variant}"


def retrieve_variants(retriever, bundles, top_k=1000, query_max_tokens=64, response_max_tokens=256, workers=1):
    """
    Retrieve the three texts of every bundle.

    Returns:
        dict[str, dict[str, ScoredList]]: variant name -> run (topic id -> list)
    """
    def search(bundle):
        texts = bundle.retrieval_texts(query_max_tokens, response_max_tokens)
        return [
            retriever.search(text, top_k, topic_id=bundle.topic_id, run_tag=variant_tag(bundle.topic_id, name))
            for name, text in zip(VARIANT_NAMES, texts)
        ]

    # Search in parallel, then regroup by variant
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(search, bundles))
    runs = {name: {} for name in VARIANT_NAMES}
    for bundle, lists in zip(bundles, results):
        for name, scored_list in zip(VARIANT_NAMES, lists):
            runs[name][bundle.topic_id] = scored_list
    return runs


def persisted(run, variant):
    """The run as it reads back from its run file (6-decimal scores), so fusion replays exactly from disk."""
    parsed = parse_run(write_run(run, variant))
    return {topic_id: parsed.get(topic_id, ScoredList(topic_id, variant)).with_tag(variant_tag(topic_id, variant)) for topic_id in run}


def variant_run_path(runs_dir, variant):
    return Path(runs_dir) / f"{variant}.run"


def load_variant_runs(runs_dir):
    """Read runs/<variant>.run for every variant, tagging lists as <topic>__<variant>."""
    runs = {}
    for name in VARIANT_NAMES:
        parsed = load_run(variant_run_path(runs_dir, name))
        runs[name] = {topic_id: scored_list.with_tag(variant_tag(topic_id, name)) for topic_id, scored_list in parsed.items()}
    return runs


def normalize_variants(runs, topic_ids):
    """
    Min-max normalize each variant list and regroup per turn.

    Args:
        runs (Mapping[str, Mapping[str, ScoredList]]): variant name -> run, in VARIANT_NAMES order
        topic_ids (Iterable[str]): Turns to collect

    Returns:
        dict[str, list[ScoredList]]: topic id -> the M normalized lists
    """
    lists_by_topic = {}
    for topic_id in topic_ids:
        lists_by_topic[topic_id] = [
            minmax_normalize(run.get(topic_id, ScoredList(topic_id, variant_tag(topic_id, name))))
            for name, run in runs.items()
        ]
    return lists_by_topic


@dataclass
class SplitData:
    """One dataset split carried through reformulation, retrieval and normalization."""

    name: str
    corpus: dict[str, str]
    sessions: list
    qrels: object
    bundles: list
    runs: dict[str, dict[str, ScoredList]]
    lists_by_topic: dict[str, list[ScoredList]]


def prepare_split(config, client=None, retriever=None):
    """
    Run the per-turn stages (load, reformulate, index, retrieve, normalize) for one config.

    A supplied ``retriever`` replaces the BM25 index built from the corpus.

    Raises:
        StageError: Naming the stage that failed
    """
    paths = config["paths"]
    with stage("load"):
        for key in ("corpus", "sessions"):
            if not paths.get(key):
                raise ConfigError(f"paths.{key} is required")
        corpus = load_corpus(paths["corpus"])
        sessions = load_sessions(paths["sessions"])
        qrels = load_qrels(paths["qrels"]) if paths.get("qrels") else None

    with stage("reformulate"):
        client = client or make_client(config)
        options = config["reformulation"]
        cache = ResponseCache(paths.get("cache_dir"))
        bundles = reformulate_sessions(
            client, get_template(options["template"]), sessions, cache,
            max_in_flight=options["max_in_flight"], max_retries=options["max_retries"],
        )
        degraded = sum(bundle.degraded for bundle in bundles)
        if degraded:
            logger.warning("%d of %d turns degraded to level a", degraded, len(bundles))

    with stage("index"):
        if retriever is None:
            retriever = build_retriever(config, corpus)
        elif not isinstance(retriever, Retriever):
            raise TypeError(f"{type(retriever).__name__} does not implement search()")

    with stage("retrieve"):
        options = config["retrieval"]
        raw = retrieve_variants(
            retriever, bundles, options["top_k"], options["query_max_tokens"], options["response_max_tokens"],
            workers=options["workers"],
        )
        runs = {name: persisted(run, name) for name, run in raw.items()}

    with stage("normalize"):
        lists_by_topic = normalize_variants(runs, [bundle.topic_id for bundle in bundles])

    return SplitData(config["name"] or "default", corpus, sessions, qrels, bundles, runs, lists_by_topic)


def fit_split(config, split):
    """Fit the per-level weight table on a split's judged turns."""
    options = config["weights"]
    if split.qrels is None:
        raise ConfigError(f"Split {split.name!r} has no qrels to fit weights on")
    groups = group_by_level(split.bundles, split.lists_by_topic, split.qrels)
    return fit_level_weights(
        groups,
        metric=options["metric"],
        step=options["step"],
        depth=config["fusion"]["depth"],
        rel_threshold=config["evaluation"]["rel_threshold"],
        gain=config["evaluation"]["gain"],
        workers=options["workers"],
        fitted_on=options["fitted_on"] or split.name,
        group_by=options["group_by"],
    )


def evaluation_specs(config):
    options = config["evaluation"]
    specs = []
    for text in options["metrics"]:
        spec = parse_metric_spec(text)
        if spec.kind == "mrr" and spec.cutoff is None and options.get("mrr_cutoff"):
            spec = parse_metric_spec(f"mrr@{options['mrr_cutoff']}")
        specs.append(spec)
    return specs


def evaluate(config, run, qrels):
    options = config["evaluation"]
    return evaluate_run(run, qrels, evaluation_specs(config), options["rel_threshold"], options["gain"])


@dataclass
class PipelineResult:
    split: SplitData
    table: object
    final_run: dict[str, ScoredList]
    report: object = None
    variant_reports: dict = field(default_factory=dict)
    level_report: object = None
    level_stats: dict = field(default_factory=dict)
    transfer_table: object = None
    transfer_run: dict | None = None
    transfer_report: object = None
    outputs: list[Path] = field(default_factory=list)


def _weights_for(config, split, client=None):
    """Self-fit, transfer-fit (other split) or supplied table, per ``weights.fit_on``."""
    options = config["weights"]
    # Supplied table
    if options.get("weights_file"):
        path = Path(options["weights_file"])
        if not path.exists():
            raise FileNotFoundError(f"Weights file not found: {path}")
        return parse_weight_table(path.read_bytes()), None

    fit_on = options["fit_on"]
    if fit_on not in ("self", "other", "both"):
        raise ConfigError(f"weights.fit_on must be self, other or both, got {fit_on!r}")
    # Fit on this split
    own = fit_split(config, split) if fit_on in ("self", "both") else None
    # Fit on the other split, with this split's fitting options
    other = None
    if fit_on in ("other", "both"):
        if not options.get("other_config"):
            raise ConfigError("weights.other_config is required when fitting on another split")
        other_config = load_config(options["other_config"])
        other_config["weights"].update({k: options[k] for k in ("metric", "step", "workers", "group_by")})
        other_config["reformulation"]["template"] = config["reformulation"]["template"]
        other_split = prepare_split(other_config, client)
        other = fit_split(other_config, other_split)
        logger.info("Fitted transfer weights on %s", other.fitted_on)
    if fit_on == "other":
        return other, None
    return own, other


def run_pipeline(config, client=None, write=True, retriever=None):
    """
    Run every stage for one config and persist the artifacts.

    Outputs (under ``paths.work_dir``) are only written once all stages
    succeeded: bundles.json, runs/<variant>.run, weights.json, final.run,
    eval/*.csv and eval/summary.json, plus the transfer-fit run and weights
    when ``weights.fit_on`` is ``both``.

    Args:
        config (dict): Loaded configuration
        client (ChatClient | None): Overrides ``reformulation.backend``
        write (bool): Persist the artifacts
        retriever (Retriever | None): Replaces the BM25 index of this split

    Returns:
        PipelineResult: All intermediate and final results

    Raises:
        StageError: Naming the stage that failed
    """
    split = prepare_split(config, client, retriever)

    with stage("fit"):
        table, transfer_table = _weights_for(config, split, client)

    with stage("fuse"):
        depth = config["fusion"]["depth"]
        final_run = apply_weights(table, split.bundles, split.lists_by_topic, depth=depth, run_tag=FINAL_RUN_TAG)
        transfer_run = None
        if transfer_table is not None:
            transfer_run = apply_weights(transfer_table, split.bundles, split.lists_by_topic, depth=depth, run_tag=FINAL_RUN_TAG)

    result = PipelineResult(split, table, final_run, transfer_table=transfer_table, transfer_run=transfer_run)
    result.level_stats = level_statistics(split.bundles, split.sessions)

    with stage("evaluate"):
        if split.qrels is not None:
            result.report = evaluate(config, final_run, split.qrels)
            result.variant_reports = {name: evaluate(config, run, split.qrels) for name, run in split.runs.items()}
            levels = {bundle.topic_id: bundle.level.value for bundle in split.bundles}
            result.level_report = evaluate_by_level(result.report, levels)
            if transfer_run is not None:
                result.transfer_report = evaluate(config, transfer_run, split.qrels)

    if write:
        with stage("write"):
            result.outputs = write_outputs(config, result)
    return result


def _summary(result):
    summary = {
        "name": result.split.name,
        "fitted_on": result.table.fitted_on,
        "group_by": result.table.group_by,
        "weights": {level: weights.as_list() for level, weights in result.table.levels.items()},
        "levels": result.level_stats,
    }
    if result.report is not None:
        summary["macro"] = result.report.macro
        summary["variants"] = {name: report.macro for name, report in result.variant_reports.items()}
    if result.transfer_table is not None:
        summary["transfer"] = {
            "fitted_on": result.transfer_table.fitted_on,
            "weights": {level: weights.as_list() for level, weights in result.transfer_table.levels.items()},
            "macro": result.transfer_report.macro if result.transfer_report is not None else None,
        }
    return summary


def collect_outputs(result):
    """Relative path -> bytes for every artifact of a pipeline run."""
    # Reformulations and variant runs
    files = {"bundles.json": dump_bundles(result.split.bundles)}
    for name, run in result.split.runs.items():
        files[str(variant_run_path("runs", name))] = write_run(run, name)
    # Weights and fused runs
    files["weights.json"] = result.table.to_json()
    files["final.run"] = write_run(result.final_run, FINAL_RUN_TAG)
    if result.transfer_table is not None:
        files["weights.transfer.json"] = result.transfer_table.to_json()
        files["final.transfer.run"] = write_run(result.transfer_run, FINAL_RUN_TAG)
    # Evaluation tables
    if result.report is not None:
        files["eval/final.csv"] = result.report.to_csv().encode("utf-8")
        files["eval/levels.csv"] = result.level_report.to_csv(float_format="%.6f").encode("utf-8")
        for name, report in result.variant_reports.items():
            files[f"eval/{name}.csv"] = report.to_csv().encode("utf-8")
    files["eval/summary.json"] = (json.dumps(_summary(result), indent=2, sort_keys=True) + "\n").encode("utf-8")
    return files


def write_outputs(config, result):
    work_dir = Path(config["paths"]["work_dir"])
    files = collect_outputs(result)
    return write_all(work_dir, files)
