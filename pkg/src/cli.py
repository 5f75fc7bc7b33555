# CLI module for apcir: adaptive personalized conversational retrieval
import argparse
import json
import logging
import sys
from pathlib import Path

from src.config import apply_overrides, default_config, load_config
from src.data_loader import load_corpus, load_qrels, load_run, load_sessions, write_atomic
from src.errors import ApcirError, StageError
from src.estimators import ESTIMATOR_METHODS, HashingEmbedder, apply_turn_weights, dump_turn_weights, estimate_turn_weights
from src.fusion import FUSION_STRATEGIES, WeightVector, fuse_runs
from src.metrics import MetricSpec, evaluate_by_level, evaluate_run, format_report, parse_metric_specs
from src.pipeline import (
    FINAL_RUN_TAG,
    load_variant_runs,
    make_client,
    normalize_variants,
    persisted,
    retrieve_variants,
    run_pipeline,
    variant_run_path,
)
from src.reformulate import (
    PROMPT_TEMPLATES,
    ResponseCache,
    dump_bundles,
    get_template,
    level_statistics,
    load_bundles,
    reformulate_sessions,
)
from src.retrieval import BM25Retriever, build_index, load_index, save_index
from src.session_io import write_run
from src.synthetic import generate_synthetic
from src.weight_opt import GROUPINGS, apply_weights, fit_level_weights, group_by_level, parse_weight_table

logger = logging.getLogger(__name__)

DEFAULTS = default_config()


def create_parser():
    parser = argparse.ArgumentParser(description="Adaptive personalized conversational retrieval (APCIR).")
    parser.add_argument("--log-level", type=str, default="WARNING", help="Logging level (default: WARNING).")

    subparsers = parser.add_subparsers(dest="command", required=True, help="Available commands")

    retrieval = DEFAULTS["retrieval"]
    reformulation = DEFAULTS["reformulation"]
    fusion = DEFAULTS["fusion"]
    weights = DEFAULTS["weights"]
    estimators = DEFAULTS["estimators"]
    synthetic = DEFAULTS["synthetic"]

    # Index command
    parser_index = subparsers.add_parser("index", help="Build a BM25 index over a JSONL corpus.")
    parser_index.add_argument("--corpus", type=str, required=True, help="JSONL corpus of {id, contents}.")
    parser_index.add_argument("--output", "--out", type=str, required=True, help="Index file to write.")
    parser_index.add_argument("--k1", type=float, default=retrieval["k1"], help="BM25 k1 (default: 0.9).")
    parser_index.add_argument("--b", type=float, default=retrieval["b"], help="BM25 b (default: 0.4).")
    parser_index.add_argument("--stopwords", action="store_true", help="Drop English stopwords.")
    parser_index.add_argument("--truncate-passages", action="store_true", help="Index only the first passage tokens.")
    parser_index.add_argument("--passage-max-tokens", type=int, default=retrieval["passage_max_tokens"],
                              help="Passage token limit with --truncate-passages (default: 256).")

    # Reformulate command
    parser_reformulate = subparsers.add_parser("reformulate", help="Identify levels and rewrite every turn.")
    parser_reformulate.add_argument("--sessions", type=str, required=True, help="Session JSON file.")
    parser_reformulate.add_argument("--output", "--out", type=str, required=True, help="Bundles JSON file to write.")
    parser_reformulate.add_argument("--mock-default", action="store_true", help="Echo instead of failing on a fixture miss.")
    parser_reformulate.add_argument("--backend", choices=["echo", "mock", "http"], default=reformulation["backend"],
                                    help="Chat backend (default: echo).")
    parser_reformulate.add_argument("--fixtures", type=str, help="Canned responses for the mock backend.")
    parser_reformulate.add_argument("--model", type=str, default=reformulation["model"], help="Model id for http.")
    parser_reformulate.add_argument("--cache-dir", "--cache", type=str, help="Directory of cached responses.")
    parser_reformulate.add_argument("--max-in-flight", type=int, default=reformulation["max_in_flight"],
                                    help="Concurrent model calls (default: 4).")
    parser_reformulate.add_argument("--max-retries", type=int, default=reformulation["max_retries"],
                                    help="Retries on unparseable output (default: 2).")
    parser_reformulate.add_argument("--template", choices=sorted(PROMPT_TEMPLATES), default=reformulation["template"],
                                    help="Prompt template; no_cot and no_level_examples are ablations (default: full).")

    # Retrieve command
    parser_retrieve = subparsers.add_parser("retrieve", help="Retrieve the three query variants of every turn.")
    parser_retrieve.add_argument("--index", type=str, required=True, help="Index file from 'index'.")
    parser_retrieve.add_argument("--bundles", type=str, required=True, help="Bundles JSON file.")
    parser_retrieve.add_argument("--output-dir", type=str, required=True, help="Directory for <variant>.run files.")
    parser_retrieve.add_argument("--top-k", type=int, default=retrieval["top_k"], help="Depth per list (default: 1000).")
    parser_retrieve.add_argument("--query-max-tokens", type=int, default=retrieval["query_max_tokens"])
    parser_retrieve.add_argument("--response-max-tokens", type=int, default=retrieval["response_max_tokens"])
    parser_retrieve.add_argument("--workers", type=int, default=retrieval["workers"], help="Concurrent searches (default: 1).")

    # Fit-weights command
    parser_fit = subparsers.add_parser("fit-weights", help="Fit per-level fusion weights by grid search.")
    parser_fit.add_argument("--runs-dir", type=str, required=True, help="Directory holding the variant runs.")
    parser_fit.add_argument("--bundles", type=str, required=True, help="Bundles JSON file.")
    parser_fit.add_argument("--qrels", type=str, required=True, help="TREC qrels file.")
    parser_fit.add_argument("--output", "--out", type=str, required=True, help="weights.json to write.")
    parser_fit.add_argument("--metric", type=str, default=weights["metric"], help="Objective metric (default: ndcg@3).")
    parser_fit.add_argument("--step", type=float, default=weights["step"], help="Grid step (default: 0.01).")
    parser_fit.add_argument("--depth", type=int, default=fusion["depth"], help="Fused list depth (default: 1000).")
    parser_fit.add_argument("--fitted-on", type=str, help="Tag recorded as the fitting split.")
    parser_fit.add_argument("--workers", type=int, default=weights["workers"], help="Grid search threads (default: 1).")
    parser_fit.add_argument("--group-by", choices=GROUPINGS, default=weights["group_by"],
                            help="Fit one vector per level, or one for all turns (default: level).")

    # Estimate command
    parser_estimate = subparsers.add_parser("estimate", help="Per-turn weights from a baseline estimator.")
    parser_estimate.add_argument("--method", choices=ESTIMATOR_METHODS, default=estimators["method"],
                                 help="Estimator (default: entropy).")
    parser_estimate.add_argument("--sessions", type=str, required=True, help="Session JSON file.")
    parser_estimate.add_argument("--bundles", type=str, required=True, help="Bundles JSON file.")
    parser_estimate.add_argument("--runs-dir", type=str, required=True, help="Directory holding the variant runs.")
    parser_estimate.add_argument("--corpus", type=str, help="JSONL corpus (needed by deps).")
    parser_estimate.add_argument("--output", "--out", type=str, required=True, help="weights-per-turn.json to write.")
    parser_estimate.add_argument("--run-output", type=str, help="Fused run to write with the estimated weights.")
    parser_estimate.add_argument("--seed", type=int, default=estimators["seed"], help="Seed for random (default: 0).")
    parser_estimate.add_argument("--embed-dim", type=int, default=estimators["embed_dim"])
    parser_estimate.add_argument("--deps-top-k", type=int, default=estimators["deps_top_k"])

    # Fuse command
    parser_fuse = subparsers.add_parser("fuse", help="Fuse the variant runs into one run.")
    runs_source = parser_fuse.add_mutually_exclusive_group(required=True)
    runs_source.add_argument("--runs-dir", type=str, help="Directory holding the variant runs.")
    runs_source.add_argument("--runs", type=str, help="Comma-separated run files, in list order.")
    parser_fuse.add_argument("--output", "--out", type=str, required=True, help="Fused run file to write.")
    parser_fuse.add_argument("--strategy", choices=FUSION_STRATEGIES, default=fusion["strategy"],
                             help="Fusion strategy (default: linear).")
    parser_fuse.add_argument("--weights", type=str, help="Comma-separated weights for linear, e.g. 0.3,0.3,0.4.")
    parser_fuse.add_argument("--weights-table", type=str, help="weights.json for level-aware linear fusion.")
    parser_fuse.add_argument("--bundles", type=str, help="Bundles JSON file (with --weights-table).")
    parser_fuse.add_argument("--rrf-k", type=float, default=fusion["rrf_k"], help="RRF constant (default: 60).")
    parser_fuse.add_argument("--depth", type=int, default=fusion["depth"], help="Output depth (default: 1000).")
    parser_fuse.add_argument("--tag", type=str, help="Run tag to write.")

    # Evaluate command
    parser_evaluate = subparsers.add_parser("evaluate", help="Evaluate a run against qrels.")
    parser_evaluate.add_argument("--run", type=str, required=True, help="TREC run file.")
    parser_evaluate.add_argument("--qrels", type=str, required=True, help="TREC qrels file.")
    parser_evaluate.add_argument("--metrics", type=str, default=",".join(DEFAULTS["evaluation"]["metrics"]),
                                 help="Comma-separated metrics (default: mrr,ndcg@3,recall@10,recall@100).")
    parser_evaluate.add_argument("--rel-threshold", type=int, default=DEFAULTS["evaluation"]["rel_threshold"])
    parser_evaluate.add_argument("--gain", choices=["linear", "exponential"], default=DEFAULTS["evaluation"]["gain"])
    parser_evaluate.add_argument("--bundles", type=str, help="Bundles JSON file for a per-level breakdown.")
    parser_evaluate.add_argument("--sessions", type=str, help="Session JSON file for level agreement with gold labels.")
    parser_evaluate.add_argument("--output", "--per-topic", type=str, help="Per-topic CSV to write.")
    parser_evaluate.add_argument("--mrr-cutoff", type=int, help="Cut MRR at this rank (default: uncut).")

    # Synth command
    parser_synth = subparsers.add_parser("synth", help="Generate a synthetic collection with mock fixtures.")
    parser_synth.add_argument("--output-dir", type=str, required=True, help="Directory to write the collection into.")
    parser_synth.add_argument("--seed", type=int, default=synthetic["seed"], help="Random seed (default: 13).")
    parser_synth.add_argument("--n-sessions", type=int, default=synthetic["n_sessions"])
    parser_synth.add_argument("--n-passages", type=int, default=synthetic["n_passages"])
    parser_synth.add_argument("--turns-per-session", type=int, default=synthetic["turns_per_session"])

    # Run-all command
    parser_run = subparsers.add_parser("run-all", help="Run every stage from a config file.")
    parser_run.add_argument("--config", type=str, required=True, help="Experiment config.yaml.")
    parser_run.add_argument("--fit-on", choices=["self", "other", "both"], help="Where to fit the level weights.")
    parser_run.add_argument("--other-config", type=str, help="Config of the split to fit on (other/both).")
    parser_run.add_argument("--weights-file", type=str, help="Apply this weights.json instead of fitting.")
    parser_run.add_argument("--work-dir", type=str, help="Output directory.")
    parser_run.add_argument("--backend", choices=["echo", "mock", "http"], help="Chat backend.")
    parser_run.add_argument("--step", type=float, help="Grid step.")
    parser_run.add_argument("--workers", type=int, help="Grid search threads.")
    parser_run.add_argument("--group-by", choices=GROUPINGS, help="Fit per level, or one vector for all turns.")
    parser_run.add_argument("--template", choices=sorted(PROMPT_TEMPLATES), help="Prompt template.")

    return parser


def index_handler(args):
    """
    Handle the index command.

    Args:
        args: Command line arguments
    """
    corpus = load_corpus(args.corpus)
    index = build_index(
        corpus,
        k1=args.k1,
        b=args.b,
        stopwords=args.stopwords,
        passage_max_tokens=args.passage_max_tokens if args.truncate_passages else None,
    )
    save_index(index, args.output)
    print(f"Indexed {index.n_docs} passages ({len(index.postings)} terms, avg length {index.avg_doc_length:.2f})")
    print(f"Index saved to: {args.output}")


def _client_config(args):
    return apply_overrides(DEFAULTS, {
        "reformulation.backend": args.backend,
        "reformulation.fixtures": args.fixtures,
        "reformulation.model": args.model,
        "reformulation.mock_default": args.mock_default,
    })


def reformulate_handler(args):
    """
    Handle the reformulate command.

    Args:
        args: Command line arguments
    """
    sessions = load_sessions(args.sessions)
    client = make_client(_client_config(args))
    bundles = reformulate_sessions(
        client, get_template(args.template), sessions, ResponseCache(args.cache_dir),
        max_in_flight=args.max_in_flight, max_retries=args.max_retries,
    )
    write_atomic(args.output, dump_bundles(bundles))

    stats = level_statistics(bundles, sessions)
    print("REFORMULATION SUMMARY")
    print("=" * 40)
    print(f"  turns: {stats['turns']}")
    for level, count in stats["levels"].items():
        print(f"  level {level}: {count}")
    if stats["degraded"]:
        print(f"  degraded: {stats['degraded']}")
    print(f"\nBundles saved to: {args.output}")


def retrieve_handler(args):
    """
    Handle the retrieve command.

    Args:
        args: Command line arguments
    """
    retriever = BM25Retriever(load_index(args.index))
    bundles = load_bundles(args.bundles)
    runs = retrieve_variants(
        retriever, bundles, args.top_k, args.query_max_tokens, args.response_max_tokens, workers=args.workers
    )
    for name, run in runs.items():
        path = variant_run_path(args.output_dir, name)
        write_atomic(path, write_run(persisted(run, name), name))
        print(f"Run saved to: {path}")


def _variant_lists(runs_dir, bundles):
    runs = load_variant_runs(runs_dir)
    return normalize_variants(runs, [bundle.topic_id for bundle in bundles])


def fit_weights_handler(args):
    """
    Handle the fit-weights command.

    Args:
        args: Command line arguments
    """
    bundles = load_bundles(args.bundles)
    qrels = load_qrels(args.qrels)
    lists_by_topic = _variant_lists(args.runs_dir, bundles)
    table = fit_level_weights(
        group_by_level(bundles, lists_by_topic, qrels),
        metric=args.metric,
        step=args.step,
        depth=args.depth,
        workers=args.workers,
        fitted_on=args.fitted_on or Path(args.qrels).stem,
        group_by=args.group_by,
    )
    write_atomic(args.output, table.to_json())

    print("FITTED LEVEL WEIGHTS")
    print("=" * 40)
    for level, weights in table.levels.items():
        note = " (unfitted)" if level in table.unfitted else ""
        print(f"  level {level}: {', '.join(f'{w:.2f}' for w in weights)}{note}")
    print(f"\nWeights saved to: {args.output}")


def estimate_handler(args):
    """
    Handle the estimate command.

    Args:
        args: Command line arguments
    """
    sessions = load_sessions(args.sessions)
    bundles = load_bundles(args.bundles)
    lists_by_topic = _variant_lists(args.runs_dir, bundles)
    corpus = load_corpus(args.corpus) if args.corpus else None
    estimates = estimate_turn_weights(
        args.method,
        bundles,
        sessions,
        lists_by_topic=lists_by_topic,
        corpus=corpus,
        embedder=HashingEmbedder(args.embed_dim),
        seed=args.seed,
        deps_top_k=args.deps_top_k,
    )
    write_atomic(args.output, dump_turn_weights(args.method, estimates))
    flagged = sum(1 for estimate in estimates.values() if estimate.flags)
    print(f"Estimated weights for {len(estimates)} turns with {args.method}" + (f" ({flagged} flagged)" if flagged else ""))
    print(f"Weights saved to: {args.output}")

    if args.run_output:
        run = apply_turn_weights(estimates, lists_by_topic, run_tag=args.method)
        write_atomic(args.run_output, write_run(run, args.method))
        print(f"Run saved to: {args.run_output}")


def _parse_weights(text):
    try:
        return WeightVector.of(*(float(part) for part in text.split(",")))
    except ValueError as e:
        raise ValueError(f"Invalid --weights {text!r}: {e}") from None


def _input_runs(args):
    if args.runs:
        return [load_run(path.strip()) for path in args.runs.split(",") if path.strip()]
    return list(load_variant_runs(args.runs_dir).values())


def fuse_handler(args):
    """
    Handle the fuse command.

    Args:
        args: Command line arguments
    """
    if args.weights_table:
        if not args.bundles or not args.runs_dir:
            raise ValueError("--weights-table needs --bundles and --runs-dir")
        bundles = load_bundles(args.bundles)
        path = Path(args.weights_table)
        if not path.exists():
            raise FileNotFoundError(f"Weights file not found: {path}")
        table = parse_weight_table(path.read_bytes())
        tag = args.tag or FINAL_RUN_TAG
        fused = apply_weights(table, bundles, _variant_lists(args.runs_dir, bundles), depth=args.depth, run_tag=tag)
    else:
        runs = _input_runs(args)
        weights = _parse_weights(args.weights) if args.weights else None
        tag = args.tag or args.strategy
        fused = fuse_runs(runs, args.strategy, weights=weights, rrf_k=args.rrf_k, depth=args.depth, run_tag=tag)
    write_atomic(args.output, write_run(fused, tag))
    print(f"Fused {len(fused)} topics")
    print(f"Run saved to: {args.output}")


def evaluate_handler(args):
    """
    Handle the evaluate command.

    Args:
        args: Command line arguments
    """
    run = load_run(args.run)
    qrels = load_qrels(args.qrels)
    specs = parse_metric_specs(args.metrics)
    if args.mrr_cutoff:
        specs = [MetricSpec("mrr", args.mrr_cutoff) if spec.name == "mrr" else spec for spec in specs]
    report = evaluate_run(run, qrels, specs, args.rel_threshold, args.gain)
    print(format_report(report))

    if args.bundles:
        bundles = load_bundles(args.bundles)
        levels = {bundle.topic_id: bundle.level.value for bundle in bundles}
        print("\nBY PERSONALIZATION LEVEL")
        print(evaluate_by_level(report, levels).to_string(float_format=lambda v: f"{v:.4f}"))
        if args.sessions:
            stats = level_statistics(bundles, load_sessions(args.sessions))
            if "gold_turns" in stats:
                print(f"\nLevel agreement on {stats['gold_turns']} labelled turns: "
                      f"binary {stats['binary_agreement']:.4f}, exact {stats['exact_accuracy']:.4f}")

    if args.output:
        write_atomic(args.output, report.to_csv().encode("utf-8"))
        print(f"\nPer-topic results saved to: {args.output}")


def synth_handler(args):
    """
    Handle the synth command.

    Args:
        args: Command line arguments
    """
    collection = generate_synthetic(args.seed, args.n_sessions, args.n_passages, args.turns_per_session)
    written = collection.write(args.output_dir)
    print(f"Generated {len(collection.corpus)} passages, {len(collection.sessions)} sessions, {len(collection.qrels)} judgments")
    for path in written:
        print(f"  {path}")


def run_all_handler(args):
    """
    Handle the run-all command.

    Args:
        args: Command line arguments
    """
    config = apply_overrides(load_config(args.config), {
        "weights.fit_on": args.fit_on,
        "weights.other_config": args.other_config,
        "weights.weights_file": args.weights_file,
        "weights.step": args.step,
        "weights.workers": args.workers,
        "weights.group_by": args.group_by,
        "paths.work_dir": args.work_dir,
        "reformulation.backend": args.backend,
        "reformulation.template": args.template,
    })
    result = run_pipeline(config)

    print("FITTED LEVEL WEIGHTS" + (f" (fitted on {result.table.fitted_on})" if result.table.fitted_on else ""))
    print("=" * 40)
    for level, weights in result.table.levels.items():
        print(f"  level {level}: {', '.join(f'{w:.2f}' for w in weights)}")
    if result.report is not None:
        print()
        print(format_report(result.report, "FINAL RUN"))
        for name, report in result.variant_reports.items():
            macro = ", ".join(f"{metric} {value:.4f}" for metric, value in report.macro.items())
            print(f"  [{name}] {macro}")
    if result.transfer_report is not None:
        print()
        print(format_report(result.transfer_report, f"TRANSFER RUN (fitted on {result.transfer_table.fitted_on})"))
    print(f"\nLevels: {json.dumps(result.level_stats['levels'], sort_keys=True)}")
    print(f"Outputs saved to: {config['paths']['work_dir']}")


HANDLERS = {
    "index": index_handler,
    "reformulate": reformulate_handler,
    "retrieve": retrieve_handler,
    "fit-weights": fit_weights_handler,
    "estimate": estimate_handler,
    "fuse": fuse_handler,
    "evaluate": evaluate_handler,
    "synth": synth_handler,
    "run-all": run_all_handler,
}


def main(argv=None):
    parser = create_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logger.info("Executing command: %s", args.command)

    try:
        HANDLERS[args.command](args)
    except StageError as e:
        print(f"Error [{e.stage}]: {e.cause}", file=sys.stderr)
        return 1
    except (ApcirError, FileNotFoundError, ValueError) as e:
        print(f"Error [{args.command}]: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
