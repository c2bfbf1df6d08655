"""Command-line entry point.

Subcommands: rank, build-dataset, evaluate, remediate, report. Every run
writes a replayable run manifest (argv, resolved config, derived seeds,
paths) before any other artifact. All randomness flows from the one
--seed flag; consumers get independent child seeds derived from stable
labels, so re-running any subcommand with the same argv reproduces its
outputs byte-for-byte (timestamps aside).

Exit codes: 0 success, 2 usage error, 3 data error, 4 remote-service
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, RemoteServiceError
from .evaluation import (
    ChatCompletionClient,
    JudgeVerdict,
    accuracy_report,
    binned_accuracy,
    detect_threshold,
    judge_llm,
    judge_rules,
    load_accuracy_report,
    load_predictions,
    make_judge,
    report_to_json,
    write_accuracy_csv,
)
from .pipeline import (
    SamplingStrategy,
    dedup_entity_answer,
    filter_format_dependent,
    filter_llm_known,
    filter_min_questions,
    ingest_vqa,
    load_dataset,
    make_perception_data,
    provenance_to_json,
    restrict_to_entities,
    sample_entities,
    save_dataset,
    split_dataset,
)
from .ranking import (
    bin_ranks,
    binning_to_json,
    load_rank_table,
    rank_all,
    rank_table_to_json,
    write_rank_csv,
)
from .remediation import (
    TrainConfig,
    build_pairs,
    evaluate_remediation,
    export_stage2_bundle,
    apply_adapter,
    save_adapter,
    train_adapter,
)
from .store import load_store, save_store

log = logging.getLogger("visprior")

PIPELINE_STEPS = ("llm-known", "format-dep", "dedup", "min-questions", "sample", "split")
DEFAULT_STEPS = "dedup,min-questions,sample,split"


def child_seed(seed: int, label: str) -> int:
    """Stable per-consumer seed derived from the root seed and a label."""
    seq = np.random.SeedSequence([seed, zlib.crc32(label.encode())])
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def parse_edges(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise DataError(f"cannot parse edges {text!r}: {exc}") from exc


def write_run_manifest(args: argparse.Namespace, outputs: list[str]) -> Path:
    """Record the run before producing artifacts; enough to replay it."""
    out = Path(args.out)
    if out.suffix:
        manifest_path = out.parent / (out.name + ".run.json")
        out.parent.mkdir(parents=True, exist_ok=True)
    else:
        out.mkdir(parents=True, exist_ok=True)
        manifest_path = out / "run_manifest.json"
    config = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func", "argv")
    }
    seed = config.get("seed")
    manifest = {
        "subcommand": args.subcommand,
        "tool_version": __version__,
        "argv": getattr(args, "argv", None),
        "config": config,
        "seeds": (
            None
            if seed is None
            else {"root": seed, "children": {lbl: child_seed(seed, lbl) for lbl in ("sample", "split", "train")}}
        ),
        "outputs": outputs,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest_path


def _make_client(args: argparse.Namespace) -> ChatCompletionClient | None:
    """Client from --endpoint/--model, falling back to --llm-config JSON
    ({endpoint, model, api_key_env}); the key itself stays in the environment."""
    endpoint = getattr(args, "endpoint", None)
    model = getattr(args, "model", None)
    api_key_env = "VISPRIOR_API_KEY"
    config_path = getattr(args, "llm_config", None)
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read llm config {config_path}: {exc}") from exc
        endpoint = endpoint or cfg.get("endpoint")
        model = model or cfg.get("model")
        api_key_env = cfg.get("api_key_env", api_key_env)
    if endpoint:
        if not model:
            raise DataError("an LLM endpoint needs a model name")
        return ChatCompletionClient(endpoint=endpoint, model=model, api_key_env=api_key_env)
    return None


def cmd_rank(args: argparse.Namespace) -> int:
    outputs = [args.out] + [p for p in (args.json, args.bins_out) if p]
    write_run_manifest(args, outputs)
    store = load_store(args.store)
    table = rank_all(store, tie_policy=args.tie_policy)
    write_rank_csv(table, store, args.out)
    if args.json:
        Path(args.json).write_text(json.dumps(rank_table_to_json(table), indent=2) + "\n")
    if args.bins_out:
        if not args.edges:
            raise DataError("--bins-out requires --edges")
        binning = bin_ranks(table, parse_edges(args.edges))
        Path(args.bins_out).write_text(json.dumps(binning_to_json(binning), indent=2) + "\n")
    log.info("ranked %d entities (catalog size %d)", len(table.results), table.catalog_size)
    return 0


def cmd_build_dataset(args: argparse.Namespace) -> int:
    steps = [s.strip() for s in args.steps.split(",") if s.strip()]
    for step in steps:
        if step not in PIPELINE_STEPS:
            raise DataError(f"unknown pipeline step {step!r}; valid: {PIPELINE_STEPS}")
    out_dir = Path(args.out)
    outputs = ["provenance.json", "filtered.jsonl"]
    if "split" in steps:
        outputs += ["train.jsonl", "test.jsonl", "perception.jsonl"]
    if "sample" in steps:
        outputs.append("entities.json")
    write_run_manifest(args, outputs)

    dataset = ingest_vqa(args.dataset)
    client = _make_client(args)
    judge = make_judge(args.judge, client, retries=args.retries)

    for step in steps:
        if step in ("llm-known", "format-dep"):
            if client is None:
                raise DataError(f"step {step!r} needs --endpoint and --model")
            fn = filter_llm_known if step == "llm-known" else filter_format_dependent
            dataset = fn(dataset, client, judge, retries=args.retries, jobs=args.jobs)
        elif step == "dedup":
            dataset = dedup_entity_answer(dataset)
        elif step == "min-questions":
            dataset = filter_min_questions(dataset, k=args.min_questions)
        elif step == "sample":
            if not args.ranks:
                raise DataError("step 'sample' needs --ranks")
            table = load_rank_table(args.ranks)
            strategy = SamplingStrategy(
                kind=args.strategy, per_bin=args.per_bin, width=args.width
            )
            sampled = sample_entities(table, strategy, seed=child_seed(args.seed, "sample"))
            (out_dir / "entities.json").write_text(json.dumps(sampled, indent=2) + "\n")
            dataset = restrict_to_entities(dataset, sampled)
        elif step == "split":
            pass  # handled after the loop so the filtered set is saved first

    save_dataset(dataset, out_dir / "filtered.jsonl")
    provenance = {"filtered": provenance_to_json(dataset)}
    if "split" in steps:
        train, test = split_dataset(
            dataset, train_fraction=args.train_fraction, seed=child_seed(args.seed, "split")
        )
        save_dataset(train, out_dir / "train.jsonl")
        save_dataset(test, out_dir / "test.jsonl")
        perception = make_perception_data(train)
        save_dataset(perception, out_dir / "perception.jsonl")
        provenance["train"] = provenance_to_json(train)
        provenance["test"] = provenance_to_json(test)
        provenance["perception"] = provenance_to_json(perception)
    (out_dir / "provenance.json").write_text(json.dumps(provenance, indent=2) + "\n")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    outputs = [args.out] + ([args.csv] if args.csv else [])
    write_run_manifest(args, outputs)
    dataset = load_dataset(args.dataset)
    predictions = load_predictions(args.predictions)
    by_id = {item.item_id: item for item in dataset.items}

    client = _make_client(args)
    verdicts: list[JudgeVerdict] = []
    for pred in predictions:
        item = by_id.get(pred.item_id)
        if item is None:
            raise DataError(f"prediction references unknown item {pred.item_id!r}")
        if args.judge == "rules":
            verdicts.append(judge_rules(item, pred.text))
        else:
            if client is None:
                raise DataError("--judge llm needs --endpoint and --model")
            try:
                verdicts.append(judge_llm(client, item, pred.text, retries=args.retries))
            except RemoteServiceError:
                if not args.errors_incorrect:
                    raise
                log.warning("judge error on %s counted as incorrect", pred.item_id)
                verdicts.append(
                    JudgeVerdict(
                        item_id=pred.item_id,
                        verdict=False,
                        judge_kind="llm",
                        raw_reply="false",
                    )
                )

    report = accuracy_report(dataset.items, verdicts)
    threshold = None
    if args.ranks and args.edges:
        table = load_rank_table(args.ranks)
        report = binned_accuracy(report, table, parse_edges(args.edges))
        occupied = sum(1 for b in report.binned if b.entity_count > 0)
        if occupied >= 2:
            threshold = detect_threshold(report, min_relative_drop=args.threshold_drop)
    payload = report_to_json(report)
    payload["threshold"] = threshold
    Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    if args.csv:
        write_accuracy_csv(report, args.csv)
    log.info("acc_macro=%.4f over %d entities", report.acc_macro, len(report.per_entity))
    return 0


def _load_train_config(path: str | None, seed: int) -> TrainConfig:
    if path is None:
        return TrainConfig(seed=child_seed(seed, "train"))
    raw: dict
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError as exc:  # py3.10
            raise DataError("TOML configs need Python >= 3.11; use JSON") from exc
        raw = tomllib.loads(text)
    else:
        raw = json.loads(text)
    known = {f for f in TrainConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise DataError(f"unknown train config fields: {sorted(unknown)}")
    raw.setdefault("seed", child_seed(seed, "train"))
    return TrainConfig(**raw)


def cmd_remediate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    outputs = ["adapter/", "store_after/", "train_report.json", "loss_curve.csv", "remediation.json"]
    if args.knowledge:
        outputs.append("stage2/")
    write_run_manifest(args, outputs)

    store = load_store(args.store)
    perception = load_dataset(args.dataset)
    config = _load_train_config(args.config, args.seed)
    pairs = build_pairs(perception, store)
    params, report = train_adapter(pairs, config, store=store)

    save_adapter(params, out_dir / "adapter")
    store_after = apply_adapter(store, params)
    save_store(store_after, out_dir / "store_after")

    trained = sorted({p.entity_id for p in pairs})
    remediation = evaluate_remediation(store, store_after, trained)
    (out_dir / "remediation.json").write_text(
        json.dumps(
            {
                "per_entity": remediation.per_entity,
                "mean_delta": remediation.mean_delta,
                "fraction_improved": remediation.fraction_improved,
            },
            indent=2,
        )
        + "\n"
    )
    (out_dir / "train_report.json").write_text(
        json.dumps(
            {
                "loss_curve": report.loss_curve,
                "rank_before": report.rank_before,
                "rank_after": report.rank_after,
                "wall_time": report.wall_time,
            },
            indent=2,
        )
        + "\n"
    )
    with (out_dir / "loss_curve.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(report.loss_curve):
            writer.writerow([i, str(loss)])

    if args.knowledge:
        knowledge = load_dataset(args.knowledge)
        export_stage2_bundle(
            store_after, knowledge, out_dir / "stage2", seed=args.seed, config=config
        )
    log.info(
        "trained %d steps; mean rank delta %.2f", len(report.loss_curve), remediation.mean_delta
    )
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    outputs = [args.out] + [p for p in (args.json, args.plot) if p]
    write_run_manifest(args, outputs)
    table = load_rank_table(args.ranks)
    report = load_accuracy_report(args.acc)
    edges = parse_edges(args.edges)
    report = binned_accuracy(report, table, edges)
    occupied = sum(1 for b in report.binned if b.entity_count > 0)
    threshold = (
        detect_threshold(report, min_relative_drop=args.threshold_drop)
        if occupied >= 2
        else None
    )

    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["interval_lo", "interval_hi", "entity_count", "acc_macro_in_bin"])
        for b in report.binned:
            writer.writerow(
                [
                    b.lo,
                    "" if b.hi is None else b.hi,
                    b.entity_count,
                    "" if b.acc_macro_in_bin is None else str(b.acc_macro_in_bin),
                ]
            )
    if args.json:
        payload = report_to_json(report)
        payload["threshold"] = threshold
        payload["edges"] = edges
        Path(args.json).write_text(json.dumps(payload, indent=2) + "\n")
    if args.plot:
        _plot_binned(report, threshold, args.plot)
    return 0


def _plot_binned(report, threshold, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, values = [], []
    for b in report.binned:
        hi = "inf" if b.hi is None else f"{b.hi:g}"
        labels.append(f"({b.lo:g}, {hi}]")
        values.append(np.nan if b.acc_macro_in_bin is None else b.acc_macro_in_bin)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(range(len(values)), values, color="#3b6ea5")
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
    ax.set_xlabel("prior rank interval")
    ax.set_ylabel("macro accuracy")
    if threshold is not None:
        for i, b in enumerate(report.binned):
            if b.hi == threshold:
                ax.axvline(i + 0.5, color="#b03030", linestyle="--", label=f"threshold {threshold:g}")
                ax.legend()
                break
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visprior",
        description="Entity prior-knowledge ranking, VQA filtering and contrastive remediation.",
    )
    parser.add_argument("--version", action="version", version=f"visprior {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("rank", help="rank catalog entities by prior knowledge")
    p.add_argument("--store", required=True, help="store manifest path")
    p.add_argument("--out", required=True, help="rank table CSV")
    p.add_argument("--json", help="rank table JSON")
    p.add_argument("--tie-policy", choices=["pessimistic", "optimistic"], default="pessimistic")
    p.add_argument("--edges", help="comma-separated rank interval edges")
    p.add_argument("--bins-out", help="binning JSON (requires --edges)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("build-dataset", help="run the dataset construction pipeline")
    p.add_argument("--dataset", required=True, help="raw line-delimited JSON records")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", default=DEFAULT_STEPS, help=f"comma list from {PIPELINE_STEPS}")
    p.add_argument("--min-questions", type=int, default=3)
    p.add_argument("--ranks", help="rank table JSON (for the sample step)")
    p.add_argument("--strategy", choices=["uniform", "geometric"], default="geometric")
    p.add_argument("--per-bin", type=int, default=10)
    p.add_argument("--width", type=int, default=1000, help="uniform bin width")
    p.add_argument("--train-fraction", type=float, default=0.78)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--judge", choices=["rules", "llm"], default="rules")
    p.add_argument("--endpoint", help="chat-completion endpoint URL")
    p.add_argument("--model", help="model name for the endpoint")
    p.add_argument("--llm-config", help="JSON {endpoint, model, api_key_env}")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--retries", type=int, default=3)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("evaluate", help="judge predictions and report accuracy")
    p.add_argument("--dataset", required=True, help="items (save_dataset form)")
    p.add_argument("--predictions", required=True, help="line-delimited {item_id, text}")
    p.add_argument("--out", required=True, help="accuracy report JSON")
    p.add_argument("--csv", help="accuracy report CSV")
    p.add_argument("--judge", choices=["rules", "llm"], default="rules")
    p.add_argument("--endpoint")
    p.add_argument("--model")
    p.add_argument("--llm-config", help="JSON {endpoint, model, api_key_env}")
    p.add_argument("--ranks", help="rank table JSON for binning")
    p.add_argument("--edges", help="rank interval edges for binning")
    p.add_argument("--threshold-drop", type=float, default=0.5)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument(
        "--errors-incorrect",
        action="store_true",
        help="count judge failures as incorrect instead of failing the run",
    )
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("remediate", help="train adapters and export remediated store")
    p.add_argument("--store", required=True)
    p.add_argument("--dataset", required=True, help="perception items (save_dataset form)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TrainConfig as TOML or JSON")
    p.add_argument("--knowledge", help="knowledge items for the stage-2 bundle")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_remediate)

    p = sub.add_parser("report", help="merge ranks and accuracy into binned tables")
    p.add_argument("--ranks", required=True, help="rank table JSON")
    p.add_argument("--acc", required=True, help="accuracy report JSON")
    p.add_argument("--edges", required=True, help="comma-separated rank interval edges")
    p.add_argument("--out", required=True, help="plot-ready CSV")
    p.add_argument("--json", help="binned report JSON")
    p.add_argument("--plot", help="optional PNG")
    p.add_argument("--threshold-drop", type=float, default=0.5)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    args.argv = list(argv) if argv is not None else sys.argv[1:]
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DataError as exc:
        print(json.dumps({"error": "data", "message": str(exc)}), file=sys.stderr)
        return 3
    except RemoteServiceError as exc:
        print(json.dumps({"error": "remote", "message": str(exc)}), file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
