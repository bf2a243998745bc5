"""Command-line entry point: ``expertchain <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from expertchain.data import SyntheticSpec, load_dataset, make_synthetic, to_examples
from expertchain.experiments import (
    evaluate,
    grid_csv,
    grid_search,
    grid_text,
    run_experiment,
    split_items,
)
from expertchain.metrics import build_report
from expertchain.model import TrainConfig, load_checkpoint, save_checkpoint
from expertchain.moe import MoEConfig, RoutingLog
from expertchain.specialists import (
    BackendConfig,
    RecordStore,
    load_rationales,
    load_templates,
    make_backend,
    run_pipeline,
)


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", type=Path, help="JSON-lines dataset")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", "-v", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--records", type=Path, help="rationale store to join into the text context")
    p.add_argument("--experts", type=int, default=6, help="number of experts N")
    p.add_argument("--topk", type=int, default=2, help="experts selected per token k")
    p.add_argument("--hidden", type=int, default=16, help="expert hidden width")
    p.add_argument("--fusion", choices=("moe", "gate"), default="moe")
    p.add_argument("--dim", type=int, default=16, help="hidden size d (must match feature files)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=8e-5)
    p.add_argument("--batch", type=int, default=8)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="expertchain", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rationale", help="generate and review rationales with an LLM backend")
    _shared(p)
    p.add_argument("--backend", choices=("mock", "http"), default="mock")
    p.add_argument("--transcript", type=Path, help="mock transcript (JSON lines)")
    p.add_argument("--endpoint", help="HTTP endpoint for the http backend")
    p.add_argument("--api-key-env", help="environment variable holding the API key")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-retries", type=int, default=2)
    p.add_argument("--image-mode", choices=("path", "base64"), default="path")
    p.add_argument("--templates", type=Path, help="directory with <stage>.txt prompt templates")
    p.add_argument("--parallel", type=int, default=1, help="concurrent backend calls")
    p.add_argument("--force", action="store_true", help="redo stages that already have results")
    p.add_argument("--strict", action="store_true", help="fail on missing mock transcript entries")

    p = sub.add_parser("train", help="train the answer model")
    _shared(p)
    _model_flags(p)

    p = sub.add_parser("eval", help="evaluate a trained checkpoint")
    _shared(p)
    p.add_argument("--records", type=Path)
    p.add_argument("--checkpoint", type=Path, help="defaults to <out>/model.json")
    p.add_argument("--split", help="dataset split to evaluate (default: test if present, else train)")
    p.add_argument("--max-len", type=int, default=8)

    p = sub.add_parser("report", help="rebuild the report from saved predictions and routing log")
    p.add_argument("--out", type=Path, default=Path("out"))
    p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("gridsearch", help="train+eval over a grid of (experts, top-k)")
    _shared(p)
    _model_flags(p)
    p.add_argument("--grid-experts", type=_int_list, default=[2, 4, 6])
    p.add_argument("--grid-topk", type=_int_list, default=[1, 2])
    p.add_argument("--split", help="evaluation split")

    p = sub.add_parser("synth", help="write the synthetic category-mixture dataset")
    p.add_argument("--out", type=Path, default=Path("synthetic"))
    p.add_argument("--items", type=int, default=512)
    p.add_argument("--test-items", type=int, default=64)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


def _need_dataset(args) -> list:
    if args.dataset is None:
        raise SystemExit("--dataset is required")
    return load_dataset(args.dataset)


def _rationales(args):
    return load_rationales(args.records) if getattr(args, "records", None) else None


def cmd_rationale(args) -> int:
    items = _need_dataset(args)
    cfg = BackendConfig(
        kind=args.backend, endpoint=args.endpoint, timeout=args.timeout, max_retries=args.max_retries,
        api_key_env=args.api_key_env, transcript=args.transcript, strict=args.strict,
        image_mode=args.image_mode,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    store = RecordStore(args.out / "records.jsonl")
    result = run_pipeline(items, make_backend(cfg), store, args.parallel, cfg.max_retries,
                          load_templates(args.templates), args.force)
    verdicts = [r.verdict for r in result.records.values()]
    print(f"{len(items)} items: {verdicts.count('Effective')} effective, "
          f"{verdicts.count('Ineffective')} ineffective, {len(result.failures)} unresolved")
    if not result.ok:
        (args.out / "failures.txt").write_text(result.failure_report(), encoding="utf-8")
        sys.stderr.write(result.failure_report())
        return 1
    return 0


def _configs(args) -> tuple[TrainConfig, MoEConfig | None]:
    train_cfg = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, seed=args.seed,
                            fusion=args.fusion, dim=args.dim)
    moe = MoEConfig(args.experts, args.topk, args.hidden, args.seed) if args.fusion == "moe" else None
    return train_cfg, moe


def _write_eval(out: Path, items, evaluation) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with (out / "predictions.jsonl").open("w", encoding="utf-8") as fh:
        for it, pred in zip(items, evaluation.predictions):
            fh.write(json.dumps({"id": it.id, "prediction": pred, "answer": it.answer,
                                 "category": it.category, "closed": it.closed}) + "\n")
    with (out / "routing.jsonl").open("w", encoding="utf-8") as fh:
        evaluation.routing.write_jsonl(fh)
    (out / "report.json").write_text(evaluation.report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(evaluation.report.summary(), encoding="utf-8")


def cmd_train(args) -> int:
    items = _need_dataset(args)
    train_cfg, moe = _configs(args)
    run = run_experiment(items, train_cfg, moe, _rationales(args))
    args.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(args.out / "model.json", run.params, run.vocab, train_cfg, moe)
    (args.out / "loss.json").write_text(json.dumps(run.loss_trace) + "\n", encoding="utf-8")
    print(f"final loss {run.loss_trace[-1]:.6f}; evaluation accuracy {run.accuracy:.4f}")
    print(f"checkpoint written to {args.out / 'model.json'}")
    return 0


def cmd_eval(args) -> int:
    items = _need_dataset(args)
    params, vocab, train_cfg, moe = load_checkpoint(args.checkpoint or args.out / "model.json")
    split = args.split or ("test" if any(it.split == "test" for it in items) else "train")
    chosen = split_items(items, split)
    examples = to_examples(chosen, vocab, params.dim, _rationales(args))
    evaluation = evaluate(chosen, examples, params, vocab, moe, args.max_len)
    _write_eval(args.out, chosen, evaluation)
    sys.stdout.write(evaluation.report.summary())
    return 0


def cmd_report(args) -> int:
    preds, golds, cats, closed = [], [], [], []
    with (args.out / "predictions.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                preds.append(obj["prediction"])
                golds.append(obj["answer"])
                cats.append(obj["category"])
                closed.append(bool(obj["closed"]))
    routing_path = args.out / "routing.jsonl"
    routing = None
    if routing_path.exists():
        with routing_path.open(encoding="utf-8") as fh:
            routing = RoutingLog.read_jsonl(fh)
    report = build_report(preds, golds, cats, closed, routing)
    (args.out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (args.out / "report.txt").write_text(report.summary(), encoding="utf-8")
    sys.stdout.write(report.summary())
    return 0


def cmd_gridsearch(args) -> int:
    items = _need_dataset(args)
    train_cfg, _ = _configs(args)
    cells = grid_search(items, args.grid_experts, args.grid_topk, train_cfg, args.hidden,
                        _rationales(args), args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "grid.csv").write_text(grid_csv(cells), encoding="utf-8")
    text = grid_text(cells)
    (args.out / "grid.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0 if any(c.status == "ok" for c in cells) else 1


def cmd_synth(args) -> int:
    path = make_synthetic(args.out, SyntheticSpec(num_items=args.items, test_items=args.test_items, seed=args.seed))
    print(f"wrote {path} and {args.out / 'transcript.jsonl'}")
    return 0


COMMANDS = {
    "rationale": cmd_rationale,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "gridsearch": cmd_gridsearch,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
