"""Command-line entry points.

Subcommands: synth-data, train, evaluate, retrieve, chat-serve. Exit codes:
0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

logger = logging.getLogger(__name__)


def _default_db_path(corpus_path: str) -> Path:
    p = Path(corpus_path)
    return p.with_suffix(".db.json") if p.suffix == ".json" else p.parent / (p.name + ".db.json")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="todkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus + database")
    p.add_argument("--out", required=True, help="corpus JSON path")
    p.add_argument("--dialogs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--db-out", default=None, help="database path (default <out>.db.json)")

    p = sub.add_parser("train", help="train a dialog system from a plan config")
    p.add_argument("--config", required=True, help="TrainPlan JSON file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--db", default=None, help="database path (default <corpus>.db.json)")
    p.add_argument("--log", default=None, help="JSONL training log (default <out>.log.jsonl)")

    p = sub.add_parser("evaluate", help="run the automatic metric suite")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--report", required=True, help="metric report JSON path")
    p.add_argument("--db", default=None)
    p.add_argument("--decode", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--beam-size", type=int, default=8)
    p.add_argument("--predictions", default=None, help="JSONL predictions (default <report>.predictions.jsonl)")

    p = sub.add_parser("retrieve", help="query the retrieval index of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", required=True, help="corpus to (re)build the index from if absent")
    p.add_argument("--query", required=True, help="context text to embed")
    p.add_argument("--db", default=None)

    p = sub.add_parser("chat-serve", help="serve the live chat endpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--port", type=int, default=8099)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--decode", choices=("greedy", "beam"), default="greedy")
    return parser


def _cmd_synth_data(args) -> int:
    from .corpus import save_corpus
    from .database import save_database
    from .synthetic import default_schema, generate_synthetic_corpus, synthetic_database

    schema = default_schema()
    db = synthetic_database(schema, args.seed)
    corpus = generate_synthetic_corpus(schema, args.dialogs, args.seed, db)
    save_corpus(corpus, args.out)
    db_path = args.db_out or _default_db_path(args.out)
    save_database(db, db_path)
    print(f"wrote {len(corpus)} dialogs to {args.out} and database to {db_path}")
    return 0


def _load_corpus_and_db(corpus_path: str, db_path: str | None):
    from .corpus import load_corpus
    from .database import load_database

    dialogs = load_corpus(corpus_path)
    db = load_database(db_path or _default_db_path(corpus_path))
    return dialogs, db


def _cmd_train(args) -> int:
    from .pipeline import build_examples
    from .system import DialogSystem
    from .training import (
        TrainPlan,
        train_joint_alternating,
        train_pure_generative,
        train_two_stage,
        vocab_from_examples,
        write_logs,
        build_index,
        encode_examples,
    )

    plan = TrainPlan.from_json(json.loads(Path(args.config).read_text()))
    dialogs, db = _load_corpus_and_db(args.corpus, args.db)
    examples = build_examples(dialogs, db)
    vocab = vocab_from_examples(examples)
    meta = {"plan": plan.to_json(), "hint_max_tokens": plan.hint_max_tokens}

    if plan.regime == "generative":
        gen, logs = train_pure_generative(plan, examples, vocab)
        system = DialogSystem(gen, vocab, db=db, meta=meta)
    elif plan.regime == "two_stage":
        retriever, gen, index, logs = train_two_stage(plan, examples, vocab)
        system = DialogSystem(gen, vocab, db=db, retriever=retriever, index=index, meta=meta)
    else:
        hybrid, index, logs = train_joint_alternating(plan, examples, vocab)
        system = DialogSystem(hybrid, vocab, db=db, index=index, meta=meta)

    system.save(args.out)
    write_logs(logs, args.log or f"{args.out}.log.jsonl")
    print(f"saved checkpoint to {args.out} ({len(logs)} log records)")
    return 0


def _cmd_evaluate(args) -> int:
    from .system import DialogSystem, evaluate_system, write_predictions

    dialogs, db = _load_corpus_and_db(args.corpus, args.db)
    system = DialogSystem.load(args.model, db=db)
    report, rows = evaluate_system(
        system, dialogs, db, decode=args.decode, beam_size=args.beam_size
    )
    Path(args.report).write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))
    write_predictions(rows, args.predictions or f"{args.report}.predictions.jsonl")
    width = max(len(k) for k in report.to_json())
    for key, value in report.to_json().items():
        shown = "-" if value is None else (f"{value:.4f}" if isinstance(value, float) else value)
        print(f"{key:<{width}}  {shown}")
    return 0


def _cmd_retrieve(args) -> int:
    from .models import HybridDialogModel, encode_ids, pad_batch
    from .pipeline import build_examples
    from .system import DialogSystem
    from .training import (
        TrainPlan,
        build_index,
        encode_examples,
        vocab_from_examples,
    )
    import numpy as np

    dialogs, db = _load_corpus_and_db(args.corpus, args.db)
    system = DialogSystem.load(args.model, db=db)
    if system.index is None:
        raise ValueError("checkpoint has no retrieval index (generative-only model?)")
    model = system.gen if isinstance(system.gen, HybridDialogModel) else system.retriever
    ids = encode_ids(system.vocab, args.query, model.cfg.max_seq_len)
    padded, pad = pad_batch([ids])
    if isinstance(system.gen, HybridDialogModel):
        emb = system.gen.retrieval_embed(padded, np.array([0]), pad).data[0]
    else:
        emb = model.embed_context(padded, pad).data[0]
    response, actions, sim = system.index.top1(emb)
    print(json.dumps({
        "query": args.query,
        "response": response,
        "actions": sorted(str(a) for a in actions),
        "similarity": sim,
    }, indent=1))
    return 0


def _cmd_chat_serve(args) -> int:
    from .database import load_database
    from .serving import serve
    from .system import DialogSystem

    db = load_database(args.db)
    system = DialogSystem.load(args.model, db=db)
    print(f"serving on ws://{args.host}:{args.port}/chat (health: /healthz)")
    serve(system, args.host, args.port, decode=args.decode)
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "retrieve": _cmd_retrieve,
    "chat-serve": _cmd_chat_serve,
}


def cli_dispatch(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except KeyboardInterrupt:
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        logger.error("%s: %s", type(e).__name__, e)
        return 1


def main(argv: list[str] | None = None) -> int:
    return cli_dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
