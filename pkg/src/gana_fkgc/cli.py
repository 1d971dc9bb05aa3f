"""Command-line entry point: ``gana-fkgc {pretrain,train,eval,synth,inspect-attention}``.

Settings are resolved in three layers, later ones winning: built-in
defaults, the JSON file given with ``--config``, then command-line flags.
The resolved settings are written to ``<output_dir>/run_config.json``;
passing that file back through ``--config`` repeats the run.

The dataset directory defaults to ``$GANA_FKGC_DATA`` when neither the
config file nor ``--data`` names one.

Exit status: 0 on success, 2 for usage, config or dataset errors, 3 for
any other failure raised by the library.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_embeddings, save_checkpoint, save_embeddings
from .config import ABLATIONS, ConfigError, TrainConfig
from .evaluation import attention_report, evaluate, evaluate_by_category, evaluation_episode
from .kg_data import DatasetError, GenerationError, dataset_stats, generate_synthetic_kg, load_dataset, save_dataset
from .pretrain import pretrain_embeddings
from .training import Trainer, model_from_checkpoint, write_log

logger = logging.getLogger(__name__)

DATA_ENV = "GANA_FKGC_DATA"
RUN_CONFIG = "run_config.json"
EXIT_USAGE, EXIT_RUNTIME = 2, 3

# run-level settings that are not TrainConfig fields
RUN_DEFAULTS = {
    "dataset": None,
    "output_dir": "runs/default",
    "embeddings": None,
    "pretrain_epochs": 200,
    "pretrain_lr": 0.01,
    "pretrain_gamma": 1.0,
    "pretrain_batch_size": 256,
}


class UsageError(Exception):
    pass


def resolve_run_config(path: str | None, overrides: dict) -> dict:
    """Merge defaults, a JSON config file and flag overrides into one flat dict."""
    resolved = {**RUN_DEFAULTS, **TrainConfig().to_dict()}
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError(f"{path}: expected a JSON object")
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {sorted(unknown)}")
        resolved.update(loaded)
    resolved.update({k: v for k, v in overrides.items() if v is not None})
    if resolved["dataset"] is None and os.environ.get(DATA_ENV):
        resolved["dataset"] = os.environ[DATA_ENV]
    train_config(resolved)  # validate early
    return resolved


def train_config(run: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig.from_dict({k: v for k, v in run.items() if k in fields})


def echo_config(run: dict) -> Path:
    out = Path(run["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_CONFIG
    path.write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _dataset(run: dict, max_neighbors: int, seed: int):
    if not run.get("dataset"):
        raise UsageError(f"no dataset given (use --data, a config 'dataset' entry or ${DATA_ENV})")
    return load_dataset(run["dataset"], max_neighbors=max_neighbors, seed=seed)


def _embeddings(run: dict, graph, cfg: TrainConfig):
    if run.get("embeddings"):
        table = load_embeddings(run["embeddings"])
        table.check_vocab(graph)
        return table
    return pretrain_embeddings(graph, cfg.d, epochs=run["pretrain_epochs"], lr=run["pretrain_lr"],
                               gamma=run["pretrain_gamma"], rng=cfg.seed,
                               batch_size=run["pretrain_batch_size"], norm=cfg.norm)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    run = resolve_run_config(args.config, _common_overrides(args))
    cfg = train_config(run)
    graph, _ = _dataset(run, cfg.max_neighbors, cfg.seed)
    table = pretrain_embeddings(graph, cfg.d, epochs=run["pretrain_epochs"], lr=run["pretrain_lr"],
                                gamma=run["pretrain_gamma"], rng=cfg.seed,
                                batch_size=run["pretrain_batch_size"], norm=cfg.norm)
    echo_config(run)
    target = Path(run["output_dir"]) / "embeddings"
    save_embeddings(table, target, {"entities": graph.num_entities, "relations": graph.num_relations,
                                    "d": cfg.d, "seed": cfg.seed})
    print(json.dumps({"embeddings": str(target), "entities": graph.num_entities, "d": cfg.d}))
    return 0


def cmd_train(args) -> int:
    run = resolve_run_config(args.config, _common_overrides(args))
    cfg = train_config(run)
    graph, split = _dataset(run, cfg.max_neighbors, cfg.seed)
    embeddings = _embeddings(run, graph, cfg)
    echo_config(run)
    out = Path(run["output_dir"])
    trainer = Trainer(graph, split, cfg, embeddings, workers=args.workers)
    best, log = trainer.run(on_record=lambda rec: logger.info("%s", rec) if "val_mrr" in rec else None)
    best.extra["dataset"] = str(Path(run["dataset"]).resolve())
    save_checkpoint(best, out / "checkpoint")
    write_log(log, out / "train_log.jsonl")
    print(json.dumps({"checkpoint": str(out / "checkpoint"), "step": best.step,
                      "best_val_mrr": best.best_val_mrr}))
    return 0


def _load_for_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    dataset = args.data or ckpt.extra.get("dataset") or os.environ.get(DATA_ENV)
    if not dataset:
        raise UsageError("no dataset given and the checkpoint does not record one")
    cfg = TrainConfig.from_dict(ckpt.config)
    graph, split = load_dataset(dataset, max_neighbors=cfg.max_neighbors, seed=cfg.seed)
    return ckpt, cfg, graph, split, model_from_checkpoint(graph, ckpt)


def cmd_eval(args) -> int:
    ckpt, cfg, graph, split, model = _load_for_eval(args)
    report = evaluate(model, split, args.partition, workers=args.workers)
    report = evaluate_by_category(report, split, cfg.category_threshold)
    text = report.to_json(graph)
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def cmd_synth(args) -> int:
    graph, split = generate_synthetic_kg(args.entities, args.background_relations, args.task_relations,
                                         args.pattern_strength, np.random.default_rng(args.seed),
                                         max_neighbors=args.max_neighbors, K=args.shots)
    save_dataset(graph, split, args.out)
    print(json.dumps({"dataset": str(args.out), **dataset_stats(graph, split)}))
    return 0


def cmd_inspect_attention(args) -> int:
    ckpt, cfg, graph, split, model = _load_for_eval(args)
    rid = graph.relation_ids.get(args.relation)
    if rid is None or rid not in split.few_shot_relations:
        raise UsageError(f"unknown few-shot relation: {args.relation!r}")
    if not model.use_gana:
        raise UsageError("checkpoint was trained with no_gana; it has no attention weights")
    episode = evaluation_episode(split, rid, cfg.K, cfg.eval_seed, cfg.negatives_per_positive)
    print(json.dumps(attention_report(episode, model, graph, args.top_k, args.bottom_k), indent=2))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common_overrides(args) -> dict:
    out = {"dataset": args.data, "output_dir": args.output_dir, "seed": args.seed, "K": args.shots,
           "embeddings": getattr(args, "embeddings", None)}
    if args.ablation:
        out["ablation"] = sorted(set(args.ablation))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gana-fkgc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", help="JSON run config (TrainConfig fields plus run settings)")
        p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
        p.add_argument("--output-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--shots", type=int, choices=(1, 3, 5))
        p.add_argument("--ablation", action="append", choices=ABLATIONS)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("pretrain", help="TransE-pretrain background embeddings")
    run_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="meta-train a model")
    run_flags(p)
    p.add_argument("--embeddings", help="pretrained embedding directory (pretrains inline if absent)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank test or validation queries with a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--partition", choices=("valid", "test"), default="test")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--output", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic planted dataset")
    p.add_argument("out", type=Path)
    p.add_argument("--entities", type=int, default=200)
    p.add_argument("--background-relations", type=int, default=20)
    p.add_argument("--task-relations", type=int, default=5)
    p.add_argument("--pattern-strength", type=float, default=0.9)
    p.add_argument("--max-neighbors", type=int, default=50)
    p.add_argument("--shots", type=int, choices=(1, 3, 5), default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect-attention", help="dump neighbor attention for one few-shot relation")
    p.add_argument("checkpoint")
    p.add_argument("relation")
    p.add_argument("--data")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--bottom-k", type=int, default=2)
    p.set_defaults(func=cmd_inspect_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
