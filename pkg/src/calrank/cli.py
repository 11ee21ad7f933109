"""Command-line driver: ``gen``, ``train``, ``rerank``, ``eval``, ``bench`` and ``bias``.

Configuration precedence is built-in defaults, then ``--config`` (flat
``key = value`` lines naming dataclass fields), then ``--set key=value`` and the
dedicated flags. A single ``--seed`` is fanned out into named sub-seeds.

Exit codes: 0 on success, 2 for usage errors and missing inputs, 1 when a stage
fails at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import typing
import zlib
from pathlib import Path

import numpy as np

STAGES = ("gen", "train", "rerank", "eval", "bench", "bias")
BENCH_SIZES = (100, 200, 400, 800, 1000)


class UsageError(Exception):
    pass


def sub_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def read_config_file(path: Path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(v.strip(), inner, key) for v in value.split(",") if v.strip())
    try:
        if tp is bool:
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return tp(value)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for {key}: {value!r}") from None


def apply_overrides(configs: list, overrides: dict[str, str]):
    """Return copies of ``configs`` with matching fields replaced; every key must hit at least one."""
    out = list(configs)
    for key, raw in overrides.items():
        hit = False
        for i, cfg in enumerate(out):
            hints = typing.get_type_hints(type(cfg))
            if key in hints:
                try:
                    out[i] = dataclasses.replace(cfg, **{key: _coerce(raw, hints[key], key)})
                except ValueError as err:
                    raise UsageError(f"invalid override {key}={raw}: {err}") from None
                hit = True
        if not hit:
            raise UsageError(f"unknown setting {key!r}")
    return out


def _parser() -> argparse.ArgumentParser:
    from .datagen import GenConfig
    from .trainer import TrainConfig

    t, g = TrainConfig(), GenConfig()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    common.add_argument("--config", type=Path, help="flat key = value file of config overrides")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field; repeatable")
    common.add_argument("--report", type=Path, help="where to write the stage report")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    window = argparse.ArgumentParser(add_help=False)
    window.add_argument("--window-size", type=int, default=g.num_slots,
                        help=f"candidates per listwise input, M (default: {g.num_slots})")
    window.add_argument("--strategy", choices=("global_score", "sliding_window"), default="global_score",
                        help="reranking strategy (default: global_score)")
    window.add_argument("--stride", type=int, default=10, help="sliding-window stride (default: 10)")
    window.add_argument("--use-point-scores", action="store_true",
                        help="rank by point-view scores instead of list-view scores")

    p = argparse.ArgumentParser(prog="calrank", description="Self-calibrated listwise reranking at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    s.add_argument("--data", type=Path, required=True, help="output directory")

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", type=Path, required=True, help="dataset directory or training JSONL")
    s.add_argument("--checkpoint", type=Path, required=True, help="output checkpoint (.npz)")
    s.add_argument("--epochs", type=int, help=f"training epochs (default: {t.epochs})")
    s.add_argument("--batch-size", type=int, help=f"queries per batch, Q (default: {t.batch_size})")
    s.add_argument("--lr", type=float, help=f"learning rate (default: {t.lr:g})")
    s.add_argument("--tau", type=float, help=f"variance gate threshold (default: {t.tau:g})")
    s.add_argument("--no-point-loss", action="store_true", help="drop the point-view ranking loss")
    s.add_argument("--no-calibration", action="store_true", help="drop the self-calibration loss")
    s.add_argument("--no-in-batch", action="store_true", help="calibrate within each query only")
    s.add_argument("--no-adaptive", action="store_true", help="apply calibration at every step")

    s = sub.add_parser("rerank", parents=[common, window], help="rerank candidate lists into a TREC run")
    s.add_argument("--data", type=Path, required=True, help="dataset directory or candidate JSONL")
    s.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    s.add_argument("--run", type=Path, required=True, help="output TREC run file")

    s = sub.add_parser("eval", parents=[common], help="score a run with NDCG@10")
    s.add_argument("--run", type=Path, required=True, help="TREC run file")
    s.add_argument("--qrels", type=Path, required=True, help="TREC qrels file")

    s = sub.add_parser("bench", parents=[common, window], help="latency and forward-count benchmark")
    s.add_argument("--data", type=Path, required=True, help="dataset directory or candidate JSONL")
    s.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    s.add_argument("--sizes", default=",".join(map(str, BENCH_SIZES)),
                   help=f"comma-separated candidate-set sizes (default: {','.join(map(str, BENCH_SIZES))})")
    s.add_argument("--repeats", type=int, default=3, help="timing repetitions per cell (default: 3)")

    s = sub.add_parser("bias", parents=[common, window], help="position-bias table over input orders")
    s.add_argument("--data", type=Path, required=True, help="dataset directory or candidate JSONL")
    s.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint")
    s.add_argument("--qrels", type=Path, help="qrels (default: qrels.txt in the dataset directory)")
    return p


def _require(path: Path | None, flag: str) -> Path:
    if path is None or not path.exists():
        raise UsageError(f"{flag}: file not found: {path}")
    return path


def _examples_path(data: Path, split: str) -> Path:
    path = data / f"{split}.jsonl" if data.is_dir() else data
    return _require(path, "--data")


def _overrides(args) -> dict[str, str]:
    out = read_config_file(_require(args.config, "--config")) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_reranker(args):
    from .datagen import Vocab
    from .inference import Reranker
    from .model import load_checkpoint

    params, meta = load_checkpoint(_require(args.checkpoint, "--checkpoint"))
    max_tokens = int(meta.get("train", {}).get("max_candidate_tokens", 32))
    return Reranker(params, Vocab(params.config.vocab_size), max_candidate_tokens=max_tokens)


def _write_json(path: Path | None, payload: dict) -> None:
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen(args) -> int:
    from .datagen import GenConfig, generate, write_dataset

    (cfg,) = apply_overrides([GenConfig(seed=args.seed)], _overrides(args))
    paths = write_dataset(args.data, *generate(cfg))
    _write_json(args.report, {"config": dataclasses.asdict(cfg), "files": {k: str(v) for k, v in paths.items()}})
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_train(args) -> int:
    from .datagen import Vocab, read_examples
    from .model import ModelConfig, save_checkpoint
    from .trainer import TrainConfig, train

    data_path = _examples_path(args.data, "train")
    tcfg = TrainConfig(seed=sub_seed(args.seed, "train"))
    mcfg = ModelConfig(seed=sub_seed(args.seed, "model"))
    tcfg, mcfg = apply_overrides([tcfg, mcfg], _overrides(args))
    flags = {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr, "tau": args.tau}
    tcfg = dataclasses.replace(tcfg, **{k: v for k, v in flags.items() if v is not None})
    tcfg = dataclasses.replace(
        tcfg,
        enable_point_loss=tcfg.enable_point_loss and not args.no_point_loss,
        enable_calibration=tcfg.enable_calibration and not args.no_calibration,
        enable_in_batch=tcfg.enable_in_batch and not args.no_in_batch,
        enable_adaptive=tcfg.enable_adaptive and not args.no_adaptive,
    )
    try:
        mcfg.validate()
    except ValueError as err:
        raise UsageError(f"invalid model setting: {err}") from None

    dataset = read_examples(data_path)
    ckpt = args.checkpoint
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = args.report or ckpt.with_suffix(".log.jsonl")
    params, trace = train(tcfg, dataset, mcfg, Vocab(mcfg.vocab_size),
                          checkpoint_dir=ckpt.with_suffix(".epochs"), log_path=log_path)
    save_checkpoint(ckpt, params, {"train": dataclasses.asdict(tcfg), "steps": len(trace)})
    print(f"trained {len(trace)} steps; final total loss {trace[-1].total:.4f}; checkpoint {ckpt}")
    return 0


def cmd_rerank(args) -> int:
    from .datagen import read_examples
    from .evalkit import RunRecord, write_run
    from .inference import RerankRequest, rerank

    examples = read_examples(_examples_path(args.data, "eval"))
    reranker = _load_reranker(args)
    records, forwards, latency = [], {}, 0.0
    for ex in examples:
        req = RerankRequest(ex.query, [(c.docid, c.text) for c in ex.candidates], args.window_size,
                            args.strategy, args.stride, args.use_point_scores)
        res = rerank(reranker, req)
        forwards[ex.qid] = res.forwards
        latency += res.latency_ms
        scores = res.scores if res.scores else [float(len(res.ids) - i) for i in range(len(res.ids))]
        records += [RunRecord(ex.qid, d, i + 1, s) for i, (d, s) in enumerate(zip(res.ids, scores))]
    args.run.parent.mkdir(parents=True, exist_ok=True)
    write_run(args.run, records)
    _write_json(args.report, {"strategy": args.strategy, "window_size": args.window_size, "stride": args.stride,
                              "queries": len(examples), "forwards": forwards,
                              "total_forwards": sum(forwards.values()), "latency_ms": latency})
    print(f"reranked {len(examples)} queries with {sum(forwards.values())} forwards; run {args.run}")
    return 0


def cmd_eval(args) -> int:
    from .evalkit import NDCG_NOTE, evaluate_run, read_qrels, read_run

    run = read_run(_require(args.run, "--run"))
    qrels = read_qrels(_require(args.qrels, "--qrels"))
    per_query = evaluate_run(run, qrels)
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    _write_json(args.report, {"ndcg@10": mean, "queries": len(per_query), "per_query": per_query,
                              "note": NDCG_NOTE})
    print(f"ndcg@10 {mean:.4f} over {len(per_query)} queries")
    return 0


def cmd_bench(args) -> int:
    from .datagen import read_examples
    from .inference import latency_bench, write_bench_csv

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes: expected integers, got {args.sizes!r}") from None
    examples = read_examples(_examples_path(args.data, "eval"))
    reranker = _load_reranker(args)
    ex = examples[0]
    rows = latency_bench(reranker, ex.query, [(c.docid, c.text) for c in ex.candidates], sizes,
                         window_size=args.window_size, stride=args.stride, repeats=args.repeats)
    out = args.report or Path("bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)
    for strategy, n, forwards, ms in rows:
        print(f"{strategy:15s} |C|={n:5d} forwards={forwards:4d} {ms:9.1f} ms")
    return 0


def cmd_bias(args) -> int:
    from .datagen import read_examples
    from .evalkit import position_bias_experiment, read_qrels, write_bias_table

    examples = read_examples(_examples_path(args.data, "eval"))
    qrels_path = args.qrels or (args.data / "qrels.txt" if args.data.is_dir() else None)
    qrels = read_qrels(_require(qrels_path, "--qrels"))
    out = position_bias_experiment(_load_reranker(args), examples, qrels, args.window_size,
                                   seed=sub_seed(args.seed, "bias"))
    path = args.report or Path("bias.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_bias_table(path, out["table"])
    for mode, mean, n in out["table"]:
        print(f"{mode:9s} ndcg@10 {mean:.4f} ({n} queries)")
    print(f"max rank shift across modes: {max(out['disagreement'].values(), default=0)}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "rerank": cmd_rerank, "eval": cmd_eval,
            "bench": cmd_bench, "bias": cmd_bias}


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"calrank {args.command}: error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - report the failing stage, not a traceback
        logging.getLogger(__name__).debug("stage failure", exc_info=True)
        print(f"calrank {args.command}: stage '{args.command}' failed: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
