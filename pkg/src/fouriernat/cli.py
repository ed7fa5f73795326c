"""Command-line entry point.

Configuration is layered: built-in defaults, then an optional ``--config``
JSON file, then explicit flags.  Every command writes the merged result to
``<out-dir>/run_config.json`` before doing any work.

Exit codes: 0 success, 1 check failure, 2 config/usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import data as D
from .decoding import RefineConfig, ar_greedy_batch, benchmark, decode_batch
from .metrics import evaluate
from .model import ARTransformer, FourierNAT, ModelConfig, build_model, load_checkpoint
from .selfcheck import run_checks
from .tensor import ConfigError
from .training import NumericalAbort, TrainConfig, distill_generate, train_loop

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    **{f.name: f.default for f in fields(ModelConfig)},
    **{f.name: f.default for f in fields(TrainConfig)},
    "vocab": None,
    "kind": "copy", "content_vocab": 32, "min_len": 4, "max_len": 12, "n": 1000,
    "passes": 0, "mask_ratio": 0.3,
    "batch_size": 64, "workers": 1, "limit": None, "repeats": 1,
    "out_dir": ".",
}


class UsageError(Exception):
    pass


def _add_common(p):
    p.add_argument("--config", help="JSON file of settings; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")


def _add_model_flags(p):
    p.add_argument("--d", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--heads", dest="n_heads", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--content-vocab", dest="content_vocab", type=int)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--s-max", dest="s_max", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--draft-init", dest="draft_init", choices=["zeros", "mask_embedding"])
    p.add_argument("--combine-imag", dest="combine_imag", action="store_const", const=True)
    p.add_argument("--dtype", choices=["float64", "float32"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fouriernat", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset")
    _add_common(g)
    g.add_argument("--kind", choices=D.TASK_KINDS)
    g.add_argument("--n", type=int)
    g.add_argument("--content-vocab", dest="content_vocab", type=int)
    g.add_argument("--min-len", dest="min_len", type=int)
    g.add_argument("--max-len", dest="max_len", type=int)
    g.add_argument("--t-max", dest="t_max", type=int)
    g.add_argument("--output", required=False)

    t = sub.add_parser("train", help="train a model and write curves.csv + checkpoints")
    _add_common(t)
    _add_model_flags(t)
    t.add_argument("--data")
    t.add_argument("--val")
    t.add_argument("--arch", choices=["fouriernat", "ar-baseline", "fouriernat-nogate"])
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--warmup", dest="warmup_steps", type=int)
    t.add_argument("--tokens-per-batch", dest="tokens_per_batch", type=int)
    t.add_argument("--eval-interval", dest="eval_interval", type=int)
    t.add_argument("--val-size", dest="val_size", type=int)
    t.add_argument("--lr-scale", dest="lr_scale", type=float)
    t.add_argument("--label-smoothing", dest="label_smoothing", type=float)
    t.add_argument("--refine-mix", dest="refine_mix", type=float)
    t.add_argument("--record-time", dest="record_time", action="store_const", const=True)

    d = sub.add_parser("decode", help="decode a dataset with a checkpoint")
    _add_common(d)
    d.add_argument("--checkpoint")
    d.add_argument("--data")
    d.add_argument("--output")
    d.add_argument("--passes", type=int)
    d.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    d.add_argument("--batch-size", dest="batch_size", type=int)
    d.add_argument("--vocab", type=int)
    d.add_argument("--t-max", dest="t_max", type=int)

    e = sub.add_parser("evaluate", help="score hypotheses against references")
    _add_common(e)
    e.add_argument("hyps", nargs="?")
    e.add_argument("refs", nargs="?")

    b = sub.add_parser("benchmark", help="parallel vs autoregressive decoding speed")
    _add_common(b)
    b.add_argument("--nat")
    b.add_argument("--ar")
    b.add_argument("--data")
    b.add_argument("--batch-size", dest="batch_size", type=int)
    b.add_argument("--refine-passes", dest="passes", type=int)
    b.add_argument("--mask-ratio", dest="mask_ratio", type=float)
    b.add_argument("--workers", type=int)
    b.add_argument("--limit", type=int, help="use only the first N examples")
    b.add_argument("--dtype", choices=["float64", "float32"], help="cast both models before timing")
    b.add_argument("--repeats", type=int, help="time each side N times and keep the fastest")
    b.add_argument("--output")

    x = sub.add_parser("distill", help="replace targets with an AR teacher's greedy decodes")
    _add_common(x)
    x.add_argument("--teacher")
    x.add_argument("--data")
    x.add_argument("--output")
    x.add_argument("--batch-size", dest="batch_size", type=int)

    s = sub.add_parser("selfcheck", help="run the invariant battery")
    _add_common(s)
    return ap


def merge_config(args) -> tuple[dict, set]:
    """Merged settings plus the set of keys given explicitly (file or flag)."""
    cfg = dict(DEFAULTS)
    explicit = set()
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        cfg.update(file_cfg)
        explicit.update(file_cfg)
    for k, v in vars(args).items():
        if k in ("config", "command", "verbose") or v is None:
            continue
        cfg[k] = v
        explicit.add(k)
    if cfg.get("vocab") is None:
        cfg["vocab"] = cfg["content_vocab"] + D.N_SPECIAL
    cfg["command"] = args.command
    return cfg, explicit


def _echo_config(cfg):
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run_config.json", "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(cfg, *keys):
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join(missing)}")


def _require_file(path):
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")


# ---------------------------------------------------------------------------


def cmd_generate_data(cfg):
    _require(cfg, "output")
    spec = D.TaskSpec(cfg["kind"], cfg["content_vocab"], cfg["min_len"], cfg["max_len"], cfg["seed"], cfg["t_max"])
    examples = D.generate(spec, cfg["n"])
    D.save(examples, cfg["output"])
    print(f"wrote {len(examples)} examples to {cfg['output']} (seed {cfg['seed']})")
    return EXIT_OK


def cmd_train(cfg):
    _require(cfg, "data")
    _require_file(cfg["data"])
    train = D.load(cfg["data"])
    val = None
    if cfg.get("val"):
        _require_file(cfg["val"])
        val = D.load(cfg["val"])
    mc = ModelConfig.from_dict(cfg).validate()
    tc = TrainConfig.from_dict(cfg).validate()
    model = build_model(mc, seed=cfg["seed"])
    try:
        result = train_loop(model, train, tc, val=val, out_dir=cfg["out_dir"])
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"trained {result.steps} steps; best val BLEU {result.best_val:.4f}; "
          f"curves at {Path(cfg['out_dir']) / 'curves.csv'}")
    return EXIT_OK


def _load_model(path):
    _require_file(path)
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None


def _check_compat(model, cfg, explicit):
    for key in ("vocab", "t_max"):
        if key in explicit and getattr(model.config, key) != cfg[key]:
            raise UsageError(f"checkpoint {key}={getattr(model.config, key)} differs from requested {cfg[key]}")


def cmd_decode(cfg, explicit=()):
    _require(cfg, "checkpoint", "data", "output")
    model = _load_model(cfg["checkpoint"])
    _check_compat(model, cfg, explicit)
    _require_file(cfg["data"])
    examples = D.load(cfg["data"])
    refine = RefineConfig(cfg["passes"], cfg["mask_ratio"]).validate()
    bs = cfg["batch_size"]
    with open(cfg["output"], "w") as fh:
        for i in range(0, len(examples), bs):
            srcs = [ex.src for ex in examples[i:i + bs]]
            if isinstance(model, ARTransformer):
                seqs, _ = ar_greedy_batch(model, srcs)
                recs = [{"src": s, "hyp": D.strip_eos(q), "confidences": [], "passes": 1}
                        for s, q in zip(srcs, seqs)]
            else:
                recs = [{"src": s, "hyp": r.tokens, "confidences": r.confidences, "passes": r.passes}
                        for s, r in zip(srcs, decode_batch(model, srcs, refine))]
            for rec in recs:
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    print(f"decoded {len(examples)} examples to {cfg['output']}")
    return EXIT_OK


def _sequences(path):
    _require_file(path)
    recs = D.load_records(path)
    out = []
    for i, r in enumerate(recs, 1):
        seq = r.get("hyp", r.get("tgt"))
        if seq is None:
            raise UsageError(f"{path}:{i}: record has neither 'hyp' nor 'tgt'")
        out.append(D.strip_eos(seq))
    return out


def cmd_evaluate(cfg):
    _require(cfg, "hyps", "refs")
    hyps, refs = _sequences(cfg["hyps"]), _sequences(cfg["refs"])
    if len(hyps) != len(refs):
        raise UsageError(f"misaligned files: {len(hyps)} hypotheses vs {len(refs)} references")
    print(json.dumps(evaluate(hyps, refs).to_dict(), sort_keys=False))
    return EXIT_OK


def cmd_benchmark(cfg, explicit=()):
    _require(cfg, "nat", "ar", "data")
    nat, ar = _load_model(cfg["nat"]), _load_model(cfg["ar"])
    if not isinstance(nat, FourierNAT) or not isinstance(ar, ARTransformer):
        raise UsageError("--nat must be a FourierNAT checkpoint and --ar an ar-baseline checkpoint")
    examples = D.load(cfg["data"])
    if cfg.get("limit"):
        examples = examples[:cfg["limit"]]
    try:
        dtype = cfg["dtype"] if "dtype" in explicit else None
        report = benchmark(nat, ar, examples, cfg["batch_size"], cfg["passes"], cfg["mask_ratio"], cfg["workers"],
                           dtype=dtype, repeats=cfg["repeats"])
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    text = json.dumps(report)
    if cfg.get("output"):
        Path(cfg["output"]).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_distill(cfg):
    _require(cfg, "teacher", "data", "output")
    teacher = _load_model(cfg["teacher"])
    if not isinstance(teacher, ARTransformer):
        raise UsageError("teacher must be an ar-baseline checkpoint")
    examples, truncated = distill_generate(teacher, D.load(cfg["data"]), cfg["batch_size"])
    D.save(examples, cfg["output"])
    print(f"distilled {len(examples)} examples to {cfg['output']} ({truncated} truncated at t_max)")
    return EXIT_OK


def cmd_selfcheck(cfg):
    results = run_checks(cfg["seed"])
    failed = [name for name, ok, _ in results if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "distill": cmd_distill,
    "selfcheck": cmd_selfcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, explicit = merge_config(args)
        _echo_config(cfg)
        fn = COMMANDS[args.command]
        if args.command in ("decode", "benchmark"):
            return fn(cfg, explicit)
        return fn(cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
