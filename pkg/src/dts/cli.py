"""Command-line entry point (``dts``)."""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace

from . import data as toy_data
from .ast import parse_sexpr
from .corpus import build_vocab, load_dataset, tokenize, write_toy_splits
from .evaluation import aggregate, evaluate, lambda_sweep, run_seeds, sweep_csv
from .grammar import load_grammar, parse_grammar
from .train import PRESETS, TrainConfig, load_checkpoint, read_checkpoint, train
from .transition import Order, format_sequence, linearize, build_action_tree

PATH_KEYS = ("grammar", "train", "valid", "test", "out_dir")
RUN_KEYS = PATH_KEYS + ("preset",)


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def resolve_grammar(spec: str):
    """A grammar file path, or the name of a bundled toy grammar."""
    if os.path.exists(spec):
        return load_grammar(spec)
    if spec in toy_data.TOY_GRAMMARS:
        return parse_grammar(toy_data.grammar_text(spec))
    raise FileNotFoundError(f"no grammar file or bundled grammar named {spec!r}")


# -- config ---------------------------------------------------------------------------------


def load_run_config(path: str | None, overrides: dict) -> tuple[dict, TrainConfig]:
    """Merge config file, preset and flag overrides; flags win. Returns (paths, TrainConfig)."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        if not isinstance(raw, dict):
            raise CliError("config must be a JSON object")
    known = {f.name for f in fields(TrainConfig)} | {"lambda"} | set(RUN_KEYS)
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(unknown)}")
    merged = dict(raw)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    preset = merged.pop("preset", None)
    values = {}
    if preset is not None:
        if preset not in PRESETS:
            raise CliError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
    paths = {k: merged.pop(k) for k in PATH_KEYS if k in merged}
    values.update(merged)
    if "seed" not in values and "DTS_SEED" in os.environ:
        values["seed"] = int(os.environ["DTS_SEED"])
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    # paths in a config file are relative to the file
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    for k, v in paths.items():
        if k in raw and k not in overrides and isinstance(v, str) and not os.path.isabs(v):
            candidate = os.path.join(base, v)
            if k != "grammar" or os.path.exists(candidate):
                paths[k] = candidate
    return paths, TrainConfig.from_dict(values)


def _resolved(paths: dict, cfg: TrainConfig) -> dict:
    out = cfg.to_dict()
    out.update(paths)
    return out


def _load_splits(paths: dict, grammar, cfg: TrainConfig):
    for key in ("grammar", "train"):
        if key not in paths:
            raise CliError(f"config needs a {key!r} path")
    train_set = load_dataset(paths["train"], grammar, "train", multi_token=cfg.model.multi_token)
    valid_path = paths.get("valid", paths["train"])
    valid_set = load_dataset(valid_path, grammar, "validation", multi_token=cfg.model.multi_token)
    test_set = None
    if "test" in paths:
        test_set = load_dataset(paths["test"], grammar, "test", multi_token=cfg.model.multi_token)
    return train_set, valid_set, test_set


def _one_run(args) -> dict:
    paths, cfg, out_dir = args
    grammar = resolve_grammar(paths["grammar"])
    train_set, valid_set, test_set = _load_splits(paths, grammar, cfg)
    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train_log.jsonl")
    res = train(train_set, valid_set, grammar, cfg, out_dir=out_dir)
    summary = {
        "seed": cfg.seed,
        "epochs": len(res.history),
        "val_acc_a": res.checkpoint_a.meta["val_acc"],
        "val_acc_b": None if res.checkpoint_b is None else res.checkpoint_b.meta["val_acc"],
        "out_dir": out_dir,
        "log": log_path,
    }
    if test_set is not None:
        summary["test_acc_a"] = evaluate(res.checkpoint_a.to_model(grammar), test_set).accuracy
        if res.checkpoint_b is not None:
            summary["test_acc_b"] = evaluate(res.checkpoint_b.to_model(grammar),
                                             test_set).accuracy
    return summary


# -- commands ------------------------------------------------------------------------------------


def cmd_grammar_check(args) -> int:
    g = load_grammar(args.file)
    _emit({
        "ok": True,
        "root": g.root_type,
        "primitive_types": list(g.primitive_types),
        "composite_types": list(g.composite_types),
        "constructors": [c.name for c in g.constructors],
        "digest": g.digest(),
    })
    return 0


def cmd_linearize(args) -> int:
    g = resolve_grammar(args.grammar)
    ast = parse_sexpr(args.sexpr, g, multi_token=args.multi_token)
    seq = linearize(build_action_tree(ast, g, args.multi_token), g, args.order)
    if args.json:
        _emit([{"t": i + 1, "action": str(s.action),
                "parent_t": None if s.parent_timestep is None else s.parent_timestep + 1,
                "field": s.frontier_field.name} for i, s in enumerate(seq.steps)])
    else:
        print(format_sequence(seq))
    return 0


def cmd_gen_toy(args) -> int:
    g = resolve_grammar(args.grammar)
    rules = None
    if args.templates:
        with open(args.templates, encoding="utf-8") as f:
            rules = json.load(f)
    elif args.grammar in toy_data.TOY_GRAMMARS:
        rules = toy_data.templates(args.grammar)
    seed = _seed(args.seed)
    paths = write_toy_splits(g, args.out, args.size, seed, rules, args.valid_size, args.test_size)
    with open(os.path.join(args.out, "grammar.asdl"), "w", encoding="utf-8") as f:
        f.write(g.render())
    _emit({"seed": seed, "size": args.size, "files": paths})
    return 0


def _seed(flag):
    if flag is not None:
        return flag
    return int(os.environ.get("DTS_SEED", 0))


def cmd_train(args) -> int:
    overrides = {"mode": args.mode, "lambda": args.lam, "seed": args.seed, "epochs": args.epochs,
                 "out_dir": args.out_dir, "preset": args.preset}
    paths, cfg = load_run_config(args.config, overrides)
    out_dir = paths.get("out_dir")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
            json.dump(_resolved(paths, cfg), f, indent=2, sort_keys=True)
            f.write("\n")
    if args.runs == 1:
        result = _one_run((paths, cfg, out_dir))
        _emit(result)
        return 0
    jobs = []
    for i, seed in enumerate(run_seeds(cfg.seed, args.runs)):
        run_dir = None if out_dir is None else os.path.join(out_dir, f"run_{i}")
        jobs.append((paths, replace(cfg, seed=seed), run_dir))
    if args.parallel:
        with ProcessPoolExecutor() as pool:
            runs = list(pool.map(_one_run, jobs))
    else:
        runs = [_one_run(j) for j in jobs]
    report = {"runs": runs}
    for key in ("val_acc_a", "val_acc_b", "test_acc_a", "test_acc_b"):
        vals = [r[key] for r in runs if r.get(key) is not None]
        if vals:
            report[key] = aggregate(vals)
    _emit(report)
    return 0


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    ds = load_dataset(args.data, model.grammar, "test", multi_token=model.config.multi_token)
    report = evaluate(model, ds, args.order, args.beam, args.max_steps)
    report.meta["checkpoint"] = args.checkpoint
    if args.table:
        print(report.table())
    else:
        print(report.to_json())
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    tokens = tokenize(args.utterance) if args.tokenize else args.utterance.split()
    hyps = model.beam_search(tokens, args.beam, args.max_steps)
    best = hyps[0]
    _emit({
        "utterance": list(tokens),
        "ast": str(best.state.extract_ast()),
        "actions": [str(a) for a in best.state.actions],
        "log_prob": best.log_prob,
    })
    return 0


def cmd_sweep(args) -> int:
    paths, cfg = load_run_config(args.config, {"seed": args.seed, "out_dir": args.out_dir})
    values = [float(v) for v in args.values.split(",") if v.strip()]
    if not values:
        raise CliError("--values is empty")
    grammar = resolve_grammar(paths["grammar"])
    train_set, valid_set, _ = _load_splits(paths, grammar, cfg)
    out_csv = None
    if paths.get("out_dir"):
        os.makedirs(paths["out_dir"], exist_ok=True)
        out_csv = os.path.join(paths["out_dir"], "sweep.csv")
        with open(os.path.join(paths["out_dir"], "config.json"), "w", encoding="utf-8") as f:
            json.dump(_resolved(paths, cfg), f, indent=2, sort_keys=True)
            f.write("\n")
    rows = lambda_sweep(train_set, valid_set, grammar, cfg, values, out_csv)
    sys.stdout.write(sweep_csv(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dts", description="Tree-structured semantic parsing with two traversals.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gp = sub.add_parser("grammar", help="grammar tools")
    gsub = gp.add_subparsers(dest="grammar_command", required=True, parser_class=_Parser)
    gc = gsub.add_parser("check", help="parse and summarise a grammar file")
    gc.add_argument("file")
    gc.set_defaults(func=cmd_grammar_check)

    lp = sub.add_parser("linearize", help="print an AST's action sequence")
    lp.add_argument("grammar")
    lp.add_argument("sexpr")
    lp.add_argument("--order", type=Order.parse, default=Order.PRE)
    lp.add_argument("--multi-token", action="store_true")
    lp.add_argument("--json", action="store_true")
    lp.set_defaults(func=cmd_linearize)

    tp = sub.add_parser("gen-toy", help="write a synthetic template corpus")
    tp.add_argument("grammar")
    tp.add_argument("--size", type=int, required=True)
    tp.add_argument("--seed", type=int)
    tp.add_argument("--out", required=True)
    tp.add_argument("--templates")
    tp.add_argument("--valid-size", type=int)
    tp.add_argument("--test-size", type=int)
    tp.set_defaults(func=cmd_gen_toy)

    rp = sub.add_parser("train", help="train a model pair")
    rp.add_argument("--config")
    rp.add_argument("--mode", choices=["mutual", "mle", "kd", "ml2", "mle_single", "kd_frozen",
                                       "mutual_same_order"])
    rp.add_argument("--lambda", dest="lam", type=float)
    rp.add_argument("--seed", type=int)
    rp.add_argument("--epochs", type=int)
    rp.add_argument("--preset", choices=sorted(PRESETS))
    rp.add_argument("--out-dir")
    rp.add_argument("--runs", type=int, default=1)
    rp.add_argument("--parallel", action="store_true")
    rp.set_defaults(func=cmd_train)

    ep = sub.add_parser("eval", help="evaluate a checkpoint")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--order", type=Order.parse)
    ep.add_argument("--beam", type=int, default=5)
    ep.add_argument("--max-steps", type=int, default=200)
    ep.add_argument("--table", action="store_true")
    ep.set_defaults(func=cmd_eval)

    ip = sub.add_parser("infer", help="parse one utterance")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--utterance", required=True)
    ip.add_argument("--beam", type=int, default=5)
    ip.add_argument("--max-steps", type=int, default=200)
    ip.add_argument("--tokenize", action="store_true")
    ip.set_defaults(func=cmd_infer)

    sp = sub.add_parser("sweep", help="train once per lambda value")
    sp.add_argument("--config", required=True)
    sp.add_argument("--values", default="0,0.25,0.5,0.75,1.0")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except Exception as e:  # report every failure as one JSON object
        err = {"error": type(e).__name__, "message": str(e)}
        sys.stderr.write(json.dumps(err) + "\n")
        return 2 if isinstance(e, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())
