"""Command-line entry point: gen-data, train, generate, evaluate, benchmark.

Options resolve as defaults < profile < ``--config`` file < explicit flags.  The
config file is flat ``key = value`` text using the long flag names with
underscores.  Every artifact carries the resolved config and its hash.

Exit codes: 0 ok, 1 usage error, 2 data / load error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from .data import DataError, ToyTaskSpec, Vocab, build_vocab, encode_example
from .data import gen_task, load_dataset, save_dataset
from .decoding import STRATEGIES, DecodeConfig, decode, measure_speedup
from .experiments import DESK_TRAIN
from .metrics import evaluate, exact_match, write_iteration_csv
from .model import PROFILES, CheckpointError, EncoderModel, TruncationError, load_checkpoint
from .model import save_checkpoint
from .training import (MIXING_MODES, MetricsWriter, NumericalError, TrainConfig,
                       static_mix_dataset, train)

log = logging.getLogger("mistnar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# Training defaults per profile; `paper-default` keeps the large-model fine-tuning values.
TRAIN_PROFILES = {"paper-default": TrainConfig(), "desk": DESK_TRAIN}

_MODEL_KEYS = ("n_layers", "n_heads", "d_hidden", "d_ffn", "max_positions", "max_target_len")
_TRAIN_KEYS = ("lr", "warmup_steps", "batch_size", "max_steps", "f_ratio", "length_loss_weight",
               "log_every", "eval_every")


def _spec_defaults() -> dict:
    return asdict(ToyTaskSpec())


# key -> (default, help).  A default of None means "inherit from the profile".
COMMON = {"config": (None, "flat key = value config file"),
          "seed": (0, "random seed"),
          "log_level": ("WARNING", "logging level")}

COMMANDS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        **{k: (v, f"toy task {k}") for k, v in _spec_defaults().items() if k != "seed"},
        "out": ("data", "output directory"),
    },
    "train": {
        "data": ("data", "directory with train/valid TSVs and vocab.txt"),
        "out": ("model.ckpt", "checkpoint path (best validation exact-match)"),
        "profile": ("desk", "model/training profile"),
        "mixing": ("none", "mixing mode: " + ", ".join(MIXING_MODES)),
        "objective": ("nar", "nar or ar (causal baseline)"),
        "static_from": ("", "checkpoint producing frozen pseudo targets (static mixing)"),
        "metrics": ("", "metrics JSONL path (default: <out>.metrics.jsonl)"),
        "n_valid": (0, "validation examples used for checkpoint selection (0 = all)"),
        **{k: (None, f"model {k}") for k in _MODEL_KEYS},
        **{k: (None, f"training {k}") for k in _TRAIN_KEYS},
    },
    "generate": {
        "checkpoint": ("model.ckpt", "checkpoint path"),
        "vocab": ("", "vocab file (default: checkpoint's recorded vocab)"),
        "input": ("", "TSV or one-source-per-line file"),
        "output": ("predictions.jsonl", "decode records (JSONL)"),
        "strategy": ("single_pass", "one of " + ", ".join(STRATEGIES)),
        "iterations": (1, "decoding iterations"),
        "no_cache": (False, "disable the source K/V cache"),
        "max_target_len": (0, "length clamp (0 = model limit)"),
    },
    "evaluate": {
        "predictions": ("predictions.jsonl", "decode records (JSONL)"),
        "references": ("", "TSV with target and alternative references"),
        "report": ("report.json", "EvalReport output"),
        "csv": ("", "iteration-vs-metric CSV (default: <report>.csv)"),
    },
    "benchmark": {
        "nar": ("model.ckpt", "NAR checkpoint"),
        "ar": ("", "AR checkpoint (default: the NAR checkpoint)"),
        "vocab": ("", "vocab file"),
        "input": ("", "TSV or one-source-per-line file"),
        "report": ("benchmark.json", "speedup report"),
        "length": (0, "force every strategy to emit this many tokens (0 = predicted)"),
        "iterations": (3, "iterations for mist_iter and mask_predict rows"),
        "warmup": (10, "examples excluded from timing"),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mistnar", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for key, (default, help_) in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, action="store_const", const=True, default=None, help=help_)
            else:
                kind = type(default) if default is not None else _infer_type(key)
                p.add_argument(flag, type=kind, default=None, help=help_)
    return parser


def _infer_type(key: str):
    if key in ("lr", "f_ratio", "length_loss_weight"):
        return float
    if key in _MODEL_KEYS or key in _TRAIN_KEYS:
        return int
    return str


def _read_config_file(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from e
    cp.read_string("[run]\n" + text)
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    kind = type(default) if default is not None else _infer_type(key)
    if kind is bool:
        return value.strip().lower() in ("1", "true", "yes", "on")
    try:
        return kind(value.strip())
    except ValueError as e:
        raise UsageError(f"bad value for {key}: {value!r}") from e


def resolve(command: str, args: argparse.Namespace) -> dict:
    opts = {**COMMON, **COMMANDS[command]}
    cfg = {k: d for k, (d, _) in opts.items()}
    file_vals = _read_config_file(args.config) if args.config else {}
    unknown = set(file_vals) - set(opts)
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
    for k, v in file_vals.items():
        cfg[k] = _coerce(k, v, opts[k][0])
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    cfg.pop("config")
    if command == "train":
        _fill_profile(cfg)
    return cfg


def _fill_profile(cfg: dict) -> None:
    if cfg["profile"] not in PROFILES:
        raise UsageError(f"unknown profile {cfg['profile']!r}; choose from {sorted(PROFILES)}")
    model = PROFILES[cfg["profile"]]
    tc = TRAIN_PROFILES[cfg["profile"]]
    for k in _MODEL_KEYS:
        if cfg[k] is None:
            cfg[k] = getattr(model, k)
    for k in _TRAIN_KEYS:
        if cfg[k] is None:
            cfg[k] = getattr(tc, k)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _out_path(path) -> Path:
    """Output path with its parent directory created."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj) -> None:
    _out_path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _read_sources(path, vocab: Vocab) -> list[list[int]]:
    if not path:
        raise UsageError("--input is required")
    try:
        lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    out = []
    for i, line in enumerate(lines, 1):
        try:
            out.append(vocab.encode(line.split("\t")[0]))
        except KeyError as e:
            raise DataError(f"line {i}: unknown token {e}") from e
    return out


def _load_model(path, vocab_path=""):
    try:
        model, meta = load_checkpoint(path)
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    vp = vocab_path or meta["extra"].get("vocab_path", "")
    if not vp:
        raise UsageError("--vocab is required (checkpoint records no vocab path)")
    try:
        vocab = Vocab.load(vp)
    except OSError as e:
        raise DataError(f"cannot read vocab {vp}: {e}") from e
    if vocab.hash() != meta["vocab_hash"]:
        raise CheckpointError(f"vocab hash {vocab.hash()} does not match checkpoint "
                              f"{meta['vocab_hash']}")
    return model, vocab, meta


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict) -> int:
    spec = ToyTaskSpec(**{f.name: cfg[f.name] for f in fields(ToyTaskSpec)})
    ds = gen_task(spec)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, split in ds.splits().items():
        save_dataset(split, out / f"{name}.tsv")
    vocab = build_vocab(ds.corpus())
    vocab.save(out / "vocab.txt")
    _write_json(out / "config.json", {"config": cfg, "config_hash": config_hash(cfg),
                                      "vocab_hash": vocab.hash()})
    counts = {k: len(v) for k, v in ds.splits().items()}
    print(json.dumps({"written": str(out), **counts, "vocab": len(vocab)}, sort_keys=True))
    return EXIT_OK


def _train_configs(cfg: dict, vocab: Vocab):
    mcfg = replace(PROFILES[cfg["profile"]], vocab_size=len(vocab),
                   **{k: cfg[k] for k in _MODEL_KEYS})
    tcfg = replace(TRAIN_PROFILES[cfg["profile"]], mixing_mode=cfg["mixing"],
                   objective=cfg["objective"], seed=cfg["seed"],
                   **{k: cfg[k] for k in _TRAIN_KEYS})
    return mcfg, tcfg


def cmd_train(cfg: dict) -> int:
    data = Path(cfg["data"])
    try:
        vocab = Vocab.load(data / "vocab.txt")
        train_ex = load_dataset(data / "train.tsv")
        valid_ex = load_dataset(data / "valid.tsv")
    except OSError as e:
        raise DataError(f"cannot read dataset in {data}: {e}") from e
    try:
        mcfg, tcfg = _train_configs(cfg, vocab)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if cfg["mixing"] == "static":
        if not cfg["static_from"]:
            raise UsageError("static mixing needs --static-from <checkpoint>")
        source_model, _, _ = _load_model(cfg["static_from"], str(data / "vocab.txt"))
        train_ex = static_mix_dataset(source_model, vocab, train_ex)
    pairs = [encode_example(vocab, ex) for ex in train_ex]
    valid = [encode_example(vocab, ex) for ex in valid_ex][:cfg["n_valid"] or None]
    strategy = "ar_greedy" if cfg["objective"] == "ar" else "single_pass"
    dcfg = DecodeConfig(strategy=strategy)
    refs = [p.references for p in valid]

    def score(m):
        return exact_match([decode(m, p.source, dcfg).tokens for p in valid], refs)

    out = _out_path(cfg["out"])
    h = config_hash(cfg)
    extra = {"config": cfg, "config_hash": h, "seed": cfg["seed"],
             "vocab_path": str((data / "vocab.txt").resolve())}

    def on_best(m, step, s):
        save_checkpoint(m, out, vocab.hash(), {**extra, "step": step, "valid_exact_match": s})

    model = EncoderModel.init(mcfg, seed=cfg["seed"])
    metrics_path = _out_path(cfg["metrics"] or str(out) + ".metrics.jsonl")
    with open(metrics_path, "w", encoding="utf-8") as stream:
        writer = MetricsWriter(stream)
        writer.write({"config": cfg, "config_hash": h})
        try:
            result = train(model, pairs, tcfg, writer, score, on_best)
        except NumericalError:
            failed = Path(str(out) + ".failed")
            save_checkpoint(model, failed, vocab.hash(), {**extra, "failed": True})
            log.error("non-finite loss; partial checkpoint at %s", failed)
            raise
    summary = {"steps": result["steps"], "best_valid_exact_match": result["best_score"],
               "best_step": result["best_step"], "checkpoint": str(out), "config_hash": h}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_generate(cfg: dict) -> int:
    model, vocab, meta = _load_model(cfg["checkpoint"], cfg["vocab"])
    sources = _read_sources(cfg["input"], vocab)
    try:
        dcfg = DecodeConfig(strategy=cfg["strategy"], iterations=cfg["iterations"],
                            use_cache=not cfg["no_cache"],
                            max_target_len=cfg["max_target_len"] or None)
    except ValueError as e:
        raise UsageError(str(e)) from e
    h = config_hash(cfg)
    with open(_out_path(cfg["output"]), "w", encoding="utf-8") as f:
        for x in sources:
            res = decode(model, x, dcfg, vocab)
            rec = res.record(vocab.decode(x), vocab)
            rec.update(strategy=dcfg.strategy, config_hash=h,
                       checkpoint_config_hash=meta["extra"].get("config_hash", ""))
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(json.dumps({"records": len(sources), "output": cfg["output"], "config_hash": h}))
    return EXIT_OK


def cmd_evaluate(cfg: dict) -> int:
    try:
        recs = [json.loads(l) for l in Path(cfg["predictions"]).read_text(encoding="utf-8")
                .splitlines() if l.strip()]
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read predictions: {e}") from e
    if not cfg["references"]:
        raise UsageError("--references is required")
    try:
        refs = [ex.references for ex in load_dataset(cfg["references"])]
    except OSError as e:
        raise DataError(f"cannot read references: {e}") from e
    if len(recs) != len(refs):
        raise UsageError(f"{len(recs)} predictions vs {len(refs)} reference lines")
    if not recs:
        raise UsageError("no predictions to evaluate")
    h = config_hash(cfg)
    report = evaluate([r["final_text"] for r in recs], refs, config={**cfg, "config_hash": h})
    _out_path(cfg["report"]).write_text(report.to_json() + "\n", encoding="utf-8")
    n_iter = min(len(r.get("iterations", [r["final_text"]])) for r in recs)
    rows = []
    for k in range(n_iter):
        hyps = [r["iterations"][k] if "iterations" in r else r["final_text"] for r in recs]
        rep = evaluate(hyps, refs)
        rows.append({"strategy": recs[0].get("strategy", ""), "iteration": k + 1,
                     "bleu4": rep.bleu4, "rouge_l": rep.rouge_l, "exact_match": rep.exact_match})
    write_iteration_csv(rows, _out_path(cfg["csv"] or Path(cfg["report"]).with_suffix(".csv")))
    print(report.to_json())
    return EXIT_OK


def cmd_benchmark(cfg: dict) -> int:
    nar, vocab, _ = _load_model(cfg["nar"], cfg["vocab"])
    ar = _load_model(cfg["ar"], cfg["vocab"])[0] if cfg["ar"] else nar
    sources = _read_sources(cfg["input"], vocab)
    force = cfg["length"] or None
    n = cfg["iterations"]
    configs = {"ar_greedy": DecodeConfig(strategy="ar_greedy", force_length=force),
               "single_pass": DecodeConfig(force_length=force)}
    if n > 1:
        configs["mist_iter"] = DecodeConfig(strategy="mist_iter", iterations=n,
                                            force_length=force, early_stop=force is None)
        configs["mask_predict"] = DecodeConfig(strategy="mask_predict", iterations=n,
                                               force_length=force)
    try:
        report = measure_speedup(nar, ar, sources, configs, warmup=cfg["warmup"])
    except (TruncationError, CheckpointError):
        raise
    except ValueError as e:
        raise UsageError(str(e)) from e
    report.update(config=cfg, config_hash=config_hash(cfg))
    _write_json(cfg["report"], report)
    print(json.dumps(report["strategies"], sort_keys=True))
    return EXIT_OK


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "benchmark": cmd_benchmark}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args.command, args)
        logging.basicConfig(level=getattr(logging, str(cfg["log_level"]).upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[args.command](cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, TruncationError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
