"""Command-line pipeline: data generation through pruned-model evaluation.

Every command reads one JSON experiment config and an output directory, and
is idempotent: identical inputs and seeds produce byte-identical artifacts.
All randomness derives from a single seed (``--seed`` overrides the config):
backbone init uses seed, task generation seed+1, chip training seed+2 and
the split shuffle seed+3.

Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric contract
violation.
"""

import argparse
import json
import sys
import time
from dataclasses import dataclass, replace

import numpy as np

from . import backbone as bb
from . import chips as ch
from . import data as dt
from . import pruning as pr
from . import training as tr
from .errors import ConfigError, ContractViolation, FormatError
from .report import fmt, make_report, emit_report, round6

DEFAULT_SPLIT = (0.8, 0.1, 0.1)
PRETRAIN_LOG_EVERY = 100


@dataclass
class ExperimentConfig:
    seed: int
    backbone: bb.BackboneConfig
    task: dt.TaskSpec
    split_fractions: tuple
    pretrain_steps: int
    pretrain_lr: float
    train: tr.TrainConfig
    chip_kind: str
    hidden_dim: int
    strategy: object

    @property
    def split_seed(self) -> int:
        return self.seed + 3


def _strategy_from_dict(doc: dict):
    kind = doc.get("kind", "validate")
    if kind == "fixed":
        if "layer" not in doc:
            raise ConfigError("fixed strategy needs a 'layer' field")
        return pr.Fixed(layer=int(doc["layer"]))
    if kind == "validate":
        return pr.Validate(n_validation=int(doc.get("n_validation", pr.DEFAULT_VALIDATION_SIZE)))
    if kind == "optimal":
        return pr.Optimal()
    raise ConfigError(f"unknown strategy kind {kind!r}")


def load_config(path, seed=None, strategy=None, layer=None, chip=None) -> ExperimentConfig:
    """Parse and validate a config file, applying flag overrides."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}")
    try:
        master = int(doc["seed"]) if seed is None else int(seed)
        b = doc["backbone"]
        backbone = bb.BackboneConfig(
            n_layers=int(b["n_layers"]), d_model=int(b["d_model"]),
            n_heads=int(b["n_heads"]), d_ff=int(b["d_ff"]),
            vocab_size=int(b["vocab_size"]), max_seq_len=int(b["max_seq_len"]),
            seed=master)
        t = doc["task"]
        task = dt.TaskSpec(
            kind=t["kind"], vocab_size=backbone.vocab_size, seq_len=int(t["seq_len"]),
            n_classes=int(t["n_classes"]), n_examples=int(t["n_examples"]), seed=master + 1)
        p = doc.get("pretrain", {})
        pretrain_steps = int(p.get("steps", 0))
        pretrain_lr = float(p.get("learning_rate", 1e-3))
        tcfg = doc.get("train", {})
        train = tr.TrainConfig(
            learning_rate=float(tcfg.get("learning_rate", 1e-5)),
            epochs=int(tcfg.get("epochs", 1)),
            batch_size=int(tcfg.get("batch_size", 1)),
            max_examples=int(tcfg.get("max_examples", 20_000)),
            eval_every=int(tcfg.get("eval_every", 2_000)),
            master_seed=master + 2)
        c = doc.get("chip", {})
        chip_kind = chip if chip is not None else c.get("kind", "linear")
        if chip_kind not in ch.KIND_CODES:
            raise ConfigError(f"unknown chip kind {chip_kind!r}")
        hidden_dim = int(c.get("hidden_dim", ch.DEFAULT_HIDDEN))
        fractions = tuple(doc.get("split", DEFAULT_SPLIT))
        strat_doc = dict(doc.get("strategy", {"kind": "validate"}))
        if strategy is not None:
            strat_doc["kind"] = strategy
        if layer is not None:
            strat_doc["layer"] = layer
        strat = _strategy_from_dict(strat_doc)
        if pretrain_steps < 0:
            raise ConfigError("pretrain steps must be >= 0")
        if pretrain_lr <= 0:
            raise ConfigError("pretrain learning_rate must be positive")
    except KeyError as err:
        raise ConfigError(f"config is missing required field {err}")
    except ContractViolation as err:
        raise ConfigError(f"invalid config value: {err}")
    except (TypeError, ValueError) as err:
        raise ConfigError(f"malformed config value: {err}")
    return ExperimentConfig(seed=master, backbone=backbone, task=task,
                            split_fractions=fractions, pretrain_steps=pretrain_steps,
                            pretrain_lr=pretrain_lr, train=train, chip_kind=chip_kind,
                            hidden_dim=hidden_dim, strategy=strat)


def _log(msg: str) -> None:
    print(f"[chiplab] {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# dataset files: int64 array of shape (n, seq_len + 1), last column = label


def _save_examples(path, examples):
    arr = np.stack([np.concatenate([ex.tokens, [ex.label]]) for ex in examples])
    np.save(path, arr.astype(np.int64))


def _load_examples(path):
    try:
        arr = np.load(path)
    except FileNotFoundError:
        raise FormatError("truncation", "dataset file missing; run gen-data first", path)
    except ValueError as err:
        raise FormatError("header", f"not a valid dataset file: {err}", path)
    return [dt.LabeledExample(tokens=row[:-1].copy(), label=int(row[-1])) for row in arr]


def _require(path, hint):
    if not path.exists():
        raise FormatError("truncation", f"{path.name} missing; run {hint} first", path)
    return path


def _out_dir(args):
    from pathlib import Path

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out, args) -> int:
    examples = dt.gen_synthetic(cfg.task)
    train, val, evl = dt.split(examples, cfg.split_fractions, cfg.split_seed)
    if not train or not evl:
        raise ConfigError("split produced an empty train or eval set")
    _save_examples(out / "train.npy", train)
    _save_examples(out / "validation.npy", val) if val else None
    _save_examples(out / "eval.npy", evl)
    _log(f"gen-data: {len(train)} train / {len(val)} validation / {len(evl)} eval examples")
    return 0


def cmd_pretrain(cfg: ExperimentConfig, out, args) -> int:
    t0 = time.perf_counter()
    weights = bb.init_backbone(cfg.backbone)
    losses = []
    if cfg.pretrain_steps > 0:
        weights = bb.pretrain_backbone(weights, cfg.task, cfg.pretrain_steps, cfg.pretrain_lr,
                                       loss_callback=lambda s, l: losses.append((s, l)))
    bb.save_weights(weights, out / "backbone.ctbw")
    lines = ["step,loss"]
    for s, l in losses:
        if s % PRETRAIN_LOG_EVERY == 0 or s == len(losses):
            lines.append(f"{s},{fmt(l)}")
    with open(out / "pretrain_loss.csv", "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _log(f"pretrain: {cfg.pretrain_steps} steps in {time.perf_counter() - t0:.1f}s, "
         f"digest {weights.digest()[:16]}")
    return 0


def cmd_extract(cfg: ExperimentConfig, out, args) -> int:
    weights = bb.load_weights(_require(out / "backbone.ctbw", "pretrain"))
    t0 = time.perf_counter()
    for name in ("train", "validation", "eval"):
        src = out / f"{name}.npy"
        if not src.exists():
            if name == "validation":
                continue
            raise FormatError("truncation", f"{src.name} missing; run gen-data first", src)
        examples = _load_examples(src)
        dt.extract_features(weights, examples, cfg.task.n_classes, out / f"{name}.ctfc")
        _log(f"extract: {name}.ctfc ({len(examples)} examples)")
    _log(f"extract: done in {time.perf_counter() - t0:.1f}s")
    return 0


def _train_cache_path(out, args):
    if getattr(args, "cache", None):
        from pathlib import Path

        return _require(Path(args.cache), "extract")
    return _require(out / "train.ctfc", "extract")


def cmd_train_chips(cfg: ExperimentConfig, out, args) -> int:
    c = cfg.backbone
    train_cache = dt.read_cache(_train_cache_path(out, args),
                                expect_layers=c.n_layers, expect_d_model=c.d_model,
                                expect_classes=cfg.task.n_classes)
    eval_cache = dt.read_cache(_require(out / "eval.ctfc", "extract"),
                               expect_layers=c.n_layers, expect_d_model=c.d_model)
    bank = ch.init_bank(cfg.chip_kind, c.n_layers, cfg.task.n_classes, c.d_model,
                        hidden_dim=cfg.hidden_dim, master_seed=cfg.train.master_seed)
    t0 = time.perf_counter()
    _, curves = tr.train_bank(bank, tr.ArrayDataset.from_cache(train_cache),
                              tr.ArrayDataset.from_cache(eval_cache), cfg.train,
                              workers=args.workers)
    ch.save_bank(bank, out / "chips.ctch")
    lines = ["step,layer,accuracy"]
    for step, layer, acc in tr.curves_to_rows(curves):
        lines.append(f"{step},{layer},{fmt(acc)}")
    with open(out / "curves.csv", "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _log(f"train-chips: {min(len(train_cache.labels), cfg.train.max_examples)} steps/epoch "
         f"x {cfg.train.epochs} epochs in {time.perf_counter() - t0:.1f}s")
    return 0


def _load_bank_and_eval(cfg, out):
    c = cfg.backbone
    bank = ch.load_bank(_require(out / "chips.ctch", "train-chips"))
    if bank.n_layers != c.n_layers or bank.d_model != c.d_model:
        raise FormatError("dims", "chip bank does not match the configured backbone",
                          out / "chips.ctch")
    eval_cache = dt.read_cache(_require(out / "eval.ctfc", "extract"),
                               expect_layers=c.n_layers, expect_d_model=c.d_model)
    return bank, tr.ArrayDataset.from_cache(eval_cache)


def cmd_select(cfg: ExperimentConfig, out, args) -> int:
    bank, eval_source = _load_bank_and_eval(cfg, out)
    validation_pool = None
    if isinstance(cfg.strategy, pr.Validate):
        # first-n draw from a seeded shuffle of the training pool, never eval data
        cache = dt.read_cache(_require(out / "train.ctfc", "extract"))
        rng = np.random.Generator(np.random.PCG64(cfg.train.master_seed))
        order = rng.permutation(len(cache.labels))
        validation_pool = tr.ArrayDataset(cache.features[order], cache.labels[order])
    layer, rep = pr.select_chip(bank, cfg.strategy, validation_pool, eval_source)
    doc = {
        "strategy": rep.strategy,
        "selected_layer": layer,
        "prune_ratio": round6(pr.prune_ratio(bank.n_layers, layer)),
        "n_examples": rep.n_examples,
        "accuracies": None if rep.accuracies is None else [round6(a) for a in rep.accuracies],
    }
    with open(out / "selection.json", "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    _log(f"select: strategy={rep.strategy} layer={layer} "
         f"prune_ratio={fmt(pr.prune_ratio(bank.n_layers, layer))}")
    return 0


def _load_selection(out):
    path = _require(out / "selection.json", "select")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise FormatError("header", f"not valid JSON: {err}", path)
    if "selected_layer" not in doc:
        raise FormatError("header", "selection.json missing 'selected_layer'", path)
    return doc


def cmd_prune(cfg: ExperimentConfig, out, args) -> int:
    weights = bb.load_weights(_require(out / "backbone.ctbw", "pretrain"))
    bank = ch.load_bank(_require(out / "chips.ctch", "train-chips"))
    layer = int(_load_selection(out)["selected_layer"])
    model = pr.build_pruned_model(weights, bank, layer)
    pr.save_pruned(model, out / "pruned.ctpm")
    _log(f"prune: kept layers 0..{layer} of {weights.config.n_layers}, "
         f"ratio {fmt(model.ratio)}")
    return 0


def cmd_eval(cfg: ExperimentConfig, out, args) -> int:
    t0 = time.perf_counter()
    bank, eval_source = _load_bank_and_eval(cfg, out)
    accs = tr.evaluate_bank(bank, eval_source)
    sel = _load_selection(out)
    layer = int(sel["selected_layer"])
    model = pr.load_pruned(_require(out / "pruned.ctpm", "prune"))
    if model.selected_layer != layer:
        raise FormatError("header", "pruned model disagrees with selection.json",
                          out / "pruned.ctpm")
    examples = _load_examples(_require(out / "eval.npy", "gen-data"))
    hits = sum(1 for ex in examples if pr.pruned_infer(model, ex.tokens)[0] == ex.label)
    pruned_acc = hits / len(examples)
    report = make_report(accs, layer, str(sel.get("strategy", "fixed")), pruned_acc,
                         timings={"eval_s": time.perf_counter() - t0})
    emit_report(report, args.format, out / f"report.{args.format}")
    _log(f"eval: pruned accuracy {fmt(pruned_acc)} at layer {layer} "
         f"({report.timings['eval_s']:.1f}s)")
    return 0


def cmd_sweep(cfg: ExperimentConfig, out, args) -> int:
    bank, eval_source = _load_bank_and_eval(cfg, out)
    accs = tr.evaluate_bank(bank, eval_source)
    lines = ["layer,accuracy,prune_ratio"]
    for layer, acc in enumerate(accs):
        lines.append(f"{layer},{fmt(acc)},{fmt(pr.prune_ratio(bank.n_layers, layer))}")
    with open(out / "sweep.csv", "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _log(f"sweep: {bank.n_layers} layers written to sweep.csv")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "train-chips": cmd_train_chips,
    "select": cmd_select,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chiplab",
        description="Train per-layer probing chips on a frozen backbone and prune it.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--strategy", choices=["fixed", "validate", "optimal"], default=None)
        p.add_argument("--layer", type=int, default=None, help="layer for the fixed strategy")
        p.add_argument("--chip", choices=["linear", "mlp"], default=None)
        p.add_argument("--cache", default=None, help="feature cache overriding train.ctfc")
        p.add_argument("--format", choices=["csv", "json"], default="json")
        p.add_argument("--workers", type=int, default=1,
                       help="threads for per-layer chip updates (output-invariant)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, strategy=args.strategy,
                          layer=args.layer, chip=args.chip)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        out = _out_dir(args)
        return COMMANDS[args.command](cfg, out, args)
    except ConfigError as err:
        _log(f"error category=config message={err}")
        return 2
    except FormatError as err:
        _log(f"error category=format/{err.category} message={err}")
        return 3
    except OSError as err:
        _log(f"error category=io message={err}")
        return 3
    except ContractViolation as err:
        _log(f"error category=contract message={err}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
