"""``encbench`` command line: keys, image encryption, training, attacks and reports.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import cipher, ppm
from .attack import MODES, AttackConfig
from .errors import (
    ConfigError, EncbenchError, FormatError, InputError, KeyFormatError, KeyLengthError, NonBijectiveError,
)
from .harness import (
    SCENARIOS, DISPLAY_NAMES, ExperimentConfig, ScenarioReport, append_csv,
    desk_config, evaluate, evaluate_adversarial, load_data, make_spec, render_markdown, run_all,
    train_model,
)
from .netzoo import load_model, save_model

DATA_DIR_ENV = "ENCBENCH_DATA_DIR"

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _experiment_flags(p: argparse.ArgumentParser, scenario: bool = True) -> None:
    p.add_argument("--config", help="experiment config JSON (default: desk preset)")
    if scenario:
        p.add_argument("--scenario", choices=SCENARIOS, default="encrypted")
    p.add_argument("--eps", type=float, help="attack budget epsilon")
    p.add_argument("--alpha", type=float, help="attack step size")
    p.add_argument("--steps", type=int, help="attack iterations")
    p.add_argument("--mode", choices=MODES, help="attack gradient mode")
    p.add_argument("--epochs", type=_positive, help="override training epochs")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--data-dir", help=f"CIFAR-10 binary directory (env {DATA_DIR_ENV} also works)")
    p.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="encbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keygen", help="generate an encryption key")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--block-size", type=_positive, default=cipher.DEFAULT_BLOCK_SIZE)
    p.add_argument("-o", "--out", required=True, help="key JSON path")

    for name in ("encrypt", "decrypt"):
        p = sub.add_parser(name, help=f"{name} a binary PPM image")
        p.add_argument("--key", required=True, help="key JSON path")
        p.add_argument("--in", dest="inp", required=True, help="input PPM (P6)")
        p.add_argument("-o", "--out", required=True, help="output PPM")

    p = sub.add_parser("train", help="train one scenario and save its checkpoint")
    _experiment_flags(p)

    p = sub.add_parser("evaluate", help="train/test/adversarial errors of a saved model")
    _experiment_flags(p)
    p.add_argument("--model", help="checkpoint (default: OUT_DIR/SCENARIO.nnp)")
    p.add_argument("--surrogate", help="surrogate checkpoint (default: OUT_DIR/plain.nnp)")

    p = sub.add_parser("attack", help="test and adversarial error of a saved model")
    _experiment_flags(p)
    p.add_argument("--model", help="checkpoint (default: OUT_DIR/SCENARIO.nnp)")
    p.add_argument("--surrogate", help="surrogate checkpoint (default: OUT_DIR/plain.nnp)")

    p = sub.add_parser("report", help="print the markdown table for a run directory")
    p.add_argument("--out-dir", default="runs")

    p = sub.add_parser("run-all", help="run all five scenarios and print the table")
    _experiment_flags(p, scenario=False)
    p.add_argument("--scenarios", help="comma-separated subset (default: all five)")
    return parser


# -- helpers --------------------------------------------------------------------------

def _read_key(path: str) -> cipher.EncryptionKey:
    return cipher.parse_key(Path(path).read_bytes())


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else desk_config()
    overrides = {k: v for k, v in (("epsilon", args.eps), ("alpha", args.alpha),
                                   ("steps", args.steps), ("mode", args.mode)) if v is not None}
    if overrides:
        attack = dict(cfg.attack.__dict__, **overrides)
        if attack["epsilon"] > 0 and attack["alpha"] > attack["epsilon"] and "alpha" not in overrides:
            attack["alpha"] = attack["epsilon"]
        cfg = replace(cfg, attack=AttackConfig(**attack))
    if args.epochs is not None:
        drop = cfg.training.lr_drop_epoch
        if drop is not None and drop >= args.epochs:
            drop = None
        cfg = replace(cfg, training=replace(cfg.training, epochs=args.epochs, lr_drop_epoch=drop))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data_dir = args.data_dir or os.environ.get(DATA_DIR_ENV)
    if data_dir:
        cfg = replace(cfg, data=replace(cfg.data, source="cifar10", directory=data_dir))
    return cfg


def _checkpoint(path: Optional[str], out_dir: Path, kind: str) -> Path:
    return Path(path) if path else out_dir / f"{kind}.nnp"


def _with_mode(spec, mode: Optional[str]):
    """An explicit ``--mode`` wins over the scenario's default attack route."""
    return replace(spec, attack=spec.attack.with_mode(mode)) if mode else spec


def _load_surrogate(args, spec):
    if spec.attack.mode != "surrogate" or spec.kind == "plain":
        return None
    model, _ = load_model(_checkpoint(args.surrogate, Path(args.out_dir), "plain"))
    return model


# -- commands -------------------------------------------------------------------------

def cmd_keygen(args) -> int:
    key = cipher.generate_key(args.seed, args.block_size)
    Path(args.out).write_bytes(cipher.serialize_key(key))
    return EXIT_OK


def cmd_crypt(args) -> int:
    key = _read_key(args.key)
    image = ppm.read_ppm(args.inp)
    fn = cipher.encrypt_image if args.command == "encrypt" else cipher.decrypt_image
    ppm.write_ppm(args.out, fn(image, key))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _experiment(args)
    spec = make_spec(args.scenario, cfg)
    train, _ = load_data(cfg.data)
    model, history = train_model(spec, train)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / f"{spec.kind}.nnp", {"scenario": spec.kind, "seed": spec.seed,
                                                     "config_hash": spec.fingerprint()})
    (out_dir / f"{spec.kind}.history.json").write_text(json.dumps(history, indent=2))
    print("| Epoch | LR | Loss | Train |")
    print("|---|---|---|---|")
    for rec in history:
        print(f"| {rec['epoch']} | {rec['lr']:.3f} | {rec['loss']:.4f} | {rec['train_error']:.3f} |")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _experiment(args)
    spec = make_spec(args.scenario, cfg)
    spec = _with_mode(spec, args.mode)
    train, test = load_data(cfg.data)
    model, _ = load_model(_checkpoint(args.model, Path(args.out_dir), spec.kind))
    surrogate = _load_surrogate(args, spec)
    report = ScenarioReport(
        scenario=spec.kind,
        train_error=evaluate(model, train, spec.eval_policy, cfg.eval_batch_size),
        test_error=evaluate(model, test, spec.eval_policy, cfg.eval_batch_size),
        adversarial_error=evaluate_adversarial(model, test, spec, surrogate, cfg.eval_batch_size),
        seed=spec.seed,
        config_hash=spec.fingerprint(),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{spec.kind}.json").write_text(report.to_json())
    append_csv(out_dir / "report.csv", report)
    print(render_markdown([report]))
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _experiment(args)
    spec = make_spec(args.scenario, cfg)
    spec = _with_mode(spec, args.mode)
    _, test = load_data(cfg.data)
    model, _ = load_model(_checkpoint(args.model, Path(args.out_dir), spec.kind))
    surrogate = _load_surrogate(args, spec)
    test_error = evaluate(model, test, spec.eval_policy, cfg.eval_batch_size)
    adv_error = evaluate_adversarial(model, test, spec, surrogate, cfg.eval_batch_size)
    a = spec.attack
    doc = {"scenario": spec.kind, "test_error": test_error, "adversarial_error": adv_error,
           "attack": {"epsilon": a.epsilon, "alpha": a.alpha, "steps": a.steps, "mode": a.mode}}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{spec.kind}.attack.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"| Model | Test | Adversarial ({a.mode}, eps={a.epsilon:g}) |")
    print("|---|---|---|")
    print(f"| {DISPLAY_NAMES[spec.kind]} | {test_error:.3f} | {adv_error:.3f} |")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.out_dir) / "report.csv"
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path}: no report rows")
    reports = [ScenarioReport(r["scenario"], float(r["train_error"]), float(r["test_error"]),
                              float(r["adv_error"]), int(r["seed"]), r["config_hash"]) for r in rows]
    print(render_markdown(reports))
    return EXIT_OK


def cmd_run_all(args) -> int:
    cfg = _experiment(args)
    scenarios = SCENARIOS
    if args.scenarios:
        scenarios = tuple(s.strip() for s in args.scenarios.split(","))
        bad = [s for s in scenarios if s not in SCENARIOS]
        if bad:
            raise UsageError(f"unknown scenarios {bad}; choose from {SCENARIOS}")
    reports = run_all(cfg, Path(args.out_dir), scenarios)
    print(render_markdown(reports))
    return EXIT_OK


COMMANDS = {
    "keygen": cmd_keygen,
    "encrypt": cmd_crypt,
    "decrypt": cmd_crypt,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack": cmd_attack,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, InputError, KeyFormatError, KeyLengthError, NonBijectiveError) as exc:
        print(f"encbench: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, EncbenchError, ValueError) as exc:
        print(f"encbench: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
