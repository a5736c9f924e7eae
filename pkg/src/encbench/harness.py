"""Five-scenario experiment driver: training, evaluation under attack, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import cipher
from .attack import AttackConfig, craft_for_pipeline
from .data import Dataset, KeyPolicy, batches, encrypt_unit, load_cifar_dir_any, synthetic_dataset
from .errors import ConfigError, TrainingError
from .gradcore import ops
from .gradcore.optim import sgd_step
from .gradcore.tensor import Graph, Tensor
from .netzoo import AdaptationConfig, BackboneConfig, Classifier, ModelConfig, build_classifier, save_model

log = logging.getLogger(__name__)

SCENARIOS = ("plain", "encrypted", "encrypted-adv", "encrypted-dk", "encrypted-adv-dk")
DISPLAY_NAMES = {
    "plain": "Plain",
    "encrypted": "Encrypted",
    "encrypted-adv": "Encrypted-Adv",
    "encrypted-dk": "Encrypted-DK",
    "encrypted-adv-dk": "Encrypted-Adv-DK",
}
CSV_FIELDS = ("scenario", "train_error", "test_error", "adv_error", "seed", "config_hash")
DK_EVAL_SEED_OFFSET = 0x9E3779B9


# -- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 0.1
    lr_after_drop: float = 0.01
    lr_drop_epoch: Optional[int] = None   # None: 60% of the epochs
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.drop_epoch >= self.epochs and self.epochs > 1:
            raise ConfigError("lr drop epoch must come before the last epoch")

    @property
    def drop_epoch(self) -> int:
        if self.lr_drop_epoch is not None:
            return self.lr_drop_epoch
        return int(round(0.6 * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return self.lr if epoch < self.drop_epoch else self.lr_after_drop


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"          # "synthetic" or "cifar10"
    directory: Optional[str] = None
    train_size: Optional[int] = None   # subset of the loaded train split
    test_size: Optional[int] = None
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown data source {self.source!r}")
        if self.source == "synthetic" and (not self.train_size or not self.test_size):
            raise ConfigError("synthetic data needs train_size and test_size")


@dataclass(frozen=True)
class ExperimentConfig:
    """Defaults are the desk configuration the acceptance suite runs."""

    data: DataConfig = field(default_factory=lambda: DataConfig(train_size=600, test_size=300))
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(batch_size=64))
    backbone: BackboneConfig = field(default_factory=lambda: BackboneConfig(widths=(8, 16, 32)))
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train_attack_mode: str = "bpda"
    dk_eval: str = "fresh"             # "fresh" per-batch keys or one "unseen" key
    adv_eval: str = "training"         # adv-trained kinds: test with the training attack or with `attack`
    seed: int = 0
    key_seed: int = 1
    eval_batch_size: int = 250

    def __post_init__(self):
        if self.dk_eval not in ("fresh", "unseen"):
            raise ConfigError(f"dk_eval must be 'fresh' or 'unseen', got {self.dk_eval!r}")
        if self.adv_eval not in ("training", "config"):
            raise ConfigError(f"adv_eval must be 'training' or 'config', got {self.adv_eval!r}")
        self.attack.with_mode(self.train_attack_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["widths"] = list(self.backbone.widths)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {"data", "training", "backbone", "adaptation", "attack", "train_attack_mode",
                 "dk_eval", "adv_eval", "seed", "key_seed", "eval_batch_size"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            kw = dict(doc)
            if "data" in kw:
                kw["data"] = DataConfig(**kw["data"])
            if "training" in kw:
                kw["training"] = TrainingConfig(**kw["training"])
            if "backbone" in kw:
                bb = dict(kw["backbone"])
                if "widths" in bb:
                    bb["widths"] = tuple(bb["widths"])
                kw["backbone"] = BackboneConfig(**bb)
            if "adaptation" in kw:
                kw["adaptation"] = AdaptationConfig(**kw["adaptation"])
            if "attack" in kw:
                kw["attack"] = AttackConfig(**kw["attack"])
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_dict(doc)


def desk_config() -> ExperimentConfig:
    return ExperimentConfig()


def paper_config(directory: str = "cifar-10-batches-bin") -> ExperimentConfig:
    """Full-scale preset (100 epochs, ResNet18, lr drop at 40).  Long-run, not CI-tested."""
    return ExperimentConfig(
        data=DataConfig(source="cifar10", directory=directory),
        training=TrainingConfig(epochs=100, lr_drop_epoch=40),
        backbone=BackboneConfig.resnet18(),
    )


# -- scenarios ----------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    key_policy: KeyPolicy
    eval_policy: KeyPolicy
    attack: AttackConfig
    train_attack: Optional[AttackConfig]
    training: TrainingConfig
    model: ModelConfig
    seed: int

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.kind!r}")
        if self.kind == "plain" and self.key_policy.kind != "none":
            raise ConfigError("plain scenario cannot encrypt")
        if self.kind.endswith("-dk") and self.key_policy.kind != "per-batch-random":
            raise ConfigError(f"{self.kind} needs the per-batch-random key policy")
        if "-adv" in self.kind and self.train_attack is None:
            raise ConfigError(f"{self.kind} needs a training attack config")

    @property
    def adversarial_training(self) -> bool:
        return self.train_attack is not None

    def fingerprint(self) -> str:
        doc = {
            "kind": self.kind,
            "key_policy": _policy_doc(self.key_policy),
            "eval_policy": _policy_doc(self.eval_policy),
            "attack": asdict(self.attack),
            "train_attack": asdict(self.train_attack) if self.train_attack else None,
            "training": asdict(self.training),
            "model": self.model.to_dict(),
            "seed": self.seed,
        }
        raw = json.dumps(doc, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:12]


def _policy_doc(p: KeyPolicy) -> dict:
    key = cipher.serialize_key(p.key).decode() if p.key is not None else None
    return {"kind": p.kind, "seed": p.seed, "block_size": p.block_size, "key": key}


def make_spec(kind: str, cfg: ExperimentConfig) -> ScenarioSpec:
    m = cfg.adaptation.block_size
    if kind == "plain":
        policy = eval_policy = KeyPolicy.none()
        model = ModelConfig(cfg.backbone, None)
        attack = cfg.attack.with_mode("whitebox")
    else:
        model = ModelConfig(cfg.backbone, cfg.adaptation)
        attack = cfg.attack
        if kind.endswith("-dk"):
            policy = KeyPolicy.per_batch_random(cfg.key_seed, m)
            eval_seed = cfg.key_seed ^ DK_EVAL_SEED_OFFSET
            eval_policy = (policy.reseeded(eval_seed) if cfg.dk_eval == "fresh"
                           else KeyPolicy.fixed(cipher.generate_key(eval_seed, m)))
        else:
            policy = eval_policy = KeyPolicy.fixed(cipher.generate_key(cfg.key_seed, m))
    train_attack = cfg.attack.with_mode(cfg.train_attack_mode) if "-adv" in kind else None
    if train_attack is not None and cfg.adv_eval == "training":
        # the adversarially trained model is tested with the same PGD process it was trained on
        attack = train_attack
    return ScenarioSpec(kind, policy, eval_policy, attack, train_attack, cfg.training, model, cfg.seed)


# -- training -----------------------------------------------------------------------

def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) & 0xFFFFFFFF


def train_model(spec: ScenarioSpec, data: Dataset, progress=None) -> Tuple[Classifier, List[dict]]:
    """Train a fresh classifier for ``spec``; returns the model and per-epoch history."""
    tc = spec.training
    model = build_classifier(spec.model, spec.seed)
    aug_rng = np.random.default_rng([spec.seed, 17]) if tc.augment else None
    n_batches = -(-len(data) // tc.batch_size)
    history: List[dict] = []
    for epoch in range(tc.epochs):
        lr = tc.lr_at(epoch)
        wrong = seen = 0
        loss_sum = 0.0
        linf_max = 0.0
        stream = batches(data, tc.batch_size, _epoch_seed(spec.seed, epoch), spec.key_policy,
                         augment_rng=aug_rng, encrypt=not spec.adversarial_training,
                         index_offset=epoch * n_batches)
        for b, batch in enumerate(stream):
            x = batch.x
            if spec.adversarial_training:
                adv = craft_for_pipeline(model, batch.key, x, batch.y, spec.train_attack)
                linf_max = max(linf_max, float(adv.linf.max()))
                x = adv.x_adv
                if not adv.encrypted and batch.key is not None:
                    x = encrypt_unit(x, batch.key)
            with Graph() as g:
                logits = model.forward(Tensor(x), training=True)
                loss = ops.softmax_cross_entropy(logits, batch.y)
            if not np.isfinite(loss.item()):
                raise TrainingError("non-finite training loss", epoch, b)
            g.backward(loss)
            sgd_step(model.params, lr, tc.momentum, tc.weight_decay)
            wrong += int((logits.data.argmax(axis=1) != batch.y).sum())
            seen += len(batch.y)
            loss_sum += loss.item() * len(batch.y)
        if spec.adversarial_training and linf_max > spec.train_attack.epsilon + 1e-6:
            raise TrainingError(f"adversarial batch left the epsilon-ball ({linf_max})", epoch, -1)
        rec = {"epoch": epoch, "lr": lr, "loss": loss_sum / seen, "train_error": wrong / seen}
        if spec.adversarial_training:
            rec["max_linf"] = linf_max
        history.append(rec)
        log.info("%s epoch %d lr %.3f loss %.4f err %.4f", spec.kind, epoch, lr, rec["loss"], rec["train_error"])
        if progress:
            progress(rec)
    return model, history


# -- evaluation ---------------------------------------------------------------------

def evaluate(model: Classifier, dataset: Dataset, key_policy: Optional[KeyPolicy] = None,
             batch_size: int = 250) -> float:
    """Eval-mode misclassification rate on unaugmented data."""
    if len(dataset) == 0:
        return 0.0
    wrong = 0
    for batch in batches(dataset, batch_size, None, key_policy):
        wrong += int((model.predict(batch.x, batch_size) != batch.y).sum())
    return wrong / len(dataset)


def evaluate_adversarial(model: Classifier, dataset: Dataset, spec: ScenarioSpec,
                         surrogate: Optional[Classifier] = None, batch_size: int = 250) -> float:
    """Craft noise on clean images, encrypt per the evaluation policy, classify."""
    if len(dataset) == 0:
        return 0.0
    wrong = 0
    for batch in batches(dataset, batch_size, None, spec.eval_policy, encrypt=False):
        adv = craft_for_pipeline(model, batch.key, batch.x, batch.y, spec.attack, surrogate)
        x = adv.x_adv
        if not adv.encrypted and batch.key is not None:
            x = encrypt_unit(x, batch.key)
        wrong += int((model.predict(x, batch_size) != batch.y).sum())
    return wrong / len(dataset)


# -- reports ------------------------------------------------------------------------

@dataclass
class ScenarioReport:
    scenario: str
    train_error: float
    test_error: float
    adversarial_error: float
    seed: int
    config_hash: str
    wall_clock: float = 0.0
    history: List[dict] = field(default_factory=list)

    def csv_row(self) -> Dict[str, str]:
        return {
            "scenario": self.scenario,
            "train_error": repr(self.train_error),
            "test_error": repr(self.test_error),
            "adv_error": repr(self.adversarial_error),
            "seed": str(self.seed),
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def append_csv(path: Path, report: ScenarioReport) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(report.csv_row())


def render_markdown(reports: List[ScenarioReport]) -> str:
    lines = ["| Model | Train | Test | Adversarial |", "|---|---|---|---|"]
    for r in reports:
        lines.append(f"| {DISPLAY_NAMES.get(r.scenario, r.scenario)} | {r.train_error:.3f} | "
                     f"{r.test_error:.3f} | {r.adversarial_error:.3f} |")
    return "\n".join(lines)


def parse_markdown(table: str) -> List[dict]:
    """Inverse of :func:`render_markdown` at printed precision."""
    names = {v: k for k, v in DISPLAY_NAMES.items()}
    rows = []
    for line in table.strip().splitlines()[2:]:
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        if len(cells) != 4:
            raise ConfigError(f"malformed table row: {line!r}")
        rows.append({"scenario": names.get(cells[0], cells[0]), "train_error": float(cells[1]),
                     "test_error": float(cells[2]), "adversarial_error": float(cells[3])})
    return rows


# -- drivers ------------------------------------------------------------------------

def load_data(cfg: DataConfig) -> Tuple[Dataset, Dataset]:
    if cfg.source == "synthetic":
        train = synthetic_dataset(cfg.seed, cfg.train_size, cfg.classes, "train")
        test = synthetic_dataset(cfg.seed, cfg.test_size, cfg.classes, "test")
        return train, test
    if not cfg.directory:
        raise ConfigError("cifar10 source needs a data directory")
    train, test = load_cifar_dir_any(cfg.directory)
    if cfg.train_size:
        train = train.subset(cfg.train_size)
    if cfg.test_size:
        test = test.subset(cfg.test_size)
    return train, test


def run_scenario(spec: ScenarioSpec, train: Dataset, test: Dataset,
                 out_dir: Optional[Path] = None, surrogate: Optional[Classifier] = None,
                 eval_batch_size: int = 250) -> Tuple[ScenarioReport, Classifier]:
    """Train, evaluate the three error columns and persist artifacts."""
    start = time.perf_counter()
    if spec.attack.mode == "surrogate" and spec.kind != "plain" and surrogate is None:
        log.info("training plain surrogate for %s", spec.kind)
        plain = replace(spec, kind="plain", key_policy=KeyPolicy.none(), eval_policy=KeyPolicy.none(),
                        train_attack=None, model=ModelConfig(spec.model.backbone, None),
                        attack=spec.attack.with_mode("whitebox"))
        surrogate, _ = train_model(plain, train)
    model, history = train_model(spec, train)
    report = ScenarioReport(
        scenario=spec.kind,
        train_error=evaluate(model, train, spec.eval_policy, eval_batch_size),
        test_error=evaluate(model, test, spec.eval_policy, eval_batch_size),
        adversarial_error=evaluate_adversarial(model, test, spec, surrogate, eval_batch_size),
        seed=spec.seed,
        config_hash=spec.fingerprint(),
        history=history,
    )
    report.wall_clock = time.perf_counter() - start
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(model, out_dir / f"{spec.kind}.nnp",
                   {"training": asdict(spec.training), "scenario": spec.kind, "seed": spec.seed})
        (out_dir / f"{spec.kind}.json").write_text(report.to_json())
        append_csv(out_dir / "report.csv", report)
    return report, model


def run_all(cfg: ExperimentConfig, out_dir: Optional[Path] = None,
            scenarios=SCENARIOS) -> List[ScenarioReport]:
    """Run the scenarios in order with shared seeds; plain doubles as the surrogate."""
    train, test = load_data(cfg.data)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.csv").write_text("")
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    reports: List[ScenarioReport] = []
    surrogate = None
    for kind in scenarios:
        spec = make_spec(kind, cfg)
        report, model = run_scenario(spec, train, test, out_dir, surrogate, cfg.eval_batch_size)
        if kind == "plain":
            surrogate = model
        reports.append(report)
    if out_dir is not None:
        (out_dir / "report.md").write_text(render_markdown(reports) + "\n")
    return reports


def reports_csv(reports: List[ScenarioReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()
