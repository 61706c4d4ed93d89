"""Experiment orchestration: attack x defense matrix, ablation arms, weight sweeps.

A single JSON config with sections data / poison / train / eval / output
drives everything; every leaf key can be overridden from the command line.
Within one invocation all arms share the same poisoned dataset, data order,
and parameter initialization, so arm differences come from the defense
configuration alone.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import attacks as A
from . import datagen as D
from . import evaluation as E
from . import training as T

ABLATION_ARMS = ("no-defense", "patch-only", "patch+cvdis", "full")

DEFAULT_SWEEP_VALUES = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0)


def default_config() -> dict:
    return {
        "data": {
            "n": 2000,
            "seed": 7,
            "image_size": 32,
            "test_n": 200,
            "test_seed": 1007,
        },
        "poison": {
            "attack": "badnets",
            "ratio": 0.05,
            "seed": 23,
            "patch_size": 4,
            "patch_row": 0,
            "patch_col": 0,
            "alpha": 0.2,
            "amplitude": 2.0,
            "warp_strength": 1.5,
            "warp_grid": 4,
            "text_trigger": "photo",
        },
        "train": {
            "lam1": 1.0,
            "lam2": 2.0,
            "lam3": 0.1,
            "h0": None,
            "lr": 1e-3,
            "optimizer": "adam",
            "beta1": 0.9,
            "beta2": 0.999,
            "adam_eps": 1e-8,
            "epochs": 30,
            "batch_size": 16,
            "seed": 91,
            "precision": "f64",
            "defense": True,
            "feat_dim": 32,
        },
        "eval": {"max_len": 16},
        "output": {"dir": "runs/exp", "tag": "run"},
    }


def load_config(path=None) -> dict:
    cfg = default_config()
    if path is not None:
        user = json.loads(Path(path).read_text())
        for section, keys in user.items():
            if section not in cfg:
                raise ValueError(f"unknown config section {section!r}")
            for k, v in keys.items():
                if k not in cfg[section]:
                    raise ValueError(f"unknown config key {section}.{k}")
                cfg[section][k] = v
    return cfg


def coerce_value(default, raw: str):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if default is None:
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def apply_overrides(cfg: dict, overrides: dict[str, str]) -> dict:
    base = default_config()
    for dotted, raw in overrides.items():
        if raw is None:
            continue
        section, _, key = dotted.partition(".")
        if section not in cfg or key not in cfg[section]:
            raise ValueError(f"unknown config key {dotted!r}")
        cfg[section][key] = coerce_value(base[section][key], raw)
    return cfg


def resolve_seeds(cfg: dict, master_seed: int | None) -> dict:
    """Derive all experiment seeds from one master seed when provided."""
    if master_seed is not None:
        cfg["data"]["seed"] = master_seed
        cfg["poison"]["seed"] = master_seed + 1
        cfg["train"]["seed"] = master_seed + 2
        cfg["data"]["test_seed"] = master_seed + 3
    return cfg


def make_trigger(cfg: dict, vocab: D.Vocab, attack: str | None = None) -> A.TriggerSpec:
    p = cfg["poison"]
    kind = attack or p["attack"]
    text_trigger = vocab.id_of(p["text_trigger"]) if kind == "dualkey" else None
    spec = A.TriggerSpec(
        kind=kind,
        patch_size=p["patch_size"],
        patch_pos=(p["patch_row"], p["patch_col"]),
        alpha=p["alpha"],
        amplitude=p["amplitude"],
        warp_strength=p["warp_strength"],
        warp_grid=p["warp_grid"],
        text_trigger=text_trigger,
        seed=p["seed"],
    )
    size = cfg["data"]["image_size"]
    spec.validate(size, size, vocab.size)
    return spec


def train_config_from(cfg: dict, **over) -> T.TrainConfig:
    fields = dict(cfg["train"])
    fields.update(over)
    tc = T.TrainConfig(**fields)
    tc.validate()
    return tc


def build_datasets(cfg: dict, attack: str | None = None, ratio: float | None = None):
    """Train pool (poisoned), clean test set, triggered test set."""
    d = cfg["data"]
    train_clean = D.generate_dataset(d["n"], d["seed"], "train", d["image_size"], d["image_size"])
    test_clean = D.generate_dataset(
        d["test_n"], d["test_seed"], "test-clean", d["image_size"], d["image_size"]
    )
    vocab = train_clean.vocab
    trigger = make_trigger(cfg, vocab, attack=attack)
    pconf = A.PoisonConfig(
        trigger=trigger,
        target_response=A.default_target_response(vocab),
        ratio=cfg["poison"]["ratio"] if ratio is None else ratio,
        seed=cfg["poison"]["seed"],
    )
    poisoned = A.poison_dataset(train_clean, pconf)
    triggered = A.make_triggered_dataset(test_clean, trigger)
    return poisoned, test_clean, triggered, vocab


def run_arm(
    poisoned: A.PoisonedDataset,
    test_clean: D.Dataset,
    triggered: D.Dataset,
    vocab: D.Vocab,
    tcfg: T.TrainConfig,
    arm_dir: Path,
    tag: str,
    attack: str,
    max_len: int,
) -> E.MetricsRow:
    arm_dir.mkdir(parents=True, exist_ok=True)
    state = T.train(
        poisoned,
        tcfg,
        checkpoint_path=arm_dir / "model.ckpt",
        runlog_path=arm_dir / "runlog.jsonl",
    )
    return E.evaluate(
        state.params,
        test_clean,
        triggered,
        vocab,
        model_tag=tag,
        attack=attack,
        defense="on" if tcfg.defense else "off",
        max_len=max_len,
    )


class MetricsWriter:
    """CSV sink flushed after every row so partial results survive failures."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "w")
        self._f.write(E.CSV_HEADER + "\n")
        self._f.flush()

    def write(self, row: E.MetricsRow) -> None:
        self._f.write(row.csv_line() + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


def write_manifest(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.txt").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def run_matrix(cfg: dict, attack_list=None) -> list[E.MetricsRow]:
    """Clean arm plus one arm per attack, each trained with defense off and on."""
    attack_list = list(attack_list or A.ATTACK_KINDS)
    out = Path(cfg["output"]["dir"])
    write_manifest(cfg, out)
    writer = MetricsWriter(out / "metrics.csv")
    max_len = cfg["eval"]["max_len"]
    rows = []
    try:
        for attack in ["clean"] + attack_list:
            ratio = 0.0 if attack == "clean" else None
            trig_kind = "badnets" if attack == "clean" else attack
            poisoned, test_clean, triggered, vocab = build_datasets(
                cfg, attack=trig_kind, ratio=ratio
            )
            for defense in (False, True):
                tag = f"{attack}/{'def' if defense else 'nodef'}"
                tcfg = train_config_from(cfg, defense=defense)
                row = run_arm(
                    poisoned,
                    test_clean,
                    triggered,
                    vocab,
                    tcfg,
                    out / "arms" / attack / ("def" if defense else "nodef"),
                    tag,
                    attack,
                    max_len,
                )
                writer.write(row)
                rows.append(row)
    finally:
        writer.close()
    return rows


def ablation_train_config(cfg: dict, arm: str) -> T.TrainConfig:
    if arm == "no-defense":
        return train_config_from(cfg, defense=False)
    if arm == "patch-only":
        return train_config_from(cfg, defense=True, lam2=0.0, lam3=0.0)
    if arm == "patch+cvdis":
        return train_config_from(cfg, defense=True, lam3=0.0)
    if arm == "full":
        return train_config_from(cfg, defense=True)
    raise ValueError(f"unknown ablation arm {arm!r}")


def run_ablation(cfg: dict) -> list[E.MetricsRow]:
    """Four arms on one shared poisoned badnets dataset, in fixed order."""
    out = Path(cfg["output"]["dir"])
    write_manifest(cfg, out)
    writer = MetricsWriter(out / "metrics.csv")
    max_len = cfg["eval"]["max_len"]
    poisoned, test_clean, triggered, vocab = build_datasets(cfg, attack="badnets")
    rows = []
    try:
        for arm in ABLATION_ARMS:
            tcfg = ablation_train_config(cfg, arm)
            row = run_arm(
                poisoned,
                test_clean,
                triggered,
                vocab,
                tcfg,
                out / "arms" / arm,
                f"ablate/{arm}",
                "badnets",
                max_len,
            )
            writer.write(row)
            rows.append(row)
    finally:
        writer.close()
    return rows


def run_sweep(cfg: dict, which: int, values) -> list[E.MetricsRow]:
    """One defended model per weight value, other weights at their defaults."""
    if which not in (1, 2, 3):
        raise ValueError("sweep index must be 1, 2, or 3")
    values = list(values)
    if not values:
        raise ValueError("sweep values must be non-empty")
    if min(values) < 0:
        raise ValueError("sweep values must be nonnegative")
    out = Path(cfg["output"]["dir"])
    write_manifest(cfg, out)
    writer = MetricsWriter(out / "metrics.csv")
    max_len = cfg["eval"]["max_len"]
    poisoned, test_clean, triggered, vocab = build_datasets(cfg)
    rows = []
    try:
        for v in values:
            tcfg = train_config_from(cfg, defense=True, **{f"lam{which}": float(v)})
            tag = f"lam{which}={v:g}"
            row = run_arm(
                poisoned,
                test_clean,
                triggered,
                vocab,
                tcfg,
                out / "arms" / tag.replace("=", "_"),
                tag,
                cfg["poison"]["attack"],
                max_len,
            )
            writer.write(row)
            rows.append(row)
    finally:
        writer.close()
    return rows
