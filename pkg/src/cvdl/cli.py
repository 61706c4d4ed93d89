"""Command-line entry points: datagen, poison, train, eval, matrix, ablate,
sweep, gradcheck. Each command reads the JSON config (if given) and accepts
a --section.key flag for every config key."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import attacks as A
from . import datagen as D
from . import evaluation as E
from . import experiments as X
from . import model as M
from . import training as T


def _add_config_flags(parser: argparse.ArgumentParser) -> list[str]:
    dotted = []
    for section, keys in X.default_config().items():
        for key in keys:
            name = f"{section}.{key}"
            parser.add_argument(f"--{name}", dest=name, default=None, metavar="V")
            dotted.append(name)
    return dotted


def _resolved_config(args) -> dict:
    cfg = X.load_config(args.config)
    cfg = X.resolve_seeds(cfg, getattr(args, "seed", None))
    overrides = {name: getattr(args, name) for name in args._dotted}
    return X.apply_overrides(cfg, overrides)


def _base(sub, name, help_text, seed_required=False):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, required=seed_required,
                   help="master seed; derives data/poison/train seeds")
    p._dotted = _add_config_flags(p)
    return p


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cvdl")
    sub = parser.add_subparsers(dest="command", required=True)

    p = _base(sub, "datagen", "generate and save a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=D.SPLITS)

    p = _base(sub, "poison", "poison a saved or generated dataset")
    p.add_argument("--dataset", default=None, help="saved dataset directory")
    p.add_argument("--out", required=True)

    p = _base(sub, "train", "train one model")
    p.add_argument("--dataset", default=None, help="saved (possibly poisoned) dataset")
    p.add_argument("--out", required=True)

    p = _base(sub, "eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)

    p = _base(sub, "matrix", "attack x defense matrix", seed_required=True)
    p.add_argument("--attacks", default=",".join(A.ATTACK_KINDS),
                   help="comma-separated attack kinds")

    _base(sub, "ablate", "defense ablation arms", seed_required=True)

    p = _base(sub, "sweep", "regularizer weight sweep", seed_required=True)
    p.add_argument("--which", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--values", default=",".join(map(str, X.DEFAULT_SWEEP_VALUES)))

    p = _base(sub, "gradcheck", "finite-difference gradient verification")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=200)

    args = parser.parse_args(argv)
    cfg = _resolved_config(args)

    if args.command == "datagen":
        d = cfg["data"]
        ds = D.generate_dataset(d["n"], d["seed"], args.split, d["image_size"], d["image_size"])
        D.save_dataset(ds, args.out)
        print(f"wrote {len(ds.samples)} samples to {args.out}")
        return 0

    if args.command == "poison":
        if args.dataset:
            ds = D.load_dataset(args.dataset)
        else:
            d = cfg["data"]
            ds = D.generate_dataset(d["n"], d["seed"], "train", d["image_size"], d["image_size"])
        trigger = X.make_trigger(cfg, ds.vocab)
        pconf = A.PoisonConfig(
            trigger=trigger,
            target_response=A.default_target_response(ds.vocab),
            ratio=cfg["poison"]["ratio"],
            seed=cfg["poison"]["seed"],
        )
        pds = A.poison_dataset(ds, pconf)
        A.save_poisoned_dataset(pds, args.out)
        print(f"poisoned {sum(pds.poison_mask)} of {len(pds.poison_mask)} samples")
        return 0

    if args.command == "train":
        if args.dataset:
            ds = D.load_dataset(args.dataset)
        else:
            d = cfg["data"]
            ds = D.generate_dataset(d["n"], d["seed"], "train", d["image_size"], d["image_size"])
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        X.write_manifest(cfg, out)
        tcfg = X.train_config_from(cfg)
        state = T.train(ds, tcfg, checkpoint_path=out / "model.ckpt",
                        runlog_path=out / "runlog.jsonl")
        print(f"trained {state.step} steps; final L_def {state.history[-1].l_def:.4f}")
        return 0

    if args.command == "eval":
        d = cfg["data"]
        test_clean = D.generate_dataset(
            d["test_n"], d["test_seed"], "test-clean", d["image_size"], d["image_size"]
        )
        vocab = test_clean.vocab
        trigger = X.make_trigger(cfg, vocab)
        triggered = A.make_triggered_dataset(test_clean, trigger)
        dims = M.ModelDims(
            vocab_size=vocab.size,
            feat_dim=cfg["train"]["feat_dim"],
            image_size=d["image_size"],
        )
        params = M.load_params(args.checkpoint, dims)
        row = E.evaluate(
            params, test_clean, triggered, vocab,
            model_tag=cfg["output"]["tag"],
            attack=cfg["poison"]["attack"],
            defense="on" if cfg["train"]["defense"] else "off",
            max_len=cfg["eval"]["max_len"],
        )
        print(E.CSV_HEADER)
        print(row.csv_line())
        if args.out:
            writer = X.MetricsWriter(Path(args.out) / "metrics.csv")
            writer.write(row)
            writer.close()
        return 0

    if args.command == "matrix":
        rows = X.run_matrix(cfg, [a for a in args.attacks.split(",") if a])
    elif args.command == "ablate":
        rows = X.run_ablation(cfg)
    elif args.command == "sweep":
        values = [float(v) for v in args.values.split(",") if v]
        rows = X.run_sweep(cfg, args.which, values)
    elif args.command == "gradcheck":
        d = cfg["data"]
        ds = D.generate_dataset(
            cfg["train"]["batch_size"], d["seed"], "train", d["image_size"], d["image_size"]
        )
        tcfg = X.train_config_from(cfg)
        dims = M.ModelDims(
            vocab_size=ds.vocab.size,
            feat_dim=tcfg.feat_dim,
            image_size=d["image_size"],
        )
        state = T.init_state(tcfg, dims)
        err = T.gradient_check(state, list(ds.samples), tcfg,
                               eps=args.eps, n_coords=args.coords)
        print(f"max relative gradient error: {err:.3e}")
        return 0 if err < 1e-4 else 1
    else:  # pragma: no cover
        parser.error(f"unknown command {args.command}")

    print(E.CSV_HEADER)
    for row in rows:
        print(row.csv_line())
    return 0


if __name__ == "__main__":
    sys.exit(main())
