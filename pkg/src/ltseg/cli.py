"""Command-line orchestration over an experiment directory.

Layout of an experiment directory::

    train.meds, test.meds        generated scenes
    <name>.medc                  checkpoints (name defaults to the training mode)
    <name>.trace.csv             stage-1 loss trace
    reports/<name>.<combiner>.<distribution>.{json,confusion.csv,plot.csv}

Configuration is a flat ``key = value`` file; ``--set key=value`` flags and
dedicated flags override it, and ``MEDOE_SEED`` overrides the file's seed.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import ensemble, metrics, pipeline
from .synthgen import (
    GROUPS,
    ExplicitCounts,
    GeneratorConfig,
    Thresholds,
    compute_frequency,
    generate_dataset,
    group_shares,
    load_dataset,
    make_grouping,
    save_dataset,
    stack,
)
from .training import (
    TrainConfig,
    TrainingDiverged,
    expert_probabilities,
    load_checkpoint,
    save_checkpoint,
    smoothed_trace_monotone,
    train_stage1,
    train_stage2_moe,
)

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
REPORT_SCHEMA = 1
LOCK_NAME = ".lock"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # generator
    H: int = 64
    W: int = 64
    c: int = 12
    n_head: int = 2
    n_body: int = 4
    n_tail: int = 6
    D: int = 8
    gamma: float = 0.5
    sigma: float = 0.3
    n_scenes: int = 200
    n_test: int = 50
    seed: int = 0
    target_shares: tuple[float, ...] = (0.8, 0.15, 0.05)
    rect_side: tuple[int, ...] = (8, 20)
    host_inside_prob: float = 0.7
    # grouping: "counts" uses n_head/n_body/n_tail, "thresholds" uses t_head/t_body
    grouping: str = "counts"
    t_head: float = 0.1
    t_body: float = 0.01
    # training
    mode: str = "medoe"
    iters: int = 600
    lr: float = 0.1
    batch: int = 4
    alpha: float = 0.2
    poly: bool = False
    focal_gamma: float = 2.0
    undersample_ratio: float | None = None
    F1: int = 16
    F2: int = 16
    radius: int = 2
    moe_iters: int = 1000
    moe_lr: float = 0.005
    moe_batch: int = 1
    moe_reduction: str = "sum"
    # evaluation
    combiner: str = "moe"
    distribution: str = "longtail"
    resample_seed: int = 0
    replicas: int = 3
    out_dir: str = "experiment"

    def generator(self) -> GeneratorConfig:
        g = GeneratorConfig(
            H=self.H, W=self.W, c=self.c, n_head=self.n_head, n_body=self.n_body, n_tail=self.n_tail,
            D=self.D, gamma=self.gamma, sigma=self.sigma, n_scenes=self.n_scenes, seed=self.seed,
            target_shares=tuple(self.target_shares), rect_side=tuple(self.rect_side),
            host_inside_prob=self.host_inside_prob,
        )
        g.validate()
        return g

    def grouping_mode(self):
        if self.grouping == "counts":
            return ExplicitCounts(self.n_head, self.n_body, self.n_tail)
        if self.grouping == "thresholds":
            return Thresholds(self.t_head, self.t_body)
        raise ConfigError(f"grouping must be 'counts' or 'thresholds', got {self.grouping!r}")

    def train(self) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        cfg = TrainConfig(**{k: v for k, v in self.to_dict().items() if k in known})
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    f = _FIELDS[key]
    t = str(f.type)
    text = text.strip()
    try:
        if t.startswith("tuple"):
            elem = float if "float" in t else int
            return tuple(elem(p) for p in text.split(",") if p.strip())
        if t == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if t.startswith("float | None"):
            return None if text.lower() in ("none", "") else float(text)
        if t == "int":
            return int(text)
        if t == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def load_config(path: str | None, overrides: list[str], flags: dict, env=None) -> ExperimentConfig:
    """File values, then MEDOE_SEED, then ``--set`` overrides, then dedicated flags."""
    env = os.environ if env is None else env
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), path))
    if env.get("MEDOE_SEED") not in (None, ""):
        values["seed"] = _coerce("seed", env["MEDOE_SEED"])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _coerce(key, val)
    values.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig(**values)


@contextlib.contextmanager
def experiment_lock(directory: Path):
    """Exclusive ownership of an experiment directory for the duration of a command."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{directory} is locked by another process (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_split(exp: ExperimentConfig, split: str):
    path = Path(exp.out_dir) / f"{split}.meds"
    hdr, scenes = load_dataset(path)
    return hdr, scenes


def _check_compatible(model, hdr, path) -> None:
    if hdr.c != model.c or hdr.D != model.backbone.D:
        raise ValueError(f"{path}: dataset has c={hdr.c}, D={hdr.D}; checkpoint expects c={model.c}, D={model.backbone.D}")


# ---------------------------------------------------------------------------
# subcommands


def frequency_table(profile, grouping) -> str:
    lines = [f"{'rank':>4} {'category':>8} {'group':>5} {'pixels':>9} {'share':>8}"]
    for rank, k in enumerate(grouping.order, start=1):
        lines.append(f"{rank:>4} {k:>8} {grouping.group_of[k]:>5} {int(profile.counts[k]):>9} {profile.freqs[k]:>8.4f}")
    shares = group_shares(profile, grouping)
    lines.append("group shares: " + ", ".join(f"{g} {s:.4f}" for g, s in shares.items()))
    return "\n".join(lines)


def cmd_gen(exp: ExperimentConfig, args) -> int:
    gen = exp.generator()
    out = Path(exp.out_dir)
    with experiment_lock(out):
        train = generate_dataset(gen)
        test = generate_dataset(GeneratorConfig(**{**gen.__dict__, "n_scenes": exp.n_test}), stream=pipeline.TEST_STREAM)
        profile = compute_frequency(train, gen.c)
        grouping = make_grouping(profile, exp.grouping_mode())
        save_dataset(out / "train.meds", train, gen.c, gen.seed)
        save_dataset(out / "test.meds", test, gen.c, gen.seed)
    print(frequency_table(profile, grouping))
    print(f"wrote {out / 'train.meds'} ({len(train)} scenes) and {out / 'test.meds'} ({len(test)} scenes)")
    return EXIT_OK


def cmd_freq(exp: ExperimentConfig, args) -> int:
    path = Path(args.dataset) if args.dataset else Path(exp.out_dir) / "train.meds"
    hdr, scenes = load_dataset(path)
    profile = compute_frequency(scenes, hdr.c)
    grouping = make_grouping(profile, exp.grouping_mode())
    print(frequency_table(profile, grouping))
    return EXIT_OK


def cmd_train(exp: ExperimentConfig, args) -> int:
    cfg = exp.train()
    out = Path(exp.out_dir)
    name = args.name or exp.mode
    with experiment_lock(out):
        hdr, scenes = _load_split(exp, "train")
        profile = compute_frequency(scenes, hdr.c)
        grouping = make_grouping(profile, exp.grouping_mode())
        model = train_stage1(scenes, grouping, cfg, profile, trace_path=out / f"{name}.trace.csv")
        save_checkpoint(out / f"{name}.medc", model)
    flags = smoothed_trace_monotone(model.trace)
    if not all(flags):
        print(f"note: smoothed loss trace not monotone for experts {[i + 1 for i, f in enumerate(flags) if not f]}; consider lowering lr")
    print(f"wrote {out / f'{name}.medc'} ({model.K} experts)")
    return EXIT_OK


def cmd_train_moe(exp: ExperimentConfig, args) -> int:
    out = Path(exp.out_dir)
    ckpt = Path(args.checkpoint)
    with experiment_lock(out):
        model = load_checkpoint(ckpt)
        if model.K < 2:
            raise ValueError(f"{ckpt}: a single-expert checkpoint has nothing to combine")
        hdr, scenes = _load_split(exp, "train")
        _check_compatible(model, hdr, ckpt)
        cfg = TrainConfig.from_dict({**model.config.to_dict(), **{k: v for k, v in exp.train().to_dict().items() if k.startswith("moe_")}})
        model.calibration = train_stage2_moe(model, scenes, cfg)
        model.config = cfg
        save_checkpoint(Path(args.out) if args.out else ckpt, model)
    print(f"calibrated {model.K} experts over {cfg.moe_iters} steps")
    return EXIT_OK


def report_stem(checkpoint: Path, combiner: str, distribution: str) -> str:
    return f"{checkpoint.stem}.{combiner.replace(':', '')}.{distribution}"


def cmd_eval(exp: ExperimentConfig, args) -> int:
    out = Path(exp.out_dir)
    ckpt = Path(args.checkpoint)
    with experiment_lock(out):
        model = load_checkpoint(ckpt)
        hdr, scenes = _load_split(exp, "test")
        _check_compatible(model, hdr, ckpt)
        rep = pipeline.evaluate(model, scenes, exp.combiner, exp.distribution, exp.resample_seed)
        doc = rep.to_dict(model.grouping, model.profile)
        doc.update(
            schema=REPORT_SCHEMA,
            checkpoint=ckpt.name,
            combiner=exp.combiner,
            distribution=exp.distribution,
            config=exp.to_dict() | {"checkpoint_config": model.config.to_dict()},
        )
        doc["config"].pop("out_dir")
        rdir = out / "reports"
        rdir.mkdir(exist_ok=True)
        stem = report_stem(ckpt, exp.combiner, exp.distribution)
        _write_json(rdir / f"{stem}.json", doc)
        (rdir / f"{stem}.confusion.csv").write_text(metrics.confusion_csv(rep.confusion))
        (rdir / f"{stem}.plot.csv").write_text(metrics.plot_csv(rep, model.grouping, model.profile))
    g = rep.groups
    print(f"{stem}: mIoU {rep.miou:.4f} mAcc {rep.macc:.4f} | " + " ".join(f"{k} {v['macc']:.4f}" for k, v in g.items() if v["macc"] is not None))
    return EXIT_OK


def cmd_bias(exp: ExperimentConfig, args) -> int:
    out = Path(exp.out_dir)
    with experiment_lock(out):
        models = [load_checkpoint(p) for p in args.checkpoints]
        if not models:
            from .training import train_replicas
            hdr, scenes = _load_split(exp, "train")
            profile = compute_frequency(scenes, hdr.c)
            grouping = make_grouping(profile, exp.grouping_mode())
            models = train_replicas(scenes, grouping, exp.train(), exp.replicas, profile, stage2=exp.combiner == "moe")
        hdr, test = _load_split(exp, "test")
        for m, p in zip(models, args.checkpoints or [None] * len(models)):
            _check_compatible(m, hdr, p or "replica")
        feats, labels = stack(test)
        combiner = exp.combiner

        def predictor(m):
            return lambda x: ensemble.as_probabilities(pipeline.combine(m, expert_probabilities(m, x), combiner), m.c)

        if combiner == "oracle":
            raise ValueError("the oracle combiner reads labels and cannot be used for bias estimation")
        res = metrics.bias_estimate([predictor(m) for m in models], feats, labels, models[0].grouping)
        res.update(replicas=len(models), combiner=combiner)
        dest = Path(args.out) if args.out else out / "reports" / f"bias.{combiner.replace(':', '')}.json"
        dest.parent.mkdir(parents=True, exist_ok=True)
        _write_json(dest, res)
    print(" ".join(f"{g} {v:.4f}" for g, v in res["groups"].items() if v is not None))
    return EXIT_OK


def _load_report(path: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if "confusion" not in doc:
        raise ValueError(f"{path}: report has no embedded confusion matrix")
    return doc


def cmd_diag(exp: ExperimentConfig, args) -> int:
    base, new = _load_report(args.baseline), _load_report(args.improved)
    cm0, cm1 = np.asarray(base["confusion"], dtype=np.int64), np.asarray(new["confusion"], dtype=np.int64)
    if cm0.shape != cm1.shape:
        raise ValueError(f"category sets differ: {args.baseline} has {cm0.shape[0]}, {args.improved} has {cm1.shape[0]}")
    doc = metrics.delta_fp_diagnostic(cm0, cm1).to_dict()
    doc.update(baseline=Path(args.baseline).name, improved=Path(args.improved).name)
    if args.out:
        _write_json(Path(args.out), doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(exp: ExperimentConfig, args) -> int:
    paths = args.reports or sorted(str(p) for p in (Path(exp.out_dir) / "reports").glob("*.json") if not p.name.startswith("bias"))
    rows = []
    for p in paths:
        doc = json.loads(Path(p).read_text())
        if "overall" not in doc:
            continue
        g = doc["groups"]
        rows.append(
            {
                "report": Path(p).name,
                "miou": doc["overall"]["miou"],
                "macc": doc["overall"]["macc"],
                **{f"{k}_macc": g[k]["macc"] for k in GROUPS if k in g},
                "pearson": doc.get("pearson"),
            }
        )
    if not rows:
        raise ValueError("no evaluation reports found")
    cols = list(rows[0])
    print(" | ".join(cols))
    for r in rows:
        print(" | ".join(r[k] if isinstance(r[k], str) else ("-" if r[k] is None else f"{r[k]:.4f}") for k in cols))
    if args.out:
        _write_json(Path(args.out), rows)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "freq": cmd_freq,
    "train": cmd_train,
    "train-moe": cmd_train_moe,
    "eval": cmd_eval,
    "bias": cmd_bias,
    "diag": cmd_diag,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="flat key = value configuration file")
    common.add_argument("-s", "--set", action="append", default=[], metavar="KEY=VALUE", help="override a configuration key")
    common.add_argument("-d", "--out-dir", dest="out_dir", help="experiment directory")
    common.add_argument("--seed", type=int)

    p = argparse.ArgumentParser(prog="ltseg", description="Multi-expert long-tailed segmentation experiments on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train and test scenes")
    sp = sub.add_parser("freq", parents=[common], help="print the frequency profile and grouping of a dataset")
    sp.add_argument("dataset", nargs="?")
    sp = sub.add_parser("train", parents=[common], help="stage-1 training")
    sp.add_argument("--mode")
    sp.add_argument("--name", help="checkpoint name (default: the mode)")
    sp = sub.add_parser("train-moe", parents=[common], help="stage-2 calibration of a multi-expert checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", help="write the calibrated checkpoint here instead of in place")
    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test scenes")
    sp.add_argument("checkpoint")
    sp.add_argument("--combiner")
    sp.add_argument("--distribution", choices=("longtail", "uniform"))
    sp = sub.add_parser("bias", parents=[common], help="bias of the replica-averaged prediction")
    sp.add_argument("checkpoints", nargs="*", help="replica checkpoints; trains `replicas` models when omitted")
    sp.add_argument("--combiner")
    sp.add_argument("--out")
    sp = sub.add_parser("diag", parents=[common], help="predicted vs actual false-positive growth between two reports")
    sp.add_argument("baseline")
    sp.add_argument("improved")
    sp.add_argument("--out")
    sp = sub.add_parser("report", parents=[common], help="tabulate evaluation reports")
    sp.add_argument("reports", nargs="*")
    sp.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: getattr(args, k, None) for k in ("out_dir", "seed", "mode", "combiner", "distribution")}
    try:
        exp = load_config(args.config, args.set, flags)
        return COMMANDS[args.command](exp, args)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
