"""Command-line entry point: ``lgad {gen,train,eval,attention,ablate}``.

Settings live in a flat key=value config (``data.*``, ``net.*``, ``train.*``,
``distill.*``, ``eval.*``). A config file is read first, then ``--set``
overrides, then ``--seed``. Every command writes the resolved config next to
its outputs as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Any, Callable

from .attention import attention_mean, export_pgm
from .distill import DistillPlan
from .lanedata import GenParams, gen_dataset, load_dataset, load_manifest, save_dataset
from .netlib import Network, NetworkConfig, forward, label_to_image
from .numcore import NonFiniteError, Tensor, no_grad
from .trainer import (
    AugmentConfig,
    EvalConfig,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    run_training,
    train_teacher,
)

log = logging.getLogger("lgad")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "data.seed": (int, 0),
    "data.train_count": (int, 500),
    "data.test_count": (int, 100),
    "data.height": (int, 64),
    "data.width": (int, 64),
    "data.channels": (int, 3),
    "data.max_lanes": (int, 4),
    "data.label_width": (int, 3),
    "data.occluder_prob": (float, 0.6),
    "data.noise": (float, 0.08),
    "net.stage_widths": (_ints, (8, 16, 32, 64)),
    "net.existence_head": (_bool, True),
    "net.skips": (_bool, True),
    "train.role": (str, "student"),
    "train.seed": (int, 0),
    "train.epochs": (int, 40),
    "train.teacher_epochs": (int, 20),
    "train.batch_size": (int, 8),
    # desk-scale rates; TrainConfig keeps the published 0.025 / 0.007
    "train.lr0": (float, 0.05),
    "train.teacher_lr0": (float, 0.1),
    "train.power": (float, 0.9),
    "train.strategy": (str, "SEQUENTIAL"),
    "train.exist_weight": (float, 0.1),
    "train.crop_pad": (float, 0.1),
    "train.hflip_prob": (float, 0.5),
    "train.rotate_deg": (float, 10.0),
    "distill.family": (str, "NONE"),
    "distill.positions": (_strs, ("stage2",)),
    "distill.alpha": (float, 0.5),
    "distill.p": (float, 1.0),
    "distill.normalize": (_bool, False),
    "eval.protocol": (str, "both"),
    "eval.row_stride": (int, 0),
    "eval.point_threshold": (float, 0.0),
    "eval.match_fraction": (float, 0.85),
    "eval.line_width": (int, 0),
    "eval.iou_threshold": (float, 0.5),
    "eval.exist_threshold": (float, 0.5),
    "eval.floor": (float, 0.3),
    "eval.matching": (str, "exact"),
}


class RunConfig:
    """Resolved settings; unknown keys and malformed values are rejected."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        parse = SCHEMA[key][0]
        if isinstance(value, str):
            try:
                value = parse(value)
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from exc
        self.values[key] = value

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def parse(cls, text: str, origin: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{n}: expected key=value, got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(k, v)
            except ConfigError as exc:
                raise ConfigError(f"{origin}:{n}: {exc}") from exc
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in SCHEMA)

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.txt").write_text(self.to_text())

    # typed views

    def gen_params(self) -> GenParams:
        return GenParams(height=self["data.height"], width=self["data.width"], channels=self["data.channels"],
                         max_lanes=self["data.max_lanes"], label_width=self["data.label_width"],
                         occluder_prob=self["data.occluder_prob"], noise=self["data.noise"])

    def net_config(self, channels: int | None = None, max_lanes: int | None = None) -> NetworkConfig:
        lanes = max_lanes if max_lanes is not None else self["data.max_lanes"]
        return NetworkConfig(in_channels=channels if channels is not None else self["data.channels"],
                             num_classes=lanes + 1, stage_widths=self["net.stage_widths"],
                             with_existence_head=self["net.existence_head"], max_lanes=lanes,
                             skips=self["net.skips"])

    def plan(self) -> DistillPlan:
        return DistillPlan(family=self["distill.family"], positions=self["distill.positions"],
                           alpha=self["distill.alpha"], p=self["distill.p"],
                           normalize_maps=self["distill.normalize"])

    def train_config(self, net: NetworkConfig) -> TrainConfig:
        return TrainConfig(
            epochs=self["train.epochs"], batch_size=self["train.batch_size"], lr0=self["train.lr0"],
            power=self["train.power"], seed=self["train.seed"], strategy=self["train.strategy"],
            plan=self.plan(), net=net, exist_weight=self["train.exist_weight"],
            label_width=self["data.label_width"], teacher_lr0=self["train.teacher_lr0"],
            augment=AugmentConfig(self["train.crop_pad"], self["train.hflip_prob"], self["train.rotate_deg"]),
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(row_stride=self["eval.row_stride"] or None,
                          point_threshold_px=self["eval.point_threshold"] or None,
                          lane_match_fraction=self["eval.match_fraction"],
                          line_width_px=self["eval.line_width"] or None,
                          iou_threshold=self["eval.iou_threshold"], exist_threshold=self["eval.exist_threshold"],
                          floor=self["eval.floor"], matching=self["eval.matching"])


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        cfg = RunConfig.parse(text, str(path))
    else:
        cfg = RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    if args.seed is not None:
        cfg.set("data.seed", args.seed)
        cfg.set("train.seed", args.seed)
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out_dir: Path) -> None:
    params = cfg.gen_params()
    seed = cfg["data.seed"]
    # train and test draw from disjoint seed streams
    for split, count, sub_seed in (("train", cfg["data.train_count"], 2 * seed + 1),
                                   ("test", cfg["data.test_count"], 2 * seed + 2)):
        scenes = gen_dataset(params, sub_seed, count)
        save_dataset(scenes, out_dir / split, params, {"seed": sub_seed, "split": split})
    cfg.write(out_dir)


def _split_dir(data: Path, split: str) -> Path:
    return data / split if (data / split / "manifest.json").is_file() else data


def _data_net_config(cfg: RunConfig, data_dir: Path) -> NetworkConfig:
    man = load_manifest(data_dir)
    return cfg.net_config(int(man["channels"]), int(man["max_lanes"]))


def cmd_train(cfg: RunConfig, data: Path, out_dir: Path, teacher_path: Path | None = None) -> dict:
    role = cfg["train.role"].lower()
    if role not in ("teacher", "student"):
        raise ConfigError(f"train.role must be teacher or student, got {role!r}")
    train_dir = _split_dir(data, "train")
    plan = cfg.plan()
    sequential = cfg["train.strategy"].upper() == "SEQUENTIAL"
    if role == "student" and sequential and plan.needs_teacher:
        if teacher_path is None:
            raise ConfigError(f"{plan.family} distillation needs --teacher CHECKPOINT")
        if not teacher_path.is_file():
            raise ConfigError(f"{teacher_path}: teacher checkpoint not found")
    net = _data_net_config(cfg, train_dir)
    teacher = Network.load(teacher_path) if teacher_path is not None and role == "student" else None
    scenes = load_dataset(train_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir)
    if role == "teacher":
        tc = cfg.train_config(net)
        tc.epochs = cfg["train.teacher_epochs"]
        res = train_teacher(scenes, tc)
    else:
        res = run_training(scenes, cfg.train_config(net), teacher=teacher)
    res.net.save(out_dir / "model.bin")
    (out_dir / "log.csv").write_text(res.log.to_csv())
    _write_epochs(res.log.epochs, out_dir / "epochs.csv")
    if res.teacher_log is not None:
        res.teacher.save(out_dir / "teacher.bin")
        (out_dir / "teacher_log.csv").write_text(res.teacher_log.to_csv())
    if res.peer is not None:
        res.peer.save(out_dir / "peer.bin")
    return {"epochs": res.log.epochs, "net": res.net}


def _write_epochs(rows: list[dict], path: Path) -> None:
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(keys)
        for r in rows:
            wr.writerow([repr(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in keys])


def cmd_eval(cfg: RunConfig, checkpoint: Path, data: Path, out_dir: Path, teacher_inputs: bool = False):
    net = Network.load(checkpoint)
    test_dir = _split_dir(data, "test")
    man = load_manifest(test_dir)
    if int(man["channels"]) != net.config.in_channels or int(man["max_lanes"]) + 1 != net.config.num_classes:
        raise ConfigError(f"{checkpoint}: network structure does not match dataset {test_dir}")
    scenes = load_dataset(test_dir)
    if not scenes:
        raise ConfigError(f"{test_dir}: evaluation set is empty")
    report = evaluate(net, scenes, cfg.eval_config(), cfg["eval.protocol"], teacher_inputs)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir)
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    return report


def cmd_attention(cfg: RunConfig, checkpoint: Path, data: Path, samples: list[int], out_dir: Path,
                  teacher_inputs: bool = False) -> list[Path]:
    net = Network.load(checkpoint)
    test_dir = _split_dir(data, "test")
    scenes = load_dataset(test_dir)
    bad = [i for i in samples if not 0 <= i < len(scenes)]
    if bad:
        raise ConfigError(f"sample ids {bad} outside dataset of {len(scenes)} scenes")
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir)
    written = []
    for i in samples:
        sc = scenes[i]
        if teacher_inputs:
            x = label_to_image(sc.mask, net.config.in_channels, net.config.num_classes)
        else:
            x = Tensor(sc.image[None])
        with no_grad():
            taps = forward(net, x).taps
        for name, r in taps.items():
            path = out_dir / f"sample{i:05d}_{name}.pgm"
            export_pgm(attention_mean(r, cfg["distill.p"]).data[0], path)
            written.append(path)
    return written


ABLATE_FIELDS = ["name", "family", "positions", "strategy", "seed", "status", "accuracy", "fp_rate", "fn_rate",
                 "precision", "recall", "f1"]


def cmd_ablate(cfg: RunConfig, data: Path, out_dir: Path, families: list[str], positions: list[str],
               teacher_path: Path | None = None, strategies: list[str] | None = None) -> list[dict]:
    """Run every (family, positions, strategy) member and tabulate test metrics.

    ``positions`` entries are '+'-joined tap lists, e.g. ``stage1+stage3``.
    A failing member is recorded with its error and the sweep continues.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(out_dir)
    strategies = strategies or [cfg["train.strategy"]]
    members = []
    for fam in families:
        placements = positions if positions and fam.upper() in ("LGAD", "FMD", "DS") else [None]
        for pos in placements:
            for strat in strategies:
                members.append((fam, pos, strat))
    rows = []
    for fam, pos, strat in members:
        pos_list = pos.split("+") if pos else list(cfg["distill.positions"])
        name = f"{fam.upper()}_{strat.lower()}" + (f"_{pos}" if pos else "")
        row = {"name": name, "family": fam.upper(), "positions": "+".join(pos_list) if pos else "",
               "strategy": strat.upper(), "seed": cfg["train.seed"]}
        member = RunConfig(dict(cfg.values))
        try:
            member.set("distill.family", fam)
            member.set("distill.positions", ",".join(pos_list))
            member.set("train.strategy", strat)
            member.set("train.role", "student")
            mdir = out_dir / name
            cmd_train(member, data, mdir, teacher_path)
            rep = cmd_eval(member, mdir / "model.bin", data, mdir)
            row.update(status="ok", accuracy=rep.accuracy, fp_rate=rep.fp_rate, fn_rate=rep.fn_rate,
                       precision=rep.precision, recall=rep.recall, f1=rep.f1)
        except Exception as exc:  # a failed member must not stop the sweep
            log.error("member %s failed: %s", name, exc)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
        rows.append(row)
    with (out_dir / "ablation.csv").open("w", newline="") as fh:
        wr = csv.DictWriter(fh, ABLATE_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="sets data.seed and train.seed")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (1 = deterministic)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lgad", description="label-guided attention distillation toolkit",
                                 parents=[common])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic train/test dataset")
    p.add_argument("out", type=Path)

    p = sub.add_parser("train", parents=[common], help="train a teacher or a student")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--teacher", type=Path, help="teacher checkpoint for sequential distillation")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--protocol", choices=("point", "iou", "both"))
    p.add_argument("--teacher-inputs", action="store_true", help="feed rendered labels instead of images")

    p = sub.add_parser("attention", parents=[common], help="export attention maps as PGM")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", default="0", help="comma-separated scene indices")
    p.add_argument("--teacher-inputs", action="store_true")

    p = sub.add_parser("ablate", parents=[common], help="sweep families and distillation positions")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--teacher", type=Path)
    p.add_argument("--families", default="", help="comma-separated, e.g. NONE,LGAD,DS,DML,FMD")
    p.add_argument("--positions", default="", help="comma-separated placements; '+' joins taps")
    p.add_argument("--strategies", default="", help="comma-separated SEQUENTIAL/COLLABORATIVE")
    return ap


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if getattr(args, "protocol", None):
            cfg.set("eval.protocol", args.protocol)
        with _thread_limit(args.threads):
            if args.command == "gen":
                cmd_gen(cfg, args.out)
            elif args.command == "train":
                cmd_train(cfg, args.data, args.out, args.teacher)
            elif args.command == "eval":
                rep = cmd_eval(cfg, args.checkpoint, args.data, args.out, args.teacher_inputs)
                print(rep.to_text())
            elif args.command == "attention":
                ids = [int(v) for v in args.samples.split(",") if v.strip()]
                for path in cmd_attention(cfg, args.checkpoint, args.data, ids, args.out, args.teacher_inputs):
                    print(path)
            elif args.command == "ablate":
                rows = cmd_ablate(cfg, args.data, args.out, list(_strs(args.families)), list(_strs(args.positions)),
                                  args.teacher, list(_strs(args.strategies)) or None)
                for r in rows:
                    print(r["name"], r["status"], r.get("accuracy", ""))
    except (FloatingPointError, NonFiniteError, TrainingDiverged) as exc:
        print(f"lgad: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"lgad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
