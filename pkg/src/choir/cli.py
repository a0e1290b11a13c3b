"""Command-line entry point: ``choir <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 selfcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import shlex
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import pointcloud as pcm
from . import synthetic
from .metrics import EvalConfig, evaluate, parse_perturbation
from .residual import CharacteristicOrientationPredictor
from .selfcheck import SUITES, run_suites
from .training import NonFiniteLossError, TrainConfig, parse_config_text, save_run, train, train_config_from

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFCHECK = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunMetadata:
    command_line: str
    command: str
    config: dict
    seed: int
    precision: str
    knn_mode: str
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "run_metadata.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _metadata(args, config: dict) -> RunMetadata:
    return RunMetadata(" ".join(shlex.quote(a) for a in args.argv), args.command, config, args.seed,
                       getattr(args, "precision", None) or "double", getattr(args, "knn_mode", None) or "adaptive",
                       started=_now())


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise DataError(f"output path {out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty; pass --force to write into it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path) -> tuple[synthetic.Dataset, dict[str, str]]:
    p = Path(path)
    manifest = p / "manifest.csv" if p.is_dir() else p
    if not manifest.is_file():
        raise DataError(f"no corpus manifest at {manifest}")
    try:
        return synthetic.read_corpus(manifest), synthetic.read_manifest_header(manifest)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read corpus {manifest}: {exc}") from exc


def _load_model(path) -> tuple[CharacteristicOrientationPredictor, dict]:
    try:
        entries = ckpt.load_checkpoint(path)
    except (OSError, ckpt.CheckpointError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    meta = {k[5:]: float(v) for k, v in entries.items() if k.startswith("meta.") and np.ndim(v) == 0}
    return CharacteristicOrientationPredictor.from_entries(entries), meta


# -- commands ----------------------------------------------------------------------
def cmd_gen_data(args) -> int:
    classes = args.classes
    if classes and len(classes) == 1 and classes[0].isdigit():
        count = int(classes[0])
        defaults = ["plane", "chair", "tapered", "bracket", "mug"]
        if not 2 <= count <= len(defaults):
            raise UsageError(f"--classes count must be between 2 and {len(defaults)}")
        classes = defaults[:count]
    spec = synthetic.SyntheticCorpus(
        classes=classes or synthetic.SyntheticCorpus().classes,
        instances_per_class=args.instances, n_points=args.n, seed=args.seed, grid=args.grid)
    try:
        ds = synthetic.generate_synthetic_corpus(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _prepare_out(args.out, args.force)
    header = {"seed": spec.seed, "classes": " ".join(spec.classes), "instances_per_class": spec.instances_per_class,
              "n_points": spec.n_points, "jitter": spec.jitter, "grid": spec.grid, "val_fraction": spec.val_fraction}
    synthetic.write_corpus(ds, out, header)
    meta = _metadata(args, {k: str(v) for k, v in header.items()})
    meta.finished = _now()
    meta.write(out)
    print(f"wrote {len(ds.clouds)} clouds ({len(spec.classes)} classes) to {out}")
    return EXIT_OK


TRAIN_FLAG_KEYS = [f.name for f in fields(TrainConfig)]


def _train_config(args) -> TrainConfig:
    values: dict[str, object] = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    for key in TRAIN_FLAG_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            values[key] = value
    if args.no_residual:
        values["use_residual"] = False
    try:
        return train_config_from(values)
    except (KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds, header = _load_corpus(args.data)
    out = _prepare_out(args.out, args.force)
    meta = _metadata(args, asdict(cfg))
    meta.seed, meta.precision, meta.knn_mode = cfg.seed, cfg.precision, cfg.knn_mode

    def log(row):
        if row.epoch % cfg.eval_every == 0 or row.epoch == cfg.epochs:
            print(f"epoch {row.epoch:5d}  loss {row.loss:.4f}  stability {row.val_stability_deg:.3f}  "
                  f"consistency {row.val_consistency_deg:.2f}", flush=True)

    try:
        result = train(ds, cfg, log=log)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"replay: rerun with --seed {cfg.seed} and stop at epoch {exc.epoch} "
              f"(batch seed {exc.seed}); pairs {exc.pair_ids}", file=sys.stderr)
        return EXIT_NUMERIC
    save_run(result, out, {"corpus_version": float(header.get("corpus_version", 0))})
    meta.extra = {"selected_epoch": result.selected_epoch, "corpus": str(args.data)}
    meta.finished = _now()
    meta.write(out)
    print(f"selected epoch {result.selected_epoch}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _check_versions(model_meta: dict, header: dict[str, str]) -> None:
    have = model_meta.get("corpus_version")
    want = header.get("corpus_version")
    if have is not None and want is not None and int(have) != int(float(want)):
        raise DataError(f"checkpoint was trained on corpus version {int(have)} but the corpus is version {want}")


def cmd_eval(args) -> int:
    model, model_meta = _load_model(args.checkpoint)
    ds, header = _load_corpus(args.data)
    _check_versions(model_meta, header)
    try:
        parse_perturbation(args.perturb)
        cfg = EvalConfig(K=args.K, seed=args.seed, knn_mode=args.knn_mode or model.cfg.knn_mode,
                         precision=args.precision, perturbation=args.perturb or "none", split=args.split)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.n:
        rng = np.random.default_rng([args.seed, 3])
        ds = synthetic.Dataset([pcm.center(pcm.resample(pc, args.n, rng)) for pc in ds.clouds], ds.val_ids)
    out = _prepare_out(args.out, args.force)
    report = evaluate(ds, model, cfg, checkpoint_id=str(args.checkpoint))
    report.metadata["corpus_version"] = header.get("corpus_version", "")
    meta = _metadata(args, asdict(cfg))
    meta.precision = report.metadata["precision"]
    meta.knn_mode = cfg.knn_mode
    report.write(out)
    meta.finished = _now()
    meta.write(out)
    for c in report.classes:
        print(f"{c.class_id:<12} stability {c.stability_deg:8.3f} deg  consistency {c.consistency_deg:8.2f} deg")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


def cmd_canonicalize(args) -> int:
    model, _ = _load_model(args.checkpoint)
    out = _prepare_out(args.out, args.force)
    rng = np.random.default_rng(args.seed)
    failures, rows = 0, []
    precision = args.precision or model.cfg.precision
    knn_mode = args.knn_mode or model.cfg.knn_mode
    for path in args.inputs:
        path = Path(path)
        try:
            pc = pcm.center(pcm.load(path))
            if args.n:
                pc = pcm.center(pcm.resample(pc, args.n, rng))
            graph = pcm.knn(pc, model.cfg.hypothesizer.k, precision, frozen=knn_mode == "frozen")
            r = model.predict(pc.points, graph=graph, precision=precision)
            canon = pcm.apply_rotation(pc, r.T)
            pcm.save(canon, out / path.name)
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
            continue
        rows.append([path.name] + [f"{x:.12g}" for x in r.reshape(-1)])
        print(f"{path.name}: rotation {np.array2string(r, precision=4, separator=',').replace(chr(10), '')}")
    with (out / "rotations.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file"] + [f"r{i}{j}" for i in range(3) for j in range(3)])
        w.writerows(rows)
    meta = _metadata(args, {"checkpoint": str(args.checkpoint), "n": args.n, "inputs": [str(p) for p in args.inputs]})
    meta.precision, meta.knn_mode = precision, knn_mode
    meta.finished = _now()
    meta.write(out)
    return EXIT_DATA if failures else EXIT_OK


def knn_audit_table(ds: synthetic.Dataset, k: int, n: int | None, trials: int, seed: int,
                    frozen: bool = False) -> tuple[list[dict], list[dict]]:
    """Per-class and per-cloud mean wrong-edge counts for both precisions.

    Both precisions see the same rotations of the same cloud.
    """
    per_cloud = []
    for idx, pc in enumerate(ds.clouds):
        if n and n != len(pc):
            pc = pcm.center(pcm.resample(pc, n, np.random.default_rng([seed, idx, 1])))
        row = {"class_id": pc.class_id, "instance_id": pc.instance_id}
        for precision in ("single", "double"):
            res = pcm.knn_rotation_audit(pc, k, precision, trials, np.random.default_rng([seed, idx]), frozen)
            row[precision] = res.mean
        row["edges"] = len(pc) * k
        per_cloud.append(row)
    per_class = []
    for cls in sorted({r["class_id"] for r in per_cloud}):
        rows = [r for r in per_cloud if r["class_id"] == cls]
        per_class.append({"class_id": cls, "single": float(np.mean([r["single"] for r in rows])),
                          "double": float(np.mean([r["double"] for r in rows])),
                          "clouds": len(rows), "edges": rows[0]["edges"]})
    return per_class, per_cloud


def cmd_knn_audit(args) -> int:
    if args.inputs:
        clouds = []
        for p in args.inputs:
            try:
                clouds.append(pcm.center(pcm.load(p, class_id="files")))
            except (OSError, ValueError) as exc:
                raise DataError(f"cannot read {p}: {exc}") from exc
        ds = synthetic.Dataset(clouds)
    elif args.data:
        ds, _ = _load_corpus(args.data)
    else:
        raise UsageError("knn-audit needs --data or input files")
    per_class, per_cloud = knn_audit_table(ds, args.k, args.n, args.trials, args.seed, args.knn_mode == "frozen")
    out = _prepare_out(args.out, args.force)
    with (out / "knn_audit.csv").open("w", newline="") as fh:
        fh.write(f"# k: {args.k}\n# trials: {args.trials}\n# knn_mode: {args.knn_mode or 'adaptive'}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "single", "double", "clouds", "edges"])
        for r in per_class:
            w.writerow([r["class_id"], f"{r['single']:.3f}", f"{r['double']:.3f}", r["clouds"], r["edges"]])
    with (out / "knn_audit_per_cloud.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "instance_id", "single", "double", "edges"])
        for r in per_cloud:
            w.writerow([r["class_id"], r["instance_id"], f"{r['single']:.3f}", f"{r['double']:.3f}", r["edges"]])
    meta = _metadata(args, {"k": args.k, "n": args.n, "trials": args.trials})
    meta.finished = _now()
    meta.write(out)
    print(f"{'class':<12} {'single':>8} {'double':>8}")
    for r in per_class:
        print(f"{r['class_id']:<12} {r['single']:8.2f} {r['double']:8.2f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    try:
        results = run_suites(args.suite, seed=args.seed)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selfcheck failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_SELFCHECK
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="choir", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None)
        p.add_argument("--out", required=out_required)
        p.add_argument("--force", action="store_true")

    g = sub.add_parser("gen-data", help="write the synthetic corpus")
    common(g)
    g.add_argument("--classes", nargs="+", default=None, help="class count or family names")
    g.add_argument("--instances", type=int, default=64)
    g.add_argument("--n", type=int, default=pcm.DEFAULT_N)
    g.add_argument("--grid", type=float, default=0.0, help="coordinate quantization step")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a predictor from pairs")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["cross-instance", "same-instance", "mixed"], default=None)
    t.add_argument("--no-residual", action="store_true")
    t.add_argument("--knn-mode", dest="knn_mode", choices=["adaptive", "frozen"], default=None)
    t.add_argument("--precision", choices=["single", "double"], default=None)
    t.add_argument("--n", dest="train_points", type=int, default=None, help="points per training cloud")
    t.set_defaults(seed=None)
    for f in fields(TrainConfig):
        if f.name in ("mode", "knn_mode", "precision", "train_points", "seed", "use_residual"):
            continue
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       type=str if f.type in ("bool", bool) else {"int": int, "float": float}.get(f.type, str))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="stability and consistency report")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--K", type=int, default=10)
    e.add_argument("--perturb", default="none")
    e.add_argument("--knn-mode", dest="knn_mode", choices=["adaptive", "frozen"], default=None)
    e.add_argument("--precision", choices=["single", "double"], default=None)
    e.add_argument("--split", choices=["val", "all"], default="val")
    e.add_argument("--n", type=int, default=None, help="resample clouds to n points")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("canonicalize", help="rotate clouds into the learned frame")
    common(c)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--n", type=int, default=None)
    c.add_argument("--knn-mode", dest="knn_mode", choices=["adaptive", "frozen"], default=None)
    c.add_argument("--precision", choices=["single", "double"], default=None)
    c.add_argument("inputs", nargs="+")
    c.set_defaults(func=cmd_canonicalize)

    a = sub.add_parser("knn-audit", help="count kNN edges changed by rotation")
    common(a)
    a.add_argument("--data", default=None)
    a.add_argument("--k", type=int, default=pcm.DEFAULT_K)
    a.add_argument("--n", type=int, default=None)
    a.add_argument("--trials", type=int, default=10)
    a.add_argument("--knn-mode", dest="knn_mode", choices=["adaptive", "frozen"], default="adaptive")
    a.add_argument("inputs", nargs="*")
    a.set_defaults(func=cmd_knn_audit)

    s = sub.add_parser("selfcheck", help="equivariance, invariance, gradcheck and rotation-mean suites")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", default=None)
    s.add_argument("--suite", action="append", choices=list(SUITES), default=None)
    s.set_defaults(func=cmd_selfcheck)
    return parser


def _apply_config_defaults(args) -> None:
    """Config-file keys fill flags that were not given on the command line."""
    if args.command == "train" or not getattr(args, "config", None):
        return  # train merges its config itself
    try:
        values = parse_config_text(Path(args.config).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    given = {a.split("=")[0].lstrip("-").replace("-", "_") for a in args.argv if a.startswith("--")}
    for key, raw in values.items():
        if not hasattr(args, key):
            raise UsageError(f"unknown option {key!r} in {args.config}")
        if key in given:
            continue
        current = getattr(args, key)
        kind = type(current) if current is not None and not isinstance(current, list) else str
        setattr(args, key, kind(raw) if kind is not bool else raw.lower() in ("1", "true", "yes", "on"))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help()
            return EXIT_USAGE
        args.argv = ["choir"] + argv
        _apply_config_defaults(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
