"""Command-line driver.

Every command resolves a full parameter bundle (config file, then flags), runs
into ``<out>/<command>-<hash>`` where the hash covers that bundle, and writes a
``manifest.json`` holding the bundle plus SHA-256 digests of every output.
``geossl rerun <manifest>`` repeats a run and compares digests.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import geomprops as gp
from . import pointcloud as pc
from .config import ModelConfig, TrainConfig, from_dict
from .model import ModelParams
from .smallnet import load_params, save_params
from .synthdata import DatasetSpec, dump_json, gen_dataset, load_dataset
from .training import HISTORY_FIELDS, evaluate, input_channels, train

log = logging.getLogger("geossl")

MANIFEST_SCHEMA = 1
OUT_ENV = "GEOSSL_OUT"
SECTIONS = {"dataset": DatasetSpec, "model": ModelConfig, "train": TrainConfig}
PREFIX = {"dataset": "data-", "model": "", "train": ""}
ALIASES = {("train", "lam"): ["--lambda"]}
EXIT_ERROR = 1
EXIT_MISMATCH = 3


class CommandError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# small I/O helpers

def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _num(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(r.get(h, "")) for h in header])
    path.write_text(buf.getvalue())


def write_json(path: Path, doc) -> None:
    path.write_bytes(dump_json(_jsonable(doc)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def spec_hash(spec: dict) -> str:
    return hashlib.sha256(dump_json(_jsonable(spec))).hexdigest()


# --------------------------------------------------------------------------
# flag plumbing: every config field becomes a flag

def _parse_tuple(text: str) -> tuple:
    return tuple(t for t in text.split(",") if t)


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _add_section_flags(p: argparse.ArgumentParser, section: str, skip=()) -> None:
    group = p.add_argument_group(f"{section} options")
    for f in fields(SECTIONS[section]):
        if f.name in skip or f.name == "ranges":
            continue
        flag = "--" + PREFIX[section] + f.name.replace("_", "-")
        names = [flag, *ALIASES.get((section, f.name), [])]
        dest = f"{section}__{f.name}"
        default = f.default
        if isinstance(default, bool):
            group.add_argument(*names, dest=dest, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS)
        elif isinstance(default, tuple) or f.name == "classes":
            group.add_argument(*names, dest=dest, type=_parse_tuple, default=argparse.SUPPRESS,
                               metavar="A,B,...")
        else:
            group.add_argument(*names, dest=dest, type=type(default), default=argparse.SUPPRESS)


def _overrides(args: argparse.Namespace, section: str) -> dict:
    out = {}
    for key, value in vars(args).items():
        if key.startswith(section + "__"):
            name = key.split("__", 1)[1]
            if section == "model" and isinstance(value, tuple):
                value = tuple(int(v) for v in value)
            out[name] = value
    return out


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CommandError(f"cannot read config file {path}: {e}") from e
    if not isinstance(doc, dict):
        raise CommandError("config file must hold a JSON object")
    return doc


def _section(cfg_file: dict, args, name: str) -> dict:
    return {**cfg_file.get(name, {}), **_overrides(args, name)}


def _option(cfg_file: dict, args, name: str, default):
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg_file.get(name, default)


# --------------------------------------------------------------------------
# data

def _resolve_data(cfg_file: dict, args) -> dict:
    """Either a dataset directory (with digests) or an inline dataset spec."""
    data_dir = getattr(args, "data", None) or cfg_file.get("data_dir")
    if data_dir:
        d = Path(data_dir)
        files = {}
        for name in ("train.json", "test.json"):
            if not (d / name).exists():
                raise CommandError(f"dataset directory {d} lacks {name}")
            files[name] = sha256_file(d / name)
        return {"data_dir": str(d.resolve()), "files": files}
    spec = from_dict(DatasetSpec, _section(cfg_file, args, "dataset"))
    return {"dataset": spec.to_dict()}


def _load_data(data: dict, workers: int):
    if "data_dir" in data:
        d = Path(data["data_dir"])
        for name, digest in data["files"].items():
            if sha256_file(d / name) != digest:
                raise CommandError(f"{d / name} does not match the recorded digest")
        return load_dataset(d / "train.json"), load_dataset(d / "test.json")
    train_set, test_set, _ = gen_dataset(from_dict(DatasetSpec, data["dataset"]), workers=workers)
    if test_set is None:
        raise CommandError("this command needs a test split (test_per_class > 0)")
    return train_set, test_set


# --------------------------------------------------------------------------
# commands. Each takes (spec, run_dir, workers) and writes its outputs.

def run_gen(spec, run_dir: Path, workers: int) -> dict:
    ds = from_dict(DatasetSpec, spec["dataset"])
    _, _, manifest = gen_dataset(ds, run_dir, workers=workers)
    (run_dir / "manifest.json").unlink()
    return {"dataset_manifest": manifest}


def run_props(spec, run_dir: Path, workers: int) -> dict:
    src = Path(spec["input"])
    if sha256_file(src) != spec["input_sha256"]:
        raise CommandError(f"{src} does not match the recorded digest")
    if src.suffix.lower() == ".off":
        cloud = pc.sample_surface(pc.load_off(src), spec["points"], spec["seed"])
        pc.write_xyz(cloud, run_dir / "points.xyz")
    else:
        cloud = pc.read_xyz(src)
    props = gp.compute_props(cloud, spec["k"], curvature_kind=spec["curvature"],
                             orientation=spec["orientation"])
    write_json(run_dir / "props.json", {"schema_version": 1, "kind": "geometric_properties",
                                        "k": spec["k"], **props.to_json()})
    gp.write_props_csv(props, run_dir / "props.csv")
    return {"num_points": len(props), "num_degenerate": int(props.degenerate.sum())}


def _write_predictions(path: Path, ds, preds: dict) -> None:
    doc = {"schema_version": 1, "kind": "predictions",
           "class_labels": ds.class_labels, "class_names": list(ds.class_names)}
    if "class" in preds:
        doc["predicted_class"] = preds["class"]
    if "parts" in preds:
        doc["part_labels"] = ds.part_labels
        doc["predicted_parts"] = preds["parts"]
    if "normals" in preds:
        doc["predicted_normals"] = preds["normals"]
    write_json(path, doc)


def _report_source(test_set) -> str | None:
    for src in ("geopl", "geossl"):
        if src in test_set.labels:
            return src
    return None


def run_train(spec, run_dir: Path, workers: int) -> dict:
    train_set, test_set = _load_data(spec["data"], workers)
    cfg = from_dict(ModelConfig, spec["model"])
    tcfg = from_dict(TrainConfig, spec["train"])
    props = spec["input_props"]
    params, history = train(train_set, cfg, tcfg, input_props=props)
    save_params(params.named(), run_dir / "checkpoint.json",
                {"kind": "checkpoint", "model": cfg.to_dict(), "train": tcfg.to_dict(),
                 "input_props": props})
    write_csv(run_dir / "history.csv", list(HISTORY_FIELDS),
              [{k: ("" if isinstance(v, float) and np.isnan(v) else v) for k, v in h.items()}
               for h in history])
    report, preds = evaluate(params, test_set, cfg, _report_source(test_set), props,
                             return_predictions=True)
    write_json(run_dir / "report.json", report.to_json())
    _write_predictions(run_dir / "predictions.json", test_set, preds)
    return {"final_total_loss": history[-1]["total"], "overall_accuracy": report.overall_accuracy}


def run_eval(spec, run_dir: Path, workers: int) -> dict:
    ckpt = Path(spec["checkpoint"])
    if sha256_file(ckpt) != spec["checkpoint_sha256"]:
        raise CommandError(f"{ckpt} does not match the recorded digest")
    arrays, meta = load_params(ckpt)
    cfg = from_dict(ModelConfig, meta["model"])
    params = ModelParams.from_arrays(arrays)
    _, test_set = _load_data(spec["data"], workers)
    report, preds = evaluate(params, test_set, cfg, _report_source(test_set),
                             meta.get("input_props", ""), return_predictions=True)
    write_json(run_dir / "report.json", report.to_json())
    _write_predictions(run_dir / "predictions.json", test_set, preds)
    return {"overall_accuracy": report.overall_accuracy}


def _mean_of(summary: list[dict], **match) -> float | None:
    for row in summary:
        if all(row.get(k) == v for k, v in match.items()):
            return row["mean"]
    return None


def run_ablate(spec, run_dir: Path, workers: int) -> dict:
    train_set, test_set = _load_data(spec["data"], workers)
    cfg = from_dict(ModelConfig, spec["model"])
    tcfg = from_dict(TrainConfig, spec["train"])
    rows = ex.ablate_properties(train_set, test_set, cfg, tcfg, spec["seeds"], workers)
    write_csv(run_dir / "ablation.csv", ["properties", "mode", "seed", "oa", "ma"], rows)
    summary = ex.summarize(rows, ("properties", "mode"), "oa")
    base = _mean_of(summary, properties="P", mode="input")
    full = _mean_of(summary, properties="P+n+u", mode="supervision")
    trends = {"pnu_supervision_ge_p": full >= base}
    write_json(run_dir / "summary.json", {"schema_version": 1, "kind": "ablation_summary",
                                          "metric": "oa", "cells": summary, "trends": trends})
    return trends


def run_sweep(spec, run_dir: Path, workers: int) -> dict:
    train_set, test_set = _load_data(spec["data"], workers)
    cfg = from_dict(ModelConfig, spec["model"])
    tcfg = from_dict(TrainConfig, spec["train"])
    rows = ex.sweep_lambda(train_set, test_set, cfg, tcfg, spec["lambdas"], spec["seeds"], workers)
    write_csv(run_dir / "sweep.csv", ["lambda", "seed", "oa", "ma"], rows)
    summary = ex.summarize(rows, ("lambda",), "oa")
    trends = {}
    hi, mid = _mean_of(summary, **{"lambda": 1.0}), _mean_of(summary, **{"lambda": 1e-2})
    if hi is not None and mid is not None:
        trends["lambda_1_below_lambda_1e-2"] = hi < mid
    write_json(run_dir / "summary.json", {"schema_version": 1, "kind": "sweep_summary",
                                          "metric": "oa", "cells": summary, "trends": trends})
    return trends


def run_noise(spec, run_dir: Path, workers: int) -> dict:
    train_set, test_set = _load_data(spec["data"], workers)
    cfg = from_dict(ModelConfig, spec["model"])
    tcfg = from_dict(TrainConfig, spec["train"])
    rep = ex.noise_robustness(train_set, test_set, cfg, tcfg, spec["sigma"], spec["seeds"],
                              spec["k"], spec["label_source"], spec["gt_source"], workers)
    cd = rep["cosine_distance"]
    rep["trends"] = {"learned_below_pca_none": cd["learned"] < cd["pca_none"],
                     "learned_below_pca_outward": cd["learned"] < cd["pca_outward"]}
    write_json(run_dir / "noise.json", {"schema_version": 1, "kind": "noise_report", **rep})
    write_csv(run_dir / "noise.csv", ["seed", "sigma", "pca_outward", "pca_none", "learned"],
              rep["runs"])
    return {"cosine_distance": cd, **rep["trends"]}


def run_probe(spec, run_dir: Path, workers: int) -> dict:
    train_set, test_set = _load_data(spec["data"], workers)
    cfg = from_dict(ModelConfig, spec["model"])
    tcfg = from_dict(TrainConfig, spec["train"])
    rows = ex.probe(train_set, test_set, cfg, tcfg, spec["seeds"], spec["label_source"], workers)
    write_csv(run_dir / "probe.csv", ["variant", "seed", "cosine_similarity"], rows)
    summary = ex.summarize(rows, ("variant",), "cosine_similarity")
    scratch = _mean_of(summary, variant="scratch")
    trends = {"frozen_below_scratch": _mean_of(summary, variant="frozen") < scratch,
              "geossl_within_0.01_of_scratch": _mean_of(summary, variant="geossl") >= scratch - 0.01}
    write_json(run_dir / "summary.json", {"schema_version": 1, "kind": "probe_summary",
                                          "metric": "cosine_similarity", "cells": summary,
                                          "trends": trends})
    return trends


RUNNERS = {"gen": run_gen, "props": run_props, "train": run_train, "eval": run_eval,
           "ablate-props": run_ablate, "sweep-lambda": run_sweep, "noise": run_noise,
           "probe": run_probe}


# --------------------------------------------------------------------------
# spec resolution

def resolve(args, cfg_file: dict) -> dict:
    cmd = args.command
    spec: dict = {"command": cmd}
    if cmd == "gen":
        spec["dataset"] = from_dict(DatasetSpec, _section(cfg_file, args, "dataset")).to_dict()
        return spec
    if cmd == "props":
        src = Path(args.input)
        if not src.exists():
            raise CommandError(f"no such input file: {src}")
        if src.suffix.lower() not in (".off", ".xyz"):
            raise CommandError("input must be an .off mesh or an .xyz point file")
        spec.update(input=str(src.resolve()), input_sha256=sha256_file(src),
                    k=_option(cfg_file, args, "k", gp.DEFAULT_K),
                    points=_option(cfg_file, args, "points", 1024),
                    seed=_option(cfg_file, args, "seed", 0),
                    orientation=_option(cfg_file, args, "orientation", "outward"),
                    curvature=_option(cfg_file, args, "curvature", "eigen"))
        return spec
    spec["data"] = _resolve_data(cfg_file, args)
    if cmd == "eval":
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise CommandError(f"no such checkpoint: {ckpt}")
        spec.update(checkpoint=str(ckpt.resolve()), checkpoint_sha256=sha256_file(ckpt))
        return spec
    classes = (spec["data"]["dataset"]["classes"] if "dataset" in spec["data"]
               else json.loads((Path(spec["data"]["data_dir"]) / "train.json").read_text())
               ["class_names"])
    model_over = _section(cfg_file, args, "model")
    model_over.setdefault("num_classes", len(classes))
    if cmd == "train":
        spec["input_props"] = _option(cfg_file, args, "input_props", "")
        model_over.setdefault("in_channels", input_channels(spec["input_props"]))
    spec["model"] = from_dict(ModelConfig, model_over).to_dict()
    spec["train"] = from_dict(TrainConfig, _section(cfg_file, args, "train")).to_dict()
    if cmd in ("ablate-props", "sweep-lambda", "noise", "probe"):
        spec["seeds"] = list(_option(cfg_file, args, "seeds", [0]))
    if cmd == "sweep-lambda":
        spec["lambdas"] = list(_option(cfg_file, args, "lambdas", list(ex.LAMBDA_GRID)))
    if cmd == "noise":
        spec.update(sigma=_option(cfg_file, args, "sigma", 0.01),
                    k=_option(cfg_file, args, "k", gp.DEFAULT_K),
                    label_source=_option(cfg_file, args, "label_source", "geopl"),
                    gt_source=_option(cfg_file, args, "gt_source", "geopl"))
    if cmd == "probe":
        spec["label_source"] = _option(cfg_file, args, "label_source", "geopl")
    return spec


def execute(spec: dict, run_dir: Path, workers: int = 1) -> dict:
    """Run ``spec`` into ``run_dir`` and write its manifest. Returns the manifest."""
    run_dir.mkdir(parents=True, exist_ok=True)
    for stale in ("manifest.json", "error.json"):
        (run_dir / stale).unlink(missing_ok=True)
    result = RUNNERS[spec["command"]](spec, run_dir, workers)
    outputs = {p.name: sha256_file(p) for p in sorted(run_dir.iterdir())
               if p.is_file() and p.name not in ("manifest.json", "error.json")}
    manifest = {"schema_version": MANIFEST_SCHEMA, "kind": "run_manifest",
                "command": spec["command"], "spec": spec, "spec_sha256": spec_hash(spec),
                "outputs": outputs, "result": result}
    write_json(run_dir / "manifest.json", manifest)
    return _jsonable(manifest)


def rerun(manifest_path: Path, run_dir: Path | None, workers: int) -> tuple[bool, dict]:
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    old = json.loads(manifest_path.read_text())
    if old.get("kind") != "run_manifest":
        raise CommandError(f"{manifest_path} is not a run manifest")
    target = run_dir or Path(tempfile.mkdtemp(prefix="geossl-rerun-"))
    new = execute(old["spec"], target, workers)
    names = sorted(set(old["outputs"]) | set(new["outputs"]))
    differing = [n for n in names if old["outputs"].get(n) != new["outputs"].get(n)]
    return not differing, {"schema_version": 1, "kind": "rerun_check", "run_dir": str(target),
                           "identical": not differing, "differing_outputs": differing}


def report(path: Path, by: list[str], value: str) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CommandError(f"{path} has no data rows")
    missing = [c for c in [*by, value] if c not in rows[0]]
    if missing:
        raise CommandError(f"{path} lacks columns {missing}")
    for r in rows:
        r[value] = float(r[value])
    return {"schema_version": 1, "kind": "aggregate", "source": path.name, "by": by,
            "value": value, "groups": ex.summarize(rows, tuple(by), value)}


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geossl", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def run_parser(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file with dataset/model/train sections; flags win")
        sp.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
        sp.add_argument("--run-dir", help="exact output directory, overriding the hashed name")
        sp.add_argument("--workers", type=int, default=1)
        return sp

    def data_opts(sp):
        sp.add_argument("--data", help="dataset directory written by `geossl gen`")
        _add_section_flags(sp, "dataset")

    def net_opts(sp, train_skip=()):
        data_opts(sp)
        _add_section_flags(sp, "model")
        _add_section_flags(sp, "train", train_skip)

    g = run_parser("gen", "generate a synthetic dataset")
    _add_section_flags(g, "dataset")

    pr = run_parser("props", "estimate normals and curvature for one cloud")
    pr.add_argument("input", help=".xyz point file or .off mesh")
    pr.add_argument("--k", type=int)
    pr.add_argument("--points", type=int, help="samples drawn from an .off mesh")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--orientation", choices=gp.ORIENTATIONS)
    pr.add_argument("--curvature", choices=gp.CURVATURE_KINDS)

    t = run_parser("train", "train one network and score it on the test split")
    net_opts(t)
    t.add_argument("--input-props", choices=("", "n", "u", "nu"))

    e = run_parser("eval", "score a checkpoint on a test split")
    data_opts(e)
    e.add_argument("--checkpoint", required=True)

    for name, help_ in (("ablate-props", "properties as input versus as supervision"),
                        ("sweep-lambda", "accuracy across loss weights"),
                        ("noise", "PCA versus learned normals on noisy clouds"),
                        ("probe", "normal estimation from three encoders")):
        sp = run_parser(name, help_)
        net_opts(sp, train_skip=("seed",))
        sp.add_argument("--seeds", type=_int_list)
        if name == "sweep-lambda":
            sp.add_argument("--lambdas", type=_float_list)
        if name == "noise":
            sp.add_argument("--sigma", type=float)
            sp.add_argument("--k", type=int)
            sp.add_argument("--gt-source", dest="gt_source")
            sp.add_argument("--label-source", dest="label_source")
        if name == "probe":
            sp.add_argument("--label-source", dest="label_source")

    rp = sub.add_parser("report", help="aggregate a result CSV into mean and std per group")
    rp.add_argument("csv")
    rp.add_argument("--by", type=_parse_tuple, required=True)
    rp.add_argument("--value", required=True)
    rp.add_argument("--output")

    rr = sub.add_parser("rerun", help="repeat a run from its manifest and compare outputs")
    rr.add_argument("manifest", help="manifest.json or the run directory holding it")
    rr.add_argument("--run-dir")
    rr.add_argument("--workers", type=int, default=1)
    return p


def _error_doc(cmd: str, exc: BaseException) -> dict:
    return {"schema_version": 1, "kind": "error", "command": cmd,
            "error_type": type(exc).__name__, "message": str(exc)}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    cmd = args.command
    run_dir = None
    try:
        if cmd == "report":
            doc = report(Path(args.csv), list(args.by), args.value)
            text = dump_json(doc).decode()
            if args.output:
                Path(args.output).write_text(text)
            sys.stdout.write(text)
            return 0
        if cmd == "rerun":
            ok, doc = rerun(Path(args.manifest), Path(args.run_dir) if args.run_dir else None,
                            args.workers)
            sys.stdout.write(dump_json(doc).decode())
            return 0 if ok else EXIT_MISMATCH
        cfg_file = _load_config(args.config)
        spec = resolve(args, cfg_file)
        root = Path(args.out or os.environ.get(OUT_ENV) or "runs")
        run_dir = Path(args.run_dir) if args.run_dir else root / f"{cmd}-{spec_hash(spec)[:12]}"
        manifest = execute(spec, run_dir, args.workers)
        sys.stdout.write(dump_json({"run_dir": str(run_dir), "result": manifest["result"]}).decode())
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error document
        log.debug("command failed", exc_info=True)
        doc = _error_doc(cmd, exc)
        if run_dir is not None and run_dir.is_dir():
            write_json(run_dir / "error.json", doc)
        sys.stderr.write(dump_json(doc).decode())
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
