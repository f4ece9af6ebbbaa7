"""Command-line front end: ``generate``, ``train``, ``eval`` and ``sweep``.

Runs are driven by a JSON config with four optional sections::

    {"data": {"synthetic": {...}} or {"data": {"csv": {"files": [...]}}},
     "model": {...TcrnnModel fields...},
     "training": {...TrainConfig fields...},
     "eval": {"train_paths": [...], "test_paths": [...], "zero_history": false},
     "sweep": {"axis": "isv_dim", "values": [1, 3, 5], "repetitions": 1}}

Exit codes: 0 success, 1 numerical failure, 2 I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import NonFiniteError
from .datagen import ElastoPlasticParams, MaterialPath, benchmark_dataset, BENCHMARK_INCREMENTS
from .evaluate import AXES, SweepSpec, evaluate_paths, run_sweep
from .pipeline import (CheckpointError, LossWeights, TrainConfig, TrainingDivergence,
                       load_checkpoint, save_checkpoint, train)
from .thermo import TcrnnModel

MANIFEST = "manifest.json"
SWEEP_COLUMNS = ("axis", "value", "seed", "path_id", "role", "relative_error", "wall_s")


class ConfigError(ValueError):
    """Invalid configuration or input files (exit code 2)."""


# Config -----------------------------------------------------------------------

SECTIONS = ("data", "model", "training", "eval", "sweep")
SYNTHETIC_KEYS = ("params", "cycles", "loading_strain", "unloading_strain", "increments",
                  "train_increment")
CSV_KEYS = ("files", "train", "columns")
EVAL_KEYS = ("train_paths", "test_paths", "zero_history")
SWEEP_KEYS = ("axis", "values", "repetitions")


def _check_keys(section: dict, allowed, where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


def _field_names(cls) -> list[str]:
    return [f.name for f in fields(cls)]


def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    validate_config(cfg)
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, SECTIONS, "config")
    data = cfg.get("data", {})
    _check_keys(data, ("synthetic", "csv"), "data")
    if len(data) > 1:
        raise ConfigError("data section needs exactly one source: synthetic or csv")
    if "synthetic" in data:
        syn = data["synthetic"]
        _check_keys(syn, SYNTHETIC_KEYS, "data.synthetic")
        _check_keys(syn.get("params", {}), _field_names(ElastoPlasticParams),
                    "data.synthetic.params")
    if "csv" in data:
        _check_keys(data["csv"], CSV_KEYS, "data.csv")
        if "files" not in data["csv"]:
            raise ConfigError("data.csv needs a 'files' list")
    model = cfg.get("model", {})
    _check_keys(model, [f for f in _field_names(TcrnnModel) if f not in ("params", "stats")],
                "model")
    training = cfg.get("training", {})
    _check_keys(training, _field_names(TrainConfig), "training")
    _check_keys(training.get("weights", {}), _field_names(LossWeights), "training.weights")
    _check_keys(cfg.get("eval", {}), EVAL_KEYS, "eval")
    _check_keys(cfg.get("sweep", {}), SWEEP_KEYS, "sweep")


def model_from_config(cfg: dict) -> TcrnnModel:
    try:
        return TcrnnModel(**cfg.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model section: {exc}") from exc


def train_config(cfg: dict, seed: Optional[int] = None) -> TrainConfig:
    try:
        tc = TrainConfig(**cfg.get("training", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid training section: {exc}") from exc
    return tc if seed is None else replace(tc, seed=seed)


# CSV paths --------------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_path_csv(path: MaterialPath, filename) -> None:
    d = path.dim
    header = ["t"] + [f"eps_{i}" for i in range(d)] + [f"sig_{i}" for i in range(d)]
    cols = [path.time[:, None], path.strain, path.stress]
    for name, col in (("temp", path.temperature), ("free_energy", path.free_energy),
                      ("dissipation", path.dissipation), ("entropy", path.entropy)):
        if col is not None:
            header.append(name)
            cols.append(col[:, None])
    if path.reference_isv is not None:
        header += [f"isv_{i}" for i in range(path.reference_isv.shape[1])]
        cols.append(path.reference_isv)
    table = np.concatenate(cols, axis=1)
    with open(filename, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in table:
            w.writerow([_fmt(v) for v in row])


def read_path_csv(filename, name: Optional[str] = None,
                  columns: Optional[dict] = None) -> MaterialPath:
    """Read a path CSV; ``columns`` maps canonical names to the file's header names."""
    filename = Path(filename)
    if not filename.is_file():
        raise ConfigError(f"data not found: {filename}")
    rename = {v: k for k, v in (columns or {}).items()}
    with open(filename, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"{filename}: empty file")
    header = [rename.get(h.strip(), h.strip()) for h in rows[0]]
    try:
        data = np.asarray([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ConfigError(f"{filename}: {exc}") from exc
    if data.ndim != 2 or data.shape[1] != len(header):
        raise ConfigError(f"{filename}: rows do not match the header")
    col = {h: data[:, i] for i, h in enumerate(header)}
    for req in ("t", "eps_0", "sig_0"):
        if req not in col:
            raise ConfigError(f"{filename}: missing required column {req!r}")
    d = 0
    while f"eps_{d}" in col:
        d += 1
    for i in range(d):
        if f"sig_{i}" not in col:
            raise ConfigError(f"{filename}: missing required column 'sig_{i}'")
    n_isv = 0
    while f"isv_{n_isv}" in col:
        n_isv += 1
    try:
        return MaterialPath(
            strain=np.stack([col[f"eps_{i}"] for i in range(d)], axis=1),
            stress=np.stack([col[f"sig_{i}"] for i in range(d)], axis=1),
            time=col["t"], temperature=col.get("temp"), free_energy=col.get("free_energy"),
            dissipation=col.get("dissipation"), entropy=col.get("entropy"),
            reference_isv=(np.stack([col[f"isv_{i}"] for i in range(n_isv)], axis=1)
                           if n_isv else None),
            name=name or filename.stem)
    except ValueError as exc:
        raise ConfigError(f"{filename}: {exc}") from exc


def load_dataset(data_dir) -> tuple[list[MaterialPath], list[str]]:
    """Paths and roles listed in a data directory's manifest."""
    data_dir = Path(data_dir)
    manifest = data_dir / MANIFEST
    if not manifest.is_file():
        raise ConfigError(f"data not found: {manifest}")
    try:
        entries = json.loads(manifest.read_text())["paths"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed manifest {manifest}: {exc}") from exc
    paths, roles = [], []
    for e in entries:
        p = read_path_csv(data_dir / e["file"], e.get("name"))
        p.meta.update(e.get("meta", {}))
        paths.append(p)
        roles.append(e.get("role", "train"))
    return paths, roles


def dataset_from_config(cfg: dict, data_dir=None) -> tuple[list[MaterialPath], list[str]]:
    """Dataset from ``--data`` if given, else from the config's CSV globs."""
    if data_dir is not None:
        paths, roles = load_dataset(data_dir)
    else:
        src = cfg.get("data", {}).get("csv")
        if src is None:
            raise ConfigError("no data: pass --data or give a data.csv section")
        base = Path(cfg.get("_base_dir", "."))
        files = []
        for pattern in src["files"]:
            hits = sorted(glob.glob(str(base / pattern)))
            if not hits:
                raise ConfigError(f"data not found: {base / pattern}")
            files.extend(hits)
        paths = [read_path_csv(f, columns=src.get("columns")) for f in files]
        train_names = set(src.get("train", [p.name for p in paths]))
        roles = ["train" if p.name in train_names else "test" for p in paths]
    ev = cfg.get("eval", {})
    if "train_paths" in ev or "test_paths" in ev:
        names = [p.name for p in paths]
        for n in ev.get("train_paths", []) + ev.get("test_paths", []):
            if n not in names:
                raise ConfigError(f"unknown path {n!r} in eval section")
        tr, te = set(ev.get("train_paths", [])), set(ev.get("test_paths", []))
        roles = ["train" if p.name in tr else "test" if p.name in te else "unused"
                 for p in paths]
    return paths, roles


# Commands ---------------------------------------------------------------------

def _out_dir(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_generate(cfg: dict, out) -> list[Path]:
    syn = cfg.get("data", {}).get("synthetic")
    if syn is None:
        raise ConfigError("generate needs a data.synthetic section")
    try:
        params = ElastoPlasticParams(**syn.get("params", {}))
        dataset = benchmark_dataset(params, syn.get("cycles", 2), syn.get("loading_strain", 1e-2),
                                syn.get("unloading_strain", 5e-3),
                                syn.get("increments", BENCHMARK_INCREMENTS))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synthetic data section: {exc}") from exc
    train_inc = syn.get("train_increment", 5e-5)
    out = _out_dir(out)
    written, entries = [], []
    for path in dataset:
        fname = f"{path.name}.csv"
        try:
            write_path_csv(path, out / fname)
        except OSError as exc:
            raise ConfigError(f"cannot write {out / fname}: {exc}") from exc
        inc = path.meta["strain_increment"]
        entries.append({"file": fname, "name": path.name,
                        "role": "train" if np.isclose(inc, train_inc) else "test",
                        "meta": {"strain_increment": inc}})
        written.append(out / fname)
    (out / MANIFEST).write_text(json.dumps({"paths": entries}, indent=1) + "\n")
    return written


def _training_paths(paths, roles):
    chosen = [p for p, r in zip(paths, roles) if r == "train"]
    if not chosen:
        raise ConfigError("no path has the train role")
    return chosen


def cmd_train(cfg: dict, data_dir, out, seed: Optional[int] = None) -> Path:
    paths, roles = dataset_from_config(cfg, data_dir)
    model = model_from_config(cfg)
    config = train_config(cfg, seed)
    out = _out_dir(out)
    model, history = train(model, _training_paths(paths, roles), config)
    ckpt = out / "checkpoint.json"
    save_checkpoint(model, ckpt, config, history[-1])
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history):
            w.writerow([i, _fmt(v)])
    return ckpt


def cmd_eval(cfg: dict, checkpoint, data_dir, out) -> Path:
    try:
        model = load_checkpoint(checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {checkpoint}") from exc
    paths, roles = dataset_from_config(cfg, data_dir)
    keep = [i for i, r in enumerate(roles) if r != "unused"]
    paths, roles = [paths[i] for i in keep], [roles[i] for i in keep]
    for p in paths:
        if p.dim != model.strain_dim:
            raise ConfigError(f"path {p.name} has strain dimension {p.dim}, "
                              f"model expects {model.strain_dim}")
        if (p.temperature is not None) != model.thermal:
            raise ConfigError(f"path {p.name} temperature column does not match the model")
    zero = bool(cfg.get("eval", {}).get("zero_history", False))
    report = evaluate_paths(model, paths, roles, traces=True, zero_history=zero)
    out = _out_dir(out)
    for path, pr in zip(paths, report.paths):
        ro = pr.rollout
        d = path.dim
        header = (["step", "t"] + [f"eps_{i}" for i in range(d)] + [f"sig_{i}" for i in range(d)]
                  + [f"sig_hat_{i}" for i in range(d)] + ["free_energy_hat", "dissipation_hat"]
                  + [f"isv_hat_{k}" for k in range(model.isv_dim)])
        with open(out / f"trace_{path.name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for n in range(len(path)):
                w.writerow([n, _fmt(path.time[n])] + [_fmt(v) for v in path.strain[n]]
                           + [_fmt(v) for v in path.stress[n]] + [_fmt(v) for v in ro.stress[n]]
                           + [_fmt(ro.free_energy[n]), _fmt(ro.dissipation[n])]
                           + [_fmt(v) for v in ro.isv[n]])
    summary = out / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path_id", "role", "relative_error", "teacher_forced_error", "spearman_isv_0"])
        for pr in report.paths:
            rho = pr.spearman[0] if pr.spearman else float("nan")
            w.writerow([pr.name, pr.role, _fmt(pr.relative_error),
                        _fmt(pr.teacher_forced_error), _fmt(rho)])
    return summary


def _read_done(table: Path) -> set[tuple[str, str]]:
    if not table.is_file():
        return set()
    with open(table, newline="") as fh:
        return {(r["value"], r["seed"]) for r in csv.DictReader(fh)}


def cmd_sweep(cfg: dict, data_dir, out, seed: Optional[int] = None) -> Path:
    sw = cfg.get("sweep")
    if not sw:
        raise ConfigError("sweep needs a sweep section")
    if sw.get("axis") not in AXES:
        raise ConfigError(f"sweep axis must be one of {', '.join(AXES)}")
    paths, roles = dataset_from_config(cfg, data_dir)
    try:
        spec = SweepSpec(sw["axis"], list(sw.get("values", [])), sw.get("repetitions", 1),
                         dict(cfg.get("model", {})), train_config(cfg, seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(out)
    table = out / "sweep_results.csv"
    done = _read_done(table)
    fresh = not table.is_file()

    def append(rows):
        nonlocal fresh
        with open(table, "a", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
            if fresh:
                w.writeheader()
                fresh = False
            for r in rows:
                w.writerow({**r, "relative_error": _fmt(r["relative_error"]),
                            "wall_s": _fmt(r["wall_s"])})

    train_ids = [i for i, r in enumerate(roles) if r == "train"]
    test_ids = [i for i, r in enumerate(roles) if r == "test"]
    run_sweep(spec, paths, train_ids, test_ids,
              skip=lambda v, s: (str(v), str(s)) in done, on_rows=append)
    if fresh:  # every cell was skipped or there was nothing to run
        append([])
    return table


# Entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcrnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("generate", "train", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override training.seed")
        if name != "generate":
            p.add_argument("--data", default=None,
                           help="data directory with a manifest (default: config data.csv)")
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "generate":
            for f in cmd_generate(cfg, args.out):
                print(f)
        elif args.command == "train":
            print(cmd_train(cfg, args.data, args.out, args.seed))
        elif args.command == "eval":
            print(cmd_eval(cfg, args.checkpoint, args.data, args.out))
        else:
            print(cmd_sweep(cfg, args.data, args.out, args.seed))
    except (TrainingDivergence, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError, OSError) as exc:
        print(str(exc), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
