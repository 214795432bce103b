"""Command line: ``ddprm simulate | fit | summarize | compare``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis
from .archive import PosteriorArchive
from .comparison import (PredictionTable, compare, d_criterion, import_external_predictions,
                         write_report)
from .data import RatingDataset, read_ratings
from .model import DDPRMError
from .priors import HyperParams
from .sampler import MIXTURES, ChainConfig, run_chain
from .simulate import designated_items, generate, dif_sim_config

OUTPUT_ENV = "DDPRM_OUTPUT_DIR"
PRESETS = ("dif-sim", "verbal-aggression")

_SIM_KEYS = {"examinees", "items", "seed", "ability_var", "dif_tau1", "dif_tau2"}
_DATA_KEYS = {"path", "mixed_items", "design"}
_CHAIN_KEYS = {"mixture", "iterations", "burn_in", "thin", "seed", "chains",
               "allocation_target", "progress_every", "checkpoint_every"}
_PRIOR_KEYS = {f.name for f in dataclasses.fields(HyperParams)} - {"mixed_items", "tau_cov"}
_SECTIONS = {"sim": _SIM_KEYS, "data": _DATA_KEYS, "chain": _CHAIN_KEYS, "prior": _PRIOR_KEYS,
             "output": {"dir"}}


class CLIError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------- config
def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(t) for t in text.split(",")]
    if text.lower() in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in _SECTIONS or name not in _SECTIONS[section]:
            raise CLIError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(value)
    return out


def load_config(path: Optional[str], preset: Optional[str]) -> dict:
    cfg = {}
    if preset:
        if preset not in PRESETS:
            raise CLIError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        text = resources.files("ddprm").joinpath(f"presets/{preset}.cfg").read_text()
        cfg.update(parse_config(text, preset))
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CLIError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config(text, path))
    return cfg


def hyper_from_config(cfg: dict, n_items: int) -> HyperParams:
    kwargs = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("prior.")}
    mixed = cfg.get("data.mixed_items", "all")
    if mixed == "designated":
        mixed = designated_items(n_items)
    elif mixed in ("all", None):
        mixed = None
    elif isinstance(mixed, int):
        mixed = (mixed,)
    kwargs["mixed_items"] = None if mixed is None else tuple(int(j) for j in mixed)
    try:
        return HyperParams(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid prior settings: {exc}") from None


def _output_dir(arg: Optional[str], cfg: dict) -> Path:
    out = arg or cfg.get("output.dir") or os.environ.get(OUTPUT_ENV)
    if not out:
        raise CLIError(f"no output directory (use --out or set {OUTPUT_ENV})", 2)
    out = Path(out)
    if not out.is_dir():
        raise CLIError(f"output directory {out} does not exist", 2)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------- commands
def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.preset)
    out = _output_dir(args.out, cfg)
    for flag, key in (("examinees", "sim.examinees"), ("items", "sim.items"), ("seed", "sim.seed")):
        if getattr(args, flag) is not None:
            cfg[key] = getattr(args, flag)
    try:
        sim = dif_sim_config(
            n_examinees=int(cfg.get("sim.examinees", 3000)), n_items=int(cfg.get("sim.items", 10)),
            seed=int(cfg.get("sim.seed", 0)), ability_var=float(cfg.get("sim.ability_var", 2.25)),
            dif_tau1=float(cfg.get("sim.dif_tau1", -1.25)),
            dif_tau2=tuple(cfg.get("sim.dif_tau2", (0.0, 2.0))))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid simulation settings: {exc}") from None
    data, truth = generate(sim)
    data_path, truth_path = out / "data.csv", out / "truth.json"
    data.to_csv(data_path)
    truth.to_json(truth_path)
    print(data_path)
    print(truth_path)
    return 0


def _chain_job(job):
    data, hyper, config, mixture = job
    return run_chain(data, hyper, config, mixture=mixture)


def _write_fit_outputs(archive: PosteriorArchive, out: Path, floor: float) -> None:
    archive.save(out / "archive.npz")
    doc = analysis.summary_document(archive, floor)
    table = PredictionTable.from_archive(archive, archive.mixture)
    crit = d_criterion(table)
    doc["criterion"] = {"D": crit.D, "GF": crit.GF, "Pen": crit.Pen, "mcci": table.mcci()}
    _write_json(out / "summary.json", doc)
    _write_json(out / "modes.json", [{k: r[k] for k in ("item", "threshold", "modes")}
                                     for r in doc["thresholds"] if r["mixed"]])
    table.to_csv(out / "predictions.csv")
    selectors = ["sigma2", "alpha", "loglik", "d"]
    selectors += [f"gamma[{k + 1}]" for k in range(archive.gamma.shape[1])]
    selectors += [f"psi[{g + 1}]" for g in range(archive.psi.shape[1])]
    selectors += [f"tau[{j + 1},{l + 1}]" for j in range(archive.item_max.size)
                  for l in range(int(archive.item_max[j]))]
    analysis.export_traces(archive, selectors, out / "traces.csv")
    for j in np.flatnonzero(archive.item_mixed):
        for l in range(int(archive.item_max[j])):
            dens = analysis.mixing_density(archive, item=j + 1, threshold=l + 1, floor=floor)
            dens.to_csv(out / f"density-item{j + 1}-tau{l + 1}.csv")


def cmd_fit(args) -> int:
    cfg = load_config(args.config, args.preset)
    out = _output_dir(args.out, cfg)
    data_path = args.data or cfg.get("data.path")
    if not data_path:
        raise CLIError("no data file (use --data or data.path)")
    try:
        data = read_ratings(data_path)
    except OSError as exc:
        raise CLIError(f"cannot read data {data_path}: {exc}") from None
    design = args.design or cfg.get("data.design", "dummy-items")
    if design == "dummy-items":
        data = RatingDataset(data.examinee, data.item, data.rating, data.item_max)
    elif design != "columns" or data.covariates is None:
        raise CLIError("covariate design 'columns' needs x1..xp columns in the data file")
    if args.mixed_items:
        cfg["data.mixed_items"] = [int(j) for j in args.mixed_items.split(",")]
    hyper = hyper_from_config(cfg, data.J)
    overrides = {"iterations": args.iterations, "burn_in": args.burnin, "thin": args.thin,
                 "seed": args.seed, "mixture": args.mixture, "chains": args.chains}
    for key, value in overrides.items():
        if value is not None:
            cfg[f"chain.{key}"] = value
    mixture = cfg.get("chain.mixture", "local")
    chains = int(cfg.get("chain.chains", 1))
    if chains < 1:
        raise CLIError("--chains must be positive")
    configs = []
    for k in range(chains):
        configs.append(ChainConfig(
            iterations=int(cfg.get("chain.iterations", 2000)),
            burn_in=int(cfg.get("chain.burn_in", 1000)), thin=int(cfg.get("chain.thin", 1)),
            seed=int(cfg.get("chain.seed", 0)), chain_id=k,
            allocation_target=cfg.get("chain.allocation_target", "local"),
            progress_every=int(cfg.get("chain.progress_every", 0) or 0)))
    jobs = [(data, hyper, c, mixture) for c in configs]
    if chains == 1:
        archives = [_chain_job(jobs[0])]
    else:
        with ProcessPoolExecutor(max_workers=min(chains, os.cpu_count() or 1)) as pool:
            archives = list(pool.map(_chain_job, jobs))
    for k, archive in enumerate(archives):
        target = out if chains == 1 else out / f"chain{k + 1}"
        target.mkdir(exist_ok=True)
        _write_fit_outputs(archive, target, args.floor)
        print(target / "archive.npz")
    return 0


def _report_path(arg: str, default_name: str) -> Path:
    """``--out`` may name a file or an existing directory."""
    path = Path(arg)
    if path.is_dir():
        return path / default_name
    if not path.parent.is_dir():
        raise CLIError(f"output directory {path.parent} does not exist", 2)
    return path


def cmd_summarize(args) -> int:
    archive = PosteriorArchive.load(args.archive)
    if args.selector:
        doc = {s: analysis.summarize(archive, s) for s in args.selector}
    else:
        doc = analysis.summary_document(archive, args.floor)
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if args.out:
        path = _report_path(args.out, "summary.json")
        path.write_text(text)
        print(path)
    else:
        sys.stdout.write(text)
    return 0


def _load_table(spec: str) -> PredictionTable:
    label, sep, path = spec.partition("=")
    if not sep:
        label, path = None, spec
    if path.endswith(".npz"):
        archive = PosteriorArchive.load(path)
        return PredictionTable.from_archive(archive, label or archive.mixture)
    return import_external_predictions(path, label)


def cmd_compare(args) -> int:
    tables = [_load_table(spec) for spec in args.inputs]
    rows = compare(tables)
    for r in rows:
        mcci = "" if r["mcci"] is None else f" +/- {r['mcci']:.3f}"
        print(f"{r['model']:<20} D={r['D']:.3f}{mcci} GF={r['GF']:.3f} Pen={r['Pen']:.3f}")
    if args.out:
        print(write_report(rows, _report_path(args.out, "comparison.json")))
    return 0


# ----------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddprm", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log sampler progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a cluster-structured rating dataset")
    p.add_argument("--config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--seed", type=int)
    p.add_argument("--examinees", type=int)
    p.add_argument("--items", type=int)
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV})")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="run the sampler and write archive and summaries")
    p.add_argument("--data")
    p.add_argument("--config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--design", choices=("dummy-items", "columns"), default=None,
                   help="use item dummies or the data file's x columns as covariates")
    p.add_argument("--mixed-items", help="comma-separated 1-based items with mixed thresholds")
    p.add_argument("--mixture", choices=MIXTURES)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burnin", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--floor", type=float, default=analysis.MODE_FLOOR,
                   help="mode height floor as a fraction of the density maximum")
    p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV})")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="summaries of a saved archive")
    p.add_argument("archive")
    p.add_argument("--selector", action="append", help="e.g. sigma2, theta[3], tau[5,2]")
    p.add_argument("--floor", type=float, default=analysis.MODE_FLOOR)
    p.add_argument("--out", help="JSON file, or a directory to hold summary.json (default stdout)")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("compare", help="posterior predictive loss of several models")
    p.add_argument("inputs", nargs="+", help="archive .npz or prediction CSV, optionally label=path")
    p.add_argument("--out", help="JSON report file, or a directory to hold comparison.json")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"ddprm: error: {exc}", file=sys.stderr)
        return exc.code
    except (DDPRMError, ValueError, KeyError, OSError) as exc:
        print(f"ddprm: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
