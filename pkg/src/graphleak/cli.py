"""Command-line entry point.

    graphleak {train|attack|audit|grid|gen-sbm|plane} --config FILE
              [--dataset DIR] [--model FILE] [--out DIR] [--seed N]

Exit status: 0 on success, 2 for configuration or input errors, 1 for
failures during a run.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attack import AttackConfigError, build_prior, run_attack
from .config import ConfigError, ExperimentConfig, load_config, parse_config, set_path
from .defense import DefenseConfigError, baseline_dp_sgd, train_defended
from .evaluate import AuditError, audit_adjacency, audit_auc, ensemble_attack, plane_points, plane_rows
from .gnn import GnnModel, ModelFileError, default_model, load_model, predict, save_model, train_standard
from .graph import Graph, IngestionError, generate_sbm, load_dataset, save_dataset
from .report import ExperimentReport, run_id, write_csv
from .rng import RngStream

COMMANDS = ("train", "attack", "audit", "grid", "gen-sbm", "plane")
AUDIT_COLUMNS = ["variable", "auc", "auc_homo", "auc_hetero", "n_pos", "n_neg"]
PLANE_COLUMNS = ["epoch", "layer", "privacy", "utility"]


class UsageProblem(Exception):
    """A missing input that the user must supply; maps to exit status 2."""


INPUT_ERRORS = (ConfigError, UsageProblem, IngestionError, ModelFileError, AttackConfigError, DefenseConfigError, AuditError)


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _dataset(cfg: ExperimentConfig) -> Graph:
    if not cfg.dataset:
        raise UsageProblem("no dataset given (set 'dataset' in the config or pass --dataset)")
    if not Path(cfg.dataset).is_dir():
        raise UsageProblem(f"dataset directory {cfg.dataset} does not exist")
    return load_dataset(cfg.dataset, tuple(cfg.split), cfg.seed)


def _model(cfg: ExperimentConfig, path) -> GnnModel:
    if path is None:
        raise UsageProblem("this command needs a trained model (--model)")
    if not Path(path).is_file():
        raise UsageProblem(f"model file {path} does not exist")
    return load_model(path)


def _out(path) -> Path:
    out = Path(path or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(report: ExperimentReport, cfg: ExperimentConfig, out: Path) -> None:
    report.config = cfg.echo()
    report.run_id = run_id(report.config, cfg.seed)
    report.write_json(out / "report.json")


def write_triu_csv(a: np.ndarray, path) -> None:
    """Row i holds the entries a[i, i+1:]; the last node has an empty row."""
    n = a.shape[0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# upper triangle of a {n}x{n} matrix, row i lists columns i+1..{n - 1}\n")
        for i in range(n):
            fh.write(",".join("%.9g" % v for v in a[i, i + 1 :]) + "\n")


def read_triu_csv(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = [ln for ln in lines if not ln.startswith("#")]
    n = len(rows)
    a = np.zeros((n, n))
    for i, ln in enumerate(rows):
        if ln:
            a[i, i + 1 :] = np.array(ln.split(","), dtype=float)
    return a + a.T


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def train_model(cfg: ExperimentConfig, g: Graph, plane_every: int | None = None):
    """Train per the config; returns (model, report, plane rows)."""
    rng = RngStream(cfg.seed)
    m = cfg.model
    model = default_model(m.arch, g, m.hidden, m.layers, rng, m.activation)
    points: list = []

    def hook(epoch, trace):
        if plane_every and (epoch % plane_every == 0 or epoch == cfg.train.epochs):
            points.extend(plane_points(epoch, trace.hidden, trace.logits, g))

    d = cfg.defense
    if d.kind == "mcgpb":
        dcfg = d.config
        model, report = train_defended(model, g, dcfg, rng, on_epoch=hook)
    elif d.kind == "dp_sgd":
        model, report = baseline_dp_sgd(model, g, d.clip, d.sigma, rng, cfg.train)
    else:
        # output noise only perturbs queries; the weights train normally
        model, report = train_standard(model, g, cfg.train, rng, on_epoch=hook)
    if d.kind == "dp_sgd" and plane_every:
        # the DP baseline has no hook; record the final point only
        trace = predict(model, g)
        points.extend(plane_points(cfg.train.epochs, trace.hidden, trace.logits, g))
    return model, report, plane_rows(points)


def cmd_train(cfg: ExperimentConfig, model_path=None, out=None, plane_every: int | None = None) -> dict:
    g = _dataset(cfg)
    out = _out(out or cfg.out)
    model, report, plane = train_model(cfg, g, plane_every or cfg.plane.every)
    save_model(model, out / "model.json")
    write_csv(out / "trace.csv", report.rows)
    write_csv(out / "plane.csv", plane, PLANE_COLUMNS)
    if cfg.defense.kind == "output_noise":
        report.summary["output_noise_sigma"] = cfg.defense.sigma
    _finish(report, cfg, out)
    return report.summary


def _noisy_prior(prior, cfg: ExperimentConfig):
    d = cfg.defense
    if d.kind == "output_noise" and d.sigma > 0 and prior.y_logits is not None:
        gen = RngStream(cfg.seed).stream("noise")
        prior.y_logits = prior.y_logits + gen.normal(scale=d.sigma, size=prior.y_logits.shape)
    return prior


def cmd_attack(cfg: ExperimentConfig, model_path=None, out=None) -> dict:
    g = _dataset(cfg)
    out = _out(out or cfg.out)
    sec = cfg.attack
    acfg = sec.config
    needs_model = acfg.mode != "basic" or any(k in sec.knowledge for k in ("H", "Yhat"))
    if needs_model and model_path is None:
        missing = [k for k in sec.knowledge if k in ("H", "Yhat")]
        what = f"knowledge element(s) {missing} are unavailable" if missing else f"{acfg.mode} mode needs the target"
        raise UsageProblem(f"{what} without a model (--model)")
    target = _model(cfg, model_path) if needs_model else None
    if "X" in sec.knowledge and g.features is None:
        raise UsageProblem("knowledge element X is unavailable: the dataset has no features")
    if target is not None:
        prior = build_prior(target, g, sec.knowledge, sec.h_layers)
    else:
        from .attack import PriorKnowledge

        prior = PriorKnowledge(
            features=g.x if "X" in sec.knowledge else None,
            y_labels=g.labels.copy() if "Y" in sec.knowledge else None,
            num_classes=g.num_classes,
        )
    prior = _noisy_prior(prior, cfg)
    a_hat, report = run_attack(target, g, prior, acfg, RngStream(cfg.seed))
    result = audit_adjacency(a_hat, g, "A_hat", cfg.audit.sampling)
    rows = [result.row()]
    if not prior.is_empty():
        rows.append(ensemble_attack(prior, g, cfg.audit.sampling).row())
    write_triu_csv(a_hat, out / "a_hat.csv")
    write_csv(out / "trace.csv", report.rows)
    write_csv(out / "audit.csv", rows, AUDIT_COLUMNS)
    report.summary.update(auc=result.auc, auc_homo=result.auc_homogeneous, auc_hetero=result.auc_heterogeneous)
    if len(rows) > 1:
        report.summary["ensemble_auc"] = rows[1]["auc"]
    _finish(report, cfg, out)
    return report.summary


def cmd_audit(cfg: ExperimentConfig, model_path=None, out=None) -> dict:
    g = _dataset(cfg)
    out = _out(out or cfg.out)
    wanted = cfg.audit.variables
    model_vars = [v for v in wanted if v == "Yhat" or v.startswith("H")]
    if model_vars and model_path is None:
        raise UsageProblem(f"variables {model_vars} need a model (--model)")
    trace = None
    if model_vars:
        target = _model(cfg, model_path)
        trace = predict(target, g)
    elements: dict[str, np.ndarray] = {}
    for v in wanted:
        if v == "X":
            if g.features is None:
                raise UsageProblem("variable X is unavailable: the dataset has no features")
            elements[v] = g.x
        elif v == "Y":
            elements[v] = np.eye(g.num_classes)[g.labels]
        elif v == "Yhat":
            elements[v] = trace.logits.value
        elif v.startswith("H"):
            idx = int(v[1:]) if len(v) > 1 else len(trace.hidden)
            if not 1 <= idx <= len(trace.hidden):
                raise ConfigError("audit.variables", f"{v}: model has {len(trace.hidden)} hidden layers")
            elements[v] = trace.hidden[idx - 1].value
        else:
            raise ConfigError("audit.variables", f"unknown variable {v!r} (use X, Y, H, H<i>, Yhat)")
    rows = [audit_auc(z, g, name, cfg.audit.sampling).row() for name, z in elements.items()]
    if len(elements) > 1:
        rows.append(ensemble_attack(elements, g, cfg.audit.sampling).row())
    write_csv(out / "audit.csv", rows, AUDIT_COLUMNS)
    report = ExperimentReport("audit", rows=rows, summary={r["variable"]: r["auc"] for r in rows})
    _finish(report, cfg, out)
    return report.summary


def cmd_plane(cfg: ExperimentConfig, model_path=None, out=None) -> dict:
    g = _dataset(cfg)
    out = _out(out or cfg.out)
    model, report, plane = train_model(cfg, g, cfg.plane.every)
    write_csv(out / "plane.csv", plane, PLANE_COLUMNS)
    save_model(model, out / "model.json")
    report.summary["plane_points"] = len(plane)
    _finish(report, cfg, out)
    return report.summary


def cmd_gen_sbm(cfg: ExperimentConfig, model_path=None, out=None) -> dict:
    s = cfg.sbm
    if out is None and cfg.out is None:
        raise UsageProblem("gen-sbm needs an output directory (--out)")
    try:
        g = generate_sbm(s.n, s.blocks, s.p_in, s.p_out, s.d, RngStream(cfg.seed), s.noise, tuple(cfg.split))
    except ValueError as e:
        raise ConfigError("sbm", str(e)) from e
    target = Path(out or cfg.out)
    save_dataset(g, target)
    return {"n": g.n_nodes, "edges": g.n_edges}


SINGLE = {"train": cmd_train, "attack": cmd_attack, "audit": cmd_audit}


def grid_cells(cfg: ExperimentConfig) -> list[dict]:
    """Each cell is {"seed": s, "params": {dotted key: value}}."""
    grid = cfg.grid
    seeds = cfg.seeds or [cfg.seed]
    keys = sorted(grid.params)
    combos = [dict(zip(keys, vals)) for vals in itertools.product(*(grid.params[k] for k in keys))]
    cells = [{"seed": s, "params": c} for c in combos for s in seeds]
    if grid.search == "random" and grid.n is not None and grid.n < len(cells):
        pick = np.sort(np.random.default_rng(grid.seed).choice(len(cells), size=grid.n, replace=False))
        cells = [cells[i] for i in pick]
    return cells


def _run_cell(args) -> dict:
    raw, cell, command, model_path, out = args
    data = dict(raw)
    data.pop("grid", None)
    data.pop("seeds", None)
    for k, v in cell["params"].items():
        data = set_path(data, k, v)
    data["seed"] = cell["seed"]
    cfg = parse_config(data)
    summary = SINGLE[command](cfg, model_path, out)
    return {"seed": cell["seed"], **cell["params"], **summary}


def cmd_grid(cfg: ExperimentConfig, model_path=None, out=None, jobs: int = 1) -> dict:
    out = _out(out or cfg.out)
    cells = grid_cells(cfg)
    if not cells or (not cfg.grid.params and not cfg.seeds):
        raise ConfigError("grid", "empty grid (give grid.params values or a seeds list)")
    raw = cfg.echo()
    if cfg.dataset:
        raw["dataset"] = cfg.dataset
    # validate every cell before running anything
    for c in cells:
        data = dict(raw)
        data.pop("grid", None)
        data.pop("seeds", None)
        for k, v in c["params"].items():
            data = set_path(data, k, v)
        parse_config(data)
    tasks = [(raw, c, cfg.grid.command, model_path, str(out / f"cell{i:03d}")) for i, c in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    summary = aggregate(rows, cfg.grid.params)
    write_csv(out / "grid.csv", rows)
    write_csv(out / "aggregate.csv", summary)
    report = ExperimentReport("grid", rows=rows, summary={"cells": len(rows), "groups": summary})
    _finish(report, cfg, out)
    return report.summary


def aggregate(rows: list[dict], params: dict) -> list[dict]:
    """Mean and population std of every numeric summary value, grouped by parameter values.

    Wall-clock times are left out so the aggregate is reproducible.
    """
    keys = sorted(params)
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault(tuple(json.dumps(r.get(k), sort_keys=True) for k in keys), []).append(r)
    out = []
    for gkey, members in groups.items():
        agg = {k: json.loads(v) for k, v in zip(keys, gkey)}
        agg["n"] = len(members)
        metrics = [k for k in members[0] if k not in keys and k != "seed" and not k.startswith("wall_time")]
        for m in metrics:
            vals = [r[m] for r in members if isinstance(r.get(m), (int, float)) and not isinstance(r.get(m), bool)]
            if len(vals) == len(members):
                agg[f"{m}_mean"] = float(np.mean(vals))
                agg[f"{m}_std"] = float(np.std(vals))
        out.append(agg)
    return out


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphleak", description="Graph reconstruction attacks and privacy-bottleneck defenses for GNNs.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--model", help="trained model file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="parallel grid cells")
    return p


def resolve_config(args) -> ExperimentConfig:
    data: dict = {}
    if args.config:
        cfg = load_config(args.config)
        data = cfg.echo()
    if args.dataset:
        data["dataset"] = args.dataset
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        data["seed"] = args.seed
    return parse_config(data)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    t0 = time.perf_counter()
    try:
        cfg = resolve_config(args)
        if args.command == "grid":
            summary = cmd_grid(cfg, args.model, args.out, args.jobs)
        elif args.command == "gen-sbm":
            summary = cmd_gen_sbm(cfg, args.model, args.out)
        elif args.command == "plane":
            summary = cmd_plane(cfg, args.model, args.out)
        else:
            summary = SINGLE[args.command](cfg, args.model, args.out)
    except INPUT_ERRORS as e:
        print(f"graphleak {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, ad.ShapeError, ad.DomainError, ad.UsageError, RuntimeError, ValueError, OSError) as e:
        print(f"graphleak {args.command}: run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    brief = {k: v for k, v in summary.items() if not isinstance(v, list)}
    print(json.dumps({"command": args.command, **brief, "elapsed_s": round(time.perf_counter() - t0, 3)}, default=str))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
