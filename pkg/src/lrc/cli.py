"""``lrc`` command line: train-teacher | distill | sweep | verify | report.

Exit codes: 0 success / bound holds, 1 bound violated, 2 usage error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import experiments as ex
from . import theory
from .config import RunConfig, describe_defaults
from .data import save_corpus
from .errors import LRCError, NumericalError
from .model import save_checkpoint
from .optim import TRACE_COLUMNS, TrainTrace

EXIT_OK, EXIT_BOUND, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
CHECKS = ("lemma1", "convergence", "generalization", "mi", "rank-scaling", "gradcheck")
REPORT_DIR = "report"
REPORT_KIND = "lrc-report/1"


class UsageError(LRCError):
    pass


def _dump_json(obj) -> str:
    return json.dumps(theory._clean(obj), indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------- commands

def cmd_train_teacher(cfg: RunConfig, out: Path) -> int:
    data = ex.build_data(cfg)
    if cfg["teacher_checkpoint"]:
        raise UsageError("train-teacher ignores teacher_checkpoint; unset it")
    t0 = time.perf_counter()
    teacher, info = ex.fit_teacher(cfg, data)
    _log(f"teacher trained in {time.perf_counter() - t0:.1f}s")
    save_checkpoint(teacher, out / "teacher.ckpt")
    save_corpus(data.teacher, out / "teacher_corpus.lrcd")
    summary = {"train_loss": info["train_loss"], "val_loss": info["val_loss"],
               "uniform_baseline": math.log(teacher.config.vocab_size),
               "checksum": teacher.checksum(), "params": teacher.num_params(),
               "teacher_tokens": info["teacher_tokens"], "provenance": data.teacher.provenance}
    _write(out / "teacher.json", _dump_json(summary))
    print(f"teacher val_loss={summary['val_loss']:.4f} (uniform {summary['uniform_baseline']:.4f})")
    return EXIT_OK


def cmd_distill(cfg: RunConfig, out: Path) -> int:
    if not cfg["teacher_checkpoint"]:
        raise UsageError("distill needs a teacher checkpoint (--teacher PATH or teacher_checkpoint=...)")
    if not Path(cfg["teacher_checkpoint"]).is_file():
        raise UsageError(f"teacher checkpoint {cfg['teacher_checkpoint']} not found")
    data = ex.build_data(cfg)
    teacher, _ = ex.fit_teacher(cfg, data)
    t0 = time.perf_counter()
    student, trace, summary = ex.distill_once(cfg, teacher, data)
    _log(f"distilled in {time.perf_counter() - t0:.1f}s")
    save_checkpoint(student, out / "student.ckpt")
    _write(out / "trace.csv", trace.to_csv())
    _write(out / "summary.json", _dump_json(summary))
    print(f"rank={summary['rank']} val_loss={summary['val_loss']:.4f} gap={summary['gap']:.4f}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, out: Path, axis=None, grid=None) -> int:
    t0 = time.perf_counter()
    result = ex.sweep(cfg, axis, grid)
    _log(f"sweep finished in {time.perf_counter() - t0:.1f}s")
    _write(out / "sweep.json", _dump_json(result))
    _write(out / "sweep.csv", _csv_text(ex.SWEEP_CSV_COLUMNS, ex.sweep_csv_rows(result)))
    if result["axis"] == "n_samples":
        fit = result["fit"]
        print(f"best ranks {[r['best_rank'] for r in result['records']]} "
              f"slope={fit['slope']:.3f} corr={fit['correlation']:.3f}")
    else:
        print(f"best {result['axis']} = {result['best']}")
    return EXIT_OK


def run_check(name: str, cfg: RunConfig, sweep_input: str | None = None) -> list:
    if name == "gradcheck":
        return [ex.gradcheck_experiment(cfg["seed"])]
    if name == "lemma1":
        return [ex.lemma1_experiment()]
    if name == "convergence":
        return [ex.quadratic_convergence(), ex.distill_convergence()]
    if name == "rank-scaling":
        sweep = json.loads(Path(sweep_input).read_text()) if sweep_input else None
        if sweep is not None and sweep.get("axis") != "n_samples":
            raise UsageError("rank-scaling needs an n_samples sweep result")
        return [ex.rank_scaling_check(sweep_result=sweep)]
    if name in ("generalization", "mi"):
        data = ex.build_data(cfg)
        teacher, _ = ex.fit_teacher(cfg, data)
        if name == "generalization":
            return [ex.generalization_experiment(cfg, teacher, data)]
        return [ex.check_mi_chain(), ex.gaussian_ksg_check(), ex.mi_check(cfg, teacher, data)]
    raise UsageError(f"unknown check {name!r}; choose from {', '.join(CHECKS)}")


def cmd_verify(cfg: RunConfig, out: Path, check: str, sweep_input=None) -> int:
    reports = run_check(check, cfg, sweep_input)
    ok = True
    for rep in reports:
        _write(out / f"verify_{rep.name}.json", rep.to_json())
        print(f"{rep.name}: {'PASS' if rep.passed else 'FAIL'} margin={rep.margin:.3g}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_BOUND


# ---------------------------------------------------------------- report

REPORT_CSVS = {
    "traces.csv": ["run"] + TRACE_COLUMNS,
    "sweeps.csv": ["sweep", "axis"] + ex.SWEEP_CSV_COLUMNS,
    "bounds.csv": ["report", "index", "measured", "bound", "pass"],
    "runs.csv": ["run", "rank", "seed", "val_loss", "best_val_loss", "train_lm_loss", "gap"],
}


def _scan(run_dir: Path) -> dict:
    files = sorted(p for p in run_dir.rglob("*")
                   if p.is_file() and REPORT_DIR not in p.relative_to(run_dir).parts[:-1])
    rows = {k: [] for k in REPORT_CSVS}
    content = {"traces": [], "sweeps": [], "bounds": [], "runs": [], "teachers": []}
    for p in files:
        rel = p.relative_to(run_dir).as_posix()
        if p.name == "trace.csv":
            tr = TrainTrace.from_csv(p.read_text())
            content["traces"].append({"run": rel, "steps": len(tr), "lr": tr.lr})
            for line in csv.DictReader(io.StringIO(tr.to_csv())):
                rows["traces.csv"].append([rel] + [line[c] for c in TRACE_COLUMNS])
        elif p.name == "sweep.json":
            res = json.loads(p.read_text())
            content["sweeps"].append({"run": rel, "axis": res["axis"], "grid": res["grid"],
                                      "fit": res.get("fit"), "best": res.get("best")})
            for row in ex.sweep_csv_rows(res):
                rows["sweeps.csv"].append([rel, res["axis"]] + list(row))
        elif p.name.startswith("verify_") and p.suffix == ".json":
            rep = json.loads(p.read_text())
            content["bounds"].append({"run": rel, "name": rep["name"], "pass": rep["pass"],
                                      "margin": rep["margin"]})
            for i, pt in enumerate(rep["points"]):
                rows["bounds.csv"].append([rel, i, pt["measured"], pt["bound"], rep["pass"]])
        elif p.name == "summary.json":
            s = json.loads(p.read_text())
            content["runs"].append({"run": rel, **{k: s[k] for k in ("rank", "seed", "val_loss", "gap")}})
            rows["runs.csv"].append([rel, s["rank"], s["seed"], s["val_loss"], s["best_val_loss"],
                                     s["train_lm_loss"], s["gap"]])
        elif p.name == "teacher.json":
            content["teachers"].append({"run": rel, **json.loads(p.read_text())})
    return {"kind": REPORT_KIND, "content": content, "csv": rows}


def cmd_report(run_dir: Path) -> int:
    if not run_dir.is_dir():
        raise UsageError(f"{run_dir} is not a directory")
    own = run_dir / "report.json"
    if own.is_file() and json.loads(own.read_text()).get("kind") == REPORT_KIND:
        report, target = json.loads(own.read_text()), run_dir
    else:
        report, target = _scan(run_dir), run_dir / REPORT_DIR
    if not any(report["csv"].values()):
        raise UsageError(f"nothing to report in {run_dir}")
    _write(target / "report.json", _dump_json(report))
    for name, cols in REPORT_CSVS.items():
        _write(target / name, _csv_text(cols, report["csv"][name]))
    c = report["content"]
    print(f"report: {len(c['traces'])} traces, {len(c['sweeps'])} sweeps, "
          f"{len(c['bounds'])} bound reports, {len(c['runs'])} runs -> {target}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", default="runs/out", help="output directory")
    common.add_argument("--seed", type=int, help="run seed (teacher seed for train-teacher)")
    p = argparse.ArgumentParser(prog="lrc", description="Low-rank clone distillation harness",
                                epilog="config keys and defaults:\n" + describe_defaults(),
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-teacher", parents=[common], help="train the full-size teacher")
    d = sub.add_parser("distill", parents=[common], help="low-rank distillation run")
    d.add_argument("--teacher", metavar="PATH", help="teacher checkpoint")
    d.add_argument("--no-kd", action="store_true")
    d.add_argument("--no-lm", action="store_true")
    d.add_argument("--no-clone", action="store_true")
    s = sub.add_parser("sweep", parents=[common], help="rank / n_samples / lambda / lr sweep")
    s.add_argument("--axis", choices=["rank", "n_samples", "lambda", "lr"])
    s.add_argument("--grid", help="comma-separated grid values")
    v = sub.add_parser("verify", parents=[common], help="numerical check of a bound")
    v.add_argument("check", choices=CHECKS)
    v.add_argument("--input", metavar="PATH", help="n_samples sweep.json for rank-scaling")
    r = sub.add_parser("report", help="merge run artifacts into plot-ready CSVs")
    r.add_argument("run_dir")
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    cfg = cfg.with_overrides(args.set)
    if args.seed is not None:
        key = "teacher_seed" if args.command == "train-teacher" else "seed"
        cfg = cfg.replace(**{key: args.seed})
    if getattr(args, "teacher", None):
        cfg = cfg.replace(teacher_checkpoint=args.teacher)
    for flag, key in (("no_kd", "use_kd"), ("no_lm", "use_lm"), ("no_clone", "use_clone")):
        if getattr(args, flag, False):
            cfg = cfg.replace(**{key: False})
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "report":
            return cmd_report(Path(args.run_dir))
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.txt", cfg.serialize())
        if args.command == "train-teacher":
            return cmd_train_teacher(cfg, out)
        if args.command == "distill":
            return cmd_distill(cfg, out)
        if args.command == "sweep":
            return cmd_sweep(cfg, out, args.axis, args.grid)
        return cmd_verify(cfg, out, args.check, args.input)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LRCError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
