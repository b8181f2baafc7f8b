"""Command-line entry point: ``qrlab <command> ...``.

Exit codes: 0 success, 1 configuration error, 2 numerical divergence (or a
failed gradient check), 3 file schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, load_config
from .datagen import SceneParams, dataset, save_archive
from .diagnostics import diagnose
from .dumps import align, read_ground_truth, read_predictions, write_ground_truth, write_predictions
from .errors import ConfigError, DivergenceError, SchemaError
from .train import check_stage_count, load_run, load_split, per_stage_ap, predict_split, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_SCHEMA = 0, 1, 2, 3

log = logging.getLogger("qrlab")


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(headers, rows) -> str:
    cells = [list(map(str, headers))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.run_dir:
        overrides.append(f"output_dir={json.dumps(str(args.run_dir))}")
    cfg = load_config(args.config, overrides)
    result = train(cfg)
    print(f"trained {cfg.strategy.label()} for {result.steps} steps in {result.wall_time:.1f}s -> {result.run_dir}")
    return EXIT_OK


def evaluate_run(run: Path, split: str = "val", stages: int | None = None, depth: int | None = None, out_dir: Path | None = None) -> dict:
    """Evaluate a run directory or checkpoint and write the eval artifacts."""
    cfg, mcfg, params = load_run(run)
    check_stage_count(mcfg, stages)
    data = load_split(cfg, split)
    preds = predict_split(params, mcfg, cfg, data, depth)
    aps50 = per_stage_ap(preds, data.gts, 0.5)
    aps75 = per_stage_ap(preds, data.gts, 0.75)
    if out_dir is None:
        base = run if run.is_dir() else run.parent.parent
        out_dir = base / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    write_predictions(out_dir / f"predictions_{split}.jsonl", preds)
    write_ground_truth(out_dir / f"ground_truth_{split}.jsonl", [int(s) for s in data.seeds], data.gts)
    row_name = "depth" if cfg.strategy.kind == "dqrr" or depth is not None else "stage"
    with open(out_dir / f"ap_{split}.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([row_name, "ap50", "ap75"])
        for i, (a, b) in enumerate(zip(aps50, aps75), 1):
            w.writerow([i, repr(a), repr(b)])
    summary = {"split": split, "strategy": cfg.strategy.label(), "rows": row_name, "ap50": aps50, "ap75": aps75}
    (out_dir / f"ap_{split}.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def cmd_eval(args) -> int:
    summary = evaluate_run(Path(args.run), args.split, args.stages, args.depth, Path(args.out) if args.out else None)
    rows = [(i, a, b) for i, (a, b) in enumerate(zip(summary["ap50"], summary["ap75"]), 1)]
    print(_table([summary["rows"], "AP@0.5", "AP@0.75"], rows))
    return EXIT_OK


def diagnose_files(dump: Path, gt: Path, thresholds) -> list[dict]:
    preds = read_predictions(dump)
    gts = align(preds, read_ground_truth(gt))
    return [diagnose(preds, gts, t).to_dict() for t in thresholds]


def _print_report(rep: dict) -> None:
    print(f"== IoU > {rep['iou_thresh']}")
    print(_table(["stage"] + [str(i) for i in range(1, len(rep["stage_ap"]) + 1)], [["AP"] + rep["stage_ap"]]))
    print(f"final AP {_fmt(rep['final_ap'])}  oracle AP {_fmt(rep['oracle_ap'])}")
    print(f"TP fading rate {_fmt(rep['tp_fading_rate'])}  FP exacerbation rate {_fmt(rep['fp_exacerbation_rate'])}")
    if rep["attribution"]:
        rows = [("-".join(map(str, r["stages"])), r["tp_fading_rate"], r["fp_exacerbation_rate"]) for r in rep["attribution"]]
        print(_table(["stages", "TP fading", "FP exacerbation"], rows))


def cmd_diagnose(args) -> int:
    thresholds = [float(t) for t in args.thresholds.split(",")]
    reports = diagnose_files(Path(args.dump), Path(args.gt), thresholds)
    for rep in reports:
        _print_report(rep)
    out = Path(args.out) if args.out else Path(args.dump).with_name(Path(args.dump).stem + "_diagnostics.json")
    out.write_text(json.dumps({"reports": reports}, indent=2) + "\n")
    return EXIT_OK


def run_summary(run: Path, split: str = "val") -> dict | None:
    """Collect what a finished run left behind; ``None`` if it is incomplete."""
    ap_file = run / "eval" / f"ap_{split}.json"
    summary_file = run / "train_summary.json"
    missing = [p.name for p in (ap_file, summary_file) if not p.exists()]
    if missing:
        log.warning("skipping %s: missing %s", run, ", ".join(missing))
        return None
    ap = json.loads(ap_file.read_text())
    info = {"run": str(run), "strategy": ap["strategy"], "ap50": ap["ap50"], "ap75": ap["ap75"],
            "wall_time": json.loads(summary_file.read_text())["wall_time"]}
    diag = run / "eval" / f"predictions_{split}_diagnostics.json"
    if diag.exists():
        rep = next((r for r in json.loads(diag.read_text())["reports"] if r["iou_thresh"] == 0.5), None)
        if rep:
            info["tp_fading_rate"] = rep["tp_fading_rate"]
            info["fp_exacerbation_rate"] = rep["fp_exacerbation_rate"]
            info["oracle_ap"] = rep["oracle_ap"]
    return info


def cmd_compare(args) -> int:
    runs = [s for s in (run_summary(Path(r), args.split) for r in args.runs) if s is not None]
    if len(runs) < 2:
        print("need at least two completed runs to compare", file=sys.stderr)
        return EXIT_CONFIG if not runs else EXIT_OK
    ref = runs[0]
    headers = ["run", "strategy", "final AP50", "dAP50", "final AP75", "TP fade", "FP exac", "oracle AP", "wall s", "time x"]
    rows = []
    for r in runs:
        rows.append([
            Path(r["run"]).name, r["strategy"], r["ap50"][-1], r["ap50"][-1] - ref["ap50"][-1], r["ap75"][-1],
            r.get("tp_fading_rate"), r.get("fp_exacerbation_rate"), r.get("oracle_ap"),
            round(r["wall_time"], 1), round(r["wall_time"] / ref["wall_time"], 2) if ref["wall_time"] else None,
        ])
    print(_table(headers, rows))
    print()
    depth = max(len(r["ap50"]) for r in runs)
    print(_table(["run"] + [f"s{i}" for i in range(1, depth + 1)], [[Path(r["run"]).name] + r["ap50"] + [None] * (depth - len(r["ap50"])) for r in runs]))
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(headers)
            w.writerows(rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import CHECKS, run_all

    names = args.only.split(",") if args.only else None
    if names and any(n not in CHECKS for n in names):
        raise ConfigError(f"unknown check; choose from {', '.join(CHECKS)}")
    reports = run_all(args.seed, names)
    rows = [(k, r.worst, "ok" if r.ok else "FAIL") for k, r in reports.items()]
    print(_table(["check", "max rel err", "status"], rows))
    return EXIT_OK if all(r.ok for r in reports.values()) else EXIT_DIVERGED


def cmd_datagen(args) -> int:
    params = SceneParams(grid=args.grid, noise_sigma=args.noise)
    samples = list(dataset(args.split, args.size, args.seed, params))
    save_archive(args.out, samples, params)
    print(f"wrote {len(samples)} {args.split} samples to {args.out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qrlab", description="Query recollection training lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run", epilog=f"Runs go under ${OUTPUT_ROOT_ENV} (default ./runs) unless --run-dir is given.")
    t.add_argument("--config", help="JSON config file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value (repeatable; strategy.kind=sqr)")
    t.add_argument("--run-dir", help="output directory for this run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-stage AP and prediction dump")
    e.add_argument("run", help="run directory or checkpoint file")
    e.add_argument("--split", default="val", choices=("train", "val"))
    e.add_argument("--stages", type=int, help="expected stage count; mismatch is an error")
    e.add_argument("--depth", type=int, help="apply the final stage this many times (recurrent inference; dqrr runs default to S)")
    e.add_argument("--out", help="output directory (default RUN/eval)")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="fading/exacerbation rates, attribution and oracle AP")
    d.add_argument("dump", help="prediction dump (.jsonl)")
    d.add_argument("gt", help="ground-truth file (.jsonl)")
    d.add_argument("--thresholds", default="0.5,0.75")
    d.add_argument("--out", help="report file (default next to the dump)")
    d.set_defaults(func=cmd_diagnose)

    c = sub.add_parser("compare", help="side-by-side summary of evaluated runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--split", default="val")
    c.add_argument("--out", help="also write the table as CSV")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--only", help="comma-separated subset of checks")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("datagen", help="write a sample archive")
    s.add_argument("--split", default="train", choices=("train", "val", "test"))
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, default=16)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_datagen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except SchemaError as e:
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
