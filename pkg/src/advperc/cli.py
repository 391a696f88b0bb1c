"""``advperc`` command-line interface.

Exit codes: 0 success (or safe rollout), 2 rule violation detected,
1 usage or IO error.  Run directories are created under ``--out-root``
(default ``$ADVPERC_OUT`` or ``./runs``) and never overwritten without
``--force``.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__, metrics, pem, render, search
from .errors import load_errors, save_errors
from .scenario import SCENARIO_IDS, generate_ground_truth, load_scenario, scenario_hash
from .simulation import NO_AGENT_SENTINEL, dump_rollout_csv, rollout

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2
OUT_ROOT_ENV = "ADVPERC_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _finite(v: float) -> float:
    return v if np.isfinite(v) else NO_AGENT_SENTINEL


def _run_dir(args, default_id: str) -> Path:
    root = Path(args.out_root or os.environ.get(OUT_ROOT_ENV) or "runs")
    out = root / (args.run_id or default_id)
    if out.exists():
        if not args.force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    return out


def _check_new_file(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)


def _echo_config(out: Path, args, **extra) -> None:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "force", "out_root")}
    cfg.update(extra)
    cfg["version"] = __version__
    _json_dump(cfg, out / "config.echo")


def _load_pem(spec: str) -> pem.PemModel:
    try:
        return pem.get_model(spec)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load PEM {spec!r}: {exc}") from exc


# -- commands ----------------------------------------------------------------


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    e = load_errors(args.errors, sc) if args.errors else None
    ro = rollout(sc, e)
    out = _run_dir(args, f"run-{sc.scenario_id}")
    _echo_config(out, args, scenario_id=sc.scenario_id, scenario_hash=scenario_hash(sc))
    dump_rollout_csv(ro, out / "rollout.csv")
    rep = metrics.report(ro.world, ro.perceived)
    doc = {"scenario_id": sc.scenario_id, "rule_value": _finite(ro.rule_value), "failed": ro.failed,
           "metrics": rep.to_dict()}
    _json_dump(doc, out / "metrics.json")
    if args.frames:
        render.write_frames(sc, ro.world, ro.perceived, out / "frames", args.frame_stride)
    print(f"{sc.scenario_id}: r = {_finite(ro.rule_value):.3f}  NDS = {rep.nds:.4f}  NDS-t = {rep.nds_t:.4f}  -> {out}")
    return EXIT_VIOLATION if ro.failed else EXIT_OK


def cmd_attack(args) -> int:
    sc = load_scenario(args.scenario)
    model = _load_pem(args.pem)
    try:
        res = search.attack(sc, args.metric, args.seed, args.steps, args.proposals, model)
    except search.PreconditionError as exc:
        print(f"attack aborted: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = _run_dir(args, f"attack-{sc.scenario_id}-{args.metric}-s{args.seed}")
    _echo_config(out, args, scenario_id=sc.scenario_id, scenario_hash=scenario_hash(sc))
    save_errors(res.best_error, out / "attack.err", sc)
    res.write_trace_csv(out / "trace.csv")
    summary = res.to_dict("attack.err")
    summary["scenario_id"] = sc.scenario_id
    _json_dump(summary, out / "summary.json")
    (out / "trace.svg").write_text(render.chart_from_csv(out / "trace.csv"))
    if args.frames:
        ro = rollout(sc, res.best_error)
        render.write_frames(sc, ro.world, ro.perceived, out / "frames", args.frame_stride)
    m = res.best_metrics
    print(f"{sc.scenario_id} [{args.metric}]: alpha = {res.best_alpha:.4f}  r = {res.best_rule_value:.3f}  "
          f"FN/TP = {m['fn']}/{m['tp']}  NDS = {m['nds']:.4f}  NDS-t = {m['nds_t']:.4f}  -> {out}")
    return EXIT_OK


def _parse_strengths(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --strengths list: {text!r}") from exc
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise UsageError("strengths must be a non-empty list of values in [0, 1]")
    return vals


def cmd_probe(args) -> int:
    sc = load_scenario(args.scenario)
    e = load_errors(args.errors, sc)
    strengths = _parse_strengths(args.strengths)
    try:
        curve = search.robustness_probe(sc, e, strengths, args.n, args.seed)
    except search.PreconditionError as exc:
        print(f"probe aborted: {exc}", file=sys.stderr)
        return EXIT_ERROR
    out = _run_dir(args, f"probe-{sc.scenario_id}-s{args.seed}")
    _echo_config(out, args, scenario_id=sc.scenario_id, scenario_hash=scenario_hash(sc))
    search.write_probe_csv(curve, out / "probe.csv")
    (out / "probe.svg").write_text(render.chart_from_csv(out / "probe.csv"))
    for p in curve:
        print(f"strength {p.strength:.2f}: adversarial {p.adversarial_fraction:.2f}  NDS-t {p.mean_nds_t:.4f}")
    return EXIT_OK


def cmd_pem_synth(args) -> int:
    out = Path(args.out)
    _check_new_file(out, args.force)
    data = pem.synth_logs(_load_pem(args.preset), args.seed, args.rows)
    data.to_csv(out)
    print(f"wrote {len(data)} rows to {out}")
    return EXIT_OK


def cmd_pem_fit(args) -> int:
    out = Path(args.out)
    _check_new_file(out, args.force)
    try:
        data = pem.PemDataset.from_csv(args.data)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {args.data}: {exc}") from exc
    model = pem.fit(data)
    model.save(out)
    print(f"fitted {len(data)} rows -> {out}")
    return EXIT_OK


def cmd_pem_sample(args) -> int:
    names = list(SCENARIO_IDS) if args.scenario == ["all"] else args.scenario
    model = _load_pem(args.pem)
    out = _run_dir(args, f"pem-sample-s{args.seed}")
    _echo_config(out, args)
    failures = 0
    with open(out / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("scenario_id", "sample", "rule_value", "nds", "nds_t"))
        for name in names:
            sc = load_scenario(name)
            gt = generate_ground_truth(sc)
            n_fail = 0
            for i in range(args.count):
                seed = np.random.SeedSequence([args.seed, i])
                ro = rollout(sc, ground_truth=gt, perceive=pem.closed_loop_perceiver(model, gt, seed))
                rep = metrics.report(ro.world, ro.perceived)
                w.writerow([sc.scenario_id, i, repr(_finite(ro.rule_value)), repr(rep.nds), repr(rep.nds_t)])
                n_fail += ro.failed
            failures += n_fail
            print(f"{sc.scenario_id}: {n_fail}/{args.count} samples violate the rule")
    if args.check_rule and failures:
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_render(args) -> int:
    if args.input:
        out = Path(args.out) if args.out else Path(args.input).with_suffix(".svg")
        _check_new_file(out, args.force)
        try:
            svg = render.chart_from_csv(args.input)
        except OSError as exc:
            raise UsageError(f"cannot read {args.input}: {exc}") from exc
        out.write_text(svg)
        print(f"wrote {out}")
        return EXIT_OK
    if not args.scenario:
        raise UsageError("render needs a CSV file or --scenario")
    sc = load_scenario(args.scenario)
    e = load_errors(args.errors, sc) if args.errors else None
    ro = rollout(sc, e)
    out = _run_dir(args, f"render-{sc.scenario_id}")
    _echo_config(out, args, scenario_id=sc.scenario_id, scenario_hash=scenario_hash(sc))
    paths = render.write_frames(sc, ro.world, ro.perceived, out / "frames", args.frame_stride)
    print(f"wrote {len(paths)} frames to {out / 'frames'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_output(p, with_run_dir: bool = True) -> None:
    if with_run_dir:
        p.add_argument("--out-root", help=f"parent of run directories (default ${OUT_ROOT_ENV} or ./runs)")
        p.add_argument("--run-id", help="run directory name (default derived from the command)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="advperc", description="Adversarial perception-error search for driving planners.")
    parser.add_argument("--version", action="version", version=f"advperc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="simulate one rollout")
    p.add_argument("--scenario", required=True, help="bundled scenario id or YAML path")
    p.add_argument("--errors", help="error-sequence file to apply")
    p.add_argument("--frames", action="store_true", help="also write SVG frame snapshots")
    p.add_argument("--frame-stride", type=int, default=10)
    _add_output(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="heuristic then random search for an adversarial error")
    p.add_argument("--scenario", required=True)
    p.add_argument("--metric", choices=search.OBJECTIVES, default="nds-t")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=search.N_STEPS)
    p.add_argument("--proposals", type=int, default=search.N_PROPOSALS)
    p.add_argument("--pem", default=pem.DEFAULT_PRESET, help="PEM preset name or JSON file (pem-ll scoring)")
    p.add_argument("--no-frames", dest="frames", action="store_false", help="skip SVG frame snapshots")
    p.add_argument("--frame-stride", type=int, default=10)
    _add_output(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("probe", help="perturb an adversarial error and measure how often it still fails")
    p.add_argument("--scenario", required=True)
    p.add_argument("--errors", required=True)
    p.add_argument("--strengths", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    _add_output(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("pem-synth", help="generate synthetic detector logs")
    p.add_argument("--preset", default=pem.DEFAULT_PRESET, help="generating preset or PEM JSON file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--out", required=True)
    _add_output(p, with_run_dir=False)
    p.set_defaults(func=cmd_pem_synth)

    p = sub.add_parser("pem-fit", help="fit a PEM to detector logs")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_output(p, with_run_dir=False)
    p.set_defaults(func=cmd_pem_fit)

    p = sub.add_parser("pem-sample", help="closed-loop rollouts with PEM-sampled perception")
    p.add_argument("--scenario", nargs="+", default=["all"])
    p.add_argument("--pem", default=pem.DEFAULT_PRESET)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--check-rule", action="store_true", help="exit 2 if any sample violates the rule")
    _add_output(p)
    p.set_defaults(func=cmd_pem_sample)

    p = sub.add_parser("render", help="chart a trace/probe CSV, or draw frames of a rollout")
    p.add_argument("input", nargs="?", help="trace.csv or probe.csv")
    p.add_argument("--out", help="SVG path for a chart")
    p.add_argument("--scenario")
    p.add_argument("--errors")
    p.add_argument("--frame-stride", type=int, default=10)
    _add_output(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, OSError, ValueError) as exc:  # ScenarioError is a ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
