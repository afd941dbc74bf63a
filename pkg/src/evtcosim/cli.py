"""Command-line driver for the workflow stages.

    evtcosim synth --preset small --working-dir runs
    evtcosim link --working-dir runs
    evtcosim predict --working-dir runs
    evtcosim simulate --config runs/small.json --seed 7
    evtcosim report --config runs/small.json
    evtcosim compare --a runs/on --b runs/off

Every scenario field can be given as ``--<field_name>`` and overrides the
value from ``--config``.  The log level comes from ``EVTCOSIM_LOG``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import cosim, synth
from .errors import ConfigError, EvtcosimError
from .scenario import ScenarioConfig, read_config, write_config

log = logging.getLogger("evtcosim")

EXIT_CODES = {"config": 2, "data": 3, "stage-order": 4, "numerical": 5, "error": 1}
STAGES = ("synth", "link", "predict", "scenario", "simulate", "report", "compare")


class _Parser(argparse.ArgumentParser):
    """Argument errors become config errors so they share the exit code table."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _taz_list(s: str) -> list[str]:
    return [t for t in s.split(",") if t]


def _field_type(f: dataclasses.Field):
    if f.name == "tazs_to_evacuate":
        return _taz_list
    if f.name == "controls":
        return _bool
    t = str(f.type)
    if "int" in t and "float" not in t:
        return int
    if "float" in t:
        return float
    return str


def _add_scenario_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="scenario JSON file")
    g = p.add_argument_group("scenario fields (override --config)")
    for f in dataclasses.fields(ScenarioConfig):
        if f.name in ("working_dir", "rng_seed", "controls", "interval_length"):
            continue
        g.add_argument(f"--{f.name}", type=_field_type(f), default=None)
    g.add_argument("--working-dir", "--working_dir", dest="working_dir", default=None)
    g.add_argument("--seed", "--rng_seed", dest="rng_seed", type=int, default=None)
    g.add_argument("--controls", type=_bool, default=None, metavar="on|off")
    g.add_argument("--interval-seconds", "--interval_length", dest="interval_length", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evtcosim", description="EV charging / evacuation co-simulation")
    p.add_argument("--interactive", action="store_true", help="pick stages from a menu")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic city")
    s.add_argument("--preset", choices=synth.PRESETS, default="small")
    s.add_argument("--working-dir", "--working_dir", dest="working_dir", default=".")
    s.add_argument("--seed", type=int, default=None, help="override the preset seed")
    s.add_argument("--dataset-dir", dest="dataset_dir", default="city")

    for name, text in (("link", "link parcels to buses, edges and TAZs"),
                       ("predict", "project per-TAZ EV fractions")):
        q = sub.add_parser(name, help=text)
        q.add_argument("--config", help="take the dataset location from this scenario file")
        q.add_argument("--working-dir", "--working_dir", dest="working_dir", default=None)
        q.add_argument("--dataset-dir", dest="dataset_dir", default=None)

    for name, text in (("scenario", "generate vehicles, routes and charging loads"),
                       ("simulate", "run traffic and time-series power flow"),
                       ("report", "per-TAZ overloads and a run summary")):
        q = sub.add_parser(name, help=text)
        _add_scenario_flags(q)
        if name == "simulate":
            q.add_argument("--jobs", type=int, default=1, help="parallel power-flow workers")

    c = sub.add_parser("compare", help="compare two simulated runs")
    c.add_argument("--a", required=True, help="run directory (baseline)")
    c.add_argument("--b", required=True, help="run directory")
    c.add_argument("--working-dir", "--working_dir", dest="working_dir", default=".")
    c.add_argument("--out", default=None, help="output directory (default: <working-dir>/compare_<a>_<b>)")
    return p


# ------------------------------------------------------------------ config

def resolve_config(args) -> ScenarioConfig:
    doc: dict = {}
    if args.config:
        doc = read_config(args.config).to_dict()
    for f in dataclasses.fields(ScenarioConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    if "scenario_name" not in doc:
        raise ConfigError("no scenario_name: pass --config or --scenario_name")
    # an explicit fixed rate replaces a level from the file and vice versa
    if getattr(args, "ev_penetration_rate", None) is not None and args.ev_penetration_rate >= 0:
        if getattr(args, "prediction_level", None) is None:
            doc["prediction_level"] = None
    elif getattr(args, "prediction_level", None) is not None:
        doc["ev_penetration_rate"] = -1
    return ScenarioConfig.from_dict(doc)


def _data_dir(args) -> Path:
    if getattr(args, "config", None):
        cfg = read_config(args.config)
        wd = args.working_dir or cfg.working_dir
        return Path(wd) / (args.dataset_dir or cfg.dataset_dir)
    return Path(args.working_dir or ".") / (args.dataset_dir or "city")


def _scenario_current(cfg: ScenarioConfig) -> bool:
    stored = cfg.run_dir / cosim.RUN_FILES["config"]
    needed = [cosim.RUN_FILES[k] for k in ("vehicles", "trips", "series", "scenario_report")]
    if not stored.exists() or not all((cfg.run_dir / n).exists() for n in needed):
        return False
    return read_config(stored) == cfg


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    params, scen = synth.load_preset(args.preset)
    if args.seed is not None:
        params = dataclasses.replace(params, seed=args.seed)
    ds = synth.generate_city(params)
    out = synth.write_city(ds, Path(args.working_dir) / args.dataset_dir)
    cfg = ScenarioConfig(scenario_name=args.preset, working_dir=str(args.working_dir),
                         tazs_to_evacuate=ds.city_info["tazs_to_evacuate"], evac_edge=ds.city_info["evac_edge"],
                         dataset_dir=args.dataset_dir, **scen)
    cfg_path = Path(args.working_dir) / f"{args.preset}.json"
    write_config(cfg, cfg_path)
    print(f"city written to {out}; scenario template {cfg_path}")
    return 0


def cmd_link(args) -> int:
    rep = cosim.run_link(_data_dir(args))
    print(f"linked parcels; {len(rep.unassigned)} outside every TAZ, {len(rep.warnings)} warnings")
    return 0


def cmd_predict(args) -> int:
    out = cosim.run_predict(_data_dir(args))
    print("profiles: " + ", ".join(f"{k} ({len(v)} rows)" for k, v in out.items()))
    return 0


def cmd_scenario(args) -> int:
    cfg = resolve_config(args)
    rep = cosim.run_scenario_stage(cfg)
    print(f"{rep['vehicles']} vehicles, {rep['evs']} EVs ({rep['evs_connected']} on the grid), "
          f"{rep['n_intervals']} intervals -> {cfg.run_dir}")
    return 0


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    if not _scenario_current(cfg):
        log.info("scenario outputs missing or stale; regenerating")
        cosim.run_scenario_stage(cfg)
    rep = cosim.run_simulate(cfg, jobs=max(1, args.jobs))
    print(f"simulated {rep['vehicles']} vehicles over {rep['n_intervals']} intervals -> {cfg.run_dir}")
    for w in rep["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    summary = cosim.run_report_stage(cfg)
    print(json.dumps({k: summary[k] for k in ("peak_overloads", "peak_undervoltages", "total_overloads",
                                               "total_undervoltages")}, sort_keys=True))
    return 0


def _run_path(wd: str, name: str) -> Path:
    p = Path(name)
    if p.exists() or p.is_absolute():
        return p
    return Path(wd) / name


def cmd_compare(args) -> int:
    a = cosim.load_bundle(_run_path(args.working_dir, args.a))
    b = cosim.load_bundle(_run_path(args.working_dir, args.b))
    rep = cosim.compare_runs(a, b)
    out = Path(args.out) if args.out else Path(args.working_dir) / f"compare_{Path(args.a).name}_{Path(args.b).name}"
    cosim.write_comparison(rep, out)
    pct = rep.evac_delta_pct
    print(f"comparison written to {out}; evacuation time delta "
          f"{'n/a' if pct is None else f'{rep.evac_delta:.1f} s ({pct:.2f}%)'}")
    return 0


COMMANDS = {"synth": cmd_synth, "link": cmd_link, "predict": cmd_predict, "scenario": cmd_scenario,
            "simulate": cmd_simulate, "report": cmd_report, "compare": cmd_compare}


def interactive(parser, stream_in=None, stream_out=None) -> int:
    """Menu loop: choose stages by number, then give their flags on one line."""
    fin = stream_in or sys.stdin
    fout = stream_out or sys.stdout
    while True:
        fout.write("\nstages:\n" + "".join(f"  {i + 1}. {s}\n" for i, s in enumerate(STAGES)) + "  q. quit\n> ")
        fout.flush()
        line = fin.readline()
        if not line or line.strip().lower() in ("q", "quit", ""):
            return 0
        try:
            picks = [STAGES[int(t) - 1] for t in line.replace(",", " ").split()]
        except (ValueError, IndexError):
            fout.write("enter stage numbers, e.g. '4 5 6'\n")
            continue
        fout.write("flags for these stages (e.g. --config runs/small.json): ")
        fout.flush()
        flags = fin.readline().split()
        for stage in picks:
            code = _dispatch(parser, [stage, *flags] if stage != "synth" else [stage, *_synth_flags(flags)])
            if code:
                fout.write(f"{stage} failed with exit code {code}\n")
                break


def _synth_flags(flags: list[str]) -> list[str]:
    keep, out = {"--preset", "--working-dir", "--working_dir", "--seed", "--dataset-dir"}, []
    for i, f in enumerate(flags):
        if f in keep and i + 1 < len(flags):
            out += [f, flags[i + 1]]
    return out


def _dispatch(parser, argv) -> int:
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("no subcommand given")
        return COMMANDS[args.command](args)
    except EvtcosimError as exc:
        print(f"evtcosim: {exc.category} error: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)


def main(argv=None) -> int:
    level = os.environ.get("EVTCOSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--interactive" in argv:
        return interactive(parser)
    return _dispatch(parser, argv)


if __name__ == "__main__":
    sys.exit(main())
