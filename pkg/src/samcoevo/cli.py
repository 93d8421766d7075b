"""Command line entry point: ``samcoevo <subcommand> ...``.

Subcommands: coevolve, afpo, robustness, stats, plot and worker.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import cppn
from .coevolution import CollaborationStrategy, read_run_csv
from .dispatch import serve_worker
from .errors import MalformedRecord, SamCoevoError
from .experiment import (
    ExperimentConfig,
    RobustnessReport,
    parse_config_text,
    morphology_id,
    parse_int_list,
    run_afpo_sweep,
    run_robustness,
    run_sweep,
    write_manifest,
)
from . import stats as st
from .morphology import VoxelGrid, decode_morphology

log = logging.getLogger("samcoevo")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--preset", choices=("desk", "paper"), help="base configuration")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--seeds", help="seed list, e.g. 0-4,9")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--workers", type=int, help="local evaluation processes")
    p.add_argument("--remote", action="append", default=[], metavar="HOST:PORT",
                   help="remote worker endpoint (repeatable)")
    p.add_argument("--generations", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samcoevo", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coevolve", help="collaboration-strategy sweep")
    _common(p)
    p.add_argument("--strategy", action="append", default=[], metavar="KINDn",
                   help="single cell such as NF2 (repeatable); overrides strategies/n")

    p = sub.add_parser("afpo", help="AFPO baseline runs")
    _common(p)

    p = sub.add_parser("robustness", help="random-controller robustness test")
    _common(p)
    p.add_argument("--champion", type=Path, required=True,
                   help="run directory, grid text file or SAM genome file")
    p.add_argument("--samples", type=int)

    p = sub.add_parser("stats", help="hypothesis tests on a CSV of run results")
    p.add_argument("csv", type=Path, help="e.g. finals.csv written by a sweep")
    p.add_argument("--test", choices=("all", "shapiro", "kruskal", "wilcoxon", "paired-t"),
                   default="all")
    p.add_argument("--group", default="label", help="column naming the group")
    p.add_argument("--value", default="final_best", help="column holding the observation")
    p.add_argument("--pair", default="seed", help="column pairing observations across groups")

    p = sub.add_parser("plot", help="SVG figures from sweep and robustness outputs")
    p.add_argument("--runs", type=Path, required=True, help="sweep output directory")
    p.add_argument("--out", type=Path, help="figure directory (default: <runs>/plots)")

    p = sub.add_parser("worker", help="serve evaluation jobs over TCP")
    p.add_argument("--listen", help="host:port (default $EVAL_LISTEN or 127.0.0.1:5555)")
    p.add_argument("--config", type=Path)
    p.add_argument("--preset", choices=("desk", "paper"))
    return parser


def resolve_config(args, mode: str) -> ExperimentConfig:
    cfg = ExperimentConfig.preset(args.preset or "paper")
    if getattr(args, "config", None):
        # an explicit --preset beats a preset line in the file
        cfg = parse_config_text(args.config.read_text(), cfg, honor_preset=not args.preset)
    cfg = replace(cfg, mode=mode)
    if getattr(args, "seeds", None):
        cfg = replace(cfg, seeds=parse_int_list(args.seeds))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "out", None):
        cfg = replace(cfg, out=str(args.out))
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "remote", None):
        cfg = replace(cfg, remotes=tuple(args.remote))
    if getattr(args, "generations", None):
        cfg = replace(cfg, generations=args.generations)
    if getattr(args, "samples", None):
        cfg = replace(cfg, samples=args.samples)
    return cfg


def _cmd_coevolve(args) -> int:
    cfg = resolve_config(args, "coevolve")
    cells = [CollaborationStrategy.parse(s) for s in args.strategy] or None
    res = run_sweep(cfg, cfg.out, cells=cells)
    _print_sweep(res)
    return 0 if not res.failures else 1


def _cmd_afpo(args) -> int:
    cfg = resolve_config(args, "afpo")
    res = run_afpo_sweep(cfg, cfg.out)
    _print_sweep(res)
    return 0 if not res.failures else 1


def _print_sweep(res) -> None:
    for (label, seed), rec in sorted(res.runs.items()):
        print(f"{label}\tseed={seed}\tfinal_best={rec.records[-1].best_fitness:.6g}")
    for (label, seed), err in sorted(res.failures.items()):
        print(f"{label}\tseed={seed}\tFAILED {err}")
    if res.out_dir is not None:
        print(f"aggregate: {res.out_dir / 'aggregate.csv'}")


def load_champion_grid(path: Path, cfg: ExperimentConfig) -> VoxelGrid:
    if path.is_dir():
        if (path / "champion_grid.txt").exists():
            return VoxelGrid.from_text((path / "champion_grid.txt").read_text())
        path = path / "champion_sam.genome"
    text = path.read_text()
    if text.lstrip().startswith("genome"):
        return decode_morphology(cppn.loads(text), cfg.canvas)
    return VoxelGrid.from_text(text)


def _cmd_robustness(args) -> int:
    cfg = resolve_config(args, "robustness")
    grid = load_champion_grid(args.champion, cfg)
    seed = cfg.seed_list[0]
    rep = run_robustness(grid, cfg.samples, seed, cfg.physics, workers=cfg.workers or 1)
    out = rep.write(cfg.out)
    (out / "champion_grid.txt").write_text(grid.to_text())
    write_manifest(out / "robustness_manifest.json", cfg,
                   {"morphology_id": rep.morphology_id, "seed": seed,
                    "density": "Gaussian kernel, Silverman bandwidth"})
    for k, v in rep.summary().items():
        print(f"{k}\t{v}")
    return 0


# -- stats ----------------------------------------------------------------------

def read_groups(path: Path, group: str, value: str, pair: str) -> dict[str, dict[str, float]]:
    """{group: {pair key: value}} from a CSV file."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out: dict[str, dict[str, float]] = {}
        for i, r in enumerate(rows):
            key = r[pair] if pair in r else str(i)
            out.setdefault(r[group], {})[key] = float(r[value])
    except (KeyError, ValueError, TypeError) as exc:
        raise MalformedRecord(f"{path}: {exc}") from exc
    if not out:
        raise MalformedRecord(f"{path}: no rows")
    return out


def stats_table(groups: dict[str, dict[str, float]], test: str = "all") -> list[list[str]]:
    rows = []

    def add(name, label, fn):
        try:
            r = fn()
            rows.append([name, label, f"{r.statistic:.6g}", f"{r.p_value:.6g}",
                         ",".join(map(str, r.n))])
        except (SamCoevoError, ValueError) as exc:
            rows.append([name, label, type(exc).__name__, "", ""])

    labels = sorted(groups)
    if test in ("all", "shapiro"):
        for g in labels:
            add("shapiro-wilk", g, lambda g=g: st.shapiro_wilk(list(groups[g].values())))
    if test in ("all", "kruskal") and len(labels) >= 2:
        try:
            res = st.kruskal_dunn([list(groups[g].values()) for g in labels])
            k = res.kruskal
            rows.append(["kruskal-wallis", "+".join(labels), f"{k.statistic:.6g}",
                         f"{k.p_value:.6g}", ",".join(map(str, k.n))])
            for i, j in itertools.combinations(range(len(labels)), 2):
                rows.append(["dunn-bonferroni", f"{labels[i]} vs {labels[j]}",
                             f"{res.z[i, j]:.6g}", f"{res.p_adjusted[i, j]:.6g}", ""])
        except (SamCoevoError, ValueError) as exc:
            rows.append(["kruskal-wallis", "+".join(labels), type(exc).__name__, "", ""])
    for a, b in itertools.combinations(labels, 2):
        common = sorted(set(groups[a]) & set(groups[b]))
        xa = [groups[a][k] for k in common]
        xb = [groups[b][k] for k in common]
        if test in ("all", "wilcoxon"):
            add("wilcoxon", f"{a} vs {b}", lambda: st.wilcoxon_signed_rank(xa, xb))
        if test in ("all", "paired-t"):
            add("paired-t", f"{a} vs {b}", lambda: st.paired_t(xa, xb))
    return rows


def _cmd_stats(args) -> int:
    groups = read_groups(args.csv, args.group, args.value, args.pair)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["test", "groups", "statistic", "p_value", "n"])
    for row in stats_table(groups, args.test):
        w.writerow(row)
    return 0


# -- plot -----------------------------------------------------------------------

def collect_outputs(root: Path):
    """Run records grouped by cell label, robustness reports and champion grids."""
    records: dict[str, list] = {}
    grids: dict[str, VoxelGrid] = {}
    for run_csv in sorted(root.glob("*/seed*/run.csv")):
        label = run_csv.parent.parent.name
        records.setdefault(label, []).append(read_run_csv(run_csv))
        grid_file = run_csv.parent / "champion_grid.txt"
        if grid_file.exists():
            grids[f"{label}_{run_csv.parent.name}"] = VoxelGrid.from_text(grid_file.read_text())
    robustness = {}
    for rcsv in sorted(root.rglob("robustness.csv")):
        label = rcsv.parent.name if rcsv.parent != root else "champion"
        grid_file = rcsv.parent / "champion_grid.txt"
        mid = morphology_id(VoxelGrid.from_text(grid_file.read_text())) if grid_file.exists() else ""
        rep = RobustnessReport.read(rcsv, mid)
        if rep.values:
            robustness[label] = rep
    return records, robustness, grids


def _cmd_plot(args) -> int:
    from .plots import emit_plots
    records, robustness, grids = collect_outputs(args.runs)
    out = args.out or (args.runs / "plots")
    for p in emit_plots(records, out, robustness, grids):
        print(p)
    return 0


def _cmd_worker(args) -> int:
    cfg = resolve_config(args, "coevolve")
    serve_worker(args.listen, cfg.physics)
    return 0


COMMANDS = {"coevolve": _cmd_coevolve, "afpo": _cmd_afpo, "robustness": _cmd_robustness,
            "stats": _cmd_stats, "plot": _cmd_plot, "worker": _cmd_worker}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (SamCoevoError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
