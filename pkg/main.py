import argparse
import logging
import sys

from dotenv import load_dotenv

from errors import ConfigError, LabError
from runs import diagnose_run, solve_run, stats_report, tb_run
from settings import ExperimentConfig, apply_env_overrides, load_config, with_overrides
from sweeps import run_sweep
from tables import check_table, format_versions

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 4


def parse_seeds(raw: str) -> list[int]:
    """'0,1,5' or '0-4' (inclusive) or a mix: '0-2,7'."""
    seeds: list[int] = []
    for token in raw.replace(" ", "").split(","):
        if not token:
            continue
        try:
            if "-" in token[1:]:
                lo, hi = token.split("-", 1)
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(token))
        except ValueError as exc:
            raise ConfigError(f"--seeds: cannot parse {token!r}") from exc
    return seeds


def parse_window(raw: str) -> tuple[int, int]:
    """Half-open index range 'lo:hi'."""
    try:
        lo, hi = (int(part) for part in raw.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--window expects lo:hi integers, got {raw!r}") from exc
    if not 0 <= lo < hi:
        raise ConfigError(f"--window needs 0 <= lo < hi, got {raw!r}")
    return lo, hi


def parse_energy_window(raw: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in raw.split(":"))
    except ValueError as exc:
        raise ConfigError(f"--energy-window expects lo:hi numbers, got {raw!r}") from exc
    if not lo < hi:
        raise ConfigError(f"--energy-window needs lo < hi, got {raw!r}")
    return lo, hi


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = apply_env_overrides(load_config(args.config))
    return with_overrides(
        cfg,
        seeds=parse_seeds(args.seeds) if getattr(args, "seeds", None) else None,
        root=getattr(args, "out", None),
        workers=getattr(args, "threads", None),
    )


def cmd_solve(args: argparse.Namespace) -> int:
    cfg = load_experiment(args)
    result = solve_run(cfg, force=args.force)
    print(f"{result.status}: {result.run_dir}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_experiment(args)
    result = run_sweep(cfg, force=args.force)
    for name, path in result.tables.items():
        print(f"{name}: {path}")
    if result.partial:
        print(f"partial sweep: {result.n_failed} of {len(result.statuses)} cells failed ({result.sweep_dir})")
        return EXIT_PARTIAL
    print(f"ok: {result.sweep_dir}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    n_bins, s_max = 40, 5.0
    if args.config:
        analysis = load_config(args.config).analysis
        n_bins, s_max = analysis.hist_bins, analysis.hist_s_max
    stats = stats_report(
        args.source,
        index_window=parse_window(args.window) if args.window else None,
        energy_window=parse_energy_window(args.energy_window) if args.energy_window else None,
        out_dir=args.out,
        n_bins=n_bins,
        s_max=s_max,
    )
    for key, value in stats.summary().items():
        print(f"{key}: {value}")
    return EXIT_OK


def cmd_tb(args: argparse.Namespace) -> int:
    cfg = load_experiment(args)
    out = tb_run(cfg, compare=args.compare)
    print(f"ok: {out}")
    return EXIT_OK


def cmd_diag(args: argparse.Namespace) -> int:
    count = diagnose_run(args.run_dir)
    print(f"rediagnosed {count} states in {args.run_dir}")
    return EXIT_OK


def cmd_schema(args: argparse.Namespace) -> int:
    if not args.check:
        for name, version in format_versions().items():
            print(f"{name}: {version}")
        return EXIT_OK
    status = EXIT_OK
    for path in args.check:
        problems = check_table(path)
        if problems:
            status = ConfigError.exit_code
            for problem in problems:
                print(f"{path}: {problem}")
        else:
            print(f"{path}: ok")
    return status


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Eigenstates of disordered periodic-well lattices: solve, sweep, analyse."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--out", help="output root (overrides config and LOCLAB_OUTPUT_ROOT)")
        p.add_argument("--threads", type=int, help="worker cap")
        p.add_argument("--seeds", help="disorder seeds, e.g. 0,1,2 or 0-4")

    p = sub.add_parser("solve", help="solve one configuration")
    with_config(p)
    p.add_argument("--force", action="store_true", help="recompute an up-to-date run")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", help="run the (L, strength, seed) ensemble")
    with_config(p)
    p.add_argument("--force", action="store_true", help="discard finished cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("stats", help="spacing-ratio statistics of a run or an energy file")
    p.add_argument("source", help="run directory or energy file")
    p.add_argument("--window", help="index window lo:hi (half-open)")
    p.add_argument("--energy-window", help="energy window lo:hi (closed)")
    p.add_argument("--config", help="take histogram bins from this config")
    p.add_argument("--out", help="directory for the summary and histogram CSVs")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("tb", help="tight-binding reduction of a configuration")
    with_config(p)
    p.add_argument("--compare", help="continuum run directory to compare against")
    p.set_defaults(func=cmd_tb)

    p = sub.add_parser("diag", help="recompute diagnostics from stored states")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("schema", help="print file-format versions or check CSV files")
    p.add_argument("--check", nargs="+", metavar="FILE", help="validate CSVs against the schema table")
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_arg_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except LabError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s: %s", exc.filename or "I/O", exc.strerror)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
