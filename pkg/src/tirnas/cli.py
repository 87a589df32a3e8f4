"""Command-line entry points: search, retrain, eval, export, count.

Exit codes: 0 success, 2 invalid configuration or input files,
3 search/retrain aborted on a non-finite loss.
"""

import os

# Pin BLAS threading before numpy loads so reruns reduce identically.
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig, config_hash, load_config, save_config, set_key
from .errors import ConfigError, ContractError, GenotypeError, SearchAborted, TirnasError

logger = logging.getLogger("tirnas")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tirnas",
                                     description="Cell-based architecture search for "
                                                 "thermal-infrared pedestrian tracking")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="config file of dotted key = value lines")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config key (repeatable)")

    p = sub.add_parser("search", help="run the architecture search stage")
    common(p)

    p = sub.add_parser("retrain", help="retrain a derived genotype from scratch")
    common(p)
    p.add_argument("--genotype", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="retrain checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate trained weights on held-out sequences")
    common(p)
    p.add_argument("--weights", type=Path)
    p.add_argument("--protocol", choices=["model", "gt", "random"])

    p = sub.add_parser("export", help="write DOT graphs for a genotype's cells")
    common(p)
    p.add_argument("--genotype", type=Path, required=True)

    p = sub.add_parser("count", help="parameter/MAC table for a genotype")
    common(p)
    p.add_argument("--genotype", type=Path, required=True)
    p.add_argument("--input-size", type=int, help="square input extent (default: data.eval_region)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    for pair in args.overrides:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, value = pair.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = str(args.out)
    return cfg.validate()


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    save_config(cfg, out / "config.cfg")
    return out


def cmd_search(args) -> int:
    from .search import run_search

    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    result = run_search(cfg, out)
    print(f"genotype: {result['genotype_path']}")
    print(f"log: {result['log_path']}")
    return EXIT_OK


def cmd_retrain(args) -> int:
    from .retrain import run_retrain

    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    result = run_retrain(cfg, args.genotype, out,
                         resume=str(args.resume) if args.resume else None)
    print(f"weights: {result['weights_path']}")
    print(f"log: {result['log_path']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import run_eval

    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    result = run_eval(cfg, args.weights, out, protocol=args.protocol)
    rep = result["overall"]
    print(f"protocol: {result['protocol']}")
    print(f"precision: {rep['precision']:.4f}")
    print(f"success: {rep['success']:.4f}")
    print(f"norm_precision: {rep['norm_precision']:.4f}")
    print(f"report: {result['report_path']}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .genotype import genotype_to_dot, load_genotype

    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    geno = load_genotype(args.genotype)
    chash = config_hash(cfg)
    for cell_type in ("normal", "reduction"):
        path = out / f"{cell_type}_cell.dot"
        path.write_text(f"// config_hash={chash} seed={cfg.seed}\n"
                        + genotype_to_dot(geno, cell_type))
        print(f"wrote {path}")
    return EXIT_OK


def cmd_count(args) -> int:
    import numpy as np

    from .cells import NetworkPlan, DiscreteNet
    from .costs import cost_table_csv, count_cost
    from .genotype import load_genotype

    cfg = resolve_config(args)
    out = _prepare_out(cfg)
    geno = load_genotype(args.genotype)
    plan = NetworkPlan(bottom=geno.bottom, cells_total=geno.cells_total,
                       stem_channels=geno.per_node_channels * 4,
                       embed_dim=cfg.net.embed_dim,
                       reduction_positions=geno.reduction_positions)
    net = DiscreteNet(geno, plan, np.random.default_rng(cfg.seed))
    size = args.input_size or cfg.data.eval_region
    cost = count_cost(net, (size, size))
    table = cost_table_csv(cost)
    path = out / "cost_table.csv"
    path.write_text(f"# config_hash={config_hash(cfg)} seed={cfg.seed} input={size}\n" + table)
    print(table, end="")
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {
    "search": cmd_search,
    "retrain": cmd_retrain,
    "eval": cmd_eval,
    "export": cmd_export,
    "count": cmd_count,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except SearchAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return EXIT_ABORTED
    except (ConfigError, GenotypeError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TirnasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
