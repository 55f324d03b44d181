"""``causal-chips`` command line: extract -> pack -> embed -> confound / hetero.

Exit codes: 0 success, 1 usage error, 2 data error. Every option can also
come from a JSON ``--config`` file; flags given on the command line win.
"""

import argparse
import contextlib
import csv
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .confound import ModelConfig, SalienceOptions, analyze_image_confounding
from .embed import EmbeddingConfig, embed_corpus
from .errors import CausalChipsError
from .frame import read_frame
from .geochip import ChipRequest, extract_from_pool, read_chip_csvs, scan_chip_dir
from .hetero import HeterogeneityConfig, analyze_image_heterogeneity
from .recordstore import RecordReader, RecordWriter, validate
from .synth import SynthSpec, gen_confounded, gen_heterogeneous, write_synth

log = logging.getLogger("causalchips")

REQUIRED = {
    "extract": ["points", "pool", "out"],
    "pack": ["out"],
    "validate": ["file"],
    "embed": ["records", "out"],
    "confound": ["records", "data", "out"],
    "hetero": ["records", "data", "out"],
    "synth": ["kind", "out_dir"],
}


class UsageError(Exception):
    pass


@contextlib.contextmanager
def _option_values():
    """Turn a ValueError from config validation into a usage error."""
    try:
        yield
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", help="JSON file of option values (flags override)")
    p.add_argument("--seed", type=int, default=0, help="master seed for all randomness (default: %(default)s)")
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: all cores)")
    p.add_argument("--log-level", choices=["error", "info", "debug"], default="info",
                   help="stderr log level (default: %(default)s)")


def _embedding_opts(p):
    p.add_argument("--dim", type=int, default=100, help="embedding dimension D (default: %(default)s)")
    p.add_argument("--kernel", type=int, default=3, help="odd spatial kernel size (default: %(default)s)")
    p.add_argument("--temporal-kernel", type=int, default=2,
                   help="temporal kernel size for sequences (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=32, help="images per batch; throughput only (default: %(default)s)")


def _salience_arg(text):
    opts = {"patch": 8, "stride": 4}
    if text in ("", "default"):
        return opts
    for part in text.split(","):
        name, _, value = part.partition("=")
        if name not in opts or not value.isdigit():
            raise argparse.ArgumentTypeError(f"bad salience spec {part!r}; use patch=P,stride=S")
        opts[name] = int(value)
    return opts


def build_parser():
    parser = _Parser(prog="causal-chips", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("extract", help="cut chips around points from a raster pool")
    p.add_argument("--points", help="CSV with columns key,lon,lat (required)")
    p.add_argument("--pool", help="comma-separated raster paths, searched in order (required)")
    p.add_argument("--width", type=int, default=500, help="chip width in pixels (default: %(default)s)")
    p.add_argument("--bands", default="all", help="'all' or comma-separated 1-based bands (default: %(default)s)")
    p.add_argument("--pad", type=float, default=None, help="pad edge-crossing windows with this value")
    p.add_argument("--format", choices=["csv", "record"], default="csv", help="output format (default: %(default)s)")
    p.add_argument("--out", help="output directory (required)")
    _common(p)

    p = sub.add_parser("pack", help="pack chips into a record file")
    p.add_argument("--chips", help="directory of Key{key}_BAND{band}.csv files")
    p.add_argument("--points", help="CSV key,lon,lat to extract directly (with --pool)")
    p.add_argument("--pool", help="comma-separated raster paths")
    p.add_argument("--width", type=int, default=500, help="chip width in pixels (default: %(default)s)")
    p.add_argument("--bands", default="all", help="'all' or comma-separated 1-based bands (default: %(default)s)")
    p.add_argument("--pad", type=float, default=None, help="pad edge-crossing windows with this value")
    p.add_argument("--out", help="record file to write (required)")
    _common(p)

    p = sub.add_parser("validate", help="check CRCs and index of a record file")
    p.add_argument("file", nargs="?", help="record file")
    _common(p)

    p = sub.add_parser("embed", help="random-convolution embeddings for every record")
    p.add_argument("--records", help="record file (required)")
    p.add_argument("--keys", help="optional text file of keys, one per line (default: all, file order)")
    _embedding_opts(p)
    p.add_argument("--out", help="embeddings CSV (required)")
    _common(p)

    p = sub.add_parser("confound", help="image-deconfounded ATE")
    p.add_argument("--records", help="record file of unit images (required)")
    p.add_argument("--data", help="frame CSV key,w,y,lon,lat,x1..xP (required)")
    _embedding_opts(p)
    p.add_argument("--nboot", type=int, default=200, help="bootstrap replicates (default: %(default)s)")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds (default: %(default)s)")
    p.add_argument("--lambda", dest="l2_lambda", type=float, default=1.0,
                   help="ridge strength on standardised features (default: %(default)s)")
    p.add_argument("--clip-eps", type=float, default=0.01, help="propensity clipping bound (default: %(default)s)")
    p.add_argument("--plain-bootstrap", action="store_true", help="resample units, not image clusters")
    p.add_argument("--salience", type=_salience_arg, default=None, metavar="patch=P,stride=S",
                   help="write occlusion salience grids")
    p.add_argument("--salience-units", type=int, default=6, help="units to map (default: %(default)s)")
    p.add_argument("--out", help="result JSON (required)")
    p.add_argument("--out-dir", help="directory for salience grids (default: next to --out)")
    p.add_argument("--tag", default="run", help="prefix for salience files (default: %(default)s)")
    _common(p)

    p = sub.add_parser("hetero", help="image-driven effect clusters")
    p.add_argument("--records", help="record file of unit images (required)")
    p.add_argument("--data", help="frame CSV key,w,y,lon,lat,x1..xP (required)")
    p.add_argument("--k", type=int, default=2, help="number of effect clusters (default: %(default)s)")
    _embedding_opts(p)
    p.add_argument("--nboot", type=int, default=200, help="bootstrap replicates (default: %(default)s)")
    p.add_argument("--max-iter", type=int, default=500, help="EM iteration cap (default: %(default)s)")
    p.add_argument("--tol", type=float, default=1e-8, help="relative objective tolerance (default: %(default)s)")
    p.add_argument("--gate-lambda", type=float, default=1.0, help="gate ridge strength (default: %(default)s)")
    p.add_argument("--conf-level", type=float, default=0.05,
                   help="lower percentile for clusterProbs_lowerConf (default: %(default)s)")
    p.add_argument("--transport", help="CSV with a key column of out-of-sample units")
    p.add_argument("--transport-records", help="record file for --transport keys (default: --records)")
    p.add_argument("--salience", type=_salience_arg, default=None, metavar="patch=P,stride=S",
                   help="write occlusion salience grids for top exemplars")
    p.add_argument("--out", help="result JSON (required)")
    p.add_argument("--out-dir", help="directory for exemplar lists and grids (default: next to --out)")
    p.add_argument("--tag", default="run", help="prefix for salience files (default: %(default)s)")
    _common(p)

    p = sub.add_parser("synth", help="synthetic chips with known ground truth")
    p.add_argument("kind", nargs="?", choices=["confounded", "hetero"], help="scenario")
    p.add_argument("--n", type=int, default=2000, help="units (default: %(default)s)")
    p.add_argument("--size", type=int, default=32, help="chip width (default: %(default)s)")
    p.add_argument("--bands", type=int, default=1, help="bands per chip (default: %(default)s)")
    p.add_argument("--tau", default=None, help="effect, or comma list of cluster effects (default: 1 / 1,3)")
    p.add_argument("--gamma", type=float, default=4.0, help="confounding strength (default: %(default)s)")
    p.add_argument("--sigma", type=float, default=0.5, help="outcome noise sd (default: %(default)s)")
    p.add_argument("--out-dir", help="output directory (required)")
    _common(p)
    return parser


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    """Parse flags, merge a JSON config under them, check required options."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        parser.exit(1, "causal-chips: error: a command is required\n")
    sub = _subparser(parser, args.command)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            sub.error(f"--config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            sub.error("--config must hold a JSON object")
        dests = {}
        for action in sub._actions:
            if action.dest in ("help", "config"):
                continue
            dests[action.dest] = action
            for opt in action.option_strings:
                dests[opt.lstrip("-")] = action
        defaults = {}
        for key, value in cfg.items():
            if key not in dests:
                sub.error(f"unknown config key {key!r}")
            action = dests[key]
            if action.type is not None and value is not None and not isinstance(value, bool):
                try:
                    value = action.type(value if isinstance(value, (int, float)) else str(value))
                except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                    sub.error(f"config key {key!r}: {exc}")
            defaults[action.dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for dest in REQUIRED[args.command]:
        if getattr(args, dest, None) in (None, ""):
            flag = dest if dest in ("file", "kind") else "--" + dest.replace("_", "-")
            sub.error(f"missing required option {flag}")
    return args


def _effective_config(args):
    return {k: v for k, v in sorted(vars(args).items()) if k != "command"}


def _write_json(path, payload):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def _bands(text):
    if text == "all":
        return "all"
    try:
        return [int(b) for b in text.split(",")]
    except ValueError:
        raise UsageError(f"--bands must be 'all' or integers, got {text!r}")


def _read_points(path, width, bands):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"key", "lon", "lat"} <= set(rows[0]):
        raise CausalChipsError(f"{path}: columns key,lon,lat required")
    return [ChipRequest(r["key"], float(r["lon"]), float(r["lat"]), width, bands) for r in rows]


def _embed_config(args):
    with _option_values():
        return EmbeddingConfig(args.dim, args.kernel, args.temporal_kernel, args.seed)


def cmd_extract(args):
    requests = _read_points(args.points, args.width, _bands(args.bands))
    report = extract_from_pool(requests, args.pool.split(","), args.out, args.format, args.pad, args.threads)
    _write_json(os.path.join(args.out, "extract_report.json"), report.to_dict())
    log.info("%d matched, %d unmatched", len(requests) - len(report.unmatched), len(report.unmatched))
    return 0


def cmd_pack(args):
    if bool(args.chips) == bool(args.points):
        raise UsageError("give exactly one of --chips or --points")
    if args.points:
        if not args.pool:
            raise UsageError("--points needs --pool")
        requests = _read_points(args.points, args.width, _bands(args.bands))
        out_dir = os.path.dirname(os.path.abspath(args.out))
        report = extract_from_pool(requests, args.pool.split(","), out_dir, "record", args.pad,
                                   args.threads, record_path=args.out)
        if report.unmatched:
            log.info("unmatched keys: %s", ",".join(report.unmatched))
        return 0
    found = scan_chip_dir(args.chips)
    if not found:
        raise CausalChipsError(f"no Key*_BAND*.csv files in {args.chips}")
    with RecordWriter(args.out) as writer:
        for key, bands in found.items():
            writer.write(key, read_chip_csvs(args.chips, key, bands))
    log.info("packed %d chips into %s", len(found), args.out)
    return 0


def cmd_validate(args):
    report = validate(args.file)
    json.dump(report.to_dict(), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0 if report.ok else 2


def cmd_embed(args):
    config = _embed_config(args)
    reader = RecordReader(args.records)
    if args.keys:
        with open(args.keys) as fh:
            keys = [ln.strip() for ln in fh if ln.strip()]
    else:
        keys = reader.keys
    emb = embed_corpus(reader, keys, config, batch_size=args.batch_size, threads=args.threads)
    emb.to_csv(args.out)
    return 0


def _write_grids(grids, out_dir, tag):
    os.makedirs(out_dir, exist_ok=True)
    for key, grid in grids.items():
        stem = os.path.join(out_dir, f"{tag}_salience_{key}")
        grid.to_csv(stem + ".csv")
        grid.to_pgm(stem + ".pgm")


def cmd_confound(args):
    embed_config = _embed_config(args)
    with _option_values():
        model_config = ModelConfig(
            l2_lambda=args.l2_lambda, clip_eps=args.clip_eps, folds=args.folds, n_boot=args.nboot,
            cluster_bootstrap=not args.plain_bootstrap,
        )
        salience = None
        if args.salience:
            salience = SalienceOptions(args.salience["patch"], args.salience["stride"], args.salience_units)
    frame = read_frame(args.data)
    result = analyze_image_confounding(
        frame, RecordReader(args.records), embed_config, model_config, args.seed, salience,
        args.threads, args.batch_size,
    )
    payload = result.to_dict()
    payload["config"] = _effective_config(args)
    _write_json(args.out, payload)
    if result.salience:
        _write_grids(result.salience, args.out_dir or os.path.dirname(os.path.abspath(args.out)), args.tag)
    return 0


def cmd_hetero(args):
    embed_config = _embed_config(args)
    with _option_values():
        config = HeterogeneityConfig(
            k_clusters=args.k, max_em_iters=args.max_iter, tol=args.tol, n_boot=args.nboot, seed=args.seed,
            gate_lambda=args.gate_lambda, conf_level=args.conf_level,
        )
    frame = read_frame(args.data)
    transport_keys = None
    if args.transport:
        with open(args.transport, newline="") as fh:
            transport_keys = [r["key"] for r in csv.DictReader(fh)]
    patch = stride = None
    if args.salience:
        patch, stride = args.salience["patch"], args.salience["stride"]
    result = analyze_image_heterogeneity(
        frame, RecordReader(args.records), embed_config, config,
        transport_keys=transport_keys,
        transport_source=RecordReader(args.transport_records) if args.transport_records else None,
        salience_patch=patch, salience_stride=stride or 4,
        threads=args.threads, batch_size=args.batch_size,
    )
    payload = result.to_dict()
    payload["config"] = _effective_config(args)
    _write_json(args.out, payload)
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    for cluster, rows in result.exemplars.items():
        with open(os.path.join(out_dir, f"cluster{cluster}_exemplars.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "gate_prob"])
            for key, prob in rows:
                writer.writerow([key, repr(prob)])
    if result.salience:
        _write_grids(result.salience, out_dir, args.tag)
    return 0


def cmd_synth(args):
    with _option_values():
        if args.kind == "confounded":
            tau = float(args.tau) if args.tau else 1.0
        else:
            tau = [float(t) for t in args.tau.split(",")] if args.tau else [1.0, 3.0]
        spec = SynthSpec(args.n, args.size, args.bands, tau, args.gamma, args.sigma, args.seed)
    if args.kind == "confounded":
        data = gen_confounded(spec)
    else:
        data = gen_heterogeneous(spec)
    write_synth(data, args.out_dir)
    return 0


COMMANDS = {
    "extract": cmd_extract,
    "pack": cmd_pack,
    "validate": cmd_validate,
    "embed": cmd_embed,
    "confound": cmd_confound,
    "hetero": cmd_hetero,
    "synth": cmd_synth,
}


def run(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level={"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}[args.log_level],
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.threads is not None and args.threads < 1:
        print("causal-chips: error: --threads must be >= 1", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"causal-chips {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (CausalChipsError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
