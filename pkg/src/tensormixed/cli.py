"""Command-line interface: ``tme simulate|fit|benchmark|report|check``.

Exit codes: 0 ok, 2 bad configuration, 3 I/O or format error,
4 fit finished without converging, 5 sample size below the necessary bound.
"""

import argparse
import csv
import logging
import os
import secrets
import sys
import warnings

import numpy as np

from . import io as tio
from .simlab import SimConfig, gen_truth, run_study
from .tme import (
    CovarianceCollapseError,
    ExistenceError,
    RankDeficiencyError,
    TmeConfig,
    existence_check,
    fit_tme,
    parse_structure,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NOCONV, EXIT_EXIST = 0, 2, 3, 4, 5

log = logging.getLogger("tme")


class ConfigError(ValueError):
    pass


def _int_list(text, n=None, name="value"):
    try:
        out = tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated integers, got {text!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(f"{name}: expected {n} integers, got {text!r}")
    if not out:
        raise ConfigError(f"{name}: empty list")
    return out


def _bool(text):
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# Options shared by several subcommands: name -> (converter, default, help).
OPTIONS = {
    "seed": (int, None, "root random seed (logged when omitted)"),
    "out_dir": (str, ".", "directory for output files"),
    "dims": (lambda s: _int_list(s, 3, "dims"), (30, 5, 5), "tensor dims J,K,L"),
    "n": (int, 1000, "number of samples"),
    "ranks": (lambda s: _int_list(s, 3, "ranks"), None, "fixed-effect ranks P1,Q1,R1"),
    "random_ranks": (lambda s: _int_list(s, 3, "random-ranks"), None, "random-effect ranks P2,Q2,R2"),
    "tol1": (float, 1e-4, "loop-1 tolerance"),
    "tol2": (float, 1e-4, "loop-2 tolerance"),
    "max_iter1": (int, 100, "loop-1 iteration cap"),
    "max_iter2": (int, 100, "loop-2 iteration cap"),
    "residual_structure": (str, "diagonal", "preset or per-mode list; @FILE gives a fixed diagonal profile"),
    "normalization": (str, "trace", "identifiability gauge: trace or det"),
    "replicates": (int, 20, "replicates per sample size"),
    "sizes": (lambda s: _int_list(s, None, "sizes"), (50, 200, 400, 800), "sample sizes"),
    "methods": (str, "tme,tfe,td", "comma-separated subset of tme,tfe,td"),
    "noise": (str, "generic", "residual recipe: generic or raman"),
    "fixed_scale": (float, 100.0, "std of the fixed-effect core entries"),
    "random_var": (float, 2.5, "mean per-entry random-effect variance"),
    "noise_var": (float, 10.0, "mean per-entry residual variance"),
    "jobs": (int, 1, "worker processes for benchmark"),
    "no_timing": (_bool, False, "omit wall-clock columns so outputs are byte-stable"),
    "labels": (str, None, "comma-separated labels for report rows"),
}

COMMAND_OPTIONS = {
    "simulate": ("seed", "out_dir", "dims", "n", "ranks", "random_ranks", "noise",
                 "fixed_scale", "random_var", "noise_var"),
    "fit": ("seed", "out_dir", "ranks", "random_ranks", "tol1", "tol2", "max_iter1", "max_iter2",
            "residual_structure", "normalization", "no_timing"),
    "benchmark": ("seed", "out_dir", "dims", "ranks", "random_ranks", "tol1", "tol2", "max_iter1",
                  "max_iter2", "residual_structure", "normalization", "replicates", "sizes",
                  "methods", "noise", "fixed_scale", "random_var", "noise_var", "jobs", "no_timing"),
    "report": ("out_dir", "labels"),
    "check": ("dims", "n", "residual_structure"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tme", description="Tensor mixed effects models")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, names in COMMAND_OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="key = value file; command-line flags take precedence")
        if cmd in ("fit", "check"):
            p.add_argument("input", nargs="?" if cmd == "check" else None, help="tensor batch file")
        if cmd == "report":
            p.add_argument("inputs", nargs="+", help="fitted-model files")
        for name in names:
            flag = "--" + name.replace("_", "-")
            if name == "no_timing":
                p.add_argument(flag, action="store_const", const=True, default=None,
                               help=OPTIONS[name][2])
            else:
                p.add_argument(flag, default=None, help=OPTIONS[name][2])
    return parser


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for num, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{num}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def resolve(args):
    """Merge command-line flags over config-file values over defaults."""
    names = COMMAND_OPTIONS[args.command]
    file_values = {}
    if getattr(args, "config", None):
        try:
            file_values = read_config(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        unknown = sorted(set(file_values) - set(names))
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    opts = {}
    for name in names:
        conv, default, _ = OPTIONS[name]
        raw = getattr(args, name, None)
        if raw is None:
            raw = file_values.get(name)
        if raw is None:
            opts[name] = default
            continue
        try:
            opts[name] = raw if raw is True else conv(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {name}: {raw!r} ({exc})") from None
    if args.command in ("simulate", "benchmark") and opts["seed"] is None:
        opts["seed"] = secrets.randbits(63)
        log.warning("no --seed given; using seed %d", opts["seed"])
    return opts


def _structure(text):
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1 and not parts[0].startswith("@"):
        return parse_structure(parts[0])
    if len(parts) == 1:
        parts = parts * 3
    out = []
    for p in parts:
        if p.startswith("@"):
            try:
                out.append(np.loadtxt(p[1:], dtype=float, ndmin=1))
            except OSError as exc:
                raise OSError(f"cannot read diagonal profile: {exc}") from None
        else:
            out.append(p)
    return parse_structure(out)


def tme_config(opts):
    norm = {"det": "determinant"}.get(opts["normalization"], opts["normalization"])
    return TmeConfig(
        ranks=opts["ranks"],
        random_ranks=opts["random_ranks"],
        loop1_tol=opts["tol1"],
        loop2_tol=opts["tol2"],
        loop1_max=opts["max_iter1"],
        loop2_max=opts["max_iter2"],
        residual_structure=_structure(opts["residual_structure"]),
        normalization=norm,
    )


def sim_config(opts, n=None):
    kw = dict(
        dims=opts["dims"],
        n=n if n is not None else opts.get("n", 1000),
        seed=opts["seed"],
        noise=opts["noise"],
        fixed_scale=opts["fixed_scale"],
        random_var=opts["random_var"],
        noise_var=opts["noise_var"],
    )
    if opts.get("ranks") is not None:
        kw["ranks"] = opts["ranks"]
    if opts.get("random_ranks") is not None:
        kw["random_ranks"] = opts["random_ranks"]
    if "replicates" in opts:
        kw["replicates"] = opts["replicates"]
    return SimConfig(**kw)


def _out_path(opts, name):
    os.makedirs(opts["out_dir"], exist_ok=True)
    return os.path.join(opts["out_dir"], name)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args, opts):
    cfg = sim_config(opts)
    truth = gen_truth(cfg, np.random.default_rng(cfg.seed))
    samples = _out_path(opts, "samples.txt")
    tio.write_tensors(samples, truth.samples)
    tio.write_truth(_out_path(opts, "truth.txt"), truth)
    J, K, L = cfg.dims
    print(f"wrote {cfg.n} samples of {J}x{K}x{L} to {samples} (seed {cfg.seed})")
    return EXIT_OK


def _print_verdict(v, dims, n):
    J, K, L = dims
    print(f"dims {J}x{K}x{L}, N={n}")
    print(f"necessary bound max(J/KL, K/JL, L/JK) + 1 = {v.necessary_bound:.6g}")
    print(f"verdict: {v.status}: {v.message}")


def cmd_check(args, opts):
    structure = _structure(opts["residual_structure"])
    if args.input:
        y = tio.read_tensors(args.input)
        n, dims = y.shape[0], y.shape[1:]
    else:
        dims, n = opts["dims"], opts["n"]
    v = existence_check(*dims, n, structure)
    _print_verdict(v, dims, n)
    return EXIT_EXIST if v.status == "necessary_violated" else EXIT_OK


def cmd_fit(args, opts):
    y = tio.read_tensors(args.input)
    cfg = tme_config(opts)
    n, J, K, L = y.shape
    v = existence_check(J, K, L, n, cfg.residual_structure)
    if v.status == "necessary_violated":
        _print_verdict(v, (J, K, L), n)
        return EXIT_EXIST
    if cfg.ranks is None or cfg.random_ranks is None:
        raise ConfigError("fit needs --ranks and --random-ranks")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if v.status != "ok":
            log.warning(v.message)
        fit = fit_tme(y, "auto", cfg)
    timing = not opts["no_timing"]
    tio.write_fit(_out_path(opts, "fit.txt"), fit, timing)
    with open(_out_path(opts, "trace.csv"), "w") as fh:
        fh.write(tio.format_trace(fit.trace1, fit.trace2, timing))
    for loop, tr in ((1, fit.trace1), (2, fit.trace2)):
        last = tr.records[-1]
        status = "converged" if tr.converged else "not converged"
        print(
            f"loop {loop}: {tr.iterations} iterations, {status}, indices "
            f"{last.index_sigma:.3e} {last.index_psi:.3e} {last.index_omega:.3e}"
        )
    print(f"loglik {fit.loglik:.10g}")
    return EXIT_OK if fit.converged else EXIT_NOCONV


def cmd_benchmark(args, opts):
    methods = tuple(m.strip().upper() for m in opts["methods"].split(",") if m.strip())
    if any(n < 1 for n in opts["sizes"]) or opts["replicates"] < 1:
        raise ConfigError("sizes and replicates must be positive")
    cfg = sim_config(opts, n=max(opts["sizes"]))
    tcfg = tme_config(dict(opts, ranks=cfg.ranks, random_ranks=cfg.random_ranks))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        report = run_study(cfg, opts["sizes"], opts["replicates"], methods, tcfg, opts["jobs"])
    outputs = {"accuracy.csv": report.accuracy_csv(), "prediction.csv": report.prediction_csv()}
    if not opts["no_timing"]:
        outputs["timings.csv"] = report.timings_csv()
    for name, text in outputs.items():
        with open(_out_path(opts, name), "w") as fh:
            fh.write(text)
    failures = [r for r in report.records if r["error"]]
    for r in failures:
        log.warning("n=%d rep=%d %s: %s", r["n"], r["rep"], r["method"], r["error"])
    sys.stdout.write(outputs["prediction.csv"])
    return EXIT_OK


REPORT_COLUMNS = (
    "label",
    "psi_r_diag_range", "psi_e_diag_range", "omega_r_diag_range", "omega_e_diag_range",
    "psi_r_12", "psi_r_13", "omega_r_12", "omega_r_13",
)


def covariance_diagnostics(rec):
    """Diagonal ranges and leading off-diagonal entries of a parsed fit."""

    def rng(m):
        d = np.diag(m)
        return float(d.max() - d.min())

    def entry(m, i, j):
        return float(m[i, j]) if max(i, j) < m.shape[0] else float("nan")

    return (
        rng(rec["PSI_R"]), rng(rec["PSI_E"]), rng(rec["OMEGA_R"]), rng(rec["OMEGA_E"]),
        entry(rec["PSI_R"], 0, 1), entry(rec["PSI_R"], 0, 2),
        entry(rec["OMEGA_R"], 0, 1), entry(rec["OMEGA_R"], 0, 2),
    )


def cmd_report(args, opts):
    labels = opts["labels"].split(",") if opts["labels"] else [
        os.path.splitext(os.path.basename(p))[0] for p in args.inputs
    ]
    if len(labels) != len(args.inputs):
        raise ConfigError("need one label per fit file")
    rows = []
    for label, path in zip(labels, args.inputs):
        rows.append([label] + [format(v, ".10g") for v in covariance_diagnostics(tio.read_fit(path))])
    out = _out_path(opts, "report.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)
    with open(out) as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "benchmark": cmd_benchmark,
    "report": cmd_report,
    "check": cmd_check,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        opts = resolve(args)
        return COMMANDS[args.command](args, opts)
    except ExistenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EXIST
    except (tio.FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CovarianceCollapseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    except (ConfigError, ValueError, RankDeficiencyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
