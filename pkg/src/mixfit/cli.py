"""``mixfit`` command line: data generation, model fitting and the AD demo.

Exit codes: 0 on success, 1 for configuration or input errors, 2 for
numerical failures (divergence, singular or rank-deficient matrices).
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, MixfitError, NumericalError, ParseError

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2

# (name, type, default) for options that may come from flags or the config file
FIT_OPTIONS = [
    ("components", int, 2),
    ("restarts", int, 1),
    ("seed", int, 0),
    ("lr", float, None),
    ("max_iters", int, None),
    ("tol", float, 1e-8),
    ("line_search", bool, True),
    ("grid_points", int, 1000),
    ("factors", int, 1),
    ("isotropic", bool, False),
    ("floor", float, 1e-6),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_fit_flags(p, methods, default_method):
    p.add_argument("--in", dest="input", required=True, help="input CSV")
    p.add_argument("--out", help="output prefix (default: input path without extension)")
    p.add_argument("--method", choices=methods, default=None, help=f"algorithm (default {default_method})")
    p.add_argument("--components", type=int, help="number of mixture components G")
    p.add_argument("--restarts", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, help="learning rate (initial line-search step)")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float, help="relative-change stopping tolerance")
    p.add_argument("--line-search", dest="line_search", action="store_true", default=None)
    p.add_argument("--no-line-search", dest="line_search", action="store_false")
    p.add_argument("--floor", type=float, help="EM covariance floor, relative to the average variance")
    p.add_argument("--labels", action="store_true", help="input has a trailing integer label column")
    p.add_argument("--header", dest="header", action="store_true", default=None, help="input has a header row")
    p.add_argument("--no-header", dest="header", action="store_false")
    p.add_argument("--config", help="TOML file with default option values")
    p.add_argument("--fixed-clock", action="store_true", help="write 0 in the elapsed_ms column")
    p.set_defaults(default_method=default_method)


def build_parser():
    parser = _Parser(prog="mixfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-pinwheel", help="sample a wrapped (pinwheel) mixture in the plane")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--n", type=int, default=200, help="points per cluster")
    p.add_argument("--radial-std", type=float, default=0.3)
    p.add_argument("--tangential-std", type=float, default=0.05)
    p.add_argument("--swirl", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", action="store_true", help="append the true label column")
    p.add_argument("--out", required=True, help="output prefix; writes <prefix>.csv")

    p = sub.add_parser("gen-gmm", help="sample from a Gaussian mixture given as params JSON")
    p.add_argument("--params", required=True, help="params JSON (logits, means, cov_factors)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labels", action="store_true", help="append the component label column")
    p.add_argument("--out", required=True, help="output prefix; writes <prefix>.csv")

    _add_fit_flags(sub.add_parser("fit-gmm", help="fit a Gaussian mixture"),
                   ["em", "auto-gd", "auto-newton"], "em")
    p = sub.add_parser("fit-gmcm", help="fit a Gaussian mixture copula model")
    _add_fit_flags(p, ["auto", "auto-gd", "pem"], "auto")
    p.add_argument("--grid-points", type=int)
    p = sub.add_parser("fit-mfa", help="fit a mixture of factor analyzers")
    _add_fit_flags(p, ["auto-gd", "auto-newton", "em"], "auto-newton")
    p.add_argument("--factors", type=int, help="latent factors q (< p)")
    p.add_argument("--isotropic", action="store_true", default=None, help="PPCA noise (one variance per component)")

    p = sub.add_parser("demo-ad", help="value, gradient and tape size of the logistic-map recursion")
    p.add_argument("--logistic-n", type=int, required=True)
    p.add_argument("--x", type=float, default=0.25)
    p.add_argument("--backend", choices=ad.available_backends(), default=None)
    return parser


# config resolution


def _load_config(path, command):
    if not path:
        return {}
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    conf = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
    section = raw.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"config entry {command!r} must be a table")
    conf.update({k.replace("-", "_"): v for k, v in section.items()})
    return conf


def resolve_options(args):
    """Flags override the config file, which overrides built-in defaults."""
    conf = _load_config(args.config, args.command)
    known = {name for name, _, _ in FIT_OPTIONS} | {"method"}
    unknown = sorted(set(conf) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    opts = {}
    for name, typ, default in FIT_OPTIONS:
        if not hasattr(args, name):
            continue
        value = getattr(args, name)
        if value is None:
            value = conf.get(name, default)
        if value is not None:
            if typ is bool and not isinstance(value, bool):
                raise ConfigError(f"option {name} must be true or false")
            try:
                value = typ(value)
            except (TypeError, ValueError):
                raise ConfigError(f"option {name} must be of type {typ.__name__}") from None
        opts[name] = value
    opts["method"] = args.method or conf.get("method", args.default_method)
    return opts


# commands


def _prefix(args):
    return args.out if args.out else str(Path(args.input).with_suffix(""))


def _print_config(command, opts):
    print("CONFIG " + json.dumps({"command": command, **opts}, sort_keys=True))


def _result_line(loglik, iters, t0):
    ms = (time.perf_counter() - t0) * 1000.0
    return f"RESULT loglik={loglik!r} iters={iters} ms={ms:.1f}"


def _cmd_gen_pinwheel(args):
    from .dataio import PinwheelConfig, sample_pinwheel, write_csv

    cfg = PinwheelConfig(args.clusters, args.n, args.radial_std, args.tangential_std, args.swirl, args.seed)
    _print_config(args.command, cfg.__dict__)
    ds = sample_pinwheel(cfg)
    write_csv(ds, f"{args.out}.csv", labels=args.labels)
    print(f"wrote {args.out}.csv ({ds.x.shape[0]} rows)")


def _cmd_gen_gmm(args):
    from .dataio import read_params, sample_gmm, write_csv
    from .mixture import GmmParams

    if args.n < 1:
        raise ConfigError("--n must be positive")
    try:
        theta = read_params(args.params)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read params {args.params}: {exc}") from exc
    if not isinstance(theta, GmmParams):
        raise ConfigError("gen-gmm needs Gaussian mixture params (cov_factors)")
    _print_config(args.command, {"params": args.params, "n": args.n, "seed": args.seed})
    ds = sample_gmm(theta, args.n, args.seed)
    write_csv(ds, f"{args.out}.csv", labels=args.labels)
    print(f"wrote {args.out}.csv ({ds.x.shape[0]} rows)")


def _fit_config(opts, default_lr, default_iters):
    from .optimize import FitConfig

    return FitConfig(
        learning_rate=opts["lr"] if opts["lr"] is not None else default_lr,
        max_iters=opts["max_iters"] if opts["max_iters"] is not None else default_iters,
        tol=opts["tol"],
        line_search=opts["line_search"],
        seed=opts["seed"],
        restarts=opts["restarts"],
    )


def _em_config(opts, default_iters=1000):
    from .em import EmConfig

    return EmConfig(
        max_iters=opts["max_iters"] if opts["max_iters"] is not None else default_iters,
        tol=opts["tol"],
        seed=opts["seed"],
        restarts=opts["restarts"],
        min_covariance_floor=opts["floor"],
    )


class _Outputs:
    """Output paths plus an optional streaming trace sink."""

    def __init__(self, prefix, fixed_clock):
        self.params = f"{prefix}.params.json"
        self.trace = f"{prefix}.trace.csv"
        self.labels = f"{prefix}.labels.csv"
        self.clock = (lambda: 0.0) if fixed_clock else None
        self.writer = None

    def trace_factory(self, stream):
        """Factory for single-run fits: rows go to disk as they are produced."""
        from .dataio import TraceCsvWriter
        from .optimize import FitTrace

        if not stream:
            return lambda r: FitTrace(clock=self.clock)
        self.writer = TraceCsvWriter(self.trace)
        return lambda r: FitTrace(sink=self.writer, clock=self.clock)

    def save(self, params, trace, labels):
        from .dataio import write_labels, write_params, write_trace

        write_params(params, self.params)
        if self.writer is not None:
            self.writer.close()
        else:
            if self.clock is not None:
                k = trace.columns.index("elapsed_ms")
                trace.rows = [r[:k] + (0.0,) + r[k + 1:] for r in trace.rows]
            write_trace(trace, self.trace)
        write_labels(labels, self.labels)
        print(f"wrote {self.params}, {self.trace}, {self.labels}")


def _read_input(args):
    from .dataio import load_csv

    return load_csv(args.input, has_header=args.header, label_column=args.labels).x


def _cmd_fit_gmm(args):
    from .em import em_gmm
    from .mixture import component_logpdf_matrix, fit_gmm_auto

    opts = resolve_options(args)
    x = _read_input(args)
    _print_config(args.command, {**opts, "input": args.input})
    out = _Outputs(_prefix(args), args.fixed_clock)
    t0 = time.perf_counter()
    if opts["method"] == "em":
        params, trace = em_gmm(x, opts["components"], _em_config(opts))
        labels = np.argmax(component_logpdf_matrix(x, params), axis=1)
    else:
        method = "newton-cg" if opts["method"] == "auto-newton" else "gradient-ascent"
        fit = fit_gmm_auto(x, opts["components"], _fit_config(opts, 1e-3, 200 if method == "newton-cg" else 2000), method)
        params, trace, labels = fit.params, fit.trace, fit.labels
    out.save(params, trace, labels)
    print(_result_line(trace.final_loglik, trace.iterations, t0))


def _cmd_fit_gmcm(args):
    from .em import pem_gmcm
    from .gmcm import (
        GMCM_LEARNING_RATE, NEWTON_MAX_ITERS, cluster_labels, fit_gmcm_auto, rank_transform, recover_latent,
    )
    from .mixture import QuantileGridConfig

    opts = resolve_options(args)
    u = rank_transform(_read_input(args))
    _print_config(args.command, {**opts, "input": args.input})
    grid = QuantileGridConfig(points=opts["grid_points"])
    out = _Outputs(_prefix(args), args.fixed_clock)
    t0 = time.perf_counter()
    if opts["method"] == "pem":
        params, trace = pem_gmcm(u, opts["components"], _em_config(opts), grid)
        labels = cluster_labels(recover_latent(u, params, grid), params)
        loglik = trace.column("exact_loglik")[-1]
    else:
        method = "gradient-ascent" if opts["method"] == "auto-gd" else "newton-cg"
        fit_cfg = _fit_config(opts, GMCM_LEARNING_RATE, 2000 if method == "gradient-ascent" else NEWTON_MAX_ITERS)
        factory = out.trace_factory(stream=fit_cfg.restarts == 1)
        fit = fit_gmcm_auto(u, opts["components"], fit_cfg, grid, trace_factory=factory, method=method)
        params, trace, labels, loglik = fit.params, fit.trace, fit.labels, fit.loglik
    out.save(params, trace, labels)
    print(_result_line(loglik, trace.iterations, t0))


def _cmd_fit_mfa(args):
    from .em import em_mfa
    from .mfa import MFA_LEARNING_RATE, NEWTON_MAX_ITERS, fit_mfa_auto, mfa_responsibilities

    opts = resolve_options(args)
    x = _read_input(args)
    _print_config(args.command, {**opts, "input": args.input})
    out = _Outputs(_prefix(args), args.fixed_clock)
    t0 = time.perf_counter()
    if opts["method"] == "em":
        params, trace = em_mfa(x, opts["components"], opts["factors"], _em_config(opts), opts["isotropic"])
        labels = np.argmax(mfa_responsibilities(x, params), axis=1)
    else:
        method = "newton-cg" if opts["method"] == "auto-newton" else "gradient-ascent"
        fit_cfg = _fit_config(opts, MFA_LEARNING_RATE, NEWTON_MAX_ITERS if method == "newton-cg" else 2000)
        factory = out.trace_factory(stream=fit_cfg.restarts == 1)
        fit = fit_mfa_auto(x, opts["components"], opts["factors"], fit_cfg, method, opts["isotropic"],
                           trace_factory=factory)
        params, trace, labels = fit.params, fit.trace, fit.labels
    out.save(params, trace, labels)
    print(_result_line(trace.final_loglik, trace.iterations, t0))


def _cmd_demo_ad(args):
    if args.logistic_n < 1:
        raise ConfigError("--logistic-n must be >= 1")
    backend = ad.get_backend(args.backend)
    t0 = time.perf_counter()
    tape = backend.Tape()
    (x,) = tape.variables([args.x])
    out = ad.logistic_map(x, args.logistic_n)
    grad = tape.gradient(out)[0] if ad.is_var(out) else 1.0
    ms = (time.perf_counter() - t0) * 1000.0
    print(f"n={args.logistic_n} x={args.x!r} backend={backend.NAME}")
    print(f"value={ad.value(out)!r}")
    print(f"gradient={float(grad)!r}")
    print(f"tape_nodes={len(tape)}")
    print(f"ms={ms:.3f}")


COMMANDS = {
    "gen-pinwheel": _cmd_gen_pinwheel,
    "gen-gmm": _cmd_gen_gmm,
    "fit-gmm": _cmd_fit_gmm,
    "fit-gmcm": _cmd_fit_gmcm,
    "fit-mfa": _cmd_fit_mfa,
    "demo-ad": _cmd_demo_ad,
}


def run_cli(argv=None):
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"mixfit: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ParseError, MixfitError, OSError) as exc:
        print(f"mixfit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
