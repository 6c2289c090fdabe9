"""Command line interface: ``fabtest {fit-tensor,fab-test,simulate,report}``.

Settings come from flags, optionally backed by a ``key = value`` config
file (``--config``); flags win. Exit status is 0 on success, 1 for invalid
input or usage and 2 when a numerical step fails.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .align import align_chain, posterior_point_estimates
from .errors import NumericalError, ValidationError
from .linking import FeatureSource, run_fab_analysis
from .sim import FDR_GRID, SimDesign, run_null_experiment, run_power_experiment
from .tensor import ChainConfig, run_chain

logger = logging.getLogger("fabtest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunConfig:
    """Validated settings for one command."""

    command: str
    seed: int = 0
    d_u: int = 3
    d_v: int = 3
    iters: int = 1000
    burn_in: int = 500
    thin: int = 1
    target_fdr: float = 0.1
    intercept: bool = True
    impute: bool = True
    paths: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.seed < 0:
            raise ValidationError("seed must be nonnegative")
        if not 0.0 < self.target_fdr < 1.0:
            raise ValidationError("target FDR must lie in (0, 1)")
        if self.command == "fit-tensor":
            ChainConfig(self.d_u, self.d_v, self.iters, self.burn_in, self.thin, self.seed)


# config-file keys and the types they parse to; flags override them
_CONFIG_TYPES = {
    "seed": int, "d_u": int, "d_v": int, "iters": int, "burn_in": int, "thin": int,
    "target_fdr": float, "datasets": int, "workers": int,
}
_BOOL_KEYS = ("intercept", "impute", "paper_scale", "zero_guide")


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


def _merge_config(args):
    """Fill unset flags from ``--config`` and return the likelihood declarations."""
    config = io.read_config(args.config) if getattr(args, "config", None) else {}
    for key, value in config.items():
        if key.startswith("modality."):
            continue
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ValidationError(f"{args.config}: unknown setting {key!r} for {args.command}")
        if getattr(args, attr) is not None:
            continue
        try:
            if attr in _BOOL_KEYS:
                parsed = _parse_bool(value)
            else:
                parsed = _CONFIG_TYPES.get(attr, str)(value)
        except ValueError:
            raise ValidationError(f"{args.config}: bad value for {key}: {value!r}") from None
        setattr(args, attr, parsed)
    liks = io.modality_likelihoods(config)
    for decl in getattr(args, "modality", None) or []:
        if "=" not in decl:
            raise ValidationError(f"--modality expects name=likelihood, got {decl!r}")
        name, lik = decl.split("=", 1)
        liks[name.strip()] = lik.strip()
    return liks


def _value(args, name, default):
    v = getattr(args, name, None)
    return default if v is None else v


def _run_config(args, **paths):
    return RunConfig(
        command=args.command,
        seed=_value(args, "seed", 0),
        d_u=_value(args, "d_u", 3), d_v=_value(args, "d_v", 3),
        iters=_value(args, "iters", 1000), burn_in=_value(args, "burn_in", 500),
        thin=_value(args, "thin", 1), target_fdr=_value(args, "target_fdr", 0.1),
        intercept=_value(args, "intercept", True), impute=_value(args, "impute", True),
        paths=paths,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_fit_tensor(args):
    liks = _merge_config(args)
    cfg = _run_config(args, data=args.data, out=args.out)
    data = io.load_tensor(args.data, liks)
    chain_cfg = ChainConfig(cfg.d_u, cfg.d_v, cfg.iters, cfg.burn_in, cfg.thin, cfg.seed,
                            impute=cfg.impute, debug=bool(args.debug))
    logger.info("tensor %s, %d observed cells", data.shape, int(data.observed.sum()))
    chain = run_chain(data, chain_cfg)
    estimates = posterior_point_estimates(align_chain(chain))
    out = Path(args.out)
    io.export_factors(estimates, out)
    io.save_tensor_estimates(estimates, out / "tensor_estimates.csv")
    print(f"wrote factors for {len(estimates.row_keys)} rows and "
          f"{len(estimates.col_keys)} columns to {out}")


def _explicit_features(path, intercept):
    records = io._read_rows(path, ("key",))
    keys = [r.pop("key") for _, r in records]
    X = np.array([[io._number(path, ln, f, v) for f, v in r.items()] for ln, r in records])
    return FeatureSource.explicit(X.reshape(len(keys), -1), keys, intercept=intercept)


def cmd_fab_test(args):
    _merge_config(args)
    cfg = _run_config(args, summaries=args.summaries, out=args.out)
    if (args.factors is None) == (args.features is None):
        raise ValidationError("give exactly one of --factors or --features")
    summaries = io.load_summaries(args.summaries)
    if args.factors is not None:
        features = io.load_factors(args.factors, intercept=cfg.intercept)
    else:
        features = _explicit_features(args.features, cfg.intercept)
    fit = run_fab_analysis(summaries, features, seed=cfg.seed,
                           zero_guide=bool(_value(args, "zero_guide", False)))
    out = Path(args.out)
    io.save_results(fit, out)
    excl = Path(args.exclusions) if args.exclusions else out.with_name(out.stem + "_excluded.csv")
    io.save_exclusions(fit.excluded, excl)
    n_c = int(np.sum(fit.q_classical <= cfg.target_fdr))
    n_f = int(np.sum(fit.q_fab <= cfg.target_fdr))
    print(f"{len(fit)} hypotheses tested, {len(fit.excluded)} excluded; discoveries at "
          f"FDR {cfg.target_fdr:g}: classical {n_c}, FAB {n_f}")


def cmd_simulate(args):
    _merge_config(args)
    cfg = _run_config(args, out=args.out)
    if args.null == args.power:
        raise ValidationError("choose exactly one of --null or --power")
    paper = bool(_value(args, "paper_scale", False))
    kw = dict(seed=cfg.seed, target_fdr=cfg.target_fdr)
    if args.datasets is not None:
        kw["n_datasets"] = args.datasets
    if args.null:
        design = SimDesign.null_default(paper_scale=paper, **kw)
        report = run_null_experiment(design, workers=_value(args, "workers", 1))
    else:
        if args.tau2:
            kw["tau2_grid"] = tuple(float(x) for x in args.tau2.split(","))
        design = SimDesign.power_default(paper_scale=paper, **kw)
        report = run_power_experiment(design, workers=_value(args, "workers", 1))
    for path in io.save_report(report, args.out):
        print(f"wrote {path}")


def _svg(fig, path):
    import matplotlib.pyplot as plt

    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "fabtest"
    import matplotlib.pyplot as plt

    return plt.subplots(figsize=(5, 3.5))


def _histogram_outputs(edges, counts: dict, out: Path, title):
    names = list(counts)
    io._write_rows(out / "pvalue_histogram.csv", ["lo", "hi"] + names,
                   [[io.fmt(edges[i]), io.fmt(edges[i + 1])] + [str(int(counts[n][i])) for n in names]
                    for i in range(len(edges) - 1)])
    fig, ax = _figure()
    for name in names:
        ax.stairs(counts[name], edges, label=name)
    ax.set_xlabel("p-value")
    ax.set_ylabel("count")
    ax.set_title(title)
    ax.legend()
    _svg(fig, out / "pvalue_histogram.svg")
    return [out / "pvalue_histogram.csv", out / "pvalue_histogram.svg"]


def _curve_outputs(thresholds, curves: dict, out: Path, stem, title):
    names = list(curves)
    io._write_rows(out / f"{stem}.csv", ["fdr"] + names,
                   [[io.fmt(a)] + [str(int(curves[n][i])) for n in names]
                    for i, a in enumerate(thresholds)])
    fig, ax = _figure()
    for name in names:
        ax.plot(thresholds, curves[name], label=name)
    ax.set_xlabel("target FDR")
    ax.set_ylabel("discoveries")
    ax.set_title(title)
    ax.legend()
    _svg(fig, out / f"{stem}.svg")
    return [out / f"{stem}.csv", out / f"{stem}.svg"]


def cmd_report(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    src = Path(args.input)
    written = []
    if src.is_file():
        res = io.load_results(src)
        edges = np.linspace(0.0, 1.0, 21)
        written += _histogram_outputs(edges, {
            "classical": np.histogram(res["p_classical"], edges)[0],
            "fab": np.histogram(res["p_fab"], edges)[0],
        }, out, "p-values")
        curves = {name: np.searchsorted(np.sort(res[f"q_{name}"]), FDR_GRID, side="right")
                  for name in ("classical", "fab")}
        written += _curve_outputs(FDR_GRID, curves, out, "discovery_curve", "BH discoveries")
    else:
        rep = io.load_report(src)
        if rep.kind == "null":
            written += _histogram_outputs(rep.hist_edges, rep.hist_counts, out,
                                          f"null p-values ({rep.n_datasets} datasets)")
        else:
            for ti, tau2 in enumerate(rep.tau2_grid):
                curves = {name: rep.curves[ti, :, i] for i, name in enumerate(("classical", "fab", "oracle"))}
                written += _curve_outputs(rep.thresholds, curves, out, f"power_tau2_{tau2:g}",
                                          f"cumulative discoveries, tau2 = {tau2:g}")
    for path in written:
        print(f"wrote {path}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="fabtest", description="FAB multiple testing with tensor-derived priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value settings file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--target-fdr", type=float)

    ft = sub.add_parser("fit-tensor", help="run the Gibbs sampler and export aligned factors")
    common(ft)
    ft.add_argument("--data", required=True, help="row,col,modality,value table")
    ft.add_argument("--modality", action="append", metavar="NAME=LIK",
                    help="likelihood for a modality (normal, probit, tobit)")
    ft.add_argument("--d-u", type=int)
    ft.add_argument("--d-v", type=int)
    ft.add_argument("--iters", type=int)
    ft.add_argument("--burn-in", type=int)
    ft.add_argument("--thin", type=int)
    ft.add_argument("--no-impute", dest="impute", action="store_const", const=False)
    ft.add_argument("--debug", action="store_true", help="check state invariants every sweep")
    ft.add_argument("--out", required=True, help="output directory")
    ft.set_defaults(func=cmd_fit_tensor)

    fb = sub.add_parser("fab-test", help="cross-fitted FAB and classical tests")
    common(fb)
    fb.add_argument("--summaries", required=True, help="id,row,col,ybar,s,n table")
    fb.add_argument("--factors", help="directory written by fit-tensor")
    fb.add_argument("--features", help="explicit feature table keyed by hypothesis id")
    fb.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
    fb.add_argument("--zero-guide", action="store_const", const=True,
                    help="debug: force b = 0 so FAB p-values equal classical ones")
    fb.add_argument("--out", required=True, help="results table")
    fb.add_argument("--exclusions", help="where to list hypotheses without features")
    fb.set_defaults(func=cmd_fab_test)

    sm = sub.add_parser("simulate", help="null calibration or power simulation")
    common(sm)
    kind = sm.add_mutually_exclusive_group(required=True)
    kind.add_argument("--null", action="store_true")
    kind.add_argument("--power", action="store_true")
    sm.add_argument("--datasets", type=int)
    sm.add_argument("--tau2", help="comma separated tau2 grid for --power")
    sm.add_argument("--paper-scale", action="store_const", const=True)
    sm.add_argument("--workers", type=int)
    sm.add_argument("--out", required=True, help="output directory")
    sm.set_defaults(func=cmd_simulate)

    rp = sub.add_parser("report", help="histogram and discovery-curve data plus SVG plots")
    rp.add_argument("--input", required=True, help="results table or simulate output directory")
    rp.add_argument("--out", required=True, help="output directory")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
