"""Command-line interface: ``fit``, ``table-fit``, ``simulate`` and ``curve``.

Every command prints one JSON document (or a short text summary with
``--format text``). Package errors become a JSON error object on stdout and
a non-zero exit status; warnings are listed in the output and leave the exit
status at 0.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings

import numpy as np

from . import __version__
from .data import CountTable2x2x2, Dataset, expand_table, ingest_csv, load_fixture
from .errors import IVOddsError
from .formula import parse_formula
from .iv import (
    adjusted_iv,
    closed_form_binary,
    default_assoc_spec,
    estimating_curve,
    logistic_smm,
    probit_normal_smm,
    standard_iv,
    unadjusted_logistic,
)
from .glm import fit_glm
from .marginal import extended_smm, gmm_marginal, marginal_contrast, parse_contrast
from .simulation.dgp import DGPConfig
from .simulation.harness import SIM_ESTIMATORS, run_experiment
from .simulation.report import _clean, report_dict, to_text

ESTIMATOR_CHOICES = (
    "standard-iv",
    "adjusted-iv",
    "logistic-smm",
    "closed-form",
    "probit-normal",
    "marginal",
    "gmm-marginal",
    "unadjusted",
)


def output_schema() -> dict:
    """The JSON schema every command's JSON output conforms to."""
    from importlib.resources import files

    return json.loads(files("ivodds").joinpath("fixtures").joinpath("report.schema.json").read_text())


# -- argument parsing ---------------------------------------------------------


def _grid(text: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("grid must be lo:hi:step") from None
    if not (step > 0 and hi > lo):
        raise argparse.ArgumentTypeError("grid needs hi > lo and step > 0")
    m = int(round((hi - lo) / step))
    return np.linspace(lo, lo + m * step, m + 1)


def _counts(text: str) -> CountTable2x2x2:
    vals = [int(v) for v in text.replace(";", ",").split(",")]
    return CountTable2x2x2.from_flat(vals)


def _add_input(p: argparse.ArgumentParser, table_only: bool = False) -> None:
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--fixture", help="shipped count table (brookhart)")
    g.add_argument("--counts", type=_counts, help="eight counts x0z0y0,x0z0y1,x0z1y0,...,x1z1y1")
    if not table_only:
        g.add_argument("--input", help="CSV file with a header row")
        p.add_argument("--y", default="y", help="outcome column")
        p.add_argument("--x", default="x", help="exposure column")
        p.add_argument("--z", default="z", help="instrument column")
        p.add_argument("--covariates", default="", help="comma-separated covariate columns")


def _add_models(p: argparse.ArgumentParser) -> None:
    p.add_argument("--formula-assoc", help="association model, e.g. 'y ~ x + z'")
    p.add_argument("--formula-first", help="first-stage model, e.g. 'x ~ z'")
    p.add_argument("--m-spec", help="effect modification, e.g. '~ 1 + c1'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ivodds", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ivodds {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="fit an estimator to a CSV file or count table")
    _add_input(fit)
    _add_models(fit)
    fit.add_argument("--estimator", choices=ESTIMATOR_CHOICES, default="logistic-smm")
    fit.add_argument("--contrast", default="fixed:0,1", help="fixed:x0,x1 | plus1 | times1.1")
    fit.add_argument("--marginal-mode", choices=("exact", "approximate"), default="approximate")
    fit.add_argument("--first-stage-population", choices=("all", "controls"), default="all")
    fit.add_argument("--ci", choices=("score", "wald"), default="score", help="interval for the structural mean model")
    fit.add_argument("--assoc", choices=("main", "saturated"), default="main", help="closed-form association model")
    fit.add_argument("--allow-uncongenial", action="store_true")
    fit.add_argument("--include-curve", action="store_true")
    fit.add_argument("--format", choices=("json", "text"), default="json")
    fit.add_argument("--seed", type=int, default=0, help="recorded in provenance")

    tf = sub.add_parser("table-fit", help="fit to a 2x2x2 count table")
    _add_input(tf, table_only=True)
    _add_models(tf)
    tf.add_argument("--estimator", choices=ESTIMATOR_CHOICES, default="closed-form")
    tf.add_argument("--contrast", default="fixed:0,1")
    tf.add_argument("--marginal-mode", choices=("exact", "approximate"), default="approximate")
    tf.add_argument("--first-stage-population", choices=("all", "controls"), default="all")
    tf.add_argument("--ci", choices=("score", "wald"), default="score")
    tf.add_argument("--assoc", choices=("main", "saturated"), default="main")
    tf.add_argument("--allow-uncongenial", action="store_true")
    tf.add_argument("--include-curve", action="store_true")
    tf.add_argument("--format", choices=("json", "text"), default="json")
    tf.add_argument("--seed", type=int, default=0)

    sim = sub.add_parser("simulate", help="Monte Carlo experiment")
    sim.add_argument("--experiment", choices=tuple("abcde"), required=True)
    sim.add_argument("--ey", type=float, default=0.5, help="target outcome mean")
    sim.add_argument("--psi", type=float, default=1.0, help="true causal log odds ratio")
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--estimators", default="StandardIV,AdjustedIV,LogisticSMM",
                     help=f"comma-separated subset of {','.join(SIM_ESTIMATORS)}")
    sim.add_argument("--normal-convention", choices=("variance2", "sd2"), default="variance2")
    sim.add_argument("--interaction", type=float, default=1.0, help="exposure-instrument coefficient (experiment e)")
    sim.add_argument("--allele-freq", type=float, default=0.3)
    sim.add_argument("--formula-assoc", help="override the fitted association model")
    sim.add_argument("--format", choices=("json", "text"), default="json")

    cur = sub.add_parser("curve", help="estimating-equation curve over a grid")
    _add_input(cur)
    cur.add_argument("--formula-assoc")
    cur.add_argument("--m-spec")
    cur.add_argument("--grid", type=_grid, default=_grid("-6:2:0.05"))
    cur.add_argument("--format", choices=("json", "text"), default="json")
    return parser


# -- commands -------------------------------------------------------------------


def _load(args) -> tuple[Dataset, CountTable2x2x2 | None, dict]:
    if getattr(args, "fixture", None):
        table = load_fixture(args.fixture)
        prov = {"input": f"fixture:{args.fixture}"}
    elif getattr(args, "counts", None) is not None:
        table = args.counts
        prov = {"input": "counts"}
    else:
        covs = tuple(c for c in args.covariates.split(",") if c)
        res = ingest_csv(args.input, args.y, args.x, args.z, covs)
        prov = {"input": res.path, "input_sha256": res.sha256, "rows": res.data.n, "dropped": res.dropped}
        return res.data, None, prov
    flat = [c for _, _, _, c in table.cells()]
    prov["input_sha256"] = hashlib.sha256(json.dumps(flat).encode()).hexdigest()
    data = expand_table(table)
    prov.update({"rows": data.n, "dropped": 0})
    return data, table, prov


def _fit(args, data: Dataset, table: CountTable2x2x2 | None) -> dict:
    est = args.estimator
    assoc = args.formula_assoc
    first = args.formula_first
    m_spec = args.m_spec
    pop = "controls_only" if args.first_stage_population == "controls" else "all"
    out: dict = {}
    if est == "standard-iv":
        fit = standard_iv(data, first, m_spec, pop)
    elif est == "adjusted-iv":
        fit = adjusted_iv(data, first, m_spec, None, pop)
    elif est == "logistic-smm":
        fit = logistic_smm(data, assoc, m_spec, ci=args.ci, curve=args.include_curve,
                           allow_uncongenial=args.allow_uncongenial)
    elif est == "closed-form":
        if table is None:
            raise IVOddsError("closed-form estimator needs a count table (--fixture or --counts)")
        fit = closed_form_binary(table, args.assoc, ci=args.ci)
    elif est == "probit-normal":
        fit = probit_normal_smm(data, first, assoc)
    elif est == "unadjusted":
        fit = unadjusted_logistic(data, assoc)
    elif est == "gmm-marginal":
        fit = gmm_marginal(data)
    else:
        contrast = parse_contrast(args.contrast)
        efit = extended_smm(data, assoc, m_spec, (0.0, 1.0), args.marginal_mode, contrast.targets,
                            allow_uncongenial=args.allow_uncongenial)
        eff = marginal_contrast(efit, data, contrast)
        out["marginal"] = eff.to_dict()
        fit = logistic_smm(data, assoc, m_spec, ci=args.ci, allow_uncongenial=args.allow_uncongenial)
    out["result"] = fit.to_dict(include_curve=getattr(args, "include_curve", False))
    return out


def _text_fit(doc: dict) -> str:
    r = doc["result"]
    lines = [
        f"estimator   {r['estimator']}",
        f"psi         {_sig(r['psi'])}  (se {_sig(r['se'])})",
        f"exp(psi)    {_sig(r['exp_psi'])}  95% CI {_sig(r['exp_ci'][0])} - {_sig(r['exp_ci'][1])}  [{r['ci_method']}]",
        f"p-value     {_sig(r['p_value'])}",
    ]
    if r.get("diagnostics"):
        d = r["diagnostics"]
        lines.append(f"roots       {d['multiplicity']}: {', '.join(_sig(v) for v in d['roots'])}")
    if "marginal" in doc:
        m = doc["marginal"]
        lines.append(
            f"marginal OR {_sig(m['exp_log_or'])}  95% CI {_sig(m['exp_ci'][0])} - {_sig(m['exp_ci'][1])}"
            f"  ({m['contrast']}, {m['mode']})"
        )
        lines.append(f"risk diff   {_sig(m['risk_diff'])}   rel risk {_sig(m['rel_risk'])}")
    for w in doc.get("warnings", []):
        lines.append(f"warning     {w}")
    return "\n".join(lines) + "\n"


def _sig(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, str):
        return v
    if isinstance(v, list):
        return "[" + ", ".join(_sig(x) for x in v) + "]"
    return f"{v:.3g}"


def cmd_fit(args) -> dict:
    data, table, prov = _load(args)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        out = _fit(args, data, table)
    out["warnings"] = [str(w.message) for w in caught if issubclass(w.category, UserWarning)]
    prov.update({"seed": args.seed, "version": __version__})
    return {"kind": "fit", **out, "provenance": prov}


def cmd_simulate(args) -> dict:
    cfg = DGPConfig(
        experiment=args.experiment,
        n=args.n,
        psi_true=args.psi,
        target_ey=args.ey,
        allele_freq=args.allele_freq,
        normal_variance_convention=args.normal_convention,
        interaction_coeff=args.interaction,
        seed=args.seed,
    )
    ests = tuple(e for e in args.estimators.split(",") if e)
    report = run_experiment(cfg, args.reps, ests, args.formula_assoc)
    doc = report_dict(report, {"seed": args.seed, "version": __version__})
    doc["_text"] = to_text(report)
    return doc


def cmd_curve(args) -> dict:
    data, _, prov = _load(args)
    spec = parse_formula(args.formula_assoc) if args.formula_assoc else default_assoc_spec(data)
    m_spec = parse_formula(args.m_spec, "identity") if args.m_spec else None
    assoc_fit = fit_glm(data, spec)
    triples = estimating_curve(data, assoc_fit, spec, m_spec, args.grid)
    diff = np.array([a - b for _, a, b in triples])
    s = np.sign(diff)
    changes = int(np.sum(s[:-1] * s[1:] < 0))
    prov.update({"version": __version__})
    return {
        "kind": "curve",
        "association_model": str(spec),
        "curve": [[p, a, b] for p, a, b in triples],
        "sign_changes": changes,
        "provenance": prov,
    }


def _emit(doc: dict, fmt: str) -> str:
    text = doc.pop("_text", None)
    if fmt == "text":
        if doc.get("kind") == "fit":
            return _text_fit(doc)
        if doc.get("kind") == "simulation":
            return text
        if doc.get("kind") == "curve":
            rows = [f"{p:10.4f} {a:14.8g} {b:14.8g}" for p, a, b in doc["curve"]]
            return "\n".join(rows + [f"sign changes: {doc['sign_changes']}"]) + "\n"
        return json.dumps(doc) + "\n"
    return json.dumps(_clean(doc), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _join_dash_values(argv: list[str]) -> list[str]:
    # argparse reads "-6:2:0.05" as an option; glue such values to their flag
    out: list[str] = []
    it = iter(argv)
    for a in it:
        if a == "--grid":
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_join_dash_values(argv))
    fmt = getattr(args, "format", "json")
    handlers = {"fit": cmd_fit, "table-fit": cmd_fit, "simulate": cmd_simulate, "curve": cmd_curve}
    try:
        doc = handlers[args.command](args)
    except IVOddsError as exc:
        err = {"kind": "error", "error": exc.to_dict(), "provenance": {"version": __version__}}
        sys.stdout.write(json.dumps(_clean(err), sort_keys=True, indent=2, default=str) + "\n")
        return int(getattr(exc, "exit_code", 3))
    except (OSError, ValueError) as exc:
        err = {"kind": "error", "error": {"type": type(exc).__name__, "code": "invalid_input", "message": str(exc)},
               "provenance": {"version": __version__}}
        sys.stdout.write(json.dumps(err, sort_keys=True, indent=2) + "\n")
        return 2
    sys.stdout.write(_emit(doc, fmt))
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
