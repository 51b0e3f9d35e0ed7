"""Command-line front end: ingestion, estimation reports, basis selection and simulations."""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import functionals as fn
from . import inference as inf
from .estimator import FullEstimate, fit_em
from .exceptions import CallbackIneqError, ConfigError, DataError, DomainError
from .model import CallbackDataset, BasisSpec
from .selection import CRITERIA, best, select_basis
from .simulation import METHODS, SimDesign, generate_sample, run_monte_carlo

SEED_ENV = "CALLBACK_INEQ_SEED"
FULL_SCALE_M = 5000
DEFAULT_TAUS = (0.25, 0.5, 0.75)


def sample_path() -> Path:
    """Path of the bundled synthetic sample (``m = 2``, log basis, 600 records)."""
    return Path(str(resources.files("callback_ineq") / "data" / "sample.csv"))


def fmt(x) -> str:
    """Locale-independent number formatting for tables: ``.`` decimal, no grouping."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x) if math.isinf(x) else f"{x:.10g}"


# --------------------------------------------------------------------------
# ingestion


@dataclass
class IngestReport:
    path: str
    m: int
    collapse_at: int | None
    N: int
    n: int
    counts: list = field(default_factory=list)
    recoded: int = 0

    def rates(self) -> list[tuple[int, int, float]]:
        """``(attempt, count, rate)`` rows; attempt ``m + 1`` is never-responded."""
        return [(j + 1, c, c / self.N) for j, c in enumerate(self.counts)]

    def as_dict(self) -> dict:
        return {"path": self.path, "m": self.m, "collapse_at": self.collapse_at, "N": self.N, "n": self.n,
                "recoded_rows": self.recoded,
                "response_by_attempt": [{"attempt": a, "count": c, "rate": r} for a, c, r in self.rates()]}


def _parse_int(text, line, what):
    try:
        return int(text)
    except ValueError:
        raise DataError(f"cannot parse {what} {text!r} as an integer", line) from None


def _parse_y(text, line):
    try:
        y = float(text)
    except ValueError:
        raise DataError(f"cannot parse y {text!r} as a number", line) from None
    if not math.isfinite(y):
        raise DataError(f"y must be finite, got {text!r}", line)
    return y


def ingest(path, m: int, collapse_at: int | None = None) -> tuple[CallbackDataset, IngestReport]:
    """Read a ``y,d`` CSV into a dataset.

    With ``collapse_at`` set, rows with ``d > collapse_at`` become attempt
    ``collapse_at`` when ``y`` is present and nonrespondents (``m + 1``)
    otherwise. An empty ``y`` is only allowed for nonrespondents.
    """
    m = int(m)
    if m < 1:
        raise ConfigError("m must be >= 1")
    if collapse_at is not None and not 1 <= collapse_at <= m:
        raise ConfigError(f"collapse_at must lie in 1..m = 1..{m}")
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file {str(path)!r} does not exist")
    ys, ds = [], []
    recoded = 0
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["y", "d"]:
            raise DataError("header row must be exactly 'y,d'", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"expected 2 fields, found {len(row)}", line)
            ytxt, dtxt = row[0].strip(), row[1].strip()
            d = _parse_int(dtxt, line, "d")
            if d < 1:
                raise DataError(f"attempt index must be >= 1, got {d}", line)
            y = _parse_y(ytxt, line) if ytxt else math.nan
            if collapse_at is not None and d > collapse_at:
                new = collapse_at if ytxt else m + 1
                recoded += new != d
                d = new
            if d > m + 1:
                raise DataError(f"attempt index {d} exceeds m + 1 = {m + 1}; use --collapse-at", line)
            if d == m + 1 and ytxt:
                raise DataError(f"y present on a nonrespondent row (d = m + 1 = {m + 1})", line)
            if d <= m and not ytxt:
                raise DataError(f"empty y is only allowed when d = m + 1 = {m + 1}", line)
            if ytxt and y <= 0:
                raise DomainError(f"line {line}: y must be strictly positive, got {ytxt}")
            ys.append(y)
            ds.append(d)
    if not ys:
        raise DataError("input has no data rows")
    data = CallbackDataset(np.array(ys), np.array(ds), m)
    report = IngestReport(str(path), m, collapse_at, data.N, data.n, data.attempt_counts().tolist(), recoded)
    return data, report


def write_dataset(path, data: CallbackDataset):
    """Write ``data`` as a ``y,d`` CSV that :func:`ingest` reads back exactly."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "d"])
        for y, d in zip(data.y, data.d):
            w.writerow(["" if np.isnan(y) else repr(float(y)), int(d)])


def write_rates(path, report: IngestReport):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["attempt", "count", "rate"])
        for a, c, r in report.rates():
            w.writerow([a, c, fmt(r)])


# --------------------------------------------------------------------------
# estimate


def parse_taus(text) -> tuple[float, ...]:
    if text is None:
        return DEFAULT_TAUS
    try:
        taus = tuple(float(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise ConfigError(f"cannot parse taus {text!r}") from None
    if not taus or not all(0 < t < 1 for t in taus):
        raise ConfigError("taus must be a comma-separated list of values in (0, 1)")
    return taus


def parse_basis(text) -> BasisSpec:
    try:
        return BasisSpec.from_tokens(text)
    except (DomainError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad basis {text!r}: {exc}") from None


def _trace_summary(fit: FullEstimate) -> dict:
    tr = np.asarray(fit.trace)
    inc = np.diff(tr)
    return {"iterations": fit.iterations, "converged": fit.converged, "initial_loglik": float(tr[0]),
            "final_loglik": float(tr[-1]), "last_increase": float(inc[-1]) if inc.size else None,
            "min_increase": float(inc.min()) if inc.size else None, "profile_loglik": fit.profile_loglik}


def estimate_document(data: CallbackDataset, basis: BasisSpec, taus=DEFAULT_TAUS, level: float = 0.95,
                      tol: float = 1e-5, ingest_report: IngestReport | None = None) -> tuple[dict, FullEstimate]:
    """Fit the model and collect estimates, intervals and diagnostics into one document."""
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    fit = fit_em(data, basis, tol=tol)
    sw = inf.Sandwich.from_fit(fit)
    params = [r.as_dict() for r in inf.param_cis(sw, level=level)]
    measures = [inf.quantile_ci(sw, None, t, level) for t in taus]
    if len(taus) >= 2:
        measures.append(inf.quantile_function_ci(sw, None, max(taus), min(taus), "ratio", level))
    measures.append(inf.theil_ci(sw, None, level))
    measures.append(inf.gini_ci(sw, None, level))
    for spec in (fn.MEAN_LOG_DEVIATION, fn.COEFFICIENT_OF_VARIATION):
        measures.append(inf.uh_ci(sw, None, spec, level))
    diag = dict(fit.diagnostics)
    diag["lambda_minus_inverse_eta"] = diag.pop("lambda_gap")
    doc = {
        "model": {"m": data.m, "basis": basis.token, "basis_label": basis.label, "N": data.N, "n": data.n,
                  "tol": tol, "level": level},
        "estimates": {
            "alpha": fit.params.alphas.tolist(),
            "beta": dict(zip(basis.terms, fit.params.beta.tolist())),
            "eta": fit.eta,
            "lambda": fit.lam,
        },
        "parameter_intervals": params,
        "measures": [r.as_dict() for r in measures],
        "convergence": _trace_summary(fit),
        "diagnostics": {k: (v.item() if isinstance(v, np.generic) else v) for k, v in diag.items()},
        "units": "all outcome-scale quantities are on the input scale; no unit conversion is applied",
    }
    if ingest_report is not None:
        doc["input"] = ingest_report.as_dict()
    return doc, fit


def write_cdf(path, fit: FullEstimate):
    dist = fit.dist
    ys = np.unique(dist.support)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "F"])
        for y, F in zip(ys, dist.cdf(ys)):
            w.writerow([fmt(y), fmt(F)])


def write_density(path, fit: FullEstimate, points: int = 200):
    dist = fit.dist
    lo, hi = float(dist.support.min()), float(dist.support.max())
    grid = np.geomspace(lo, hi, points) if hi > lo else np.array([lo])
    f = np.atleast_1d(inf.density(dist, grid))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "f"])
        for y, v in zip(grid, f):
            w.writerow([fmt(y), fmt(v)])


def cmd_estimate(args) -> int:
    data, report = ingest(args.input, args.m, args.collapse_at)
    doc, fit = estimate_document(data, parse_basis(args.basis), parse_taus(args.taus), args.level, args.tol,
                                 ingest_report=report)
    if args.export_cdf:
        write_cdf(args.export_cdf, fit)
    if args.export_density:
        write_density(args.export_density, fit)
    if args.export_rates:
        write_rates(args.export_rates, report)
    _emit_json(doc, args.output)
    return 0


def _emit_json(doc, path):
    text = json.dumps(doc, indent=2, allow_nan=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# select

SELECT_COLUMNS = ("rank", "basis", "terms", "k", "loglik", "aic", "bic", "converged", "best_aic", "best_bic")


def selection_table(rows, criterion):
    b_aic, b_bic = best(rows, "aic"), best(rows, "bic")
    out = []
    for r in rows:
        out.append({"rank": r.rank, "basis": r.basis.label, "terms": r.basis.token, "k": r.k, "loglik": r.loglik,
                    "aic": r.aic, "bic": r.bic, "converged": r.converged,
                    "best_aic": r is b_aic, "best_bic": r is b_bic})
    return out


def _write_csv(fh, columns, records):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([fmt(rec[c]) if not isinstance(rec[c], str) else rec[c] for c in columns])


def _text_table(columns, records) -> str:
    cells = [[c for c in columns]] + [[fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns]
                                      for r in records]
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_select(args) -> int:
    data, _ = ingest(args.input, args.m, args.collapse_at)
    rows = select_basis(data, criterion=args.criterion)
    table = selection_table(rows, args.criterion)
    if args.output:
        with Path(args.output).open("w", newline="", encoding="utf-8") as fh:
            _write_csv(fh, SELECT_COLUMNS, table)
    text = _text_table(SELECT_COLUMNS, table)
    sys.stdout.write(f"ranked by {args.criterion.upper()}; best_aic / best_bic mark the minimizers\n" + text)
    return 0


# --------------------------------------------------------------------------
# simulate

METRIC_COLUMNS = ("design", "measure", "method", "truth", "rb", "rmse", "cp", "al", "failures", "replications",
                  "unreliable", "mean_se", "sd_estimate")


def resolve_seed(flag, config_seed, env=None):
    """Seed precedence: command-line flag, then environment variable, then config."""
    env = os.environ if env is None else env
    if flag is not None:
        return int(flag), "flag"
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            return int(raw), "env"
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={raw!r} is not an integer") from None
    if config_seed is not None:
        return int(config_seed), "config"
    return SimDesign.base_seed, "default"


def load_designs(cfg: dict, seed: int, full_scale: bool) -> dict:
    blocks = cfg.get("designs")
    if blocks is None:
        blocks = [{k: v for k, v in cfg.items() if k not in ("seed", "methods", "name")} | {"name": cfg.get("name")}]
    if not isinstance(blocks, list) or not blocks:
        raise ConfigError("'designs' must be a nonempty list")
    out = {}
    for i, block in enumerate(blocks):
        block = dict(block)
        name = block.pop("name", None) or f"design{i + 1}"
        block["base_seed"] = seed
        if full_scale:
            block["M"] = FULL_SCALE_M
        try:
            design = SimDesign.from_dict(block)
        except (CallbackIneqError, KeyError, TypeError) as exc:
            raise ConfigError(f"design {name!r}: {exc}") from None
        if name in out:
            raise ConfigError(f"duplicate design name {name!r}")
        out[name] = design
    return out


def simulation_text(name, design, rows) -> str:
    """Two blocks in the layout of the published tables: RB x 100 and RMSE, then CP and AL."""
    measures = list(dict.fromkeys(r.measure for r in rows))
    methods = list(dict.fromkeys(r.method for r in rows))
    get = {(r.measure, r.method): r for r in rows}
    head = [f"design {name}: {design.outcome.label}, N={design.N}, M={design.M}, seed={design.base_seed}"]
    recs = []
    for ms in measures:
        rec = {"measure": ms}
        for me in methods:
            r = get[(ms, me)]
            rec[f"{me} RBx100"] = 100 * r.rb
            rec[f"{me} RMSE"] = r.rmse
        recs.append(rec)
    cols = ["measure"] + [f"{me} {k}" for me in methods for k in ("RBx100", "RMSE")]
    out = "\n".join(head) + "\n" + _text_table(cols, recs)
    if "Proposed" in methods:
        recs = [{"measure": ms, "CP": get[(ms, "Proposed")].cp, "AL": get[(ms, "Proposed")].al,
                 "failures": get[(ms, "Proposed")].failures} for ms in measures]
        out += "\nProposed Wald intervals\n" + _text_table(["measure", "CP", "AL", "failures"], recs)
    flagged = [f"{r.measure}/{r.method}" for r in rows if r.unreliable]
    if flagged:
        out += "unreliable (failure rate above 5%): " + ", ".join(flagged) + "\n"
    return out


def cmd_simulate(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {args.config!r} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    seed, source = resolve_seed(args.seed, cfg.get("seed"))
    methods = tuple(cfg.get("methods", METHODS))
    if set(methods) - set(METHODS):
        raise ConfigError(f"methods must be drawn from {METHODS}")
    designs = load_designs(cfg, seed, args.paper_scale)
    threads = args.threads or os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records, text, timings = [], [], {}
    for name, design in designs.items():
        t = time.perf_counter()
        rows = run_monte_carlo(design, methods, threads=threads)
        timings[name] = time.perf_counter() - t
        records += [{"design": name, **r.as_dict()} for r in rows]
        text.append(simulation_text(name, design, rows))
    if args.export_sample:
        first = next(iter(designs.values()))
        write_dataset(args.export_sample, generate_sample(first, 0))
    buf = io.StringIO()
    _write_csv(buf, METRIC_COLUMNS, records)
    (outdir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")
    (outdir / "tables.txt").write_text("\n".join(text), encoding="utf-8")
    manifest = {
        "designs": {k: v.to_dict() for k, v in designs.items()},
        "methods": list(methods),
        "seed": seed,
        "seed_source": source,
        "threads": threads,
        "full_scale": bool(args.paper_scale),
        "wall_time_s": time.perf_counter() - t0,
        "design_wall_time_s": timings,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    sys.stdout.write("\n".join(text))
    return 0


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="callback-ineq", description="Inequality measures from callback survey data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="fit the model and report estimates with Wald intervals")
    e.add_argument("--input", required=True)
    e.add_argument("--m", type=int, required=True)
    e.add_argument("--collapse-at", type=int)
    e.add_argument("--basis", required=True, help="comma-separated tokens from y,y2,logy,logy2, or 'none'")
    e.add_argument("--taus", help="comma-separated quantile levels (default 0.25,0.5,0.75)")
    e.add_argument("--level", type=float, default=0.95)
    e.add_argument("--tol", type=float, default=1e-5)
    e.add_argument("--export-cdf")
    e.add_argument("--export-density")
    e.add_argument("--export-rates")
    e.add_argument("--output", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("select", help="rank candidate bases by AIC/BIC")
    s.add_argument("--input", required=True)
    s.add_argument("--m", type=int, required=True)
    s.add_argument("--collapse-at", type=int)
    s.add_argument("--criterion", choices=CRITERIA, default="aic")
    s.add_argument("--output", help="CSV path for the ranked table")
    s.set_defaults(func=cmd_select)

    m = sub.add_parser("simulate", help="run a Monte Carlo study from a JSON design")
    m.add_argument("--config", required=True)
    m.add_argument("--threads", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--paper-scale", action="store_true", help=f"use M={FULL_SCALE_M} replications")
    m.add_argument("--output-dir", default=".")
    m.add_argument("--export-sample", help="write replication 0 of the first design as a y,d CSV")
    m.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CallbackIneqError as exc:
        err = {"error": exc.code, "type": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "line", None) is not None:
            err["line"] = exc.line
        sys.stderr.write(json.dumps(err) + "\n")
        return 1
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "E_IO", "type": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
