"""Batch command-line interface.

Every command writes its outputs plus ``<first output>.manifest.json``
recording the argv, input/output hashes and timing, so ``pvmixed rerun``
can reproduce and verify them.  Exit codes: 0 ok, 1 domain error (JSON on
stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, ModelSpec, Schema, emit_dataset, load_dataset, prepare
from .eb import caterpillar_data, classify, eb_predict, qq_data, territorial_summary
from .errors import PVMixedError, ValidationError
from .fit import FitOptions, FitResult, WeightSet, decompose, fit_ml, fit_weighted_univariate, variance_explained
from .likelihood import build_design
from .mi import MIFitResult, fit_mi

logger = logging.getLogger("pvmixed")


def schema_path_for(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".schema.json")


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


class Run:
    """Collects inputs and outputs of one command for its manifest."""

    def __init__(self, command: str, argv: list[str]):
        self.command = command
        self.argv = list(argv)
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.configs: list[str] = []
        self.seed = None
        self.t0 = time.perf_counter()

    def input(self, path, config: bool = False):
        if path is not None:
            (self.configs if config else self.inputs).append(str(path))
        return path

    def output(self, path):
        self.outputs.append(str(path))
        return path

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "configs": {p: sha256(p) for p in self.configs},
            "inputs": {p: sha256(p) for p in self.inputs},
            "outputs": {p: sha256(p) for p in self.outputs},
            "seed": self.seed,
            "version": __version__,
            "wall_time_s": round(time.perf_counter() - self.t0, 6),
        }

    def finish(self, manifest_path=None) -> Path | None:
        if not self.outputs:
            return None
        path = Path(manifest_path or (self.outputs[0] + ".manifest.json"))
        write_json(path, self.manifest())
        return path


# ---------------------------------------------------------------------------
# helpers


def _load_data(args, run: Run) -> Dataset:
    schema_file = Path(args.schema) if args.schema else schema_path_for(args.data)
    if not schema_file.exists():
        raise ValidationError(f"schema file {schema_file} not found (pass --schema)")
    run.input(schema_file, config=True)
    run.input(args.data)
    return load_dataset(args.data, Schema.load(schema_file))


def _options(args) -> FitOptions:
    return FitOptions(tol_loglik=args.tol_loglik, tol_grad=args.tol_grad, max_iter=args.max_iter,
                      robust_correction=args.robust_correction, gradient=args.gradient)


def _weights(args, run: Run) -> WeightSet | None:
    if not getattr(args, "weights", None):
        return None
    run.input(args.weights)
    return WeightSet.from_csv(args.weights, args.weight_scaling)


def _single_fit(d: Dataset, spec: ModelSpec, pv: int, opts: FitOptions, weights: WeightSet | None):
    prepared, report = prepare(d, spec)
    D = build_design(prepared, spec, pv)
    F = fit_weighted_univariate(D, weights, opts) if weights is not None else fit_ml(D, opts)
    return F, D, report


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, run: Run) -> None:
    from .simulate import SimConfig, simulate_population, write_population

    run.input(args.config, config=True)
    c = SimConfig.load(args.config)
    if args.seed is not None:
        c = SimConfig.from_dict({**c.to_dict(), "seed": args.seed})
    run.seed = c.seed
    pop, d = simulate_population(c)
    emit_dataset(d, run.output(args.out))
    schema_file = schema_path_for(args.out)
    d.schema.dump(schema_file)
    run.output(schema_file)
    if args.frame:
        for p in write_population(pop, args.out):
            run.output(p)


def cmd_sample(args, run: Run) -> None:
    from .sampling import SampleDesign, draw_sample
    from .simulate import SimConfig, simulate_population

    run.input(args.config, config=True)
    run.input(args.design, config=True)
    c = SimConfig.load(args.config)
    raw = read_json(args.design)
    unknown = set(raw) - set(SampleDesign.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown sample design keys {sorted(unknown)}")
    design = SampleDesign(**raw)
    run.seed = design.seed
    pop, d = simulate_population(c)
    sample, ws = draw_sample(pop, d, design)
    emit_dataset(sample, run.output(args.out))
    schema_file = schema_path_for(args.out)
    sample.schema.dump(schema_file)
    run.output(schema_file)
    ws.to_csv(run.output(args.weights_out))


def cmd_fit(args, run: Run) -> None:
    d = _load_data(args, run)
    spec = ModelSpec.load(run.input(args.model, config=True))
    F, _, report = _single_fit(d, spec, args.pv, _options(args), _weights(args, run))
    out = F.to_dict()
    out["pv"] = args.pv
    out["exclusions"] = report.to_dict()
    write_json(run.output(args.out), out)
    if not F.converged:
        logger.warning("fit did not converge: %s", F.status)


def cmd_fit_mi(args, run: Run) -> None:
    d = _load_data(args, run)
    spec = ModelSpec.load(run.input(args.model, config=True))
    mi = fit_mi(d, spec, _options(args), cov=args.cov, weights=_weights(args, run), threads=args.threads)
    write_json(run.output(args.out), mi.to_dict())


def _load_mi(path) -> MIFitResult:
    raw = read_json(path)
    if "fits" not in raw:
        raise ValidationError(f"{path} is not a combined (fit-mi) result")
    mi = MIFitResult.from_dict(raw)
    return mi.with_tests(mi.testable_terms())


def _load_fit(path) -> FitResult:
    raw = read_json(path)
    if "fits" in raw:
        raise ValidationError(f"{path} is a combined result; pass a single fit")
    return FitResult.from_dict(raw)


def cmd_test_equality(args, run: Run) -> None:
    mi = _load_mi(run.input(args.fit_mi))
    terms = args.term or mi.testable_terms()
    tests = {t: mi.equality_test(t, args.cov).to_dict() for t in terms}
    text = json.dumps({"cov_kind": args.cov or mi.cov_kind, "tests": tests}, indent=2) + "\n"
    if args.out:
        atomic_write_text(run.output(args.out), text)
    else:
        sys.stdout.write(text)


def cmd_decompose(args, run: Run) -> None:
    F = _load_fit(run.input(args.fit))
    out = {"decomposition": decompose(F).to_dict(), "units": "correlations; shares in %"}
    if args.full:
        out["variance_explained"] = variance_explained(F, _load_fit(run.input(args.full)))
    write_json(run.output(args.out), out)


def cmd_residuals(args, run: Run) -> None:
    from .report import caterpillar_svg, qq_svg, write_csv

    d = _load_data(args, run)
    spec = ModelSpec.load(run.input(args.model, config=True))
    opts = _options(args)
    prepared, _ = prepare(d, spec)
    D = build_design(prepared, spec, args.pv)
    if args.fit:
        F = _load_fit(run.input(args.fit))
    else:
        F = fit_ml(D, opts)
    E = eb_predict(F, D)
    outcomes = [args.outcome] if args.outcome else list(E.outcomes)
    prefix = args.out_prefix
    summary = {"outcomes": list(E.outcomes), "class_ids": list(E.class_ids), "pv": args.pv,
               "u_hat": E.u.tolist(), "comparative": E.comparative.tolist(),
               "diagnostic": E.diagnostic.tolist(), "labels": {},
               "units": {"u_hat": "score points", "comparative": "points^2", "diagnostic": "points^2"}}
    for o in outcomes:
        cat = caterpillar_data(E, o, args.level)
        write_csv(cat, run.output(f"{prefix}.{o}.caterpillar.csv"))
        summary["labels"][o] = classify(E, o, args.level).tolist()
        try:
            qq = qq_data(E, o)
        except ValidationError as exc:
            logger.warning("no normal probability plot for %s: %s", o, exc)
            qq = None
        if qq is not None:
            write_csv(qq, run.output(f"{prefix}.{o}.qq.csv"))
        if args.plots:
            caterpillar_svg(cat, run.output(f"{prefix}.{o}.caterpillar.svg"), o)
            if qq is not None:
                qq_svg(qq, run.output(f"{prefix}.{o}.qq.svg"), o)
    area_col = args.area_column
    if area_col and area_col in d.frame.columns:
        groups = d.class_label(area_col)
        terr = territorial_summary(E, {c: groups[c] for c in E.class_ids}, args.level)
        write_csv(terr, run.output(f"{prefix}.territorial.csv"))
    write_json(run.output(f"{prefix}.eb.json"), summary)


def cmd_report(args, run: Run) -> None:
    import pandas as pd

    from .eb import EBResiduals
    from .report import (caterpillar_svg, format_coefficients, format_decomposition, format_territorial, qq_svg,
                         strip_units)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.fit_mi:
        mi = _load_mi(run.input(args.fit_mi))
        (out_dir / "coefficients.txt").write_text(format_coefficients(mi), encoding="utf-8")
        run.output(out_dir / "coefficients.txt")
    if args.null:
        F = _load_fit(run.input(args.null))
        (out_dir / "decomposition.txt").write_text(format_decomposition(decompose(F)), encoding="utf-8")
        run.output(out_dir / "decomposition.txt")
    if args.residuals:
        raw = read_json(run.input(args.residuals))
        E = EBResiduals(tuple(raw["outcomes"]), tuple(raw["class_ids"]), np.zeros(len(raw["class_ids"])),
                        np.array(raw["u_hat"]), np.zeros_like(np.array(raw["u_hat"])),
                        np.array(raw["comparative"]), np.array(raw["diagnostic"]))
        for o in E.outcomes:
            cat = caterpillar_data(E, o, args.level)
            caterpillar_svg(cat, run.output(out_dir / f"{o}.caterpillar.svg"), o)
            try:
                qq_svg(qq_data(E, o), run.output(out_dir / f"{o}.qq.svg"), o)
            except ValidationError as exc:
                logger.warning("no normal probability plot for %s: %s", o, exc)
    if args.territorial:
        terr = strip_units(pd.read_csv(run.input(args.territorial)))
        (out_dir / "territorial.txt").write_text(format_territorial(terr), encoding="utf-8")
        run.output(out_dir / "territorial.txt")
    if not run.outputs:
        raise ValidationError("nothing to report: pass --fit-mi, --null, --residuals and/or --territorial")


def cmd_rerun(args, run: Run) -> int:
    manifest = read_json(args.manifest)
    os.chdir(manifest.get("cwd", "."))
    code = main(manifest["argv"])
    if code != 0:
        return code
    bad = [p for p, h in manifest["outputs"].items() if not os.path.exists(p) or sha256(p) != h]
    if bad:
        sys.stderr.write(json.dumps({"error": "ReproducibilityError",
                                     "message": f"outputs differ from manifest: {bad}"}) + "\n")
        return 1
    sys.stdout.write(f"reproduced {len(manifest['outputs'])} output(s)\n")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_fit_options(p):
    p.add_argument("--tol-loglik", type=float, default=1e-10, help="relative log-likelihood change tolerance")
    p.add_argument("--tol-grad", type=float, default=1e-5, help="gradient infinity-norm tolerance")
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--robust-correction", action="store_true", help="apply the K/(K-1) small-sample factor")
    p.add_argument("--gradient", choices=["analytic", "fd"], default="analytic")


def _add_data(p):
    p.add_argument("--data", required=True, help="student-level CSV")
    p.add_argument("--schema", help="schema JSON (default: <data stem>.schema.json)")
    p.add_argument("--model", required=True, help="model specification JSON")


def _add_weights(p):
    p.add_argument("--weights", help="weights CSV (univariate models only)")
    p.add_argument("--weight-scaling", choices=["none", "cluster"], default="none")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvmixed", description="Multivariate two-level models for "
                                     "plausible-value assessment data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic population with plausible values")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--frame", action="store_true", help="also write province/school/class sidecars")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sample", help="draw a two-stage PPS sample from a simulated population")
    p.add_argument("--config", required=True, help="population SimConfig JSON")
    p.add_argument("--design", required=True, help="sample design JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--weights-out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("fit", help="fit one plausible value")
    _add_data(p)
    p.add_argument("--pv", type=int, default=1)
    p.add_argument("--out", required=True)
    _add_fit_options(p)
    _add_weights(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("fit-mi", help="fit every plausible value and combine")
    _add_data(p)
    p.add_argument("--out", required=True)
    p.add_argument("--cov", choices=["robust", "model"], default="robust")
    p.add_argument("--threads", type=int, default=1)
    _add_fit_options(p)
    _add_weights(p)
    p.set_defaults(func=cmd_fit_mi)

    p = sub.add_parser("residuals", help="EB class residuals, caterpillar and QQ data")
    _add_data(p)
    p.add_argument("--fit", help="single-fit JSON (default: refit)")
    p.add_argument("--pv", type=int, default=1)
    p.add_argument("--outcome")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--area-column", default="area")
    p.add_argument("--plots", action="store_true", help="also write SVG plots")
    p.add_argument("--out-prefix", required=True)
    _add_fit_options(p)
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("test-equality", help="pooled test of equal coefficients across outcomes")
    p.add_argument("--fit-mi", required=True)
    p.add_argument("--term", action="append", help="term to test (repeatable; default: all)")
    p.add_argument("--cov", choices=["robust", "model"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_test_equality)

    p = sub.add_parser("decompose", help="correlation and variance decomposition of a fit")
    p.add_argument("--fit", required=True, help="null-model fit JSON")
    p.add_argument("--full", help="fuller-model fit JSON for variance-explained")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("report", help="render tables and plots")
    p.add_argument("--fit-mi")
    p.add_argument("--null", help="null-model fit JSON for the decomposition table")
    p.add_argument("--residuals", help="EB JSON written by `residuals`")
    p.add_argument("--territorial", help="territorial CSV written by `residuals`")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("rerun", help="re-execute a manifest and verify output hashes")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv)
    try:
        if args.command == "rerun":
            return cmd_rerun(args, run)
        args.func(args, run)
        run.finish()
    except PVMixedError as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("line", "columns", "coordinate", "condition"):
            if hasattr(exc, attr):
                v = getattr(exc, attr)
                err[attr] = v if not isinstance(v, float) or np.isfinite(v) else None
        sys.stderr.write(json.dumps(err) + "\n")
        return 1
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
