"""Plain-text tables and SVG plots for fits, combined fits and EB residuals.

Tables print four decimals; JSON artifacts elsewhere keep full precision.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .fit import DecompositionReport, FitResult  # noqa: E402
from .mi import MIFitResult  # noqa: E402

DECIMALS = 4
UNITS = {
    "u_hat": "score points",
    "lower": "score points",
    "upper": "score points",
    "standardized": "SD units",
    "theoretical": "SD units",
    "p_good": "proportion",
    "p_poor": "proportion",
}

matplotlib.rcParams["svg.hashsalt"] = "pvmixed"
matplotlib.rcParams["svg.fonttype"] = "none"


def _num(x: float) -> str:
    return f"{x:.{DECIMALS}f}" if np.isfinite(x) else "NA"


def _matrix_block(title: str, names, mat: np.ndarray, width: int = 12) -> list[str]:
    lines = [title, " " * width + "".join(f"{n:>{width}}" for n in names)]
    for i, n in enumerate(names):
        cells = "".join(f"{_num(mat[i, j]):>{width}}" if j <= i else " " * width for j in range(len(names)))
        lines.append(f"{n:<{width}}" + cells)
    return lines


def format_decomposition(rep: DecompositionReport) -> str:
    """Within, between and total correlations plus the class-level share (%)."""
    names = list(rep.outcomes)
    lines = []
    lines += _matrix_block("Within-class correlations", names, rep.within)
    lines.append("")
    lines += _matrix_block("Between-class correlations", names, rep.between)
    lines.append("")
    lines += _matrix_block("Total correlations", names, rep.total)
    lines.append("")
    lines += _matrix_block("Class-level share of (co)variance (%)", names, rep.pct_between)
    lines.append("")
    lines.append("ICC (%): " + "  ".join(f"{n}={_num(v)}" for n, v in zip(names, rep.icc)))
    return "\n".join(lines) + "\n"


def _coef_rows(coef_names, outcomes, beta, se):
    """Group coefficients by term: {term: {outcome or '*': (b, se)}}."""
    rows: dict[str, dict[str, tuple[float, float]]] = {}
    for name, b, s in zip(coef_names, beta, se):
        o, _, term = name.partition(":")
        rows.setdefault(term, {})[o] = (float(b), float(s))
    return rows


def format_coefficients(result: MIFitResult | FitResult) -> str:
    """Coefficient table (estimate and SE per outcome) with equality-test p-values."""
    if isinstance(result, MIFitResult):
        beta, se = result.coef.mean, result.coef.se
        vc, vc_se = result.vc.mean, result.vc.se
        tests = result.tests
        se_kind = result.cov_kind
        header_note = f"combined over {result.m} plausible values"
    else:
        beta, se = result.beta, result.se("robust")
        if not np.all(np.isfinite(se)):
            beta, se = result.beta, result.se("model")
            se_kind = "model"
        else:
            se_kind = "robust"
        vc, vc_se = result.vc, np.sqrt(np.diag(result.vc_cov))
        tests = {}
        header_note = "single fit"
    outcomes = list(result.outcomes)
    rows = _coef_rows(result.coef_names, outcomes, beta, se)
    w = 14
    out = [f"Fixed effects (score points; {se_kind} SE in parentheses; {header_note})",
           f"{'term':<16}" + "".join(f"{o:>{2 * w}}" for o in outcomes) + f"{'p (equality)':>{w}}"]
    for term, cells in rows.items():
        line = f"{term:<16}"
        if "*" in cells:
            b, s = cells["*"]
            line += f"{_num(b) + ' (' + _num(s) + ')':>{2 * w * len(outcomes)}}"
        else:
            for o in outcomes:
                if o in cells:
                    b, s = cells[o]
                    line += f"{_num(b):>{w}}{'(' + _num(s) + ')':>{w}}"
                else:
                    line += " " * (2 * w)
        line += f"{_num(tests[term].p_value):>{w}}" if term in tests else " " * w
        out.append(line)
    out.append("")
    out.append("Variance parameters (points^2; SE in parentheses)")
    for n, v, s in zip(result.vc_names, vc, vc_se):
        out.append(f"{n:<24}{_num(v):>{w}}{'(' + _num(s) + ')':>{w}}")
    return "\n".join(out) + "\n"


def format_territorial(summary: pd.DataFrame) -> str:
    """Proportions of good and poor classes by area and outcome."""
    outcomes = list(dict.fromkeys(summary["outcome"]))
    areas = list(dict.fromkeys(summary["area"]))
    w = 12
    head = f"{'area':<16}" + "".join(f"{o + ' good':>{w}}{o + ' poor':>{w}}" for o in outcomes)
    out = ["Proportion of good / poor classes", head]
    idx = summary.set_index(["area", "outcome"])
    for a in areas:
        line = f"{a:<16}"
        for o in outcomes:
            r = idx.loc[(a, o)]
            line += f"{r['p_good']:>{w}.3f}{r['p_poor']:>{w}.3f}"
        out.append(line)
    return "\n".join(out) + "\n"


def with_units(df: pd.DataFrame) -> pd.DataFrame:
    """Rename numeric columns to state their units."""
    return df.rename(columns={k: f"{k} [{u}]" for k, u in UNITS.items() if k in df.columns})


def strip_units(df: pd.DataFrame) -> pd.DataFrame:
    """Inverse of :func:`with_units`."""
    return df.rename(columns=lambda c: c.split(" [", 1)[0])


def write_csv(df: pd.DataFrame, path) -> None:
    with_units(df).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _save_svg(fig, path) -> None:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def caterpillar_svg(table: pd.DataFrame, path, outcome: str) -> None:
    colors = {"good": "#1a7f37", "poor": "#b42318", "ns": "#667085"}
    fig, ax = plt.subplots(figsize=(8, 4))
    x = table["rank"].to_numpy()
    for lab, col in colors.items():
        sel = table["label"].to_numpy() == lab
        if sel.any():
            ax.vlines(x[sel], table["lower"].to_numpy()[sel], table["upper"].to_numpy()[sel], color=col, lw=0.8)
            ax.plot(x[sel], table["u_hat"].to_numpy()[sel], "o", ms=2, color=col, label=lab)
    ax.axhline(0.0, color="black", lw=0.6)
    ax.set_xlabel("class rank")
    ax.set_ylabel(f"EB residual, {outcome} (score points)")
    ax.legend(loc="upper left", frameon=False)
    fig.tight_layout()
    _save_svg(fig, path)


def qq_svg(table: pd.DataFrame, path, outcome: str) -> None:
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    t, z = table["theoretical"].to_numpy(), table["standardized"].to_numpy()
    out = table["outlier"].to_numpy(dtype=bool)
    ax.plot(t[~out], z[~out], "o", ms=2.5, color="#344054")
    ax.plot(t[out], z[out], "o", ms=3.5, color="#b42318")
    lim = float(max(np.max(np.abs(t)), np.max(np.abs(z)))) * 1.05
    ax.plot([-lim, lim], [-lim, lim], color="black", lw=0.6)
    ax.set_xlabel("normal quantile")
    ax.set_ylabel(f"standardized EB residual, {outcome}")
    fig.tight_layout()
    _save_svg(fig, path)


def write_text(text: str, path) -> None:
    Path(path).write_text(text, encoding="utf-8")


def table_bundle(mi: MIFitResult | None = None, decomposition: DecompositionReport | None = None,
                 territorial: pd.DataFrame | None = None) -> Mapping[str, str]:
    out = {}
    if decomposition is not None:
        out["decomposition.txt"] = format_decomposition(decomposition)
    if mi is not None:
        out["coefficients.txt"] = format_coefficients(mi)
    if territorial is not None:
        out["territorial.txt"] = format_territorial(territorial)
    return out


__all__ = [
    "caterpillar_svg",
    "format_coefficients",
    "format_decomposition",
    "format_territorial",
    "qq_svg",
    "table_bundle",
    "strip_units",
    "with_units",
    "write_csv",
    "write_text",
]
