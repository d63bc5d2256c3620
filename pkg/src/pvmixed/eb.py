"""Empirical Bayes prediction of class effects, classification and plot data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import ValidationError
from .fit import FitResult
from .likelihood import StackedDesign, _chol_logdet, _inv_from_chol

OUTLIER_Z = 3.0
LABELS = ("good", "poor", "ns")


@dataclass(frozen=True)
class EBResiduals:
    """Predicted class effects (score points) with comparative and diagnostic covariances."""

    outcomes: tuple
    class_ids: tuple
    sizes: np.ndarray
    u: np.ndarray              # (J, M)
    raw: np.ndarray            # (J, M) class-mean residuals at beta-hat
    comparative: np.ndarray    # (J, M, M) Var(u_hat - u)
    diagnostic: np.ndarray     # (J, M, M) Var(u_hat)

    @property
    def J(self) -> int:
        return len(self.class_ids)

    def index(self, outcome) -> int:
        if isinstance(outcome, (int, np.integer)):
            if not 0 <= outcome < len(self.outcomes):
                raise ValidationError(f"outcome index {outcome} out of range")
            return int(outcome)
        if outcome not in self.outcomes:
            raise ValidationError(f"unknown outcome {outcome!r}")
        return self.outcomes.index(outcome)

    def se_comparative(self, outcome) -> np.ndarray:
        m = self.index(outcome)
        return np.sqrt(np.maximum(self.comparative[:, m, m], 0.0))

    def se_diagnostic(self, outcome) -> np.ndarray:
        m = self.index(outcome)
        return np.sqrt(np.maximum(self.diagnostic[:, m, m], 0.0))

    def standardized(self, outcome) -> np.ndarray:
        m = self.index(outcome)
        se = self.se_diagnostic(m)
        if np.any(se <= 1e-12 * max(1.0, float(np.max(np.abs(self.u[:, m]))))):
            raise ValidationError(f"zero diagnostic standard error for outcome {self.outcomes[m]!r} "
                                  "(between-class variance is singular)")
        return self.u[:, m] / se


def eb_predict(F: FitResult, D: StackedDesign) -> EBResiduals:
    """Shrunken class-effect predictions ``n T (Sigma + n T)^-1 rbar`` at the fitted parameters."""
    fitted = set(F.class_ids)
    absent = [c for c in D.class_ids if c not in fitted]
    if absent:
        raise ValidationError(f"classes not in the fit: {absent[:5]}")
    if tuple(D.coef_names) != tuple(F.coef_names):
        raise ValidationError("design does not match the fitted coefficients")
    st = D.stats
    n = st["n"]
    T = F.T
    LB, _ = _chol_logdet(F.Sigma[None] + n[:, None, None] * T[None], "Sigma + n T")
    A = _inv_from_chol(LB)
    rbar = st["ybar"] - np.einsum("jap,p->ja", st["xbar"], F.beta)
    TA = np.einsum("ab,jbc->jac", T, A)
    u = n[:, None] * np.einsum("jab,jb->ja", TA, rbar)
    diag = n[:, None, None] * np.einsum("jab,bc->jac", TA, T)
    diag = 0.5 * (diag + np.swapaxes(diag, 1, 2))
    comp = T[None] - diag
    return EBResiduals(tuple(F.outcomes), tuple(D.class_ids), D.sizes.copy(), u, rbar, comp, diag)


def eb_predict_mi(fits: Sequence[FitResult], designs: Sequence[StackedDesign]) -> EBResiduals:
    """Average of per-imputation predictions and covariances."""
    if len(fits) != len(designs) or not fits:
        raise ValidationError("need one design per fit")
    parts = [eb_predict(F, D) for F, D in zip(fits, designs)]
    ids = parts[0].class_ids
    if any(p.class_ids != ids for p in parts):
        raise ValidationError("imputations cover different classes")
    mean = lambda k: np.mean([getattr(p, k) for p in parts], axis=0)  # noqa: E731
    return EBResiduals(parts[0].outcomes, ids, parts[0].sizes, mean("u"), mean("raw"),
                       mean("comparative"), mean("diagnostic"))


def classify(E: EBResiduals, outcome, level: float = 0.95) -> np.ndarray:
    """``good`` when the interval lies above zero, ``poor`` below, else ``ns``."""
    if not 0 < level < 1:
        raise ValidationError("level must be in (0, 1)")
    m = E.index(outcome)
    z = stats.norm.ppf(0.5 + level / 2.0)
    u, se = E.u[:, m], E.se_comparative(m)
    return np.where(u - z * se > 0, "good", np.where(u + z * se < 0, "poor", "ns"))


def caterpillar_data(E: EBResiduals, outcome, level: float = 0.95) -> pd.DataFrame:
    """Predictions in increasing order with intervals; ties by class id."""
    m = E.index(outcome)
    z = stats.norm.ppf(0.5 + level / 2.0)
    u, se = E.u[:, m], E.se_comparative(m)
    labels = classify(E, m, level)
    ids = np.asarray(E.class_ids, dtype=str)
    order = np.lexsort((ids, u))
    return pd.DataFrame({
        "rank": np.arange(1, E.J + 1),
        "class_id": ids[order],
        "u_hat": u[order],
        "lower": (u - z * se)[order],
        "upper": (u + z * se)[order],
        "label": labels[order],
    })


def qq_data(E: EBResiduals, outcome) -> pd.DataFrame:
    """Sorted standardized residuals against normal quantiles at ``(r - 0.5) / J``."""
    if E.J < 3:
        raise ValidationError("normal probability plot needs at least three classes")
    m = E.index(outcome)
    z = E.standardized(m)
    ids = np.asarray(E.class_ids, dtype=str)
    order = np.lexsort((ids, z))
    ranks = np.arange(1, E.J + 1)
    return pd.DataFrame({
        "rank": ranks,
        "class_id": ids[order],
        "theoretical": stats.norm.ppf((ranks - 0.5) / E.J),
        "standardized": z[order],
        "outlier": np.abs(z[order]) > OUTLIER_Z,
    })


def territorial_summary(E: EBResiduals, groups: Mapping[str, str], level: float = 0.95) -> pd.DataFrame:
    """Per-area counts and proportions of good and poor classes for every outcome."""
    unmapped = [c for c in E.class_ids if c not in groups]
    if unmapped:
        raise ValidationError(f"classes without an area: {unmapped[:5]}")
    area = np.array([str(groups[c]) for c in E.class_ids])
    rows = []
    for m, o in enumerate(E.outcomes):
        lab = classify(E, m, level)
        for a in sorted(set(area)) + ["Overall"]:
            sel = np.ones(E.J, bool) if a == "Overall" else area == a
            n = int(sel.sum())
            good, poor = int(np.sum(lab[sel] == "good")), int(np.sum(lab[sel] == "poor"))
            rows.append((o, a, n, good, poor, good / n, poor / n))
    return pd.DataFrame(rows, columns=["outcome", "area", "n_classes", "good", "poor", "p_good", "p_poor"])


__all__ = [
    "EBResiduals",
    "caterpillar_data",
    "classify",
    "eb_predict",
    "eb_predict_mi",
    "qq_data",
    "territorial_summary",
]
