"""Fitting across plausible values and combining with multiple-imputation rules."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, ExclusionReport, ModelSpec, prepare
from .errors import IllConditionedError, PVMixedError, ValidationError
from .fit import FitOptions, FitResult, WeightSet, fit_ml
from .likelihood import build_design

logger = logging.getLogger(__name__)

DF_CAP = 1e6


@dataclass(frozen=True)
class RubinResult:
    mean: np.ndarray
    W: np.ndarray
    B: np.ndarray
    total: np.ndarray
    df: np.ndarray

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.total)


def rubin_df(W, B, m: int) -> np.ndarray:
    W, B = np.asarray(W, float), np.asarray(B, float)
    extra = (1.0 + 1.0 / m) * B
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        df = (m - 1) * (1.0 + W / extra) ** 2
    return np.where(extra > 0, np.minimum(df, DF_CAP), DF_CAP)


def rubin_combine(estimates, variances) -> RubinResult:
    """Scalar combining rules: estimates and variances are (m, k) arrays."""
    Q = np.atleast_2d(np.asarray(estimates, float))
    U = np.atleast_2d(np.asarray(variances, float))
    if Q.shape != U.shape:
        raise ValidationError("estimates and variances must have the same shape")
    m = Q.shape[0]
    if m < 2:
        raise ValidationError("combining needs at least two imputations")
    mean = Q.mean(axis=0)
    W = U.mean(axis=0)
    B = Q.var(axis=0, ddof=1)
    return RubinResult(mean, W, B, W + (1.0 + 1.0 / m) * B, rubin_df(W, B, m))


@dataclass(frozen=True)
class EqualityTest:
    C: np.ndarray
    D1: float
    k: int
    nu: float
    p_value: float
    r: float

    def to_dict(self) -> dict:
        return {"C": self.C.tolist(), "D1": self.D1, "k": self.k, "nu": self.nu,
                "p_value": self.p_value, "r": self.r}


def d1_test(thetas, covs, C=None) -> EqualityTest:
    """Wald-type test of ``theta = 0`` pooled over imputations.

    ``thetas`` is (m, k) and ``covs`` (m, k, k), already under the contrast.
    The reference distribution is F(k, nu); when the between-imputation
    variance vanishes it is the chi-square(k)/k limit.
    """
    Q = np.atleast_2d(np.asarray(thetas, float))
    U = np.asarray(covs, float).reshape(Q.shape[0], Q.shape[1], Q.shape[1])
    m, k = Q.shape
    if m < 2:
        raise ValidationError("the pooled test needs at least two imputations")
    qbar = Q.mean(axis=0)
    Wbar = U.mean(axis=0)
    Wbar = 0.5 * (Wbar + Wbar.T)
    dev = Q - qbar
    B = dev.T @ dev / (m - 1)
    try:
        Lw = np.linalg.cholesky(Wbar)
    except np.linalg.LinAlgError:
        raise IllConditionedError("within-imputation covariance is singular") from None
    cond = np.linalg.cond(Wbar)
    if not np.isfinite(cond) or cond > 1e13:
        raise IllConditionedError("within-imputation covariance is singular", cond)
    Winv = np.linalg.inv(Lw).T @ np.linalg.inv(Lw)
    r = float((1.0 + 1.0 / m) * np.trace(B @ Winv) / k)
    quad = float(qbar @ Winv @ qbar)
    D1 = max(quad / (k * (1.0 + r)), 0.0)
    if r <= 0:
        nu = np.inf
    else:
        t = k * (m - 1)
        if t > 4:
            nu = 4.0 + (t - 4.0) * (1.0 + (1.0 - 2.0 / t) / r) ** 2
        else:
            nu = t * (1.0 + 1.0 / k) * (1.0 + 1.0 / r) ** 2 / 2.0
    if D1 == 0.0:
        p = 1.0
    elif np.isinf(nu):
        p = float(stats.chi2.sf(k * D1, k))
    else:
        p = float(stats.f.sf(D1, k, nu))
    C = np.eye(k) if C is None else np.asarray(C, float)
    return EqualityTest(C, D1, k, float(nu), min(max(p, 0.0), 1.0), r)


def equality_contrast(term: str, coef_names: Sequence[str], outcomes: Sequence[str]) -> np.ndarray:
    """Adjacent-difference contrast: row r is beta[o_r, term] - beta[o_{r+1}, term]."""
    names = list(coef_names)
    if f"*:{term}" in names:
        raise ValidationError(f"term {term!r} is shared across outcomes; nothing to test")
    try:
        idx = [names.index(f"{o}:{term}") for o in outcomes]
    except ValueError:
        raise ValidationError(f"term {term!r} does not enter every outcome") from None
    if len(idx) < 2:
        raise ValidationError("an equality test needs at least two outcomes")
    C = np.zeros((len(idx) - 1, len(names)))
    for r in range(len(idx) - 1):
        C[r, idx[r]] = 1.0
        C[r, idx[r + 1]] = -1.0
    return C


@dataclass(frozen=True)
class MIFitResult:
    fits: tuple
    used: tuple                 # indices of converged fits entering the combination
    cov_kind: str
    coef: RubinResult
    vc: RubinResult
    exclusions: ExclusionReport | None = None
    flags: tuple = ()
    tests: Mapping[str, EqualityTest] = field(default_factory=dict)

    @property
    def outcomes(self) -> tuple:
        return self.fits[0].outcomes

    @property
    def coef_names(self) -> tuple:
        return self.fits[0].coef_names

    @property
    def vc_names(self) -> list[str]:
        return self.fits[0].vc_names

    @property
    def m(self) -> int:
        return len(self.used)

    @property
    def Sigma(self) -> np.ndarray:
        return np.mean([self.fits[i].Sigma for i in self.used], axis=0)

    @property
    def T(self) -> np.ndarray:
        return np.mean([self.fits[i].T for i in self.used], axis=0)

    def fit_covs(self, kind: str | None = None) -> list[np.ndarray]:
        return [self.fits[i].cov(kind or self.cov_kind) for i in self.used]

    def equality_test(self, term: str, kind: str | None = None) -> EqualityTest:
        C = equality_contrast(term, self.coef_names, self.outcomes)
        thetas = np.array([C @ self.fits[i].beta for i in self.used])
        covs = np.array([C @ V @ C.T for V in self.fit_covs(kind)])
        return d1_test(thetas, covs, C)

    def with_tests(self, terms: Sequence[str], kind: str | None = None) -> "MIFitResult":
        tests = dict(self.tests)
        for t in terms:
            tests[t] = self.equality_test(t, kind)
        return MIFitResult(self.fits, self.used, self.cov_kind, self.coef, self.vc, self.exclusions,
                           self.flags, tests)

    def testable_terms(self) -> list[str]:
        """Terms with a coefficient on every outcome."""
        out = []
        for name in self.coef_names:
            o, _, term = name.partition(":")
            if o == self.outcomes[0] and all(f"{x}:{term}" in self.coef_names for x in self.outcomes):
                out.append(term)
        return out

    def to_dict(self) -> dict:
        def rr(r: RubinResult):
            return {k: getattr(r, k).tolist() for k in ("mean", "W", "B", "total", "df")}

        return {
            "outcomes": list(self.outcomes),
            "coef_names": list(self.coef_names),
            "vc_names": self.vc_names,
            "cov_kind": self.cov_kind,
            "used": list(self.used),
            "coef": rr(self.coef),
            "vc": rr(self.vc),
            "Sigma": self.Sigma.tolist(),
            "T": self.T.tolist(),
            "flags": list(self.flags),
            "exclusions": self.exclusions.to_dict() if self.exclusions else None,
            "tests": {k: v.to_dict() for k, v in self.tests.items()},
            "fits": [f.to_dict() for f in self.fits],
            "units": {"coef": "score points", "vc": "points^2"},
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MIFitResult":
        fits = [FitResult.from_dict(f) for f in raw["fits"]]
        return combine_fits(fits, raw.get("cov_kind", "robust"))


def _check_finite(covs, kind):
    if any(not np.all(np.isfinite(c)) for c in covs):
        raise ValidationError(f"{kind} covariance unavailable for some imputations")


def combine_fits(fits: Sequence[FitResult], cov_kind: str = "robust",
                 exclusions: ExclusionReport | None = None) -> MIFitResult:
    """Combine per-imputation fits; non-converged fits are excluded with a flag."""
    fits = tuple(fits)
    used = tuple(i for i, f in enumerate(fits) if f.converged)
    flags = []
    if len(used) < len(fits):
        dropped = [i + 1 for i in range(len(fits)) if i not in used]
        msg = f"imputations {dropped} did not converge and were excluded"
        logger.warning(msg)
        flags.append(msg)
    if len(used) < 2:
        raise PVMixedError(f"only {len(used)} converged imputation(s); combining needs two")
    names = fits[used[0]].coef_names
    if any(fits[i].coef_names != names for i in used):
        raise ValidationError("imputations have different coefficient layouts")
    covs = [fits[i].cov(cov_kind) for i in used]
    if cov_kind == "robust" and any(not np.all(np.isfinite(c)) for c in covs):
        flags.append("robust covariance unavailable; model-based used")
        cov_kind = "model"
        covs = [fits[i].cov_model for i in used]
    _check_finite(covs, cov_kind)
    coef = rubin_combine([fits[i].beta for i in used], [np.diag(c) for c in covs])
    vc = rubin_combine([fits[i].vc for i in used], [np.diag(fits[i].vc_cov) for i in used])
    return MIFitResult(fits, used, cov_kind, coef, vc, exclusions, tuple(flags))


def fit_mi(d: Dataset, spec: ModelSpec, opts: FitOptions | None = None, cov: str = "robust",
           weights: WeightSet | None = None, threads: int = 1) -> MIFitResult:
    """Fit the model separately to each plausible value and combine."""
    if d.n_pv < 2:
        raise ValidationError("at least two plausible values are required")
    if cov not in ("robust", "model"):
        raise ValidationError(f"unknown covariance kind {cov!r}")
    if weights is not None:
        raise ValidationError("survey weights cannot be combined with multiple imputation; "
                              "fit single plausible values with `fit --weights` instead")
    opts = opts or FitOptions()
    prepared, report = prepare(d, spec)

    def one(l):
        return fit_ml(build_design(prepared, spec, l), opts)

    pvs = range(1, d.n_pv + 1)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            fits = list(ex.map(one, pvs))
    else:
        fits = [one(l) for l in pvs]
    mi = combine_fits(fits, cov, report)
    return mi.with_tests(mi.testable_terms())


__all__ = [
    "DF_CAP",
    "EqualityTest",
    "MIFitResult",
    "RubinResult",
    "combine_fits",
    "d1_test",
    "equality_contrast",
    "fit_mi",
    "rubin_combine",
    "rubin_df",
]
