"""Maximum likelihood fitting, cluster-robust covariance and variance decompositions."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from typing import Mapping

import numpy as np
from scipy import linalg

from .errors import IllConditionedError, PVMixedError, ValidationError
from .likelihood import (
    CovarianceParams,
    StackedDesign,
    WeightedUnivariate,
    _chol_logdet,
    _inv_from_chol,
    check_rank,
    grad_loglik,
    loglik_and_grad,
    log_likelihood,
    natural_gradient,
    natural_param_names,
    profile_beta_gls,
    profiled_loglik,
)
from .optim import bfgs_maximize

logger = logging.getLogger(__name__)

NEAR_SINGULAR = 1e-8


@dataclass(frozen=True)
class FitOptions:
    tol_loglik: float = 1e-10
    tol_grad: float = 1e-5
    max_iter: int = 200
    robust_correction: bool = False
    gradient: str = "analytic"          # or "fd": central differences of the profiled likelihood

    def __post_init__(self):
        if self.gradient not in ("analytic", "fd"):
            raise ValidationError(f"unknown gradient method {self.gradient!r}")
        if self.tol_loglik <= 0 or self.tol_grad <= 0 or self.max_iter < 1:
            raise ValidationError("tolerances must be positive and max_iter >= 1")

    @classmethod
    def from_dict(cls, raw: Mapping) -> "FitOptions":
        known = {k: raw[k] for k in cls.__dataclass_fields__ if k in raw}
        return cls(**known)


@dataclass(frozen=True)
class FitResult:
    outcomes: tuple
    coef_names: tuple
    beta: np.ndarray
    Sigma: np.ndarray
    T: np.ndarray
    loglik: float
    cov_model: np.ndarray
    cov_robust: np.ndarray
    vc_cov: np.ndarray
    iterations: int
    grad_norm: float
    status: str
    converged: bool
    n_students: int
    n_classes: int
    class_ids: tuple
    initial_loglik: float
    flags: tuple = ()
    history: tuple = field(default=(), repr=False)
    weighted: bool = False

    @property
    def params(self) -> CovarianceParams:
        return CovarianceParams(self.Sigma, self.T)

    @property
    def vc(self) -> np.ndarray:
        return self.params.natural()

    @property
    def vc_names(self) -> list[str]:
        return natural_param_names(self.outcomes)

    def cov(self, kind: str = "robust") -> np.ndarray:
        if kind == "robust":
            return self.cov_robust
        if kind == "model":
            return self.cov_model
        raise ValidationError(f"unknown covariance kind {kind!r}")

    def se(self, kind: str = "robust") -> np.ndarray:
        return np.sqrt(np.diag(self.cov(kind)))

    def coef(self, name: str) -> float:
        return float(self.beta[list(self.coef_names).index(name)])

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else (list(v) if isinstance(v, tuple) else v)
        out["vc_names"] = self.vc_names
        out["units"] = {"beta": "score points", "Sigma": "points^2", "T": "points^2"}
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "FitResult":
        arrays = ("beta", "Sigma", "T", "cov_model", "cov_robust", "vc_cov")
        kw = {}
        for name in cls.__dataclass_fields__:
            v = raw[name]
            if name in arrays:
                kw[name] = np.array(v, dtype=float)
            elif isinstance(v, list):
                kw[name] = tuple(v)
            else:
                kw[name] = v
        return cls(**kw)


# ---------------------------------------------------------------------------


def _project_pd(S: np.ndarray, floor: float) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.maximum(w, floor)) @ V.T


def start_values(D: StackedDesign) -> np.ndarray:
    """Moment-based starting point in the unconstrained parameterization.

    Sigma0 is the pooled within-class covariance of OLS residuals; T0 the
    covariance of class-mean residuals, eigenvalues floored at
    ``0.1 * lambda_min(Sigma0) / mean class size``.
    """
    Xf = D.X.reshape(-1, D.p)
    beta = linalg.lstsq(Xf, D.y.reshape(-1))[0]
    r = D.y - D.X @ beta
    starts = D.offsets[:-1]
    n = D.sizes.astype(float)
    rbar = np.add.reduceat(r, starts, axis=0) / n[:, None]
    dev = r - rbar[D.class_index()]
    dof = D.N - D.J
    Sigma0 = dev.T @ dev / dof if dof > 0 else np.cov(r.T).reshape(D.M, D.M)
    tot = np.trace(Sigma0) / D.M
    Sigma0 = _project_pd(Sigma0, 1e-3 * max(tot, 1e-12))
    floor = 0.1 * np.linalg.eigvalsh(Sigma0)[0] / n.mean()
    T0 = _project_pd(np.cov(rbar.T).reshape(D.M, D.M), floor)
    return CovarianceParams(Sigma0, T0).theta


def _hessian_fd(grad, v, steps):
    k = v.size
    Hm = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = steps[i]
        Hm[:, i] = (grad(v + e) - grad(v - e)) / (2.0 * steps[i])
    return 0.5 * (Hm + Hm.T)


def _vc_covariance(grad, v, scale):
    """Inverse observed information of the covariance parameters."""
    steps = 1e-5 * np.maximum(np.abs(v), scale)
    try:
        Hm = _hessian_fd(grad, v, steps)
        L, _ = _chol_logdet(-Hm, "negative Hessian")
        return _inv_from_chol(L), True
    except (IllConditionedError, np.linalg.LinAlgError):
        return np.full((v.size, v.size), np.nan), False


def _class_scores(F_beta, c: CovarianceParams, D: StackedDesign) -> np.ndarray:
    st = D.stats
    n = st["n"]
    LS, _ = _chol_logdet(c.Sigma, "Sigma")
    Sinv = _inv_from_chol(LS)
    LB, _ = _chol_logdet(c.Sigma[None] + n[:, None, None] * c.T[None], "Sigma + n T")
    A = _inv_from_chol(LB)
    rbar = st["ybar"] - np.einsum("jap,p->ja", st["xbar"], F_beta)
    between = n[:, None] * np.einsum("jap,jab,jb->jp", st["xbar"], A, rbar)
    within = np.einsum("ab,japb->jp", Sinv, st["Wxy"]) - np.einsum("ab,japbq,q->jp", Sinv, st["Wxx"], F_beta)
    return between + within


def _sandwich(bread, scores, clusters, correction):
    labels = np.asarray([str(c) for c in clusters])
    uniq, inv = np.unique(labels, return_inverse=True)
    K = len(uniq)
    if K < 2:
        raise ValidationError("robust covariance needs at least two clusters")
    S = np.zeros((K, scores.shape[1]))
    np.add.at(S, inv, scores)
    C = bread @ (S.T @ S) @ bread
    if correction:
        C *= K / (K - 1)
    return 0.5 * (C + C.T)


def robust_cluster_cov(F: FitResult, D: StackedDesign, cluster=None, correction: bool = False) -> np.ndarray:
    """Sandwich covariance of beta with scores summed within clusters.

    ``cluster`` maps class id to cluster id (default: the class's school).
    """
    if cluster is None:
        clusters = D.school_of_class
    elif isinstance(cluster, Mapping):
        missing = [c for c in D.class_ids if c not in cluster]
        if missing:
            raise ValidationError(f"classes without a cluster: {missing[:5]}")
        clusters = [cluster[c] for c in D.class_ids]
    else:
        clusters = list(cluster)
    scores = _class_scores(F.beta, F.params, D)
    return _sandwich(F.cov_model, scores, clusters, correction)


def _robust_or_nan(bread, scores, clusters, correction, flags):
    try:
        return _sandwich(bread, scores, clusters, correction)
    except ValidationError:
        flags.append("robust-unavailable")
        return np.full(bread.shape, np.nan)


def _flags_for(T: np.ndarray, converged: bool) -> list[str]:
    flags = []
    if not converged:
        flags.append("not-converged")
    if np.linalg.eigvalsh(T)[0] < NEAR_SINGULAR * np.trace(T):
        flags.append("near-singular T")
    return flags


def fit_ml(D: StackedDesign, opts: FitOptions | None = None) -> FitResult:
    """ML fit of beta, Sigma and T by quasi-Newton ascent on the profiled likelihood."""
    opts = opts or FitOptions()
    if D.J < 2:
        raise ValidationError("at least two classes are required")
    check_rank(D)
    theta0 = start_values(D)
    if opts.gradient == "fd":
        def fg(t):
            return profiled_loglik(t, D), grad_loglik(t, D, "fd")
    else:
        def fg(t):
            return loglik_and_grad(t, D)
    res = bfgs_maximize(fg, theta0, opts.tol_loglik, opts.tol_grad, opts.max_iter)
    c = CovarianceParams.from_theta(res.x, D.M)
    beta, Cm = profile_beta_gls(c, D)
    loglik = log_likelihood(c, beta, D).logL
    flags = _flags_for(c.T, res.converged)
    scores = _class_scores(beta, c, D)
    Cr = _robust_or_nan(Cm, scores, D.school_of_class, opts.robust_correction, flags)
    scale = float(np.mean(np.diag(c.Sigma + c.T)))
    vc_cov, ok = _vc_covariance(
        lambda v: natural_gradient(CovarianceParams.from_natural(v, D.M), D), c.natural(), scale)
    if not ok:
        flags.append("vc-information-singular")
    return FitResult(
        outcomes=tuple(D.outcomes), coef_names=tuple(D.coef_names), beta=beta, Sigma=c.Sigma, T=c.T,
        loglik=loglik, cov_model=Cm, cov_robust=Cr, vc_cov=vc_cov, iterations=res.iterations,
        grad_norm=float(np.max(np.abs(res.grad))), status=res.status, converged=res.converged,
        n_students=D.N, n_classes=D.J, class_ids=tuple(D.class_ids), initial_loglik=res.f0,
        flags=tuple(flags), history=res.history,
    )


# ---------------------------------------------------------------------------
# survey weights


@dataclass(frozen=True)
class WeightSet:
    """Conditional weights at the three sampling stages.

    ``student`` holds w_{i|jk}, ``class_cond`` w_{j|k}, ``school`` w_k;
    ``class_school`` maps each class to its school.
    """

    student: Mapping[str, float]
    class_cond: Mapping[str, float]
    school: Mapping[str, float]
    class_school: Mapping[str, str]
    student_class: Mapping[str, str] = field(default_factory=dict)
    scaling: str = "none"

    def __post_init__(self):
        if self.scaling not in ("none", "cluster"):
            raise ValidationError(f"unknown weight scaling {self.scaling!r}")
        for name in ("student", "class_cond", "school"):
            vals = np.fromiter(getattr(self, name).values(), float)
            if vals.size and not (np.all(np.isfinite(vals)) and np.all(vals > 0)):
                raise ValidationError(f"{name} weights must be finite and positive")

    def class_weight(self, class_id: str) -> float:
        """Unconditional class weight w_jk = w_{j|k} w_k."""
        return self.class_cond[class_id] * self.school[self.class_school[class_id]]

    def overall(self, student_id: str) -> float:
        """Overall student weight w_ijk = w_{i|jk} w_{j|k} w_k."""
        return self.student[student_id] * self.class_weight(self.student_class[student_id])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "class_id", "school_id", "w_student", "w_class", "w_school"])
            for sid in sorted(self.student):
                cid = self.student_class[sid]
                kid = self.class_school[cid]
                w.writerow([sid, cid, kid, repr(float(self.student[sid])),
                            repr(float(self.class_cond[cid])), repr(float(self.school[kid]))])

    @classmethod
    def from_csv(cls, path, scaling: str = "none") -> "WeightSet":
        student, class_cond, school, class_school, student_class = {}, {}, {}, {}, {}
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                sid, cid, kid = row["student_id"], row["class_id"], row["school_id"]
                student[sid] = float(row["w_student"])
                class_cond[cid] = float(row["w_class"])
                school[kid] = float(row["w_school"])
                class_school[cid] = kid
                student_class[sid] = cid
        return cls(student, class_cond, school, class_school, student_class, scaling)


def _aligned_weights(D: StackedDesign, W: WeightSet, scaling: str):
    try:
        w = np.array([W.student[s] for s in D.student_ids], dtype=float)
        cw = np.array([W.class_weight(c) for c in D.class_ids], dtype=float)
    except KeyError as exc:
        raise ValidationError(f"no weight for unit {exc.args[0]!r}") from None
    if scaling == "cluster":
        starts = D.offsets[:-1]
        w = w * np.repeat(D.sizes / np.add.reduceat(w, starts), D.sizes)
    return w, cw


def fit_weighted_univariate(D: StackedDesign, W: WeightSet, opts: FitOptions | None = None,
                            scaling: str | None = None) -> FitResult:
    """Pseudo-ML random-intercept fit with level-1 and level-2 survey weights."""
    opts = opts or FitOptions()
    scaling = scaling or W.scaling
    if scaling not in ("none", "cluster"):
        raise ValidationError(f"unknown weight scaling {scaling!r}")
    if D.M != 1:
        raise ValidationError("weighted fitting supports univariate designs only")
    if D.J < 2:
        raise ValidationError("at least two classes are required")
    check_rank(D)
    w, cw = _aligned_weights(D, W, scaling)
    wu = WeightedUnivariate(D, w, cw)
    res = bfgs_maximize(wu.loglik_and_grad, start_values(D), opts.tol_loglik, opts.tol_grad, opts.max_iter)
    s2, t2 = float(np.exp(2 * res.x[0])), float(np.exp(2 * res.x[1]))
    f, beta, H, _, _, _ = wu.evaluate(s2, t2)
    Cm = linalg.inv(H)
    Cm = 0.5 * (Cm + Cm.T)
    Sigma, T = np.array([[s2]]), np.array([[t2]])
    flags = _flags_for(T, res.converged)
    Cr = _robust_or_nan(Cm, wu.scores(s2, t2, beta), D.school_of_class, opts.robust_correction, flags)

    def grad_nat(v):
        out = wu.evaluate(float(v[0]), float(v[1]))
        return np.array([out[4], out[5]])

    vc_cov, ok = _vc_covariance(grad_nat, np.array([s2, t2]), s2 + t2)
    if not ok:
        flags.append("vc-information-singular")
    flags.append(f"weighted(scaling={scaling})")
    return FitResult(
        outcomes=tuple(D.outcomes), coef_names=tuple(D.coef_names), beta=beta, Sigma=Sigma, T=T,
        loglik=f, cov_model=Cm, cov_robust=Cr, vc_cov=vc_cov, iterations=res.iterations,
        grad_norm=float(np.max(np.abs(res.grad))), status=res.status, converged=res.converged,
        n_students=D.N, n_classes=D.J, class_ids=tuple(D.class_ids), initial_loglik=res.f0,
        flags=tuple(flags), history=res.history, weighted=True,
    )


# ---------------------------------------------------------------------------
# decompositions


def correlation(S: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(S))
    R = S / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R


@dataclass(frozen=True)
class DecompositionReport:
    outcomes: tuple
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    pct_between: np.ndarray
    icc: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else list(v)) for k, v in asdict(self).items()}


def decompose(F: FitResult) -> DecompositionReport:
    """Within/between/total correlations and the class-level share of each (co)variance."""
    S, T = F.Sigma, F.T
    total = S + T
    with np.errstate(divide="ignore", invalid="ignore"):
        pct = 100.0 * T / total
    return DecompositionReport(tuple(F.outcomes), correlation(S), correlation(T), correlation(total),
                               pct, np.diag(pct).copy())


def variance_explained(null: FitResult, full: FitResult) -> dict:
    """Percentage reductions of within- and between-class variances, plus residual ICCs.

    Negative reductions (a model that adds variance) are reported as such.
    """
    if tuple(null.outcomes) != tuple(full.outcomes):
        raise ValidationError("null and full fits have different outcomes")
    s0, t0 = np.diag(null.Sigma), np.diag(null.T)
    s1, t1 = np.diag(full.Sigma), np.diag(full.T)
    return {
        "outcomes": list(full.outcomes),
        "within_reduction": (100.0 * (1.0 - s1 / s0)).tolist(),
        "between_reduction": (100.0 * (1.0 - t1 / t0)).tolist(),
        "residual_icc": (100.0 * t1 / (s1 + t1)).tolist(),
    }


__all__ = [
    "FitOptions", "FitResult", "WeightSet", "DecompositionReport", "fit_ml", "fit_weighted_univariate",
    "robust_cluster_cov", "decompose", "variance_explained", "start_values", "correlation", "PVMixedError",
]
