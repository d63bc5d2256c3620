"""Exact marginal likelihood of the multivariate random-intercept model.

For class ``j`` with ``n`` students and ``M`` outcomes the stacked response
(student-major order) has covariance ``V = I_n (x) Sigma + J_n (x) T``.  With
``P1 = J_n / n`` the projector on the class mean and ``Q = I - P1``::

    V^-1  = P1 (x) (Sigma + n T)^-1 + Q (x) Sigma^-1
    log|V| = log|Sigma + n T| + (n - 1) log|Sigma|

so every quantity reduces to M x M algebra on class means plus pooled
within-class cross products, which are precomputed once per design.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import Dataset, ModelSpec, ValidationError
from .errors import IllConditionedError, NonFiniteGradientError, RankDeficiencyError

LOG_2PI = float(np.log(2.0 * np.pi))
MAX_CONDITION = 1e13


# ---------------------------------------------------------------------------
# covariance parameterization


def n_cov_params(M: int) -> int:
    return M * (M + 1) // 2


def _chol_to_vec(L: np.ndarray) -> np.ndarray:
    rows, cols = np.tril_indices(L.shape[0])
    v = L[rows, cols].copy()
    diag = rows == cols
    v[diag] = np.log(v[diag])
    return v


def _vec_to_chol(v: np.ndarray, M: int) -> np.ndarray:
    rows, cols = np.tril_indices(M)
    L = np.zeros((M, M))
    vals = np.array(v, dtype=float)
    diag = rows == cols
    vals[diag] = np.exp(vals[diag])
    L[rows, cols] = vals
    return L


@dataclass(frozen=True)
class CovarianceParams:
    """Within-class ``Sigma`` and between-class ``T`` (score points squared)."""

    Sigma: np.ndarray
    T: np.ndarray

    @property
    def M(self) -> int:
        return self.Sigma.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Unconstrained vector: lower Cholesky factors, log diagonal, Sigma first."""
        return np.concatenate([_chol_to_vec(np.linalg.cholesky(self.Sigma)),
                               _chol_to_vec(np.linalg.cholesky(self.T))])

    @classmethod
    def from_theta(cls, theta, M: int) -> "CovarianceParams":
        theta = np.asarray(theta, dtype=float)
        k = n_cov_params(M)
        if theta.shape != (2 * k,):
            raise ValidationError(f"theta must have length {2 * k} for M={M}")
        Ls, Lt = _vec_to_chol(theta[:k], M), _vec_to_chol(theta[k:], M)
        return cls(Ls @ Ls.T, Lt @ Lt.T)

    def natural(self) -> np.ndarray:
        rows, cols = np.tril_indices(self.M)
        return np.concatenate([self.Sigma[rows, cols], self.T[rows, cols]])

    @classmethod
    def from_natural(cls, v, M: int) -> "CovarianceParams":
        k = n_cov_params(M)
        return cls(_sym_from_vech(np.asarray(v[:k]), M), _sym_from_vech(np.asarray(v[k:]), M))


def _sym_from_vech(v: np.ndarray, M: int) -> np.ndarray:
    rows, cols = np.tril_indices(M)
    S = np.zeros((M, M))
    S[rows, cols] = v
    S[cols, rows] = v
    return S


def natural_param_names(outcomes) -> list[str]:
    rows, cols = np.tril_indices(len(outcomes))
    out = []
    for name in ("Sigma", "T"):
        out += [f"{name}[{outcomes[c]},{outcomes[r]}]" for r, c in zip(rows, cols)]
    return out


# ---------------------------------------------------------------------------
# stacked design


@dataclass
class StackedDesign:
    """Per-class stacked responses and fixed-effects rows.

    Students are sorted by class id; ``X`` holds one ``M x p`` block per
    student so ``X_j`` (``M n_j x p``) is a contiguous reshape.
    """

    outcomes: tuple[str, ...]
    coef_names: list[str]
    X: np.ndarray
    y: np.ndarray
    class_ids: list[str]
    school_of_class: list[str]
    offsets: np.ndarray
    student_ids: np.ndarray = None
    stats: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        self.offsets = np.asarray(self.offsets, dtype=np.int64)
        if self.X.ndim != 3 or self.X.shape[:2] != self.y.shape:
            raise ValidationError("X must be (N, M, p) and y (N, M)")
        if self.student_ids is None:
            self.student_ids = np.array([str(i) for i in range(self.N)], dtype=object)
        sizes = np.diff(self.offsets)
        if np.any(sizes < 1) or self.offsets[0] != 0 or self.offsets[-1] != self.N:
            raise ValidationError("class offsets must partition the students")
        zero = np.all(self.X == 0.0, axis=(0, 1))
        if np.any(zero):
            names = [self.coef_names[k] for k in np.flatnonzero(zero)]
            raise RankDeficiencyError(f"identically zero design columns: {names}", names)
        self.stats = _sufficient_stats(self)

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def M(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def J(self) -> int:
        return len(self.offsets) - 1

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def y_j(self, j: int) -> np.ndarray:
        s, e = self.offsets[j], self.offsets[j + 1]
        return self.y[s:e].reshape(-1)

    def X_j(self, j: int) -> np.ndarray:
        s, e = self.offsets[j], self.offsets[j + 1]
        return self.X[s:e].reshape(-1, self.p)

    def class_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.J), self.sizes)

    def with_y(self, y: np.ndarray) -> "StackedDesign":
        return StackedDesign(self.outcomes, list(self.coef_names), self.X, y, list(self.class_ids),
                             list(self.school_of_class), self.offsets, self.student_ids)

    def subset_classes(self, keep) -> "StackedDesign":
        keep = np.asarray(keep)
        rows = np.concatenate([np.arange(self.offsets[j], self.offsets[j + 1]) for j in keep])
        sizes = self.sizes[keep]
        return StackedDesign(self.outcomes, list(self.coef_names), self.X[rows], self.y[rows],
                             [self.class_ids[j] for j in keep], [self.school_of_class[j] for j in keep],
                             np.concatenate([[0], np.cumsum(sizes)]), self.student_ids[rows])


def _sufficient_stats(D: StackedDesign) -> dict:
    J, M, p = D.J, D.M, D.p
    n = D.sizes.astype(float)
    starts = D.offsets[:-1]
    xbar = np.add.reduceat(D.X, starts, axis=0) / n[:, None, None]
    ybar = np.add.reduceat(D.y, starts, axis=0) / n[:, None]
    idx = D.class_index()
    xt = D.X - xbar[idx]
    yt = D.y - ybar[idx]
    Wxx = np.empty((J, M, p, M, p))
    Wxy = np.empty((J, M, p, M))
    Wyy = np.empty((J, M, M))
    for j in range(J):
        s, e = D.offsets[j], D.offsets[j + 1]
        a = xt[s:e].reshape(e - s, M * p)
        b = yt[s:e]
        Wxx[j] = (a.T @ a).reshape(M, p, M, p)
        Wxy[j] = (a.T @ b).reshape(M, p, M)
        Wyy[j] = b.T @ b
    return {
        "n": n,
        "xbar": xbar,
        "ybar": ybar,
        "Wxx": Wxx,
        "Wxy": Wxy,
        "Wyy": Wyy,
        "Wxx_tot": Wxx.sum(axis=0),
        "Wxy_tot": Wxy.sum(axis=0),
        "Wyy_tot": Wyy.sum(axis=0),
    }


def build_design(d: Dataset, spec: ModelSpec, pv_index: int = 1, y: np.ndarray | None = None) -> StackedDesign:
    """Stack the prepared dataset into per-class blocks for one plausible value.

    Coefficients are ordered outcome by outcome (intercept first, then the
    terms entering that outcome), followed by one column per constrained
    term.  ``y`` overrides the scores (used by the simulator).
    """
    outcomes = tuple(spec.outcomes)
    missing = [o for o in outcomes if o not in d.outcomes]
    if missing:
        raise ValidationError(f"dataset lacks outcomes {missing}")
    frame = d.frame
    order = np.argsort(frame["class_id"].to_numpy().astype(str), kind="stable")
    frame = frame.iloc[order].reset_index(drop=True)
    M = len(outcomes)

    names: list[str] = []
    cells: list[list[tuple[int, str | None]]] = []   # per coefficient: (outcome index, column or None=intercept)
    for m, o in enumerate(outcomes):
        names.append(f"{o}:intercept")
        cells.append([(m, None)])
        for t in spec.terms:
            if not t.constrained and o in t.columns:
                names.append(f"{o}:{t.name}")
                cells.append([(m, t.columns[o])])
    for t in spec.terms:
        if t.constrained:
            names.append(f"*:{t.name}")
            cells.append([(outcomes.index(o), c) for o, c in t.columns.items()])

    N, p = len(frame), len(names)
    X = np.zeros((N, M, p))
    for k, entries in enumerate(cells):
        for m, col in entries:
            if col is None:
                X[:, m, k] = 1.0
            else:
                if col not in frame.columns:
                    raise ValidationError(f"design column {col!r} not in dataset (were transforms applied?)")
                vals = frame[col].to_numpy(dtype=float)
                if np.isnan(vals).any():
                    raise ValidationError(f"column {col!r} has missing values; run listwise_filter first")
                X[:, m, k] = vals

    if y is None:
        all_outcomes = list(d.outcomes)
        Y = Dataset(frame, d.schema).scores(pv_index)
        y = Y[:, [all_outcomes.index(o) for o in outcomes]]
    else:
        y = np.asarray(y, dtype=float)[order]
    class_col = frame["class_id"].to_numpy().astype(str)
    change = np.flatnonzero(class_col[1:] != class_col[:-1]) + 1
    offsets = np.concatenate([[0], change, [N]])
    class_ids = [class_col[s] for s in offsets[:-1]]
    school = frame["school_id"].to_numpy().astype(str)
    return StackedDesign(outcomes, names, X, y, class_ids, [school[s] for s in offsets[:-1]], offsets,
                         frame["student_id"].to_numpy().astype(str).astype(object))


def check_rank(D: StackedDesign, tol: float = 1e-10) -> None:
    """Raise :class:`RankDeficiencyError` naming collinear columns."""
    Xf = D.X.reshape(-1, D.p)
    scale = np.sqrt((Xf ** 2).sum(axis=0))
    _, R, piv = linalg.qr(Xf / scale, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * diag[0]))
    if rank < D.p:
        bad = [D.coef_names[k] for k in piv[rank:]]
        raise RankDeficiencyError(f"design is rank deficient ({rank} < {D.p}); collinear columns: {bad}", bad)


# ---------------------------------------------------------------------------
# block algebra


def _chol_logdet(S: np.ndarray, what: str):
    """Batched Cholesky with condition check; returns (L, logdet)."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w = np.linalg.eigvalsh(S)
        wmin = np.min(w, axis=-1)
        cond = float(np.max(np.abs(w)) / max(np.min(np.abs(wmin)), 1e-300)) if np.all(wmin > 0) else np.inf
        raise IllConditionedError(f"{what} is not positive definite", cond) from None
    d = np.diagonal(L, axis1=-2, axis2=-1)
    cond = float(np.max((np.max(d, axis=-1) / np.min(d, axis=-1)) ** 2))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IllConditionedError(f"{what} is numerically singular", cond)
    return L, 2.0 * np.log(d).sum(axis=-1)


def _inv_from_chol(L: np.ndarray) -> np.ndarray:
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def marginal_blocks(c: CovarianceParams, n: int):
    """``A = (Sigma + n T)^-1`` and ``log|V_j|`` for a class of size ``n``."""
    if n < 1:
        raise ValidationError("class size must be >= 1")
    LB, ldB = _chol_logdet(c.Sigma + n * c.T, "Sigma + n T")
    _, ldS = _chol_logdet(c.Sigma, "Sigma")
    return _inv_from_chol(LB), float(ldB + (n - 1) * ldS)


@dataclass(frozen=True)
class LikelihoodValue:
    logL: float
    per_class: np.ndarray


@dataclass
class _Eval:
    logL: float
    beta: np.ndarray
    H: np.ndarray
    rbar: np.ndarray
    A: np.ndarray
    Sinv: np.ndarray
    gSigma: np.ndarray | None = None
    gT: np.ndarray | None = None


def _gls_system(Sinv, A, D: StackedDesign):
    st = D.stats
    n, xbar, ybar = st["n"], st["xbar"], st["ybar"]
    Ax = np.einsum("jab,jbp->jap", A, xbar)
    H = np.einsum("j,jap,jaq->pq", n, xbar, Ax) + np.einsum("ab,apbq->pq", Sinv, st["Wxx_tot"])
    g = np.einsum("j,jap,ja->p", n, Ax, ybar) + np.einsum("ab,apb->p", Sinv, st["Wxy_tot"])
    return H, g


def _solve_gls(H, g, D: StackedDesign):
    try:
        c, low = linalg.cho_factor(H)
    except linalg.LinAlgError:
        check_rank(D)
        raise RankDeficiencyError("GLS information matrix is singular") from None
    return linalg.cho_solve((c, low), g), (c, low)


def _within_ss(D: StackedDesign, beta: np.ndarray, per_class: bool = False) -> np.ndarray:
    st = D.stats
    key = "" if per_class else "_tot"
    Wxx, Wxy, Wyy = st["Wxx" + key], st["Wxy" + key], st["Wyy" + key]
    if per_class:
        xy = np.einsum("japb,p->jab", Wxy, beta)
        return Wyy - xy - np.swapaxes(xy, 1, 2) + np.einsum("japbq,p,q->jab", Wxx, beta, beta)
    xy = np.einsum("apb,p->ab", Wxy, beta)
    return Wyy - xy - xy.T + np.einsum("apbq,p,q->ab", Wxx, beta, beta)


def _evaluate(c: CovarianceParams, D: StackedDesign, beta=None, grad=False) -> _Eval:
    st = D.stats
    n = st["n"]
    LS, ldS = _chol_logdet(c.Sigma, "Sigma")
    Sinv = _inv_from_chol(LS)
    LB, ldB = _chol_logdet(c.Sigma[None] + n[:, None, None] * c.T[None], "Sigma + n T")
    A = _inv_from_chol(LB)
    H, g = _gls_system(Sinv, A, D)
    if beta is None:
        beta, _ = _solve_gls(H, g, D)
    rbar = st["ybar"] - np.einsum("jap,p->ja", st["xbar"], beta)
    Ar = np.einsum("jab,jb->ja", A, rbar)
    Sw = _within_ss(D, beta)
    quad = float(np.dot(n, np.einsum("ja,ja->j", rbar, Ar)) + np.sum(Sinv * Sw))
    N, J = D.N, D.J
    logL = -0.5 * (D.M * N * LOG_2PI + float(ldB.sum()) + (N - J) * float(ldS) + quad)
    ev = _Eval(logL, beta, H, rbar, A, Sinv)
    if grad:
        GB = -0.5 * (A - n[:, None, None] * np.einsum("ja,jb->jab", Ar, Ar))
        GS = -0.5 * ((N - J) * Sinv - Sinv @ Sw @ Sinv)
        ev.gSigma = GB.sum(axis=0) + GS
        ev.gT = np.einsum("j,jab->ab", n, GB)
    return ev


def log_likelihood(c: CovarianceParams, beta, D: StackedDesign) -> LikelihoodValue:
    """Exact log-likelihood at ``(c, beta)`` with per-class contributions."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (D.p,):
        raise ValidationError(f"beta must have length {D.p}")
    st = D.stats
    n = st["n"]
    LS, ldS = _chol_logdet(c.Sigma, "Sigma")
    Sinv = _inv_from_chol(LS)
    LB, ldB = _chol_logdet(c.Sigma[None] + n[:, None, None] * c.T[None], "Sigma + n T")
    A = _inv_from_chol(LB)
    rbar = st["ybar"] - np.einsum("jap,p->ja", st["xbar"], beta)
    Sw = _within_ss(D, beta, per_class=True)
    q = n * np.einsum("ja,jab,jb->j", rbar, A, rbar) + np.einsum("ab,jab->j", Sinv, Sw)
    per = -0.5 * (D.M * n * LOG_2PI + ldB + (n - 1) * ldS + q)
    return LikelihoodValue(float(per.sum()), per)


def profile_beta_gls(c: CovarianceParams, D: StackedDesign):
    """GLS fixed effects at ``c`` and their model-based covariance."""
    st = D.stats
    LS, _ = _chol_logdet(c.Sigma, "Sigma")
    LB, _ = _chol_logdet(c.Sigma[None] + st["n"][:, None, None] * c.T[None], "Sigma + n T")
    H, g = _gls_system(_inv_from_chol(LS), _inv_from_chol(LB), D)
    beta, fac = _solve_gls(H, g, D)
    C = linalg.cho_solve(fac, np.eye(D.p))
    return beta, 0.5 * (C + C.T)


def profiled_loglik(theta, D: StackedDesign) -> float:
    return _evaluate(CovarianceParams.from_theta(theta, D.M), D).logL


def _chol_chain(G: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Map a symmetric-matrix gradient through ``S = L L'`` with log diagonal."""
    dL = 2.0 * G @ L
    v = np.tril(dL)[np.tril_indices(L.shape[0])]
    rows, cols = np.tril_indices(L.shape[0])
    diag = rows == cols
    v[diag] *= L[rows[diag], cols[diag]]
    return v


def _analytic_grad(theta, D: StackedDesign):
    M = D.M
    k = n_cov_params(M)
    Ls, Lt = _vec_to_chol(theta[:k], M), _vec_to_chol(theta[k:], M)
    ev = _evaluate(CovarianceParams(Ls @ Ls.T, Lt @ Lt.T), D, grad=True)
    return ev.logL, np.concatenate([_chol_chain(ev.gSigma, Ls), _chol_chain(ev.gT, Lt)])


def central_difference(f, x, rel_step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.size):
        h = rel_step * (1.0 + abs(x[k]))
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        g[k] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def grad_loglik(theta, D: StackedDesign, method: str = "analytic") -> np.ndarray:
    """Gradient of the beta-profiled log-likelihood in the unconstrained parameters."""
    theta = np.asarray(theta, dtype=float)
    if method == "analytic":
        _, g = _analytic_grad(theta, D)
    elif method == "fd":
        g = central_difference(lambda t: profiled_loglik(t, D), theta)
    else:
        raise ValidationError(f"unknown gradient method {method!r}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    return g


def loglik_and_grad(theta, D: StackedDesign):
    f, g = _analytic_grad(np.asarray(theta, dtype=float), D)
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NonFiniteGradientError(int(bad[0]))
    return f, g


def check_gradient(theta, D: StackedDesign) -> float:
    """Self-check hook: max relative discrepancy, analytic vs central differences."""
    ga = grad_loglik(theta, D, "analytic")
    gf = grad_loglik(theta, D, "fd")
    return float(np.max(np.abs(ga - gf) / np.maximum(1.0, np.abs(gf))))


def natural_gradient(c: CovarianceParams, D: StackedDesign) -> np.ndarray:
    """Gradient of the profiled log-likelihood in ``vech(Sigma), vech(T)``."""
    ev = _evaluate(c, D, grad=True)
    rows, cols = np.tril_indices(D.M)
    mult = np.where(rows == cols, 1.0, 2.0)
    return np.concatenate([ev.gSigma[rows, cols] * mult, ev.gT[rows, cols] * mult])


# ---------------------------------------------------------------------------
# weighted univariate pseudo-likelihood


@dataclass
class WeightedUnivariate:
    """Per-class weighted sufficient statistics for an M=1 design.

    ``student_w`` are level-1 weights entering as precision multipliers
    (residual variance ``sigma^2 / w_i``); ``class_w`` multiply each class's
    log-likelihood contribution.
    """

    design: StackedDesign
    student_w: np.ndarray
    class_w: np.ndarray
    stats: dict = field(init=False, repr=False)

    def __post_init__(self):
        D = self.design
        if D.M != 1:
            raise ValidationError("weighted fitting supports univariate designs only")
        w = np.asarray(self.student_w, dtype=float)
        cw = np.asarray(self.class_w, dtype=float)
        if w.shape != (D.N,) or cw.shape != (D.J,):
            raise ValidationError("weight arrays do not match the design")
        if not (np.all(np.isfinite(w)) and np.all(w > 0) and np.all(np.isfinite(cw)) and np.all(cw > 0)):
            raise ValidationError("weights must be finite and positive")
        self.student_w, self.class_w = w, cw
        X, y = D.X[:, 0, :], D.y[:, 0]
        starts = D.offsets[:-1]
        Sw = np.add.reduceat(w, starts)
        xbar = np.add.reduceat(w[:, None] * X, starts, axis=0) / Sw[:, None]
        ybar = np.add.reduceat(w * y, starts) / Sw
        idx = D.class_index()
        xt, yt = X - xbar[idx], y - ybar[idx]
        wxt = w[:, None] * xt
        Wxx = np.stack([wxt[s:e].T @ xt[s:e] for s, e in zip(D.offsets[:-1], D.offsets[1:])])
        self.stats = {
            "n": D.sizes.astype(float),
            "Sw": Sw,
            "xbar": xbar,
            "ybar": ybar,
            "Wxx": Wxx,
            "Wxy": np.add.reduceat(wxt * yt[:, None], starts, axis=0),
            "Wyy": np.add.reduceat(w * yt * yt, starts),
            "sumlogw": np.add.reduceat(np.log(w), starts),
        }

    def evaluate(self, s2: float, t2: float, beta=None):
        """Returns (pseudo logL, beta, H, per-class logL, d/ds2, d/dt2)."""
        st, cw = self.stats, self.class_w
        n, Sw = st["n"], st["Sw"]
        if not (s2 > 0 and t2 > 0 and np.isfinite(s2) and np.isfinite(t2)):
            raise IllConditionedError("variance parameters must be positive", np.inf)
        B = s2 + t2 * Sw
        a = cw * Sw / B
        H = np.einsum("j,jp,jq->pq", a, st["xbar"], st["xbar"]) + np.einsum("j,jpq->pq", cw, st["Wxx"]) / s2
        g = np.einsum("j,jp,j->p", a, st["xbar"], st["ybar"]) + np.einsum("j,jp->p", cw, st["Wxy"]) / s2
        if beta is None:
            beta, _ = _solve_gls(H, g, self.design)
        rbar = st["ybar"] - st["xbar"] @ beta
        Qw = st["Wyy"] - 2.0 * st["Wxy"] @ beta + np.einsum("jpq,p,q->j", st["Wxx"], beta, beta)
        h = Sw * rbar ** 2
        per = -0.5 * (n * LOG_2PI - st["sumlogw"] + (n - 1) * np.log(s2) + np.log(B) + Qw / s2 + h / B)
        ds2 = -0.5 * ((n - 1) / s2 + 1.0 / B - Qw / s2 ** 2 - h / B ** 2)
        dt2 = -0.5 * Sw * (1.0 / B - h / B ** 2)
        return float(cw @ per), beta, H, per, float(cw @ ds2), float(cw @ dt2)

    def loglik_and_grad(self, theta):
        s2, t2 = np.exp(2.0 * theta[0]), np.exp(2.0 * theta[1])
        f, _, _, _, ds2, dt2 = self.evaluate(s2, t2)
        return f, np.array([2.0 * s2 * ds2, 2.0 * t2 * dt2])

    def scores(self, s2: float, t2: float, beta) -> np.ndarray:
        """Per-class weighted score vectors ``w_j X_j' V_j^-1 r_j``."""
        st = self.stats
        B = s2 + t2 * st["Sw"]
        rbar = st["ybar"] - st["xbar"] @ beta
        within = (st["Wxy"] - st["Wxx"] @ beta) / s2
        between = (st["Sw"] * rbar / B)[:, None] * st["xbar"]
        return self.class_w[:, None] * (between + within)
