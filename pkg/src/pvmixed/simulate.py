"""Synthetic provinces -> schools -> classes -> students with plausible values.

Defaults reproduce the scale of the Italian TIMSS & PIRLS 2011 combined
sample (about 239 classes of 16-17 students, GVA between 55 and 142) and use
the final-model estimates as generative truth.

Random streams are keyed by ``(stream kind, unit index)`` through
``numpy.random.SeedSequence`` spawn keys, so adding students to a class
never changes class-level draws, and output does not depend on generation
order.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .data import Dataset, GRAND_MEAN, ModelSpec, Schema, Spline, Term, TransformSpec, pv_column
from .errors import ValidationError

logger = logging.getLogger(__name__)

OUTCOMES = ("read", "math", "scie")

# final-model estimates (score points, points^2)
REFERENCE_INTERCEPT = {"read": 531.73, "math": 514.99, "scie": 531.47}
REFERENCE_COEF = {
    "female": (2.92, -11.96, -10.64),
    "lang": (-22.57, -14.94, -23.74),
    "preschool": (8.85, 8.46, 10.91),
    "hrl": (14.04, 10.64, 13.23),
    "elt": (7.24, 10.07, 6.53),
    "aer": (5.28, 8.61, 7.00),
    "gva_below100": (0.45, 0.48, 0.55),
}
REFERENCE_SIGMA = [[3716.1, 2400.9, 2757.4], [2400.9, 3500.1, 2452.3], [2757.4, 2452.3, 3471.7]]
REFERENCE_T = [[725.7, 915.2, 931.6], [915.2, 1332.3, 1266.1], [931.6, 1266.1, 1274.1]]

# student-level binary covariates: P(1); continuous: (mean, sd)
BINARY = {"female": 0.51, "preschool": 0.75, "lang": 0.21}
CONTINUOUS = {"hrl": (9.72, 1.55), "elt": (9.24, 1.60)}
SCHOOL_CONTINUOUS = {"aer": (9.62, 1.07)}
TEACHER_DEGREE_P = 0.35
SHARED_MATH_SCIENCE_TEACHER_P = 0.6
GVA_RANGE = (55.0, 142.0)

# stream kinds
_STRUCT, _CLASS, _STUDENT, _MISSING, _PV, _PVPARAM = range(6)


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class AreaConfig:
    name: str
    n_classes: int
    gva_mean: float
    gva_sd: float = 10.0
    n_provinces: int = 21
    T_scale: float = 1.0


DEFAULT_AREAS = (
    AreaConfig("North-West", 48, 122.0, 12.0),
    AreaConfig("North-East", 49, 120.0, 12.0),
    AreaConfig("Centre", 48, 113.0, 12.0),
    AreaConfig("South", 49, 66.0, 8.0),
    AreaConfig("South-Islands", 45, 69.0, 8.0),
)


@dataclass(frozen=True)
class SimConfig:
    """Generative settings.  Covariance matrices are in points^2."""

    outcomes: tuple = OUTCOMES
    areas: tuple = DEFAULT_AREAS
    mean_class_size: float = 17.3
    two_class_school_share: float = 37 / 202
    intercept: Mapping[str, float] = field(default_factory=lambda: dict(REFERENCE_INTERCEPT))
    coef: Mapping[str, tuple] = field(default_factory=lambda: dict(REFERENCE_COEF))
    Sigma: tuple = tuple(map(tuple, REFERENCE_SIGMA))
    T: tuple = tuple(map(tuple, REFERENCE_T))
    gva_knot: float = 100.0
    gva_upper_slope: tuple | None = None
    n_pv: int = 5
    sd_meas: float = 25.0
    pv_mode: str = "additive"
    missing: Mapping[str, float] = field(default_factory=dict)
    # frame mode: every area gets this many schools with 1 + Poisson(mean - 1) classes
    frame_schools_per_area: int | None = None
    frame_mean_classes: float = 3.0
    g48_share: float = 0.25
    private_share: float = 0.07
    seed: int = 20110401

    def __post_init__(self):
        M = len(self.outcomes)
        S, T = np.asarray(self.Sigma, float), np.asarray(self.T, float)
        if S.shape != (M, M) or T.shape != (M, M):
            raise ValidationError("Sigma and T must be M x M")
        for name, mat, allow_zero in (("Sigma", S, False), ("T", T, True)):
            if not np.allclose(mat, mat.T):
                raise ValidationError(f"{name} must be symmetric")
            w = np.linalg.eigvalsh(mat)
            if w[0] < 0 or (w[0] <= 0 and not allow_zero):
                raise ValidationError(f"{name} must be positive {'semi' if allow_zero else ''}definite")
        for k, v in self.coef.items():
            if len(v) != M:
                raise ValidationError(f"coefficient {k!r} needs {M} values")
        if self.mean_class_size < 1 or self.n_pv < 1 or self.sd_meas < 0:
            raise ValidationError("class size and n_pv must be >= 1, sd_meas >= 0")
        if self.pv_mode not in ("additive", "posterior"):
            raise ValidationError(f"unknown pv_mode {self.pv_mode!r}")
        for col, p in self.missing.items():
            if col not in BINARY and col not in CONTINUOUS:
                raise ValidationError(f"missingness only for student covariates, not {col!r}")
            if not 0 <= p < 1:
                raise ValidationError("missingness probabilities must be in [0, 1)")

    @property
    def n_classes(self) -> int:
        return sum(a.n_classes for a in self.areas)

    def with_classes(self, J: int) -> "SimConfig":
        """Rescale the per-area class counts to a total of ``J``."""
        base = np.array([a.n_classes for a in self.areas], float)
        raw = base / base.sum() * J
        counts = np.floor(raw).astype(int)
        for k in np.argsort(-(raw - counts))[: J - counts.sum()]:
            counts[k] += 1
        return replace(self, areas=tuple(replace(a, n_classes=int(c)) for a, c in zip(self.areas, counts)))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["outcomes"] = list(self.outcomes)
        out["areas"] = [asdict(a) for a in self.areas]
        out["Sigma"] = [list(r) for r in self.Sigma]
        out["T"] = [list(r) for r in self.T]
        out["coef"] = {k: list(v) for k, v in self.coef.items()}
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "SimConfig":
        kw = dict(raw)
        if "areas" in kw:
            kw["areas"] = tuple(AreaConfig(**a) for a in kw["areas"])
        for key in ("outcomes",):
            if key in kw:
                kw[key] = tuple(kw[key])
        for key in ("Sigma", "T"):
            if key in kw:
                kw[key] = tuple(tuple(float(x) for x in r) for r in kw[key])
        if "coef" in kw:
            kw["coef"] = {k: tuple(v) for k, v in kw["coef"].items()}
        if kw.get("gva_upper_slope") is not None:
            kw["gva_upper_slope"] = tuple(kw["gva_upper_slope"])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def generative_model_spec(c: SimConfig, upper_branch: bool = False, terms=None) -> ModelSpec:
    """The analysis model matching the generative one.

    Continuous covariates are grand-mean centered; GVA enters through the
    spline below the knot (plus the upper branch when ``upper_branch``).
    """
    names = list(terms) if terms is not None else list(c.coef)
    out = [Term(n, {o: n for o in c.outcomes}) for n in names if n != "gva_below100"]
    splines = ()
    if "gva_below100" in names:
        spline = Spline("gva", c.gva_knot, constrain_upper=not upper_branch)
        out.append(Term("gva_below100", {o: spline.below_name for o in c.outcomes}))
        if upper_branch:
            out.append(Term("gva_above100", {o: spline.above_name for o in c.outcomes}))
        splines = (spline,)
    center = tuple((n, GRAND_MEAN) for n in names if n in CONTINUOUS or n in SCHOOL_CONTINUOUS)
    return ModelSpec(tuple(c.outcomes), tuple(out), TransformSpec(center=center, splines=splines))


@dataclass
class FramePopulation:
    """The generated population: units at every level plus true scores."""

    config: SimConfig
    provinces: pd.DataFrame
    schools: pd.DataFrame
    classes: pd.DataFrame
    students: pd.DataFrame
    true_scores: np.ndarray
    missing_mask: pd.DataFrame

    @property
    def schema(self) -> Schema:
        c = self.config
        levels = {k: "student" for k in (*BINARY, *CONTINUOUS)}
        levels.update({k: "school" for k in SCHOOL_CONTINUOUS})
        levels["gva"] = "province"
        teacher = {}
        for o in c.outcomes:
            levels[f"tdeg_{o}"] = "teacher"
            teacher[f"tdeg_{o}"] = o
        return Schema(tuple(c.outcomes), c.n_pv, levels, teacher, {"area": "province"})


def _school_layout(c: SimConfig, rng):
    """Per school: (area index, number of classes)."""
    layout = []
    for a, area in enumerate(c.areas):
        if c.frame_schools_per_area is None:
            s = c.two_class_school_share
            n_two = int(round(area.n_classes * s / (1 + s)))
            counts = [2] * n_two + [1] * (area.n_classes - 2 * n_two)
            counts = list(rng.permutation(counts))
        else:
            counts = list(1 + rng.poisson(c.frame_mean_classes - 1, c.frame_schools_per_area))
        layout += [(a, int(k)) for k in counts]
    return layout


def simulate_population(c: SimConfig) -> tuple[FramePopulation, Dataset]:
    """Draw a population from the two-level model and attach plausible values."""
    M = len(c.outcomes)
    Sigma, T = np.asarray(c.Sigma, float), np.asarray(c.T, float)
    rng = stream(c.seed, _STRUCT)

    prov_rows = []
    for a, area in enumerate(c.areas):
        gva = np.clip(rng.normal(area.gva_mean, area.gva_sd, area.n_provinces), *GVA_RANGE)
        for g in gva:
            prov_rows.append((f"P{len(prov_rows) + 1:03d}", area.name, a, float(np.round(g, 1))))
    provinces = pd.DataFrame(prov_rows, columns=["province_id", "area", "area_index", "gva"])

    layout = _school_layout(c, rng)
    school_rows, class_rows = [], []
    for k, (a, n_cls) in enumerate(layout):
        provs = provinces.index[provinces["area_index"] == a]
        prov = provinces.loc[rng.choice(provs)]
        grade = "g48" if rng.random() < c.g48_share else "g4"
        stype = "private" if rng.random() < c.private_share else "public"
        aer = rng.normal(*SCHOOL_CONTINUOUS["aer"])
        sid = f"S{k + 1:04d}"
        sizes = 1 + rng.poisson(c.mean_class_size - 1, n_cls)
        for n in sizes:
            class_rows.append((f"C{len(class_rows) + 1:05d}", sid, int(n)))
        school_rows.append((sid, prov["area"], a, f"{prov['area']}|{grade}", grade, stype,
                            prov["province_id"], int(sizes.sum()), aer))
    schools = pd.DataFrame(school_rows, columns=["school_id", "area", "area_index", "stratum", "grade_type",
                                                 "school_type", "province_id", "size", "aer"])
    classes = pd.DataFrame(class_rows, columns=["class_id", "school_id", "size"])

    school_by_id = schools.set_index("school_id")
    prov_by_id = provinces.set_index("province_id")
    beta = {k: np.asarray(v, float) for k, v in c.coef.items()}
    alpha = np.array([c.intercept[o] for o in c.outcomes])
    upper = np.zeros(M) if c.gva_upper_slope is None else np.asarray(c.gva_upper_slope, float)

    blocks, scores, u_rows, masks = [], [], [], []
    for j, (cid, sid, n) in enumerate(classes.itertuples(index=False)):
        sch = school_by_id.loc[sid]
        prov = prov_by_id.loc[sch["province_id"]]
        scale = c.areas[int(sch["area_index"])].T_scale
        crng = stream(c.seed, _CLASS, j)
        u = crng.multivariate_normal(np.zeros(M), T * scale, method="cholesky") if np.any(T) else np.zeros(M)
        tdeg = (crng.random(M) < TEACHER_DEGREE_P).astype(float)
        if M == 3 and crng.random() < SHARED_MATH_SCIENCE_TEACHER_P:
            tdeg[2] = tdeg[1]
        u_rows.append(u)

        srng = stream(c.seed, _STUDENT, j)
        cols = {name: (srng.random(n) < p).astype(float) for name, p in BINARY.items()}
        for name, (mu, sd) in CONTINUOUS.items():
            cols[name] = srng.normal(mu, sd, n)
        e = srng.multivariate_normal(np.zeros(M), Sigma, size=n, method="cholesky")

        mean = np.tile(alpha, (n, 1))
        for name, b in beta.items():
            if name in BINARY:
                mean += np.outer(cols[name], b)
            elif name in CONTINUOUS:
                mean += np.outer(cols[name] - CONTINUOUS[name][0], b)
            elif name in SCHOOL_CONTINUOUS:
                mean += (sch[name] - SCHOOL_CONTINUOUS[name][0]) * b
            elif name == "gva_below100":
                mean += min(prov["gva"] - c.gva_knot, 0.0) * b
            else:
                raise ValidationError(f"no generator for coefficient {name!r}")
        mean += max(prov["gva"] - c.gva_knot, 0.0) * upper
        scores.append(mean + u + e)

        frame = pd.DataFrame({
            "student_id": [f"{cid}_{i + 1:03d}" for i in range(n)],
            "class_id": cid, "school_id": sid, "province_id": sch["province_id"], "area": sch["area"],
            **cols,
            "aer": sch["aer"], "gva": prov["gva"],
            **{f"tdeg_{o}": tdeg[m] for m, o in enumerate(c.outcomes)},
        })
        mrng = stream(c.seed, _MISSING, j)
        mask = pd.DataFrame({col: mrng.random(n) < p for col, p in sorted(c.missing.items())})
        blocks.append(frame)
        masks.append(mask)

    students = pd.concat(blocks, ignore_index=True)
    u_arr = np.array(u_rows)
    for m, o in enumerate(c.outcomes):
        classes[f"u_{o}"] = u_arr[:, m]
    missing_mask = pd.concat(masks, ignore_index=True) if c.missing else pd.DataFrame(index=students.index)
    pop = FramePopulation(c, provinces.drop(columns="area_index"), schools.drop(columns="area_index"),
                          classes, students, np.vstack(scores), missing_mask)
    return pop, draw_plausible_values(pop, c.n_pv, c.sd_meas, c.seed, c.pv_mode)


def _observed_dataset(pop: FramePopulation, pv: np.ndarray) -> Dataset:
    """Dataset frame with PV columns (``pv`` is (m, N, M)) and missingness applied."""
    c = pop.config
    st = pop.students.copy()
    for col in pop.missing_mask.columns:
        st.loc[pop.missing_mask[col].to_numpy(), col] = np.nan
    ids = ["student_id", "class_id", "school_id", "province_id", "area"]
    pv_cols = {}
    for l in range(pv.shape[0]):
        for m, o in enumerate(c.outcomes):
            pv_cols[pv_column(o, l + 1)] = pv[l, :, m]
    rest = [k for k in st.columns if k not in ids]
    frame = pd.concat([st[ids], pd.DataFrame(pv_cols), st[rest]], axis=1)
    schema = replace(pop.schema, n_pv=pv.shape[0])
    return Dataset(frame, schema)


def draw_plausible_values(pop: FramePopulation, m: int, sd_meas: float, seed: int,
                          mode: str = "additive") -> Dataset:
    """Attach ``m`` plausible values per outcome.

    ``additive``: true score plus independent N(0, sd_meas^2) error per PV.
    ``posterior``: one noisy measurement ``x = true + N(0, sd_meas^2)``; the
    generative model is fitted to ``x`` and each PV is a draw of the true
    score from its conditional distribution given ``x``, with parameters
    drawn from the fit's large-sample distribution (proper imputation).
    """
    if m < 1 or sd_meas < 0:
        raise ValidationError("need m >= 1 and sd_meas >= 0")
    true = pop.true_scores
    N, M = true.shape
    sizes = pop.classes["size"].to_numpy()
    starts = np.concatenate([[0], np.cumsum(sizes)])
    pv = np.empty((m, N, M))
    if mode == "additive" or sd_meas == 0:
        for l in range(m):
            for j in range(len(sizes)):
                s, e = starts[j], starts[j + 1]
                pv[l, s:e] = true[s:e] + stream(seed, _PV, l, j).normal(0.0, sd_meas, (e - s, M))
    elif mode == "posterior":
        pv = _posterior_pvs(pop, m, sd_meas, seed, starts)
    else:
        raise ValidationError(f"unknown pv mode {mode!r}")
    return _observed_dataset(pop, pv)


def _posterior_pvs(pop, m, sd_meas, seed, starts):
    from .data import prepare
    from .fit import fit_ml
    from .likelihood import CovarianceParams, build_design

    c = pop.config
    true = pop.true_scores
    N, M = true.shape
    J = len(starts) - 1
    x = np.empty_like(true)
    for j in range(J):
        s, e = starts[j], starts[j + 1]
        x[s:e] = true[s:e] + stream(seed, _PV, 999, j).normal(0.0, sd_meas, (e - s, M))
    full = Dataset(pd.concat([pop.students, pd.DataFrame(x, columns=[pv_column(o, 1) for o in c.outcomes])],
                             axis=1), replace(pop.schema, n_pv=1))
    spec = generative_model_spec(c)
    prepared, _ = prepare(full, spec)
    D = build_design(prepared, spec, 1)
    order = np.argsort(pop.students["class_id"].to_numpy().astype(str), kind="stable")
    if not np.array_equal(order, np.arange(N)):
        raise ValidationError("population students must be sorted by class id")
    F = fit_ml(D)
    s2I = sd_meas ** 2 * np.eye(M)
    pv = np.empty((m, N, M))
    for l in range(m):
        prng = stream(seed, _PVPARAM, l)
        beta = prng.multivariate_normal(F.beta, F.cov_model, method="cholesky")
        for _ in range(50):
            v = prng.multivariate_normal(F.vc, F.vc_cov, method="eigh") if np.all(np.isfinite(F.vc_cov)) else F.vc
            cp = CovarianceParams.from_natural(v, M)
            S_true = cp.Sigma - s2I
            if np.linalg.eigvalsh(S_true)[0] > 0 and np.linalg.eigvalsh(cp.T)[0] > 0:
                break
        else:
            cp = F.params
            S_true = cp.Sigma - s2I
        Tm = cp.T
        mu = D.X @ beta
        for j in range(J):
            s, e = starts[j], starts[j + 1]
            n = e - s
            R = x[s:e] - mu[s:e]
            Rbar = R.mean(axis=0)
            B = S_true + n * Tm
            K1 = B @ np.linalg.inv(B + s2I)
            K2 = S_true @ np.linalg.inv(S_true + s2I)
            L1 = np.linalg.cholesky(0.5 * ((B - K1 @ B) + (B - K1 @ B).T))
            L2 = np.linalg.cholesky(0.5 * ((S_true - K2 @ S_true) + (S_true - K2 @ S_true).T))
            Z = stream(seed, _PV, l, j).standard_normal((n, M))
            Zbar = Z.mean(axis=0)
            pv[l, s:e] = (mu[s:e] + Rbar @ K1.T + (R - Rbar) @ K2.T
                          + Zbar @ L1.T + (Z - Zbar) @ L2.T)
    return pv


def write_population(pop: FramePopulation, prefix) -> list[Path]:
    """Frame sidecars: ``<prefix>.schools.csv``, ``.classes.csv``, ``.provinces.csv``."""
    prefix = Path(prefix)
    out = []
    for name in ("provinces", "schools", "classes"):
        path = prefix.with_name(prefix.name + f".{name}.csv")
        getattr(pop, name).to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        out.append(path)
    return out
