"""Two-stage sample selection: PPS systematic schools, equal-probability classes.

Weights are inverse selection probabilities at each stage, optionally
followed by a within-cell non-response adjustment.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import Dataset
from .errors import ValidationError
from .fit import WeightSet
from .simulate import FramePopulation, stream

logger = logging.getLogger(__name__)

_SCHOOLS, _CLASSES, _RESPONSE = 10, 11, 12
DEFAULT_MIN_CLASS_SIZE = 15


def pps_inclusion_probabilities(sizes, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Inclusion probabilities for ``n`` PPS draws, with certainty units.

    A unit whose size exceeds the sampling interval of the remaining units is
    taken with certainty and removed; the interval is recomputed until no
    unit exceeds it.  Returns ``(pi, certainty_mask)``.
    """
    sizes = np.asarray(sizes, dtype=float)
    if n < 0 or n > sizes.size:
        raise ValidationError(f"cannot draw {n} of {sizes.size} units")
    if np.any(sizes <= 0) or not np.all(np.isfinite(sizes)):
        raise ValidationError("measures of size must be positive")
    cert = np.zeros(sizes.size, dtype=bool)
    pi = np.zeros(sizes.size)
    while True:
        n_rem = n - cert.sum()
        rest = ~cert
        if n_rem <= 0 or not rest.any():
            break
        interval = sizes[rest].sum() / n_rem
        new = rest & (sizes > interval)
        if not new.any():
            pi[rest] = sizes[rest] / interval
            break
        cert |= new
    pi[cert] = 1.0
    return np.minimum(pi, 1.0), cert


def systematic_pps(sizes, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Systematic PPS over units in the given order.  Returns (selected indices, pi)."""
    sizes = np.asarray(sizes, dtype=float)
    pi, cert = pps_inclusion_probabilities(sizes, n)
    chosen = list(np.flatnonzero(cert))
    rest = np.flatnonzero(~cert)
    n_rem = n - cert.sum()
    if n_rem > 0:
        cum = np.cumsum(sizes[rest])
        interval = cum[-1] / n_rem
        points = rng.uniform(0.0, interval) + interval * np.arange(n_rem)
        hit = np.searchsorted(cum, points, side="right")
        chosen += list(rest[np.minimum(hit, rest.size - 1)])
    return np.array(sorted(chosen), dtype=int), pi


def group_small_classes(class_ids, sizes, min_size: int = DEFAULT_MIN_CLASS_SIZE) -> list[list[str]]:
    """Merge classes smaller than ``min_size`` into pseudo-classes.

    Small classes are accumulated in id order until the group reaches
    ``min_size``; a leftover undersized group joins the last group formed.
    """
    order = np.argsort(np.asarray(class_ids, dtype=str), kind="stable")
    groups: list[list[str]] = []
    merged_last: int | None = None
    pending: list[str] = []
    pending_size = 0
    for k in order:
        cid, n = str(class_ids[k]), int(sizes[k])
        if n >= min_size:
            groups.append([cid])
            continue
        pending.append(cid)
        pending_size += n
        if pending_size >= min_size:
            groups.append(pending)
            merged_last = len(groups) - 1
            pending, pending_size = [], 0
    if pending:
        if groups:
            target = merged_last if merged_last is not None else len(groups) - 1
            groups[target] = groups[target] + pending
        else:
            groups.append(pending)
    return groups


def sample_classes(class_ids, sizes, n_draw: int, rng: np.random.Generator,
                   min_size: int = DEFAULT_MIN_CLASS_SIZE, tilt_sizes=None) -> dict[str, float]:
    """Select classes within one school.  Returns ``{class_id: w_{j|k}}`` for selected classes.

    Groups (classes or pseudo-classes) are drawn with equal probability, or,
    when ``tilt_sizes`` is given, by PPS on those sizes (used to simulate an
    informative design).
    """
    groups = group_small_classes(class_ids, sizes, min_size)
    G = len(groups)
    k = min(n_draw, G)
    if tilt_sizes is None:
        picked = rng.choice(G, size=k, replace=False)
        pi = np.full(G, k / G)
    else:
        lookup = dict(zip(map(str, class_ids), np.asarray(tilt_sizes, float)))
        gsize = np.array([sum(lookup[c] for c in g) for g in groups])
        picked, pi = systematic_pps(gsize, k, rng)
    out = {}
    for g in sorted(int(i) for i in picked):
        for cid in groups[g]:
            out[cid] = 1.0 / pi[g]
    return out


def adjust_for_nonresponse(weights: Mapping[str, float], responded: Mapping[str, bool],
                           cell: Mapping[str, str]) -> dict[str, float]:
    """Inflate respondents' weights so each cell keeps its weighted total."""
    totals: dict[str, float] = {}
    resp_totals: dict[str, float] = {}
    for u, w in weights.items():
        c = cell[u]
        totals[c] = totals.get(c, 0.0) + w
        if responded.get(u, False):
            resp_totals[c] = resp_totals.get(c, 0.0) + w
    empty = sorted(c for c in totals if c not in resp_totals)
    if empty:
        raise ValidationError(f"adjustment cell(s) with no respondents: {empty}")
    return {u: w * totals[cell[u]] / resp_totals[cell[u]] for u, w in weights.items() if responded.get(u, False)}


@dataclass(frozen=True)
class SampleDesign:
    schools_per_stratum: int | Mapping[str, int] = 10
    classes_per_school: int = 1
    min_class_size: int = DEFAULT_MIN_CLASS_SIZE
    tilt: float = 0.0                 # PPS on exp(tilt * u_read) within schools
    school_response: float = 1.0
    class_response: float = 1.0
    student_response: float = 1.0
    seed: int = 1

    def n_for(self, stratum: str) -> int:
        if isinstance(self.schools_per_stratum, Mapping):
            return int(self.schools_per_stratum.get(stratum, 0))
        return int(self.schools_per_stratum)


def sample_pps_systematic(pop: FramePopulation, counts: int | Mapping[str, int], seed: int
                          ) -> tuple[list[str], dict[str, float], dict[str, str]]:
    """PPS systematic school selection within explicit strata.

    Schools are sorted by (school type, province, id) inside each stratum.
    Returns (selected school ids, ``{school: w_k}``, ``{school: stratum}``).
    """
    schools = pop.schools.sort_values(["stratum", "school_type", "province_id", "school_id"], kind="stable")
    w_school: dict[str, float] = {}
    stratum_of: dict[str, str] = {}
    for s_idx, (stratum, frame) in enumerate(schools.groupby("stratum", sort=True)):
        n = int(counts.get(stratum, 0)) if isinstance(counts, Mapping) else int(counts)
        if n > len(frame):
            raise ValidationError(f"stratum {stratum!r} has {len(frame)} schools, {n} requested")
        if n == 0:
            continue
        picked, pi = systematic_pps(frame["size"].to_numpy(), n, stream(seed, _SCHOOLS, s_idx))
        for i in picked:
            sid = frame["school_id"].iloc[i]
            w_school[sid] = 1.0 / pi[i]
            stratum_of[sid] = stratum
    return sorted(w_school), w_school, stratum_of


def nonresponse_adjust(ws: WeightSet, school_resp: Mapping[str, bool], class_resp: Mapping[str, bool],
                       student_resp: Mapping[str, bool], school_cell: Mapping[str, str]) -> WeightSet:
    """Drop non-responding units and reweight respondents within cells.

    Cells are the stratum for schools, the school for classes and the class
    for students.  Units missing from a response map count as respondents.
    Non-response cascades upward: a class without responding students is a
    non-responding class, a school without responding classes a
    non-responding school.
    """
    def resp(units, table):
        return {u: bool(table.get(u, True)) for u in units}

    student_ok = resp(ws.student, student_resp)
    class_ok = resp(ws.class_cond, class_resp)
    has_student = {ws.student_class[s] for s, ok in student_ok.items() if ok}
    class_ok = {c: ok and c in has_student for c, ok in class_ok.items()}
    has_class = {ws.class_school[c] for c, ok in class_ok.items() if ok}
    school_ok = {k: ok and k in has_class for k, ok in resp(ws.school, school_resp).items()}

    w_school = adjust_for_nonresponse(ws.school, school_ok, school_cell)
    w_class = {c: w for c, w in ws.class_cond.items() if ws.class_school[c] in w_school}
    w_class = adjust_for_nonresponse(w_class, class_ok, ws.class_school)
    kept = {s: w for s, w in ws.student.items() if ws.student_class[s] in w_class}
    students = adjust_for_nonresponse(kept, student_ok, ws.student_class)
    return WeightSet(students, w_class, w_school, {c: ws.class_school[c] for c in w_class},
                     {s: ws.student_class[s] for s in students}, ws.scaling)


def draw_sample(pop: FramePopulation, data: Dataset, design: SampleDesign) -> tuple[Dataset, WeightSet]:
    """Select schools and classes from the frame and return the sample with its weights."""
    counts = design.schools_per_stratum
    if not isinstance(counts, Mapping):
        sizes = pop.schools.groupby("stratum").size()
        counts = {k: min(int(counts), int(v)) for k, v in sizes.items()}
    _, w_school, stratum_of = sample_pps_systematic(pop, counts, design.seed)
    classes_by_school = {k: g for k, g in pop.classes.groupby("school_id", sort=False)}
    school_index = {sid: i for i, sid in enumerate(pop.schools["school_id"])}
    w_class: dict[str, float] = {}
    class_school: dict[str, str] = {}
    for sid in sorted(w_school):
        cls = classes_by_school[sid]
        tilt = None
        if design.tilt:
            tilt = np.exp(design.tilt * cls[f"u_{pop.config.outcomes[0]}"].to_numpy())
        got = sample_classes(cls["class_id"].to_numpy(), cls["size"].to_numpy(), design.classes_per_school,
                             stream(design.seed, _CLASSES, school_index[sid]), design.min_class_size, tilt)
        for cid, w in got.items():
            w_class[cid] = w
            class_school[cid] = sid

    frame = data.frame[data.frame["class_id"].isin(w_class)].reset_index(drop=True)
    ws = WeightSet(dict.fromkeys(frame["student_id"], 1.0), w_class, w_school, class_school,
                   dict(zip(frame["student_id"], frame["class_id"])))
    if min(design.school_response, design.class_response, design.student_response) < 1.0:
        rng = stream(design.seed, _RESPONSE)

        def draw(units, p):
            return {u: bool(rng.random() < p) for u in sorted(units)}

        ws = nonresponse_adjust(ws, draw(ws.school, design.school_response), draw(ws.class_cond, design.class_response),
                                draw(ws.student, design.student_response), stratum_of)
        frame = frame[frame["student_id"].isin(ws.student)].reset_index(drop=True)
    return data.with_frame(frame), ws


__all__ = [
    "DEFAULT_MIN_CLASS_SIZE",
    "SampleDesign",
    "adjust_for_nonresponse",
    "draw_sample",
    "nonresponse_adjust",
    "group_small_classes",
    "pps_inclusion_probabilities",
    "sample_classes",
    "sample_pps_systematic",
    "systematic_pps",
]
