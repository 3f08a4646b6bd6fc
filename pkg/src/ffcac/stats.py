"""Accuracy metrics, repeat aggregation and rank-based significance tests.

The Friedman statistic follows Demsar (2006); Nemenyi critical differences
use the studentized-range constants q_alpha / sqrt(2) tabulated there (k <= 10)
and in Garcia & Herrera (2008) style extensions up to k = 20.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, InvalidInput, ShapeError, UnsupportedParameters


def accuracy(predictions, labels) -> float:
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ShapeError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise EmptyInput("accuracy of an empty set")
    return sum(p == t for p, t in zip(predictions, labels)) / len(labels)


def average_accuracy(session_accuracies) -> float:
    a = [float(x) for x in session_accuracies]
    if not a:
        raise EmptyInput("no session accuracies")
    return math.fsum(a) / len(a)


@dataclass
class Summary:
    mean: np.ndarray  # per session
    std: np.ndarray | None
    aa_mean: float
    aa_std: float | None
    n: int

    def cells(self, scale: float = 100.0, digits: int = 2) -> list[str]:
        def cell(m, s):
            return f"{m * scale:.{digits}f}" + ("" if s is None else f"±{s * scale:.{digits}f}")

        stds = [None] * len(self.mean) if self.std is None else list(self.std)
        return [cell(m, s) for m, s in zip(self.mean, stds)] + [cell(self.aa_mean, self.aa_std)]


def aggregate(reports) -> Summary:
    """Mean and sample standard deviation (n - 1) per session and for AA.

    Accepts RunReport-like objects (``accuracies``/``aa``) or raw accuracy lists.
    """
    rows = [list(getattr(r, "accuracies", r)) for r in reports]
    if not rows:
        raise EmptyInput("nothing to aggregate")
    if len({len(r) for r in rows}) != 1:
        raise ShapeError("reports differ in session count")
    acc = np.asarray(rows, dtype=np.float64)
    aa = np.array([average_accuracy(r) for r in rows])
    n = len(rows)
    std = acc.std(axis=0, ddof=1) if n >= 2 else None
    return Summary(acc.mean(axis=0), std, float(aa.mean()), float(aa.std(ddof=1)) if n >= 2 else None, n)


def results_table(summaries: dict, delimiter: str | None = None) -> str:
    """Methods x (sessions..., AA) table of mean±std cells in percent."""
    if not summaries:
        return ""
    n_sessions = len(next(iter(summaries.values())).mean)
    header = ["Method"] + [str(m) for m in range(n_sessions)] + ["AA"]
    rows = [[name] + s.cells() for name, s in summaries.items()]
    if delimiter is not None:
        return "\n".join(delimiter.join(r) for r in [header] + rows) + "\n"
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "-" * len(fmt(header))] + [fmt(r) for r in rows]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# ranks


def rank_rows(observations) -> np.ndarray:
    """Rank methods within each observation row: highest accuracy gets rank 1,
    ties share their average rank."""
    x = np.asarray(observations, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 2 or x.shape[0] < 1:
        raise ShapeError("need an observations x methods matrix with >= 2 methods")
    ranks = np.empty_like(x)
    for i, row in enumerate(x):
        order = np.argsort(-row, kind="stable")
        sorted_vals = row[order]
        r = np.empty(len(row))
        j = 0
        while j < len(row):
            k = j
            while k + 1 < len(row) and sorted_vals[k + 1] == sorted_vals[j]:
                k += 1
            r[order[j:k + 1]] = (j + k) / 2.0 + 1.0
            j = k + 1
        ranks[i] = r
    return ranks


def rank_histogram(ranks) -> np.ndarray:
    """methods x k matrix; column r counts rows where the method's rank rounds to r + 1.

    Tied (fractional) ranks are split evenly over the positions they span.
    """
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.ndim != 2:
        raise ShapeError("rank table must be 2-D")
    n, k = ranks.shape
    hist = np.zeros((k, k))
    for row in ranks:
        for j, r in enumerate(row):
            # a tie over positions lo..hi has average rank r; width from the tie size
            tie = np.sum(row == r)
            lo = int(round(r - (tie - 1) / 2.0))
            for pos in range(lo, lo + tie):
                hist[j, pos - 1] += 1.0 / tie
    return hist


# --------------------------------------------------------------------------
# special functions (no statistics dependency)


def _gammainc_series(a, x):
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gammaincc_cf(a, x):
    # modified Lentz continued fraction
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0 or x < 0:
        raise InvalidInput("gammaincc needs a > 0 and x >= 0")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gammainc_series(a, x)
    return _gammaincc_cf(a, x)


def chi2_sf(x: float, df: float) -> float:
    return 1.0 if x <= 0 else gammaincc(df / 2.0, x / 2.0)


def _betacf(a, b, x):
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise InvalidInput("betainc needs 0 <= x <= 1")
    if x in (0.0, 1.0):
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(lbt) * _betacf(a, b, x) / a
    return 1.0 - math.exp(lbt) * _betacf(b, a, 1.0 - x) / b


def f_sf(x: float, d1: float, d2: float) -> float:
    if x <= 0:
        return 1.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x))


# --------------------------------------------------------------------------
# tests


@dataclass
class FriedmanResult:
    statistic: float
    df: int
    p_value: float
    mean_ranks: np.ndarray
    n: int
    k: int
    iman_davenport: float | None = None
    iman_davenport_df: tuple | None = None
    iman_davenport_p: float | None = None


def friedman(ranks) -> FriedmanResult:
    """Friedman chi-square over an observations x methods rank table, plus the
    Iman-Davenport F correction."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.ndim != 2:
        raise ShapeError("rank table must be 2-D")
    n, k = ranks.shape
    if k < 2 or n < 2:
        raise InvalidInput(f"friedman needs >= 2 methods and >= 2 observations (got k={k}, N={n})")
    mean_ranks = ranks.mean(axis=0)
    chi2 = 12.0 * n / (k * (k + 1)) * (math.fsum(mean_ranks ** 2) - k * (k + 1) ** 2 / 4.0)
    chi2 = max(chi2, 0.0) if abs(chi2) < 1e-9 else chi2
    res = FriedmanResult(chi2, k - 1, chi2_sf(chi2, k - 1), mean_ranks, n, k)
    denom = n * (k - 1) - chi2
    if denom > 0:
        ff = (n - 1) * chi2 / denom
        d1, d2 = k - 1, (k - 1) * (n - 1)
        res.iman_davenport, res.iman_davenport_df, res.iman_davenport_p = ff, (d1, d2), f_sf(ff, d1, d2)
    return res


# q_alpha / sqrt(2) for the two-tailed Nemenyi test, k = 2..20
NEMENYI_Q = {
    0.05: (1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164,
           3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458, 3.489, 3.517, 3.544),
    0.10: (1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920,
           2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230, 3.261, 3.291, 3.319),
}


def nemenyi_q(k: int, alpha: float = 0.05) -> float:
    table = NEMENYI_Q.get(round(float(alpha), 10))
    if table is None or not 2 <= k <= 1 + len(table):
        raise UnsupportedParameters(f"no Nemenyi constant for k={k}, alpha={alpha}")
    return table[k - 2]


def nemenyi_cd(k: int, n: int, alpha: float = 0.05) -> float:
    if n < 1:
        raise InvalidInput("N must be >= 1")
    return nemenyi_q(k, alpha) * math.sqrt(k * (k + 1) / (6.0 * n))


def significant_pairs(mean_ranks, cd: float) -> list[tuple[int, int]]:
    r = np.asarray(mean_ranks)
    return [(i, j) for i, j in itertools.combinations(range(len(r)), 2) if abs(r[i] - r[j]) > cd]


@dataclass
class CDDiagram:
    methods: list  # ordered best (lowest mean rank) first
    mean_ranks: list
    cd: float
    alpha: float
    bars: list  # maximal runs (>= 2 methods) whose pairwise gaps are all <= cd
    groups: list  # connected components of the "gap <= cd" relation

    def to_record(self) -> dict:
        return {"methods": self.methods, "mean_ranks": self.mean_ranks, "cd": self.cd,
                "alpha": self.alpha, "bars": self.bars, "groups": self.groups}


def cd_diagram_data(ranks, methods=None, alpha: float = 0.05) -> CDDiagram:
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.ndim != 2 or ranks.shape[1] < 2:
        raise ShapeError("rank table must be observations x (>= 2) methods")
    n, k = ranks.shape
    methods = list(methods) if methods is not None else [f"m{j}" for j in range(k)]
    if len(methods) != k:
        raise ShapeError("one method name per column is required")
    mr = ranks.mean(axis=0)
    order = np.argsort(mr, kind="stable")
    r = mr[order]
    cd = nemenyi_cd(k, n, alpha)
    names = [methods[j] for j in order]
    # 1-D: a set has all pairwise gaps <= cd iff it is a contiguous run whose ends are within cd
    bars, last_end = [], -1
    for i in range(k):
        j = i
        while j + 1 < k and r[j + 1] - r[i] <= cd:
            j += 1
        if j > i and j > last_end:
            bars.append(names[i:j + 1])
            last_end = j
    groups, start = [], 0
    for i in range(1, k + 1):
        if i == k or r[i] - r[i - 1] > cd:
            groups.append(names[start:i])
            start = i
    return CDDiagram(names, [float(x) for x in r], cd, alpha, bars, groups)


def sign_test(a, b) -> tuple[int, int, float]:
    """One-sided exact sign test that ``a`` beats ``b`` on paired observations.

    Returns (wins, non-tied pairs, p-value); ties are dropped.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError("paired samples differ in length")
    wins = int(np.sum(a > b))
    n = int(np.sum(a != b))
    p = math.fsum(math.comb(n, i) for i in range(wins, n + 1)) / 2.0 ** n if n else 1.0
    return wins, n, p


@dataclass
class MethodResults:
    method: str
    accuracies: np.ndarray  # repeats x sessions

    @property
    def aa(self) -> np.ndarray:
        return self.accuracies.mean(axis=1)

    def to_records(self) -> list[dict]:
        return [{"method": self.method, "repeat": i, "accuracies": [float(x) for x in row],
                 "aa": average_accuracy(row)} for i, row in enumerate(self.accuracies)]

    @classmethod
    def from_records(cls, records) -> "MethodResults":
        records = sorted(records, key=lambda r: r["repeat"])
        names = {r["method"] for r in records}
        if len(names) != 1:
            raise InvalidInput(f"expected one method per results file, found {sorted(names)}")
        acc = np.asarray([r["accuracies"] for r in records], dtype=np.float64)
        if acc.ndim != 2 or np.any((acc < 0) | (acc > 1)):
            raise ShapeError("accuracies must form a repeats x sessions matrix in [0, 1]")
        return cls(names.pop(), acc)


def observation_matrix(results, per_session: bool = False) -> np.ndarray:
    """Stack methods column-wise: one observation per repeat (its AA), or per
    (repeat, session) when ``per_session``."""
    cols = [r.accuracies.reshape(-1) if per_session else r.aa for r in results]
    if len({c.shape for c in cols}) != 1:
        raise ShapeError("methods have different numbers of observations")
    return np.stack(cols, axis=1)
