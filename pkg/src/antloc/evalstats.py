"""Evaluation protocol: radial errors, MRE, SDR, rater variability, paired t-test, timing, tables."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .volume import Landmark

RADII_MM = (2.0, 4.0, 6.0)
FRACTIONS = (1.0, 0.5, 0.25)

# Clinical reference values (mm, %, seconds) kept for documentation only; they
# are not reproducible on phantoms.  Keys: (mre "mean±std" per fraction,
# SDR triples per fraction, seconds per ROI).
REFERENCE_TABLE = {
    "intra-rater": {"mre": {1.0: (2.04, 0.87)}, "sdr": {1.0: (58, 99, 100)}, "time": None},
    "inter-rater": {"mre": {1.0: (2.42, 1.17)}, "sdr": {1.0: (45, 93, 100)}, "time": None},
    "registration": {"mre": {1.0: (2.49, 1.09)}, "sdr": {1.0: (40, 91, 100)}, "time": 3.7},
    "hm": {"mre": {1.0: (2.34, 1.12), 0.5: (4.38, 3.56), 0.25: (7.13, 10.17)},
           "sdr": {1.0: (42, 92, 100), 0.5: (5, 53, 91), 0.25: (1, 43, 85)}, "time": 0.005},
    "dsnt": {"mre": {1.0: (2.45, 1.03), 0.5: (4.23, 1.98), 0.25: (4.17, 1.46)},
             "sdr": {1.0: (29, 95, 100), 0.5: (3, 50, 95), 0.25: (2, 47, 87)}, "time": 0.005},
}
INTRA_RATER_MM = REFERENCE_TABLE["intra-rater"]["mre"][1.0]
INTER_RATER_MM = REFERENCE_TABLE["inter-rater"]["mre"][1.0]
CHI3_MEAN = 2.0 * math.sqrt(2.0 / math.pi)  # E|N(0, I_3)| = 1.5958...


def _as_points(items) -> tuple[list | None, np.ndarray]:
    """Accept a dict key -> point/Landmark or a plain sequence; return (keys, (N, 3) array)."""
    if isinstance(items, dict):
        keys = list(items)
        pts = [items[k] for k in keys]
    else:
        keys, pts = None, list(items)
    arr = []
    for p in pts:
        if isinstance(p, Landmark):
            if p.frame != "world_mm":
                raise ValueError(f"landmark {p.id!r} is in frame {p.frame!r}, expected world_mm")
            p = p.coords
        arr.append(np.asarray(p, dtype=float).reshape(3))
    return keys, np.array(arr).reshape(-1, 3)


def radial_errors(preds, truths) -> np.ndarray:
    """Euclidean distances (mm) between matched predictions and truths.

    Dicts are matched by key (result ordered by the truth keys); sequences
    are matched by position.
    """
    kp, p = _as_points(preds)
    kt, t = _as_points(truths)
    if kp is not None or kt is not None:
        if kp is None or kt is None or set(kp) != set(kt):
            raise ValueError("predictions and truths are not matched case/side pairs")
        order = {k: i for i, k in enumerate(kp)}
        p = p[[order[k] for k in kt]]
    elif len(p) != len(t):
        raise ValueError(f"unmatched pairs: {len(p)} predictions vs {len(t)} truths")
    return np.linalg.norm(p - t, axis=1)


def sdr(errors, radii=RADII_MM) -> np.ndarray:
    """Percent of errors within each radius; ``e == r`` counts as a success."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("SDR of an empty error list is undefined")
    return np.array([100.0 * np.count_nonzero(e <= r) / e.size for r in radii])


def mre(errors) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single error."""
    e = np.asarray(errors, dtype=float).ravel()
    if e.size == 0:
        raise ValueError("MRE of an empty error list is undefined")
    std = float(np.std(e, ddof=1)) if e.size > 1 else 0.0
    return float(np.mean(e)), std


def rater_variability(annotations_a, annotations_b) -> tuple[float, float]:
    return mre(radial_errors(annotations_a, annotations_b))


def simulate_rater(truths: dict, sigma_mm: float, rng: np.random.Generator) -> dict:
    """A simulated annotator: truth plus isotropic N(0, sigma^2) per axis, in key order."""
    out = {}
    for k, v in truths.items():
        p = v.coords if isinstance(v, Landmark) else np.asarray(v, dtype=float)
        out[k] = Landmark(getattr(v, "id", "target"), "world_mm", p + rng.normal(0.0, sigma_mm, 3))
    return out


# ---- Student-t via the regularized incomplete beta function ----

def _betacf(a: float, b: float, x: float, max_iter: int = 300, eps: float = 1e-15) -> float:
    """Continued fraction for I_x(a, b), evaluated with the modified Lentz method."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    # the fraction converges fast for x < (a+1)/(a+b+2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float | None
    df: int
    p: float | None
    mean_difference: float
    degenerate: bool = False

    def significant(self, alpha: float = 0.05) -> bool:
        return (not self.degenerate) and self.p < alpha

    def decision(self, alpha: float = 0.05) -> str:
        if self.degenerate:
            return "degenerate"
        return "significant" if self.significant(alpha) else "not significant"

    def to_dict(self, alpha: float = 0.05) -> dict:
        d = asdict(self)
        d["decision"] = self.decision(alpha)
        d["alpha"] = alpha
        return d


def paired_ttest(errors_a, errors_b) -> TTestResult:
    """Two-sided paired t-test on a - b; zero-variance differences are reported as degenerate."""
    a = np.asarray(errors_a, dtype=float).ravel()
    b = np.asarray(errors_b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0 or not np.isfinite(sd):
        return TTestResult(None, n - 1, None, mean, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, student_t_two_sided_p(t, n - 1), mean)


# ---- timing ----

def timing_harness(methods: dict, rois, repeats: int = 5, warmup: int = 1) -> dict:
    """Median wall-clock seconds per ROI for each ``name -> fn(roi)`` closure.

    Methods run one after another on the calling thread; inputs should be
    preloaded so no file I/O is timed.
    """
    if repeats < 5:
        raise ValueError("use at least 5 repeats")
    rois = list(rois)
    if not rois:
        raise ValueError("no ROIs to time")
    out = {}
    for name, fn in methods.items():
        for _ in range(warmup):
            fn(rois[0])
        runs = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            for r in rois:
                fn(r)
            runs.append((time.perf_counter() - t0) / len(rois))
        out[name] = {"median_seconds": statistics.median(runs), "repeats": runs}
    return out


# ---- reports ----

@dataclass
class EvalReport:
    method: str
    fraction: float
    errors_mm: dict  # "case:side" -> radial error
    seconds_per_roi: float | None = None
    radii_mm: tuple = RADII_MM
    extra: dict = field(default_factory=dict)

    def error_array(self) -> np.ndarray:
        return np.array([self.errors_mm[k] for k in sorted(self.errors_mm)], dtype=float)

    @property
    def mre(self) -> tuple[float, float]:
        return mre(self.error_array())

    @property
    def sdr(self) -> np.ndarray:
        return sdr(self.error_array(), self.radii_mm)

    def to_dict(self) -> dict:
        m, s = self.mre
        return {"method": self.method, "fraction": self.fraction, "n": len(self.errors_mm),
                "mre_mm": m, "mre_std_mm": s, "sdr_percent": self.sdr.tolist(),
                "radii_mm": list(self.radii_mm),
                "errors_mm": {k: float(self.errors_mm[k]) for k in sorted(self.errors_mm)},
                "seconds_per_roi": self.seconds_per_roi, **self.extra}


def format_mre(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def format_sdr(percentages) -> str:
    return ", ".join(f"{round(float(p)):d}" for p in percentages)


def format_row(mre_cells: dict, sdr_cells: dict, fraction: float = 1.0) -> str:
    """``"2.34±1.12 | 42, 92, 100"`` for one fraction."""
    return f"{format_mre(*mre_cells[fraction])} | {format_sdr(sdr_cells[fraction])}"


def render_table(rows: list[tuple[str, dict, dict, float | None]], fractions=FRACTIONS) -> str:
    """Fixed-width table: method, MRE (mm) per fraction, SDR (%) per fraction, time (s).

    Each row is ``(name, {fraction: (mean, std)}, {fraction: sdr triple}, seconds)``;
    missing cells print as ``-``.
    """
    header = (["Method"] + [f"MRE {round(f * 100)}%" for f in fractions]
              + [f"SDR {round(f * 100)}%" for f in fractions] + ["Time (s)"])
    body = []
    for name, mres, sdrs, seconds in rows:
        cells = [name]
        cells += [format_mre(*mres[f]) if f in mres else "-" for f in fractions]
        cells += [format_sdr(sdrs[f]) if f in sdrs else "-" for f in fractions]
        cells.append("-" if seconds is None else f"{seconds:.3g}")
        body.append(cells)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]

    def line(cells):
        return " | ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"


def reference_table() -> str:
    rows = []
    for name, ref in REFERENCE_TABLE.items():
        rows.append((name, ref["mre"], ref["sdr"], ref["time"]))
    return render_table(rows)
