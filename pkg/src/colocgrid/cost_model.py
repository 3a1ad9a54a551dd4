"""Wall-clock and resource-time model for chunked MapReduce image averaging.

Sizes are megabytes, speeds megabytes per second, times seconds. The job
count inside every formula is ``floor(img_count / eta)``; the task planner
uses the ceiling so the last partial chunk still gets a map task.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass

from .store import ValidationError


class InfeasibleBounds(ValidationError):
    def __init__(self, lower: float, upper: float):
        super().__init__(f"no feasible chunk size: lower bound {lower:.6g} > upper bound {upper:.6g}")
        self.lower = lower
        self.upper = upper


@dataclass(frozen=True)
class ClusterModelParams:
    img_count: int = 5153
    size_big_mb: float = 20.0
    size_small_mb: float = 6.0
    size_gen_mb: float = 21.0
    bandwidth_mb_s: float = 70.0
    vdisc_r_mb_s: float = 100.0
    vdisc_w_mb_s: float = 65.0
    mem_mb: float = 4096.0
    core_count: int = 224
    alpha: float = 0.5
    beta: float = 0.9
    region_count: int = 1
    wt_init_s: float = 0.0
    wt_end_s: float = 0.0

    def __post_init__(self):
        positive = ("img_count", "size_big_mb", "size_small_mb", "size_gen_mb", "bandwidth_mb_s",
                    "vdisc_r_mb_s", "vdisc_w_mb_s", "mem_mb", "core_count", "region_count")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.size_small_mb > self.size_big_mb:
            raise ValidationError("size_small_mb exceeds size_big_mb")
        for name in ("alpha", "beta"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        if self.wt_init_s < 0 or self.wt_end_s < 0:
            raise ValidationError("wt_init_s and wt_end_s must be >= 0")

    def replace(self, **kw) -> "ClusterModelParams":
        return dataclasses.replace(self, **kw)


REFERENCE_PARAMS = ClusterModelParams()

_INT_FIELDS = {"img_count", "core_count", "region_count"}


def read_params(path) -> ClusterModelParams:
    """``key=value`` lines named after the dataclass fields; ``#`` comments."""
    kw = {}
    names = {f.name for f in dataclasses.fields(ClusterModelParams)}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = (s.strip() for s in line.partition("="))
            if not sep or key not in names:
                raise ValidationError(f"{path}:{n}: unknown or malformed entry {line!r}")
            kw[key] = int(val) if key in _INT_FIELDS else float(val)
    return ClusterModelParams(**kw)


def write_params(path, params: ClusterModelParams):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in dataclasses.fields(params):
            fh.write(f"{f.name}={getattr(params, f.name)!r}\n")


@dataclass(frozen=True)
class TimeBreakdown:
    init_s: float
    map_s: float
    shuffle_s: float
    reduce_s: float
    end_s: float

    @property
    def total_s(self) -> float:
        return self.init_s + self.map_s + self.shuffle_s + self.reduce_s + self.end_s


def _nonneg(x: float) -> float:
    if x < 0:
        raise ValidationError(f"negative size {x}")
    return x


def disc_r(x_mb: float, params: ClusterModelParams) -> float:
    return _nonneg(x_mb) / params.vdisc_r_mb_s


def disc_w(x_mb: float, params: ClusterModelParams) -> float:
    return _nonneg(x_mb) / params.vdisc_w_mb_s


def bdw(x_mb: float, params: ClusterModelParams) -> float:
    return _nonneg(x_mb) / params.bandwidth_mb_s


def avg_ants(eta: float) -> float:
    """Worst-case time of averaging ``eta`` images on one core."""
    if eta < 0:
        raise ValidationError("image count must be >= 0")
    return 0.4 * eta + 5


def eta_bounds(params: ClusterModelParams) -> tuple[float, float]:
    p = params
    lower = max(p.img_count * p.size_small_mb / p.mem_mb, p.img_count / p.core_count)
    upper = p.mem_mb / p.size_big_mb
    if lower > upper:
        raise InfeasibleBounds(lower, upper)
    return lower, upper


def job_count(params: ClusterModelParams, eta: int) -> int:
    return params.img_count // eta


def _check_eta(params: ClusterModelParams, eta: int, force: bool):
    if eta < 1 or int(eta) != eta:
        raise ValidationError(f"chunk size must be a positive integer, got {eta}")
    if force:
        return
    lower, upper = eta_bounds(params)
    if not lower <= eta <= upper:
        raise ValidationError(f"chunk size {eta} outside valid range [{lower:.6g}, {upper:.6g}]")


def _reduce(params: ClusterModelParams, jobs: int) -> float:
    return avg_ants(jobs) + disc_r(params.size_gen_mb, params) + disc_w(params.size_gen_mb, params)


def wt_wall(params: ClusterModelParams, eta: int, force: bool = False) -> TimeBreakdown:
    _check_eta(params, eta, force)
    p = params
    jobs = job_count(p, eta)
    chunk = p.size_big_mb * eta
    map_s = disc_r(chunk, p) + bdw(chunk, p) + disc_w(chunk, p) + avg_ants(eta)
    shuffle_s = (disc_r(p.size_gen_mb, p) + bdw(p.alpha * jobs * p.size_gen_mb, p)
                 + disc_w(jobs * p.size_gen_mb, p))
    return TimeBreakdown(p.wt_init_s, map_s, shuffle_s, _reduce(p, jobs), p.wt_end_s)


def rt(params: ClusterModelParams, eta: int, force: bool = False) -> TimeBreakdown:
    """Resource time; init/end are zero since they are not node busy time."""
    _check_eta(params, eta, force)
    p = params
    jobs = job_count(p, eta)
    everything = p.img_count * p.size_big_mb
    map_s = (disc_r(everything, p) + disc_w(everything, p)
             + bdw(p.beta * jobs * eta * p.size_big_mb, p) + jobs * avg_ants(eta))
    shuffle_s = (p.alpha * jobs * (disc_w(p.size_gen_mb, p) + disc_r(p.size_gen_mb, p))
                 + bdw(jobs * p.size_gen_mb, p) + disc_w(jobs * p.size_gen_mb, p))
    return TimeBreakdown(0.0, map_s, shuffle_s, _reduce(p, jobs), 0.0)


@dataclass
class EtaSweep:
    eta_star: int
    etas: list[int]
    wall: list[TimeBreakdown]
    resource: list[TimeBreakdown]
    bounds: tuple[float, float] | None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta", "wt_total", "wt_map", "wt_shuffle", "wt_reduce",
                    "rt_total", "rt_map", "rt_shuffle", "rt_reduce"])
        for eta, a, b in zip(self.etas, self.wall, self.resource):
            w.writerow([eta] + [repr(v) for v in (a.total_s, a.map_s, a.shuffle_s, a.reduce_s,
                                                  b.total_s, b.map_s, b.shuffle_s, b.reduce_s)])
        return buf.getvalue()


def optimize_eta(params: ClusterModelParams, step: int = 5, eta_min: int | None = None,
                 eta_max: int | None = None) -> EtaSweep:
    """Grid-search the chunk size minimizing wall time.

    Explicit ``eta_min``/``eta_max`` replace the computed bounds (and skip
    the bound check on evaluation); otherwise the bounds are rounded inward.
    """
    if step < 1:
        raise ValidationError("step must be >= 1")
    bounds = None
    if eta_min is None or eta_max is None:
        bounds = eta_bounds(params)
    lo = eta_min if eta_min is not None else math.ceil(bounds[0])
    hi = eta_max if eta_max is not None else math.floor(bounds[1])
    if lo < 1 or lo > hi:
        raise InfeasibleBounds(lo, hi)
    etas = list(range(lo, hi + 1, step))
    wall = [wt_wall(params, e, force=True) for e in etas]
    res = [rt(params, e, force=True) for e in etas]
    best = min(range(len(etas)), key=lambda i: (wall[i].total_s, etas[i]))
    return EtaSweep(etas[best], etas, wall, res, bounds)
