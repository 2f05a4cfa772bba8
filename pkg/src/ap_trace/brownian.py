"""Brownian paths, ball hitting with bridge refinement, and excursion counts.

Refinement model
----------------
A path is stored at base times ``0, dt_base, 2 dt_base, ..., T`` (the last
step may be shorter).  Any step can be halved: the midpoint is drawn from the
exact Brownian-bridge law ``(a + b)/2 + sqrt(dt)/2 * Z`` where ``Z`` comes from
:func:`ap_trace.rng.hashed_normal` keyed by the dyadic address of the midpoint
(base step, level, odd numerator).  Midpoints are therefore a property of the
path rather than of the query: refining for a ball of radius 0.25 or for the
whole set of eps-cells touches the same values.  Two consequences used
downstream:

* the points sampled by an adaptive refinement are a subset of the points of
  the uniform refinement at the same depth;
* a fine grid (``lam * eps``) and a coarse grid (``eps``) can be read off one
  common refined point set, which is what makes nesting deterministic.

A step at level ``l`` has nominal length ``dt_base / 2**l``; refinement stops
once its square root is below the threshold.  The nominal length is used for
stopping so that adaptive and uniform refinements end at the same depth; the
true length (shorter for the final step) is used for the bridge variance and
the proximity margin.

Hits are decided on sampled points only: a ball is hit iff some refined point
lies in the closed ball.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numba as nb
import numpy as np

from ap_trace.geometry import REL_TOL, as_points
from ap_trace.lattice import CellSet
from ap_trace.rng import hashed_normal, hashed_normals, hashed_uniform, stream, stream_key

MAX_LEVEL = 40


@dataclass
class PathSample:
    times: np.ndarray
    points: np.ndarray
    dt_base: float
    seed: int
    index: int = 0
    level: int = 0
    key: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.points = np.asarray(self.points, dtype=float)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        if len(self.times) != len(self.points):
            raise ValueError("times and points differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("times must be strictly increasing")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True)
class BallSpec:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))

    @property
    def dim(self) -> int:
        return len(self.center)


@dataclass(frozen=True)
class RefinePolicy:
    """When to stop halving a step.

    ``rel`` sets the threshold as a fraction of the ball radius; ``abs``
    overrides it with a fixed value (radius-independent, which makes
    :func:`hits_ball` monotone in the radius).  Steps whose chord stays
    farther than ``radius + margin * sqrt(dt)`` from the centre are not
    refined; ``margin=inf`` refines everything.  With ``bridge`` set, each
    finest-level step between two outside points also counts as a hit with
    the Brownian-bridge entry probability, which removes most of the
    discrete-monitoring bias (about 0.58 sqrt(dt) / radius, relative).
    hit_cells ignores ``bridge``: its cells are decided by sampled points.
    """

    rel: float = 1.0 / 8.0
    abs: float | None = None
    margin: float = 4.0
    max_level: int = MAX_LEVEL
    bridge: bool = False

    def threshold(self, radius: float) -> float:
        return self.abs if self.abs is not None else self.rel * radius


def _n_steps(horizon: float, dt_base: float) -> int:
    return max(1, math.ceil(horizon / dt_base * (1.0 - 1e-12)))


def sample_path(dim: int, horizon: float, dt_base: float, seed: int, index: int = 0) -> PathSample:
    """Brownian path from the origin on ``[0, horizon]``."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if not dt_base > 0:
        raise ValueError("dt_base must be positive")
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError("dim must be a positive integer")
    n = _n_steps(horizon, dt_base)
    times = np.minimum(np.arange(n + 1) * dt_base, horizon)
    times[-1] = horizon
    dt = np.diff(times)
    inc = stream(seed, "path", index).standard_normal((n, dim)) * np.sqrt(dt)[:, None]
    points = np.vstack([np.zeros((1, dim)), np.cumsum(inc, axis=0)])
    return PathSample(times, points, dt_base, seed, index, 0, int(stream_key(seed, "bridge", index)))


def required_level(path: PathSample, threshold: float, max_level: int = MAX_LEVEL) -> int:
    """Smallest level whose nominal step satisfies sqrt(dt) <= threshold."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    ratio = path.dt_base / threshold**2
    if ratio <= 1.0:
        return 0
    return min(max_level, math.ceil(math.log2(ratio) - 1e-12))


def refine_uniform(path: PathSample, level: int) -> PathSample:
    """Halve every step until the path sits at ``level`` (no-op if already finer)."""
    pts, times, cur = path.points, path.times, path.level
    d = path.dim
    coord = np.arange(d, dtype=np.uint64)
    while cur < level and len(times) > 1:
        n = len(times) - 1
        j = np.arange(n, dtype=np.uint64)
        seg = j >> np.uint64(cur)
        num = (j & np.uint64((1 << cur) - 1)) * np.uint64(2) + np.uint64(1)
        z = hashed_normals(path.key, seg[:, None], np.uint64(cur + 1), num[:, None] * np.uint64(8) + coord)
        dt = np.diff(times)
        mid = 0.5 * (pts[:-1] + pts[1:]) + 0.5 * np.sqrt(dt)[:, None] * z
        new_pts = np.empty((2 * n + 1, d))
        new_pts[0::2] = pts
        new_pts[1::2] = mid
        new_t = np.empty(2 * n + 1)
        new_t[0::2] = times
        new_t[1::2] = 0.5 * (times[:-1] + times[1:])
        pts, times, cur = new_pts, new_t, cur + 1
    return replace(path, times=times, points=pts, level=max(cur, path.level))


def refine_to(path: PathSample, threshold: float) -> PathSample:
    return refine_uniform(path, required_level(path, threshold))


@nb.njit(cache=True)
def _seg_dist2(a, b, c):
    d = a.shape[0]
    ab2 = 0.0
    t = 0.0
    for i in range(d):
        u = b[i] - a[i]
        ab2 += u * u
        t += (c[i] - a[i]) * u
    if ab2 > 0.0:
        t = min(1.0, max(0.0, t / ab2))
    else:
        t = 0.0
    out = 0.0
    for i in range(d):
        w = a[i] + t * (b[i] - a[i]) - c[i]
        out += w * w
    return out


_BRIDGE_SALT = np.uint64(0x5BD1E9955BD1E995)


@nb.njit(cache=True)
def _bridge_hit(a, b, dt, center, radius, key, seg, lev, q):
    """Bernoulli draw of a bridge entering the ball between two outside points.

    Uses the flat-boundary probability exp(-2 g_a g_b / dt), g being the
    distance to the sphere; the draw is keyed by the segment's identity.
    """
    ga = 0.0
    gb = 0.0
    for i in range(a.shape[0]):
        ga += (a[i] - center[i]) ** 2
        gb += (b[i] - center[i]) ** 2
    ga = np.sqrt(ga) - radius
    gb = np.sqrt(gb) - radius
    p = np.exp(-2.0 * ga * gb / dt)
    if p < 1e-12:
        return False
    return hashed_uniform(key ^ _BRIDGE_SALT, seg, lev, q) < p


@nb.njit(cache=True)
def _hits_ball_kernel(points, times, key, level0, target_level, center, radius, margin, bridge):
    n = points.shape[0]
    d = points.shape[1]
    r2 = radius * radius
    for j in range(n):
        s = 0.0
        for i in range(d):
            w = points[j, i] - center[i]
            s += w * w
        if s <= r2:
            return True
    mask = (np.uint64(1) << np.uint64(level0)) - np.uint64(1)
    if level0 >= target_level:
        if bridge:
            for j in range(n - 1):
                if _bridge_hit(points[j], points[j + 1], times[j + 1] - times[j], center, radius, key,
                               np.uint64(j) >> np.uint64(level0), np.uint64(level0), np.uint64(j) & mask):
                    return True
        return False
    depth = target_level - level0 + 2
    sa = np.empty((depth, d))
    sb = np.empty((depth, d))
    st = np.empty(depth)
    slev = np.empty(depth, np.int64)
    snum = np.empty(depth, np.uint64)
    mid = np.empty(d)
    for j in range(n - 1):
        dt = times[j + 1] - times[j]
        reach = radius + margin * np.sqrt(dt)
        if _seg_dist2(points[j], points[j + 1], center) > reach * reach:
            continue
        seg = np.uint64(j) >> np.uint64(level0)
        top = 0
        sa[0] = points[j]
        sb[0] = points[j + 1]
        st[0] = dt
        slev[0] = level0
        snum[0] = np.uint64(j) & mask
        top = 1
        while top > 0:
            top -= 1
            a = sa[top].copy()
            b = sb[top].copy()
            dtt = st[top]
            lev = slev[top]
            q = snum[top]
            num = q * np.uint64(2) + np.uint64(1)
            sd = 0.5 * np.sqrt(dtt)
            s = 0.0
            for i in range(d):
                z = hashed_normal(key, seg, np.uint64(lev + 1), num * np.uint64(8) + np.uint64(i))
                mid[i] = 0.5 * (a[i] + b[i]) + sd * z
                w = mid[i] - center[i]
                s += w * w
            if s <= r2:
                return True
            half = 0.5 * dtt
            if lev + 1 >= target_level:
                if bridge:
                    nl = np.uint64(lev + 1)
                    if _bridge_hit(a, mid, half, center, radius, key, seg, nl, q * np.uint64(2)):
                        return True
                    if _bridge_hit(mid, b, half, center, radius, key, seg, nl, q * np.uint64(2) + np.uint64(1)):
                        return True
                continue
            reach = radius + margin * np.sqrt(half)
            reach2 = reach * reach
            if _seg_dist2(mid, b, center) <= reach2:
                sa[top] = mid
                sb[top] = b
                st[top] = half
                slev[top] = lev + 1
                snum[top] = q * np.uint64(2) + np.uint64(1)
                top += 1
            if _seg_dist2(a, mid, center) <= reach2:
                sa[top] = a
                sb[top] = mid
                st[top] = half
                slev[top] = lev + 1
                snum[top] = q * np.uint64(2)
                top += 1
    return False


def hits_ball(path: PathSample, ball: BallSpec, refine: RefinePolicy | None = RefinePolicy()) -> bool:
    """Does the (refined) path enter the closed ball?

    With ``refine=None`` only the stored points are tested.
    """
    if ball.dim != path.dim:
        raise ValueError(f"dimension mismatch: path {path.dim}, ball {ball.dim}")
    center = np.asarray(ball.center, dtype=float)
    if refine is None:
        target = path.level
        margin = 0.0
    else:
        target = max(path.level, required_level(path, refine.threshold(ball.radius), refine.max_level))
        margin = refine.margin if math.isfinite(refine.margin) else 1e300
    return bool(
        _hits_ball_kernel(
            path.points, path.times, np.uint64(path.key), path.level, target, center, float(ball.radius), margin,
            refine is not None and refine.bridge,
        )
    )


# ---------------------------------------------------------------------------
# hit cells


def _offsets(dim: int, reach: int) -> np.ndarray:
    """Integer offsets o from floor(p/h) that can be within ``reach`` cells of p."""
    rng = np.arange(-reach, reach + 2)
    grid = np.stack(np.meshgrid(*([rng] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    gap = np.maximum(np.maximum(-grid, grid - 1), 0)
    return grid[(gap**2).sum(axis=1) <= reach * reach].astype(np.int64)


@nb.njit(cache=True)
def _table_insert(table, key):
    cap = table.shape[0]
    h = (np.uint64(key) * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(20)
    i = np.int64(h & np.uint64(cap - 1))
    while True:
        v = table[i]
        if v == key:
            return False
        if v == -1:
            table[i] = key
            return True
        i = (i + 1) & (cap - 1)


@nb.njit(cache=True)
def _cells_near(points, h, radius, domain_radius, offsets, lo, radix, cap):
    n = points.shape[0]
    d = points.shape[1]
    r2 = radius * radius
    dom = domain_radius * (1.0 + 1e-9)
    dom2 = dom * dom
    table = np.full(cap, -1, np.int64)
    count = 0
    base = np.empty(d, np.int64)
    for j in range(n):
        for i in range(d):
            base[i] = np.int64(np.floor(points[j, i] / h))
        for o in range(offsets.shape[0]):
            dist = 0.0
            nrm = 0.0
            key = 0
            for i in range(d):
                c = base[i] + offsets[o, i]
                x = c * h
                w = x - points[j, i]
                dist += w * w
                nrm += x * x
                key += (c - lo[i]) * radix[i]
            if dist <= r2 and nrm <= dom2:
                if _table_insert(table, key):
                    count += 1
                    if 2 * count > cap:
                        # grow and rehash
                        new = np.full(2 * cap, -1, np.int64)
                        for t in range(cap):
                            if table[t] != -1:
                                _table_insert(new, table[t])
                        table = new
                        cap = 2 * cap
    out = np.empty(count, np.int64)
    m = 0
    for t in range(cap):
        if table[t] != -1:
            out[m] = table[t]
            m += 1
    return out


def cells_near_points(points: np.ndarray, eps: float, domain_radius: float) -> CellSet:
    """Cells of the eps/3 lattice whose centre is within eps of some point.

    Only centres inside the closed domain ball are kept.
    """
    pts = as_points(points) if len(points) else np.zeros((0, np.shape(points)[-1]))
    h = eps / 3.0
    d = pts.shape[1]
    if len(pts):
        nrm = np.sqrt((pts**2).sum(axis=1))
        pts = pts[nrm <= domain_radius + eps * (1 + 1e-9)]
    if len(pts) == 0:
        return CellSet.empty(d, h)
    lo = np.floor(pts.min(axis=0) / h).astype(np.int64) - 4
    hi = np.floor(pts.max(axis=0) / h).astype(np.int64) + 5
    extent = hi - lo + 1
    radix = np.ones(d, dtype=np.int64)
    for i in range(d - 2, -1, -1):
        radix[i] = radix[i + 1] * extent[i + 1]
    keys = _cells_near(
        np.ascontiguousarray(pts), h, eps, domain_radius, _offsets(d, 3), lo, radix, 1 << 12
    )
    keys.sort()
    cells = np.empty((len(keys), d), dtype=np.int64)
    rem = keys.copy()
    for i in range(d):
        cells[:, i] = rem // radix[i]
        rem -= cells[:, i] * radix[i]
    return CellSet(cells + lo, h)


def hit_cells(
    path: PathSample, eps: float, domain_radius: float, refine: RefinePolicy | None = RefinePolicy()
) -> CellSet:
    """Cells of the eps/3 lattice whose eps-ball the path hits.

    The path is refined uniformly to the depth :func:`hits_ball` would use for
    a ball of radius eps, so a cell is reported iff ``hits_ball`` with an
    unlimited margin reports its ball.  A path that is already finer is used
    as is; extra points only add hits.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if refine is not None:
        path = refine_uniform(path, required_level(path, refine.threshold(eps), refine.max_level))
    return cells_near_points(path.points, eps, domain_radius)


# ---------------------------------------------------------------------------
# excursions


def check_excursion_layout(centers: np.ndarray, r: float, s: float) -> None:
    if not (r > 0 and s > 0):
        raise ValueError("radii must be positive")
    if not r < s:
        raise ValueError("need r < s")
    c = np.asarray(centers, dtype=float)
    if len(c) > 1:
        diff = c[:, None, :] - c[None, :, :]
        dist = np.sqrt((diff**2).sum(axis=-1))
        iu = np.triu_indices(len(c), 1)
        if np.any(dist[iu] <= 2 * s * (1 + REL_TOL)):
            raise ValueError("s-balls overlap")


def excursion_count(path: PathSample, balls: list[BallSpec], r: float, s: float) -> int:
    """Completed r-entries separated by s-exits along the stored points.

    An entry is a sample inside some closed r-ball; after an entry the next
    one only counts once the path has been outside every closed s-ball.
    """
    centers = np.array([b.center for b in balls], dtype=float)
    check_excursion_layout(centers, r, s)
    if len(centers) == 0:
        return 0
    if centers.shape[1] != path.dim:
        raise ValueError("dimension mismatch")
    dist = np.sqrt(((path.points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)).min(axis=1)
    entries = np.flatnonzero(dist <= r)
    exits = np.flatnonzero(dist > s)
    m, pos = 0, 0
    while True:
        i = np.searchsorted(entries, pos)
        if i == len(entries):
            return m
        m += 1
        e = entries[i]
        k = np.searchsorted(exits, e, side="right")
        if k == len(exits):
            return m
        pos = exits[k]


@dataclass(frozen=True)
class AdaptiveStepper:
    """Distance-adaptive exact-increment stepping for sphere events.

    Each step has ``dt = clip((eta * g)**2, dt_min, dt_max)`` where ``g`` is
    the distance to the nearest r- or s-sphere.  Increments are exact
    Gaussians, so the sampled values are exact Brownian values at
    state-dependent times.  With ``bridge`` set, a step whose end points lie
    on the same side of the sphere being watched still registers a crossing
    with the Brownian-bridge probability exp(-2 g0 g1 / dt) for a flat
    boundary at distances g0, g1; the flat approximation is only used for
    steps with sqrt(dt) at most a tenth of that sphere's radius.  A path stops after leaving the ``escape``
    ball around every centre (the surrogate for an infinite horizon), at
    ``horizon`` or after ``max_steps``.
    """

    eta: float = 0.25
    dt_min: float = 1e-8
    dt_max: float = math.inf
    escape: float = 100.0
    horizon: float = math.inf
    max_steps: int = 5_000_000
    bridge: bool = True


@nb.njit(cache=True)
def _adaptive_run(key, trial, start, centers, r, s, eta, dt_min, dt_max, escape, horizon, max_steps, bridge,
                  record):
    d = start.shape[0]
    nb_ = centers.shape[0]
    x = start.copy()
    g_old = np.empty(nb_)
    t = 0.0
    m = 0
    seeking_entry = True
    cap = 1024 if record else 1
    pts = np.empty((cap, d))
    ts = np.empty(cap)
    n_rec = 0
    step = 0
    dt = 0.0
    g_old_near = 0.0
    while True:
        dmin = 1e300
        gap = 1e300
        near = 0
        cross = 0.0  # probability of a missed crossing during the last step
        for b in range(nb_):
            q = 0.0
            for i in range(d):
                w = x[i] - centers[b, i]
                q += w * w
            q = np.sqrt(q)
            if q < dmin:
                dmin = q
                near = b
            gap = min(gap, abs(q - r), abs(q - s))
            if bridge and step > 0:
                if seeking_entry and q > r and g_old[b] > r and dt <= 0.01 * r * r:
                    p = np.exp(-2.0 * (g_old[b] - r) * (q - r) / dt)
                    cross = 1.0 - (1.0 - cross) * (1.0 - p)
            g_old[b] = q
        if bridge and step > 0 and not seeking_entry and dmin <= s:
            # inside one s-ball (they are disjoint): did the step leave it?
            q0 = g_old_near
            if q0 <= s and dt <= 0.01 * s * s:
                cross = np.exp(-2.0 * (s - q0) * (s - dmin) / dt)
        if record:
            if n_rec == cap:
                new_p = np.empty((2 * cap, d))
                new_t = np.empty(2 * cap)
                new_p[:cap] = pts
                new_t[:cap] = ts
                pts = new_p
                ts = new_t
                cap *= 2
            pts[n_rec] = x
            ts[n_rec] = t
            n_rec += 1
        hit = cross > 0.0 and hashed_uniform(key, np.uint64(trial), np.uint64(step), np.uint64(d)) < cross
        if seeking_entry:
            if dmin <= r or hit:
                m += 1
                seeking_entry = False
        elif dmin > s or hit:
            seeking_entry = True
        g_old_near = dmin
        if dmin > escape or t >= horizon or step >= max_steps:
            break
        dt = min(max((eta * gap) ** 2, dt_min), dt_max)
        if t + dt > horizon:
            dt = horizon - t
        sd = np.sqrt(dt)
        for i in range(d):
            x[i] += sd * hashed_normal(key, np.uint64(trial), np.uint64(step), np.uint64(i))
        t += dt
        step += 1
    return m, step, pts[:n_rec], ts[:n_rec]


@nb.njit(cache=True)
def _adaptive_batch(key, first, count, start, centers, r, s, eta, dt_min, dt_max, escape, horizon, max_steps,
                    bridge):
    out = np.empty(count, np.int64)
    steps = np.empty(count, np.int64)
    for j in range(count):
        m, st, _, _ = _adaptive_run(
            key, first + j, start, centers, r, s, eta, dt_min, dt_max, escape, horizon, max_steps, bridge, False
        )
        out[j] = m
        steps[j] = st
    return out, steps


def excursion_batch(
    seed: int,
    first: int,
    count: int,
    start,
    balls: list[BallSpec],
    r: float,
    s: float,
    stepper: AdaptiveStepper = AdaptiveStepper(),
) -> tuple[np.ndarray, np.ndarray]:
    """Excursion counts M for trials ``first .. first+count-1``.

    Returns ``(M, steps)``; trial ``i`` depends only on ``(seed, i)``.
    """
    centers = np.array([b.center for b in balls], dtype=float)
    check_excursion_layout(centers, r, s)
    key = np.uint64(stream_key(seed, "excursion"))
    return _adaptive_batch(
        key, first, count, np.asarray(start, dtype=float), centers, r, s,
        stepper.eta, stepper.dt_min, stepper.dt_max, stepper.escape, stepper.horizon, stepper.max_steps,
        stepper.bridge,
    )


def adaptive_path(
    seed: int, trial: int, start, balls: list[BallSpec], r: float, s: float,
    stepper: AdaptiveStepper = AdaptiveStepper(),
) -> PathSample:
    """The path behind one :func:`excursion_batch` trial, as a PathSample.

    The path starts at ``start`` rather than the origin.  It is generated
    without bridge corrections (they are not visible in sampled points), so
    excursion_count on it reproduces the batch M only for steppers with
    ``bridge=False``.
    """
    centers = np.array([b.center for b in balls], dtype=float)
    key = np.uint64(stream_key(seed, "excursion"))
    _, _, pts, ts = _adaptive_run(
        key, trial, np.asarray(start, dtype=float), centers, r, s,
        stepper.eta, stepper.dt_min, stepper.dt_max, stepper.escape, stepper.horizon, stepper.max_steps, False,
        True,
    )
    dt = float(np.diff(ts).max()) if len(ts) > 1 else stepper.dt_min
    return PathSample(ts, pts, dt, seed, trial, 0, int(key))
