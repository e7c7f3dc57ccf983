"""
Numerical checks of the Dini CBF condition and closed-loop safety runs.

The supremum over inputs is approximated by the input-set vertices plus a
quasi-random interior sample, which can only under-approximate it: a
reported failure may be spurious, a pass is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import NoSafeInput, OutOfDomain, PreconditionError
from .grids import ValueGrid, interpolate
from .systems import Trajectory, rollout


@dataclass
class AlphaFunction:
    """Linear extended class-K function ``alpha(s) = k s``."""

    k: float = 1.0

    def __post_init__(self):
        if self.k < 0:
            raise ValueError("alpha gain must be non-negative")

    def __call__(self, s):
        return self.k * np.asarray(s, float)


@dataclass
class CBFCandidate:
    """Candidate barrier function with an optional domain predicate.

    ``cell`` is the smallest grid spacing for grid-backed candidates and
    sets the default finite-difference steps.
    """

    evaluator: Callable
    domain: Optional[Callable] = None
    cell: Optional[float] = None
    grid: Optional[ValueGrid] = None
    name: str = "candidate"

    @classmethod
    def from_grid(cls, grid, name=None):
        spacing = [a.spacing for a in grid.spec.axes if a.count > 1]
        cell = float(min(spacing)) if spacing else None
        lo = np.array([a.lo for a in grid.spec.axes])
        hi = np.array([a.hi for a in grid.spec.axes])
        periodic = np.array([a.periodic for a in grid.spec.axes])

        def domain(x):
            x = np.asarray(x, float)
            inside = (x >= lo - 1e-12) & (x <= hi + 1e-12)
            return np.all(inside | periodic, axis=-1)

        return cls(lambda x: interpolate(grid, x), domain, cell, grid, name or "grid")

    def __call__(self, x):
        return self.evaluator(np.asarray(x, float))

    def default_steps(self):
        if self.cell is not None:
            return self.cell * np.array([0.5, 0.25, 0.1])
        return np.array([1e-4, 1e-5, 1e-6])

    def inside(self, x):
        if self.domain is None:
            return np.ones(np.shape(x)[:-1], bool)
        return np.asarray(self.domain(x), bool)


def dini_directional(candidate, x, v, steps=None):
    """Smallest forward difference quotient ``(b(x + s v) - b(x)) / s`` over
    the step list (a surrogate for the lower Dini derivative).

    Works on batches: ``x`` and ``v`` broadcast over leading axes.
    """
    steps = candidate.default_steps() if steps is None else np.asarray(steps, float)
    if np.any(steps <= 0) or np.any(np.diff(steps) >= 0):
        raise ValueError("steps must be positive and strictly decreasing")
    x = np.asarray(x, float)
    v = np.asarray(v, float)
    x, v = np.broadcast_arrays(x, v)
    if not np.all(candidate.inside(x)):
        raise OutOfDomain("state outside the candidate's domain")
    b0 = candidate(x)
    out = np.full(b0.shape, np.inf)
    for s in steps:
        xs = x + s * v
        if not np.all(candidate.inside(xs)):
            raise OutOfDomain("difference step leaves the candidate's domain")
        out = np.minimum(out, (candidate(xs) - b0) / s)
    return out


def input_samples(input_set, n=64, seed=0):
    """Vertices of ``U`` plus ``n`` scrambled-Sobol points inside it."""
    m = input_set.dim
    pts = qmc.Sobol(m, scramble=True, seed=seed).random(n)
    if input_set.kind == "ball":
        # radial squeeze of the cube [-1, 1]^m onto the ball
        v = 2 * pts - 1
        scale = np.max(np.abs(v), axis=1, keepdims=True) / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        inner = input_set.center + input_set.radius * v * scale
    else:
        lo, hi = input_set.bounding_box
        inner = lo + pts * (hi - lo)
    return np.concatenate([input_set.vertices(), input_set.project(inner)])


def _disturbances(system):
    if system.disturbance is None:
        return [None]
    return list(system.disturbance.vertices())


def _dini_all(candidate, system, x, U, steps):
    """``min_d db(x; f(x, u, d))`` for every state and input, shape ``(B, K)``."""
    B, K = len(x), len(U)
    X = np.repeat(x[:, None, :], K, axis=1)
    UU = np.broadcast_to(U, (B,) + U.shape)
    worst = np.full((B, K), np.inf)
    for d in _disturbances(system):
        dd = None if d is None else np.broadcast_to(d, (B, K, len(d)))
        f = system(X, UU, dd)
        worst = np.minimum(worst, dini_directional(candidate, X, f, steps))
    return worst


def _sup_dini(candidate, system, x, U, steps):
    """``max_u min_d db(x; f(x, u, d))`` and the maximizing input index."""
    worst = _dini_all(candidate, system, x, U, steps)
    arg = np.argmax(worst, axis=1)
    return worst[np.arange(len(x)), arg], arg


def nominal_toward(system, target=(0.0, 0.0), gain=2.0):
    """Nominal controller driving the position toward ``target`` (used to
    exercise the safety filter: it aims straight at obstacles)."""
    target = np.asarray(target, float)
    lo, hi = system.input_set.bounding_box

    def u_nom(x):
        d = target - x[:2]
        if system.name in ("bicycle", "unicycle"):
            err = np.arctan2(d[1], d[0]) - x[2]
            err = np.mod(err + np.pi, 2 * np.pi) - np.pi
            return np.clip(np.array([hi[0], gain * err]), lo, hi)
        if system.name == "single_integrator":
            return system.input_set.project(gain * d)
        if system.name == "double_integrator":
            return system.input_set.project(gain * d - 2.0 * x[2:4])
        raise ValueError(f"no nominal controller for '{system.name}'")

    return u_nom


def _slack(candidate, x, base_slack):
    """``base_slack + cell * |grad b|`` with a one-cell gradient estimate."""
    if candidate.cell is None:
        return np.full(len(x), base_slack)
    h = candidate.cell
    b0 = candidate(x)
    g2 = np.zeros(len(x))
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        xp = x + e
        ok = candidate.inside(xp)
        xp = np.where(ok[:, None], xp, x - e)
        g2 += ((candidate(xp) - b0) / h) ** 2
    return base_slack + h * np.sqrt(g2)


@dataclass
class CBFCheckReport:
    pass_fraction: float
    n_states: int
    worst_margin: float
    worst_state: Optional[list]
    threshold: float
    passed: bool
    max_f_norm: float
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(pass_fraction=self.pass_fraction, n_states=self.n_states,
                    worst_margin=self.worst_margin, worst_state=self.worst_state,
                    threshold=self.threshold, passed=self.passed, max_f_norm=self.max_f_norm,
                    verdict="pass" if self.passed else "fail", **self.details)


def band_states(candidate, lo, hi, band, n_states, rng, max_draws=200_000, periodic=None):
    """Uniform states in the box with ``|b| <= band``."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    out = []
    drawn = 0
    batch = max(4 * n_states, 1000)
    while sum(len(o) for o in out) < n_states and drawn < max_draws:
        x = rng.uniform(lo, hi, size=(batch, len(lo)))
        drawn += batch
        b = candidate(x)
        keep = np.isfinite(b) & (np.abs(b) <= band)
        out.append(x[keep])
    pts = np.concatenate(out) if out else np.empty((0, len(lo)))
    return pts[:n_states]


def check_cbf_condition(candidate, system, alpha, band=0.5, n_states=1000, n_inputs=64,
                        domain=None, slack=1e-3, threshold=0.99, steps=None, seed=0, states=None):
    """Sampled check of ``sup_u db(x; f(x, u)) >= -alpha(b(x))`` in a band.

    ``domain = (lo, hi)`` is the sampling box (defaults to the grid box);
    states whose difference steps leave the domain are dropped. The slack is
    ``slack + cell * |grad b|`` for grid-backed candidates.
    """
    if band <= 0:
        raise ValueError("band width must be positive")
    rng = np.random.default_rng(seed)
    if states is None:
        if domain is None:
            if candidate.grid is None:
                raise ValueError("a sampling domain is required for closed-form candidates")
            domain = ([a.lo for a in candidate.grid.spec.axes], [a.hi for a in candidate.grid.spec.axes])
        lo, hi = (np.asarray(d, float) for d in domain)
        # keep the difference steps inside the box
        if candidate.cell is not None and candidate.grid is not None:
            reach = candidate.cell * 2
            per = np.array([a.periodic for a in candidate.grid.spec.axes])
            lo = np.where(per, lo, lo + reach)
            hi = np.where(per, hi, hi - reach)
        states = band_states(candidate, lo, hi, band, n_states, rng)
    states = np.atleast_2d(np.asarray(states, float))
    if len(states) == 0:
        return CBFCheckReport(1.0, 0, np.inf, None, threshold, True, 0.0, dict(note="no states in band"))
    U = input_samples(system.input_set, n_inputs, seed)
    ok_rows = np.ones(len(states), bool)
    sup = np.full(len(states), np.nan)
    try:
        sup, _ = _sup_dini(candidate, system, states, U, steps)
    except OutOfDomain:
        # fall back to per-state evaluation, dropping states that step outside
        for i, x in enumerate(states):
            try:
                sup[i] = _sup_dini(candidate, system, x[None], U, steps)[0][0]
            except OutOfDomain:
                ok_rows[i] = False
    states_ok = states[ok_rows]
    sup = sup[ok_rows]
    b = candidate(states_ok)
    margin = sup + alpha(b) + _slack(candidate, states_ok, slack)
    passed_mask = margin >= 0
    frac = float(np.mean(passed_mask)) if len(margin) else 1.0
    k = int(np.argmin(margin)) if len(margin) else 0
    fnorm = max(float(np.max(np.linalg.norm(system(states_ok, np.broadcast_to(u, (len(states_ok), len(u)))), axis=1)))
                for u in U) if len(states_ok) else 0.0
    return CBFCheckReport(frac, int(len(margin)), float(margin[k]) if len(margin) else np.inf,
                          states_ok[k].tolist() if len(margin) else None, threshold, frac >= threshold,
                          fnorm, dict(n_dropped=int(np.count_nonzero(~ok_rows)), n_inputs=len(U)))


@dataclass
class SafetyReport:
    min_h: float
    min_candidate: float
    candidate_start: float
    n_steps: int
    n_fallbacks: int
    monotone_ok: bool

    def to_dict(self):
        return dict(min_h=self.min_h, min_candidate=self.min_candidate,
                    candidate_start=self.candidate_start, n_steps=self.n_steps,
                    n_fallbacks=self.n_fallbacks, monotone_ok=self.monotone_ok)


def simulate_safe(candidate, system, alpha, x0, duration=10.0, dt=0.05, constraint=None,
                  n_inputs=64, slack=1e-3, steps=None, substeps=2, seed=0, strict=True,
                  nominal=None):
    """Closed loop under the sampled Dini condition.

    Without ``nominal`` the sampled input with the largest ``db`` is applied
    for ``dt``. With a nominal controller ``u_nom(x)``, the admissible input
    (condition met within the slack) closest to ``u_nom(x)`` is applied. If
    no sampled input is admissible, :class:`NoSafeInput` is raised
    (``strict``) or the largest-``db`` input is used and counted as a
    fallback.
    """
    x = system.wrap(np.asarray(x0, float))
    b0 = float(candidate(x))
    if not b0 >= 0:
        raise PreconditionError(f"candidate(x0) = {b0:.4g} < 0")
    U = input_samples(system.input_set, n_inputs, seed)
    lo, hi = system.input_set.bounding_box
    scale = np.where(hi > lo, hi - lo, 1.0)
    n = int(round(duration / dt))
    states = np.empty((n + 1, system.state_dim))
    inputs = np.empty((n, system.input_dim))
    states[0] = x
    bvals = np.empty(n + 1)
    bvals[0] = b0
    fallbacks = 0
    for i in range(n):
        try:
            db = _dini_all(candidate, system, x[None], U, steps)[0]
        except OutOfDomain as exc:
            raise OutOfDomain(f"trajectory left the candidate domain at t={i * dt:.3g}: {x}") from exc
        need = -float(alpha(bvals[i])) - slack
        ok = db >= need
        if not np.any(ok):
            if strict:
                raise NoSafeInput(f"no sampled input satisfies the condition at t={i * dt:.3g}", x.copy())
            fallbacks += 1
            k = int(np.argmax(db))
        elif nominal is None:
            k = int(np.argmax(db))
        else:
            dist = np.linalg.norm((U - nominal(x)) / scale, axis=1)
            k = int(np.argmin(np.where(ok, dist, np.inf)))
        u = U[k]
        inputs[i] = u
        _, traj = rollout(system, x, u[None, :], dt, substeps)
        x = traj[-1]
        states[i + 1] = x
        bvals[i + 1] = float(candidate(x))
    times = dt * np.arange(n + 1)
    hvals = constraint(states) if constraint is not None else bvals
    decay = bvals[0] * np.exp(-alpha.k * times) - 1e-2
    rep = SafetyReport(float(np.min(hvals)), float(np.min(bvals)), b0, n, fallbacks,
                       bool(np.all(bvals >= decay)))
    return Trajectory(times, states, inputs), rep
