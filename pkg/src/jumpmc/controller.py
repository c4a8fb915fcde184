"""Statistical error control and the two adaptive drivers.

The computational error of a Monte Carlo Euler estimate splits as
E_C = E_T + E_S (time discretization plus statistical error).  The total
tolerance is budgeted as

    TOL_S = (2/3) TOL,   TOL_T = (1/3) TOL,
    TOL_TT = (2/3) TOL_T,   TOL_TS = (1/3) TOL_T,

where TOL_TT bounds the averaged time-error indicators and TOL_TS their
statistical uncertainty.  Two drivers meet the budget:

* deterministic-mesh driver (``algorithm_d``): all realizations share one
  coarse mesh; per-interval indicators are averaged over a modest batch,
  the mesh is bisected where the averaged indicator is large, the batch
  grows when the indicator average itself is statistically uncertain, and
  a plain Monte Carlo run on the frozen mesh finishes the job;
* per-realization driver (``algorithm_s``): every realization refines its
  own augmented mesh through ``control_time_error`` until its largest
  indicator passes the acceptance test, with Brownian-bridge noise
  refinement; batches grow until the payoff's statistical bound meets
  TOL_S.

Batches are chunked into fixed-size index ranges; a chunk is always
computed the same way no matter how chunks are spread over workers, and
reductions run in realization-index order with compensated summation, so
reports are byte-identical for any worker count.
"""

from __future__ import annotations

import math
import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .density import (
    _rho_from_stacks,
    cutoff_density_S,
    interval_step_sums,
    rho_per_step,
)
from .duals import _stack_calls, backward_duals
from .errors import ConvergenceError, EvaluationError, ParameterError
from .euler import (
    MIN_STEP_FRACTION,
    brownian_bridge_refine,
    euler_path,
    sample_wiener_increments,
)
from .jumps import (
    AugmentedGrid,
    JumpRealization,
    build_augmented_grid,
    intensity_integral_for,
    sample_jumps,
    uniform_mesh,
)
from .model import MODELS, JumpDiffusionModel, build_model
from .rng import SeedConfig, realization_streams

Array = np.ndarray

MESH_CHUNK = 16384  # fixed chunk sizes keep grouping independent of workers
STOCH_CHUNK = 2048


# ---------------------------------------------------------------------------
# tolerance budget and statistical primitives


@dataclass(frozen=True)
class ToleranceBudget:
    """Total tolerance and its statistical/time sub-budgets."""

    total: float
    statistical: float  # bounds E_S
    time: float  # bounds E_T (per-realization control)
    time_step: float  # bounds the averaged indicator total
    time_stat: float  # bounds the indicators' statistical error


def split_tolerance(tol: float) -> ToleranceBudget:
    """Split TOL into (2/3, 1/3) statistical/time parts, the time part
    again into (2/3, 1/3) for indicator size vs indicator uncertainty."""
    if not tol > 0.0:
        raise ParameterError(f"TOL must be positive, got {tol}")
    tol = float(tol)
    tol_s, tol_t = _partition_exact(tol)
    tol_tt, tol_ts = _partition_exact(tol_t)
    return ToleranceBudget(
        total=tol,
        statistical=tol_s,
        time=tol_t,
        time_step=tol_tt,
        time_stat=tol_ts,
    )


def _partition_exact(total: float) -> tuple:
    """Split ``total`` into a 2/3 and a 1/3 part whose float sum is
    ``total`` bitwise.

    Rounding makes ``(total - total/3) + total/3`` miss ``total`` by an
    ulp for roughly a third of inputs, so the smaller part is walked one
    ulp at a time.  Its lattice is at least twice as fine as the sum's,
    so an exact representation is always within a few steps.
    """
    small = total / 3.0
    large = total - small
    for _ in range(64):
        gap = total - (large + small)
        if gap == 0.0:
            return large, small
        small = math.nextafter(small, math.copysign(math.inf, gap))
    raise EvaluationError(f"tolerance split failed to close for {total!r}")


@dataclass(frozen=True)
class StatParams:
    """Confidence constant, batch growth cap, and initial batch size."""

    c0: float = 1.65
    mch: int = 10
    m0: int = 100
    max_batches: int = 40

    def __post_init__(self):
        if not self.c0 >= 1.65:
            raise ParameterError(f"c0 must be >= 1.65, got {self.c0}")
        if self.mch < 2:
            raise ParameterError(f"MCH must be >= 2, got {self.mch}")
        if self.m0 < 2:
            raise ParameterError(f"M0 must be >= 2, got {self.m0}")
        if self.max_batches < 1:
            raise ParameterError(f"max_batches must be >= 1, got {self.max_batches}")


@dataclass(frozen=True)
class AdaptParams:
    """Refinement thresholds for both drivers.

    Refinement fires at ``d1 (or s1) * tolerance / N``; acceptance needs
    the largest indicator strictly below ``D1 (or S1) * tolerance / N``.
    The acceptance multiples must exceed (2/c) times the refinement
    multiples, where c is the assumed per-level indicator contraction.
    """

    d1: float = 2.0
    D1: float = 8.0
    s1: float = 2.0
    # Wider acceptance multiple than D1: per-realization indicators are
    # noisy and sit at the density clamp floor, so a tight multiple makes
    # every path over-refine by a full bisection level.
    S1: float = 16.0
    c: float = 0.55
    n_initial: int = 5
    max_refinements: int = 30

    def __post_init__(self):
        if self.d1 <= 0 or self.s1 <= 0:
            raise ParameterError("refinement multiples d1, s1 must be positive")
        if not 0.0 < self.c < 1.0:
            raise ParameterError(f"contraction c must lie in (0, 1), got {self.c}")
        if not self.D1 > (2.0 / self.c) * self.d1:
            raise ParameterError(
                f"D1 must exceed (2/c) d1 = {(2.0 / self.c) * self.d1:g}, got {self.D1}"
            )
        if not self.S1 > (2.0 / self.c) * self.s1:
            raise ParameterError(
                f"S1 must exceed (2/c) s1 = {(2.0 / self.c) * self.s1:g}, got {self.S1}"
            )
        if self.n_initial < 1:
            raise ParameterError(f"n_initial must be >= 1, got {self.n_initial}")
        if self.max_refinements < 1:
            raise ParameterError(
                f"max_refinements must be >= 1, got {self.max_refinements}"
            )


def sample_stats(values) -> Tuple[float, float]:
    """Sample mean and the biased standard deviation sqrt(A(Y^2) - A(Y)^2).

    A negative radicand from round-off is clamped to zero.  Needs at
    least two values.
    """
    v = np.asarray(values, float).ravel()
    m = v.size
    if m < 2:
        raise ParameterError(f"sample statistics need at least 2 values, got {m}")
    mean = math.fsum(v) / m
    var = math.fsum(v * v) / m - mean * mean
    return mean, math.sqrt(max(var, 0.0))


def statistical_error_bound(std: float, m: int, c0: float = 1.65) -> float:
    """Confidence bound c0 * std / sqrt(M) on a sample mean."""
    if m < 1:
        raise ParameterError(f"M must be >= 1, got {m}")
    if std < 0.0:
        raise ParameterError(f"std must be >= 0, got {std}")
    return c0 * std / math.sqrt(m)


def change_M(m_in: int, s_in: float, tol_s: float, c0: float = 1.65, mch: int = 10) -> int:
    """Next batch size: the confidence-interval size, capped and rounded.

    M* = min(floor((c0 s_in / tol_s)^2), MCH * m_in), clamped to >= 1;
    the result is 2^(floor(log2 M*) + 1), always a power of two and at
    most 2 * MCH * m_in.
    """
    if m_in < 1:
        raise ParameterError(f"M_in must be >= 1, got {m_in}")
    if not tol_s > 0.0:
        raise ParameterError(f"TOL_S must be positive, got {tol_s}")
    if s_in < 0.0:
        raise ParameterError(f"S_in must be >= 0, got {s_in}")
    cap = mch * m_in
    ratio = c0 * s_in / tol_s
    m_star = cap if ratio * ratio >= cap else int(ratio * ratio)
    m_star = max(m_star, 1)
    return 2 ** (int(math.log2(m_star)) + 1)


# ---------------------------------------------------------------------------
# Monte Carlo batching


@dataclass(frozen=True)
class MonteCarloBatch:
    """One batch of fresh samples and its statistics."""

    start_index: int
    size: int
    mean: float
    std: float
    error_bound: float


@dataclass(frozen=True)
class MonteCarloResult:
    """Outcome of the batched Monte Carlo loop.

    ``estimate`` is the last batch's sample mean unless pooling across
    batches was requested.
    """

    estimate: float
    error_bound: float
    std: float
    m_final: int
    batches: Tuple[MonteCarloBatch, ...]
    next_index: int
    total_samples: int


def monte_carlo(
    draw: Callable[[int, int], Array],
    tol_s: float,
    stats: StatParams = StatParams(),
    start_index: int = 0,
    pooled: bool = False,
) -> MonteCarloResult:
    """Draw fresh batches until the statistical bound meets tol_s.

    ``draw(start, count)`` must return ``count`` i.i.d. samples for the
    realization indices [start, start+count).  Each batch uses new
    samples; the batch size is updated by change_M.  Raises
    ConvergenceError after ``stats.max_batches`` batches.
    """
    if not tol_s > 0.0:
        raise ParameterError(f"TOL_S must be positive, got {tol_s}")
    m = stats.m0
    index = start_index
    batches = []
    pooled_sum = 0.0
    pooled_sq = 0.0
    total = 0
    for _ in range(stats.max_batches):
        values = np.asarray(draw(index, m), float)
        if values.shape != (m,):
            raise ParameterError(
                f"draw returned shape {values.shape}, expected ({m},)"
            )
        mean, std = sample_stats(values)
        bound = statistical_error_bound(std, m, stats.c0)
        batches.append(
            MonteCarloBatch(
                start_index=index, size=m, mean=mean, std=std, error_bound=bound
            )
        )
        index += m
        total += m
        pooled_sum += math.fsum(values)
        pooled_sq += math.fsum(values * values)
        if bound <= tol_s:
            estimate, est_std, est_bound, est_m = mean, std, bound, m
            if pooled:
                estimate = pooled_sum / total
                est_std = math.sqrt(max(pooled_sq / total - estimate * estimate, 0.0))
                est_bound = statistical_error_bound(est_std, total, stats.c0)
                est_m = total
            return MonteCarloResult(
                estimate=estimate,
                error_bound=est_bound,
                std=est_std,
                m_final=est_m,
                batches=tuple(batches),
                next_index=index,
                total_samples=total,
            )
        m = change_M(m, std, tol_s, stats.c0, stats.mch)
    raise ConvergenceError(
        f"statistical error still above {tol_s:g} after {stats.max_batches} batches "
        f"(last bound {batches[-1].error_bound:g} at M={batches[-1].size})"
    )


# ---------------------------------------------------------------------------
# deterministic-mesh refinement primitives


def refine_deterministic(mesh: Array, rbar: Array, tol_tt: float, d1: float, n: int = None) -> Array:
    """Bisect every interval whose averaged indicator is >= d1 * TOL_TT / N."""
    mesh = np.asarray(mesh, float)
    rbar = np.asarray(rbar, float)
    if rbar.shape != (len(mesh) - 1,):
        raise ParameterError(
            f"indicators must have one entry per interval, got {rbar.shape}"
        )
    if n is None:
        n = len(mesh) - 1
    threshold = d1 * tol_tt / n
    out = []
    for i in range(len(mesh) - 1):
        out.append(mesh[i])
        if rbar[i] >= threshold:
            out.append(0.5 * (mesh[i] + mesh[i + 1]))
    out.append(mesh[-1])
    return np.array(out)


def stopping_deterministic(rbar: Array, n: int, tol_tt: float, D1: float) -> bool:
    """True iff max averaged indicator is strictly below D1 * TOL_TT / N."""
    return float(np.max(rbar)) < D1 * tol_tt / n


# ---------------------------------------------------------------------------
# fixed-mesh batch engine

_BATCHED_DENSITY_CALLBACKS = [
    "drift",
    "drift_t",
    "drift_x",
    "drift_xx",
    "diffusion",
    "diffusion_t",
    "diffusion_x",
    "diffusion_xx",
]


def _simulate_one(model, det, seeds, index, integral, tol, want_density):
    """Scalar pipeline for one realization on a shared deterministic mesh."""
    w_rng, t_rng, z_rng = realization_streams(seeds, index)
    jumps = sample_jumps(model, integral, t_rng, z_rng)
    grid = build_augmented_grid(det, jumps, horizon=model.horizon)
    dw = sample_wiener_increments(grid, w_rng, model.wiener_dim)
    path = euler_path(model, grid, dw)
    payoff = float(np.asarray(model.payoff(path.terminal), float))
    out = {
        "payoff": payoff,
        "n_a": grid.n_steps,
        "n_jumps": grid.n_jumps,
        "collisions": grid.collisions,
    }
    if want_density:
        duals = backward_duals(model, path, order=3)
        rho = rho_per_step(model, path, duals)
        signed = interval_step_sums(rho, grid)
        widths = np.diff(det)
        clamped = cutoff_density_S(signed / widths ** 2, tol) * widths ** 2
        out["signed_interval"] = signed
        out["r"] = clamped
        out["signed_total"] = float(np.sum(rho * grid.dt ** 2))
    return out


def _propagate_batch(G1, G2, G3, phi, phi1, phi2, order):
    p = np.einsum("bji,bj->bi", G1, phi)
    p1 = p2 = None
    if order >= 2:
        t = np.einsum("bji,bjp->bip", G1, phi1)
        p1 = np.einsum("bip,bpk->bik", t, G1) + np.einsum("bjik,bj->bik", G2, phi)
    if order >= 3:
        t0 = np.einsum("bji,bjpr->bipr", G1, phi2)
        t0 = np.einsum("bipr,bpk->bikr", t0, G1)
        t0 = np.einsum("bikr,brm->bikm", t0, G1)
        v = np.einsum("bji,bjp->bip", G1, phi1)
        term2 = np.einsum("bip,bpkm->bikm", v, G2)
        u = np.einsum("bjik,bjp->bikp", G2, phi1)
        w = np.einsum("bikp,bpm->bikm", u, G1)
        p2 = (
            t0
            + term2
            + w
            + w.transpose(0, 1, 3, 2)
            + np.einsum("bjikm,bj->bikm", G3, phi)
        )
    return p, p1, p2


def _mesh_group_batched(model, det, recs, tol, want_density, outputs):
    """Simulate a group of same-step-count realizations as one array batch.

    ``recs`` holds (slot, grid, dw) triples; results land in ``outputs``
    at the given slots.  Callback arithmetic is row-wise, so each
    realization's numbers do not depend on the group it happens to share.
    """
    B = len(recs)
    d = model.dim
    n = recs[0][1].n_steps
    slots = np.array([slot for slot, _, _ in recs], dtype=np.intp)
    times = np.stack([g.times for _, g, _ in recs])
    dw = np.stack([w for _, _, w in recs])
    dt = np.diff(times, axis=1)
    jump_flag = np.stack([g.jump_index >= 0 for _, g, _ in recs])
    marks_dense = np.zeros((B, n + 1, model.mark_dim))
    for b, (_, g, _) in enumerate(recs):
        nodes = np.nonzero(g.jump_index >= 0)[0]
        marks_dense[b, nodes] = g.marks[g.jump_index[nodes]]

    values = np.empty((B, n + 1, d))
    left = np.empty((B, n + 1, d))
    x = np.broadcast_to(model.x0, (B, d)).copy()
    left[:, 0] = x
    if jump_flag[:, 0].any():
        idx = np.nonzero(jump_flag[:, 0])[0]
        x[idx] += np.asarray(
            model.jump(times[idx, 0], x[idx], marks_dense[idx, 0]), float
        )
    values[:, 0] = x

    from .errors import PathDivergenceError
    from .euler import DIVERGENCE_BOUND

    for p in range(n):
        tcol = times[:, p]
        a = np.asarray(model.drift(tcol, x), float)
        bmat = np.asarray(model.diffusion(tcol, x), float)
        xl = x + a * dt[:, p, None] + np.einsum("bil,bl->bi", bmat, dw[:, p])
        bad = ~np.isfinite(xl).all(axis=1) | (np.abs(xl).max(axis=1) > DIVERGENCE_BOUND)
        if bad.any():
            raise PathDivergenceError(
                f"path diverged at step {p} (realization slot {slots[int(np.nonzero(bad)[0][0])]})",
                step=p,
            )
        mask = jump_flag[:, p + 1]
        if mask.any():
            idx = np.nonzero(mask)[0]
            x = xl.copy()
            x[idx] = xl[idx] + np.asarray(
                model.jump(times[idx, p + 1], xl[idx], marks_dense[idx, p + 1]), float
            )
        else:
            x = xl
        left[:, p + 1] = xl
        values[:, p + 1] = x

    payoff = np.asarray(model.payoff(values[:, -1]), float)
    outputs["payoff"][slots] = payoff
    outputs["n_a"][slots] = n
    outputs["n_jumps"][slots] = [g.n_jumps for _, g, _ in recs]
    outputs["collisions"][slots] = [g.collisions for _, g, _ in recs]
    if not want_density:
        return

    t_flat = times[:, :-1].reshape(-1)
    x_flat = values[:, :-1].reshape(-1, d)
    cb = _stack_calls(model, _BATCHED_DENSITY_CALLBACKS, t_flat, x_flat)
    more = _stack_calls(
        model, ["drift_xxx", "diffusion_xxx"], t_flat, x_flat
    )

    def shaped(name, src):
        return src[name].reshape((B, n) + src[name].shape[1:])

    a_x = shaped("drift_x", cb)
    a_xx = shaped("drift_xx", cb)
    a_xxx = shaped("drift_xxx", more)
    b_x = shaped("diffusion_x", cb)
    b_xx = shaped("diffusion_xx", cb)
    b_xxx = shaped("diffusion_xxx", more)

    eye = np.eye(d)
    A1 = eye + dt[..., None, None] * a_x + np.einsum("bnl,bnilj->bnij", dw, b_x)
    A2 = dt[..., None, None, None] * a_xx + np.einsum("bnl,bniljk->bnijk", dw, b_xx)
    A3 = dt[..., None, None, None, None] * a_xxx + np.einsum(
        "bnl,bniljkm->bnijkm", dw, b_xxx
    )

    jrows, jnodes = np.nonzero(jump_flag)
    if len(jrows):
        tj = times[jrows, jnodes]
        xj = left[jrows, jnodes]
        zj = marks_dense[jrows, jnodes]
        C1 = eye + np.asarray(model.jump_x(tj, xj, zj), float)
        C2 = np.asarray(model.jump_xx(tj, xj, zj), float)
        C3 = np.asarray(model.jump_xxx(tj, xj, zj), float)

    phi = np.asarray(model.payoff_x(values[:, -1]), float)
    phi1 = np.asarray(model.payoff_xx(values[:, -1]), float)
    phi2 = np.asarray(model.payoff_xxx(values[:, -1]), float)
    phi_store = np.empty((B, n, d))
    phi1_store = np.empty((B, n, d, d))
    phi2_store = np.empty((B, n, d, d, d))
    for p in range(n - 1, -1, -1):
        node = p + 1
        if len(jrows):
            sel = np.nonzero(jnodes == node)[0]
            if len(sel):
                rows = jrows[sel]
                pj, p1j, p2j = _propagate_batch(
                    C1[sel], C2[sel], C3[sel], phi[rows], phi1[rows], phi2[rows], 3
                )
                phi = phi.copy()
                phi1 = phi1.copy()
                phi2 = phi2.copy()
                phi[rows] = pj
                phi1[rows] = p1j
                phi2[rows] = p2j
        phi_store[:, p] = phi
        phi1_store[:, p] = phi1
        phi2_store[:, p] = phi2
        phi, phi1, phi2 = _propagate_batch(
            A1[:, p], A2[:, p], A3[:, p], phi, phi1, phi2, 3
        )

    rho_flat = _rho_from_stacks(
        cb,
        phi_store.reshape(-1, d),
        phi1_store.reshape(-1, d, d),
        phi2_store.reshape(-1, d, d, d),
    )
    rho = rho_flat.reshape(B, n)
    contrib = rho * dt ** 2
    n_det = len(det) - 1
    iv = np.clip(
        np.searchsorted(det, times[:, :-1].ravel(), side="right") - 1, 0, n_det - 1
    ).reshape(B, n)
    signed = np.zeros((B, n_det))
    np.add.at(
        signed.reshape(-1),
        (np.arange(B)[:, None] * n_det + iv).ravel(),
        contrib.ravel(),
    )
    widths = np.diff(det)
    clamped = cutoff_density_S(signed / widths ** 2, tol) * widths ** 2
    outputs["signed_interval"][slots] = signed
    outputs["r"][slots] = clamped
    outputs["signed_total"][slots] = contrib.sum(axis=1)


def _mesh_chunk(model, det, seeds, start, count, tol, want_density):
    """All per-realization results for one contiguous index chunk."""
    integral = intensity_integral_for(model)
    n_det = len(det) - 1
    outputs = {
        "payoff": np.empty(count),
        "n_a": np.empty(count, dtype=np.intp),
        "n_jumps": np.empty(count, dtype=np.intp),
        "collisions": np.empty(count, dtype=np.intp),
    }
    if want_density:
        outputs["signed_interval"] = np.empty((count, n_det))
        outputs["r"] = np.empty((count, n_det))
        outputs["signed_total"] = np.empty(count)

    if model.vectorized:
        recs = []
        for i in range(count):
            w_rng, t_rng, z_rng = realization_streams(seeds, start + i)
            jumps = sample_jumps(model, integral, t_rng, z_rng)
            grid = build_augmented_grid(det, jumps, horizon=model.horizon)
            dw = sample_wiener_increments(grid, w_rng, model.wiener_dim)
            recs.append((i, grid, dw))
        groups = {}
        for rec in recs:
            groups.setdefault(rec[1].n_steps, []).append(rec)
        for n_steps in sorted(groups):
            _mesh_group_batched(model, det, groups[n_steps], tol, want_density, outputs)
    else:
        for i in range(count):
            row = _simulate_one(model, det, seeds, start + i, integral, tol, want_density)
            for key, value in row.items():
                outputs[key][i] = value
    return outputs


def _resolve_model(spec):
    return build_model(spec) if isinstance(spec, str) else spec


def _mesh_chunk_task(args):
    spec, det, seeds, start, count, tol, want_density = args
    return _mesh_chunk(_resolve_model(spec), det, seeds, start, count, tol, want_density)


def _portable_model_spec(model: JumpDiffusionModel):
    """Something picklable that workers can rebuild the model from."""
    try:
        pickle.dumps(model)
        return model
    except Exception:
        if model.name in MODELS:
            return model.name
        return None


def _run_chunked(task_fn, make_args, starts_counts, workers):
    results = []
    if workers > 1 and len(starts_counts) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task_fn, [make_args(s, c) for s, c in starts_counts]))
    else:
        results = [task_fn(make_args(s, c)) for s, c in starts_counts]
    return results


def _chunk_ranges(start, count, chunk):
    out = []
    done = 0
    while done < count:
        size = min(chunk, count - done)
        out.append((start + done, size))
        done += size
    return out


def run_mesh_batch(
    model: JumpDiffusionModel,
    det: Array,
    seeds: SeedConfig,
    start: int,
    count: int,
    *,
    tol: float = None,
    want_density: bool = False,
    workers: int = 1,
) -> dict:
    """Simulate realizations [start, start+count) on one shared mesh.

    Returns per-realization arrays: payoff, n_a, n_jumps, collisions and,
    when ``want_density`` (requires ``tol`` for the clamp), the signed
    per-interval sums, the clamped indicators r and the signed totals.
    Chunking is fixed, so results do not depend on the worker count.
    """
    if count < 1:
        raise ParameterError(f"batch size must be >= 1, got {count}")
    if want_density and tol is None:
        raise ParameterError("want_density needs tol for the density clamp")
    det = np.asarray(det, float)
    ranges = _chunk_ranges(start, count, MESH_CHUNK)
    spec = _portable_model_spec(model) if workers > 1 else model
    if spec is None:
        workers = 1
        spec = model

    results = _run_chunked(
        _mesh_chunk_task,
        lambda s, c: (spec, det, seeds, s, c, tol, want_density),
        ranges,
        workers,
    )
    merged = {}
    for key in results[0]:
        merged[key] = np.concatenate([r[key] for r in results])
    return merged


# ---------------------------------------------------------------------------
# per-realization time-error control (stochastic steps)


@dataclass(frozen=True)
class TimeControlledRealization:
    """Outcome of adaptive per-realization time stepping."""

    payoff: float
    n_a: int
    n_jumps: int
    levels: int
    accepted: bool  # False when the step floor or level cap intervened
    signed_time_error: float  # sum of signed rho dt^2 on the final mesh
    r_total: float  # sum of clamped indicators on the final mesh
    work: int  # total steps over all simulated levels


def control_time_error(
    model: JumpDiffusionModel,
    jumps: JumpRealization,
    det: Array,
    wiener_rng: np.random.Generator,
    *,
    tol: float,
    tol_t: float,
    n_a_bar: float,
    adapt: AdaptParams = AdaptParams(),
    min_step: float = None,
) -> TimeControlledRealization:
    """Refine one realization's mesh until its indicators pass acceptance.

    Simulates, computes order-3 duals and clamped per-step indicators
    r_n = rho dt^2, accepts when max r_n < S1 * tol_t / n_a_bar, else
    bisects every step with r_n >= s1 * tol_t / n_a_bar (inclusive) with
    Brownian-bridge noise refinement.  Steps never shrink below the floor
    (horizon * 2^-30); a realization that cannot refine further, or runs
    out of refinement levels, is returned with ``accepted=False``.
    """
    grid = build_augmented_grid(det, jumps, horizon=model.horizon)
    dw = sample_wiener_increments(grid, wiener_rng, model.wiener_dim)
    if min_step is None:
        min_step = float(model.horizon) * MIN_STEP_FRACTION
    refine_at = adapt.s1 * tol_t / n_a_bar
    accept_below = adapt.S1 * tol_t / n_a_bar

    work = 0
    accepted = False
    levels = 0
    for level in range(adapt.max_refinements + 1):
        levels = level
        path = euler_path(model, grid, dw)
        work += grid.n_steps
        duals = backward_duals(model, path, order=3)
        rho = rho_per_step(model, path, duals)
        r = cutoff_density_S(rho, tol) * grid.dt ** 2
        if float(np.max(r)) < accept_below:
            accepted = True
            break
        mask = r >= refine_at
        splittable = mask & (0.5 * grid.dt >= min_step)
        if not splittable.any():
            break  # floor reached on every step that still violates
        grid, dw = brownian_bridge_refine(
            grid, dw, splittable, wiener_rng, min_step=min_step
        )
    payoff = float(np.asarray(model.payoff(path.terminal), float))
    return TimeControlledRealization(
        payoff=payoff,
        n_a=grid.n_steps,
        n_jumps=grid.n_jumps,
        levels=levels,
        accepted=accepted,
        signed_time_error=float(np.sum(rho * grid.dt ** 2)),
        r_total=float(np.sum(r)),
        work=work,
    )


def _stoch_chunk(model, det, seeds, start, count, tol, tol_t, n_a_bar, adapt):
    integral = intensity_integral_for(model)
    payoff = np.empty(count)
    n_a = np.empty(count, dtype=np.intp)
    n_jumps = np.empty(count, dtype=np.intp)
    levels = np.empty(count, dtype=np.intp)
    accepted = np.empty(count, dtype=bool)
    signed = np.empty(count)
    r_total = np.empty(count)
    work = np.empty(count, dtype=np.intp)
    for i in range(count):
        w_rng, t_rng, z_rng = realization_streams(seeds, start + i)
        jumps = sample_jumps(model, integral, t_rng, z_rng)
        res = control_time_error(
            model,
            jumps,
            det,
            w_rng,
            tol=tol,
            tol_t=tol_t,
            n_a_bar=n_a_bar,
            adapt=adapt,
        )
        payoff[i] = res.payoff
        n_a[i] = res.n_a
        n_jumps[i] = res.n_jumps
        levels[i] = res.levels
        accepted[i] = res.accepted
        signed[i] = res.signed_time_error
        r_total[i] = res.r_total
        work[i] = res.work
    return {
        "payoff": payoff,
        "n_a": n_a,
        "n_jumps": n_jumps,
        "levels": levels,
        "accepted": accepted,
        "signed_total": signed,
        "r_total": r_total,
        "work": work,
    }


def _stoch_chunk_task(args):
    spec, det, seeds, start, count, tol, tol_t, n_a_bar, adapt = args
    return _stoch_chunk(
        _resolve_model(spec), det, seeds, start, count, tol, tol_t, n_a_bar, adapt
    )


def run_stochastic_batch(
    model: JumpDiffusionModel,
    det: Array,
    seeds: SeedConfig,
    start: int,
    count: int,
    *,
    tol: float,
    tol_t: float,
    n_a_bar: float,
    adapt: AdaptParams = AdaptParams(),
    workers: int = 1,
) -> dict:
    """One batch of per-realization adaptive runs; fixed chunking."""
    if count < 1:
        raise ParameterError(f"batch size must be >= 1, got {count}")
    det = np.asarray(det, float)
    ranges = _chunk_ranges(start, count, STOCH_CHUNK)
    spec = _portable_model_spec(model) if workers > 1 else model
    if spec is None:
        workers = 1
        spec = model
    results = _run_chunked(
        _stoch_chunk_task,
        lambda s, c: (spec, det, seeds, s, c, tol, tol_t, n_a_bar, adapt),
        ranges,
        workers,
    )
    merged = {}
    for key in results[0]:
        merged[key] = np.concatenate([r[key] for r in results])
    return merged


# ---------------------------------------------------------------------------
# adaptive drivers


@dataclass(frozen=True)
class DeterministicIterationRow:
    """One adaptation iteration of the deterministic-mesh driver."""

    iteration: int
    n_intervals: int
    m_time: int
    estimate: float
    e_c: float  # exact value - estimate (nan when unknown)
    e_t: float  # signed, unclamped time-error estimate
    e_tt: float  # averaged clamped indicator total
    e_ts: float  # statistical bound on the indicator total
    e_s: float  # statistical bound on the payoff mean (informational)
    max_indicator: float
    action: str  # refine | grow_m | stop


@dataclass(frozen=True)
class StochasticBatchRow:
    """One batch of the per-realization driver."""

    batch: int
    m: int
    estimate: float
    e_c: float
    e_s: float
    e_t: float
    e_tt: float
    mean_n_a: float
    min_n_a: int
    max_n_a: int
    std_n_a: float
    max_jumps: int
    rejected: int  # floor/level-cap realizations in this batch
    n_a_bar: float  # value used by this batch's acceptance thresholds


@dataclass(frozen=True)
class AdaptiveRunReport:
    """Result of an adaptive run, with enough detail to audit it."""

    algorithm: str
    budget: ToleranceBudget
    estimate: float
    e_c: float  # exact - estimate (nan when no exact value)
    e_t: float
    e_tt: float
    e_ts: float
    e_s: float
    claimed_bound: float  # e_tt + e_ts + e_s
    det_times: Array
    seeds: SeedConfig
    total_realizations: int
    total_steps: int  # sum of final N_A over all realizations
    total_work: int  # steps over every simulated refinement level
    rejected_realizations: int
    iterations: Tuple[DeterministicIterationRow, ...] = ()
    batches: Tuple[StochasticBatchRow, ...] = ()
    mc_batches: Tuple[MonteCarloBatch, ...] = ()


def _column_means(rows: Array) -> Array:
    """Column means with order-fixed compensated summation."""
    m, n = rows.shape
    return np.array([math.fsum(rows[:, j]) / m for j in range(n)])


def algorithm_d(
    model: JumpDiffusionModel,
    tol: float,
    *,
    stats: StatParams = StatParams(),
    adapt: AdaptParams = AdaptParams(),
    seeds: SeedConfig = SeedConfig(),
    workers: int = 1,
) -> AdaptiveRunReport:
    """Adapt one shared deterministic mesh, then run plain Monte Carlo.

    Each iteration simulates M_T fresh realizations on the current mesh,
    averages the clamped per-interval indicators, and either refines the
    mesh (acceptance violated) or grows M_T (indicator average too
    uncertain); those two actions are mutually exclusive per iteration.
    When both tests pass, the payoff is estimated by ``monte_carlo`` on
    the frozen mesh.  Raises ConvergenceError when the iteration cap is
    hit; the partial iteration rows ride on the exception as
    ``exc.iterations``.
    """
    budget = split_tolerance(tol)
    if not budget.total < 1.0:
        raise ParameterError(f"TOL must lie in (0, 1), got {tol}")
    det = uniform_mesh(model.horizon, adapt.n_initial)
    m_t = stats.m0
    next_index = 0
    rows = []
    total_steps = 0
    total_work = 0
    exact = model.exact_value
    converged = False

    for iteration in range(1, adapt.max_refinements + 1):
        res = run_mesh_batch(
            model,
            det,
            seeds,
            next_index,
            m_t,
            tol=budget.total,
            want_density=True,
            workers=workers,
        )
        next_index += m_t
        steps = int(res["n_a"].sum())
        total_steps += steps
        total_work += steps

        n = len(det) - 1
        rbar = _column_means(res["r"])
        r_totals = res["r"].sum(axis=1)
        mean_g, std_g = sample_stats(res["payoff"])
        e_tt, std_r = sample_stats(r_totals)
        e_ts = statistical_error_bound(std_r, m_t, stats.c0)
        e_t = math.fsum(res["signed_total"]) / m_t
        e_s = statistical_error_bound(std_g, m_t, stats.c0)

        mesh_ok = stopping_deterministic(rbar, n, budget.time_step, adapt.D1)
        if not mesh_ok:
            action = "refine"
        elif e_ts > budget.time_stat:
            action = "grow_m"
        else:
            action = "stop"
        rows.append(
            DeterministicIterationRow(
                iteration=iteration,
                n_intervals=n,
                m_time=m_t,
                estimate=mean_g,
                e_c=exact - mean_g if exact is not None else math.nan,
                e_t=e_t,
                e_tt=e_tt,
                e_ts=e_ts,
                e_s=e_s,
                max_indicator=float(np.max(rbar)),
                action=action,
            )
        )
        if action == "refine":
            det = refine_deterministic(det, rbar, budget.time_step, adapt.d1)
        elif action == "grow_m":
            m_t = change_M(m_t, std_r, budget.time_stat, stats.c0, stats.mch)
        else:
            converged = True
            break

    if not converged:
        exc = ConvergenceError(
            f"mesh/batch adaptation did not settle within {adapt.max_refinements} "
            f"iterations (N={len(det) - 1}, M_T={m_t})"
        )
        exc.iterations = tuple(rows)
        raise exc

    last = rows[-1]
    work_box = {"steps": 0}

    def draw(start, count):
        out = run_mesh_batch(
            model, det, seeds, start, count, want_density=False, workers=workers
        )
        work_box["steps"] += int(out["n_a"].sum())
        return out["payoff"]

    mc = monte_carlo(
        draw, budget.statistical, replace(stats, m0=m_t), start_index=next_index
    )
    total_steps += work_box["steps"]
    total_work += work_box["steps"]
    estimate = mc.estimate

    return AdaptiveRunReport(
        algorithm="deterministic-mesh",
        budget=budget,
        estimate=estimate,
        e_c=exact - estimate if exact is not None else math.nan,
        e_t=last.e_t,
        e_tt=last.e_tt,
        e_ts=last.e_ts,
        e_s=mc.error_bound,
        claimed_bound=last.e_tt + last.e_ts + mc.error_bound,
        det_times=det,
        seeds=seeds,
        total_realizations=mc.next_index,
        total_steps=total_steps,
        total_work=total_work,
        rejected_realizations=0,
        iterations=tuple(rows),
        mc_batches=mc.batches,
    )


def algorithm_s(
    model: JumpDiffusionModel,
    tol: float,
    *,
    stats: StatParams = StatParams(),
    adapt: AdaptParams = AdaptParams(),
    seeds: SeedConfig = SeedConfig(),
    workers: int = 1,
) -> AdaptiveRunReport:
    """Per-realization adaptive time stepping with batched sample control.

    Every realization adapts its own mesh via ``control_time_error``; the
    acceptance thresholds scale with the mean final step count of the
    previous batch (the initial mesh size for the first batch).  Batches
    grow by change_M until the payoff's statistical bound meets the
    budget.  Raises ConvergenceError at the batch cap, with partial rows
    on the exception as ``exc.batches``.
    """
    budget = split_tolerance(tol)
    if not budget.total < 1.0:
        raise ParameterError(f"TOL must lie in (0, 1), got {tol}")
    det = uniform_mesh(model.horizon, adapt.n_initial)
    m = stats.m0
    n_a_bar = float(adapt.n_initial)
    next_index = 0
    exact = model.exact_value
    rows = []
    total_steps = 0
    total_work = 0
    rejected = 0

    for batch_no in range(1, stats.max_batches + 1):
        res = run_stochastic_batch(
            model,
            det,
            seeds,
            next_index,
            m,
            tol=budget.total,
            tol_t=budget.time,
            n_a_bar=n_a_bar,
            adapt=adapt,
            workers=workers,
        )
        next_index += m
        total_steps += int(res["n_a"].sum())
        total_work += int(res["work"].sum())
        rejected += int(np.count_nonzero(~res["accepted"]))

        mean_g, std_g = sample_stats(res["payoff"])
        e_s = statistical_error_bound(std_g, m, stats.c0)
        e_t = math.fsum(res["signed_total"]) / m
        e_tt = math.fsum(res["r_total"]) / m
        mean_na, std_na = sample_stats(res["n_a"])
        rows.append(
            StochasticBatchRow(
                batch=batch_no,
                m=m,
                estimate=mean_g,
                e_c=exact - mean_g if exact is not None else math.nan,
                e_s=e_s,
                e_t=e_t,
                e_tt=e_tt,
                mean_n_a=mean_na,
                min_n_a=int(res["n_a"].min()),
                max_n_a=int(res["n_a"].max()),
                std_n_a=std_na,
                max_jumps=int(res["n_jumps"].max()),
                rejected=int(np.count_nonzero(~res["accepted"])),
                n_a_bar=n_a_bar,
            )
        )
        n_a_bar = mean_na
        if e_s <= budget.statistical:
            last = rows[-1]
            _, std_r = sample_stats(res["r_total"])
            e_ts = statistical_error_bound(std_r, m, stats.c0)
            return AdaptiveRunReport(
                algorithm="per-realization",
                budget=budget,
                estimate=last.estimate,
                e_c=last.e_c,
                e_t=last.e_t,
                e_tt=last.e_tt,
                e_ts=e_ts,
                e_s=last.e_s,
                claimed_bound=last.e_tt + e_ts + last.e_s,
                det_times=det,
                seeds=seeds,
                total_realizations=next_index,
                total_steps=total_steps,
                total_work=total_work,
                rejected_realizations=rejected,
                batches=tuple(rows),
            )
        m = change_M(m, std_g, budget.statistical, stats.c0, stats.mch)

    exc = ConvergenceError(
        f"statistical bound still above {budget.statistical:g} after "
        f"{stats.max_batches} batches (last M={rows[-1].m})"
    )
    exc.batches = tuple(rows)
    raise exc
