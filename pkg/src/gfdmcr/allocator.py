"""Rate-maximizing subcarrier power allocation under ACI constraints.

Both receivers are handled by one projected dual (sub)gradient iteration.
For a multiplier vector ``gamma`` the Lagrangian is maximized in closed form,

    alpha_k = [ M / D_k(gamma) - c_k ]^+ ,   clipped to alpha_max,

where ``D_k`` collects the multiplier-weighted constraint slopes of
subcarrier ``k`` and ``c_k`` is the noise (plus self-interference bound for
MF) to signal ratio.  The multipliers then move along the constraint
residuals and are projected back onto ``gamma >= 0``.

Constraints are scaled to unit bounds internally; reported multipliers are
converted back to the original units.
"""

import csv
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .config import dbm_to_watts
from .errors import DomainError, ProblemTooLargeError, SolverDivergenceError
from .metrics import InterferenceKernel
from .spectrum import AciCoefficients

FEAS_RTOL = 1e-3
POWER_RTOL = 1e-6


@dataclass(frozen=True)
class ConstraintSet:
    """Power budget and interference limits, all in linear watts."""

    alpha_max: float
    q_r: float = math.inf
    q_l: float = math.inf
    q_n: float = math.inf

    def __post_init__(self):
        for name in ("alpha_max", "q_r", "q_l", "q_n"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be strictly positive")
        if math.isinf(self.alpha_max):
            raise DomainError("alpha_max must be finite")

    @classmethod
    def from_dbm(cls, alpha_max_dbm, q_r_dbm=math.inf, q_l_dbm=math.inf, q_n=math.inf):
        """Build from dBm power/interference levels; ``q_n`` is linear watts."""
        return cls(float(dbm_to_watts(alpha_max_dbm)), float(dbm_to_watts(q_r_dbm)),
                   float(dbm_to_watts(q_l_dbm)), float(q_n))


@dataclass(frozen=True)
class SolverOptions:
    """Dual iteration settings.

    ``step_rule`` is ``"spectral"`` (Barzilai-Borwein steps with Armijo
    backtracking on the dual), ``"diminishing"`` (``step_size / sqrt(t)``) or
    ``"constant"``.
    ``step_size=None`` scales the first step from the initial subgradient.
    Steps act on the unit-scaled constraints.
    """

    step_size: float = None
    max_iterations: int = 50_000
    eps: float = 1e-4
    multiplier_init: float = 0.0
    step_rule: str = "spectral"
    kkt_tol: float = 1e-6
    record_trace: bool = True


@dataclass
class AllocationResult:
    alphas: np.ndarray
    multipliers: np.ndarray
    rate: float
    sum_alpha: float
    p_r: float
    p_l: float
    max_self_interference: float
    iterations: int
    converged: bool
    receiver: str
    trace: dict = field(default_factory=dict, repr=False)
    objective: float = float("nan")

    @property
    def realized(self):
        return (self.sum_alpha, self.p_r, self.p_l, self.max_self_interference)

    def summary_row(self):
        return {"rate": self.rate, "P_r": self.p_r, "P_l": self.p_l,
                "sum_alpha": self.sum_alpha, "iters": self.iterations,
                "converged": int(self.converged)}

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "alpha"])
            for k, a in enumerate(self.alphas):
                w.writerow([k, repr(float(a))])

    def summary_to_csv(self, path):
        row = self.summary_row()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(row))
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])


@dataclass(frozen=True)
class RateProblem:
    """Everything needed to evaluate and optimize one SU link.

    ``noise`` holds the base terms ``C[m, k]``; ``kernel`` is only set for MF.
    """

    receiver: str
    noise: np.ndarray
    coeffs: AciCoefficients
    constraints: ConstraintSet
    p_s: float
    rate_factor: float = 1.0
    kernel: InterferenceKernel = None

    def __post_init__(self):
        if self.receiver not in ("MF", "ZF"):
            raise DomainError("receiver must be 'MF' or 'ZF'")
        if self.receiver == "MF" and self.kernel is None:
            raise DomainError("MF problems need an interference kernel")
        c = np.asarray(self.noise, dtype=float)
        if c.ndim != 2 or not np.all(np.isfinite(c)) or np.any(c <= 0):
            raise DomainError("noise base terms must be a finite positive (M, K) array")

    @property
    def M(self):
        return self.noise.shape[0]

    @property
    def K(self):
        return self.noise.shape[1]

    def with_constraints(self, constraints):
        return RateProblem(self.receiver, self.noise, self.coeffs, constraints, self.p_s,
                           self.rate_factor, self.kernel)

    def sinr(self, alphas):
        """True per-symbol SINR (MF) or SNR (ZF) for an allocation; works on batches.

        ``alphas`` of shape ``(..., K)`` gives ``(..., M, K)``.
        """
        alphas = np.asarray(alphas, dtype=float)
        num = self.rate_factor * self.p_s * alphas[..., None, :]
        den = np.broadcast_to(self.noise, np.broadcast_shapes(num.shape, self.noise.shape))
        if self.receiver == "MF":
            interf = np.einsum("mjk,...k->...mj", self.kernel.values, alphas) - self.p_s * alphas[..., None, :]
            den = den + np.maximum(interf, 0.0)
        return num / den

    def true_rate(self, alphas):
        """Spectral efficiency (bit/s/Hz) averaged over all MK symbols."""
        return np.log2(1.0 + self.sinr(alphas)).mean(axis=(-2, -1))

    def surrogate_rate(self, alphas):
        """MF objective with the self-interference replaced by its bound ``q_n``."""
        alphas = np.asarray(alphas, dtype=float)
        extra = self.constraints.q_n if self.receiver == "MF" else 0.0
        g = self.rate_factor * self.p_s * alphas[..., None, :] / (extra + self.noise)
        return np.log2(1.0 + g).mean(axis=(-2, -1))

    def constraint_rows(self):
        """Linear constraints ``A alpha <= b`` in multiplier order.

        MF: ``MK`` self-interference rows (index ``m' + M k'``), then power, right,
        left.  ZF: power, right, left.
        """
        rows = [np.ones(self.K), self.coeffs.t_right, self.coeffs.t_left]
        bounds = [self.constraints.alpha_max, self.constraints.q_r, self.constraints.q_l]
        A = np.array(rows, dtype=float)
        b = np.array(bounds, dtype=float)
        if self.receiver == "MF":
            A = np.vstack([self.kernel.constraint_matrix(), A])
            b = np.concatenate([np.full(self.M * self.K, self.constraints.q_n), b])
        return A, b

    def realized(self, alphas):
        alphas = np.asarray(alphas, dtype=float)
        si = 0.0
        if self.receiver == "MF":
            si = float(self.kernel.self_interference(alphas).max())
        return (float(alphas.sum()), float(alphas @ self.coeffs.t_right),
                float(alphas @ self.coeffs.t_left), si)

    def is_feasible(self, alphas, rtol=FEAS_RTOL):
        A, b = self.constraint_rows()
        lhs = A @ np.asarray(alphas, dtype=float)
        tol = np.full(b.shape, rtol)
        tol[-3] = POWER_RTOL
        finite = np.isfinite(b)
        return bool(np.all(lhs[finite] <= b[finite] * (1 + tol[finite]) + 1e-300))

    def result(self, alphas, multipliers, iterations, converged, trace=None, objective=float("nan")):
        s, pr, pl, si = self.realized(alphas)
        return AllocationResult(np.asarray(alphas, dtype=float), np.asarray(multipliers, dtype=float),
                                float(self.true_rate(alphas)), s, pr, pl, si, iterations,
                                converged, self.receiver, trace or {}, objective)


class _DualIteration:
    """Projected dual ascent on the unit-scaled constraint system."""

    def __init__(self, problem: RateProblem, opts: SolverOptions):
        self.problem = problem
        self.opts = opts
        A, b = problem.constraint_rows()
        self.b = b
        self.active_rows = np.flatnonzero(np.isfinite(b))
        scaled = A[self.active_rows] / b[self.active_rows, None]
        # identical rows (the M copies of a self-interference constraint) share one multiplier
        key = np.round(scaled / max(np.abs(scaled).max(), 1e-300), 12)
        _, first, inverse, counts = np.unique(key, axis=0, return_index=True,
                                               return_inverse=True, return_counts=True)
        self.A = scaled[first]
        self.row_of = inverse.ravel()
        self.row_count = counts
        extra = problem.constraints.q_n if problem.receiver == "MF" else 0.0
        self.snr_gain = problem.rate_factor * problem.p_s / (extra + problem.noise)   # (M, K)
        self.offset = 1.0 / self.snr_gain          # c[m, k]: noise-to-signal per unit power
        self.M = problem.M
        self.alpha_cap = problem.constraints.alpha_max
        self.uniform_offset = bool(np.allclose(self.offset, self.offset[0], rtol=1e-12, atol=0))

    def primal(self, gamma):
        """Lagrangian maximizer: ``sum_m 1/(alpha_k + c[m, k]) = D_k`` on ``[0, alpha_max]``.

        Closed form ``M/D_k - c_k`` when ``c`` does not depend on ``m``; otherwise
        Newton steps from the left, which converge monotonically because the
        left-hand side is convex and decreasing in ``alpha_k``.
        """
        D = self.A.T @ gamma
        pos = D > 0
        Dp = np.where(pos, D, 1.0)
        c = self.offset
        if self.uniform_offset:
            alpha = self.M / Dp - c[0]
        else:
            alpha = np.maximum(self.M / Dp - c.max(axis=0), 0.0)
            on = pos & (np.sum(1.0 / c, axis=0) > D)
            for _ in range(60):
                inv = 1.0 / (alpha[None, :] + c)
                phi = inv.sum(axis=0) - Dp
                step = phi / (inv**2).sum(axis=0)
                alpha = np.where(on, alpha + step, alpha)
                if np.all(np.abs(step[on]) <= 1e-13 * (alpha[on] + c.min(axis=0)[on])):
                    break
            alpha = np.where(on, alpha, 0.0)
        alpha = np.where(pos, alpha, self.alpha_cap)
        return np.clip(alpha, 0.0, self.alpha_cap)

    def objective(self, alpha):
        return float(np.log1p(self.snr_gain * alpha[None, :]).sum())

    def dual_value(self, gamma, alpha):
        return self.objective(alpha) + float(gamma @ (1.0 - self.A @ alpha))

    def _step(self, t, step0, step):
        rule = self.opts.step_rule
        if rule == "diminishing":
            return step0 / math.sqrt(t)
        if rule == "constant":
            return step0
        if rule == "spectral":
            return step
        raise DomainError(f"unknown step rule {rule!r}")

    def run(self):
        opts = self.opts
        gamma = np.full(self.A.shape[0], float(opts.multiplier_init))
        alpha = self.primal(gamma)
        resid = self.A @ alpha - 1.0                    # negative dual gradient
        if opts.step_size is None:
            step0 = 0.1 * self.M * self.problem.K / max(np.linalg.norm(resid), 1e-12)
        else:
            step0 = float(opts.step_size)
        step = step0
        value = self.dual_value(gamma, alpha)
        trace_obj, trace_res = [], []
        recent_max = []
        converged = False
        t = 0
        for t in range(1, opts.max_iterations + 1):
            step = self._step(t, step0, step)
            new_gamma = np.maximum(gamma + step * resid, 0.0)
            new_alpha = self.primal(new_gamma)
            if opts.step_rule == "spectral":
                # Armijo backtracking along the projected step keeps the dual decreasing
                d = new_gamma - gamma
                slope = -float(resid @ d)
                lam = 1.0
                new_value = self.dual_value(new_gamma, new_alpha)
                while new_value > value + 1e-4 * lam * slope and lam > 1e-12:
                    lam *= 0.5
                    new_gamma = gamma + lam * d
                    new_alpha = self.primal(new_gamma)
                    new_value = self.dual_value(new_gamma, new_alpha)
                value = new_value
            new_resid = self.A @ new_alpha - 1.0
            if opts.step_rule == "spectral":
                s = new_gamma - gamma
                sy = float(s @ (resid - new_resid))
                step = float(s @ s) / sy if sy > 0 else 2.0 * step
                step = min(max(step, 1e-10 * step0), 1e10 * step0)

            delta = float(np.abs(new_alpha - alpha).sum())
            gamma, alpha, resid = new_gamma, new_alpha, new_resid
            kkt = float(np.max(np.abs(gamma - np.maximum(gamma + resid, 0.0))))
            if opts.record_trace:
                trace_obj.append(self.objective(alpha))
                trace_res.append(float(resid.max()))
            if delta <= opts.eps and kkt <= opts.kkt_tol:
                converged = True
                break
            recent_max.append(float(resid.max()))
            if t % 1000 == 0 and t >= 4000:
                recent = max(recent_max[-1000:])
                earlier = max(recent_max[-2000:-1000])
                if recent > 1.0 and recent > 10.0 * max(earlier, 1e-3):
                    raise SolverDivergenceError(
                        f"constraint residuals grew from {earlier:.3g} to {recent:.3g} by iteration {t}"
                    )
                del recent_max[:-2000]

        # scale onto the feasible set; every constraint is homogeneous in alpha
        load = float(np.max(self.A @ alpha)) if alpha.any() else 0.0
        if load > 1.0:
            alpha = alpha / load
        multipliers = np.zeros(self.b.shape)
        shared = gamma[self.row_of] / self.row_count[self.row_of]
        multipliers[self.active_rows] = shared / self.b[self.active_rows]
        trace = {}
        if opts.record_trace:
            trace = {"objective": np.array(trace_obj), "max_residual": np.array(trace_res)}
        return alpha, multipliers, t, converged, trace


def solve(problem: RateProblem, opts: SolverOptions = None) -> AllocationResult:
    """Optimize the allocation of a prepared problem."""
    opts = opts or SolverOptions()
    it = _DualIteration(problem, opts)
    alpha, mult, iters, converged, trace = it.run()
    return problem.result(alpha, mult, iters, converged, trace, objective=float(problem.surrogate_rate(alpha)))


def optimize_mf(kernel: InterferenceKernel, c_mf, coeffs: AciCoefficients, cons: ConstraintSet,
                opts: SolverOptions = None, rate_factor=1.0) -> AllocationResult:
    """Matched-filter rate maximization with the self-interference bound ``cons.q_n``.

    The solver works on the bounded (convex) objective; the reported ``rate``
    is the true SINR rate at the returned allocation.
    """
    if math.isinf(cons.q_n):
        raise DomainError("the MF problem needs a finite self-interference threshold q_n")
    problem = RateProblem("MF", np.asarray(c_mf, dtype=float), coeffs, cons, kernel.p_s,
                          rate_factor, kernel)
    return solve(problem, opts)


def optimize_zf(c_zf, coeffs: AciCoefficients, cons: ConstraintSet, opts: SolverOptions = None,
                *, p_s, rate_factor=1.0) -> AllocationResult:
    problem = RateProblem("ZF", np.asarray(c_zf, dtype=float), coeffs, cons, p_s, rate_factor)
    return solve(problem, opts)


def _safe_ratio(bound, denom):
    if denom <= 0 or math.isinf(bound):
        return math.inf
    return bound / denom


def uniform_level(problem: RateProblem):
    """Largest common power that satisfies every constraint."""
    cons = problem.constraints
    levels = [cons.alpha_max / problem.K,
              _safe_ratio(cons.q_r, float(problem.coeffs.t_right.sum())),
              _safe_ratio(cons.q_l, float(problem.coeffs.t_left.sum()))]
    if problem.receiver == "MF":
        levels.append(_safe_ratio(cons.q_n, float(problem.kernel.interference_sums().max())))
    return min(levels)


def uniform_alloc_mf(kernel: InterferenceKernel, coeffs: AciCoefficients, cons: ConstraintSet):
    K = kernel.K
    levels = [cons.alpha_max / K,
              _safe_ratio(cons.q_r, float(coeffs.t_right.sum())),
              _safe_ratio(cons.q_l, float(coeffs.t_left.sum())),
              _safe_ratio(cons.q_n, float(kernel.interference_sums().max()))]
    return np.full(K, min(levels))


def uniform_alloc_zf(coeffs: AciCoefficients, cons: ConstraintSet):
    K = len(coeffs.t_right)
    levels = [cons.alpha_max / K,
              _safe_ratio(cons.q_r, float(coeffs.t_right.sum())),
              _safe_ratio(cons.q_l, float(coeffs.t_left.sum()))]
    return np.full(K, min(levels))


@dataclass
class QnSweep:
    qn: np.ndarray
    rates: np.ndarray
    results: list
    errors: list

    @property
    def best_index(self):
        return int(np.nanargmax(self.rates))

    @property
    def best_qn(self):
        return float(self.qn[self.best_index])

    @property
    def best(self) -> AllocationResult:
        return self.results[self.best_index]


def sweep_qn(problem: RateProblem, qn_grid, opts: SolverOptions = None) -> QnSweep:
    """Solve the MF problem for every threshold in ``qn_grid``.

    Points whose solve raises are kept in the curve as NaN with the error.
    """
    qn_grid = np.asarray(qn_grid, dtype=float)
    if qn_grid.size == 0:
        raise DomainError("q_n grid is empty")
    if problem.receiver != "MF":
        raise DomainError("q_n only applies to the MF receiver")
    rates, results, errors = [], [], []
    for qn in qn_grid:
        cons = problem.constraints
        sub = problem.with_constraints(ConstraintSet(cons.alpha_max, cons.q_r, cons.q_l, float(qn)))
        try:
            res = solve(sub, opts)
        except (SolverDivergenceError, DomainError, FloatingPointError) as exc:
            rates.append(np.nan)
            results.append(None)
            errors.append(exc)
            continue
        rates.append(res.rate)
        results.append(res)
        errors.append(None)
    rates = np.array(rates)
    if np.all(np.isnan(rates)):
        raise errors[0]
    return QnSweep(qn_grid, rates, results, errors)


def uniform_interference_level(problem: RateProblem):
    """Self-interference produced by the uniform allocation that ignores ``q_n``."""
    cons = problem.constraints
    relaxed = problem.with_constraints(ConstraintSet(cons.alpha_max, cons.q_r, cons.q_l))
    level = uniform_level(relaxed)
    return level * max(float(problem.kernel.interference_sums().max()), 0.0)


def tune_qn(problem: RateProblem, opts: SolverOptions = None, points=7, span=8.0,
            refine=1) -> QnSweep:
    """Search ``q_n`` around the self-interference of an interference-blind allocation.

    The blind allocation solves the problem with the self-interference terms
    dropped; its largest self-interference ``q`` sets the scale.  A log-spaced
    grid of ``points`` thresholds over ``[q/span, q*span]``, plus the level
    reached by the uniform allocation when that is not far below ``q/span``,
    is evaluated and ``refine`` extra points are placed on each side of the
    best one.  Returns
    the whole curve sorted by ``q_n``.
    """
    if problem.receiver != "MF":
        raise DomainError("q_n only applies to the MF receiver")
    cons = problem.constraints
    blind = RateProblem("ZF", problem.noise, problem.coeffs,
                        ConstraintSet(cons.alpha_max, cons.q_r, cons.q_l), problem.p_s,
                        problem.rate_factor)
    q_ref = float(problem.kernel.self_interference(solve(blind, opts).alphas).max())
    if not q_ref > 0:
        q_ref = uniform_interference_level(problem)
    if not q_ref > 0:
        raise DomainError("the waveform has no self-interference; use the ZF problem")
    grid = q_ref * np.geomspace(1.0 / span, span, points)
    # the uniform allocation's level is a candidate unless it is far below the scale
    q_u = uniform_interference_level(problem)
    if q_u >= q_ref / span:
        grid = np.append(grid, q_u)
    coarse = sweep_qn(problem, grid, opts)
    sweeps = [coarse]
    if refine and points > 1:
        best = coarse.qn[coarse.best_index]
        ratio = span ** (2.0 / (points - 1))
        fine = ratio ** (np.arange(1, refine + 1) / (refine + 1))
        sweeps.append(sweep_qn(problem, np.concatenate([best / fine[::-1], best * fine]), opts))
    qn = np.concatenate([sw.qn for sw in sweeps])
    rates = np.concatenate([sw.rates for sw in sweeps])
    results = [r for sw in sweeps for r in sw.results]
    errors = [e for sw in sweeps for e in sw.errors]
    order = np.argsort(qn, kind="stable")
    return QnSweep(qn[order], rates[order], [results[j] for j in order], [errors[j] for j in order])


def oracle_grid_search(problem: RateProblem, grid_resolution=50, max_k=6, chunk=200_000):
    """Exhaustive search over ``alpha_k in {0, d, 2d, ...}`` with ``d = alpha_max / grid_resolution``.

    Only points satisfying every constraint of ``problem`` (including ``q_n``
    for MF when finite) are considered; the objective is the true rate.
    """
    K = problem.K
    if K > max_k:
        raise ProblemTooLargeError(f"grid search limited to K <= {max_k}, got K={K}")
    n = int(grid_resolution)
    delta = problem.constraints.alpha_max / n
    A, b = problem.constraint_rows()
    finite = np.isfinite(b)
    A, b = A[finite], b[finite]

    best_rate, best_alpha = -np.inf, np.zeros(K)
    combos = _compositions(K, n)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=float)
        if block.size == 0:
            break
        alphas = block * delta
        ok = np.all(alphas @ A.T <= b * (1 + 1e-12), axis=1)
        if not np.any(ok):
            continue
        alphas = alphas[ok]
        rates = problem.true_rate(alphas)
        i = int(np.argmax(rates))
        if rates[i] > best_rate:
            best_rate, best_alpha = float(rates[i]), alphas[i]
    return problem.result(best_alpha, np.zeros(len(problem.constraint_rows()[1])), 0, True)


def _compositions(K, n):
    """All integer vectors of length K with non-negative entries summing to at most n."""
    def rec(prefix, remaining, depth):
        if depth == K - 1:
            for v in range(remaining + 1):
                yield prefix + (v,)
            return
        for v in range(remaining + 1):
            yield from rec(prefix + (v,), remaining - v, depth + 1)
    return rec((), n, 0)
