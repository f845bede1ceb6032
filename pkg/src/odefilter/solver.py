"""The IVP solving loop: initialization, model interrogation, predict-update.

One solve is strictly sequential.  Each attempted step predicts the state
mean to the trial time, evaluates the right-hand side there to manufacture a
derivative observation, estimates the local diffusion intensity from the
residual, runs the error test (in adaptive mode), and only then completes
the covariance prediction and the Kalman update.  Rejected steps re-estimate
everything at the shrunken step; the final step is clamped to land exactly
on T.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .filtering import (
    GaussState,
    ObservationModel,
    SolutionPath,
    predict,
    update,
)
from .priors import IwpModel, discrete_transition, make_iwp
from .stepcontrol import StepReport, estimate_sigma2, local_error_test, next_step_size

__all__ = [
    "IvpProblem",
    "SolverConfig",
    "SolveResult",
    "StepSizeUnderflowError",
    "initialize",
    "observe",
    "solve",
]

_EPS = float(np.finfo(float).eps)

# Derivative-observation knots (fractions of h_init) used by the diffuse
# start; q derivative readings plus the initial value give q+1 conditions.
_STARTER_KNOTS = {
    1: (0.0,),
    2: (0.0, 1.0),
    3: (0.0, 0.5, 1.0),
    4: (0.0, 1.0 / 3.0, 0.5, 1.0),
}


class StepSizeUnderflowError(RuntimeError):
    """Step size shrank below the resolvable scale of the time variable."""


@dataclass(eq=False)
class IvpProblem:
    """An initial value problem y' = f(t, y), y(t0) = y0 on [t0, T].

    ``rhs(t, y) -> ndarray`` is the vector field; invocations through
    :meth:`eval_rhs` are counted.  ``exact``, when present, maps a time to
    the true solution vector and is used by reference and convergence
    tooling only.
    """

    name: str
    dim: int
    t0: float
    T: float
    y0: np.ndarray
    rhs: Callable[[float, np.ndarray], np.ndarray]
    exact: Optional[Callable[[float], np.ndarray]] = None
    _nfev: int = field(default=0, repr=False, compare=False)

    def __post_init__(self):
        self.y0 = np.atleast_1d(np.asarray(self.y0, dtype=float))
        if self.y0.size != self.dim:
            raise ValueError(f"y0 has {self.y0.size} entries but dim = {self.dim}")
        if not self.t0 < self.T:
            raise ValueError(f"need t0 < T, got [{self.t0}, {self.T}]")

    @property
    def nfev(self) -> int:
        return self._nfev

    def eval_rhs(self, t: float, y: np.ndarray) -> np.ndarray:
        """Counted right-hand-side evaluation."""
        self._nfev += 1
        out = np.atleast_1d(np.asarray(self.rhs(t, y), dtype=float))
        if out.shape != (self.dim,):
            raise ValueError(
                f"rhs returned shape {out.shape}, expected ({self.dim},) for problem {self.name!r}"
            )
        return out


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``eps`` is the error-test tolerance; ``per_unit_step`` selects whether
    the test bound is eps*h (True, error per unit step) or eps (False, error
    per step, the default).  The per-step convention is the one under which
    shrinking h always shrinks the tested quantity, so it is the robust
    controller choice; per-unit-step testing divides that h factor away and
    can reject forever when a derivative slot is stale.  ``fixed_step``
    disables adaptivity.  ``sigma_mode`` chooses between a per-step
    diffusion estimate (``local_ml``) and a constant diffusion with a single
    whole-run estimate applied to the reported covariances afterwards
    (``global_ml``; fixed-step runs only, since the error test requires the
    local estimate).
    """

    q: int = 2
    eps: float = 1e-6
    weighting_tau: float = 0.1
    per_unit_step: bool = False
    rho: float = 0.95
    eta_min: float = 0.1
    eta_max: float = 5.0
    h_init: Optional[float] = None
    fixed_step: Optional[float] = None
    init_mode: str = "exact"
    obs_strategy: str = "mean"
    seed: int = 0
    sigma_mode: str = "local_ml"
    diffuse_variance: float = 1e12
    max_steps: int = 2_000_000
    # With eta_min = 0.1 a rejection streak shrinks h by 10x each time; the
    # cap must trip well before the step underflows (~13 orders).
    max_rejections: int = 8

    def __post_init__(self):
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if not 0.0 < self.eta_min < 1.0 < self.eta_max:
            raise ValueError("need 0 < eta_min < 1 < eta_max")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.weighting_tau <= 0:
            raise ValueError(f"weighting_tau must be positive, got {self.weighting_tau}")
        if self.init_mode not in ("exact", "diffuse_filter", "rk_starter"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.obs_strategy not in ("mean", "sampled"):
            raise ValueError(f"unknown obs_strategy {self.obs_strategy!r}")
        if self.sigma_mode not in ("local_ml", "global_ml"):
            raise ValueError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.fixed_step is not None and self.fixed_step <= 0:
            raise ValueError("fixed_step must be positive")
        if self.sigma_mode == "global_ml" and self.fixed_step is None:
            raise ValueError(
                "sigma_mode='global_ml' needs fixed_step: the adaptive error "
                "test is built on the per-step estimate"
            )

    def resolve_h_init(self, problem: IvpProblem) -> float:
        if self.h_init is not None:
            return self.h_init
        if self.fixed_step is not None:
            return self.fixed_step
        return (problem.T - problem.t0) / 100.0


@dataclass(eq=False)
class SolveResult:
    """Everything one solve produced."""

    path: SolutionPath
    sigma2_trace: np.ndarray  # (steps_accepted, dim)
    steps_accepted: int
    steps_rejected: int
    fevals: int
    per_step: list[StepReport]

    @property
    def knots(self) -> np.ndarray:
        return np.asarray(self.path.knots)

    def solution_means(self) -> np.ndarray:
        """Filtered solution values (slot 0 of each block) per knot."""
        q1 = self.path.model.block_size
        return np.asarray([s.mean[0::q1] for s in self.path.filtered])

    def solution_stds(self) -> np.ndarray:
        q1 = self.path.model.block_size
        return np.asarray([s.std()[0::q1] for s in self.path.filtered])


def _unit_transition(model: IwpModel, h: float):
    return discrete_transition(model, h, sigma2=1.0)


def _scaled_blocks(base, sigma2: np.ndarray):
    return [base.scaled(float(s)) for s in sigma2]


def observe(
    problem: IvpProblem,
    pred: GaussState,
    t: float,
    strategy: str = "mean",
    *,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Manufacture the derivative observation at a trial time.

    ``mean``: evaluate the right-hand side at the predicted solution mean
    (one evaluation).  ``sampled``: evaluate at a draw from the predicted
    solution marginal instead, a comparison mode mimicking
    perturbed-evaluation solvers; it degenerates to ``mean`` when the
    predictive variance is zero.
    """
    q1 = pred.mean.size // problem.dim
    y_idx = np.arange(problem.dim) * q1
    y_pred = pred.mean[y_idx]
    if strategy == "mean":
        loc = y_pred
    elif strategy == "sampled":
        if rng is None:
            raise ValueError("sampled observation strategy needs the run's generator")
        var = np.clip(pred.cov[y_idx, y_idx], 0.0, None)
        loc = y_pred + np.sqrt(var) * rng.standard_normal(problem.dim)
    else:
        raise ValueError(f"unknown observation strategy {strategy!r}")
    return problem.eval_rhs(t, loc)


def _diffuse_segment(
    problem: IvpProblem,
    config: SolverConfig,
    model: IwpModel,
    variance: float,
    rng: np.random.Generator | None,
) -> tuple[list, list[np.ndarray], list[float]]:
    """Filter the starter knots from a large-variance prior.

    Returns (segment, z_values, knot_times); the segment holds
    (prediction, filtered, h_in) triples, one per starter knot.
    """
    q = model.q
    if q not in _STARTER_KNOTS:
        raise ValueError(f"diffuse start supports q in 1..4, got {q}")
    h0 = config.resolve_h_init(problem)
    fractions = _STARTER_KNOTS[q]
    d = problem.dim
    n = model.state_size
    prior = GaussState(
        t=problem.t0, mean=np.zeros(n), cov=variance * np.eye(n)
    )
    value_obs = ObservationModel(derivative_index=0, noise=0.0)
    deriv_obs = ObservationModel(derivative_index=1, noise=0.0)

    state, _ = update(prior, problem.y0, value_obs)
    z0 = observe(problem, state, problem.t0, config.obs_strategy, rng=rng)
    if not np.all(np.isfinite(z0)):
        raise ValueError(f"right-hand side returned non-finite values at t0 = {problem.t0}")
    state, _ = update(state, z0, deriv_obs)
    segment = [(prior, state, None)]
    zs = [z0]
    times = [problem.t0]
    for frac in fractions[1:]:
        t_next = problem.t0 + frac * h0
        h = t_next - times[-1]
        base = _unit_transition(model, h)
        pred = predict(segment[-1][1], _scaled_blocks(base, model.sigma2))
        z = observe(problem, pred, t_next, config.obs_strategy, rng=rng)
        state, _ = update(pred, z, deriv_obs)
        segment.append((pred, state, h))
        zs.append(z)
        times.append(t_next)
    return segment, zs, times


def _clean_cov(state: GaussState) -> GaussState:
    """Clip round-off negativity out of a covariance (diffuse starts)."""
    w, V = np.linalg.eigh(0.5 * (state.cov + state.cov.T))
    w = np.clip(w, 0.0, None)
    return GaussState(t=state.t, mean=state.mean, cov=(V * w) @ V.T)


def _initial_segment(
    problem: IvpProblem,
    config: SolverConfig,
    model: IwpModel,
    rng: np.random.Generator | None,
) -> list[tuple[GaussState, GaussState, float | None]]:
    """Initialization knots as (prediction, filtered, incoming h) triples."""
    if config.init_mode == "exact":
        h0 = config.resolve_h_init(problem)
        q = model.q
        n = model.state_size
        diag = np.empty(n)
        for k in range(problem.dim):
            for i in range(q + 1):
                diag[k * (q + 1) + i] = model.sigma2[k] * h0 ** (2 * (q - i) + 1)
        prior = GaussState(t=problem.t0, mean=np.zeros(n), cov=np.diag(diag))
        state, _ = update(prior, problem.y0, ObservationModel(derivative_index=0))
        z0 = observe(problem, state, problem.t0, config.obs_strategy, rng=rng)
        if not np.all(np.isfinite(z0)):
            raise ValueError(f"right-hand side returned non-finite values at t0 = {problem.t0}")
        state, _ = update(state, z0, ObservationModel(derivative_index=1))
        return [(prior, state, None)]

    segment, zs, times = _diffuse_segment(
        problem, config, model, config.diffuse_variance, rng
    )
    if config.init_mode == "rk_starter" and model.q == 4:
        # Replace the numerically-diffuse terminal state with the exact
        # diffuse-limit closed forms evaluated at the gathered observations.
        from .analysis import rk_starter_q4

        h0 = config.resolve_h_init(problem)
        u, v = _STARTER_KNOTS[4][1], _STARTER_KNOTS[4][2]
        pred_last, state_last, h_last = segment[-1]
        means, covs = [], []
        for k in range(problem.dim):
            z_k = [z[k] for z in zs]
            m_k, c_k = rk_starter_q4(u, v, h0, float(model.sigma2[k]), z_k, float(problem.y0[k]))
            means.append(m_k)
            covs.append(c_k)
        n = model.state_size
        cov = np.zeros((n, n))
        for k in range(problem.dim):
            sl = slice(k * 5, (k + 1) * 5)
            cov[sl, sl] = covs[k]
        final = GaussState(t=state_last.t, mean=np.concatenate(means), cov=cov)
        segment[-1] = (pred_last, final, h_last)
        return segment
    # Diffuse arithmetic leaves round-off scale indefiniteness behind.
    return [(p, _clean_cov(s), h) for (p, s, h) in segment]


def initialize(problem: IvpProblem, config: SolverConfig, model: IwpModel) -> GaussState:
    """State the solve loop starts from (the last initialization knot).

    ``exact`` conditions a zero-mean prior on y(t0) = y0 and y'(t0) =
    f(t0, y0) with zero noise; unconditioned derivative slots keep prior
    variance sigma2 * h_init^(2(q-i)+1).  ``diffuse_filter`` instead runs
    q+1 noise-free observations inside [t0, t0 + h_init] from a
    large-variance prior.  ``rk_starter`` equals the diffuse start for
    q <= 3 and uses closed-form limit expressions for q = 4.
    """
    if config.q != model.q:
        raise ValueError(f"config.q = {config.q} but model.q = {model.q}")
    rng = np.random.default_rng(config.seed) if config.obs_strategy == "sampled" else None
    segment = _initial_segment(problem, config, model, rng)
    return segment[-1][1]


def _check_underflow(h: float, t: float, span: float):
    if h < 1e3 * _EPS * max(abs(t), span):
        raise StepSizeUnderflowError(f"step size {h} underflowed at t = {t}")


def solve(
    problem: IvpProblem,
    config: SolverConfig,
    model: IwpModel | None = None,
) -> SolveResult:
    """Solve the IVP, returning the filtered path and step diagnostics.

    Fixed-step mode walks the mesh t0 + n*h (last step clamped to T) and
    accepts every step; adaptive mode sizes steps from the local error test.
    Execution is deterministic: rerunning with identical inputs reproduces
    the result bit for bit, including the sampled observation strategy under
    a fixed seed.
    """
    if model is None:
        model = make_iwp(config.q, np.ones(problem.dim), problem.dim)
    if model.q != config.q:
        raise ValueError(f"config.q = {config.q} but model.q = {model.q}")
    if model.dim != problem.dim:
        raise ValueError(f"model dim {model.dim} != problem dim {problem.dim}")

    rng = np.random.default_rng(config.seed) if config.obs_strategy == "sampled" else None
    nfev_start = problem.nfev
    span = problem.T - problem.t0

    path = SolutionPath(model=model)
    for pred, filt, h_in in _initial_segment(problem, config, model, rng):
        path.append(pred, filt, h_in, model.sigma2 if h_in is not None else None)

    state = path.filtered[-1]
    t = state.t
    deriv_obs = ObservationModel(derivative_index=1, noise=0.0)
    fixed = config.fixed_step is not None
    h = config.fixed_step if fixed else config.resolve_h_init(problem)

    reports: list[StepReport] = []
    sigma2_trace: list[np.ndarray] = []
    resid_sq_sum = np.zeros(problem.dim)
    n_accepted = 0
    n_rejected = 0
    attempts = 0
    consecutive_rejections = 0
    current_sigma2 = model.sigma2.copy()

    t_end = problem.T
    while t < t_end - _EPS * max(abs(t_end), 1.0):
        attempts += 1
        if attempts > config.max_steps:
            raise RuntimeError(
                f"exceeded max_steps = {config.max_steps}; tolerance or "
                "controller settings force an unreasonably fine mesh"
            )
        _check_underflow(h, t, span)
        if t + h >= t_end:
            h = t_end - t  # clamp the final step onto T
        t_next = t + h

        base = _unit_transition(model, h)
        q1 = model.block_size
        a_full = base.A if model.dim == 1 else np.kron(np.eye(model.dim), base.A)
        pred_mean = a_full @ state.mean
        if config.obs_strategy == "sampled":
            # The draw needs the predictive variance; size it with the most
            # recently accepted diffusion estimate.
            pred_state = predict(state, _scaled_blocks(base, current_sigma2))
            z = observe(problem, pred_state, t_next, "sampled", rng=rng)
        else:
            z = problem.eval_rhs(t_next, pred_mean[0::q1])

        if not np.all(np.isfinite(z)):
            n_rejected += 1
            reports.append(
                StepReport(t=t, h=h, sigma2_hat=np.full(problem.dim, np.nan),
                           D=np.full(problem.dim, np.inf), accepted=False, h_next=h / 2)
            )
            h = h / 2.0
            continue

        residual = z - pred_mean[1::q1]
        qbar11 = base.Q[1, 1]
        sigma2_local = estimate_sigma2(residual, qbar11)
        sigma2_step = sigma2_local if config.sigma_mode == "local_ml" else model.sigma2

        if not fixed:
            y_now = pred_mean[0::q1]
            D, accepted = local_error_test(sigma2_local, base.Q, y_now, config, h)
            if not accepted and consecutive_rejections >= config.max_rejections:
                # The residual no longer shrinks with h once the state's
                # derivative slots are inconsistent with the vector field;
                # only an update can repair that, so force the step through.
                accepted = True
            ebar = config.eps * h / (1.0 if config.per_unit_step else h)
            h_next = next_step_size(float(np.max(D)), ebar, h, model.q, config)
            reports.append(
                StepReport(t=t, h=h, sigma2_hat=sigma2_local, D=D,
                           accepted=accepted, h_next=h_next)
            )
            if not accepted:
                n_rejected += 1
                consecutive_rejections += 1
                h = h_next
                continue
            consecutive_rejections = 0
        else:
            D = np.sqrt(sigma2_local * qbar11)
            h_next = h
            reports.append(
                StepReport(t=t, h=h, sigma2_hat=sigma2_local, D=D,
                           accepted=True, h_next=h_next)
            )

        blocks = _scaled_blocks(base, sigma2_step)
        prediction = predict(state, blocks)
        state, _ = update(prediction, z, deriv_obs)
        path.append(prediction, state, h, sigma2_step)
        sigma2_trace.append(np.asarray(sigma2_step, dtype=float))
        resid_sq_sum += residual**2 / qbar11
        current_sigma2 = np.asarray(sigma2_step, dtype=float)
        n_accepted += 1
        t = t_next
        h = h_next

    result = SolveResult(
        path=path,
        sigma2_trace=(np.asarray(sigma2_trace)
                      if sigma2_trace else np.empty((0, problem.dim))),
        steps_accepted=n_accepted,
        steps_rejected=n_rejected,
        fevals=problem.nfev - nfev_start,
        per_step=reports,
    )
    if config.sigma_mode == "global_ml" and n_accepted > 0:
        _apply_global_sigma2(result, model, resid_sq_sum / n_accepted)
    return result


def _apply_global_sigma2(result: SolveResult, model: IwpModel, sigma2_global: np.ndarray):
    """Rescale the run's covariances to the whole-run diffusion estimate.

    Means are untouched: with a diffusion that is constant across the run,
    the Kalman gains do not depend on its value.
    """
    factors = sigma2_global / model.sigma2
    q1 = model.block_size
    scale = np.repeat(factors, q1)
    outer = np.sqrt(np.outer(scale, scale))

    path = result.path
    path.filtered = [
        GaussState(s.t, s.mean, s.cov * outer) for s in path.filtered
    ]
    path.predictions = [
        GaussState(s.t, s.mean, s.cov * outer) for s in path.predictions
    ]
    path.step_sigma2 = [sig * factors for sig in path.step_sigma2]
    path.smoothed = None
    result.sigma2_trace = result.sigma2_trace * factors
