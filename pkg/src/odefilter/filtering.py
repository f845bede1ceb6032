"""Kalman prediction/update, RTS smoothing, posterior sampling, dense output.

States stack ``d`` independent blocks of ``q+1`` entries each, one block per
ODE dimension, laid out contiguously: ``(y_k, y_k', ..., y_k^(q))`` for
dimension ``k``.  Covariances are stored as full matrices of that order and
stay block-diagonal under every operation here.

Update uses the Joseph form internally, which stays PSD even with exact
(zero-noise) observations; the plain form is kept for cross-checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .priors import DiscreteTransition, IwpModel, discrete_transition

__all__ = [
    "GaussState",
    "ObservationModel",
    "SolutionPath",
    "SingularUpdateError",
    "predict",
    "update",
    "smooth",
    "sample_posterior",
    "interpolate",
]

_EPS = float(np.finfo(float).eps)


class SingularUpdateError(ValueError):
    """Observation would divide by a vanishing innovation variance."""


@dataclass(frozen=True, eq=False)
class GaussState:
    """Gaussian state at one time point: mean vector and covariance matrix."""

    t: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"cov shape {cov.shape} does not match mean size {mean.size}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


@dataclass(frozen=True)
class ObservationModel:
    """Scalar observation of one derivative per dimension.

    ``derivative_index`` selects which state slot is observed (0 for the
    solution itself, 1 for its derivative); ``noise`` is the observation
    variance R^2, zero by default for exact conditioning.  No selection rule
    for a nonzero R^2 is built in; it is exposed as a plain knob.
    """

    derivative_index: int = 1
    noise: float = 0.0

    def __post_init__(self):
        if self.derivative_index < 0:
            raise ValueError("derivative_index must be >= 0")
        if not np.isfinite(self.noise) or self.noise < 0:
            raise ValueError(f"noise must be finite and >= 0, got {self.noise}")


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def _as_blocks(transition, d: int) -> list[DiscreteTransition]:
    if isinstance(transition, DiscreteTransition):
        return [transition] * d
    blocks = list(transition)
    if len(blocks) != d:
        raise ValueError(f"expected {d} per-dimension transitions, got {len(blocks)}")
    return blocks


def _infer_layout(state: GaussState, block: int) -> int:
    n = state.mean.size
    if n % block != 0:
        raise ValueError(f"state of size {n} is not a stack of blocks of size {block}")
    return n // block


def predict(state: GaussState, transition) -> GaussState:
    """Propagate a state through one step: m -> A m, C -> A C A^T + Q.

    ``transition`` is a single block applied to every dimension, or a
    sequence with one (sigma2-scaled) block per dimension.  The output
    covariance is re-symmetrized.
    """
    block = (
        transition.A.shape[0]
        if isinstance(transition, DiscreteTransition)
        else transition[0].A.shape[0]
    )
    d = _infer_layout(state, block)
    blocks = _as_blocks(transition, d)
    A = blocks[0].A
    A_full = np.kron(np.eye(d), A) if d > 1 else A
    Q_full = np.zeros((d * block, d * block))
    for k, tr in enumerate(blocks):
        if tr.A.shape != (block, block):
            raise ValueError("mixed block sizes in transition sequence")
        sl = slice(k * block, (k + 1) * block)
        Q_full[sl, sl] = tr.Q
    mean = A_full @ state.mean
    cov = _symmetrize(A_full @ state.cov @ A_full.T + Q_full)
    return GaussState(t=state.t + blocks[0].h, mean=mean, cov=cov)


def update(
    state: GaussState,
    z,
    obs: ObservationModel,
    form: str = "joseph",
) -> tuple[GaussState, np.ndarray]:
    """Condition a predicted state on one observed derivative per dimension.

    Returns the updated state and the pre-update residual ``z - H m``.
    With zero observation noise the updated state satisfies ``H m = z``
    exactly and ``H C H^T = 0`` to round-off.

    A dimension whose innovation variance is at round-off scale carries no
    new information (that slot is already exactly known) and is skipped
    rather than divided by ~0.  A negative innovation variance means the
    covariance was invalid and raises :class:`SingularUpdateError`.
    """
    if form not in ("joseph", "plain"):
        raise ValueError(f"unknown update form {form!r}")
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = z.size
    n = state.mean.size
    if n % d != 0:
        raise ValueError(f"observation of size {d} does not match state of size {n}")
    block = n // d
    i = obs.derivative_index
    if i >= block:
        raise ValueError(f"derivative_index {i} outside state order {block - 1}")
    r2 = obs.noise

    mean = state.mean.copy()
    cov = state.cov.copy()
    residual = np.empty(d)
    for k in range(d):
        idx = k * block + i
        residual[k] = z[k] - state.mean[idx]
        s = cov[idx, idx] + r2
        sl = slice(k * block, (k + 1) * block)
        scale = max(1.0, float(np.max(np.abs(np.diag(cov[sl, sl])))))
        if s < -_EPS * scale:
            raise SingularUpdateError(
                f"negative innovation variance {s} in dimension {k}"
            )
        if s <= _EPS * scale:
            # Degenerate: the observed slot is already exactly determined.
            continue
        gain = cov[:, idx] / s
        mean = mean + gain * (z[k] - mean[idx])
        if form == "joseph":
            # (I - K H) C (I - K H)^T + R^2 K K^T, one rank-1 factor at a time.
            c1 = cov - np.outer(gain, cov[idx, :])
            cov = c1 - np.outer(c1[:, idx], gain)
            if r2 > 0:
                cov = cov + r2 * np.outer(gain, gain)
        else:
            cov = cov - np.outer(gain, gain) * s
        cov = _symmetrize(cov)
    return GaussState(t=state.t, mean=mean, cov=cov), residual


@dataclass(eq=False)
class SolutionPath:
    """Filtered (and optionally smoothed) states over an increasing mesh.

    The path is append-only while filtering and written once by smoothing.
    Per-interval step sizes and diffusion scales are stored instead of the
    full transition matrices; transitions are rebuilt on demand, which keeps
    long paths compact.
    """

    model: IwpModel
    knots: list[float] = field(default_factory=list)
    filtered: list[GaussState] = field(default_factory=list)
    predictions: list[GaussState] = field(default_factory=list)
    step_sizes: list[float] = field(default_factory=list)
    step_sigma2: list[np.ndarray] = field(default_factory=list)
    smoothed: list[GaussState] | None = None

    def __len__(self) -> int:
        return len(self.knots)

    def append(self, prediction: GaussState, filtered: GaussState, h: float | None, sigma2=None):
        """Add one knot.  ``h``/``sigma2`` describe the incoming interval
        and are omitted for the first knot."""
        if self.knots:
            if h is None:
                raise ValueError("interior knots need the incoming step size")
            t_prev = self.knots[-1]
            if filtered.t <= t_prev:
                raise ValueError(f"knots must increase: {filtered.t} after {t_prev}")
            self.step_sizes.append(float(h))
            self.step_sigma2.append(np.atleast_1d(np.asarray(sigma2, dtype=float)))
        self.knots.append(float(filtered.t))
        self.predictions.append(prediction)
        self.filtered.append(filtered)

    def transitions_at(self, i: int) -> tuple[DiscreteTransition, ...]:
        """Per-dimension transitions of interval ``i`` (knots[i] -> knots[i+1])."""
        base = discrete_transition(self.model, self.step_sizes[i], sigma2=1.0)
        return tuple(base.scaled(float(s)) for s in self.step_sigma2[i])

    @property
    def transitions(self) -> list[tuple[DiscreteTransition, ...]]:
        return [self.transitions_at(i) for i in range(len(self.step_sizes))]


def _full_transition_matrix(path: SolutionPath, i: int) -> np.ndarray:
    A = discrete_transition(path.model, path.step_sizes[i], sigma2=1.0).A
    if path.model.dim == 1:
        return A
    return np.kron(np.eye(path.model.dim), A)


def _smoother_gain(c_filt: np.ndarray, a_full: np.ndarray, c_pred_next: np.ndarray) -> np.ndarray:
    # pinv handles exactly-known (rank-deficient) slots: no information, zero gain.
    return c_filt @ a_full.T @ np.linalg.pinv(c_pred_next, hermitian=True)


def smooth(path: SolutionPath) -> SolutionPath:
    """Backward RTS pass filling ``path.smoothed``; idempotent, linear cost.

    Needs no new right-hand-side evaluations.  The last knot's smoothed state
    equals its filtered state exactly.
    """
    if not path.knots:
        raise ValueError("cannot smooth an empty path")
    if path.smoothed is not None:
        return path
    n = len(path.knots)
    out: list[GaussState | None] = [None] * n
    out[-1] = path.filtered[-1]
    for i in range(n - 2, -1, -1):
        a_full = _full_transition_matrix(path, i)
        filt = path.filtered[i]
        pred_next = path.predictions[i + 1]
        nxt = out[i + 1]
        G = _smoother_gain(filt.cov, a_full, pred_next.cov)
        mean = filt.mean + G @ (nxt.mean - pred_next.mean)
        cov = _symmetrize(filt.cov + G @ (nxt.cov - pred_next.cov) @ G.T)
        out[i] = GaussState(t=filt.t, mean=mean, cov=cov)
    path.smoothed = out  # type: ignore[assignment]
    return path


def _draw_gaussian(rng: np.random.Generator, mean: np.ndarray, cov: np.ndarray, count: int) -> np.ndarray:
    """Draw ``count`` samples of N(mean, cov); tolerates rank-deficient cov."""
    w, V = np.linalg.eigh(_symmetrize(cov))
    w = np.clip(w, 0.0, None)
    root = V * np.sqrt(w)
    return mean + rng.standard_normal((count, mean.size)) @ root.T


def sample_posterior(path: SolutionPath, seed: int, count: int) -> np.ndarray:
    """Joint posterior trajectories over the knots by backward sampling.

    Deterministic for a fixed seed.  Returns an array of shape
    ``(count, n_knots, state_size)``.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if path.smoothed is None:
        raise ValueError("smooth the path before sampling")
    rng = np.random.default_rng(seed)
    n = len(path.knots)
    out = np.empty((count, n, path.model.state_size))
    last = path.smoothed[-1]
    out[:, -1, :] = _draw_gaussian(rng, last.mean, last.cov, count)
    for i in range(n - 2, -1, -1):
        a_full = _full_transition_matrix(path, i)
        filt = path.filtered[i]
        pred_next = path.predictions[i + 1]
        G = _smoother_gain(filt.cov, a_full, pred_next.cov)
        cond_mean = filt.mean + (out[:, i + 1, :] - pred_next.mean) @ G.T
        cond_cov = _symmetrize(filt.cov - G @ pred_next.cov @ G.T)
        out[:, i, :] = cond_mean + _draw_gaussian(rng, np.zeros(filt.mean.size), cond_cov, count)
    return out


def interpolate(path: SolutionPath, t: float, allow_extrapolation: bool = False) -> GaussState:
    """Smoothed posterior at an arbitrary time, on or off the mesh.

    At a knot this returns the stored smoothed state.  Inside an interval it
    conditions the prior bridge on the filtered state at the left knot and
    the smoothed state at the right knot, so the result agrees with the knot
    states in the limits and is continuous in ``t``.  Times outside the
    solved span raise unless ``allow_extrapolation`` is set, in which case
    the state is predicted forward from the last knot.
    """
    if not path.knots:
        raise ValueError("cannot interpolate an empty path")
    smooth(path)
    knots = np.asarray(path.knots)
    t = float(t)
    tol = 4.0 * _EPS * max(1.0, abs(t))
    hit = np.nonzero(np.abs(knots - t) <= tol)[0]
    if hit.size:
        return path.smoothed[int(hit[0])]
    if t < knots[0]:
        raise ValueError(f"t={t} precedes the first knot {knots[0]}")
    if t > knots[-1]:
        if not allow_extrapolation:
            raise ValueError(
                f"t={t} is past the last knot {knots[-1]}; "
                "pass allow_extrapolation=True to predict forward"
            )
        delta = t - knots[-1]
        base = discrete_transition(path.model, delta, sigma2=1.0)
        sig = path.step_sigma2[-1] if path.step_sigma2 else path.model.sigma2
        return predict(path.smoothed[-1], [base.scaled(float(s)) for s in sig])

    i = int(np.searchsorted(knots, t)) - 1
    delta = t - knots[i]
    remainder = knots[i + 1] - t
    sig = path.step_sigma2[i]
    fwd = discrete_transition(path.model, delta, sigma2=1.0)
    pred_t = predict(path.filtered[i], [fwd.scaled(float(s)) for s in sig])
    back = discrete_transition(path.model, remainder, sigma2=1.0)
    a_back = back.A if path.model.dim == 1 else np.kron(np.eye(path.model.dim), back.A)
    pred_next = path.predictions[i + 1]
    nxt = path.smoothed[i + 1]
    G = pred_t.cov @ a_back.T @ np.linalg.pinv(pred_next.cov, hermitian=True)
    mean = pred_t.mean + G @ (nxt.mean - pred_next.mean)
    cov = _symmetrize(pred_t.cov + G @ (nxt.cov - pred_next.cov) @ G.T)
    return GaussState(t=t, mean=mean, cov=cov)
