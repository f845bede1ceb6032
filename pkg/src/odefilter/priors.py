"""Integrated-Wiener-process priors and their exact one-step discretizations.

The continuous-time model per ODE dimension is the linear SDE

    dX_t = F X_t dt + L dW_t,

where ``F`` is the (q+1)-dimensional upper shift matrix (no feedback from
higher derivatives into lower ones), ``L = e_q`` injects white noise of
intensity ``sigma2`` into the highest tracked derivative, and the state
stacks ``(y, y', ..., y^(q))``.  This is the q-times integrated Wiener
process.  Over a step ``h`` the state propagates exactly through the pair
``(A(h), Q(h))``, available here both in closed form and through the
matrix-fraction decomposition of a block matrix exponential; the two routes
cross-validate each other.

Multivariate problems use ``d`` independent copies of the scalar model that
share the mesh, so all matrices in this module are single-block
``(q+1) x (q+1)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb, factorial

import numpy as np

__all__ = [
    "IwpModel",
    "DiscreteTransition",
    "NordsieckScaling",
    "make_iwp",
    "discrete_transition",
    "transition_blocks",
    "rescale_nordsieck",
    "pascal_matrix",
]


@dataclass(frozen=True, eq=False)
class IwpModel:
    """q-times integrated Wiener process prior over a d-dimensional ODE.

    Attributes
    ----------
    q : int
        Number of integrations; the per-dimension state has q+1 entries.
    sigma2 : ndarray, shape (dim,)
        Diffusion intensity per ODE dimension.  Units are
        [y]^2 * time^-(2q+1).  Distinct entries give each dimension its
        own (anisotropic) diffusion scale.
    dim : int
        Number of ODE dimensions, each modeled as an independent block.
    """

    q: int
    sigma2: np.ndarray
    dim: int

    @property
    def block_size(self) -> int:
        return self.q + 1

    @property
    def state_size(self) -> int:
        return (self.q + 1) * self.dim

    def drift_matrix(self) -> np.ndarray:
        """Upper shift matrix F of a single block."""
        return np.eye(self.q + 1, k=1)

    def dispersion_vector(self) -> np.ndarray:
        """Unit vector L = e_q selecting the diffused state."""
        e = np.zeros(self.q + 1)
        e[self.q] = 1.0
        return e


@dataclass(frozen=True, eq=False)
class DiscreteTransition:
    """Exact discretization of one IWP block over a step ``h``.

    ``A`` is upper triangular with unit diagonal, ``Q`` is symmetric PSD and
    scales linearly in sigma2, and ``Phi12`` is the off-diagonal block of the
    matrix-fraction exponential satisfying ``Q = Phi12 @ A.T``.  ``Phi12`` is
    what the Nordsieck-form covariance update consumes.
    """

    h: float
    A: np.ndarray
    Q: np.ndarray
    Phi12: np.ndarray

    def scaled(self, factor: float) -> "DiscreteTransition":
        """Same transition with the diffusion rescaled by ``factor``.

        ``Q`` (and ``Phi12``) are linear in sigma2, so rescaling after the
        fact is exact.
        """
        if not np.isfinite(factor) or factor < 0:
            raise ValueError(f"diffusion scale must be finite and >= 0, got {factor}")
        return DiscreteTransition(self.h, self.A, factor * self.Q, factor * self.Phi12)


@dataclass(frozen=True, eq=False)
class NordsieckScaling:
    """Diagonal change of basis x -> B x with B = diag(h^i / i!).

    In the rescaled coordinates the state is the Nordsieck vector
    ``(y, h y', h^2 y''/2!, ...)`` and the transition matrix becomes the
    Pascal triangle matrix, independent of ``h``.
    """

    h: float
    B: np.ndarray

    @classmethod
    def for_order(cls, q: int, h: float) -> "NordsieckScaling":
        if h <= 0 or not np.isfinite(h):
            raise ValueError(f"step size must be positive and finite, got {h}")
        diag = np.array([h**i / factorial(i) for i in range(q + 1)])
        return cls(h=float(h), B=np.diag(diag))

    @property
    def inverse(self) -> np.ndarray:
        return np.diag(1.0 / np.diag(self.B))


def make_iwp(q: int, sigma2, dim: int | None = None) -> IwpModel:
    """Validate and build an IWP(q) prior.

    Parameters
    ----------
    q : int
        Derivative order, at least 1.
    sigma2 : float or sequence of float
        Diffusion intensity; a scalar is broadcast over all dimensions.
    dim : int, optional
        ODE dimension.  Defaults to ``len(sigma2)``.
    """
    if not isinstance(q, (int, np.integer)) or isinstance(q, bool):
        raise TypeError(f"q must be an integer, got {type(q).__name__}")
    if q < 1:
        raise ValueError(f"q must be >= 1, got {q}")
    sig = np.atleast_1d(np.asarray(sigma2, dtype=float)).copy()
    if sig.ndim != 1:
        raise ValueError("sigma2 must be a scalar or a one-dimensional sequence")
    if dim is None:
        dim = sig.size
    if not isinstance(dim, (int, np.integer)) or dim < 1:
        raise ValueError(f"dim must be a positive integer, got {dim}")
    dim = int(dim)
    if sig.size == 1 and dim > 1:
        sig = np.full(dim, sig[0])
    if sig.size != dim:
        raise ValueError(f"sigma2 has {sig.size} entries but dim = {dim}")
    if not np.all(np.isfinite(sig)) or np.any(sig <= 0):
        raise ValueError("all sigma2 entries must be strictly positive and finite")
    sig.setflags(write=False)
    return IwpModel(q=int(q), sigma2=sig, dim=dim)


def pascal_matrix(q: int) -> np.ndarray:
    """Upper triangular Pascal matrix with entries binom(j, i) for i <= j."""
    P = np.zeros((q + 1, q + 1))
    for i in range(q + 1):
        for j in range(i, q + 1):
            P[i, j] = comb(j, i)
    return P


def _closed_form_a(q: int, h: float) -> np.ndarray:
    A = np.zeros((q + 1, q + 1))
    for i in range(q + 1):
        for j in range(i, q + 1):
            A[i, j] = h ** (j - i) / factorial(j - i)
    return A


def _closed_form_q(q: int, h: float, sigma2: float) -> np.ndarray:
    Q = np.zeros((q + 1, q + 1))
    for i in range(q + 1):
        for j in range(q + 1):
            p = 2 * q + 1 - i - j
            Q[i, j] = sigma2 * h**p / (p * factorial(q - i) * factorial(q - j))
    return Q


def _expm_taylor(M: np.ndarray, tol: float = 1e-13) -> np.ndarray:
    """Matrix exponential by scaling-and-squaring with a truncated series.

    Verification-oracle accuracy (relative ~tol); not built for speed.
    """
    n = M.shape[0]
    norm = np.linalg.norm(M, 1)
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    T = M / (2.0**s)
    out = np.eye(n)
    term = np.eye(n)
    for k in range(1, 60):
        term = term @ T / k
        out = out + term
        if np.linalg.norm(term, 1) <= tol * np.linalg.norm(out, 1):
            break
    for _ in range(s):
        out = out @ out
    return out


def _symmetrize(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def discrete_transition(
    model: IwpModel,
    h: float,
    method: str = "closed_form",
    *,
    sigma2: float | None = None,
) -> DiscreteTransition:
    """Single-block transition pair (A(h), Q(h)) for the given model.

    ``method="closed_form"`` evaluates the analytic expressions
    ``A_ij = 1{i<=j} h^(j-i)/(j-i)!`` and
    ``Q_ij = sigma2 h^(2q+1-i-j) / ((2q+1-i-j)(q-i)!(q-j)!)``.
    ``method="matrix_fraction"`` instead exponentiates the block matrix
    ``[[F, sigma2 L L^T], [0, -F^T]] * h`` and forms ``Q = Phi12 @ A.T``;
    it serves as an independent check of the closed form.

    Parameters
    ----------
    sigma2 : float, optional
        Override the model's diffusion intensity (e.g. 1.0 for a normalized
        matrix).  Required when the model is anisotropic, since a single
        block cannot represent several diffusion scales; use
        :func:`transition_blocks` or :meth:`DiscreteTransition.scaled` then.
    """
    if not np.isfinite(h):
        raise ValueError(f"step size must be finite, got {h}")
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    if sigma2 is None:
        if np.ptp(model.sigma2) != 0.0:
            raise ValueError(
                "model has anisotropic sigma2; pass sigma2=... explicitly or "
                "use transition_blocks()"
            )
        sigma2 = float(model.sigma2[0])
    q = model.q
    if method == "closed_form":
        A = _closed_form_a(q, h)
        Q = _closed_form_q(q, h, sigma2)
        # Phi12 = Q A(h)^-T and A(h)^-1 = A(-h) by the semigroup property.
        Phi12 = Q @ _closed_form_a(q, -h).T
    elif method == "matrix_fraction":
        F = model.drift_matrix()
        L = model.dispersion_vector()
        n = q + 1
        blk = np.zeros((2 * n, 2 * n))
        blk[:n, :n] = F
        blk[:n, n:] = sigma2 * np.outer(L, L)
        blk[n:, n:] = -F.T
        Phi = _expm_taylor(blk * h)
        A = Phi[:n, :n]
        Phi12 = Phi[:n, n:]
        Q = _symmetrize(Phi12 @ A.T)
    else:
        raise ValueError(f"unknown method {method!r}; use 'closed_form' or 'matrix_fraction'")
    return DiscreteTransition(h=float(h), A=A, Q=Q, Phi12=Phi12)


def transition_blocks(
    model: IwpModel, h: float, method: str = "closed_form"
) -> tuple[DiscreteTransition, ...]:
    """Per-dimension transitions of an anisotropic model (shared A, scaled Q)."""
    base = discrete_transition(model, h, method, sigma2=1.0)
    return tuple(base.scaled(float(s)) for s in model.sigma2)


def rescale_nordsieck(transition: DiscreteTransition, q: int, h: float) -> DiscreteTransition:
    """Transition pair in Nordsieck coordinates.

    The rescaled matrix ``B A(h) B^-1`` is the Pascal triangle matrix and
    ``(B Q B^T)_ij = sigma2 h^(2q+1) / ((2q+1-i-j)(q-i)!(q-j)! i! j!)``.
    """
    if transition.A.shape != (q + 1, q + 1):
        raise ValueError("transition block size does not match q")
    if not np.isclose(h, transition.h, rtol=1e-12, atol=0.0):
        raise ValueError(f"transition was built for h={transition.h}, not h={h}")
    scaling = NordsieckScaling.for_order(q, h)
    B, Binv = scaling.B, scaling.inverse
    return DiscreteTransition(
        h=transition.h,
        A=B @ transition.A @ Binv,
        Q=B @ transition.Q @ B.T,
        Phi12=B @ transition.Phi12 @ B.T,
    )
