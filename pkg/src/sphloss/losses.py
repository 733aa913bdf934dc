"""Normalizing functions and classification losses built on (s, q, o_c).

Every loss here returns both its value and an exact analytic gradient with
respect to the pre-activations o.  The losses that depend on o only through
the summary statistics s = sum(o), q = ||o||^2 and the target coordinate o_c
additionally expose the partial derivatives (dL/ds, dL/dq, dL/do_c), which is
what makes output-size-independent weight updates possible (see
``sphloss.fast_output``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

# Library default for the spherical softmax stabilizer. Same order of
# magnitude as a carefully tuned value on a real task (~0.02); callers that
# care should tune it.
DEFAULT_EPS = 1e-2

Partials = Tuple[float, float, float]


@dataclass(frozen=True)
class SphericalStats:
    """Sufficient statistics of a pre-activation vector for spherical losses."""

    s: float
    q: float
    o_c: float
    y_c: float = 1.0


@dataclass(frozen=True)
class LossGrad:
    """A loss value with its dense gradient and, when the loss belongs to
    the spherical family, the (dL/ds, dL/dq, dL/do_c) partials."""

    loss: float
    grad_o: np.ndarray
    partials: Optional[Partials] = None


@dataclass(frozen=True)
class QuadraticNormalizerParams:
    """Coefficients of the per-coordinate polynomial a1 + a2*x + a3*x^2.

    The polynomial must be strictly positive, i.e. a3 > 0 and
    4*a1*a3 - a2^2 > 0.  Semi-definite parameter sets (such as the pure
    spherical softmax a1=a2=0) are only reachable through
    ``unchecked=True``.
    """

    a1: float
    a2: float
    a3: float
    unchecked: bool = False

    def __post_init__(self):
        if self.unchecked:
            return
        if not (self.a3 > 0 and 4.0 * self.a1 * self.a3 - self.a2 ** 2 > 0):
            raise ValueError(
                "polynomial a1 + a2*x + a3*x^2 is not strictly positive: "
                f"a1={self.a1}, a2={self.a2}, a3={self.a3}"
            )


def _as_logits(o) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    if o.ndim != 1:
        raise ValueError(f"expected a 1-D pre-activation vector, got shape {o.shape}")
    if o.shape[0] < 2:
        raise ValueError("need at least 2 classes")
    if not np.all(np.isfinite(o)):
        raise ValueError("pre-activations must be finite")
    return o


def _check_target(o: np.ndarray, c: int) -> int:
    c = int(c)
    if not 0 <= c < o.shape[0]:
        raise ValueError(f"target index {c} out of range for {o.shape[0]} classes")
    return c


def summary_stats(o, c: int, y_c: float = 1.0) -> SphericalStats:
    """Compute (s, q, o_c) for a pre-activation vector and target index."""
    o = _as_logits(o)
    c = _check_target(o, c)
    return SphericalStats(s=float(o.sum()), q=float(o @ o), o_c=float(o[c]), y_c=y_c)


def softmax(o) -> np.ndarray:
    """Max-shifted softmax."""
    o = _as_logits(o)
    z = o - o.max()
    e = np.exp(z)
    return e / e.sum()


def logsumexp(o: np.ndarray) -> float:
    m = o.max()
    return float(m + np.log(np.exp(o - m).sum()))


def log_softmax_loss(o, c: int) -> LossGrad:
    """Categorical cross-entropy baseline: -log softmax(o)_c.

    Not a member of the spherical family, so no partials are returned.
    """
    o = _as_logits(o)
    c = _check_target(o, c)
    p = softmax(o)
    loss = logsumexp(o) - o[c]
    grad = p.copy()
    grad[c] -= 1.0
    return LossGrad(loss=float(loss), grad_o=grad)


def log_softmax_abs_loss(o, c: int) -> LossGrad:
    """log-softmax applied to |o|; subgradient 0 is used at o_i = 0."""
    o = _as_logits(o)
    c = _check_target(o, c)
    inner = log_softmax_loss(np.abs(o), c)
    grad = inner.grad_o * np.sign(o)
    return LossGrad(loss=inner.loss, grad_o=grad)


def mse_loss(o, c: int, y_c: float = 1.0) -> LossGrad:
    """Squared error against the one-hot (scaled by y_c) target.

    In family form: q - 2*o_c*y_c + y_c^2, with partials (0, 1, -2*y_c).
    """
    o = _as_logits(o)
    c = _check_target(o, c)
    st = summary_stats(o, c, y_c)
    loss = st.q - 2.0 * st.o_c * y_c + y_c ** 2
    grad = 2.0 * o
    grad[c] -= 2.0 * y_c
    return LossGrad(loss=float(loss), grad_o=grad, partials=(0.0, 1.0, -2.0 * y_c))


def quadratic_normalizer(o, p: QuadraticNormalizerParams) -> np.ndarray:
    """Normalizer with per-coordinate numerator a1 + a2*o_k + a3*o_k^2."""
    o = _as_logits(o)
    num = p.a1 + p.a2 * o + p.a3 * o * o
    den = num.sum()
    if den <= 0 or np.any(num < 0):
        raise ValueError("quadratic normalizer produced non-positive numerators")
    return num / den


def spherical_softmax(o, eps: float = DEFAULT_EPS) -> np.ndarray:
    """(o_k^2 + eps) / sum_i (o_i^2 + eps) with eps > 0."""
    if not eps > 0:
        raise ValueError("eps must be > 0; use spherical_softmax_unchecked for eps=0")
    return spherical_softmax_unchecked(o, eps)


def spherical_softmax_unchecked(o, eps: float) -> np.ndarray:
    """Same as :func:`spherical_softmax` but admits eps = 0 (q > 0 required).

    Exists so the eps=0 scale-invariance and evenness properties can be
    exercised; 0/0 at o = 0 is still rejected.
    """
    o = _as_logits(o)
    num = o * o + eps
    den = num.sum()
    if den == 0.0:
        raise ValueError("eps=0 with a zero vector is undefined (0/0)")
    return num / den


def log_spherical_softmax_loss(o, c: int, eps: float = DEFAULT_EPS) -> LossGrad:
    """-log spherical_softmax(o)_c with exact gradient.

    dL/do_c = 2*o_c/(q + D*eps) - 2*o_c/(o_c^2 + eps)
    dL/do_k = 2*o_k/(q + D*eps)   for k != c
    """
    if not eps > 0:
        raise ValueError("eps must be > 0")
    o = _as_logits(o)
    c = _check_target(o, c)
    D = o.shape[0]
    q = float(o @ o)
    den = q + D * eps
    num_c = o[c] ** 2 + eps
    loss = np.log(den) - np.log(num_c)
    grad = 2.0 * o / den
    grad[c] -= 2.0 * o[c] / num_c
    partials = (0.0, 1.0 / den, -2.0 * float(o[c]) / num_c)
    return LossGrad(loss=float(loss), grad_o=grad, partials=partials)


def taylor_softmax(o) -> np.ndarray:
    """Normalizer from the second-order expansion of exp around zero.

    Numerators 1 + o_k + o_k^2/2 are bounded below by 0.5, so no
    stabilizer is needed.
    """
    o = _as_logits(o)
    num = 1.0 + o + 0.5 * o * o
    return num / num.sum()


def log_taylor_softmax_loss(o, c: int) -> LossGrad:
    """-log taylor_softmax(o)_c with exact gradient.

    With Z = D + s + q/2:
    dL/do_c = (1+o_c)/Z - (1+o_c)/(1+o_c+o_c^2/2)
    dL/do_k = (1+o_k)/Z   for k != c
    """
    o = _as_logits(o)
    c = _check_target(o, c)
    D = o.shape[0]
    s = float(o.sum())
    q = float(o @ o)
    Z = D + s + 0.5 * q
    num_c = 1.0 + o[c] + 0.5 * o[c] ** 2
    loss = np.log(Z) - np.log(num_c)
    grad = (1.0 + o) / Z
    grad[c] -= (1.0 + o[c]) / num_c
    # target-coordinate split: the (1+o_c)/Z part lives in the s/q partials
    partials = (1.0 / Z, 0.5 / Z, -(1.0 + float(o[c])) / num_c)
    return LossGrad(loss=float(loss), grad_o=grad, partials=partials)


def grad_from_partials(partials: Partials, o, c: int) -> np.ndarray:
    """Reconstruct the dense gradient (dL/ds)*1 + 2*(dL/dq)*o + (dL/do_c)*e_c."""
    o = _as_logits(o)
    c = _check_target(o, c)
    a, bq, g = partials
    grad = np.full_like(o, a) + 2.0 * bq * o
    grad[c] += g
    return grad


def finite_diff_grad(
    loss_fn: Callable[[np.ndarray], float], o, c: int, step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient oracle: (L(o+h*e_i) - L(o-h*e_i)) / 2h.

    ``loss_fn`` maps a pre-activation vector to a scalar; ``c`` is passed
    for interface symmetry with the losses but the closure may ignore it.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    o = _as_logits(o)
    grad = np.empty_like(o)
    for i in range(o.shape[0]):
        op = o.copy()
        om = o.copy()
        op[i] += step
        om[i] -= step
        grad[i] = (loss_fn(op) - loss_fn(om)) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Vectorized batch forms used by the trainer. Same math as the per-example
# contract functions above, over an (n, D) matrix of pre-activations.
# ---------------------------------------------------------------------------

LOSS_KINDS = (
    "log_softmax",
    "log_softmax_abs",
    "mse",
    "log_spherical",
    "log_taylor",
    "spherical_bound_fixed",
    "spherical_bound_optimized",
)


def _batch_check(O: np.ndarray, y: np.ndarray):
    O = np.asarray(O, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if O.ndim != 2 or y.ndim != 1 or O.shape[0] != y.shape[0]:
        raise ValueError("O must be (n, D) and y (n,)")
    return O, y


def batch_log_softmax(O: np.ndarray) -> np.ndarray:
    Z = O - O.max(axis=1, keepdims=True)
    return Z - np.log(np.exp(Z).sum(axis=1, keepdims=True))


def batch_loss_grad(kind: str, O, y, *, eps: float = DEFAULT_EPS, xi: float = 1.0):
    """Per-example losses and the dense gradient matrix for a batch.

    Returns (losses (n,), grad (n, D)). The two bound kinds are handled in
    ``sphloss.bound`` and dispatched from here to keep a single entry point.
    """
    O, y = _batch_check(O, y)
    n, D = O.shape
    rows = np.arange(n)
    if kind == "log_softmax":
        logp = batch_log_softmax(O)
        losses = -logp[rows, y]
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return losses, grad
    if kind == "log_softmax_abs":
        A = np.abs(O)
        logp = batch_log_softmax(A)
        losses = -logp[rows, y]
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        grad *= np.sign(O)
        return losses, grad
    if kind == "mse":
        q = (O * O).sum(axis=1)
        oc = O[rows, y]
        losses = q - 2.0 * oc + 1.0
        grad = 2.0 * O
        grad[rows, y] -= 2.0
        return losses, grad
    if kind == "log_spherical":
        if not eps > 0:
            raise ValueError("eps must be > 0")
        q = (O * O).sum(axis=1)
        den = q + D * eps
        oc = O[rows, y]
        numc = oc * oc + eps
        losses = np.log(den) - np.log(numc)
        grad = 2.0 * O / den[:, None]
        grad[rows, y] -= 2.0 * oc / numc
        return losses, grad
    if kind == "log_taylor":
        num = 1.0 + O + 0.5 * O * O
        Z = num.sum(axis=1)
        numc = num[rows, y]
        losses = np.log(Z) - np.log(numc)
        grad = (1.0 + O) / Z[:, None]
        grad[rows, y] -= (1.0 + O[rows, y]) / numc
        return losses, grad
    if kind in ("spherical_bound_fixed", "spherical_bound_optimized"):
        from . import bound

        return bound.batch_bound_loss_grad(
            O, y, xi=xi, optimize=(kind == "spherical_bound_optimized")
        )
    raise ValueError(f"unknown loss kind: {kind!r}")


def batch_partials(kind: str, O, y, *, eps: float = DEFAULT_EPS, xi: float = 1.0):
    """(dL/ds, dL/dq, dL/do_c) per example, for losses in the spherical family.

    Returns three (n,) arrays. Raises for the two non-spherical kinds.
    """
    O, y = _batch_check(O, y)
    n, D = O.shape
    rows = np.arange(n)
    if kind == "mse":
        zeros = np.zeros(n)
        return zeros, np.ones(n), np.full(n, -2.0)
    if kind == "log_spherical":
        q = (O * O).sum(axis=1)
        den = q + D * eps
        oc = O[rows, y]
        return np.zeros(n), 1.0 / den, -2.0 * oc / (oc * oc + eps)
    if kind == "log_taylor":
        s = O.sum(axis=1)
        q = (O * O).sum(axis=1)
        Z = D + s + 0.5 * q
        oc = O[rows, y]
        return 1.0 / Z, 0.5 / Z, -(1.0 + oc) / (1.0 + oc + 0.5 * oc * oc)
    if kind in ("spherical_bound_fixed", "spherical_bound_optimized"):
        from . import bound

        s = O.sum(axis=1)
        q = (O * O).sum(axis=1)
        return bound.batch_bound_partials(
            s, q, D, xi=xi, optimize=(kind == "spherical_bound_optimized")
        )
    raise ValueError(f"loss kind {kind!r} is not in the spherical family")


def batch_scores(kind: str, O, *, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Monotone class scores used for argmax / top-k evaluation."""
    O = np.asarray(O, dtype=np.float64)
    if kind in ("log_softmax", "mse", "spherical_bound_fixed", "spherical_bound_optimized"):
        return O
    if kind == "log_softmax_abs":
        return np.abs(O)
    if kind == "log_spherical":
        return O * O
    if kind == "log_taylor":
        return 1.0 + O + 0.5 * O * O
    raise ValueError(f"unknown loss kind: {kind!r}")


def batch_negll(kind: str, O, y, *, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Per-example negative log-likelihood under the loss's own normalizer.

    MSE reports the squared error itself (its "loss" column convention);
    the bound losses report the true log-softmax negll since they model a
    softmax output.
    """
    O, y = _batch_check(O, y)
    if kind == "mse":
        losses, _ = batch_loss_grad("mse", O, y)
        return losses
    if kind in ("spherical_bound_fixed", "spherical_bound_optimized"):
        kind = "log_softmax"
    losses, _ = batch_loss_grad(kind, O, y, eps=eps)
    return losses
