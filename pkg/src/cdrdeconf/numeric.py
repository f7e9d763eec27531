"""Dense numeric kernels: ridge solve, k-means, small MLPs, Adam and a
finite-difference gradient checker.

Everything here works on plain ``numpy`` arrays. Trainable models elsewhere in
the package keep their parameters in ``dict[str, np.ndarray]`` so that
:func:`adam_step` and :func:`grad_check` can update / perturb them in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.special

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


class ShapeError(ValueError):
    """Operand shapes do not line up."""


class SingularDesignError(np.linalg.LinAlgError):
    """Normal equations are singular and no regularisation was requested."""


class NonFiniteError(FloatingPointError):
    """A loss or kernel output contained NaN or Inf."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    return scipy.special.expit(np.asarray(x, dtype=np.float64))


def scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """``out[k] = sum of values[r] over rows r with index[r] == k``; a sparse
    product, much faster than ``np.add.at`` for wide rows."""
    index = np.asarray(index)
    S = sp.csr_matrix((np.ones(index.size), (index, np.arange(index.size))), shape=(n, index.size))
    return np.asarray(S @ values)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# ridge regression


def ridge_solve(X: np.ndarray, Y: np.ndarray, alpha: float) -> np.ndarray:
    """Solve ``(X^T X + alpha I) W = X^T Y`` for ``W`` (shape ``d x d'``).

    Uses a Cholesky factorisation of the normal matrix. With ``alpha == 0`` a
    rank-deficient design raises :class:`SingularDesignError` instead of
    returning a meaningless solution.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"ridge_solve: X {X.shape} and Y {Y.shape} row counts differ")
    if alpha < 0 or not np.isfinite(alpha):
        raise ValueError(f"ridge_solve: alpha must be finite and >= 0, got {alpha}")

    d = X.shape[1]
    gram = X.T @ X
    if alpha > 0:
        gram[np.diag_indices(d)] += alpha
    rhs = X.T @ Y
    try:
        factor = scipy.linalg.cho_factor(gram, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise SingularDesignError("singular design: normal matrix is not positive definite") from exc
    diag = np.abs(np.diag(factor[0]))
    # cond(gram) ~ (max diag / min diag)^2 for the Cholesky factor
    if diag.size and diag.min() <= np.sqrt(np.finfo(np.float64).eps * d) * diag.max():
        raise SingularDesignError("singular design: normal matrix is numerically rank deficient")
    W = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    if not np.all(np.isfinite(W)):
        raise NonFiniteError("ridge_solve produced non-finite coefficients")
    return W


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (points * points).sum(1)[:, None]
        - 2.0 * points @ centroids.T
        + (centroids * centroids).sum(1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeanspp_init(points: np.ndarray, J: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(points, points[chosen]).ravel()
    for _ in range(1, J):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass sits on existing centroids; pick uniformly
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        chosen.append(idx)
        closest = np.minimum(closest, _sq_dists(points, points[idx : idx + 1]).ravel())
    return points[chosen].copy()


def kmeans(points: np.ndarray, J: int, max_iters: int = 100, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` holds the objective measured right after each assignment step,
    which is non-increasing. An empty cluster is re-seeded at the point that is
    farthest from its currently assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"kmeans expects a 2-D array, got shape {points.shape}")
    n = points.shape[0]
    if J < 1 or n < J:
        raise ValueError(f"kmeans needs 1 <= J <= n points, got J={J}, n={n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, J, rng)
    assignments = np.full(n, -1, dtype=np.int64)
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dists(points, centroids)
        new_assign = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign

        counts = np.bincount(assignments, minlength=J)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assignments, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            cost = d2[np.arange(n), assignments]
            for j in np.flatnonzero(~nonempty):
                far = int(np.argmax(cost))
                centroids[j] = points[far]
                cost[far] = -1.0

    d2 = _sq_dists(points, centroids)
    assignments = d2.argmin(axis=1)
    objective = float(d2[np.arange(n), assignments].sum())
    return KMeansResult(centroids, assignments, objective, history, it)


# ---------------------------------------------------------------------------
# small MLPs


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"layer weight {self.weight.shape} / bias {self.bias.shape} mismatch")


@dataclass
class MlpParams:
    layers: list[Layer]

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            if self.layers[i - 1].weight.shape[1] != self.layers[i].weight.shape[0]:
                raise ShapeError(f"layer {i - 1} -> {i} dimensions do not chain")

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}{i}.weight"] = layer.weight
            out[f"{prefix}{i}.bias"] = layer.bias
        return out

    @classmethod
    def init(
        cls,
        dims: Sequence[int],
        activations: Sequence[str],
        rng: np.random.Generator,
        std: float | None = None,
    ) -> "MlpParams":
        """Gaussian init; ``std=None`` means Glorot-style ``1/sqrt(fan_in)``."""
        if len(activations) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            s = std if std is not None else 1.0 / np.sqrt(fan_in)
            layers.append(Layer(rng.normal(0.0, s, (fan_in, fan_out)), np.zeros(fan_out), act))
        return cls(layers)


def _activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    if act == "sigmoid":
        return sigmoid(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0).astype(z.dtype)
    if act == "tanh":
        return 1.0 - a * a
    if act == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"mlp input has shape {x.shape}, expected (*, {params.in_dim})")
    cache = []
    h = x
    for layer in params.layers:
        z = h @ layer.weight + layer.bias
        a = _activate(z, layer.activation)
        cache.append((h, z, a))
        h = a
    if return_cache:
        return h, cache
    return h


def mlp_backward(params: MlpParams, x: np.ndarray, grad_out: np.ndarray, cache=None):
    """Backpropagate ``grad_out`` (d loss / d output).

    Returns ``(grads, grad_x)`` where ``grads`` is a list of
    ``(d_weight, d_bias)`` tuples aligned with ``params.layers``.
    """
    if cache is None:
        out, cache = mlp_forward(params, x, return_cache=True)
    else:
        out = cache[-1][2]
    if grad_out.shape != out.shape:
        raise ShapeError(f"upstream gradient {grad_out.shape} does not match output {out.shape}")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)  # type: ignore[list-item]
    g = grad_out
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        h_in, z, a = cache[i]
        gz = g * _activation_grad(z, a, layer.activation)
        grads[i] = (h_in.T @ gz, gz.sum(axis=0))
        g = gz @ layer.weight.T
    return grads, g


def mlp_grads_to_dict(grads, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for i, (dw, db) in enumerate(grads):
        out[f"{prefix}{i}.weight"] = dw
        out[f"{prefix}{i}.bias"] = db
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Parameters without an entry in ``grads`` are left untouched but still
    count towards the shared step counter.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking

LossFn = Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]]


def grad_check(
    loss_fn: LossFn,
    params: dict[str, np.ndarray],
    step: float = 1e-6,
    names: Sequence[str] | None = None,
    atol: float = 1e-8,
) -> float:
    """Worst relative disagreement between analytic and central-difference
    gradients, measured per parameter block as ``|a - n| / max(|n|, atol)``.

    ``loss_fn(params)`` must return ``(loss, grads)``; parameters are perturbed
    in place and restored afterwards.
    """
    loss, analytic = loss_fn(params)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite: {loss}")
    worst = 0.0
    for name in names if names is not None else list(params):
        p = params[name]
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = numeric.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp, _ = loss_fn(params)
            flat[k] = orig - step
            lm, _ = loss_fn(params)
            flat[k] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NonFiniteError(f"loss became non-finite while perturbing {name}")
            nflat[k] = (lp - lm) / (2.0 * step)
        a = analytic.get(name)
        a = np.zeros_like(p) if a is None else a
        err = np.linalg.norm(a - numeric) / max(np.linalg.norm(numeric), atol)
        worst = max(worst, float(err))
    return worst
