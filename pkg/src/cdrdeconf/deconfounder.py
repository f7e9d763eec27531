"""Phase 3: backdoor-adjusted interaction prediction.

For every (user, item) pair a selection function weights the confounder
centroids of the active domain (half from a user-side softmax, half from an
item-side softmax). The weighted centroid mixture, scaled by the uniform prior,
is concatenated to the user and item embeddings, projected, and scored by a
small MLP with a sigmoid output. Fine-tuning minimises summed cross-entropy
and updates both the prediction network and the backbone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .backbone import DOMAINS, Backbone, TrainingDivergedError, bce_with_logits, iterate_joint_batches, param_norms
from .data import LeaveOneOutSplit, TrainingSamples, sample_train_negatives
from .numeric import (
    AdamState,
    Layer,
    MlpParams,
    ShapeError,
    adam_step,
    mlp_backward,
    mlp_forward,
    mlp_grads_to_dict,
    scatter_rows,
    sigmoid,
    softmax,
)

log = logging.getLogger(__name__)

NORMALIZATIONS = ("literal", "renormalized")


@dataclass
class PredictionNetwork:
    """Selection matrices ``W_u, W_uc, W_v, W_vc`` (d x d_sel), the fusion
    matrix ``W_fc`` (3d x e) and the MLP ``e -> 32 -> 16 -> q -> 1``."""

    W_u: np.ndarray
    W_uc: np.ndarray
    W_v: np.ndarray
    W_vc: np.ndarray
    W_fc: np.ndarray
    mlp: MlpParams

    @classmethod
    def init(
        cls,
        dim: int,
        rng: np.random.Generator,
        e: int = 128,
        q: int = 8,
        hidden: tuple[int, ...] = (32, 16),
        d_sel: int | None = None,
        std: float = 0.1,
    ) -> "PredictionNetwork":
        d_sel = d_sel or dim
        dims = [e, *hidden, q, 1]
        acts = ["relu"] * (len(dims) - 2) + ["identity"]
        return cls(
            rng.normal(0.0, std, (dim, d_sel)),
            rng.normal(0.0, std, (dim, d_sel)),
            rng.normal(0.0, std, (dim, d_sel)),
            rng.normal(0.0, std, (dim, d_sel)),
            rng.normal(0.0, std, (3 * dim, e)),
            MlpParams.init(dims, acts, rng, std=std),
        )

    @property
    def dim(self) -> int:
        return self.W_u.shape[0]

    @property
    def e(self) -> int:
        return self.W_fc.shape[1]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {
            f"{prefix}sel.user": self.W_u,
            f"{prefix}sel.user_conf": self.W_uc,
            f"{prefix}sel.item": self.W_v,
            f"{prefix}sel.item_conf": self.W_vc,
            f"{prefix}fuse": self.W_fc,
        }
        out.update(self.mlp.arrays(f"{prefix}mlp."))
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "") -> "PredictionNetwork":
        layers = []
        i = 0
        while f"{prefix}mlp.{i}.weight" in arrays:
            layers.append(Layer(arrays[f"{prefix}mlp.{i}.weight"], arrays[f"{prefix}mlp.{i}.bias"], "relu"))
            i += 1
        layers[-1].activation = "identity"
        return cls(
            arrays[f"{prefix}sel.user"],
            arrays[f"{prefix}sel.user_conf"],
            arrays[f"{prefix}sel.item"],
            arrays[f"{prefix}sel.item_conf"],
            arrays[f"{prefix}fuse"],
            MlpParams(layers),
        )


@dataclass
class ConfounderContext:
    """Confounder centroids of one domain with a uniform prior.

    In ``coarse`` mode ``centroids`` holds a single fixed vector that is
    concatenated as is, with no selection weights and no prior.
    """

    centroids: np.ndarray
    normalization: str = "literal"
    coarse: bool = False

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] == 0:
            raise ValueError("confounder set is empty; backdoor adjustment is undefined")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("confounder centroids must be finite")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")

    @property
    def prior(self) -> np.ndarray:
        J = self.centroids.shape[0]
        return np.full(J, 1.0 / J)

    @property
    def mixture_scale(self) -> float:
        # literal: sum_c p(c) phi(c) c with p(c) = 1/|C|
        return 1.0 / self.centroids.shape[0] if self.normalization == "literal" else 1.0


def _as_rows(x: np.ndarray) -> np.ndarray:
    return x[None, :] if x.ndim == 1 else x


def selection_logits(E_u, E_v, C, net: PredictionNetwork) -> tuple[np.ndarray, np.ndarray]:
    """User-side and item-side logits, each ``(rows, |C|)``."""
    E_u, E_v = _as_rows(np.asarray(E_u, float)), _as_rows(np.asarray(E_v, float))
    if E_u.shape[1] != net.dim or E_v.shape[1] != net.dim or C.shape[1] != net.dim:
        raise ShapeError("embedding and centroid widths must equal the network dim")
    return (E_u @ net.W_u) @ (C @ net.W_uc).T, (E_v @ net.W_v) @ (C @ net.W_vc).T


def confounder_weights(E_u, E_v, context: ConfounderContext, net: PredictionNetwork) -> np.ndarray:
    """Selection weights over the centroids: half a user-side softmax plus half
    an item-side softmax. Rows sum to one."""
    if context.coarse:
        raise ValueError("coarse contexts have no selection weights")
    lu, lv = selection_logits(E_u, E_v, context.centroids, net)
    phi = 0.5 * softmax(lu, axis=1) + 0.5 * softmax(lv, axis=1)
    return phi[0] if np.ndim(E_u) == 1 else phi


def mixture_vector(E_u, E_v, context: ConfounderContext, net: PredictionNetwork) -> np.ndarray:
    if context.coarse:
        rows = _as_rows(np.asarray(E_u, float)).shape[0]
        mix = np.broadcast_to(context.centroids[0], (rows, context.centroids.shape[1]))
        return mix[0] if np.ndim(E_u) == 1 else np.array(mix)
    phi = confounder_weights(E_u, E_v, context, net)
    return context.mixture_scale * (phi @ context.centroids)


def backdoor_input(E_u, E_v, context: ConfounderContext, net: PredictionNetwork) -> np.ndarray:
    """``Q_in = (E_u || E_v || mixture) @ W_fc``."""
    mix = mixture_vector(E_u, E_v, context, net)
    x = np.concatenate([_as_rows(np.asarray(E_u, float)), _as_rows(np.asarray(E_v, float)), _as_rows(mix)], axis=1)
    q = x @ net.W_fc
    return q[0] if np.ndim(E_u) == 1 else q


def predict(Q_in: np.ndarray, net: PredictionNetwork) -> np.ndarray:
    Q = _as_rows(np.asarray(Q_in, float))
    if Q.shape[1] != net.e:
        raise ShapeError(f"Q_in has width {Q.shape[1]}, network expects {net.e}")
    y = sigmoid(mlp_forward(net.mlp, Q)[:, 0])
    return y[0] if np.ndim(Q_in) == 1 else y


# ---------------------------------------------------------------------------
# differentiable scoring
#
# The projected input splits as Q_in = P_user + P_item: the user and item
# embeddings enter W_fc through separate row blocks, and the mixture is half a
# user-only term plus half an item-only term. Both parts are computed once per
# distinct user / item, and only the MLP runs per (user, item) pair.


@dataclass
class _PartsCache:
    E_u: np.ndarray
    E_v: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    su: np.ndarray | None = None
    sv: np.ndarray | None = None
    Cu: np.ndarray | None = None
    Cv: np.ndarray | None = None


def entity_parts(E_u: np.ndarray, E_v: np.ndarray, context: ConfounderContext, net: PredictionNetwork):
    """User parts ``(rows_u, e)`` and item parts ``(rows_v, e)`` of ``Q_in``."""
    d = net.dim
    if E_u.shape[1] != d or E_v.shape[1] != d or context.centroids.shape[1] != d:
        raise ShapeError("embedding and centroid widths must equal the network dim")
    W1, W2, W3 = net.W_fc[:d], net.W_fc[d : 2 * d], net.W_fc[2 * d :]
    C = context.centroids
    cache = _PartsCache(E_u, E_v)
    if context.coarse:
        return E_u @ W1 + C[0] @ W3, E_v @ W2, cache
    half = 0.5 * context.mixture_scale
    cache.A, cache.B = E_u @ net.W_u, E_v @ net.W_v
    cache.Cu, cache.Cv = C @ net.W_uc, C @ net.W_vc
    cache.su = softmax(cache.A @ cache.Cu.T, axis=1)
    cache.sv = softmax(cache.B @ cache.Cv.T, axis=1)
    P_u = E_u @ W1 + half * (cache.su @ C) @ W3
    P_v = E_v @ W2 + half * (cache.sv @ C) @ W3
    return P_u, P_v, cache


def entity_parts_backward(cache: _PartsCache, dP_u, dP_v, context: ConfounderContext, net: PredictionNetwork):
    """Returns ``(d_E_u, d_E_v, grads)``; centroids are constants."""
    d = net.dim
    W1, W2, W3 = net.W_fc[:d], net.W_fc[d : 2 * d], net.W_fc[2 * d :]
    C = context.centroids
    E_u, E_v = cache.E_u, cache.E_v
    dW1, dW2 = E_u.T @ dP_u, E_v.T @ dP_v
    dE_u, dE_v = dP_u @ W1.T, dP_v @ W2.T
    grads = {}
    if context.coarse:
        dW3 = np.outer(C[0], dP_u.sum(0))
        zero = np.zeros_like(net.W_u)
        for k in ("user", "user_conf", "item", "item_conf"):
            grads[f"sel.{k}"] = zero.copy()
    else:
        half = 0.5 * context.mixture_scale
        dW3 = half * ((cache.su @ C).T @ dP_u + (cache.sv @ C).T @ dP_v)
        for key, s, lhs, Cs, W, E, dP, dE in (
            ("user", cache.su, cache.A, cache.Cu, net.W_u, E_u, dP_u, dE_u),
            ("item", cache.sv, cache.B, cache.Cv, net.W_v, E_v, dP_v, dE_v),
        ):
            ds = half * (dP @ W3.T) @ C.T
            dl = s * (ds - (s * ds).sum(1, keepdims=True))
            dlhs = dl @ Cs
            grads[f"sel.{key}_conf"] = C.T @ (dl.T @ lhs)
            grads[f"sel.{key}"] = E.T @ dlhs
            dE += dlhs @ W.T
    grads["fuse"] = np.vstack([dW1, dW2, dW3])
    return dE_u, dE_v, grads


def pair_logits(
    E_user: np.ndarray,
    E_item: np.ndarray,
    users: np.ndarray,
    items: np.ndarray,
    context: ConfounderContext,
    net: PredictionNetwork,
):
    """Logits for the (users[r], items[r]) pairs and a backward closure that
    maps ``d_logit`` to ``(d_E_user, d_E_item, net grads)``."""
    uu, uinv = np.unique(users, return_inverse=True)
    vv, vinv = np.unique(items, return_inverse=True)
    P_u, P_v, cache = entity_parts(E_user[uu], E_item[vv], context, net)
    Q = P_u[uinv] + P_v[vinv]
    out, mcache = mlp_forward(net.mlp, Q, return_cache=True)

    def backward(d_logit: np.ndarray):
        mlp_g, dQ = mlp_backward(net.mlp, Q, d_logit[:, None], mcache)
        dP_u = scatter_rows(uinv, dQ, uu.size)
        dP_v = scatter_rows(vinv, dQ, vv.size)
        dEu, dEv, grads = entity_parts_backward(cache, dP_u, dP_v, context, net)
        grads.update(mlp_grads_to_dict(mlp_g, "mlp."))
        dE_user = np.zeros_like(E_user)
        dE_item = np.zeros_like(E_item)
        dE_user[uu] = dEu
        dE_item[vv] = dEv
        return dE_user, dE_item, grads

    return out[:, 0], backward


def _batch_rows(s: TrainingSamples):
    k = s.negatives.shape[1]
    users = np.repeat(s.users, k + 1)
    items = np.concatenate([s.positives[:, None], s.negatives], axis=1).ravel()
    labels = np.tile(np.r_[1.0, np.zeros(k)], s.users.size)
    return users, items, labels


def finetune_loss(
    backbone: Backbone,
    nets: dict[str, PredictionNetwork],
    contexts: dict[str, ConfounderContext],
    batch: dict[str, TrainingSamples],
):
    """Summed cross-entropy over positives and sampled negatives of both
    domains. Returns ``(loss, grads)`` keyed like :func:`finetune_params`."""
    cache = backbone.forward()
    bundle = cache.bundle
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    d_user, d_item = {}, {}
    for t in DOMAINS:
        users, items, labels = _batch_rows(batch[t])
        z, backward = pair_logits(bundle.E_user[t], bundle.E_item[t], users, items, contexts[t], nets[t])
        l, dz = bce_with_logits(z, labels)
        loss += float(l.sum())
        d_user[t], d_item[t], g = backward(dz)
        grads.update({f"pred.{t}.{k}": v for k, v in g.items()})
    grads.update(backbone.backward(cache, d_user, d_item))
    return loss, grads


def finetune_params(backbone: Backbone, nets: dict[str, PredictionNetwork]) -> dict[str, np.ndarray]:
    """Trainable arrays of phase 3: the backbone (minus its domain classifier,
    which only serves the disentanglement losses) and both prediction nets."""
    out = {k: v for k, v in backbone.params.items() if not k.startswith("clf.")}
    for t in DOMAINS:
        out.update(nets[t].arrays(f"pred.{t}."))
    return out


@dataclass
class FinetuneConfig:
    epochs: int = 20
    batch_size: int = 1024
    lr: float = 0.001
    negatives: int = 7


def finetune(
    backbone: Backbone,
    nets: dict[str, PredictionNetwork],
    contexts: dict[str, ConfounderContext],
    split: LeaveOneOutSplit,
    cfg: FinetuneConfig,
    seed: int,
    history: list[float] | None = None,
) -> tuple[Backbone, dict[str, PredictionNetwork]]:
    params = finetune_params(backbone, nets)
    state = AdamState()
    for epoch in range(cfg.epochs):
        samples = sample_train_negatives(split, cfg.negatives, [seed, epoch, 4])
        order_rng = np.random.default_rng([seed, epoch, 5])
        total = 0.0
        for step, batch in iterate_joint_batches(samples, cfg.batch_size, order_rng):
            loss, grads = finetune_loss(backbone, nets, contexts, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"fine-tuning diverged at epoch {epoch}, batch {step}; parameter norms {param_norms(params)}"
                )
            adam_step(params, grads, state, cfg.lr)
            total += loss
        if history is not None:
            history.append(total)
        log.debug("finetune epoch %d loss %.4f", epoch, total)
    return backbone, nets


# ---------------------------------------------------------------------------
# ranking


class CandidateScorer:
    """Scores many items per user from precomputed user and item parts."""

    def __init__(self, E_user: np.ndarray, E_item: np.ndarray, context: ConfounderContext, net: PredictionNetwork):
        self.net = net
        self.user_part, self.item_part, _ = entity_parts(E_user, E_item, context, net)

    def logits(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        Q = self.user_part[users] + self.item_part[items]
        return mlp_forward(self.net.mlp, Q)[:, 0]

    def scores(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        return sigmoid(self.logits(users, items))


def coarse_vector(candidates) -> np.ndarray:
    """Unweighted mean of every candidate confounder row."""
    return candidates.all_rows().mean(0)
