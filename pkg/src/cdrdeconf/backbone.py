"""Phase 1: preference-disentanglement backbone.

A deliberately small stand-in for a disentangling dual-domain recommender:
ID (or feature) embeddings, parameter-free graph propagation per domain,
interpolation augmentation of the sparser domain, linear projection heads for
shared / specific / independent preferences, a domain classifier, and
attention fusion into one comprehensive preference per domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import DomainSplit, LeaveOneOutSplit, TrainingSamples, sample_train_negatives
from .numeric import (
    AdamState,
    Layer,
    MlpParams,
    NonFiniteError,
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

DOMAINS = ("a", "b")


class TrainingDivergedError(NonFiniteError):
    pass


# ---------------------------------------------------------------------------
# building blocks


def encode_items(raw_features: np.ndarray, w_rd: np.ndarray) -> np.ndarray:
    """Map raw item features ``(n, d_raw)`` to dense embeddings ``(n, d_d)``."""
    if raw_features.ndim != 2 or raw_features.shape[1] != w_rd.shape[0]:
        raise ShapeError(f"features {raw_features.shape} cannot be mapped by {w_rd.shape}")
    return raw_features @ w_rd


def normalized_adjacency(users: np.ndarray, items: np.ndarray, n_users: int, n_items: int) -> sp.csr_matrix:
    """Symmetric-normalised bipartite adjacency over ``n_users + n_items`` nodes.

    Isolated nodes get a unit self-loop so propagation leaves them unchanged.
    """
    N = n_users + n_items
    keys = np.unique(users.astype(np.int64) * n_items + items)
    u, i = keys // n_items, keys % n_items
    rows = np.concatenate([u, n_users + i])
    cols = np.concatenate([n_users + i, u])
    deg = np.bincount(rows, minlength=N).astype(np.float64)
    inv = np.zeros(N)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    vals = inv[rows] * inv[cols]
    iso = np.flatnonzero(deg == 0)
    rows = np.concatenate([rows, iso])
    cols = np.concatenate([cols, iso])
    vals = np.concatenate([vals, np.ones(iso.size)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(N, N))


def propagate_stacked(adj: sp.csr_matrix, x: np.ndarray, depth: int) -> np.ndarray:
    if depth < 0:
        raise ValueError("propagation depth must be >= 0")
    out = x.copy()
    h = x
    for _ in range(depth):
        h = adj @ h
        out += h
    return out / (depth + 1)


def propagate_graph(
    users: np.ndarray, items: np.ndarray, E_u: np.ndarray, E_v: np.ndarray, depth: int
) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``depth + 1`` layers of normalised neighbour averaging."""
    if E_u.shape[1] != E_v.shape[1]:
        raise ShapeError("user and item embeddings must share their width")
    m, n = E_u.shape[0], E_v.shape[0]
    adj = normalized_adjacency(users, items, m, n)
    out = propagate_stacked(adj, np.vstack([E_u, E_v]), depth)
    return out[:m], out[m:]


def augment_interpolate(E_a: np.ndarray, E_b: np.ndarray, eta: float) -> np.ndarray:
    if E_a.shape != E_b.shape:
        raise ShapeError(f"cannot interpolate {E_a.shape} with {E_b.shape}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    return eta * E_a + (1.0 - eta) * E_b


def attention_fuse(components: np.ndarray, att: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``components`` is ``(m, K, d)``; per-user softmax over ``components @ att``.

    Returns ``(fused (m, d), weights (m, K))``.
    """
    if components.ndim != 3 or components.shape[2] != att.shape[0]:
        raise ShapeError(f"components {components.shape} vs attention vector {att.shape}")
    weights = softmax(components @ att, axis=1)
    return (weights[:, :, None] * components).sum(1), weights


def attention_fuse_backward(components, att, weights, d_fused):
    dw = (components * d_fused[:, None, :]).sum(2)
    d_comp = weights[:, :, None] * d_fused[:, None, :]
    d_logit = weights * (dw - (weights * dw).sum(1, keepdims=True))
    d_comp += d_logit[:, :, None] * att[None, None, :]
    d_att = (d_logit[:, :, None] * components).sum((0, 1))
    return d_comp, d_att


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def bce_with_logits(z: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise cross-entropy of ``sigmoid(z)`` against target ``y`` and its
    derivative with respect to ``z``."""
    return softplus(z) - y * z, sigmoid(z) - y


# ---------------------------------------------------------------------------
# model


@dataclass
class BackboneConfig:
    dim: int = 64
    layers: int = 2
    eta: float = 0.5
    classifier_hidden: int = 32
    w_cls: float = 1.0
    w_conf: float = 1.0
    w_orth: float = 0.1
    init_std: float = 0.1
    head_noise: float = 0.01


@dataclass
class PreferenceBundle:
    Z_sha: np.ndarray
    Z_spe: dict[str, np.ndarray]
    Z_ind: dict[str, np.ndarray]
    E_user: dict[str, np.ndarray]
    E_item: dict[str, np.ndarray]
    attention: dict[str, np.ndarray]
    # per-domain views of the shared head, before averaging
    Z_sha_view: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class _Cache:
    init_u: dict
    init_v: dict
    prop_u: dict
    prop_v: dict
    x: dict
    comps: dict
    weights: dict
    bundle: PreferenceBundle


class Backbone:
    """Parameters live in ``self.params``; graph operators are fixed at
    construction from the training interactions."""

    def __init__(
        self,
        cfg: BackboneConfig,
        n_users: int,
        n_items: dict[str, int],
        graphs: dict[str, tuple[np.ndarray, np.ndarray]],
        sparser: str,
        rng: np.random.Generator,
        item_features: dict[str, np.ndarray | None] | None = None,
        user_features: dict[str, np.ndarray | None] | None = None,
        head_init: str = "noisy_identity",
    ):
        if sparser not in DOMAINS:
            raise ValueError(f"sparser must be 'a' or 'b', got {sparser!r}")
        if cfg.layers < 0 or not 0.0 <= cfg.eta <= 1.0:
            raise ValueError("need layers >= 0 and eta in [0, 1]")
        self.cfg = cfg
        self.n_users = n_users
        self.n_items = dict(n_items)
        self.sparser = sparser
        self.item_features = {t: None for t in DOMAINS} | dict(item_features or {})
        self.user_features = {t: None for t in DOMAINS} | dict(user_features or {})
        self.adj = {t: normalized_adjacency(*graphs[t], n_users, n_items[t]) for t in DOMAINS}

        d = cfg.dim
        p: dict[str, np.ndarray] = {}
        for t in DOMAINS:
            uf = self.user_features[t]
            if uf is None:
                p[f"user_emb.{t}"] = rng.normal(0.0, cfg.init_std, (n_users, d))
            else:
                p[f"user_map.{t}"] = rng.normal(0.0, 1.0 / np.sqrt(uf.shape[1]), (uf.shape[1], d))
            vf = self.item_features[t]
            if vf is None:
                p[f"item_emb.{t}"] = rng.normal(0.0, cfg.init_std, (n_items[t], d))
            else:
                p[f"item_rd.{t}"] = rng.normal(0.0, 1.0 / np.sqrt(vf.shape[1]), (vf.shape[1], d))
                p[f"item_delta.{t}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))

        def head():
            if head_init == "identity":
                return np.eye(d)
            if head_init == "noisy_identity":
                return np.eye(d) + rng.normal(0.0, cfg.head_noise, (d, d))
            return rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))

        p["head.sha"] = head()
        p["head.spe"] = head()
        for t in DOMAINS:
            p[f"head.ind.{t}"] = head()
        for t in DOMAINS:
            p[f"att.{t}"] = np.zeros(d)
        clf = MlpParams.init([d, cfg.classifier_hidden, 1], ["tanh", "identity"], rng)
        p.update(clf.arrays("clf."))
        self.params = p

    # -- helpers -----------------------------------------------------------

    @property
    def classifier(self) -> MlpParams:
        p = self.params
        return MlpParams(
            [
                Layer(p["clf.0.weight"], p["clf.0.bias"], "tanh"),
                Layer(p["clf.1.weight"], p["clf.1.bias"], "identity"),
            ]
        )

    def initial_embeddings(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, str]]:
        p = self.params
        eu, ev, prov = {}, {}, {}
        for t in DOMAINS:
            uf = self.user_features[t]
            eu[t] = p[f"user_emb.{t}"] if uf is None else uf @ p[f"user_map.{t}"]
            vf = self.item_features[t]
            if vf is None:
                ev[t] = p[f"item_emb.{t}"]
                prov[f"item.{t}"] = "learnable-id"
            else:
                ev[t] = encode_items(vf, p[f"item_rd.{t}"]) @ p[f"item_delta.{t}"]
                prov[f"item.{t}"] = "from-features"
            prov[f"user.{t}"] = "learnable-id" if uf is None else "from-features"
        return eu, ev, prov

    # -- forward / backward -----------------------------------------------

    def forward(self) -> _Cache:
        p, L, m = self.params, self.cfg.layers, self.n_users
        init_u, init_v, _ = self.initial_embeddings()
        prop_u, prop_v = {}, {}
        for t in DOMAINS:
            out = propagate_stacked(self.adj[t], np.vstack([init_u[t], init_v[t]]), L)
            prop_u[t], prop_v[t] = out[:m], out[m:]
        aug = augment_interpolate(prop_u["a"], prop_u["b"], self.cfg.eta)
        x = dict(prop_u)
        x[self.sparser] = 0.5 * (prop_u[self.sparser] + aug)

        sha_view = {t: x[t] @ p["head.sha"] for t in DOMAINS}
        Z_sha = 0.5 * (sha_view["a"] + sha_view["b"])
        Z_spe = {t: x[t] @ p["head.spe"] for t in DOMAINS}
        Z_ind = {t: x[t] @ p[f"head.ind.{t}"] for t in DOMAINS}
        comps, weights, E = {}, {}, {}
        for t in DOMAINS:
            comps[t] = np.stack([Z_sha, Z_spe[t], Z_ind[t]], axis=1)
            E[t], weights[t] = attention_fuse(comps[t], p[f"att.{t}"])
        bundle = PreferenceBundle(Z_sha, Z_spe, Z_ind, E, prop_v, weights, sha_view)
        return _Cache(init_u, init_v, prop_u, prop_v, x, comps, weights, bundle)

    def backward(
        self,
        cache: _Cache,
        d_user: dict[str, np.ndarray] | None = None,
        d_item: dict[str, np.ndarray] | None = None,
        d_sha_view: dict[str, np.ndarray] | None = None,
        d_spe: dict[str, np.ndarray] | None = None,
    ) -> dict[str, np.ndarray]:
        """Gradients of all non-classifier parameters given upstream gradients
        on the fused user preferences, item embeddings and (optionally) the
        per-domain shared / specific components."""
        p, L, m, d = self.params, self.cfg.layers, self.n_users, self.cfg.dim
        zeros_u = np.zeros((m, d))
        d_user = d_user or {}
        d_item = d_item or {}
        g: dict[str, np.ndarray] = {}

        d_sha = np.zeros((m, d))
        d_spe_t = {t: (d_spe or {}).get(t, zeros_u).copy() for t in DOMAINS}
        d_ind_t = {}
        for t in DOMAINS:
            du = d_user.get(t)
            if du is None:
                g[f"att.{t}"] = np.zeros(d)
                d_ind_t[t] = zeros_u
                continue
            d_comp, g[f"att.{t}"] = attention_fuse_backward(cache.comps[t], p[f"att.{t}"], cache.weights[t], du)
            d_sha += d_comp[:, 0]
            d_spe_t[t] += d_comp[:, 1]
            d_ind_t[t] = d_comp[:, 2]
        d_view = {t: 0.5 * d_sha + (d_sha_view or {}).get(t, zeros_u) for t in DOMAINS}

        x = cache.x
        g["head.sha"] = sum(x[t].T @ d_view[t] for t in DOMAINS)
        g["head.spe"] = sum(x[t].T @ d_spe_t[t] for t in DOMAINS)
        dx = {}
        for t in DOMAINS:
            g[f"head.ind.{t}"] = x[t].T @ d_ind_t[t]
            dx[t] = d_view[t] @ p["head.sha"].T + d_spe_t[t] @ p["head.spe"].T + d_ind_t[t] @ p[f"head.ind.{t}"].T

        s = self.sparser
        d_prop_u = dict(dx)
        d_prop_u[s] = 0.5 * dx[s]
        d_aug = 0.5 * dx[s]
        d_prop_u["a"] = d_prop_u["a"] + self.cfg.eta * d_aug
        d_prop_u["b"] = d_prop_u["b"] + (1.0 - self.cfg.eta) * d_aug

        for t in DOMAINS:
            dv = d_item.get(t)
            if dv is None:
                dv = np.zeros((self.n_items[t], d))
            back = propagate_stacked(self.adj[t], np.vstack([d_prop_u[t], dv]), L)
            d_init_u, d_init_v = back[:m], back[m:]
            uf = self.user_features[t]
            if uf is None:
                g[f"user_emb.{t}"] = d_init_u
            else:
                g[f"user_map.{t}"] = uf.T @ d_init_u
            vf = self.item_features[t]
            if vf is None:
                g[f"item_emb.{t}"] = d_init_v
            else:
                enc = encode_items(vf, p[f"item_rd.{t}"])
                g[f"item_delta.{t}"] = enc.T @ d_init_v
                g[f"item_rd.{t}"] = vf.T @ (d_init_v @ p[f"item_delta.{t}"].T)
        return g

    def bundle(self) -> PreferenceBundle:
        return self.forward().bundle


# ---------------------------------------------------------------------------
# disentanglement losses


def disentangle_losses(
    classifier: MlpParams,
    bundle: PreferenceBundle,
    rows: np.ndarray,
    w_cls: float = 1.0,
    w_conf: float = 1.0,
    w_orth: float = 0.1,
):
    """Domain-classification loss on specific components, uniform-target
    confusion loss on shared components and an orthogonality penalty.

    Returns ``(total, parts, d_spe, d_sha_view, classifier_grads)``; the
    component gradients are dense ``(m, d)`` arrays that are zero outside
    ``rows``.
    """
    m, d = bundle.Z_sha.shape
    B = rows.size
    d_spe = {t: np.zeros((m, d)) for t in DOMAINS}
    d_view = {t: np.zeros((m, d)) for t in DOMAINS}
    cgrads = None

    def run_classifier(z, target, weight):
        nonlocal cgrads
        logit, cache = mlp_forward(classifier, z, return_cache=True)
        loss, dz = bce_with_logits(logit, target)
        dz = dz * (weight / z.shape[0])
        grads, dinput = mlp_backward(classifier, z, dz, cache)
        cgrads = grads if cgrads is None else [(a + c, b + e) for (a, b), (c, e) in zip(cgrads, grads)]
        return float(loss.sum() / z.shape[0]), dinput

    parts = {}
    zs = np.vstack([bundle.Z_spe["a"][rows], bundle.Z_spe["b"][rows]])
    labels = np.concatenate([np.ones(B), np.zeros(B)])[:, None]
    parts["cls"], dzs = run_classifier(zs, labels, w_cls)
    d_spe["a"][rows] += dzs[:B]
    d_spe["b"][rows] += dzs[B:]

    zh = np.vstack([bundle.Z_sha_view["a"][rows], bundle.Z_sha_view["b"][rows]])
    parts["conf"], dzh = run_classifier(zh, 0.5, w_conf)
    d_view["a"][rows] += dzh[:B]
    d_view["b"][rows] += dzh[B:]

    sha = bundle.Z_sha[rows]
    orth = 0.0
    d_sha = np.zeros_like(sha)
    for t in DOMAINS:
        spe = bundle.Z_spe[t][rows]
        # squared cross-covariance, independent of the batch size
        cross = spe.T @ sha / B
        orth += float((cross * cross).sum())
        d_spe[t][rows] += w_orth * 2.0 * (sha @ cross.T) / B
        d_sha += w_orth * 2.0 * (spe @ cross) / B
    parts["orth"] = orth
    # Z_sha is the mean of the two per-domain views
    for t in DOMAINS:
        d_view[t][rows] += 0.5 * d_sha

    total = w_cls * parts["cls"] + w_conf * parts["conf"] + w_orth * parts["orth"]
    return total, parts, d_spe, d_view, mlp_grads_to_dict(cgrads, "clf.")


def domain_confusion(classifier: MlpParams, z: np.ndarray) -> dict[str, float]:
    """Diagnostics of the classifier on rows ``z``: mean uniform-target
    cross-entropy and mean binary entropy of its predictions."""
    logit = mlp_forward(classifier, z)
    ce, _ = bce_with_logits(logit, 0.5)
    prob = np.clip(sigmoid(logit), 1e-12, 1 - 1e-12)
    ent = -(prob * np.log(prob) + (1 - prob) * np.log(1 - prob))
    return {"uniform_ce": float(ce.mean()), "entropy": float(ent.mean())}


# ---------------------------------------------------------------------------
# pretraining


def dot_scores(bundle: PreferenceBundle, tag: str, users: np.ndarray, items: np.ndarray) -> np.ndarray:
    return (bundle.E_user[tag][users] * bundle.E_item[tag][items]).sum(-1)


def pretrain_loss(backbone: Backbone, batch: dict[str, TrainingSamples], rows: np.ndarray | None = None):
    """Mean sampled-negative cross-entropy of dot-product scores in both
    domains plus the weighted disentanglement terms. Returns ``(loss, grads)``."""
    cfg = backbone.cfg
    cache = backbone.forward()
    bundle = cache.bundle
    d_user, d_item = {}, {}
    loss = 0.0
    for t in DOMAINS:
        s = batch[t]
        k = s.negatives.shape[1]
        users = np.repeat(s.users, k + 1)
        items = np.concatenate([s.positives[:, None], s.negatives], axis=1).ravel()
        labels = np.tile(np.r_[1.0, np.zeros(k)], s.users.size)
        z = dot_scores(bundle, t, users, items)
        l, dz = bce_with_logits(z, labels)
        N = z.size
        loss += float(l.sum()) / N
        dz = dz / N
        d_user[t] = scatter_rows(users, dz[:, None] * bundle.E_item[t][items], bundle.E_user[t].shape[0])
        d_item[t] = scatter_rows(items, dz[:, None] * bundle.E_user[t][users], bundle.E_item[t].shape[0])
    if rows is None:
        rows = np.unique(np.concatenate([batch[t].users for t in DOMAINS]))
    aux, _, d_spe, d_view, cgrads = disentangle_losses(
        backbone.classifier, bundle, rows, cfg.w_cls, cfg.w_conf, cfg.w_orth
    )
    loss += aux
    grads = backbone.backward(cache, d_user, d_item, d_view, d_spe)
    grads.update(cgrads)
    return loss, grads


def sparser_domain(split: LeaveOneOutSplit) -> str:
    return "a" if split.a.train_users.size < split.b.train_users.size else "b"


def build_backbone(
    cfg: BackboneConfig,
    split: LeaveOneOutSplit,
    rng: np.random.Generator,
    item_features: dict[str, np.ndarray | None] | None = None,
    user_features: dict[str, np.ndarray | None] | None = None,
    head_init: str = "noisy_identity",
) -> Backbone:
    graphs = {t: (split.domain(t).train_users, split.domain(t).train_items) for t in DOMAINS}
    n_items = {t: split.domain(t).n_items for t in DOMAINS}
    return Backbone(
        cfg, split.a.n_users, n_items, graphs, sparser_domain(split), rng,
        item_features, user_features, head_init,
    )


def iterate_joint_batches(samples: dict[str, TrainingSamples], batch_size: int, rng: np.random.Generator):
    """Yield ``{tag: TrainingSamples}`` batches covering both domains in
    parallel; the domain with fewer positives wraps around its permutation."""
    perms = {t: rng.permutation(samples[t].users.size) for t in DOMAINS}
    n_steps = max(int(np.ceil(samples[t].users.size / batch_size)) for t in DOMAINS)
    for step in range(n_steps):
        out = {}
        for t in DOMAINS:
            P = perms[t].size
            start = (step * batch_size) % P
            idx = np.take(perms[t], np.arange(start, start + min(batch_size, P)), mode="wrap")
            s = samples[t]
            out[t] = TrainingSamples(s.users[idx], s.positives[idx], s.negatives[idx])
        yield step, out


def param_norms(params: dict[str, np.ndarray]) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) for k, v in params.items()}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 1024
    lr: float = 0.001
    negatives: int = 7


def pretrain(
    backbone: Backbone,
    split: LeaveOneOutSplit,
    cfg: TrainConfig,
    seed: int,
    history: list[float] | None = None,
) -> PreferenceBundle:
    """Joint training of both domains; returns the frozen bundle."""
    state = AdamState()
    for epoch in range(cfg.epochs):
        samples = sample_train_negatives(split, cfg.negatives, [seed, epoch, 0])
        total = 0.0
        order_rng = np.random.default_rng([seed, epoch, 1])
        for step, batch in iterate_joint_batches(samples, cfg.batch_size, order_rng):
            loss, grads = pretrain_loss(backbone, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"pretrain diverged at epoch {epoch}, batch {step}; parameter norms "
                    f"{param_norms(backbone.params)}"
                )
            adam_step(backbone.params, grads, state, cfg.lr)
            total += loss
        if history is not None:
            history.append(total)
        log.debug("pretrain epoch %d loss %.4f", epoch, total)
    return backbone.bundle()
