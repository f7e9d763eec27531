"""Phase 2: confounder disentanglement.

Single-domain confounders come from a pair of domain-translation generators
trained adversarially (least-squares objective) with a cycle-consistency term;
the residual between translated and original domain-specific preferences is
taken as the candidate confounder. Cross-domain confounders are the part of
one domain's comprehensive preference that a ridge regression can predict from
the other domain. Both candidate sets are summarised by k-means centroids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numeric import (
    AdamState,
    Layer,
    MlpParams,
    NonFiniteError,
    ShapeError,
    adam_step,
    kmeans,
    mlp_backward,
    mlp_forward,
    mlp_grads_to_dict,
    ridge_solve,
)

log = logging.getLogger(__name__)


class AdversarialDivergedError(NonFiniteError):
    pass


@dataclass
class AdversarialPair:
    """Generators ``S: A -> B`` and ``T: B -> A`` plus discriminators ``H_a`` and
    ``H_b``; ``lam`` weights the cycle-consistency loss."""

    S: MlpParams
    T: MlpParams
    H_a: MlpParams
    H_b: MlpParams
    lam: float = 1.0

    @classmethod
    def init(
        cls,
        dim: int,
        rng: np.random.Generator,
        lam: float = 1.0,
        hidden: int | None = None,
        generator_init: str = "identity",
        identity_scale: float = 0.1,
    ) -> "AdversarialPair":
        """Hidden width defaults to ``2 * dim``.

        ``generator_init="identity"`` starts both generators close to the
        identity map (tanh kept in its linear range by ``identity_scale``), so
        a candidate confounder only grows where training finds the domains
        differ; ``"random"`` uses fan-in scaled Gaussian weights.
        """
        h = hidden or 2 * dim
        if generator_init not in ("identity", "random"):
            raise ValueError(f"unknown generator_init {generator_init!r}")
        if generator_init == "identity" and h < dim:
            raise ValueError("identity initialisation needs hidden >= dim")

        def gen():
            net = MlpParams.init([dim, h, dim], ["tanh", "identity"], rng)
            if generator_init == "identity":
                first, second = net.layers
                first.weight[:] = identity_scale * (np.eye(dim, h) + rng.normal(0.0, 0.01, (dim, h)))
                first.bias[:] = 0.0
                second.weight[:] = np.eye(h, dim) / identity_scale
                second.bias[:] = 0.0
            return net

        def disc():
            return MlpParams.init([dim, h, 1], ["tanh", "sigmoid"], rng)

        return cls(gen(), gen(), disc(), disc(), lam)

    def generator_params(self) -> dict[str, np.ndarray]:
        return self.S.arrays("S.") | self.T.arrays("T.")

    def discriminator_params(self) -> dict[str, np.ndarray]:
        return self.H_a.arrays("H_a.") | self.H_b.arrays("H_b.")

    def arrays(self) -> dict[str, np.ndarray]:
        return self.generator_params() | self.discriminator_params()

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], lam: float = 1.0) -> "AdversarialPair":
        def net(prefix, acts):
            return MlpParams(
                [Layer(arrays[f"{prefix}{i}.weight"], arrays[f"{prefix}{i}.bias"], a) for i, a in enumerate(acts)]
            )

        gen, disc = ["tanh", "identity"], ["tanh", "sigmoid"]
        return cls(net("S.", gen), net("T.", gen), net("H_a.", disc), net("H_b.", disc), lam)


def _check_pair(z_a: np.ndarray, z_b: np.ndarray) -> None:
    if z_a.ndim != 2 or z_b.ndim != 2 or z_a.shape[1] != z_b.shape[1]:
        raise ShapeError(f"specific-preference batches {z_a.shape} and {z_b.shape} are incompatible")
    if z_a.shape[0] == 0 or z_b.shape[0] == 0:
        raise ValueError("adversarial losses need non-empty batches")


def lsgan_losses(pair: AdversarialPair, z_a: np.ndarray, z_b: np.ndarray) -> dict[str, float]:
    """Least-squares adversarial losses for both translation directions.

    ``gen_S`` / ``gen_T`` are the generator objectives, ``disc_b`` / ``disc_a``
    the discriminator objectives (real term plus fake term).
    """
    _check_pair(z_a, z_b)
    fake_b = mlp_forward(pair.S, z_a)
    fake_a = mlp_forward(pair.T, z_b)
    hb_fake = mlp_forward(pair.H_b, fake_b)
    ha_fake = mlp_forward(pair.H_a, fake_a)
    hb_real = mlp_forward(pair.H_b, z_b)
    ha_real = mlp_forward(pair.H_a, z_a)
    return {
        "gen_S": float(np.mean((hb_fake - 1.0) ** 2)),
        "gen_T": float(np.mean((ha_fake - 1.0) ** 2)),
        "disc_b": float(np.mean((hb_real - 1.0) ** 2) + np.mean(hb_fake**2)),
        "disc_a": float(np.mean((ha_real - 1.0) ** 2) + np.mean(ha_fake**2)),
    }


def cycle_loss(pair: AdversarialPair, z_a: np.ndarray, z_b: np.ndarray) -> float:
    """Mean row-wise L1 reconstruction error of ``T(S(z_a))`` and ``S(T(z_b))``."""
    _check_pair(z_a, z_b)
    rec_a = mlp_forward(pair.T, mlp_forward(pair.S, z_a))
    rec_b = mlp_forward(pair.S, mlp_forward(pair.T, z_b))
    return float(np.abs(rec_a - z_a).sum(1).mean() + np.abs(rec_b - z_b).sum(1).mean())


def discriminator_objective(pair: AdversarialPair, z_a: np.ndarray, z_b: np.ndarray):
    """Sum of both discriminator losses and their gradients (generators fixed)."""
    fake_b = mlp_forward(pair.S, z_a)
    fake_a = mlp_forward(pair.T, z_b)
    grads: dict[str, np.ndarray] = {}
    loss = 0.0
    for name, H, real, fake in (("H_b.", pair.H_b, z_b, fake_b), ("H_a.", pair.H_a, z_a, fake_a)):
        x = np.vstack([real, fake])
        out, cache = mlp_forward(H, x, return_cache=True)
        nr = real.shape[0]
        target = np.zeros_like(out)
        target[:nr] = 1.0
        scale = np.where(np.arange(x.shape[0])[:, None] < nr, 1.0 / nr, 1.0 / fake.shape[0])
        diff = out - target
        loss += float((scale * diff**2).sum())
        g, _ = mlp_backward(H, x, 2.0 * scale * diff, cache)
        grads |= mlp_grads_to_dict(g, name)
    return loss, grads


def generator_objective(pair: AdversarialPair, z_a: np.ndarray, z_b: np.ndarray, lam: float | None = None):
    """Generator side of the joint objective: both least-squares generator
    terms plus ``lam`` times the cycle loss. Returns ``(loss, grads)``."""
    lam = pair.lam if lam is None else lam
    S, T = pair.S, pair.T
    fb, c_fb = mlp_forward(S, z_a, return_cache=True)
    fa, c_fa = mlp_forward(T, z_b, return_cache=True)
    ra, c_ra = mlp_forward(T, fb, return_cache=True)
    rb, c_rb = mlp_forward(S, fa, return_cache=True)
    hb, c_hb = mlp_forward(pair.H_b, fb, return_cache=True)
    ha, c_ha = mlp_forward(pair.H_a, fa, return_cache=True)
    na, nb = z_a.shape[0], z_b.shape[0]

    loss = float(np.mean((hb - 1.0) ** 2) + np.mean((ha - 1.0) ** 2))
    loss += lam * float(np.abs(ra - z_a).sum(1).mean() + np.abs(rb - z_b).sum(1).mean())

    _, d_fb = mlp_backward(pair.H_b, fb, 2.0 * (hb - 1.0) / na, c_hb)
    _, d_fa = mlp_backward(pair.H_a, fa, 2.0 * (ha - 1.0) / nb, c_ha)
    g_T_cyc_a, d_fb_cyc = mlp_backward(T, fb, lam * np.sign(ra - z_a) / na, c_ra)
    g_S_cyc_b, d_fa_cyc = mlp_backward(S, fa, lam * np.sign(rb - z_b) / nb, c_rb)
    g_S, _ = mlp_backward(S, z_a, d_fb + d_fb_cyc, c_fb)
    g_T, _ = mlp_backward(T, z_b, d_fa + d_fa_cyc, c_fa)

    def add(x, y):
        return [(a + c, b + e) for (a, b), (c, e) in zip(x, y)]

    grads = mlp_grads_to_dict(add(g_S, g_S_cyc_b), "S.") | mlp_grads_to_dict(add(g_T, g_T_cyc_a), "T.")
    return loss, grads


@dataclass
class AdversarialConfig:
    epochs: int = 30
    batch_size: int = 1024
    lr: float = 0.001
    lam: float = 1.0
    hidden: int | None = None
    generator_init: str = "identity"


@dataclass
class AdversarialHistory:
    cycle: list[float] = field(default_factory=list)
    generator: list[float] = field(default_factory=list)
    discriminator: list[float] = field(default_factory=list)

    @property
    def initial_cycle(self) -> float:
        return self.cycle[0]

    @property
    def final_cycle(self) -> float:
        return self.cycle[-1]


def train_dual_adversarial(
    z_a: np.ndarray,
    z_b: np.ndarray,
    cfg: AdversarialConfig,
    seed: int,
    pair: AdversarialPair | None = None,
) -> tuple[AdversarialPair, AdversarialHistory]:
    """Alternate one discriminator step and one generator step per batch.

    ``history.cycle[0]`` is the cycle loss of the untrained pair on the full
    inputs; one further entry is appended per epoch.
    """
    _check_pair(z_a, z_b)
    if z_a.shape[0] != z_b.shape[0]:
        raise ShapeError("both domains must describe the same users")
    rng = np.random.default_rng([seed, 2])
    if pair is None:
        pair = AdversarialPair.init(z_a.shape[1], rng, cfg.lam, cfg.hidden, cfg.generator_init)
    pair.lam = cfg.lam
    gen_p, disc_p = pair.generator_params(), pair.discriminator_params()
    gen_state, disc_state = AdamState(), AdamState()
    hist = AdversarialHistory(cycle=[cycle_loss(pair, z_a, z_b)])
    m = z_a.shape[0]
    for epoch in range(cfg.epochs):
        perm = rng.permutation(m)
        g_tot = d_tot = 0.0
        for step, start in enumerate(range(0, m, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            ba, bb = z_a[idx], z_b[idx]
            d_loss, d_grads = discriminator_objective(pair, ba, bb)
            adam_step(disc_p, d_grads, disc_state, cfg.lr)
            g_loss, g_grads = generator_objective(pair, ba, bb)
            if not (np.isfinite(d_loss) and np.isfinite(g_loss)):
                norms = {k: float(np.linalg.norm(v)) for k, v in pair.arrays().items()}
                raise AdversarialDivergedError(
                    f"adversarial training diverged at epoch {epoch}, batch {step}; parameter norms {norms}"
                )
            adam_step(gen_p, g_grads, gen_state, cfg.lr)
            g_tot += g_loss
            d_tot += d_loss
        hist.generator.append(g_tot)
        hist.discriminator.append(d_tot)
        hist.cycle.append(cycle_loss(pair, z_a, z_b))
    return pair, hist


# ---------------------------------------------------------------------------
# candidates


@dataclass
class CandidateConfounders:
    sdc_a: np.ndarray | None
    sdc_b: np.ndarray | None
    cdc_ab: np.ndarray | None
    cdc_ba: np.ndarray | None
    W_ab: np.ndarray | None = None
    W_ba: np.ndarray | None = None

    def all_rows(self, tag: str | None = None) -> np.ndarray:
        """Stack every available candidate row (SDCs of ``tag`` only, when given)."""
        blocks = []
        if tag in (None, "a") and self.sdc_a is not None:
            blocks.append(self.sdc_a)
        if tag in (None, "b") and self.sdc_b is not None:
            blocks.append(self.sdc_b)
        for c in (self.cdc_ab, self.cdc_ba):
            if c is not None:
                blocks.append(c)
        return np.vstack(blocks)


def sdc_candidates(pair: AdversarialPair, z_a: np.ndarray, z_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Residuals of translated versus original domain-specific preferences:
    ``T(z_b) - z_a`` for domain A and ``S(z_a) - z_b`` for domain B."""
    if z_a.shape != z_b.shape:
        raise ShapeError(f"{z_a.shape} vs {z_b.shape}")
    return mlp_forward(pair.T, z_b) - z_a, mlp_forward(pair.S, z_a) - z_b


def hsr_fit(E_a: np.ndarray, E_b: np.ndarray, alpha: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Ridge maps predicting each domain's comprehensive preference from the
    other's: ``E_b ~ E_a @ W_ab`` and ``E_a ~ E_b @ W_ba``."""
    if E_a.shape != E_b.shape:
        raise ShapeError(f"{E_a.shape} vs {E_b.shape}")
    return ridge_solve(E_a, E_b, alpha), ridge_solve(E_b, E_a, alpha)


def cdc_candidates(
    E_a: np.ndarray, E_b: np.ndarray, maps: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    W_ab, W_ba = maps
    if E_a.shape[1] != W_ab.shape[0] or E_b.shape[1] != W_ba.shape[0]:
        raise ShapeError("regression maps do not match preference widths")
    return E_a @ W_ab, E_b @ W_ba


def top_principal_direction(x: np.ndarray, center: bool = True) -> np.ndarray:
    """Leading right singular vector (unit norm) of ``x``."""
    if center:
        x = x - x.mean(0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    return vt[0]


# ---------------------------------------------------------------------------
# subspaces


@dataclass
class ConfounderSubspace:
    sd_a: np.ndarray
    sd_b: np.ndarray
    cd: np.ndarray

    def union(self, tag: str) -> np.ndarray:
        sd = self.sd_a if tag == "a" else self.sd_b
        out = np.vstack([sd, self.cd])
        if out.shape[0] == 0:
            raise ValueError(f"confounder set of domain {tag!r} is empty")
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {"subspace.sd_a": self.sd_a, "subspace.sd_b": self.sd_b, "subspace.cd": self.cd}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ConfounderSubspace":
        return cls(arrays["subspace.sd_a"], arrays["subspace.sd_b"], arrays["subspace.cd"])


def build_subspaces(
    cand: CandidateConfounders,
    J_sd_a: int = 10,
    J_sd_b: int = 10,
    J_cd: int = 10,
    seed: int = 0,
    max_iters: int = 100,
) -> ConfounderSubspace:
    """K-means centroids of each candidate set. Missing candidate sets (used by
    the ablations) give an empty ``(0, d)`` block."""
    dim = next(c.shape[1] for c in (cand.sdc_a, cand.sdc_b, cand.cdc_ab, cand.cdc_ba) if c is not None)
    seeds = np.random.SeedSequence([seed, 3]).generate_state(3)

    def cluster(x, J, s):
        if x is None:
            return np.zeros((0, dim))
        return kmeans(x, J, max_iters=max_iters, seed=int(s)).centroids

    cd_input = None
    if cand.cdc_ab is not None:
        cd_input = np.vstack([cand.cdc_ab, cand.cdc_ba])
    return ConfounderSubspace(
        cluster(cand.sdc_a, J_sd_a, seeds[0]),
        cluster(cand.sdc_b, J_sd_b, seeds[1]),
        cluster(cd_input, J_cd, seeds[2]),
    )
