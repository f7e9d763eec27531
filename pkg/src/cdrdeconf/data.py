"""Dual-domain implicit-feedback data: loading, synthetic generation, leave-one-out
splitting and negative sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.optimize

from .numeric import sigmoid

log = logging.getLogger(__name__)


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    """Binary interactions of one domain.

    ``users``/``items``/``timestamps`` are parallel arrays, sorted by user and
    then by (timestamp, original file order). ``user_ids``/``item_ids`` map
    dense indices back to the external identifiers.
    """

    user_ids: list[str]
    item_ids: list[str]
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    item_features: np.ndarray | None = None
    user_features: np.ndarray | None = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_interactions(self) -> int:
        return int(self.users.size)

    @property
    def density(self) -> float:
        return self.n_interactions / max(1, self.n_users * self.n_items)

    def validate(self) -> None:
        if self.users.size and (self.users.min() < 0 or self.users.max() >= self.n_users):
            raise DataFormatError("user index out of range")
        if self.items.size and (self.items.min() < 0 or self.items.max() >= self.n_items):
            raise DataFormatError("item index out of range")
        keys = self.users.astype(np.int64) * self.n_items + self.items
        if np.unique(keys).size != keys.size:
            raise DataFormatError("duplicate (user, item) interaction")
        if np.bincount(self.users, minlength=self.n_users).min(initial=1) < 1:
            raise DataFormatError("some user has no interactions")
        if self.item_features is not None and self.item_features.shape[0] != self.n_items:
            raise DataFormatError("item feature rows do not match the item count")
        if self.user_features is not None and self.user_features.shape[0] != self.n_users:
            raise DataFormatError("user feature rows do not match the user count")


@dataclass(frozen=True)
class DualDomainDataset:
    a: DomainDataset
    b: DomainDataset

    def __post_init__(self):
        if self.a.user_ids != self.b.user_ids:
            raise DataFormatError("domains must index the identical ordered user list")

    @property
    def user_ids(self) -> list[str]:
        return self.a.user_ids

    @property
    def n_users(self) -> int:
        return self.a.n_users

    def domain(self, tag: str) -> DomainDataset:
        return {"a": self.a, "b": self.b}[tag]


# ---------------------------------------------------------------------------
# loading


def _read_rows(path: Path) -> list[tuple[str, str, int, int]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            user, item, ts = parts
            try:
                t = int(ts)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: timestamp {ts!r} is not an integer") from None
            if not user or not item:
                raise DataFormatError(f"{path}:{lineno}: empty user or item id")
            rows.append((user, item, t, len(rows)))
    return rows


def _dedupe(rows):
    """Keep one row per (user, item): the earliest timestamp, then file order."""
    best: dict[tuple[str, str], tuple[str, str, int, int]] = {}
    for r in rows:
        key = (r[0], r[1])
        cur = best.get(key)
        if cur is None or (r[2], r[3]) < (cur[2], cur[3]):
            best[key] = r
    return sorted(best.values(), key=lambda r: r[3])


def _filter_fixpoint(rows, min_interactions: int, keep_users: set[str] | None = None):
    while True:
        ucount: dict[str, int] = {}
        icount: dict[str, int] = {}
        for u, i, _, _ in rows:
            ucount[u] = ucount.get(u, 0) + 1
            icount[i] = icount.get(i, 0) + 1
        kept = [
            r
            for r in rows
            if ucount[r[0]] >= min_interactions
            and icount[r[1]] >= min_interactions
            and (keep_users is None or r[0] in keep_users)
        ]
        if len(kept) == len(rows):
            return kept
        rows = kept


def _build_domain(rows, user_ids: list[str]) -> DomainDataset:
    uidx = {u: k for k, u in enumerate(user_ids)}
    item_ids: list[str] = []
    iidx: dict[str, int] = {}
    for r in rows:
        if r[1] not in iidx:
            iidx[r[1]] = len(item_ids)
            item_ids.append(r[1])
    ordered = sorted(rows, key=lambda r: (uidx[r[0]], r[2], r[3]))
    users = np.array([uidx[r[0]] for r in ordered], dtype=np.int64)
    items = np.array([iidx[r[1]] for r in ordered], dtype=np.int64)
    ts = np.array([r[2] for r in ordered], dtype=np.int64)
    return DomainDataset(list(user_ids), item_ids, users, items, ts)


def _first_seen_order(rows) -> list[str]:
    seen: dict[str, None] = {}
    for r in rows:
        seen.setdefault(r[0], None)
    return list(seen)


def load_domain_tsv(path: str | Path, min_interactions: int = 5) -> DomainDataset:
    """Read ``user<TAB>item<TAB>timestamp`` rows and filter users and items with
    fewer than ``min_interactions`` until a fixpoint is reached. Dense indices
    follow first appearance in the file."""
    path = Path(path)
    rows = _filter_fixpoint(_dedupe(_read_rows(path)), min_interactions)
    if not rows:
        raise DataFormatError(f"{path}: no interactions left after filtering (min={min_interactions})")
    ds = _build_domain(rows, _first_seen_order(rows))
    ds.validate()
    return ds


def load_feature_file(path: str | Path) -> np.ndarray:
    """Header ``n d_raw`` followed by ``n`` rows of ``d_raw`` reals."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataFormatError(f"{path}:1: header must be 'n d_raw'")
        n, d = int(header[0]), int(header[1])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if data.shape != (n, d):
        raise DataFormatError(f"{path}: header says {n}x{d}, body is {data.shape[0]}x{data.shape[1]}")
    return data


def write_feature_file(path: str | Path, features: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{features.shape[0]} {features.shape[1]}\n")
        np.savetxt(fh, features, fmt="%.17g")


def load_dual_tsv(
    path_a: str | Path,
    path_b: str | Path,
    min_interactions: int = 5,
    item_features_a: str | Path | None = None,
    item_features_b: str | Path | None = None,
) -> DualDomainDataset:
    """Load two domains and restrict both to their common users.

    Filtering and user intersection alternate until neither changes anything.
    Item feature rows are given in the raw file's first-appearance item order
    and are re-indexed to the surviving items.
    """
    rows_a = _dedupe(_read_rows(Path(path_a)))
    rows_b = _dedupe(_read_rows(Path(path_b)))
    raw_items_a = list(dict.fromkeys(r[1] for r in rows_a))
    raw_items_b = list(dict.fromkeys(r[1] for r in rows_b))
    while True:
        common = {r[0] for r in rows_a} & {r[0] for r in rows_b}
        new_a = _filter_fixpoint(rows_a, min_interactions, common)
        new_b = _filter_fixpoint(rows_b, min_interactions, common)
        if {r[0] for r in new_a} != {r[0] for r in new_b}:
            rows_a, rows_b = new_a, new_b
            continue
        if len(new_a) == len(rows_a) and len(new_b) == len(rows_b):
            break
        rows_a, rows_b = new_a, new_b
    if not rows_a or not rows_b:
        raise DataFormatError("no common users left after filtering")
    users = _first_seen_order(rows_a)
    a = _build_domain(rows_a, users)
    b = _build_domain(rows_b, users)
    if item_features_a is not None:
        a = _attach_item_features(a, raw_items_a, load_feature_file(item_features_a))
    if item_features_b is not None:
        b = _attach_item_features(b, raw_items_b, load_feature_file(item_features_b))
    a.validate()
    b.validate()
    return DualDomainDataset(a, b)


def _attach_item_features(ds: DomainDataset, raw_items: list[str], feats: np.ndarray) -> DomainDataset:
    if feats.shape[0] != len(raw_items):
        raise DataFormatError(f"feature file has {feats.shape[0]} rows, data has {len(raw_items)} items")
    pos = {it: k for k, it in enumerate(raw_items)}
    rows = feats[[pos[i] for i in ds.item_ids]]
    return DomainDataset(ds.user_ids, ds.item_ids, ds.users, ds.items, ds.timestamps, item_features=rows)


def write_domain_tsv(path: str | Path, ds: DomainDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, t in zip(ds.users, ds.items, ds.timestamps):
            fh.write(f"{ds.user_ids[u]}\t{ds.item_ids[i]}\t{int(t)}\n")


# ---------------------------------------------------------------------------
# leave-one-out split


@dataclass
class DomainSplit:
    n_users: int
    n_items: int
    train_users: np.ndarray
    train_items: np.ndarray
    # per user: held-out item, or -1 when the user is not evaluated
    test_items: np.ndarray
    eval_negatives: list[np.ndarray]
    shortfall: dict[int, int] = field(default_factory=dict)
    excluded: dict[int, str] = field(default_factory=dict)

    @property
    def eval_users(self) -> np.ndarray:
        return np.flatnonzero(self.test_items >= 0)

    def train_keys(self) -> np.ndarray:
        return np.sort(self.train_users.astype(np.int64) * self.n_items + self.train_items)

    def interacted(self, user: int) -> np.ndarray:
        items = self.train_items[self.train_users == user]
        t = self.test_items[user]
        return np.append(items, t) if t >= 0 else items


@dataclass
class LeaveOneOutSplit:
    a: DomainSplit
    b: DomainSplit

    def domain(self, tag: str) -> DomainSplit:
        return {"a": self.a, "b": self.b}[tag]


def _split_domain(ds: DomainDataset, eval_negatives: int, rng: np.random.Generator) -> DomainSplit:
    n_users, n_items = ds.n_users, ds.n_items
    counts = np.bincount(ds.users, minlength=n_users)
    # interactions are sorted by (user, timestamp, file order): the last row of
    # each user's block is the final interaction
    ends = np.cumsum(counts)
    last_row = ends - 1
    test_items = np.full(n_users, -1, dtype=np.int64)
    excluded: dict[int, str] = {}
    held = np.zeros(ds.n_interactions, dtype=bool)
    for u in range(n_users):
        if counts[u] < 2:
            excluded[u] = "fewer than 2 interactions"
            continue
        held[last_row[u]] = True
        test_items[u] = ds.items[last_row[u]]
    seen = np.zeros(n_items, dtype=bool)
    seen[ds.items[~held]] = True
    for u in np.flatnonzero(test_items >= 0):
        if not seen[test_items[u]]:
            # cold-start test item: not evaluated, interaction returns to training
            excluded[int(u)] = "test item unseen in training"
            test_items[u] = -1
            held[last_row[u]] = False
    train_users = ds.users[~held]
    train_items = ds.items[~held]
    if excluded:
        log.info("leave-one-out: %d of %d users excluded from evaluation", len(excluded), n_users)

    negatives: list[np.ndarray] = []
    shortfall: dict[int, int] = {}
    all_items = np.arange(n_items)
    user_rows = np.split(ds.items, ends[:-1])
    for u in range(n_users):
        if test_items[u] < 0:
            negatives.append(np.empty(0, dtype=np.int64))
            continue
        mask = np.ones(n_items, dtype=bool)
        mask[user_rows[u]] = False
        pool = all_items[mask]
        if pool.size <= eval_negatives:
            if pool.size < eval_negatives:
                shortfall[u] = eval_negatives - pool.size
            negatives.append(pool.copy())
        else:
            negatives.append(np.sort(rng.choice(pool, size=eval_negatives, replace=False)))
    return DomainSplit(n_users, n_items, train_users, train_items, test_items, negatives, shortfall, excluded)


def leave_one_out_split(ds: DualDomainDataset, eval_negatives: int = 999, seed: int | list[int] = 0) -> LeaveOneOutSplit:
    """Hold out each user's final interaction per domain and draw evaluation
    negatives among items the user never interacted with."""
    ss = np.random.SeedSequence(seed)
    ra, rb = (np.random.default_rng(s) for s in ss.spawn(2))
    return LeaveOneOutSplit(_split_domain(ds.a, eval_negatives, ra), _split_domain(ds.b, eval_negatives, rb))


# ---------------------------------------------------------------------------
# training negatives


@dataclass
class TrainingSamples:
    users: np.ndarray  # (P,)
    positives: np.ndarray  # (P,)
    negatives: np.ndarray  # (P, k)


def _sample_domain_negatives(split: DomainSplit, k: int, rng: np.random.Generator) -> TrainingSamples:
    users, pos = split.train_users, split.train_items
    n_items = split.n_items
    # training may never see the held-out item as a negative either
    inter_users = np.concatenate([users, split.eval_users])
    inter_items = np.concatenate([pos, split.test_items[split.eval_users]])
    keys = np.unique(inter_users.astype(np.int64) * n_items + inter_items)
    deg = np.bincount(keys // n_items, minlength=split.n_users)
    pool_size = n_items - deg

    P = users.size
    negs = rng.integers(0, n_items, size=(P, k))
    small = pool_size[users] < k
    u64 = users.astype(np.int64)[:, None]

    def invalid(cand: np.ndarray) -> np.ndarray:
        bad = np.isin(u64 * n_items + cand, keys, assume_unique=False)
        for j in range(1, k):
            bad[:, j] |= (cand[:, j : j + 1] == cand[:, :j]).any(axis=1)
        bad[small] = False
        return bad

    bad = invalid(negs)
    rounds = 0
    while bad.any():
        rounds += 1
        negs[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = invalid(negs)
        if rounds > 10_000:
            raise RuntimeError("negative sampling did not converge")

    for row in np.flatnonzero(small):
        u = users[row]
        mask = np.ones(n_items, dtype=bool)
        mask[keys[(keys // n_items) == u] % n_items] = False
        pool = np.flatnonzero(mask)
        if pool.size == 0:
            raise DataFormatError(f"user {u} has interacted with every item; no negatives exist")
        negs[row] = rng.choice(pool, size=k, replace=True)
    if small.any():
        log.warning("negative pool smaller than k=%d for %d positives; sampled with replacement", k, int(small.sum()))
    return TrainingSamples(users.copy(), pos.copy(), negs)


def sample_train_negatives(split: LeaveOneOutSplit, k: int = 7, seed: int | list[int] = 0) -> dict[str, TrainingSamples]:
    """For every training positive draw ``k`` distinct non-interacted items of
    the same user and domain (uniformly, with replacement across positives)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    ss = np.random.SeedSequence(seed)
    ra, rb = (np.random.default_rng(s) for s in ss.spawn(2))
    return {"a": _sample_domain_negatives(split.a, k, ra), "b": _sample_domain_negatives(split.b, k, rb)}


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SyntheticConfig:
    n_users: int = 1000
    n_items_a: int = 2000
    n_items_b: int = 2000
    latent_dim: int = 16
    n_sdc_a: int = 1
    n_sdc_b: int = 1
    n_cdc: int = 1
    beta_sd: float = 1.5
    beta_cd: float = 1.5
    density_a: float = 0.02
    density_b: float = 0.01
    # fraction of users / items touched by each planted confounder
    exposure_rate: float = 0.5
    item_share: float = 0.1
    # length of the preference shift a confounder induces in exposed users
    preference_shift: float = 1.5
    # multiplier on the preference dot product inside the logit
    preference_scale: float = 10.0
    specific_map: str = "orthogonal"

    @property
    def confounder_free(self) -> bool:
        return self.beta_sd == 0 and self.beta_cd == 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PlantedConfounder:
    kind: str  # "sdc" or "cdc"
    domain: str  # "a", "b" or "both"
    vector: np.ndarray  # (latent_dim,)
    weight: float
    exposed_users: np.ndarray  # bool (m,)
    items_a: np.ndarray  # bool (n_a,), all False for an SDC of domain b
    items_b: np.ndarray

    def exposure(self, tag: str) -> np.ndarray:
        """Binary (m, n) exposure mask in domain ``tag``."""
        items = self.items_a if tag == "a" else self.items_b
        return np.outer(self.exposed_users, items)


@dataclass
class SyntheticGroundTruth:
    confounders: list[PlantedConfounder]
    shared: np.ndarray  # (m, k) unconfounded shared preference
    specific: dict[str, np.ndarray]  # per domain (m, k) unconfounded specific preference
    specific_map: np.ndarray  # (k, k): specific["b"] = specific["a"] @ specific_map
    observed_shared: np.ndarray  # shared + CDC shifts
    observed_specific: dict[str, np.ndarray]  # specific + SDC shifts of that domain
    fused: dict[str, np.ndarray]  # observed comprehensive preference per domain
    item_factors: dict[str, np.ndarray]
    bias: dict[str, float]
    config: SyntheticConfig

    def planted(self, kind: str, domain: str | None = None) -> list[PlantedConfounder]:
        return [c for c in self.confounders if c.kind == kind and (domain is None or c.domain == domain)]

    def manifest(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "confounder_free": self.config.confounder_free,
            "bias": {k: float(v) for k, v in self.bias.items()},
            "confounders": [
                {
                    "kind": c.kind,
                    "domain": c.domain,
                    "weight": c.weight,
                    "vector": [float(x) for x in c.vector],
                    "n_exposed_users": int(c.exposed_users.sum()),
                    "n_items_a": int(c.items_a.sum()),
                    "n_items_b": int(c.items_b.sum()),
                }
                for c in self.confounders
            ],
        }

    def blocks(self) -> dict[str, np.ndarray]:
        out = {
            "shared": self.shared,
            "specific_a": self.specific["a"],
            "specific_b": self.specific["b"],
            "specific_map": self.specific_map,
            "fused_a": self.fused["a"],
            "fused_b": self.fused["b"],
            "item_factors_a": self.item_factors["a"],
            "item_factors_b": self.item_factors["b"],
        }
        for k, c in enumerate(self.confounders):
            out[f"confounder{k}_users"] = c.exposed_users.astype(np.float64)[:, None]
            out[f"confounder{k}_items_a"] = c.items_a.astype(np.float64)[:, None]
            out[f"confounder{k}_items_b"] = c.items_b.astype(np.float64)[:, None]
        return out


def _unit_scale_rows(x: np.ndarray, lo: float = 0.5, hi: float = 2.0) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.where(norms == 0, 1.0, norms)
    return x * (np.clip(norms, lo, hi) / norms)


def _skewed_factors(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    # centred exponentials with distinct per-coordinate scales: no rotation
    # leaves this distribution invariant
    scales = np.linspace(1.0, 0.4, k)
    x = (rng.exponential(1.0, (n, k)) - 1.0) * scales / np.sqrt(k) * 2.0
    return _unit_scale_rows(x)


def _calibrate_bias(logits: np.ndarray, density: float) -> float:
    """Offset ``b`` with ``mean(sigmoid(logits + b)) == density``."""
    if not 0.0 < density < 1.0:
        raise ValueError(f"target density must be in (0, 1), got {density}")
    lo, hi = -60.0 - logits.max(), 60.0 - logits.min()

    def gap(b):
        return sigmoid(logits + b).mean() - density

    try:
        bias = scipy.optimize.brentq(gap, lo, hi, xtol=1e-12)
    except ValueError as exc:
        raise ValueError(f"target density {density} is unreachable") from exc
    if not np.isfinite(bias) or abs(gap(bias)) > 1e-3 * density:
        raise ValueError(f"target density {density} is unreachable")
    return bias


def generate_synthetic(cfg: SyntheticConfig, seed: int = 0) -> tuple[DualDomainDataset, SyntheticGroundTruth]:
    """Sample a fully-overlapping two-domain dataset with planted confounders.

    Each confounder carries a unit direction in preference space, a set of
    exposed users and a set of affected items. Exposure shifts the user's
    observed preference along the direction (shared component for a CDC,
    domain-specific component for an SDC) and adds ``weight`` to the logit of
    every exposed (user, affected item) pair.
    """
    rng = np.random.default_rng(seed)
    m, k = cfg.n_users, cfg.latent_dim
    n = {"a": cfg.n_items_a, "b": cfg.n_items_b}
    density = {"a": cfg.density_a, "b": cfg.density_b}

    shared = _unit_scale_rows(rng.normal(0.0, 1.0 / np.sqrt(k), (m, k)))
    spec_a = _skewed_factors(rng, m, k)
    if cfg.specific_map == "identity":
        smap = np.eye(k)
    elif cfg.specific_map == "orthogonal":
        q, r = np.linalg.qr(rng.normal(size=(k, k)))
        smap = q * np.sign(np.diag(r))
    else:
        raise ValueError(f"unknown specific_map {cfg.specific_map!r}")
    specific = {"a": spec_a, "b": spec_a @ smap}
    items = {t: _unit_scale_rows(rng.normal(0.0, 1.0 / np.sqrt(k), (n[t], k))) for t in "ab"}

    # planted directions are mutually orthonormal (while the count allows) so
    # each confounder is a distinct factor
    n_planted = cfg.n_cdc + cfg.n_sdc_a + cfg.n_sdc_b
    basis = np.linalg.qr(rng.normal(size=(k, max(n_planted, 1))))[0].T if n_planted <= k else None
    drawn = iter(range(n_planted))

    def direction():
        if basis is not None:
            return basis[next(drawn)].copy()
        v = rng.normal(size=k)
        return v / np.linalg.norm(v)

    def item_subset(size):
        mask = np.zeros(size, dtype=bool)
        mask[rng.choice(size, max(1, int(round(cfg.item_share * size))), replace=False)] = True
        return mask

    confounders: list[PlantedConfounder] = []
    for _ in range(cfg.n_cdc):
        confounders.append(
            PlantedConfounder(
                "cdc", "both", direction(), cfg.beta_cd,
                rng.random(m) < cfg.exposure_rate, item_subset(n["a"]), item_subset(n["b"]),
            )
        )
    for tag, count in (("a", cfg.n_sdc_a), ("b", cfg.n_sdc_b)):
        for _ in range(count):
            ia = item_subset(n["a"]) if tag == "a" else np.zeros(n["a"], dtype=bool)
            ib = item_subset(n["b"]) if tag == "b" else np.zeros(n["b"], dtype=bool)
            confounders.append(
                PlantedConfounder("sdc", tag, direction(), cfg.beta_sd,
                                  rng.random(m) < cfg.exposure_rate, ia, ib)
            )

    shift = cfg.preference_shift
    obs_shared = shared.copy()
    obs_spec = {t: specific[t].copy() for t in "ab"}
    for c in confounders:
        if c.weight == 0:
            # zero-weight confounders are inert, giving a clean control
            continue
        delta = shift * np.outer(c.exposed_users, c.vector)
        if c.kind == "cdc":
            obs_shared += delta
        else:
            obs_spec[c.domain] += delta
    # centre over users: a constant preference offset only acts as item popularity
    obs_shared -= obs_shared.mean(0)
    for t in "ab":
        obs_spec[t] -= obs_spec[t].mean(0)
    fused = {t: (obs_shared + obs_spec[t]) / np.sqrt(2.0) for t in "ab"}

    user_ids = [f"u{u}" for u in range(m)]
    domains = {}
    bias = {}
    for t in "ab":
        logits = cfg.preference_scale * fused[t] @ items[t].T
        for c in confounders:
            if c.weight != 0:
                logits += c.weight * c.exposure(t)
        bias[t] = _calibrate_bias(logits, density[t])
        prob = sigmoid(logits + bias[t])
        hit = rng.random(prob.shape) < prob
        # every user keeps at least two interactions so leave-one-out applies
        order = np.argsort(-prob, axis=1, kind="stable")[:, :2]
        hit[np.arange(m)[:, None], order] |= hit.sum(1, keepdims=True) < 2
        uu, ii = np.nonzero(hit)
        ts = rng.permutation(uu.size).astype(np.int64)
        perm = np.lexsort((ts, uu))
        domains[t] = DomainDataset(
            user_ids,
            [f"{t}{i}" for i in range(n[t])],
            uu[perm].astype(np.int64),
            ii[perm].astype(np.int64),
            ts[perm],
        )
    # items nobody touched would break dense indexing conventions; keep them,
    # they are legal (zero-degree nodes) and simply never positive
    ds = DualDomainDataset(domains["a"], domains["b"])
    truth = SyntheticGroundTruth(
        confounders, shared, specific, smap, obs_shared, obs_spec, fused, items, bias, cfg
    )
    return ds, truth


def save_ground_truth_manifest(path: str | Path, truth: SyntheticGroundTruth) -> None:
    Path(path).write_text(json.dumps(truth.manifest(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
