"""Leave-one-out ranking metrics and reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import LeaveOneOutSplit

# score_fn(tag, users, items) -> scores, all 1-D and row-aligned
ScoreFn = Callable[[str, np.ndarray, np.ndarray], np.ndarray]


def rank_test_item(scores: np.ndarray, test_index: int, item_ids: np.ndarray | None = None) -> int:
    """1-based rank of ``scores[test_index]``; ties go to the lower item id
    (candidate position when ``item_ids`` is omitted)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    ids = np.arange(scores.size) if item_ids is None else np.asarray(item_ids)
    s, i = scores[test_index], ids[test_index]
    return int(1 + np.sum(scores > s) + np.sum((scores == s) & (ids < i)))


def hr_at_k(rank: int, k: int = 10) -> int:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return int(rank <= k)


def ndcg_at_k(rank: int, k: int = 10) -> float:
    if rank < 1 or k < 1:
        raise ValueError("rank and k must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


@dataclass
class RankedResult:
    user: int
    domain: str
    rank: int
    n_candidates: int


@dataclass
class DomainMetrics:
    hr: float
    ndcg: float
    n_users: int
    n_shortfall: int


@dataclass
class MetricsReport:
    k: int
    seed: int
    variant: str
    domains: dict[str, DomainMetrics]
    # wall clock per phase; kept out of the JSON so repeated runs compare equal
    timings: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "variant": self.variant,
            "domains": {
                t: {"hr": m.hr, "ndcg": m.ndcg, "n_users": m.n_users, "n_shortfall": m.n_shortfall}
                for t, m in sorted(self.domains.items())
            },
            "diagnostics": dict(sorted(self.diagnostics.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            d["k"], d["seed"], d["variant"],
            {t: DomainMetrics(**m) for t, m in d["domains"].items()},
            diagnostics=d.get("diagnostics", {}),
        )

    def to_table(self) -> str:
        k = self.k
        lines = [f"{'domain':<8}{'HR@' + str(k):>10}{'NDCG@' + str(k):>10}{'users':>8}{'short':>8}"]
        for t, m in sorted(self.domains.items()):
            lines.append(f"{t:<8}{m.hr:>10.4f}{m.ndcg:>10.4f}{m.n_users:>8d}{m.n_shortfall:>8d}")
        if self.timings:
            lines.append("")
            lines.append(f"{'phase':<16}{'seconds':>10}")
            for name, sec in self.timings.items():
                lines.append(f"{name:<16}{sec:>10.2f}")
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[tuple[int, str, str, float]]:
        k = self.k
        rows = []
        for t, m in sorted(self.domains.items()):
            rows.append((self.seed, t, f"hr@{k}", m.hr))
            rows.append((self.seed, t, f"ndcg@{k}", m.ndcg))
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seed", "domain", "metric", "value"])
        w.writerows(self.csv_rows())
        return buf.getvalue()


def rank_domain(score_fn: ScoreFn, split: LeaveOneOutSplit, tag: str, chunk: int = 64) -> list[RankedResult]:
    dom = split.domain(tag)
    users = dom.eval_users
    out: list[RankedResult] = []
    for start in range(0, users.size, chunk):
        block = users[start : start + chunk]
        cands = [np.concatenate([[dom.test_items[u]], dom.eval_negatives[u]]).astype(np.int64) for u in block]
        flat_u = np.concatenate([np.full(c.size, u) for u, c in zip(block, cands)])
        flat_i = np.concatenate(cands)
        scores = np.asarray(score_fn(tag, flat_u, flat_i), dtype=np.float64)
        pos = 0
        for u, c in zip(block, cands):
            s = scores[pos : pos + c.size]
            pos += c.size
            out.append(RankedResult(int(u), tag, rank_test_item(s, 0, c), int(c.size)))
    return out


def evaluate(
    score_fn: ScoreFn,
    split: LeaveOneOutSplit,
    seed: int = 0,
    k: int = 10,
    variant: str = "full",
) -> MetricsReport:
    """HR@k and NDCG@k per domain, averaged over evaluated users."""
    domains = {}
    for tag in ("a", "b"):
        results = rank_domain(score_fn, split, tag)
        if not results:
            domains[tag] = DomainMetrics(0.0, 0.0, 0, 0)
            continue
        hr = float(np.mean([hr_at_k(r.rank, k) for r in results]))
        nd = float(np.mean([ndcg_at_k(r.rank, k) for r in results]))
        domains[tag] = DomainMetrics(hr, nd, len(results), len(split.domain(tag).shortfall))
    return MetricsReport(k, seed, variant, domains)


def summarize(reports: list[MetricsReport]) -> dict[str, dict[str, tuple[float, float]]]:
    """Mean and sample standard deviation of each metric over repeated runs."""
    out: dict[str, dict[str, tuple[float, float]]] = {}
    for t in sorted(reports[0].domains):
        hr = np.array([r.domains[t].hr for r in reports])
        nd = np.array([r.domains[t].ndcg for r in reports])
        ddof = 1 if len(reports) > 1 else 0
        out[t] = {"hr": (float(hr.mean()), float(hr.std(ddof=ddof))), "ndcg": (float(nd.mean()), float(nd.std(ddof=ddof)))}
    return out
