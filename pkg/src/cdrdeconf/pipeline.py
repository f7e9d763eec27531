"""Three-phase orchestration with checkpoints after every phase.

Layout of a run directory::

    config.json
    phase1-pretrain/      backbone parameters
    phase2-disentangle/   adversarial pair, ridge maps, centroid subspaces
    phase3-finetune/      backbone and prediction networks after fine-tuning
    report.json report.txt report.csv timings.json

All computation is float64; each phase ends by rounding its state to the
stored float32 precision, so resuming from a checkpoint and continuing in
memory follow exactly the same trajectory.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DOMAINS, Backbone, BackboneConfig, TrainConfig, build_backbone, pretrain
from .checkpoint import Checkpoint, load_checkpoint, round_to_stored, save_checkpoint
from .config import SWEEP_GRIDS, PipelineConfig
from .confounders import (
    AdversarialConfig,
    AdversarialHistory,
    AdversarialPair,
    CandidateConfounders,
    ConfounderSubspace,
    build_subspaces,
    cdc_candidates,
    hsr_fit,
    sdc_candidates,
    train_dual_adversarial,
)
from .data import (
    DualDomainDataset,
    LeaveOneOutSplit,
    SyntheticGroundTruth,
    generate_synthetic,
    leave_one_out_split,
    load_dual_tsv,
)
from .deconfounder import CandidateScorer, ConfounderContext, FinetuneConfig, PredictionNetwork, coarse_vector, finetune
from .evaluation import MetricsReport, evaluate

log = logging.getLogger(__name__)

PHASE_DIRS = {"pretrain": "phase1-pretrain", "disentangle": "phase2-disentangle", "finetune": "phase3-finetune"}


@dataclass
class Prepared:
    dataset: DualDomainDataset
    truth: SyntheticGroundTruth | None
    split: LeaveOneOutSplit

    def item_features(self) -> dict[str, np.ndarray | None]:
        return {t: self.dataset.domain(t).item_features for t in DOMAINS}


@dataclass
class Disentangled:
    subspace: ConfounderSubspace
    coarse: np.ndarray
    pair: AdversarialPair | None = None
    history: AdversarialHistory | None = None
    hsr_maps: tuple[np.ndarray, np.ndarray] | None = None
    diagnostics: dict[str, float] = field(default_factory=dict)

    def contexts(self, cfg: PipelineConfig) -> dict[str, ConfounderContext]:
        if cfg.variant == "coarse":
            return {t: ConfounderContext(self.coarse[None, :], coarse=True) for t in DOMAINS}
        return {t: ConfounderContext(self.subspace.union(t), cfg.mixture_normalization) for t in DOMAINS}


def load_data(cfg: PipelineConfig) -> tuple[DualDomainDataset, SyntheticGroundTruth | None]:
    d = cfg.data
    if d.source == "synthetic":
        return generate_synthetic(d.synthetic, cfg.data_seed)
    ds = load_dual_tsv(d.path_a, d.path_b, d.min_interactions, d.item_features_a, d.item_features_b)
    return ds, None


def prepare(cfg: PipelineConfig) -> Prepared:
    ds, truth = load_data(cfg)
    split = leave_one_out_split(ds, cfg.eval_negatives, [cfg.seed, 10])
    return Prepared(ds, truth, split)


def backbone_config(cfg: PipelineConfig) -> BackboneConfig:
    return BackboneConfig(
        dim=cfg.dim, layers=cfg.layers, eta=cfg.eta, classifier_hidden=cfg.classifier_hidden,
        w_cls=cfg.w_cls, w_conf=cfg.w_conf, w_orth=cfg.w_orth, init_std=cfg.init_std,
    )


def new_backbone(cfg: PipelineConfig, prep: Prepared) -> Backbone:
    rng = np.random.default_rng([cfg.seed, 11])
    return build_backbone(backbone_config(cfg), prep.split, rng, prep.item_features())


# ---------------------------------------------------------------------------
# phases


def phase_pretrain(cfg: PipelineConfig, prep: Prepared) -> Backbone:
    backbone = new_backbone(cfg, prep)
    tc = TrainConfig(cfg.epochs_pretrain, cfg.batch_size, cfg.lr, cfg.train_negatives)
    pretrain(backbone, prep.split, tc, cfg.seed)
    round_to_stored(backbone.params)
    return backbone


def _mean_abs_corr(x: np.ndarray, y: np.ndarray) -> float:
    xs = (x - x.mean(0)) / (x.std(0) + 1e-12)
    ys = (y - y.mean(0)) / (y.std(0) + 1e-12)
    return float(np.abs(xs.T @ ys / x.shape[0]).mean())


def phase_disentangle(cfg: PipelineConfig, backbone: Backbone) -> Disentangled:
    bundle = backbone.bundle()
    z_a, z_b = bundle.Z_spe["a"], bundle.Z_spe["b"]
    E_a, E_b = bundle.E_user["a"], bundle.E_user["b"]
    diag: dict[str, float] = {}
    pair = history = maps = None
    sdc_a = sdc_b = cdc_ab = cdc_ba = None
    if cfg.variant != "cross":
        acfg = AdversarialConfig(
            cfg.epochs_disentangle, cfg.adversarial_batch_size, cfg.lr, cfg.effective_lam,
            cfg.adversarial_hidden, cfg.generator_init,
        )
        pair, history = train_dual_adversarial(z_a, z_b, acfg, cfg.seed)
        round_to_stored(pair.arrays())
        sdc_a, sdc_b = sdc_candidates(pair, z_a, z_b)
        diag["cycle_initial"] = history.initial_cycle
        diag["cycle_final"] = history.final_cycle
        spe_norm = np.linalg.norm(np.vstack([z_a, z_b]), axis=1).mean()
        diag["sdc_norm_ratio"] = float(np.linalg.norm(np.vstack([sdc_a, sdc_b]), axis=1).mean() / spe_norm)
        diag["independence_EuA_sdcB"] = _mean_abs_corr(E_a, sdc_b)
    if cfg.variant != "single":
        maps = hsr_fit(E_a, E_b, cfg.alpha)
        cdc_ab, cdc_ba = cdc_candidates(E_a, E_b, maps)
    cand = CandidateConfounders(sdc_a, sdc_b, cdc_ab, cdc_ba, *(maps or (None, None)))
    subspace = build_subspaces(cand, cfg.J_sd_a, cfg.J_sd_b, cfg.J_cd, seed=cfg.seed)
    out = Disentangled(subspace, coarse_vector(cand), pair, history, maps, diag)
    round_to_stored(out.subspace.arrays() | {"coarse": out.coarse})
    return out


def new_prediction_networks(cfg: PipelineConfig) -> dict[str, PredictionNetwork]:
    rng = np.random.default_rng([cfg.seed, 12])
    return {
        t: PredictionNetwork.init(cfg.dim, rng, cfg.e, cfg.q, tuple(cfg.mlp_hidden), std=cfg.init_std)
        for t in DOMAINS
    }


def phase_finetune(
    cfg: PipelineConfig, prep: Prepared, backbone: Backbone, dis: Disentangled
) -> dict[str, PredictionNetwork]:
    nets = new_prediction_networks(cfg)
    fc = FinetuneConfig(cfg.epochs_finetune, cfg.batch_size, cfg.lr, cfg.train_negatives)
    finetune(backbone, nets, dis.contexts(cfg), prep.split, fc, cfg.seed)
    round_to_stored(backbone.params)
    for t in DOMAINS:
        round_to_stored(nets[t].arrays())
    return nets


def phase_evaluate(
    cfg: PipelineConfig, prep: Prepared, backbone: Backbone, nets: dict[str, PredictionNetwork], dis: Disentangled
) -> MetricsReport:
    bundle = backbone.bundle()
    contexts = dis.contexts(cfg)
    scorers = {t: CandidateScorer(bundle.E_user[t], bundle.E_item[t], contexts[t], nets[t]) for t in DOMAINS}
    # ranking uses logits: identical order to probabilities without saturation ties
    report = evaluate(lambda t, u, i: scorers[t].logits(u, i), prep.split, cfg.seed, cfg.top_k, cfg.variant)
    report.diagnostics = dict(dis.diagnostics)
    return report


# ---------------------------------------------------------------------------
# checkpoints


def _phase_dir(out: Path, phase: str) -> Path:
    return Path(out) / PHASE_DIRS[phase]


def _guard(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise FileExistsError(f"{path} already exists; pass --force to overwrite")


def save_pretrain(out: Path, cfg: PipelineConfig, backbone: Backbone, force: bool = False) -> None:
    path = _phase_dir(out, "pretrain")
    _guard(path, force)
    blocks = {f"backbone.{k}": v for k, v in backbone.params.items()}
    save_checkpoint(path, Checkpoint("pretrain", cfg.hash(), blocks, {"sparser": backbone.sparser}))


def restore_backbone(cfg: PipelineConfig, prep: Prepared, blocks: dict[str, np.ndarray]) -> Backbone:
    backbone = new_backbone(cfg, prep)
    for k, v in backbone.params.items():
        key = f"backbone.{k}"
        if key not in blocks:
            raise KeyError(f"checkpoint lacks block {key!r}")
        if blocks[key].shape != v.shape:
            raise ValueError(f"block {key!r} has shape {blocks[key].shape}, expected {v.shape}")
        v[...] = blocks[key]
    return backbone


def load_pretrain(out: Path, cfg: PipelineConfig, prep: Prepared) -> Backbone:
    ck = load_checkpoint(_phase_dir(out, "pretrain"), "pretrain", cfg.hash())
    return restore_backbone(cfg, prep, ck.blocks)


def save_disentangle(out: Path, cfg: PipelineConfig, dis: Disentangled, force: bool = False) -> None:
    path = _phase_dir(out, "disentangle")
    _guard(path, force)
    blocks = dict(dis.subspace.arrays())
    blocks["coarse.vector"] = dis.coarse
    if dis.pair is not None:
        blocks.update({f"adv.{k}": v for k, v in dis.pair.arrays().items()})
    if dis.hsr_maps is not None:
        blocks["hsr.W_ab"], blocks["hsr.W_ba"] = dis.hsr_maps
    meta = {
        "J": {"sd_a": int(dis.subspace.sd_a.shape[0]), "sd_b": int(dis.subspace.sd_b.shape[0]),
              "cd": int(dis.subspace.cd.shape[0])},
        "diagnostics": dis.diagnostics,
        "history": None if dis.history is None else {
            "cycle": dis.history.cycle, "generator": dis.history.generator,
            "discriminator": dis.history.discriminator,
        },
    }
    save_checkpoint(path, Checkpoint("disentangle", cfg.hash(), blocks, meta))


def load_disentangle(out: Path, cfg: PipelineConfig) -> Disentangled:
    ck = load_checkpoint(_phase_dir(out, "disentangle"), "disentangle", cfg.hash())
    b = ck.blocks
    pair = None
    adv = {k[4:]: v for k, v in b.items() if k.startswith("adv.")}
    if adv:
        pair = AdversarialPair.from_arrays(adv, cfg.effective_lam)
    hist = None
    if ck.meta.get("history"):
        hist = AdversarialHistory(**ck.meta["history"])
    maps = (b["hsr.W_ab"], b["hsr.W_ba"]) if "hsr.W_ab" in b else None
    return Disentangled(
        ConfounderSubspace.from_arrays(b), b["coarse.vector"], pair, hist, maps, dict(ck.meta.get("diagnostics", {}))
    )


def save_finetune(out: Path, cfg: PipelineConfig, backbone: Backbone, nets, force: bool = False) -> None:
    path = _phase_dir(out, "finetune")
    _guard(path, force)
    blocks = {f"backbone.{k}": v for k, v in backbone.params.items()}
    for t in DOMAINS:
        blocks.update(nets[t].arrays(f"pred.{t}."))
    save_checkpoint(path, Checkpoint("finetune", cfg.hash(), blocks))


def load_finetune(out: Path, cfg: PipelineConfig, prep: Prepared):
    ck = load_checkpoint(_phase_dir(out, "finetune"), "finetune", cfg.hash())
    backbone = restore_backbone(cfg, prep, ck.blocks)
    nets = {t: PredictionNetwork.from_arrays(ck.blocks, f"pred.{t}.") for t in DOMAINS}
    return backbone, nets


def write_report(out: Path, report: MetricsReport, force: bool = False) -> None:
    out = Path(out)
    target = out / "report.json"
    if target.exists() and not force:
        raise FileExistsError(f"{target} already exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    target.write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "timings.json").write_text(json.dumps(report.timings, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# entry points


def _timed(timings: dict, name: str, fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    timings[name] = time.perf_counter() - t0
    return out


def run_pipeline(cfg: PipelineConfig, out: str | Path | None = None, force: bool = False) -> MetricsReport:
    """Pretrain, disentangle, fine-tune and evaluate. With ``out`` set, every
    phase is checkpointed and the report files are written there."""
    timings: dict[str, float] = {}
    if out is not None:
        out = Path(out)
        if (out / "report.json").exists() and not force:
            raise FileExistsError(f"{out / 'report.json'} already exists; pass --force to overwrite")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    prep = _timed(timings, "data", prepare, cfg)
    backbone = _timed(timings, "pretrain", phase_pretrain, cfg, prep)
    if out is not None:
        save_pretrain(out, cfg, backbone, force)
    dis = _timed(timings, "disentangle", phase_disentangle, cfg, backbone)
    if out is not None:
        save_disentangle(out, cfg, dis, force)
    nets = _timed(timings, "finetune", phase_finetune, cfg, prep, backbone, dis)
    if out is not None:
        save_finetune(out, cfg, backbone, nets, force)
    report = _timed(timings, "evaluate", phase_evaluate, cfg, prep, backbone, nets, dis)
    report.timings = timings
    if out is not None:
        write_report(out, report, force)
    return report


def resume_from_disentangle(cfg: PipelineConfig, out: str | Path, force: bool = False) -> MetricsReport:
    """Fine-tune and evaluate from the phase-1 and phase-2 checkpoints in ``out``."""
    out = Path(out)
    timings: dict[str, float] = {}
    prep = _timed(timings, "data", prepare, cfg)
    backbone = load_pretrain(out, cfg, prep)
    dis = load_disentangle(out, cfg)
    nets = _timed(timings, "finetune", phase_finetune, cfg, prep, backbone, dis)
    save_finetune(out, cfg, backbone, nets, force)
    report = _timed(timings, "evaluate", phase_evaluate, cfg, prep, backbone, nets, dis)
    report.timings = timings
    write_report(out, report, force)
    return report


def sweep_config(cfg: PipelineConfig, parameter: str, value: float) -> PipelineConfig:
    if parameter == "J":
        v = int(value)
        return cfg.replace(J_sd_a=v, J_sd_b=v, J_cd=v)
    if parameter == "lambda":
        return cfg.replace(lam=float(value))
    if parameter == "alpha":
        return cfg.replace(alpha=float(value))
    raise ValueError(f"unknown sweep parameter {parameter!r}; choose from {sorted(SWEEP_GRIDS)}")


SWEEP_COLUMNS = ["parameter", "value", "domain", "metric", "score", "status"]


def run_sweep(
    cfg: PipelineConfig,
    parameter: str,
    values=None,
    out: str | Path | None = None,
    force: bool = False,
) -> list[dict]:
    """One pipeline per value with the shared base seed. A failing value is
    recorded with NaN scores and the error message; the sweep continues."""
    values = list(SWEEP_GRIDS[parameter] if values is None else values)
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        run_dir = None if out is None else Path(out) / f"{parameter}={value}"
        try:
            report = run_pipeline(sweep_config(cfg, parameter, value), run_dir, force)
            metrics = {(t, m): getattr(report.domains[t], m) for t in DOMAINS for m in ("hr", "ndcg")}
            status = "ok"
        except Exception as exc:  # noqa: BLE001 - a sweep records failures and moves on
            log.error("sweep %s=%s failed: %s", parameter, value, exc)
            metrics = {(t, m): math.nan for t in DOMAINS for m in ("hr", "ndcg")}
            status = f"error: {type(exc).__name__}: {exc}"
        for (t, m), score in metrics.items():
            rows.append(
                {"parameter": parameter, "value": value, "domain": t, "metric": f"{m}@{cfg.top_k}",
                 "score": score, "status": status}
            )
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        with open(Path(out) / f"sweep_{parameter}.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return rows
