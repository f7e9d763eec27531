"""Command-line entry point.

    cdrdeconf gen        write a synthetic dataset and its ground truth
    cdrdeconf pretrain   phase 1, checkpoint into --out
    cdrdeconf disentangle phase 2 from the phase-1 checkpoint
    cdrdeconf train      phase 3 from the phase-1 and phase-2 checkpoints
    cdrdeconf evaluate   rank held-out items with the phase-3 checkpoint
    cdrdeconf pipeline   all of the above in one go
    cdrdeconf sweep      one pipeline per value of J, lambda or alpha
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .checkpoint import Checkpoint, save_checkpoint
from .config import SWEEP_GRIDS, VARIANTS, PipelineConfig
from .data import generate_synthetic, save_ground_truth_manifest, write_domain_tsv
from .pipeline import (
    load_disentangle,
    load_finetune,
    load_pretrain,
    phase_disentangle,
    phase_evaluate,
    phase_finetune,
    phase_pretrain,
    prepare,
    run_pipeline,
    run_sweep,
    save_disentangle,
    save_finetune,
    save_pretrain,
    write_report,
)

log = logging.getLogger("cdrdeconf")


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config, seed=args.seed, variant=getattr(args, "variant", None))
    if getattr(args, "confounder_free", False):
        syn = cfg.data.synthetic
        syn.beta_sd = 0.0
        syn.beta_cd = 0.0
    return cfg


def _write_config(out: Path, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    files = [out / "domain_a.tsv", out / "domain_b.tsv", out / "ground_truth.json"]
    existing = [f for f in files if f.exists()]
    if existing and not args.force:
        log.error("%s exists; pass --force to overwrite", existing[0])
        return 1
    ds, truth = generate_synthetic(cfg.data.synthetic, cfg.data_seed)
    out.mkdir(parents=True, exist_ok=True)
    write_domain_tsv(files[0], ds.a)
    write_domain_tsv(files[1], ds.b)
    save_ground_truth_manifest(files[2], truth)
    save_checkpoint(out / "ground_truth", Checkpoint("ground_truth", cfg.hash(), truth.blocks(), truth.manifest()))
    for t in ("a", "b"):
        d = ds.domain(t)
        log.info("domain %s: %d users, %d items, %d interactions, density %.4f",
                 t, d.n_users, d.n_items, d.n_interactions, d.density)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    _write_config(out, cfg)
    backbone = phase_pretrain(cfg, prepare(cfg))
    save_pretrain(out, cfg, backbone, args.force)
    return 0


def cmd_disentangle(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    backbone = load_pretrain(out, cfg, prepare(cfg))
    dis = phase_disentangle(cfg, backbone)
    save_disentangle(out, cfg, dis, args.force)
    for k, v in sorted(dis.diagnostics.items()):
        log.info("%s = %.6g", k, v)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    prep = prepare(cfg)
    backbone = load_pretrain(out, cfg, prep)
    dis = load_disentangle(out, cfg)
    nets = phase_finetune(cfg, prep, backbone, dis)
    save_finetune(out, cfg, backbone, nets, args.force)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    prep = prepare(cfg)
    backbone, nets = load_finetune(out, cfg, prep)
    dis = load_disentangle(out, cfg)
    t0 = time.perf_counter()
    report = phase_evaluate(cfg, prep, backbone, nets, dis)
    report.timings = {"evaluate": time.perf_counter() - t0}
    write_report(out, report, args.force)
    sys.stdout.write(report.to_table())
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    report = run_pipeline(cfg, args.out, args.force)
    sys.stdout.write(report.to_table())
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    values = None
    if args.values:
        values = [float(v) if args.param != "J" else int(v) for v in args.values.split(",")]
    rows = run_sweep(cfg, args.param, values, args.out, args.force)
    failed = sorted({r["value"] for r in rows if r["status"] != "ok"})
    if failed:
        log.warning("sweep values that failed: %s", failed)
    sys.stdout.write(json.dumps(rows, indent=1) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrdeconf", description=__doc__.split("\n\n")[0])
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, variant=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        if variant:
            p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--out", default="run", help="output directory (default: ./run)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    p = common(sub.add_parser("gen", help="write a synthetic dataset"), variant=False)
    p.add_argument("--confounder-free", action="store_true", help="set all confounder weights to zero")
    p.set_defaults(func=cmd_gen)
    for name, fn, text in (
        ("pretrain", cmd_pretrain, "phase 1: backbone pretraining"),
        ("disentangle", cmd_disentangle, "phase 2: confounder extraction"),
        ("train", cmd_train, "phase 3: deconfounded fine-tuning"),
        ("evaluate", cmd_evaluate, "leave-one-out ranking report"),
        ("pipeline", cmd_pipeline, "all phases"),
    ):
        common(sub.add_parser(name, help=text)).set_defaults(func=fn)
    p = common(sub.add_parser("sweep", help="sensitivity sweep"))
    p.add_argument("--param", required=True, choices=sorted(SWEEP_GRIDS))
    p.add_argument("--values", help="comma-separated values (default: the preset grid)")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileExistsError, FileNotFoundError, ValueError, RuntimeError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
