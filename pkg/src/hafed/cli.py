"""Command-line entry point.

    hafed generate   --config C --out DIR
    hafed run        --config C [--data DIR] --out DIR [--seed N] [--workers W]
    hafed ablate     --config C [--data DIR] --out DIR [--seeds 0 1 2]
    hafed robustness --config C [--checkpoint CKPT] --out DIR [--rates ...] [--seeds ...]
    hafed eval-checkpoint --config C --checkpoint CKPT [--data DIR] --out DIR

Exit codes: 0 ok, 2 configuration or input error, 3 a run diverged.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from hafed import __version__
from hafed.config import ConfigError, ExperimentConfig, load_config
from hafed.data import (SchemaError, SynthDataset, dataset_hash, export_csv, generate, load_dataset,
                        write_manifest)
from hafed.eval import evaluate, missing_rate_sweep, summarize_sweep
from hafed.federation import run_experiment
from hafed.nn import ArchSpec, HAFedformer
from hafed.params import _atomic_write, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

LADDER = ("ha_fedformer", "ha_fedformer_plus", "ha_fedformer_pp_s", "ha_fedformer_pp")
S_SWEEP = (1, 3, 5, 7, 10)
DEFAULT_RATES = (0.0, 0.3, 0.5, 0.7)
METRICS = ("acc7", "acc2", "f1", "mae", "corr")

log = logging.getLogger("hafed")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_csv(path: Path, header: list, rows: list) -> None:
    """Write rows to ``path`` via a temporary file so readers never see a partial CSV."""
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def _write_manifest(out: Path, cfg: ExperimentConfig, ds_hash: str, started: str, outputs: list,
                    extra: dict | None = None) -> None:
    doc = {"config": cfg.to_dict(), "dataset_hash": ds_hash, "version": __version__,
           "started": started, "finished": _now(), "outputs": sorted(outputs),
           "acc2_zero_labels": "excluded" if cfg.acc2_exclude_zero else "included"}
    if extra:
        doc.update(extra)
    missing = [o for o in outputs if not (out / o).exists()]
    if missing:
        raise RuntimeError(f"manifest references missing outputs: {missing}")
    _atomic_write(out / "manifest.json", json.dumps(doc, indent=2, sort_keys=True).encode())


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _dataset(cfg: ExperimentConfig, data_dir) -> SynthDataset:
    if data_dir is None:
        return generate(cfg.data, cfg.dataset_seed)
    return load_dataset(data_dir, cfg.arch.modalities, cfg.arch.input_dims)


def _metric_rows(prefix: list, record) -> list:
    return [prefix + [name, _fmt(getattr(record, name))] for name in METRICS]


# --- subcommands -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = Path(args.out)
    ds = generate(cfg.data, cfg.dataset_seed)
    export_csv(ds, out, cfg.data.modalities)
    write_manifest(ds, out / "manifest.json")
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples to {out} "
          f"(hash {dataset_hash(ds)[:12]})")
    return EXIT_OK


def cmd_run(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ds = _dataset(cfg, args.data)
    out = Path(args.out)
    res = run_experiment(cfg, ds, out_dir=out, workers=args.workers)
    save_checkpoint(out / "final.ckpt", res.params, cfg.arch.to_dict())
    outputs = ["rounds.csv", "timings.csv", "final.ckpt", "final.ckpt.json"]
    _write_manifest(out, cfg, dataset_hash(ds), started, outputs,
                    {"diverged": res.diverged, "rounds_completed": res.logs[-1].round})
    last = res.logs[-1].metrics
    print(f"round {res.logs[-1].round}: mae={last.mae:.4f} acc7={last.acc7:.4f} "
          f"shrinkage={res.logs[-1].shrinkage:.4f}")
    if res.diverged:
        print(f"diverged: {res.logs[-1].note}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def ablation_conditions(cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """(condition name, config) for the variant ladder, modality subsets and the S sweep."""
    conds = [(f"variant={v}", cfg.replace(variant=v)) for v in LADDER]
    for m in cfg.arch.modalities:
        kept = "&".join(x for x in cfg.arch.modalities if x != m)
        conds.append((f"modalities={kept}", cfg.replace(drop_modalities=(m,))))
    conds += [(f"samples={s}", cfg.replace(samples=s)) for s in S_SWEEP]
    return conds


def cmd_ablate(args) -> int:
    started = _now()
    base = _load_cfg(args)
    ds = _dataset(base, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seeds if args.seeds else [base.seed]
    rows, participants, diverged = [], [], False
    for name, cfg in ablation_conditions(base):
        for seed in seeds:
            t0 = time.perf_counter()
            res = run_experiment(cfg.replace(seed=seed), ds, workers=args.workers)
            diverged |= res.diverged
            final = res.logs[-1]
            rows += _metric_rows([name, cfg.variant, seed], final.metrics)
            rows.append([name, cfg.variant, seed, "shrinkage", _fmt(final.shrinkage)])
            participants += [[name, seed, r.round, " ".join(map(str, r.clients))] for r in res.logs[1:]]
            log.info("%s seed %d: mae %.4f (%.0fs)", name, seed, final.metrics.mae, time.perf_counter() - t0)
    _write_csv(out / "ablation.csv", ["condition", "variant", "seed", "metric", "value"], rows)
    _write_csv(out / "participants.csv", ["condition", "seed", "round", "clients"], participants)
    _write_manifest(out, base, dataset_hash(ds), started, ["ablation.csv", "participants.csv"],
                    {"seeds": list(seeds)})
    print(f"wrote {len(rows)} rows to {out / 'ablation.csv'}")
    return EXIT_DIVERGED if diverged else EXIT_OK


def _trained_params(cfg: ExperimentConfig, ds, checkpoint, workers):
    if checkpoint is not None:
        params, arch = load_checkpoint(checkpoint)
        if arch is not None and ArchSpec.from_dict(arch) != cfg.arch:
            raise ConfigError(f"checkpoint {checkpoint} was saved for a different architecture")
        return params, False
    res = run_experiment(cfg, ds, workers=workers)
    return res.params, res.diverged


def cmd_robustness(args) -> int:
    started = _now()
    cfg = _load_cfg(args)
    ds = _dataset(cfg, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params, diverged = _trained_params(cfg, ds, args.checkpoint, args.workers)
    rates = args.rates if args.rates else list(DEFAULT_RATES)
    seeds = args.seeds if args.seeds else [0, 1, 2]
    if any(not 0 <= r < 1 for r in rates):
        raise ConfigError("--rates: missing rates must lie in [0, 1)")
    sweep = missing_rate_sweep(HAFedformer(cfg.arch, cfg.loss), params, ds.test, rates, seeds)
    rows = [[r["missing_rate"], r["seed"], name, _fmt(r[name])] for r in sweep for name in METRICS]
    _write_csv(out / "sweep.csv", ["missing_rate", "seed", "metric", "value"], rows)
    summary = [[s["missing_rate"], s["metric"], repr(s["mean"]), repr(s["var"]), s["n_seeds"]]
               for name in METRICS if all(r[name] is not None for r in sweep)
               for s in summarize_sweep(sweep, name)]
    _write_csv(out / "summary.csv", ["missing_rate", "metric", "mean", "var", "n_seeds"], summary)
    _write_manifest(out, cfg, dataset_hash(ds), started, ["sweep.csv", "summary.csv"],
                    {"rates": rates, "seeds": seeds, "checkpoint": args.checkpoint})
    for s in summarize_sweep(sweep, "mae"):
        print(f"missing rate {s['missing_rate']:.2f}: mae {s['mean']:.4f} (var {s['var']:.2e})")
    return EXIT_DIVERGED if diverged else EXIT_OK


def cmd_eval_checkpoint(args) -> int:
    cfg = _load_cfg(args)
    ds = _dataset(cfg, args.data)
    params, _ = _trained_params(cfg, ds, args.checkpoint, args.workers)
    rec, _ = evaluate(HAFedformer(cfg.arch, cfg.loss), params, ds.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "metrics.csv", ["split", "metric", "value"],
               [["test", name, _fmt(getattr(rec, name))] for name in METRICS])
    print(" ".join(f"{name}={_fmt(getattr(rec, name))}" for name in METRICS))
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hafed", description="Hierarchical multimodal federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, seed=True):
        p.add_argument("--config", help="JSON config (defaults used when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", help="dataset directory written by 'generate' (generated in memory if omitted)")
            p.add_argument("--workers", type=int, default=1, help="processes for client fan-out")
        if seed:
            p.add_argument("--seed", type=int, help="override the master seed")
        return p

    common(sub.add_parser("generate", help="write the synthetic dataset as CSV"), data=False).set_defaults(fn=cmd_generate)
    common(sub.add_parser("run", help="train one federated experiment")).set_defaults(fn=cmd_run)
    p = common(sub.add_parser("ablate", help="variant ladder, modality subsets and sample-count sweep"), seed=False)
    p.add_argument("--seeds", type=int, nargs="+", help="master seeds (default: the config seed)")
    p.set_defaults(fn=cmd_ablate)
    p = common(sub.add_parser("robustness", help="missing-modality sweep on a trained model"))
    p.add_argument("--checkpoint", help="trained checkpoint (trains from the config when omitted)")
    p.add_argument("--rates", type=float, nargs="+", help=f"missing rates (default {list(DEFAULT_RATES)})")
    p.add_argument("--seeds", type=int, nargs="+", help="masking seeds (default 0 1 2)")
    p.set_defaults(fn=cmd_robustness)
    p = common(sub.add_parser("eval-checkpoint", help="test-split metrics of a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval_checkpoint)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
