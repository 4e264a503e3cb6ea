"""Command-line entry point: verify | train | eval | bench | ablate.

Every subcommand honors --seed (default 17) and records it in its
outputs; non-timing outputs are bit-reproducible for a fixed seed.
Config files are JSON with SepNetConfig keys; --set key=value overrides
individual fields and unknown keys are fatal.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import verify as verify_mod
from .omniscan import DIRECTION_PRESETS
from .sepnet import (
    SepNetConfig, evaluate, load_checkpoint, save_checkpoint, train,
)
from .signal import si_sdr, si_sdri, sdr, sdri, wav_read

__all__ = ["main"]

ABLATION_DISCLAIMER = (
    "# toy-data ablation: mechanics check only; desk-scale training cannot "
    "resolve sub-dB configuration differences")


def worker_count() -> int:
    cap = os.environ.get("OA_NUM_THREADS")
    n = os.cpu_count() or 1
    if cap is not None:
        n = max(1, min(n, int(cap)))
    return n


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def load_config(path: str | None, overrides: list[str]) -> SepNetConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
    for item in overrides:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key] = _coerce(value)
    return SepNetConfig.from_dict(data)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------

def cmd_verify(args) -> int:
    results = verify_mod.all_suites(seed=args.seed)
    print(f"seed {args.seed}")
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  {status}  max_err={r.max_err:.3e}  tol={r.tolerance:.0e}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print("failed suites: " + ", ".join(failed))
        return 1
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.set or [])
    out = _outdir(args)
    log_rows = []

    def log(msg):
        print(msg)

    model, opt, history, test_seeds = train(
        config, seed=args.seed, max_steps=args.steps,
        time_budget_s=args.time_budget,
        target_si_sdri=args.target_sisdri,
        log=log if not args.quiet else None,
        checkpoint_path=out / "checkpoint.oasep")
    save_checkpoint(out / "checkpoint.oasep", model, opt, len(history["loss"]))
    with open(out / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(history["loss"], history["lr"]), 1):
            writer.writerow([i, repr(loss), repr(lr)])
    with open(out / "history.json", "w") as fh:
        json.dump({"seed": args.seed, **history}, fh)
    print(f"trained {len(history['loss'])} steps; checkpoint in {out}")
    if history["test_si_sdri"]:
        print(f"final held-out SI-SDRi {history['test_si_sdri'][-1]:.2f} dB")
    return 0


def _write_metrics_csv(path, rows, seed):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "si_sdr", "si_sdri", "sdr", "sdri"])
        for r in rows:
            writer.writerow([r["utterance_id"], r["si_sdr"], r["si_sdri"],
                             r["sdr"], r["sdri"]])
        writer.writerow([f"mean(seed={seed})",
                         float(np.mean([r["si_sdr"] for r in rows])),
                         float(np.mean([r["si_sdri"] for r in rows])),
                         float(np.mean([r["sdr"] for r in rows])),
                         float(np.mean([r["sdri"] for r in rows]))])


def cmd_eval(args) -> int:
    out = _outdir(args)
    if args.est_dir is not None:
        rows = _eval_wav_dirs(args)
    else:
        model, _, _, _ = load_checkpoint(args.checkpoint)
        seeds = [args.seed * 1_000_000 + 900_000 + i for i in range(args.n_utts)]
        rows = evaluate(model, model.config, seeds)
    _write_metrics_csv(out / "metrics.csv", rows, args.seed)
    mean = float(np.mean([r["si_sdri"] for r in rows]))
    print(f"evaluated {len(rows)} utterances; mean SI-SDRi {mean:.2f} dB; "
          f"CSV in {out / 'metrics.csv'}")
    return 0


def _eval_wav_dirs(args) -> list[dict]:
    est_dir, ref_dir, mix_dir = Path(args.est_dir), Path(args.ref_dir), Path(args.mix_dir)
    names = sorted(p.name for p in est_dir.glob("*.wav"))
    missing = [str(d / n) for n in names for d in (ref_dir, mix_dir)
               if not (d / n).exists()]
    if missing:
        raise SystemExit("missing files:\n" + "\n".join(missing))

    def one(name):
        est = wav_read(est_dir / name).samples
        ref = wav_read(ref_dir / name).samples
        mix = wav_read(mix_dir / name).samples
        return {"utterance_id": name,
                "si_sdr": si_sdr(est, ref),
                "si_sdri": si_sdri(est, ref, mix),
                "sdr": sdr(est, ref),
                "sdri": sdri(est, ref, mix)}

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        return list(pool.map(one, names))


def cmd_bench(args) -> int:
    out = _outdir(args)
    t_grid = [int(t) for t in args.t_grid.split(",")]
    rows = bench_mod.run_benchmark(
        t_grid, B=args.batch, C=args.channels, F=args.freq_bins,
        H=args.hidden, direction_set=args.directions,
        attn_width=args.attn_width, repeats=args.repeats, seed=args.seed)
    bench_mod.write_csv(out / "bench.csv", rows)
    oa = [r for r in rows if r.mechanism == "oa"]
    attn = [r for r in rows if r.mechanism == "self_attention"]
    oa_slope = bench_mod.loglog_slope([r.T for r in oa], [r.macs for r in oa])
    attn_slope = bench_mod.loglog_slope([r.T for r in attn], [r.macs for r in attn])
    crossover = bench_mod.crossover_length(
        args.batch, args.channels, args.freq_bins, args.hidden,
        args.directions, args.attn_width)
    summary = {
        "seed": args.seed,
        "oa_macs_slope": oa_slope,
        "attention_macs_slope": attn_slope,
        "crossover_T": crossover,
    }
    with open(out / "bench_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"MACs log-log slopes: oa {oa_slope:.3f}, attention {attn_slope:.3f}; "
          f"attention exceeds oa beyond T~{crossover}; CSV in {out / 'bench.csv'}")
    return 0


ABLATION_CELLS = [
    ("4d_tf", "both"), ("6d_tfc", "both"), ("8d_tf", "both"), ("10d_tfc", "both"),
    ("10d_tfc", "front"), ("10d_tfc", "back"), ("10d_tfc", "both"),
]
ABLATION_LABELS = ["4d_tf", "6d_tfc", "8d_tf", "10d_tfc", "front", "back", "both"]


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set or [])
    out = _outdir(args)
    rows = []
    for label, (dirs, placement) in zip(ABLATION_LABELS, ABLATION_CELLS):
        cfg = SepNetConfig.from_dict(
            {**asdict(base), "direction_set": dirs, "oa_placement": placement})
        try:
            model, _, history, test_seeds = train(
                cfg, seed=args.seed, max_steps=args.steps, log=None)
            metrics = evaluate(model, cfg, test_seeds)
            rows.append({
                "configuration": label,
                "direction_set": dirs,
                "oa_placement": placement,
                "params": model.param_count(),
                "si_sdri": float(np.mean([r["si_sdri"] for r in metrics])),
                "sdri": float(np.mean([r["sdri"] for r in metrics])),
                "status": "ok",
            })
        except Exception as exc:   # keep remaining cells running
            rows.append({
                "configuration": label, "direction_set": dirs,
                "oa_placement": placement, "params": "",
                "si_sdri": "", "sdri": "", "status": f"error: {exc}",
            })
        print(f"cell {label}: {rows[-1]['status']}")
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        fh.write(ABLATION_DISCLAIMER + f" (data seed {args.seed})\n")
        writer = csv.DictWriter(fh, fieldnames=[
            "configuration", "direction_set", "oa_placement", "params",
            "si_sdri", "sdri", "status"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"ablation table in {path}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oasep")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=17)
        p.add_argument("--out", default="out")
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")

    p = sub.add_parser("verify", help="run the oracle/gradient/equivariance suites")
    common(p)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("train", help="train the toy separation model")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--time-budget", type=float, default=None)
    p.add_argument("--target-sisdri", type=float, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or WAV directories")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--n-utts", type=int, default=8)
    p.add_argument("--est-dir", default=None)
    p.add_argument("--ref-dir", default=None)
    p.add_argument("--mix-dir", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="MACs + wall-clock benchmark")
    common(p)
    p.add_argument("--t-grid", default="250,500,1000,2000,4000")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--freq-bins", type=int, default=16)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--directions", default="10d_tfc",
                   choices=sorted(DIRECTION_PRESETS))
    p.add_argument("--attn-width", type=int, default=64)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("ablate", help="direction-set / placement ablation table")
    common(p)
    p.add_argument("--steps", type=int, default=30)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
