"""Command-line entry point: ``matchattn <subcommand> [options]``.

Exit status is 0 on success, 1 when a check fails and 2 on usage errors.
Every subcommand that takes ``--out`` also writes its results there as CSV.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("matchattn")


def _out_dir(args) -> Path | None:
    if getattr(args, "out", None) is None:
        return None
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ------------------------------------------------------------- subcommands


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(args.only)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f}s)")
    if (d := _out_dir(args)) is not None:
        _write_csv(d / "selftest.csv", ("check", "ok", "detail", "seconds"),
                   [(r.name, int(r.ok), r.detail, f"{r.seconds:.3f}") for r in results])
    return 0 if all(r.ok for r in results) else 1


def cmd_gradcheck(args) -> int:
    from .gradsweep import run_sweeps

    reports = run_sweeps(seed=args.seed, max_entries=args.max_entries)
    ok = True
    rows = []
    for target, r in reports:
        good = r.max_rel < 1e-3 and r.frac_below >= 0.99
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} {target}/{r.name}: n={r.n} max_rel={r.max_rel:.2e} "
              f"below_1e-4={r.frac_below:.3f}")
        rows.append((target, r.name, r.n, f"{r.max_rel:.3e}", f"{r.frac_below:.4f}"))
    if (d := _out_dir(args)) is not None:
        _write_csv(d / "gradcheck.csv", ("target", "variable", "entries", "max_rel", "frac_below_1e-4"), rows)
    return 0 if ok else 1


def cmd_bench(args) -> int:
    from .bench import bench_attention, loglog_slope, rows_to_csv, sampling_ratio

    if args.threads:
        log.info("threads requested: %d (set BLAS thread variables before launch to take effect)", args.threads)
    rows = bench_attention(args.sizes, "match", args.channels, args.window, args.runs)
    rows += bench_attention(args.global_sizes, "global", args.channels, args.window, args.runs)
    sys.stdout.write(rows_to_csv(rows))
    match = [r for r in rows if r.variant == "match"]
    glob = [r for r in rows if r.variant == "global"]
    if len(match) > 1:
        print(f"# match slope {loglog_slope(match):.3f}")
    if len(glob) > 1:
        print(f"# global slope {loglog_slope(glob):.3f}")
    print(f"# direct/match sim+agg ratio {sampling_ratio(128, args.channels, args.window, args.runs):.2f}")
    if (d := _out_dir(args)) is not None:
        (d / "bench.csv").write_text(rows_to_csv(rows))
    return 0


def cmd_flops(args) -> int:
    from .decoder import preset
    from .flops import decoder_flops

    H = args.res
    W = args.width or args.res
    cfg = preset(args.preset, args.task)
    b = decoder_flops(cfg, H, W)
    rows = [("qk_flops", b.qk_flops), ("bsm_flops", b.bsm_flops), ("agg_flops", b.agg_flops),
            ("attention_flops", b.attention_flops), ("tensor_flops", b.tensor_flops), ("total", b.total),
            ("attn_memory", b.attn_memory)]
    for k, v in rows:
        print(f"{k}\t{v}\t{v / 1e12:.4f}T")
    if (d := _out_dir(args)) is not None:
        _write_csv(d / "flops.csv", ("quantity", "value"), rows)
    return 0


def cmd_gen(args) -> int:
    from .io import write_flo, write_pfm, write_pnm
    from .synthetic import gen_scene

    sc = gen_scene(args.kind, args.height, args.width, seed=args.seed)
    d = _out_dir(args) or Path(".")
    write_pnm(d / "im0.ppm", sc.I0)
    write_pnm(d / "im1.ppm", sc.I1)
    if args.kind == "smooth_warp":
        write_flo(d / "gt0.flo", sc.R0)
        write_flo(d / "gt1.flo", sc.R1)
    else:
        write_pfm(d / "gt0.pfm", -sc.R0[..., 0])
        write_pfm(d / "gt1.pfm", sc.R1[..., 0])
    write_pnm(d / "noc0.pgm", sc.noc0.astype(np.uint8) * 255)
    write_pnm(d / "noc1.pgm", sc.noc1.astype(np.uint8) * 255)
    _write_csv(d / "scene.csv", ("key", "value"), [("kind", sc.kind), ("seed", sc.seed)] + sorted(
        (k, v) for k, v in sc.params.items()))
    print(f"wrote {sc.kind} scene to {d}")
    return 0


def cmd_train_toy(args) -> int:
    from .config import load_config
    from .decoder import preset
    from .synthetic import gen_scene
    from .training import TrainConfig, resolve_seed, save_checkpoint, train_toy

    if args.config:
        dcfg, tcfg = load_config(args.config)
    else:
        dcfg, tcfg = preset(args.preset, args.task), TrainConfig()
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    tcfg = TrainConfig(**{**tcfg.__dict__, **overrides})
    tcfg = TrainConfig(**{**tcfg.__dict__, "seed": resolve_seed(tcfg.seed)})
    kind = args.kind or ("constant_shift" if dcfg.task == "stereo" else "smooth_warp")
    scene = gen_scene(kind, args.height, args.width, seed=tcfg.seed)
    d = _out_dir(args) or Path("train_out")
    d.mkdir(parents=True, exist_ok=True)

    def report(step, row):
        if step % args.log_every == 0 or step == tcfg.steps - 1:
            print(f"step {step} loss {row['loss']:.4f} epe {row['epe']:.4f}", flush=True)

    model, trace = train_toy([scene], tcfg, dcfg, trace_path=d / "trace.csv", callback=report)
    save_checkpoint(d / "ckpt", model, {"steps": tcfg.steps, "seed": tcfg.seed, "scene": kind})
    print(f"final noc EPE {trace[-1]['epe']:.4f}; checkpoint in {d / 'ckpt'}")
    return 0


def _read_image(path) -> np.ndarray:
    from .io import read_pnm

    a = read_pnm(path).astype(np.float64) / 255.0
    return np.repeat(a[..., None], 3, axis=-1) if a.ndim == 2 else a


def cmd_infer(args) -> int:
    from .autograd import no_record
    from .io import write_flo, write_mtn1, write_pfm
    from .training import load_checkpoint

    model = load_checkpoint(args.ckpt)
    I0, I1 = _read_image(args.left), _read_image(args.right)
    with no_record():
        out = model(I0, I1)
    d = _out_dir(args) or Path(".")
    if model.cfg.task == "stereo":
        write_pfm(d / "disp0.pfm", out.disparity)
        write_pfm(d / "disp1.pfm", out.R.data[1, ..., 0])
        pred = out.disparity
    else:
        write_flo(d / "flow0.flo", out.R.data[0])
        write_flo(d / "flow1.flo", out.R.data[1])
        pred = out.R.data[0, ..., 0]
    # per-head self sampling offsets, [view, H, W, head, (x, y)]
    write_mtn1(d / "self_rpos.mtn", out.sR.data)
    sr = out.sR.data[0].mean(axis=2)
    _write_csv(d / "summary.csv", ("quantity", "value"), [
        ("task", model.cfg.task), ("mean_pred_x", float(np.mean(pred))),
        ("mean_self_rpos_x", float(sr[..., 0].mean())), ("mean_self_rpos_y", float(sr[..., 1].mean())),
    ])
    print(f"wrote predictions to {d}")
    return 0


def _load_field(path):
    from .io import read_flo, read_pfm, read_pnm

    p = str(path)
    if p.endswith(".flo"):
        return read_flo(p)
    if p.endswith(".pfm"):
        return read_pfm(p)
    if p.endswith((".pgm", ".ppm")):
        return read_pnm(p)
    raise ValueError(f"unsupported file type: {p}")


def cmd_eval(args) -> int:
    from .metrics import compute_metrics

    pred, gt = _load_field(args.pred), _load_field(args.gt)
    noc = _load_field(args.noc) > 127 if args.noc else None
    rep = compute_metrics(pred, gt, noc=noc)
    rows = list(rep.rows())
    for region, k, v in rows:
        print(f"{region}\t{k}\t{v:.6g}" if isinstance(v, float) else f"{region}\t{k}\t{v}")
    if (d := _out_dir(args)) is not None:
        _write_csv(d / "metrics.csv", ("region", "metric", "value"), rows)
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="matchattn", description="windowed matching attention tools")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("selftest", help="run the invariant suite")
    s.add_argument("--only", nargs="*", default=None)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_selftest)

    s = sub.add_parser("gradcheck", help="finite-difference gradient sweeps")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-entries", type=int, default=40)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench", help="attention latency scaling")
    s.add_argument("--sizes", type=int, nargs="+", default=[64, 128, 256, 512])
    s.add_argument("--global-sizes", type=int, nargs="+", default=[32, 64, 128])
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--window", type=int, default=3)
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--threads", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("flops", help="closed-form operation counts")
    s.add_argument("--preset", default="T", choices=["desk", "T", "S", "B"])
    s.add_argument("--task", default="stereo", choices=["stereo", "flow"])
    s.add_argument("--res", type=int, default=1536)
    s.add_argument("--width", type=int, default=None)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("gen", help="write a synthetic scene")
    s.add_argument("--kind", default="constant_shift", choices=["constant_shift", "two_layer", "smooth_warp"])
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("train-toy", help="overfit a synthetic scene")
    s.add_argument("--task", default="stereo", choices=["stereo", "flow"])
    s.add_argument("--preset", default="desk", choices=["desk", "T", "S", "B"])
    s.add_argument("--kind", default=None, choices=["constant_shift", "two_layer", "smooth_warp"])
    s.add_argument("--height", type=int, default=128)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--config")
    s.add_argument("--log-every", type=int, default=50)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_train_toy)

    s = sub.add_parser("infer", help="run a checkpoint on an image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--left", required=True)
    s.add_argument("--right", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("eval", help="score a prediction file against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--noc")
    s.add_argument("--out")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
