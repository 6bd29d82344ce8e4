"""``sct`` command line: memory-plan, train, gradcheck, sweep.

Exit codes: 0 success, 2 config/validation error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

from sct.config import load_config
from sct.errors import ConfigError, RankError, SCTError, ShapeError
from sct.memory import GB, architecture_report

log = logging.getLogger("sct")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _positive_int(text):
    try:
        val = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if val < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {val}")
    return val


def _rank_list(text):
    try:
        ranks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if len(ranks) < 2 or min(ranks) < 1:
        raise argparse.ArgumentTypeError("need at least two positive ranks")
    return ranks


def _thread_limit():
    raw = os.environ.get("SCT_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SCT_THREADS must be an integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def _overrides(args):
    out = list(args.set or [])
    if getattr(args, "steps", None) is not None:
        out.append(f"run.steps={args.steps}")
    if getattr(args, "seed", None) is not None:
        out.append(f"run.seed={args.seed}")
    if getattr(args, "out", None) is not None:
        out.append(f"outputs.dir={Path(args.out).resolve()}")
    return out


def _fmt_mb(x):
    return f"{x:.0f}" if x >= 1000 else f"{x:.1f}"


def cmd_memory_plan(args):
    cfg = load_config(args.config, args.set)
    rep = architecture_report(cfg.model, rank=args.rank, elem_size=args.elem_size)
    out = Path(args.report) if args.report else cfg.out_dir / f"memory_plan.{args.format}"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_csv() if args.format == "csv" else rep.to_json() + "\n", encoding="utf-8")

    seen = {}
    for r in rep.projection_rows():
        seen.setdefault((r.m, r.n, r.k), [r, 0])[1] += 1
    print(f"# per-layer training state (weights + grads + 2 Adam moments), elem_size={args.elem_size}")
    for (m, n, k), (r, count) in seen.items():
        sct = f"{_fmt_mb(r.mb_sct)} MB" if k else "dense"
        print(f"{m}×{n}, {_fmt_mb(r.mb_dense)} MB, {sct}, {r.compression:.0f}× (x{count}, k={k or '-'})")
    proj_dense, proj_sct = rep.projection_dense_bytes, rep.projection_sct_bytes
    print(f"dense-equivalent projection params: {rep.dense_param_count:,}")
    print(f"spectral params: {rep.spectral_param_count:,}")
    print(f"embedding/norm/head params (dense in both): {rep.fixed_param_count:,}")
    print(f"projection state: dense {proj_dense / GB:,.1f} GB, SCT {proj_sct / GB:,.3f} GB, {proj_dense / proj_sct:.1f}×")
    print(f"total state incl. embeddings: dense {rep.total_dense_bytes / GB:,.1f} GB, SCT {rep.total_sct_bytes / GB:,.3f} GB")
    print(f"report: {out}")
    if cfg.outputs.figures and not args.no_figures:
        from sct.plots import plot_memory

        print(f"figure: {plot_memory(rep, out.with_suffix('.png'))}")
    return EXIT_OK


def cmd_train(args):
    from sct.trainer import train_run

    cfg = load_config(args.config, _overrides(args))
    every = max(1, cfg.run.steps // 10)

    def progress(m):
        if m.step % every == 0 or m.step == 1:
            print(
                f"step {m.step:5d}  loss {m.loss:.4f}  smoothed {m.smoothed_loss:.4f}"
                f"  ppl {m.ppl:.2f}  ortho {m.max_ortho_err:.1e}  {m.step_seconds * 1e3:.1f} ms",
                file=sys.stderr,
            )

    res = train_run(cfg.run, progress=progress)
    print(f"metrics: {cfg.run.metrics_path}")
    print(f"ortho: {cfg.run.ortho_path}")
    print(f"checkpoint: {res.checkpoint}")
    print(f"final smoothed loss {res.final_smoothed_loss:.4f}, ppl {res.metrics[-1].ppl:.2f}")
    if res.trainer.repairs:
        print(f"warning: {res.trainer.repairs} degenerate factor column(s) repaired")
    if cfg.outputs.figures and not args.no_figures:
        from sct.plots import plot_losses
        from sct.trainer import smoothed

        losses = res.losses
        fig = plot_losses({"train": (losses, smoothed(losses))}, Path(cfg.run.metrics_path).with_suffix(".png"))
        print(f"figure: {fig}")
    return EXIT_OK


def cmd_gradcheck(args):
    from dataclasses import replace

    from sct.trainer import default_check_model, grad_check

    model_cfg = default_check_model()
    if args.config:
        model_cfg = replace(load_config(args.config, args.set).model, precision="float64")
    report = grad_check(model_cfg, trials=args.trials, tol=args.tol, seed=args.seed)
    print(f"# gradient check: {report.trials} layer trials + model checks, tol {args.tol:g}")
    for cls, err in sorted(report.max_rel_err.items()):
        status = "ok" if err <= args.tol else "FAIL"
        print(f"{cls:<20s} max rel err {err:.3e}  {status}")
    for line in report.failures[:20]:
        print(f"  {line}")
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_RUNTIME


def cmd_sweep(args):
    from sct.trainer import rank_sweep, smoothed

    cfg = load_config(args.config, _overrides(args))
    ranks = args.ranks or cfg.ranks
    if len(ranks) < 2:
        raise ConfigError("sweep needs at least two ranks")
    out_dir = cfg.out_dir / "sweep"
    results = rank_sweep(cfg.run, ranks, out_dir=out_dir)
    print("rank,params,mlp_compression,final_smoothed_loss,ppl,mean_step_s,status")
    for r in results:
        print(
            f"{r.rank},{r.params},{r.mlp_compression:.2f},{r.final_smoothed_loss:.4f},"
            f"{r.ppl:.2f},{r.mean_step_s:.4f},{r.status}"
        )
    print(f"summary: {out_dir / 'sweep.csv'}")
    if cfg.outputs.figures and not args.no_figures:
        from sct.plots import plot_losses, plot_pareto

        curves = {f"k={r.rank}": (r.losses, smoothed(r.losses)) for r in results if r.status == "ok"}
        print(f"figure: {plot_losses(curves, out_dir / 'loss_curves.png', 'rank sweep')}")
        print(f"figure: {plot_pareto(results, out_dir / 'pareto.png')}")
    return EXIT_OK if all(r.status == "ok" for r in results) else EXIT_RUNTIME


def build_parser():
    parser = argparse.ArgumentParser(prog="sct", description="Spectral compact training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="config file, or a bundled name such as toy.config")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")

    p = sub.add_parser("memory-plan", help="analytic dense-vs-SCT training memory")
    common(p)
    p.add_argument("--rank", type=_positive_int, help="rank for every spectral layer (default: config)")
    p.add_argument("--elem-size", type=_positive_int, default=4, help="bytes per element (default 4)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--report", help="report path (default: <outputs.dir>/memory_plan.<format>)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_memory_plan)

    p = sub.add_parser("train", help="train a model from a config")
    common(p)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides outputs.dir)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients")
    common(p, config_required=False)
    p.add_argument("--trials", type=_positive_int, default=100)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train one run per rank and tabulate")
    common(p)
    p.add_argument("--ranks", type=_rank_list, help="comma-separated ranks, e.g. 4,8,16")
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides outputs.dir)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, RankError, ShapeError) as exc:
        print(f"sct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SCTError, OSError) as exc:
        print(f"sct {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
