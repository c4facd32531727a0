"""Command-line entry point: ``palmdiff <command> ...``.

Commands
  graph gen|example|validate|enumerate   build, check and list layered graphs
  dataset                                write a path dataset for a graph
  reward gen|set                         write reward specifications
  train                                  fit a denoiser, write checkpoint + loss CSV
  sample                                 draw (optionally guided) samples
  sweep                                  guidance-scale sweep with metrics and plot data
  pipeline                               gen -> dataset -> train -> sweep from one JSON config

Relative output paths are resolved against ``$PALMDIFF_OUTPUT_DIR`` when set.
Exit codes: 0 success, 1 validation failure, 2 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig
from .diffusion import FingerprintMismatch, NonFiniteLoss, TrainConfig, load_checkpoint, save_checkpoint, train
from .graph import (
    CountTooLarge,
    InvalidDataset,
    InvalidGraphError,
    PathCountExceeded,
    SynthesisFailed,
    build_dataset,
    count_paths,
    example_graph,
    load_dataset,
    load_graph,
    save_graph,
    synth_pruned,
    validate,
    write_paths,
)
from .guidance import (
    POSTERIOR_MODES,
    GuidanceConfig,
    RewardSpec,
    guided_sample,
    load_reward,
    random_reward,
    save_reward,
)
from .metrics import EmptyConditional, ISL_KINDS, compare, target_distribution, valid_rate
from .palm import InvalidPath, UnknownEdge

log = logging.getLogger("palmdiff")

OUTPUT_ENV = "PALMDIFF_OUTPUT_DIR"
DEFAULT_SCALES = (0.0, 1.0, 10.0, 100.0, 1000.0)
METRIC_COLUMNS = ("KL", "L1", "TV", "SFD") + tuple(f"IS-L-{k}" for k in ISL_KINDS) + ("FLGD",)
SWEEP_COLUMNS = ("instance", "label", "scale", "seed", "n", "mean_reward", "std_reward", "r_max", "VR",
                 *METRIC_COLUMNS, "n_target", "retention", "status", "seconds")
LOSS_COLUMNS = ("epoch", "step", "train_loss", "train_ce", "val_loss", "val_ce")

SWEEP_HELP = """\
sweep.csv columns: instance (reward index), label, scale (lambda), seed (derived cell seed),
n, mean_reward, std_reward, r_max, VR (valid rate, %), KL, L1, TV (sup-norm), SFD,
IS-L-L1, IS-L-KL, IS-L-TV, IS-L-SF, FLGD (all against the max-reward-conditioned target),
n_target, retention (fraction of unguided samples kept for the target), status
(ok | empty-conditional), seconds.
plot_<metric>.csv: one row per scale, one column per reward label.
"""


class ValidationFailure(Exception):
    pass


class ConfigError(Exception):
    pass


def out_path(p) -> Path:
    p = Path(p)
    base = os.environ.get(OUTPUT_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _parse_edge(text: str) -> tuple[str, str, float]:
    # SRC,DST or SRC,DST=VALUE
    body, _, val = text.partition("=")
    parts = body.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"edge must be SRC,DST[=VALUE], got {text!r}")
    return parts[0], parts[1], float(val) if val else 1.0


# -- graph -------------------------------------------------------------------

def cmd_graph(args) -> int:
    if args.action == "gen":
        widths = args.widths or [1] + [args.width] * (args.layers - 1)
        g = synth_pruned(widths, args.prune, seed=args.seed)
        save_graph(g, out_path(args.out))
        print(f"wrote {args.out}: {g.n_layers} layers, {g.n_vertices} vertices, {g.n_edges} edges, "
              f"{count_paths(g)} paths")
    elif args.action == "example":
        save_graph(example_graph(), out_path(args.out))
        print(f"wrote {args.out}")
    elif args.action == "validate":
        g = load_graph(args.file)
        report = validate(g)
        if not report.ok:
            for v in report.violations:
                print(v)
            raise ValidationFailure(f"{len(report.violations)} violation(s) in {args.file}")
        print(f"ok: {g.n_layers} layers, {g.n_vertices} vertices, {count_paths(g)} paths")
    elif args.action == "enumerate":
        from .graph import enumerate_paths
        g = load_graph(args.file).check()
        paths = enumerate_paths(g, cap=args.cap)
        if args.out:
            write_paths(g, paths, out_path(args.out), meta={"source": str(args.file), "count": len(paths)})
        else:
            from .graph import format_path
            for p in paths:
                print(format_path(g, p))
    return 0


# -- dataset / reward ----------------------------------------------------------

def cmd_dataset(args) -> int:
    g = load_graph(args.graph).check()
    ds = build_dataset(g, args.mode, args.count, args.multiplicity, args.multiplicity_param,
                       args.multiplicity_cap, args.seed)
    write_paths(g, ds.paths, out_path(args.out), meta={**ds.meta, "graph": g.fingerprint()})
    print(f"wrote {args.out}: {len(ds)} paths ({ds.meta['unique_paths']} unique in graph)")
    return 0


def cmd_reward(args) -> int:
    g = load_graph(args.graph).check()
    if args.action == "gen":
        spec = random_reward(g, args.edges, seed=args.seed, label=args.label or "")
    else:
        try:
            edges = [(g.vertex(s), g.vertex(d), v) for s, d, v in args.edge]
        except KeyError as exc:
            raise ValidationFailure(f"unknown vertex {exc.args[0]!r}") from None
        spec = RewardSpec.from_edges(g, edges, args.label or "")
    save_reward(g, spec, out_path(args.out))
    print(f"wrote {args.out}: {len(spec.edges)} edges, R_max = {spec.r_max:g}")
    return 0


# -- train ---------------------------------------------------------------------

def train_configs(args) -> tuple[TrainConfig, DenoiserConfig]:
    tc = TrainConfig(timesteps=args.timesteps, gamma=args.gamma, epochs=args.epochs, max_steps=args.max_steps,
                     batch_size=args.batch_size, lr=args.lr, weight_decay=args.weight_decay, seed=args.seed,
                     val_fraction=args.val_fraction)
    dc = DenoiserConfig(hidden=args.hidden, n_blocks=args.n_blocks, time_dim=args.time_dim, seed=args.seed)
    return tc, dc


def write_loss_csv(history: list[dict], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOSS_COLUMNS)
    for row in history:
        w.writerow([_fmt(row.get(c, "")) for c in LOSS_COLUMNS])
    Path(path).write_text(buf.getvalue())


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def cmd_train(args) -> int:
    g = load_graph(args.graph).check()
    ds = load_dataset(g, args.dataset)
    tc, dc = train_configs(args)
    t0 = time.perf_counter()
    result = train(g, ds, tc, dc, callback=lambda r: log.info(
        "epoch %d step %d loss %.4f", r["epoch"], r["step"], r["train_loss"]))
    save_checkpoint(out_path(args.out), g, result)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix("")) + ".loss.csv"
    write_loss_csv(result.history, out_path(loss_csv))
    last = result.history[-1] if result.history else {}
    print(f"wrote {args.out} and {loss_csv}: {result.steps} steps in {time.perf_counter() - t0:.1f}s, "
          f"final loss {last.get('train_loss', float('nan')):.4f}")
    return 0


# -- sample --------------------------------------------------------------------

def cmd_sample(args) -> int:
    g = load_graph(args.graph).check()
    res = load_checkpoint(args.checkpoint, g)
    reward = load_reward(g, args.reward) if args.reward else RewardSpec.from_edges(g, [])
    if args.scale and not args.reward:
        raise ConfigError("--scale needs --reward")
    cfg = GuidanceConfig(args.scale, args.posterior)
    rng = np.random.default_rng(args.seed)
    paths, rewards = guided_sample(g, res.model, res.kernel, reward, cfg, args.n, rng, args.batch_size)
    vr = valid_rate(g, paths) if len(paths) else float("nan")
    mean_r = float(rewards.mean()) if len(rewards) else float("nan")
    # file names, not full paths, so reruns in other directories write identical bytes
    meta = {"graph": g.fingerprint(), "checkpoint": Path(args.checkpoint).name,
            "reward": Path(args.reward).name if args.reward else None,
            "scale": args.scale, "posterior": args.posterior, "n": args.n, "seed": args.seed}
    footer = [f"VR={vr:.1f}", f"mean_reward={mean_r:.6f}", f"r_max={reward.r_max:g}"]
    write_paths(g, paths, out_path(args.out), meta=meta, footer=footer)
    print(f"wrote {args.out}: n={args.n} VR={vr:.1f} mean_reward={mean_r:.4f}")
    return 0


# -- sweep ---------------------------------------------------------------------

def cell_seed(seed: int, instance: int, cell: int) -> int:
    return int(np.random.SeedSequence([seed, instance, cell]).generate_state(1)[0])


def _sweep_cell(job) -> dict:
    g, res, reward, idx, scale, seed, n, posterior, batch_size, kept = job
    t0 = time.perf_counter()
    paths, rewards = guided_sample(g, res.model, res.kernel, reward, GuidanceConfig(scale, posterior), n,
                                   np.random.default_rng(seed), batch_size)
    row = {"instance": idx, "label": reward.label, "scale": scale, "seed": seed, "n": n,
           "mean_reward": float(rewards.mean()), "std_reward": float(rewards.std()), "r_max": reward.r_max,
           "VR": valid_rate(g, paths)}
    if kept is None:
        row.update({c: float("nan") for c in METRIC_COLUMNS}, status="empty-conditional", n_target=0)
    else:
        row.update(compare(g, kept, paths).values, status="ok", n_target=len(kept))
    row["seconds"] = round(time.perf_counter() - t0, 3)
    return row


def run_sweep(g, res, rewards: list[RewardSpec], scales, n: int, target_n: int, seed: int,
              posterior: str = "d3pm-posterior", workers: int = 1, batch_size: int = 8192) -> list[dict]:
    """One row per (reward instance, scale), in instance-major order."""
    jobs = []
    retention = {}
    for i, reward in enumerate(rewards):
        try:
            _, kept, retention[i] = target_distribution(g, res.model, res.kernel, reward, target_n,
                                                        np.random.default_rng(cell_seed(seed, i, 10**6)))
        except EmptyConditional as exc:
            log.warning("instance %d (%s): %s", i, reward.label, exc)
            kept, retention[i] = None, 0.0
        for j, scale in enumerate(scales):
            jobs.append((g, res, reward, i, float(scale), cell_seed(seed, i, j), n, posterior, batch_size, kept))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    for row in rows:
        row["retention"] = retention[row["instance"]]
    return rows


def write_sweep(rows: list[dict], out_dir: Path, svg: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in SWEEP_COLUMNS})
    labels = list(dict.fromkeys(f"{r['instance']}:{r['label']}" for r in rows))
    scales = sorted({r["scale"] for r in rows})
    for metric in ("mean_reward",) + METRIC_COLUMNS:
        table = {(f"{r['instance']}:{r['label']}", r["scale"]): r.get(metric, float("nan")) for r in rows}
        safe = metric.replace("-", "_")
        with open(out_dir / f"plot_{safe}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scale", *labels])
            for s in scales:
                w.writerow([_fmt(s), *(_fmt(table.get((lab, s), "")) for lab in labels)])
        if svg:
            series = {lab: [table.get((lab, s), float("nan")) for s in scales] for lab in labels}
            (out_dir / f"plot_{safe}.svg").write_text(line_chart_svg(scales, series, metric))


def line_chart_svg(xs, series: dict, title: str, width: int = 480, height: int = 300) -> str:
    """Minimal SVG line chart with a log x axis (scale 0 drawn one decade left of the smallest positive)."""
    pos = [x for x in xs if x > 0]
    lo = np.log10(min(pos)) - 1 if pos else -1.0
    lx = [np.log10(x) if x > 0 else lo for x in xs]
    ys = [y for vals in series.values() for y in vals if np.isfinite(y)]
    y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
    if y1 == y0:
        y1 = y0 + 1.0
    x0, x1 = min(lx), max(lx) if max(lx) > min(lx) else min(lx) + 1
    m = 40
    px = lambda x: m + (x - x0) / (x1 - x0) * (width - 2 * m)
    py = lambda y: height - m - (y - y0) / (y1 - y0) * (height - 2 * m)
    colours = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
             f'<text x="2" y="{m}" font-size="10">{y1:.3g}</text>',
             f'<text x="2" y="{height - m}" font-size="10">{y0:.3g}</text>']
    for x, lab in zip(lx, xs):
        parts.append(f'<text x="{px(x):.1f}" y="{height - m + 14}" font-size="10" text-anchor="middle">{lab:g}</text>')
    for k, (name, vals) in enumerate(series.items()):
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(lx, vals) if np.isfinite(y))
        c = colours[k % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        parts.append(f'<text x="{width - m}" y="{m + 12 * k}" font-size="10" fill="{c}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_sweep(args) -> int:
    g = load_graph(args.graph).check()
    res = load_checkpoint(args.checkpoint, g)
    rewards = [load_reward(g, r) for r in args.reward]
    if not args.scales:
        raise ConfigError("empty scale grid")
    rows = run_sweep(g, res, rewards, args.scales, args.n, args.target_n, args.seed, args.posterior,
                     args.workers, args.batch_size)
    out_dir = out_path(Path(args.out_dir) / "sweep.csv").parent
    write_sweep(rows, out_dir, args.svg)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    (out_dir / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    for r in rows:
        print(f"[{r['label']}] scale={r['scale']:g} reward={r['mean_reward']:.3f} VR={r['VR']:.1f} "
              f"L1={r['L1']:.3f} status={r['status']}")
    return 0


# -- pipeline ----------------------------------------------------------------------

PIPELINE_EXAMPLE = {
    "seed": 0,
    "out_dir": "toy-run",
    "graph": {"layers": 11, "width": 4, "prune": 0.5, "seed": 6},
    "dataset": {"mode": "all"},
    "train": {"max_steps": 3000, "batch_size": 256, "lr": 1e-3, "val_fraction": 0.2},
    "denoiser": {"hidden": 128, "n_blocks": 2},
    "rewards": [{"random_edges": 1, "seed": 0}],
    "sweep": {"scales": list(DEFAULT_SCALES), "n": 16384, "target_n": 65536},
}


def _pick(cls, doc: dict, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**{**extra, **doc})


def cmd_pipeline(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    seed = int(cfg.get("seed", 0))
    out_dir = out_path(Path(cfg.get("out_dir", "pipeline-out")) / "x").parent
    gcfg = cfg.get("graph", {})
    if gcfg.get("example"):
        g = example_graph()
    elif "file" in gcfg:
        g = load_graph(gcfg["file"]).check()
    else:
        widths = gcfg.get("widths") or [1] + [int(gcfg.get("width", 4))] * (int(gcfg.get("layers", 11)) - 1)
        g = synth_pruned(widths, float(gcfg.get("prune", 0.5)), seed=int(gcfg.get("seed", seed)))
    save_graph(g, out_dir / "graph.json")
    dcfg = {"seed": seed, **cfg.get("dataset", {})}
    ds = build_dataset(g, **dcfg)
    write_paths(g, ds.paths, out_dir / "dataset.txt", meta={**ds.meta, "graph": g.fingerprint()})
    tc = _pick(TrainConfig, cfg.get("train", {}), seed=seed)
    dc = _pick(DenoiserConfig, cfg.get("denoiser", {}), seed=seed)
    res = train(g, ds, tc, dc)
    save_checkpoint(out_dir / "model.npz", g, res)
    write_loss_csv(res.history, out_dir / "model.loss.csv")
    rewards = []
    for k, rc in enumerate(cfg.get("rewards", [])):
        if "edges" in rc:
            edges = [(g.vertex(s), g.vertex(d), float(v)) for s, d, v in rc["edges"]]
            spec = RewardSpec.from_edges(g, edges, rc.get("label", f"reward-{k}"))
        else:
            spec = random_reward(g, int(rc.get("random_edges", 1)), int(rc.get("seed", seed)), rc.get("label", ""))
        save_reward(g, spec, out_dir / f"reward-{k}.json")
        rewards.append(spec)
    scfg = cfg.get("sweep", {})
    if rewards:
        rows = run_sweep(g, res, rewards, scfg.get("scales", DEFAULT_SCALES), int(scfg.get("n", 8192)),
                         int(scfg.get("target_n", 65536)), seed, scfg.get("posterior", "d3pm-posterior"),
                         int(scfg.get("workers", 1)))
        write_sweep(rows, out_dir, bool(scfg.get("svg", False)))
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    print(f"pipeline finished: outputs in {out_dir}")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="palmdiff", description="Diffusion over paths of layered graphs.",
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    gp = sub.add_parser("graph", help="build, validate and enumerate graphs")
    gsub = gp.add_subparsers(dest="action", required=True)
    gen = gsub.add_parser("gen", help="pruned fully connected layered graph")
    gen.add_argument("--layers", type=int, default=11)
    gen.add_argument("--width", type=int, default=4)
    gen.add_argument("--widths", type=lambda s: [int(x) for x in s.split(",")],
                     help="explicit layer widths, e.g. 1,4,4,4 (overrides --layers/--width)")
    gen.add_argument("--prune", type=float, default=0.5)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--out", required=True)
    ex = gsub.add_parser("example", help="the ten-vertex example graph")
    ex.add_argument("-o", "--out", required=True)
    va = gsub.add_parser("validate")
    va.add_argument("file")
    en = gsub.add_parser("enumerate")
    en.add_argument("file")
    en.add_argument("--cap", type=int, default=1_000_000)
    en.add_argument("-o", "--out")
    gp.set_defaults(func=cmd_graph)

    dp = sub.add_parser("dataset", help="write a path dataset")
    dp.add_argument("--graph", required=True)
    dp.add_argument("--mode", choices=("all", "sampled"), default="all")
    dp.add_argument("--count", type=int)
    dp.add_argument("--multiplicity", choices=("zipf", "constant"), default="zipf")
    dp.add_argument("--multiplicity-param", type=float, default=1.1)
    dp.add_argument("--multiplicity-cap", type=int, default=64)
    dp.add_argument("--seed", type=int, default=0)
    dp.add_argument("-o", "--out", required=True)
    dp.set_defaults(func=cmd_dataset)

    rp = sub.add_parser("reward", help="write reward specifications")
    rsub = rp.add_subparsers(dest="action", required=True)
    rg = rsub.add_parser("gen", help="unit reward on random reachable edges")
    rg.add_argument("--edges", type=int, default=1)
    rs = rsub.add_parser("set", help="explicit edges")
    rs.add_argument("--edge", type=_parse_edge, action="append", required=True, help="SRC,DST[=VALUE]")
    for r in (rg, rs):
        r.add_argument("--graph", required=True)
        r.add_argument("--label")
        r.add_argument("--seed", type=int, default=0)
        r.add_argument("-o", "--out", required=True)
    rp.set_defaults(func=cmd_reward)

    tp = sub.add_parser("train", help="train a denoiser",
                        epilog="loss CSV columns: " + ", ".join(LOSS_COLUMNS) +
                        " (ce is per on-path vertex; val_* empty without a validation split)")
    tp.add_argument("--graph", required=True)
    tp.add_argument("--dataset", required=True)
    tp.add_argument("--timesteps", type=int, default=256)
    tp.add_argument("--gamma", type=float, default=1.0)
    tp.add_argument("--epochs", type=int, default=100)
    tp.add_argument("--max-steps", type=int)
    tp.add_argument("--batch-size", type=int, default=256)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--weight-decay", type=float, default=0.01)
    tp.add_argument("--val-fraction", type=float, default=0.2)
    tp.add_argument("--hidden", type=int, default=128)
    tp.add_argument("--n-blocks", type=int, default=2)
    tp.add_argument("--time-dim", type=int, default=32)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("-o", "--out", required=True, help="checkpoint file (.npz)")
    tp.add_argument("--loss-csv", help="default: <out>.loss.csv")
    tp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="draw samples, guided when --reward and --scale are given")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--reward")
    sp.add_argument("--scale", type=float, default=0.0)
    sp.add_argument("--posterior", choices=POSTERIOR_MODES, default="d3pm-posterior")
    sp.add_argument("-n", type=int, default=8192)
    sp.add_argument("--batch-size", type=int, default=8192)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("-o", "--out", required=True)
    sp.set_defaults(func=cmd_sample)

    wp = sub.add_parser("sweep", help="guidance-scale sweep", epilog=SWEEP_HELP,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    wp.add_argument("--graph", required=True)
    wp.add_argument("--checkpoint", required=True)
    wp.add_argument("--reward", action="append", required=True, help="reward file (repeatable)")
    wp.add_argument("--scales", type=_parse_floats, default=list(DEFAULT_SCALES))
    wp.add_argument("--posterior", choices=POSTERIOR_MODES, default="d3pm-posterior")
    wp.add_argument("-n", type=int, default=8192, help="samples per cell")
    wp.add_argument("--target-n", type=int, default=65536, help="unguided samples for the target")
    wp.add_argument("--workers", type=int, default=1)
    wp.add_argument("--batch-size", type=int, default=8192)
    wp.add_argument("--seed", type=int, default=0)
    wp.add_argument("--svg", action="store_true", help="also write one SVG chart per metric")
    wp.add_argument("--out-dir", required=True)
    wp.set_defaults(func=cmd_sweep)

    pp = sub.add_parser("pipeline", help="run gen -> dataset -> train -> sweep from a JSON config",
                        epilog="example config:\n" + json.dumps(PIPELINE_EXAMPLE, indent=1),
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    pp.add_argument("--config", required=True)
    pp.set_defaults(func=cmd_pipeline)
    return p


VALIDATION_ERRORS = (ValidationFailure, InvalidGraphError, InvalidDataset, InvalidPath, UnknownEdge, FingerprintMismatch,
                     NonFiniteLoss, PathCountExceeded, SynthesisFailed, CountTooLarge)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ConfigError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
