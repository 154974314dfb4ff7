"""``nlnet`` command line: verify, run, bench, visualize.

Exit codes: 0 ok, 1 verification failure, 2 configuration error,
3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import verify as V
from .backbones import count_network_cost, inflate, insert_nonlocal
from .checkpoint import block_names, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ConfigError, NumericError, ShapeError
from .harness.attention import block_affinity, extract_attention
from .harness.data import SyntheticTask, generate, load_dataset
from .harness.train import TrainingDiverged, evaluate, log_to_csv, train
from .tensor import Tensor, no_grad

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
MANIFEST = "manifest.json"
NONDETERMINISTIC = ("bench_timing.csv",)


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir: Path, command: str) -> Path:
    """List every file under ``run_dir`` (except the manifest) with its hash."""
    run_dir = Path(run_dir)
    files = []
    for p in sorted(run_dir.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            rel = p.relative_to(run_dir).as_posix()
            files.append({"path": rel, "bytes": p.stat().st_size, "sha256": sha256_file(p),
                          "deterministic": p.name not in NONDETERMINISTIC})
    body = {"command": command, "files": files}
    out = run_dir / MANIFEST
    out.write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    return out


def write_pgm(path: Path, image: np.ndarray) -> None:
    """Binary 8-bit greyscale (P5)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def heatmap(row: np.ndarray, key_grid: tuple, scale: int = 8) -> np.ndarray:
    """Key frames side by side, each ``Hk x Wk`` cell upscaled; 255 = row maximum."""
    Tk, Hk, Wk = key_grid
    w = row.reshape(Tk, Hk, Wk)
    top = w.max()
    levels = np.zeros_like(w) if top <= 0 else np.rint(np.clip(w, 0, None) / top * 255.0)
    tiles = np.concatenate(list(levels), axis=1)  # [Hk, Tk*Wk]
    return np.kron(tiles, np.ones((scale, scale))).astype(np.uint8)


def attention_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_t", "query_h", "query_w", "key_t", "key_h", "key_w", "weight"])
    for rec in records:
        for row in rec.rows():
            w.writerow(list(row[:6]) + [format(row[6], ".17g")])
    return buf.getvalue()


def emit_attention(net, clip, block: str, k: int, out_dir: Path) -> int:
    """Top-k arrows CSV plus one heatmap per query; returns the number of queries."""
    records = extract_attention(net, clip, block, None, k)
    (out_dir / "attention.csv").write_text(attention_csv(records))
    aff, qgrid, kgrid, kind = block_affinity(net, clip, block)
    hm = out_dir / "heatmaps"
    hm.mkdir(exist_ok=True)
    H, W = qgrid[1], qgrid[2]
    for rec in records:
        t, h, w = rec.query
        write_pgm(hm / f"{block}_q{t}_{h}_{w}.pgm", heatmap(aff[(t * H + h) * W + w], kgrid))
    return len(records)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_verify(scope: str, seed: int, out: str | None) -> int:
    t0 = time.perf_counter()
    checks = V.run_suites(scope, seed)
    print(V.report(checks))
    print(f"verify --scope {scope}: {time.perf_counter() - t0:.1f}s")
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / "verify.csv").write_text(V.to_csv(checks))
        write_manifest(d, f"verify --scope {scope} --seed {seed}")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def run_one(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Train and evaluate one configuration, writing all artifacts to ``run_dir``."""
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.dump())
    net = cfg.build()
    task = cfg.task()
    rep = count_network_cost(net)
    (run_dir / "cost.csv").write_text(rep.to_csv())
    base_rep = count_network_cost(cfg.build_base(allocate=False), label="C2D")
    (run_dir / "cost.txt").write_text(rep.to_text(base_rep) + "\n")
    train_set = generate(task, cfg["task.train_size"], "train")
    val_set = generate(task, cfg["task.val_size"], "val").materialize()
    try:
        res = train(net, train_set, cfg.train_config(), val_set)
    except TrainingDiverged as e:
        (run_dir / "metrics.csv").write_text(log_to_csv(e.log))
        (run_dir / "FAILED").write_text(f"{e}\n")
        write_manifest(run_dir, f"run {cfg.source} {cfg.name}".strip())
        raise
    (run_dir / "metrics.csv").write_text(res.log_csv())
    final = evaluate(res.net, val_set, cfg["eval.clips"])["top1"]
    summary = {"name": cfg.name or "run", "seed": cfg["seed"], "train_top1": res.train_top1,
               "val_top1": res.val_top1, "val_top1_multiclip": final, "eval_clips": cfg["eval.clips"]}
    save_checkpoint(res.net, run_dir / "checkpoint.nlnet", meta={"task": task.to_dict(), "result": summary})
    (run_dir / "result.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    blocks = [b.name for b in res.net.nonlocal_blocks()]
    if blocks:
        block = cfg["visualize.block"] or blocks[0]
        clip, _ = val_set.item(min(cfg["visualize.item"], len(val_set) - 1))
        emit_attention(res.net, clip, block, cfg["visualize.topk"], run_dir)
    write_manifest(run_dir, f"run {cfg.source} {cfg.name}".strip())
    return summary


def cmd_run(cfg: ExperimentConfig, out: str | None, force: bool) -> int:
    checks = V.run_suites("ops", 0)
    if not all(c.passed for c in checks):
        print(V.report(checks))
        if not force:
            print("refusing to train: `verify --scope ops` failed (use --force to override)", file=sys.stderr)
            return EXIT_VERIFY
        print("warning: ops verification failed; continuing because of --force", file=sys.stderr)
    root = Path(out or cfg["out"])
    runs = cfg.expand()
    rows = []
    for run in runs:
        run_dir = root if len(runs) == 1 else root / run.name
        t0 = time.perf_counter()
        s = run_one(run, run_dir)
        rows.append(s)
        print(f"{s['name']}: val top-1 {s['val_top1']:.4f} (train {s['train_top1']:.4f}) "
              f"in {time.perf_counter() - t0:.0f}s -> {run_dir}")
    if len(runs) > 1:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "seed", "val_top1", "train_top1"])
        for s in rows:
            w.writerow([s["name"], s["seed"], format(s["val_top1"], ".17g"), format(s["train_top1"], ".17g")])
        (root / "summary.csv").write_text(buf.getvalue())
        (root / MANIFEST).unlink(missing_ok=True)
        write_manifest(root, f"run {cfg.source}")
    return EXIT_OK


def bench_variants(cfg: ExperimentConfig, allocate: bool = True) -> list:
    base = cfg.build_base(allocate)
    nl_cfg = cfg.nonlocal_config()
    policy = cfg.policy() if cfg["nonlocal.policy"] != "none" else "five"
    label = policy if isinstance(policy, str) else str(len(policy))
    return [("C2D", base), ("I3D_3x3x3", inflate(base, "3x3x3")), ("I3D_3x1x1", inflate(base, "3x1x1")),
            (f"NL-C2D-{label}", insert_nonlocal(base, policy, nl_cfg))]


def cmd_bench(cfg: ExperimentConfig, out: str | None) -> int:
    variants = bench_variants(cfg)
    reports = [(name, count_network_cost(net, label=name)) for name, net in variants]
    base = reports[0][1]
    rng = np.random.default_rng([cfg["seed"], 0xBE])
    x = rng.standard_normal((cfg["bench.batch"],) + variants[0][1].spec.input_shape + (cfg["task.channels"],))
    timing = []
    for name, net in variants:
        net.eval()
        times = []
        with no_grad():
            net(Tensor(x))  # warm-up
            for _ in range(cfg["bench.passes"]):
                t0 = time.perf_counter()
                net(Tensor(x))
                times.append(time.perf_counter() - t0)
        timing.append((name, float(np.median(times))))
    cost_buf, time_buf = io.StringIO(), io.StringIO()
    cw = csv.writer(cost_buf, lineterminator="\n")
    cw.writerow(["model", "params", "macs", "params_ratio", "macs_ratio"])
    tw = csv.writer(time_buf, lineterminator="\n")
    tw.writerow(["model", "median_seconds", "passes", "batch"])
    print(f"{'model':<16} {'params':>12} {'MACs':>16} {'params x':>9} {'MACs x':>8} {'median ms':>10}")
    for (name, rep), (_, t) in zip(reports, timing):
        rp, rm = rep.ratios(base)
        cw.writerow([name, rep.total_params, rep.total_macs, f"{rp.numerator}/{rp.denominator}",
                     f"{rm.numerator}/{rm.denominator}"])
        tw.writerow([name, format(t, ".6g"), cfg["bench.passes"], cfg["bench.batch"]])
        print(f"{name:<16} {rep.total_params:>12,} {rep.total_macs:>16,} {float(rp):>9.3f} {float(rm):>8.3f} {t * 1e3:>10.2f}")
    if out or cfg.lines.get("out"):
        d = Path(out or cfg["out"])
        d.mkdir(parents=True, exist_ok=True)
        (d / "bench_costs.csv").write_text(cost_buf.getvalue())
        (d / "bench_timing.csv").write_text(time_buf.getvalue())
        for name, rep in reports:
            (d / f"cost_{name}.csv").write_text(rep.to_csv())
        write_manifest(d, f"bench {cfg.source}")
    return EXIT_OK


def load_clip(source: str, meta: dict, input_shape: tuple, channels: int) -> np.ndarray:
    """``val:IDX`` (the checkpoint's task), ``constant[:VALUE]`` or ``PATH:IDX`` (dataset cache)."""
    kind, _, arg = source.partition(":")
    if kind == "constant":
        return np.full(tuple(input_shape) + (channels,), float(arg or 1.0))
    if kind in ("val", "train", "test"):
        if not meta.get("task"):
            raise ConfigError("checkpoint carries no task description; use constant or a dataset cache")
        task = SyntheticTask.from_dict(meta["task"])
        idx = int(arg or 0)
        return generate(task, idx + 1, kind).item(idx)[0]
    ds = load_dataset(kind)
    return ds.item(int(arg or 0))[0]


def cmd_visualize(checkpoint: str, clip_source: str, block: str | None, k: int, out: str | None) -> int:
    names = block_names(checkpoint)
    if not names:
        raise ConfigError(f"{checkpoint} contains no non-local blocks")
    block = block or names[0]
    if block not in names:
        raise ConfigError(f"block {block!r} not in checkpoint manifest; available: {', '.join(names)}")
    net, meta = load_checkpoint(checkpoint)
    clip = load_clip(clip_source, meta, net.spec.input_shape, net.spec.in_channels)
    d = Path(out or Path(checkpoint).parent / "visualize")
    d.mkdir(parents=True, exist_ok=True)
    n = emit_attention(net, clip, block, k, d)
    write_manifest(d, f"visualize {checkpoint} --block {block} --topk {k}")
    print(f"{n} queries x top-{k} arrows from {block} -> {d}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlnet", description="Non-local video network toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)
    v = sub.add_parser("verify", help="run the self-check suites")
    v.add_argument("--scope", choices=V.SCOPES, default="all")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out")
    r = sub.add_parser("run", help="train and evaluate a config (or an ablation matrix)")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--force", action="store_true", help="train even if `verify --scope ops` fails")
    b = sub.add_parser("bench", help="count costs and time C2D / I3D / NL-C2D variants")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--out")
    z = sub.add_parser("visualize", help="top-k attention arrows and heatmaps from a checkpoint")
    z.add_argument("checkpoint")
    z.add_argument("--clip", default="val:0", help="val:IDX, constant[:VALUE] or DATASET_CACHE:IDX")
    z.add_argument("--block")
    z.add_argument("--topk", type=int, default=20)
    z.add_argument("--out")
    return p


def _with_seed(cfg: ExperimentConfig, seed: int | None) -> ExperimentConfig:
    if seed is not None:
        cfg.values["seed"] = seed
        cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "verify":
            return cmd_verify(args.scope, args.seed, args.out)
        if args.verb == "run":
            return cmd_run(_with_seed(load_config(args.config), args.seed), args.out, args.force)
        if args.verb == "bench":
            return cmd_bench(_with_seed(load_config(args.config), args.seed), args.out)
        if args.topk < 1:
            raise ConfigError("--topk must be >= 1")
        return cmd_visualize(args.checkpoint, args.clip, args.block, args.topk, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ShapeError, OSError, ValueError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
