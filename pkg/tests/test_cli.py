import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from nlnet import cli
from nlnet import tensor as F
from nlnet.backbones import build_network, desk_spec, insert_nonlocal
from nlnet.checkpoint import save_checkpoint
from nlnet.nonlocal_block import NonLocalConfig

TINY = """\
seed: int = 1
task.height: int = 16
task.width: int = 16
task.train_size: int = 32
task.val_size: int = 8
network.width_scale: float = 0.25
train.batch_size: int = 4
train.eval_every: int = 2
visualize.topk: int = 5
bench.passes: int = 2
"""


def write_cfg(tmp_path, extra="", name="cfg.txt", base=TINY):
    if "train.iterations" not in extra:
        extra = "train.iterations: int = 4\n" + extra
    p = tmp_path / name
    p.write_text(base + extra)
    return str(p)


def read_csv(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def manifest_ok(d):
    m = json.loads((Path(d) / "manifest.json").read_text())
    for f in m["files"]:
        assert cli.sha256_file(Path(d) / f["path"]) == f["sha256"]
    return {f["path"]: f["sha256"] for f in m["files"] if f["deterministic"]}


# verify

def test_verify_ops(tmp_path, capsys):
    assert cli.main(["verify", "--scope", "ops", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "verify.csv")
    grads = [r for r in rows if r["check"].startswith("grad")]
    assert grads and all(float(r["error"]) <= 1e-4 for r in grads)
    assert all(r["passed"] == "1" for r in rows)
    manifest_ok(tmp_path)


def _break_softmax_backward(monkeypatch):
    orig = F.softmax_rows

    def perturbed(m, mask=None):
        out = orig(m, mask)
        if out._node is not None:
            bw = out._node.backward
            out._node.backward = lambda g: tuple(1.01 * v for v in bw(g))
        return out

    monkeypatch.setattr(F, "softmax_rows", perturbed)


def test_verify_catches_perturbed_softmax_backward(monkeypatch, capsys):
    _break_softmax_backward(monkeypatch)
    assert cli.main(["verify", "--scope", "ops"]) == 1
    failed = [ln for ln in capsys.readouterr().out.splitlines() if "FAIL" in ln]
    assert failed and all("softmax_rows" in ln for ln in failed)


def test_verify_block_scope(tmp_path):
    assert cli.main(["verify", "--scope", "block", "--out", str(tmp_path)]) == 0
    rows = [r for r in read_csv(tmp_path / "verify.csv") if r["check"].startswith("block oracle")]
    assert len(rows) == 24
    assert all(float(r["error"]) <= 1e-8 for r in rows)


def test_verify_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["verify", "--scope", "ops", "--out", str(tmp_path / d)]) == 0
    assert manifest_ok(tmp_path / "a") == manifest_ok(tmp_path / "b")


# run

def test_run_artifacts_and_reproducibility(tmp_path):
    cfg = write_cfg(tmp_path, "nonlocal.policy: str = five\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r1")]) == 0
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r2")]) == 0
    d = tmp_path / "r1"
    for name in ("config.txt", "cost.csv", "cost.txt", "metrics.csv", "checkpoint.nlnet", "result.json",
                 "attention.csv", "manifest.json"):
        assert (d / name).is_file(), name
    assert list((d / "heatmaps").glob("*.pgm"))
    h1, h2 = manifest_ok(d), manifest_ok(tmp_path / "r2")
    assert h1 == h2
    assert "metrics.csv" in h1 and "checkpoint.nlnet" in h1
    rows = read_csv(d / "metrics.csv")
    assert list(rows[0]) == ["iter", "lr", "loss", "train_top1", "val_top1"]
    assert len(rows) == 5


def test_paired_runs_share_iteration_zero(tmp_path):
    cfg = write_cfg(tmp_path, "sweep.nonlocal.policy: list[str] = none, one\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    a = read_csv(tmp_path / "m" / "policy=none" / "metrics.csv")
    b = read_csv(tmp_path / "m" / "policy=one" / "metrics.csv")
    assert a[0]["val_top1"] == b[0]["val_top1"]
    assert a[0]["loss"] == b[0]["loss"]
    summary = read_csv(tmp_path / "m" / "summary.csv")
    assert [r["name"] for r in summary] == ["policy=none", "policy=one"]
    manifest_ok(tmp_path / "m")


def test_kind_matrix_makes_four_runs(tmp_path):
    cfg = write_cfg(tmp_path, "nonlocal.policy: str = res4:0\ntrain.iterations: int = 1\n"
                              "sweep.nonlocal.kind: list[str] = gaussian, embedded_gaussian, dot_product, "
                              "concatenation\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    assert len([p for p in (tmp_path / "m").iterdir() if p.is_dir()]) == 4


def test_run_divergence_leaves_marker(tmp_path):
    cfg = write_cfg(tmp_path, "train.lr: float = 1e12\ntrain.weight_decay: float = 0.0\n"
                              "train.iterations: int = 30\n")
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == 3
    assert (tmp_path / "r" / "FAILED").is_file()
    rows = read_csv(tmp_path / "r" / "metrics.csv")
    assert rows[-1]["loss"] == "nan"
    manifest_ok(tmp_path / "r")


def test_run_refuses_broken_build(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, "train.iterations: int = 1\n")
    _break_softmax_backward(monkeypatch)
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == 1
    assert not (tmp_path / "r").exists()
    assert cli.main(["run", "--config", cfg, "--out", str(tmp_path / "r"), "--force"]) == 0


def test_run_config_errors(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "nonlocal.kind: str = cosine\n")
    assert cli.main(["run", "--config", cfg]) == 2
    assert "line 12" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.txt")]) == 2


def test_seed_flag_overrides(tmp_path):
    cfg = write_cfg(tmp_path, "train.iterations: int = 1\n")
    assert cli.main(["run", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "r")]) == 0
    assert json.loads((tmp_path / "r" / "result.json").read_text())["seed"] == 5


# bench

def test_bench(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert cli.main(["bench", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    rows = {r["model"]: r for r in read_csv(tmp_path / "b" / "bench_costs.csv")}
    from fractions import Fraction
    assert Fraction(rows["C2D"]["macs_ratio"]) == 1 and Fraction(rows["C2D"]["params_ratio"]) == 1
    assert Fraction(rows["NL-C2D-five"]["macs_ratio"]) < Fraction(rows["I3D_3x3x3"]["macs_ratio"])
    timing = read_csv(tmp_path / "b" / "bench_timing.csv")
    assert len(timing) == 4 and all(float(r["median_seconds"]) > 0 for r in timing)
    m = json.loads((tmp_path / "b" / "manifest.json").read_text())
    flags = {f["path"]: f["deterministic"] for f in m["files"]}
    assert flags["bench_timing.csv"] is False and flags["bench_costs.csv"] is True


def test_bench_subsample_quarters_pairwise(tmp_path):
    from nlnet.config import load_config
    # full desk frame size: every block grid has even sides
    a = dict(cli.bench_variants(load_config(write_cfg(tmp_path, name="a.txt", base="")), allocate=False))
    b = dict(cli.bench_variants(load_config(write_cfg(tmp_path, "nonlocal.subsample: int = 2\n", "b.txt", base="")),
                                allocate=False))
    from nlnet.backbones import count_network_cost
    pa = count_network_cost(a["NL-C2D-five"]).macs_of("pairwise")
    pb = count_network_cost(b["NL-C2D-five"]).macs_of("pairwise")
    assert 4 * pb == pa


# visualize

def _checkpoint(tmp_path, policy, kind="embedded_gaussian", perturb=False):
    net = build_network(desk_spec(input_shape=(8, 16, 16)), width_scale=0.25, seed=0)
    net = insert_nonlocal(net, policy, NonLocalConfig(kind))
    if perturb:
        rng = np.random.default_rng(0)
        for p in net.parameters():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        for _, b in net.named_buffers():
            b[...] = rng.uniform(0.5, 1.5, size=b.shape)
    path = tmp_path / "ck.nlnet"
    save_checkpoint(net, path)
    return str(path)


def test_visualize_untrained_emits_affinity(tmp_path):
    ck = _checkpoint(tmp_path, "five")
    out = tmp_path / "v"
    assert cli.main(["visualize", ck, "--clip", "constant:0.5", "--block", "res3.nl1", "--topk", "4",
                     "--out", str(out)]) == 0
    rows = read_csv(out / "attention.csv")
    assert len(rows) == 2 * 2 * 2 * 4
    assert all(float(r["weight"]) > 0 for r in rows)
    assert len(list((out / "heatmaps").glob("*.pgm"))) == 8
    manifest_ok(out)


def test_visualize_constant_clip_uniform_heatmap(tmp_path):
    ck = _checkpoint(tmp_path, [("res5", 1)], perturb=True)
    out = tmp_path / "v"
    assert cli.main(["visualize", ck, "--clip", "constant:0.7", "--out", str(out)]) == 0
    maps = sorted((out / "heatmaps").glob("*.pgm"))
    assert len(maps) == 2
    for p in maps:
        img = cli.read_pgm(p)
        assert img.shape == (8, 16) and np.all(img == img.flat[0])
    assert {float(r["weight"]) for r in read_csv(out / "attention.csv")} == {0.5}


@pytest.mark.parametrize("kind", ["gaussian", "embedded_gaussian"])
def test_visualize_weights_are_truncated_probabilities(tmp_path, kind):
    from nlnet.harness import SyntheticTask, save_dataset, generate
    task = SyntheticTask(shape=(8, 16, 16, 1))
    save_dataset(generate(task, 2, "val"), tmp_path / "val.nlnet", task, "val")
    ck = _checkpoint(tmp_path, "five", kind=kind, perturb=True)
    out = tmp_path / "v"
    assert cli.main(["visualize", ck, "--clip", f"{tmp_path / 'val.nlnet'}:1", "--block", "res3.nl0",
                     "--topk", "20", "--out", str(out)]) == 0
    sums = {}
    for r in read_csv(out / "attention.csv"):
        w = float(r["weight"])
        assert 0.0 <= w <= 1.0
        key = (r["query_t"], r["query_h"], r["query_w"])
        sums[key] = sums.get(key, 0.0) + w
    assert len(sums) == 2 * 4 * 4
    assert all(s <= 1.0 + 1e-12 for s in sums.values())


def test_visualize_errors(tmp_path):
    ck = _checkpoint(tmp_path, "five")
    assert cli.main(["visualize", ck, "--block", "res5.nl0"]) == 2
    assert cli.main(["visualize", ck, "--topk", "0"]) == 2
    assert cli.main(["visualize", str(tmp_path / "nope.nlnet")]) == 3
    assert cli.main(["visualize", ck, "--clip", "val:0"]) == 2  # no task recorded


def test_pgm_roundtrip(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    cli.write_pgm(tmp_path / "x.pgm", img)
    assert np.array_equal(cli.read_pgm(tmp_path / "x.pgm"), img)
    hm = cli.heatmap(np.array([0.0, 0.25, 0.5, 0.25]), (2, 1, 2), scale=2)
    assert hm.shape == (2, 8) and hm.max() == 255 and hm[0, 0] == 0
