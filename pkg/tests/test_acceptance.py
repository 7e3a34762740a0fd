"""Acceptance gate: one test per shipping criterion.

Each test states its threshold inline and fails loudly if the build drifts.
The heavier criteria drive the real CLI end to end on synthetic data; the
whole file is sized for a desktop CPU (about ten minutes total).
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import pytest

from dilationnet.checkpoint import Checkpoint, net_from_checkpoint
from dilationnet.cli import main
from dilationnet.data import DatasetManifest, dataset_from_manifest, partition_batches
from dilationnet.gradcheck import DEFAULT_SEEDS, run_scope
from dilationnet.metrics import ConfusionMatrix, basic_rates, kappa
from dilationnet.metrics import auc as auc_metric
from dilationnet.networks import MultiDilationBlockSpec, build_dilation_net
from dilationnet.ops import ConvSpec, conv2d
from dilationnet.tensor import Tensor

SEED = 11


# -- independent oracles (scalar loops, no shared code with the library) --------

def direct_conv_oracle(x, w, b, spec):
    batch, h_in, w_in, _ = x.shape
    extent = spec.dilation * (spec.kernel_size - 1) + 1
    h_out = (h_in + 2 * spec.padding - extent) // spec.stride + 1
    w_out = (w_in + 2 * spec.padding - extent) // spec.stride + 1
    out = np.zeros((batch, h_out, w_out, spec.out_channels))
    for n in range(batch):
        for i in range(h_out):
            for j in range(w_out):
                for o in range(spec.out_channels):
                    acc = 0.0
                    for p in range(spec.kernel_size):
                        for q in range(spec.kernel_size):
                            ii = i * spec.stride + p * spec.dilation - spec.padding
                            jj = j * spec.stride + q * spec.dilation - spec.padding
                            if 0 <= ii < h_in and 0 <= jj < w_in:
                                for c in range(spec.in_channels):
                                    acc += x[n, ii, jj, c] * w[p, q, c, o]
                    out[n, i, j, o] = acc + b[o]
    return out


def kappa_oracle(predictions, labels):
    n = len(predictions)
    observed = sum(1 for p, y in zip(predictions, labels) if p == y) / n
    p_pred, p_label = sum(predictions) / n, sum(labels) / n
    expected = p_pred * p_label + (1 - p_pred) * (1 - p_label)
    if expected == 1.0:
        return None
    return (observed - expected) / (1.0 - expected)


def auc_oracle(scores, labels):
    wins, pairs = 0.0, 0
    for sp, yp in zip(scores, labels):
        if yp != 1:
            continue
        for sn, yn in zip(scores, labels):
            if yn == 0:
                pairs += 1
                wins += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
    return wins / pairs


# -- shared pipeline fixtures ----------------------------------------------------

@pytest.fixture(scope="session")
def acc_root(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def manifest128(acc_root) -> str:
    out = acc_root / "data128"
    assert main(["prepare", "--synthetic", "128", "--seed", str(SEED),
                 "--out", str(out)]) == 0
    return str(out / "manifest.json")


@pytest.fixture(scope="session")
def stage1_dir(acc_root, manifest128) -> Path:
    """All four variants trained briefly on the same 128-sample dataset."""
    out = acc_root / "stage1"
    for variant in "ABCD":
        assert main(["train", "--variant", variant, "--manifest", manifest128,
                     "--out", str(out), "--epochs", "3", "--batch-size", "16",
                     "--seed", str(SEED), "--no-augment"]) == 0
    return out


@pytest.fixture(scope="session")
def manifest400(acc_root) -> str:
    out = acc_root / "data400"
    assert main(["prepare", "--synthetic", "400", "--seed", "7",
                 "--out", str(out)]) == 0
    return str(out / "manifest.json")


@pytest.fixture(scope="session")
def stage1_400(acc_root, manifest400) -> dict:
    """A and B trained properly on the 400-sample set; A's wall time kept."""
    out = acc_root / "stage1-400"
    start = time.monotonic()
    assert main(["train", "--variant", "A", "--manifest", manifest400,
                 "--out", str(out), "--epochs", "15", "--seed", "7"]) == 0
    elapsed_a = time.monotonic() - start
    assert main(["train", "--variant", "B", "--manifest", manifest400,
                 "--out", str(out), "--epochs", "15", "--seed", "7"]) == 0
    return {"dir": out, "elapsed_a": elapsed_a}


@pytest.fixture(scope="session")
def fused_ab(acc_root, manifest400, stage1_400) -> Path:
    out = acc_root / "fused-ab"
    assert main(["fuse", "--members", "A,B", "--ckpt-dir",
                 str(stage1_400["dir"]), "--manifest", manifest400,
                 "--out", str(out), "--epochs", "8", "--batch-size", "16",
                 "--seed", "7", "--no-augment"]) == 0
    return out


def eval_report(ckpt: Path, manifest: str, out: Path) -> dict:
    assert main(["eval", "--ckpt", str(ckpt), "--manifest", manifest,
                 "--out", str(out)]) == 0
    return json.loads((out / "report.json").read_text())


# -- the criteria ----------------------------------------------------------------

def test_gradient_correctness_ops_and_block():
    """gradcheck ops+block: <1e-4 linear / <1e-2 composite, >=20 seeds, <=5 min."""
    start = time.monotonic()
    assert main(["gradcheck", "--scope", "ops"]) == 0
    assert main(["gradcheck", "--scope", "block"]) == 0
    elapsed = time.monotonic() - start
    assert elapsed <= 300.0, f"gradcheck took {elapsed:.0f}s"

    assert DEFAULT_SEEDS["ops"] >= 20 and DEFAULT_SEEDS["block"] >= 20
    linear = {"dense", "add_n", "global_avg_pool", "concat", "batch_norm-infer"}
    for result in run_scope("ops", seeds=1) + run_scope("block", seeds=1):
        cap = 1e-4 if result.target in linear else 1e-2
        assert result.tolerance <= cap, (result.target, result.tolerance)


def test_convolution_oracle_equivalence():
    """Dilated conv matches a direct scalar-loop oracle <=1e-5 over a sweep."""
    rng = np.random.default_rng(SEED)
    tried = 0
    while tried < 25:
        k = int(rng.choice([1, 3, 5]))
        d = int(rng.choice([1, 2, 3]))
        s = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, 3))
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        extent = d * (k - 1) + 1
        if h + 2 * pad < extent or w + 2 * pad < extent:
            continue
        tried += 1
        spec = ConvSpec(k, int(rng.integers(1, 4)), int(rng.integers(1, 5)),
                        stride=s, dilation=d, padding=pad)
        x = rng.normal(size=(2, h, w, spec.in_channels))
        wgt = rng.normal(size=spec.weight_shape)
        bias = rng.normal(size=spec.out_channels)
        got = conv2d(Tensor(x), Tensor(wgt), Tensor(bias), spec).data
        want = direct_conv_oracle(x, wgt, bias, spec)
        assert np.max(np.abs(got - want)) <= 1e-5, f"spec {spec} diverged"


def test_builder_shape_law():
    """Every resolution pools at exactly 4x4 after 2/3/4/5 blocks."""
    expected_blocks = {32: 2, 64: 3, 128: 4, 256: 5}
    for r, blocks in expected_blocks.items():
        net = build_dilation_net(r)
        count = sum(isinstance(l, MultiDilationBlockSpec) for l in net.layers)
        assert count == blocks, f"r={r}: {count} blocks"
        x = np.random.default_rng(SEED).random((1, r, r, 3)).astype(np.float32)
        prepool = net.forward_prepool(x)
        assert prepool.shape[1:3] == (4, 4), f"r={r}: prepool {prepool.shape}"


def test_metric_oracles():
    """kappa/AUC match first-principles oracles to 1e-12 on 1,000 random sets."""
    rng = np.random.default_rng(SEED)
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        scores = np.round(rng.random(n), 1)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        predictions = (scores >= 0.5).astype(int)
        cm = ConfusionMatrix(
            tp=int(np.sum(predictions & labels)),
            tn=int(np.sum((1 - predictions) & (1 - labels))),
            fp=int(np.sum(predictions & (1 - labels))),
            fn=int(np.sum((1 - predictions) & labels)))
        want_kappa = kappa_oracle(predictions.tolist(), labels.tolist())
        got_kappa = kappa(cm)
        if want_kappa is None:
            assert got_kappa is None
        else:
            assert abs(got_kappa - want_kappa) <= 1e-12
        assert abs(auc_metric(scores, labels)
                   - auc_oracle(scores, labels)) <= 1e-12

    accuracy, sensitivity, specificity = basic_rates(
        ConfusionMatrix(tp=40, fn=10, tn=30, fp=20))
    assert (accuracy, sensitivity, specificity) == (0.7, 0.8, 0.6)
    assert basic_rates(ConfusionMatrix(50, 50, 0, 0)) == (1.0, 1.0, 1.0)


def test_stage1_training_smoke(acc_root, manifest400, stage1_400):
    """Variant A on 400 synthetic samples: >=95% train, >=90% held-out, <=10 min."""
    assert stage1_400["elapsed_a"] <= 600.0, \
        f"stage-1 smoke took {stage1_400['elapsed_a']:.0f}s"

    rows = (stage1_400["dir"] / "A-trace.csv").read_text().strip().splitlines()[1:]
    assert len(rows) <= 30
    final_train_acc = float(rows[-1].split(",")[2])
    assert final_train_acc >= 0.95, f"train accuracy {final_train_acc}"

    report = eval_report(stage1_400["dir"] / "A.ckpt", manifest400,
                         acc_root / "smoke400-eval")
    assert report["accuracy"] >= 0.90, f"held-out accuracy {report['accuracy']}"


def test_fusion_smoke_freeze_and_quality(acc_root, manifest400, stage1_400,
                                         fused_ab):
    """A+B head >= max(A, B) - 2 points; frozen tensors bit-identical."""
    fused_report = eval_report(fused_ab / "fusion-A+B.ckpt", manifest400,
                               acc_root / "eval-ab")
    singles = [eval_report(stage1_400["dir"] / f"{v}.ckpt", manifest400,
                           acc_root / f"eval-{v}")["accuracy"]
               for v in ("A", "B")]
    assert fused_report["accuracy"] >= max(singles) - 0.02, \
        f"fusion {fused_report['accuracy']} vs singles {singles}"

    fusion = Checkpoint.load(fused_ab / "fusion-A+B.ckpt")
    for variant in ("A", "B"):
        source = Checkpoint.load(stage1_400["dir"] / f"{variant}.ckpt")
        prefix = f"backbone.{variant}."
        frozen = {name[len(prefix):]: arr for name, arr in
                  fusion.tensors.items() if name.startswith(prefix)}
        assert frozen, f"no frozen tensors for {variant}"
        for name, arr in frozen.items():
            assert np.array_equal(arr, source.tensors[name]), \
                f"{variant}:{name} drifted"


def test_combination_protocol(acc_root, manifest128, stage1_dir):
    """11 combinations in canonical order; ABCD >= every pair - 2 points."""
    out = acc_root / "combos"
    assert main(["fuse", "--all-combinations", "--ckpt-dir", str(stage1_dir),
                 "--manifest", manifest128, "--out", str(out),
                 "--epochs", "6", "--batch-size", "16", "--seed", str(SEED),
                 "--no-augment"]) == 0
    rows = (out / "combinations.csv").read_text().strip().splitlines()
    assert rows[0] == "combination,accuracy,sensitivity,specificity,kappa,auc"
    table = [r.split(",") for r in rows[1:]]
    assert [r[0] for r in table] == [
        "A+B", "A+C", "A+D", "B+C", "B+D", "C+D",
        "A+B+C", "A+B+D", "A+C+D", "B+C+D", "A+B+C+D"]
    accuracy = {r[0]: float(r[1]) for r in table}
    for pair in ("A+B", "A+C", "A+D", "B+C", "B+D", "C+D"):
        assert accuracy["A+B+C+D"] >= accuracy[pair] - 2.0, \
            f"A+B+C+D {accuracy['A+B+C+D']} vs {pair} {accuracy[pair]}"


def test_fraction_protocol(acc_root, manifest128):
    """10 rows x 5 metrics; each metric at p=1.0 >= its p=0.1 value - 5 points."""
    out = acc_root / "fractions"
    assert main(["fraction-sweep", "--manifest", manifest128,
                 "--members", "A,B", "--out", str(out), "--epochs", "4",
                 "--batch-size", "16", "--seed", str(SEED),
                 "--no-augment"]) == 0
    rows = (out / "fraction_sweep.csv").read_text().strip().splitlines()
    assert rows[0] == "fraction,accuracy,sensitivity,specificity,kappa,auc"
    table = {r.split(",")[0]: r.split(",")[1:] for r in rows[1:]}
    assert len(table) == 10
    assert all(len(cells) == 5 for cells in table.values())
    assert "n/a" not in sum(table.values(), [])
    for low, high in zip(table["0.1"], table["1"]):
        assert float(high) >= float(low) - 5.0, \
            f"p=1.0 {high} vs p=0.1 {low}"


def test_determinism(acc_root):
    """Identical seeds give byte-identical traces, checkpoints and reports."""
    outputs = []
    for attempt in ("first", "second"):
        base = acc_root / f"repeat-{attempt}"
        assert main(["prepare", "--synthetic", "48", "--seed", "5",
                     "--out", str(base / "data")]) == 0
        manifest = str(base / "data" / "manifest.json")
        for variant in ("A", "B"):
            assert main(["train", "--variant", variant, "--manifest", manifest,
                         "--out", str(base / "s1"), "--epochs", "2",
                         "--batch-size", "16", "--seed", "5"]) == 0
        assert main(["fuse", "--members", "A,B", "--ckpt-dir",
                     str(base / "s1"), "--manifest", manifest,
                     "--out", str(base / "s2"), "--epochs", "2",
                     "--batch-size", "16", "--seed", "5"]) == 0
        assert main(["eval", "--ckpt", str(base / "s2" / "fusion-A+B.ckpt"),
                     "--manifest", manifest, "--out", str(base / "eval")]) == 0
        outputs.append({
            "manifest": (base / "data" / "manifest.json").read_bytes(),
            "ckpt-A": (base / "s1" / "A.ckpt").read_bytes(),
            "trace-A": (base / "s1" / "A-trace.csv").read_bytes(),
            "ckpt-AB": (base / "s2" / "fusion-A+B.ckpt").read_bytes(),
            "trace-AB": (base / "s2" / "fusion-A+B-trace.csv").read_bytes(),
            "report": (base / "eval" / "report.json").read_bytes(),
        })
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], f"{key} differs across runs"


def test_checkpoint_round_trip(acc_root, manifest128, stage1_dir, fused_ab):
    """save -> load -> forward is bit-identical for both checkpoint kinds."""
    manifest = DatasetManifest.from_json(json.loads(Path(manifest128).read_text()))
    dataset = dataset_from_manifest(manifest)
    batch = next(iter(partition_batches(dataset, "test", 32, 16)))

    ckpt = Checkpoint.load(stage1_dir / "A.ckpt")
    net = net_from_checkpoint(ckpt)
    before = net.forward(batch.images).data
    resaved = acc_root / "roundtrip.ckpt"
    ckpt.save(resaved)
    net2 = net_from_checkpoint(Checkpoint.load(resaved))
    after = net2.forward(batch.images).data
    assert np.array_equal(before, after)

    from dilationnet.fusion import fusion_forward, load_fusion
    group = next(iter(partition_batches(dataset, "test", (32, 64), 16)))
    spec, backbones, head = load_fusion(
        Checkpoint.load(fused_ab / "fusion-A+B.ckpt"))
    first = fusion_forward(backbones, head, group).data
    fused_resaved = acc_root / "roundtrip-fusion.ckpt"
    Checkpoint.load(fused_ab / "fusion-A+B.ckpt").save(fused_resaved)
    spec2, backbones2, head2 = load_fusion(Checkpoint.load(fused_resaved))
    second = fusion_forward(backbones2, head2, group).data
    assert np.array_equal(first, second)
