"""Backbone extraction, fusion assembly, combinations, persistence."""

from __future__ import annotations

import numpy as np
import pytest

from dilationnet.checkpoint import Checkpoint, CheckpointError, checkpoint_from_net
from dilationnet.data import multi_res_batches, split, synth_dataset
from dilationnet.fusion import (
    FusionSpec,
    build_fusion_head,
    enumerate_combinations,
    extract_backbone,
    fused_features,
    fused_width,
    fusion_checkpoint,
    fusion_forward,
    load_fusion,
)
from dilationnet.networks import build_for_variant
from dilationnet.tensor import ComputationRecord, backward

EXPECTED_WIDTHS = {"A": 96, "B": 128, "C": 160, "D": 192}


def head_oracle(features, head):
    """Plain-numpy dense chain: three relu layers, then sigmoid."""
    t = np.asarray(features, dtype=np.float32)
    for i in range(1, 5):
        w = head.params[f"fuse{i}.weight"].data
        b = head.params[f"fuse{i}.bias"].data
        t = t @ w + b
        t = np.maximum(t, 0.0) if i < 4 else 1.0 / (1.0 + np.exp(-t))
    return t


@pytest.fixture(scope="module")
def checkpoints():
    return {v: checkpoint_from_net(build_for_variant(v, seed=ord(v)))
            for v in "ABCD"}


@pytest.fixture(scope="module")
def dataset():
    ds = synth_dataset(12, seed=21)
    return ds.with_manifest(split(ds.manifest, seed=0))


def batch_group(dataset, resolutions, batch_size=4):
    ids = dataset.manifest.partition_ids("train")
    return next(iter(multi_res_batches(dataset, ids, resolutions, batch_size)))


class TestExtract:
    def test_feature_widths_follow_channel_schedule(self, checkpoints):
        for variant, width in EXPECTED_WIDTHS.items():
            bb = extract_backbone(checkpoints[variant])
            assert bb.feature_width == width
            assert bb.variant == variant

    def test_feature_shape(self, checkpoints, dataset):
        bb = extract_backbone(checkpoints["A"])
        group = batch_group(dataset, (32,))
        out = bb.features(group[32].images)
        assert out.shape == (4, 96)

    def test_head_is_stripped(self, checkpoints):
        bb = extract_backbone(checkpoints["B"])
        assert not any(name.startswith("head") for name in bb.net.params)

    def test_extract_twice_bit_identical(self, checkpoints):
        one = extract_backbone(checkpoints["A"])
        two = extract_backbone(checkpoints["A"])
        for name in one.net.params:
            np.testing.assert_array_equal(one.net.params[name].data,
                                          two.net.params[name].data)

    def test_wrong_variant_rejected(self, checkpoints):
        with pytest.raises(CheckpointError, match="variant"):
            extract_backbone(checkpoints["A"], expect_variant="B")

    def test_headless_checkpoint_rejected(self, checkpoints):
        bb = extract_backbone(checkpoints["A"])
        headless = checkpoint_from_net(bb.net)
        with pytest.raises(CheckpointError, match="head"):
            extract_backbone(headless)

    def test_features_leave_running_moments_alone(self, checkpoints, dataset):
        bb = extract_backbone(checkpoints["A"])
        before = {n: s.running_mean.copy() for n, s in bb.net.bn_states.items()}
        group = batch_group(dataset, (32,))
        for _ in range(3):
            bb.features(group[32].images)
        for name, state in bb.net.bn_states.items():
            np.testing.assert_array_equal(state.running_mean, before[name])


class TestSpec:
    def test_member_order_canonical(self):
        spec = FusionSpec(members=("D", "A", "C"))
        assert spec.members == ("A", "C", "D")
        assert spec.label == "A+C+D"
        assert spec.resolutions == (32, 128, 256)

    def test_default_head_widths(self):
        assert FusionSpec(members=("A", "B")).widths == (256, 64, 16, 1)

    def test_validation(self):
        with pytest.raises(ValueError, match="two"):
            FusionSpec(members=("A",))
        with pytest.raises(ValueError, match="duplicate"):
            FusionSpec(members=("A", "A"))
        with pytest.raises(ValueError, match="unknown"):
            FusionSpec(members=("A", "E"))
        with pytest.raises(ValueError, match="four"):
            FusionSpec(members=("A", "B"), widths=(256, 64, 1))
        with pytest.raises(ValueError, match="end at 1"):
            FusionSpec(members=("A", "B"), widths=(256, 64, 16, 2))


class TestCombinations:
    def test_eleven_rows_in_table_order(self):
        labels = [spec.label for spec in enumerate_combinations()]
        assert labels == ["A+B", "A+C", "A+D", "B+C", "B+D", "C+D",
                          "A+B+C", "A+B+D", "A+C+D", "B+C+D", "A+B+C+D"]

    def test_pair_count_and_final_row(self):
        specs = enumerate_combinations()
        assert sum(len(s.members) == 2 for s in specs) == 6
        assert len(specs) == 11
        assert [s.members for s in specs].count(("A", "B", "C", "D")) == 1
        assert specs[-1].members == ("A", "B", "C", "D")

    def test_width_monotone_in_membership(self, checkpoints):
        backbones = {v: extract_backbone(checkpoints[v]) for v in "ABCD"}
        for spec in enumerate_combinations():
            mine = fused_width([backbones[m] for m in spec.members])
            for other in enumerate_combinations():
                if set(spec.members) < set(other.members):
                    theirs = fused_width([backbones[m] for m in other.members])
                    assert mine < theirs


class TestForward:
    def test_pair_width(self, checkpoints, dataset):
        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        group = batch_group(dataset, (32, 64))
        features = fused_features(backbones, group)
        assert features.shape == (4, 96 + 128)

    def test_single_backbone_degenerates_to_its_features(self, checkpoints,
                                                         dataset):
        bb = extract_backbone(checkpoints["A"])
        group = batch_group(dataset, (32,))
        fused = fused_features([bb], group)
        np.testing.assert_array_equal(fused.data, bb.features(group[32].images).data)

    def test_full_fusion_matches_composition_oracle(self, checkpoints, dataset):
        backbones = [extract_backbone(checkpoints[v]) for v in "ABCD"]
        spec = FusionSpec(members=("A", "B", "C", "D"))
        head = build_fusion_head(spec, fused_width(backbones), seed=2)
        group = batch_group(dataset, (32, 64, 128, 256), batch_size=2)
        out = fusion_forward(backbones, head, group)

        nets = {v: build_for_variant(v, seed=ord(v)) for v in "ABCD"}
        parts = [nets[v].forward_features(group[r].images).data
                 for v, r in zip("ABCD", (32, 64, 128, 256))]
        expect = head_oracle(np.concatenate(parts, axis=1), head)
        np.testing.assert_allclose(out.data, expect, atol=1e-6)
        assert (0 < out.data).all() and (out.data < 1).all()

    def test_misaligned_ids_rejected(self, checkpoints, dataset):
        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        group = dict(batch_group(dataset, (32, 64)))
        scrambled = group[64]
        group[64] = type(scrambled)(tuple(reversed(scrambled.ids)),
                                    scrambled.images, scrambled.labels)
        with pytest.raises(ValueError, match="misaligned"):
            fused_features(backbones, group)

    def test_missing_resolution_rejected(self, checkpoints, dataset):
        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        group = batch_group(dataset, (32,))
        with pytest.raises(ValueError, match="64"):
            fused_features(backbones, group)

    def test_consistent_permutation_permutes_predictions(self, checkpoints,
                                                         dataset):
        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        spec = FusionSpec(members=("A", "B"))
        head = build_fusion_head(spec, fused_width(backbones), seed=0)
        group = batch_group(dataset, (32, 64))
        out = fusion_forward(backbones, head, group).data
        perm = [2, 0, 3, 1]
        shuffled = {
            r: type(b)(tuple(b.ids[i] for i in perm), b.images[perm],
                       b.labels[perm])
            for r, b in group.items()
        }
        out_perm = fusion_forward(backbones, head, shuffled).data
        np.testing.assert_array_equal(out_perm, out[perm])

    def test_head_gradient_matches_finite_differences(self, checkpoints,
                                                      dataset):
        # float64 replica of the head so the finite differences are clean
        from dilationnet.tensor import Tensor
        from dilationnet.training import bce_l2_loss

        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        spec = FusionSpec(members=("A", "B"))
        head = build_fusion_head(spec, fused_width(backbones), seed=1)
        for name, t in head.params.items():
            head.params[name] = Tensor(t.data.astype(np.float64),
                                       dtype=np.float64)
        group = batch_group(dataset, (32, 64))
        features = fused_features(backbones, group).data.astype(np.float64)
        labels = group[32].labels

        def run():
            with ComputationRecord() as rec:
                pred = head.forward(Tensor(features, dtype=np.float64))
                loss = bce_l2_loss(pred, labels)
            return loss, rec

        loss, rec = run()
        grads = backward(loss, rec, targets=head.params.values())
        rng = np.random.default_rng(0)
        eps = 1e-6
        for name in ("fuse1.weight", "fuse4.weight", "fuse2.bias"):
            tensor = head.params[name]
            for flat_index in rng.integers(tensor.size, size=4):
                idx = np.unravel_index(int(flat_index), tensor.shape)
                keep = tensor.data[idx]
                tensor.data[idx] = keep + eps
                hi = run()[0].item()
                tensor.data[idx] = keep - eps
                lo = run()[0].item()
                tensor.data[idx] = keep
                fd = (hi - lo) / (2 * eps)
                got = grads[tensor][idx]
                assert abs(got - fd) <= 1e-2 * max(abs(fd), 1e-8)


class TestPersistence:
    def make_fused(self, checkpoints):
        backbones = [extract_backbone(checkpoints[v]) for v in "AB"]
        spec = FusionSpec(members=("A", "B"))
        head = build_fusion_head(spec, fused_width(backbones), seed=7)
        return spec, backbones, head

    def test_round_trip_preserves_predictions(self, checkpoints, dataset,
                                              tmp_path):
        spec, backbones, head = self.make_fused(checkpoints)
        group = batch_group(dataset, (32, 64))
        before = fusion_forward(backbones, head, group).data
        path = tmp_path / "fused.ckpt"
        fusion_checkpoint(spec, backbones, head,
                          provenance={"seed": 7}).save(path)
        spec2, backbones2, head2 = load_fusion(Checkpoint.load(path))
        assert spec2 == spec
        after = fusion_forward(backbones2, head2, group).data
        np.testing.assert_array_equal(before, after)

    def test_namespaced_tensor_layout(self, checkpoints):
        spec, backbones, head = self.make_fused(checkpoints)
        ckpt = fusion_checkpoint(spec, backbones, head)
        names = list(ckpt.tensors)
        assert names[0].startswith("backbone.A.")
        assert any(n.startswith("backbone.B.") for n in names)
        assert names[-1].startswith("head.")
        assert ckpt.variant == "A+B"

    def test_member_mismatch_rejected(self, checkpoints):
        spec, backbones, head = self.make_fused(checkpoints)
        bad_spec = FusionSpec(members=("A", "C"))
        with pytest.raises(ValueError, match="members"):
            fusion_checkpoint(bad_spec, backbones, head)

    def test_missing_tensor_rejected(self, checkpoints):
        spec, backbones, head = self.make_fused(checkpoints)
        ckpt = fusion_checkpoint(spec, backbones, head)
        ckpt.tensors.pop("head.fuse1.weight")
        with pytest.raises(CheckpointError, match="fuse1"):
            load_fusion(ckpt)

    def test_non_fusion_checkpoint_rejected(self, checkpoints):
        with pytest.raises(CheckpointError, match="fusion"):
            load_fusion(checkpoints["A"])
