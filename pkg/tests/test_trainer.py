import math

import numpy as np
import pytest
import torch

from ccfusion.errors import CheckpointError, ConfigError, DataError, IntegrityError, VersionError
from ccfusion.imagecore import SourcePair, crop_patches
from ccfusion.network import build_model
from ccfusion.store import FORMAT_VERSION
from ccfusion.toy import make_pairs
from ccfusion.trainer import (
    DegenerateSamplingWarning,
    Trainer,
    TrainConfig,
    build_contrastive_samples,
    load_checkpoint,
    log_columns,
    patch_weights,
    save_checkpoint,
)


def tiny_cfg(**kw):
    base = dict(patch_size=16, patch_count=4, batch_size=2, stage1_epochs=1, stage2_epochs=1, negatives=2)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation_and_presets():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(mode="rgb")
    with pytest.raises(ConfigError):
        TrainConfig(layer_weights=(1, 1))
    pet = TrainConfig.medical("pet")
    assert (pet.patch_count, pet.batch_size, pet.batch_size_for(2), pet.stage1_epochs, pet.stage2_epochs) == (2662, 30, 10, 3, 1)
    assert TrainConfig.medical("spect").patch_count == 4114
    assert log_columns("medical")[4:6] == ("l_mri", "l_fun")


def test_contrastive_samples(toy_pairs):
    ps = crop_patches(toy_pairs, 16, 12, seed=0)
    samples = build_contrastive_samples(ps, 3, seed=1)
    assert len(samples) == 12
    for s in samples:
        assert s.negatives[0] == s.index
        assert all(ps.pair_index[n] != ps.pair_index[s.index] for n in s.negatives[1:])
    assert samples == build_contrastive_samples(ps, 3, seed=1)
    single = crop_patches(toy_pairs[:1], 16, 4, seed=0)
    with pytest.warns(DegenerateSamplingWarning):
        build_contrastive_samples(single, 3, seed=1)


def test_flat_patches_fall_back_to_pair_weights():
    pair = make_pairs(1, 32, seed=4)[0]
    flat = np.full((32, 32), 10.0)
    from ccfusion.imagecore import ImagePlane

    flat_pair = SourcePair("flat", ImagePlane(flat), ImagePlane(flat), None)
    ps = crop_patches([flat_pair], 16, 2, seed=0)
    w = patch_weights(ps, [flat_pair])
    np.testing.assert_allclose(w, 0.5)
    ps = crop_patches([pair], 16, 3, seed=0)
    assert np.allclose(w.sum(axis=1), 2.0)
    assert np.allclose(patch_weights(ps, [pair])[:, :2].sum(axis=1), 1.0)


def test_step_count_matches_epochs(backbone, toy_pairs):
    cfg = tiny_cfg(patch_count=5, batch_size=2, stage1_epochs=2)
    tr = Trainer(build_model(0), backbone, cfg)
    rows = tr.run_stage(toy_pairs, 1)
    assert len(rows) == tr.step == 2 * math.ceil(5 / 2)


def test_stage_one_makes_no_contrastive_calls(backbone, toy_pairs):
    before = backbone.contrastive_calls
    Trainer(build_model(0), backbone, tiny_cfg()).run_stage(toy_pairs, 1)
    assert backbone.contrastive_calls == before


def test_zero_layer_weights_reduce_stage_two_to_stage_one(backbone, toy_pairs):
    cfg1 = tiny_cfg(seed=7)
    cfg2 = tiny_cfg(seed=7, layer_weights=(0, 0, 0, 0, 0))
    a = Trainer(build_model(7), backbone, cfg1)
    b = Trainer(build_model(7), backbone, cfg2)
    rows_a = a.run_stage(toy_pairs, 1)
    rows_b = b.run_stage(toy_pairs, 2)
    assert [r["l_total"] for r in rows_a] == [r["l_total"] for r in rows_b]
    for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(pa, pb)


def test_stage_two_needs_masks(backbone):
    pairs = make_pairs(2, 32, seed=0)
    unmasked = [SourcePair(p.name, p.ir, p.vis, None) for p in pairs]
    with pytest.raises(DataError, match="toy000"):
        Trainer(build_model(0), backbone, tiny_cfg()).run_stage(unmasked, 2)


def test_checkpoint_round_trip_is_bitwise(tmp_path, backbone, toy_pairs):
    tr = Trainer(build_model(0), backbone, tiny_cfg(), out_dir=tmp_path)
    tr.run_stage(toy_pairs, 1)
    path = tmp_path / "latest.ckpt"
    assert (tmp_path / "stage1_epoch001.ckpt").is_file()
    assert (tmp_path / "latest.manifest.json").is_file()
    ck = load_checkpoint(path)
    for (ka, va), (kb, vb) in zip(tr.model.state_dict().items(), ck.model.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    opt = tr.optimizer.state_dict()
    for pid, st in opt["state"].items():
        for key, val in st.items():
            assert torch.equal(torch.as_tensor(val), torch.as_tensor(ck.optimizer_state["state"][pid][key]))
    assert ck.step == tr.step

    # resuming continues exactly like an uninterrupted run
    resumed = Trainer.from_checkpoint(path, backbone, tiny_cfg())
    straight_rows = tr.run_stage(toy_pairs, 1)
    resumed_rows = resumed.run_stage(toy_pairs, 1)
    assert [r["l_total"] for r in straight_rows] == [r["l_total"] for r in resumed_rows]


def test_checkpoint_corruption_and_version(tmp_path):
    model = build_model(0)
    save_checkpoint(tmp_path / "a.ckpt", model, step=3)
    blob = bytearray((tmp_path / "a.ckpt").read_bytes())
    blob[-5] ^= 0xFF
    (tmp_path / "b.ckpt").write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "b.ckpt")
    save_checkpoint(tmp_path / "c.ckpt", model, version=FORMAT_VERSION + 1)
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "c.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_training_logs(tmp_path, backbone, toy_pairs):
    tr = Trainer(build_model(0), backbone, tiny_cfg(), out_dir=tmp_path)
    tr.run_stage(toy_pairs, 1)
    tr.run_stage(toy_pairs, 2)
    tr.write_logs()
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,l_s,l_n,l_p,l_ir,l_vis,l_total,sigma_a,sigma_b,gamma_a,gamma_b"
    assert (tmp_path / "weights_trace.csv").read_text().startswith("step,sigma_a")
