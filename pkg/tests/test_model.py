import numpy as np
import pytest

from duoadapt.autodiff import Tensor
from duoadapt.model import (Checkpoint, CheckpointFormatError, DomainClassifier,
                            DomainWiseModel, ExtractorNotPretrained,
                            MlpExtractor, RdaBlock, build_models,
                            classifier_logits, ensemble_predict, extract,
                            load_checkpoint, named_buffers, parameter_groups,
                            rda_forward, save_checkpoint)


def _small_models(seed=0, n_classes=3, in_dim=6, feature_dim=8):
    gs = MlpExtractor(in_dim, np.random.default_rng(seed), hidden=(16,),
                      feature_dim=feature_dim, proj_dim=4)
    gt = MlpExtractor(in_dim, np.random.default_rng(seed), hidden=(16,),
                      feature_dim=feature_dim, proj_dim=4)
    for g in (gs, gt):
        g.freeze()
        g.pretrained = True
    return build_models(n_classes, gs, gt, seed=seed + 1,
                        rda_hidden=(12, 8, 12), clf_hidden=(10, 8))


def test_rda_identity_channel_returns_same_object():
    block = RdaBlock(5, "source", np.random.default_rng(0), hidden=(8, 8, 8))
    z = Tensor(np.random.default_rng(1).standard_normal((4, 5)))
    assert rda_forward(block, z, "source") is z


def test_rda_cross_domain_is_identity_at_init():
    # The residual path ends in a zero-initialized linear layer, so a fresh
    # block maps cross-domain features through unchanged (values, not object).
    block = RdaBlock(5, "source", np.random.default_rng(0), hidden=(8, 8, 8))
    block.set_training(False)
    z = Tensor(np.random.default_rng(1).standard_normal((4, 5)))
    out = rda_forward(block, z, "target")
    assert out is not z
    assert np.array_equal(out.data, z.data)


def test_rda_rejects_wrong_feature_dim():
    block = RdaBlock(5, "source", np.random.default_rng(0), hidden=(8,))
    with pytest.raises(ValueError, match="feature dim"):
        rda_forward(block, Tensor(np.zeros((2, 6))), "target")


def test_rda_rejects_bad_domain():
    with pytest.raises(ValueError, match="domain"):
        RdaBlock(5, "both", np.random.default_rng(0))


def test_extract_requires_pretraining():
    gs = MlpExtractor(6, np.random.default_rng(0), hidden=(8,), feature_dim=8,
                      proj_dim=4)
    gt = MlpExtractor(6, np.random.default_rng(0), hidden=(8,), feature_dim=8,
                      proj_dim=4)
    ms, _ = build_models(2, gs, gt, seed=0, rda_hidden=(8,), clf_hidden=(8,))
    with pytest.raises(ExtractorNotPretrained):
        extract(ms, Tensor(np.zeros((2, 6))), "source")


def test_extract_is_constant_wrt_tape():
    ms, _ = _small_models()
    ms.set_training(False)
    z = extract(ms, Tensor(np.random.default_rng(2).standard_normal((4, 6))),
                "source")
    assert not z.requires_grad


def test_extract_routes_by_input_domain():
    ms, mt = _small_models()
    # same frozen extractors are shared by both models
    assert ms.extractor_s is mt.extractor_s
    assert ms.extractor_t is mt.extractor_t


def test_classifier_logits_shape():
    ms, _ = _small_models(n_classes=3)
    ms.set_training(False)
    out = classifier_logits(ms, Tensor(np.random.default_rng(3)
                                       .standard_normal((5, 6))), "source")
    assert out.shape == (5, 3)


def test_ensemble_matches_manual_logit_sum():
    ms, mt = _small_models(n_classes=4)
    for m in (ms, mt):
        m.set_training(False)
    x = Tensor(np.random.default_rng(4).standard_normal((6, 6)))
    ids, dist = ensemble_predict(ms, mt, x)
    fused = (classifier_logits(ms, x, "target").data
             + classifier_logits(mt, x, "target").data)
    assert np.array_equal(ids, fused.argmax(axis=1))
    assert np.max(np.abs(dist.sum(axis=1) - 1)) <= 1e-12
    e = np.exp(fused - fused.max(axis=1, keepdims=True))
    assert np.allclose(dist, e / e.sum(axis=1, keepdims=True), atol=1e-12)


def test_parameter_groups_partition_and_prefixes():
    ms, mt = _small_models()
    pset = parameter_groups(ms, mt)
    pset.validate_partition()
    prefix = {"eps_s": "Gs.", "eps_t": "Gt.", "phi_s": "Ms.Fs.",
              "phi_t": "Mt.Ft.", "theta_s": "Ms.Cs.", "theta_t": "Mt.Ct."}
    seen = set()
    for group, names in pset.groups.items():
        assert names, f"empty group {group}"
        for name in names:
            assert name.startswith(prefix[group]), (group, name)
            assert name not in seen
            seen.add(name)
    assert seen == set(pset.entries)


def test_frozen_extractor_parameters_do_not_require_grad():
    ms, mt = _small_models()
    pset = parameter_groups(ms, mt)
    for group in ("eps_s", "eps_t"):
        for name in pset.groups[group]:
            assert not pset.entries[name].requires_grad
    for group in ("phi_s", "phi_t", "theta_s", "theta_t"):
        for name in pset.groups[group]:
            assert pset.entries[name].requires_grad


def test_classifier_emits_raw_logits():
    clf = DomainClassifier(4, 3, np.random.default_rng(5), hidden=(8,))
    clf.set_training(False)
    out = clf(Tensor(np.random.default_rng(6).standard_normal((10, 4)) * 5))
    # raw logits: not constrained to the simplex
    assert not np.allclose(out.data.sum(axis=1), 1.0)


def test_named_buffers_cover_batch_norms():
    ms, mt = _small_models()
    buffers = named_buffers(ms, mt)
    assert any(k.startswith("Ms.Fs.") and "running_mean" in k for k in buffers)
    assert any(k.startswith("Mt.Ct.") and "running_var" in k for k in buffers)


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_exact(tmp_path):
    ms, mt = _small_models(seed=7)
    ckpt = Checkpoint.capture(ms, mt, epoch=3, reward=0.875, config_hash="abc123")
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ckpt)
    loaded = load_checkpoint(path)
    assert loaded.epoch == 3
    assert loaded.reward == 0.875
    assert loaded.config_hash == "abc123"
    assert set(loaded.arrays) == set(ckpt.arrays)
    for name, arr in ckpt.arrays.items():
        assert loaded.arrays[name].tobytes() == arr.tobytes(), name

    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_restore_recovers_outputs(tmp_path):
    ms, mt = _small_models(seed=8)
    for m in (ms, mt):
        m.set_training(False)
    x = Tensor(np.random.default_rng(9).standard_normal((5, 6)))
    before = classifier_logits(ms, x, "target").data.copy()
    ckpt = Checkpoint.capture(ms, mt, epoch=0, reward=0.0)

    rng = np.random.default_rng(10)
    for t in parameter_groups(ms, mt).entries.values():
        t.data = t.data + rng.standard_normal(t.data.shape) * 0.1
    assert not np.allclose(classifier_logits(ms, x, "target").data, before)

    ckpt.restore(ms, mt)
    assert np.array_equal(classifier_logits(ms, x, "target").data, before)


def test_load_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
        load_checkpoint(path)


def test_load_checkpoint_rejects_truncation(tmp_path):
    ms, mt = _small_models()
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, Checkpoint.capture(ms, mt, epoch=0, reward=0.0))
    path.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_build_models_deterministic():
    a = Checkpoint.capture(*_small_models(seed=11), epoch=0, reward=0.0)
    b = Checkpoint.capture(*_small_models(seed=11), epoch=0, reward=0.0)
    for name in a.arrays:
        assert a.arrays[name].tobytes() == b.arrays[name].tobytes()
