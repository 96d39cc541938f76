"""Binary checkpoint format: bit-exact round trips and defect detection."""

import numpy as np
import pytest

from mmtl.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)


def random_tensors(rng, n=6):
    out = {}
    for i in range(n):
        shape = tuple(rng.integers(1, 5, size=rng.integers(0, 4)))
        arr = rng.normal(size=shape)
        if rng.uniform() < 0.3:
            arr = arr.astype(np.float32)
        out[f"t{i}.{'w' if i % 2 else 'b'}"] = arr
    return out


def test_round_trip_bit_exact(tmp_path):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        tensors = random_tensors(rng)
        p = tmp_path / f"m{seed}.bin"
        save_checkpoint(p, tensors, iteration=seed * 3, seed=seed,
                        config_digest="d" * 64)
        ck = load_checkpoint(p)
        assert ck.iteration == seed * 3 and ck.seed == seed
        assert sorted(ck.tensors) == sorted(tensors)
        for k, arr in tensors.items():
            assert ck.tensors[k].dtype == arr.dtype
            assert np.array_equal(ck.tensors[k], arr)


def test_negative_seed_round_trips(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.zeros(2)}, seed=-17)
    assert load_checkpoint(p).seed == -17


def test_corrupt_magic_rejected(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.ones(3)})
    raw = bytearray(p.read_bytes())
    raw[0] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_truncated_file_rejected(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.ones(100)})
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_unknown_version_rejected(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.ones(2)})
    raw = bytearray(p.read_bytes())
    raw[4] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


def test_trailing_bytes_rejected(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.ones(2)})
    p.write_bytes(p.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)


def test_digest_mismatch_warns_not_errors(tmp_path):
    p = tmp_path / "m.bin"
    save_checkpoint(p, {"a": np.ones(2)}, config_digest="abc")
    with pytest.warns(UserWarning, match="digest"):
        ck = load_checkpoint(p, expected_digest="xyz")
    assert ck.config_digest == "abc"


def test_architecture_mismatch_lists_names(tmp_path):
    from mmtl.models import BackboneConfig, HeadSpec, LabelSpec, ModelConfig, build_model
    from mmtl.tensor import ShapeError

    cfg = ModelConfig(
        backbone=BackboneConfig(blocks=1, channels=2, in_shape=(1, 8, 8)),
        heads={"cls": HeadSpec(kind="fully_connected", out_dim=2)},
        labels={"cls": LabelSpec(kind="classes", classes=2)})
    params = build_model(cfg, 0)
    flat = {k: t.data for k, t in params.named().items()}
    p = tmp_path / "m.bin"
    del flat["head.cls.b"]
    flat["head.cls.extra"] = np.zeros(3)
    save_checkpoint(p, flat)
    loaded = load_checkpoint(p)
    with pytest.raises(ShapeError) as ei:
        params.load_named(loaded.tensors)
    assert "head.cls.b" in str(ei.value) and "head.cls.extra" in str(ei.value)
