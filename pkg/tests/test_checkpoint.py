"""Binary checkpoint format: round trips, validation, corruption reporting."""

import numpy as np
import pytest

from phaseflow.checkpoint import (
    CheckpointCorruptionError,
    CheckpointFormatError,
    assign_params,
    load_checkpoint,
    save_checkpoint,
)
from phaseflow.tensor import Tensor


def sample_params():
    rng = np.random.default_rng(0)
    return {
        "enc.w": rng.standard_normal((3, 4)).astype(np.float32),
        "enc.b": rng.standard_normal(4).astype(np.float32),
        "scalarish": np.float32(rng.standard_normal(1)),
        "deep.block.0.kernel": rng.standard_normal((2, 2, 2)).astype(np.float32),
    }


class TestRoundTrip:
    def test_values_and_config_survive(self, tmp_path):
        path = str(tmp_path / "m.bvla")
        params = sample_params()
        save_checkpoint(path, params, config={"d_model": 16, "seed": 3})
        loaded, config = load_checkpoint(path)
        assert config == {"d_model": 16, "seed": 3}
        assert set(loaded) == set(params)
        for k in params:
            assert np.array_equal(loaded[k], np.asarray(params[k], dtype=np.float32))
            assert loaded[k].dtype == np.float32

    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = str(tmp_path / "a"), str(tmp_path / "b")
        save_checkpoint(p1, sample_params(), config={"x": 1})
        loaded, config = load_checkpoint(p1)
        save_checkpoint(p2, loaded, config=config)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_tensor_values_accepted(self, tmp_path):
        path = str(tmp_path / "t")
        save_checkpoint(path, {"w": Tensor(np.ones((2, 2)))})
        loaded, _ = load_checkpoint(path)
        assert np.array_equal(loaded["w"], np.ones((2, 2), dtype=np.float32))


class TestValidation:
    def test_bad_magic(self, tmp_path):
        path = str(tmp_path / "x")
        open(path, "wb").write(b"XXXX" + b"\x00" * 16)
        with pytest.raises(CheckpointFormatError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path):
        path = str(tmp_path / "x")
        open(path, "wb").write(b"BVLA" + (99).to_bytes(4, "little") + b"\x00" * 8)
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(path)

    def test_truncation_reports_offset(self, tmp_path):
        path = str(tmp_path / "x")
        save_checkpoint(path, sample_params())
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[: len(blob) // 2])
        with pytest.raises(CheckpointCorruptionError, match=r"byte \d+"):
            load_checkpoint(path)

    def test_assign_checks_names_and_shapes(self, tmp_path):
        path = str(tmp_path / "x")
        save_checkpoint(path, {"w": np.ones((2, 3), dtype=np.float32)})
        loaded, _ = load_checkpoint(path)
        good = {"w": Tensor(np.zeros((2, 3)))}
        assign_params(loaded, good)
        assert np.array_equal(good["w"].data, np.ones((2, 3)))
        with pytest.raises(CheckpointFormatError, match="missing|extra"):
            assign_params(loaded, {"other": Tensor(np.zeros(2))})
        with pytest.raises(CheckpointFormatError, match="shape"):
            assign_params(loaded, {"w": Tensor(np.zeros((3, 2)))})
