"""Memory bank: retrieval semantics, persistence, and invariances."""

import numpy as np
import pytest

from phaseflow import env
from phaseflow.bank import (
    BankCorruptionError,
    BankFormatError,
    BankStateError,
    MemoryBank,
    PrototypeEntry,
    QueryHead,
    build_bank,
    load_bank,
    retrieve,
    save_bank,
)
from phaseflow.encoder import BehaviorEncoder
from phaseflow.tensor import Tensor, l2_normalize
from phaseflow.trajectory import compute_stats, load_dataset, normalize_trajectory


def make_bank(n=6, d_key=4, d_value=5, seed=0, kappa=0.1):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        key = rng.standard_normal(d_key)
        key = (key / np.linalg.norm(key)).astype(np.float32)
        entries.append(PrototypeEntry(
            key=key, value=rng.standard_normal(d_value).astype(np.float32),
            task_id=i % 3, episode_id=f"ep{i:03d}"))
    return MemoryBank(entries=entries, kappa=kappa, built_from="test")


class TestRetrieve:
    def test_k1_returns_nearest_exactly(self):
        bank = make_bank()
        query = bank.entries[3].key.astype(np.float64) * 2.0
        z, w, idx = retrieve(bank, query, 1)
        assert idx.tolist() == [3]
        assert w.tolist() == [1.0]
        assert np.array_equal(z, bank.entries[3].value.astype(np.float64))

    def test_equal_scores_split_evenly(self):
        bank = make_bank(n=4, d_key=2)
        for i, e in enumerate(bank.entries):
            e.key = np.array([1.0, 0.0], dtype=np.float32)
        bank._keys = None
        _, w, idx = retrieve(bank, np.array([1.0, 0.0]), 2)
        assert np.allclose(w, [0.5, 0.5])
        assert idx.tolist() == [0, 1]  # ties break to lower index

    def test_weights_sum_to_one(self):
        bank = make_bank(n=20)
        rng = np.random.default_rng(5)
        for _ in range(10):
            _, w, _ = retrieve(bank, rng.standard_normal(4), 5)
            assert abs(w.sum() - 1.0) < 1e-6
            assert np.all(w >= 0)

    def test_k_out_of_range(self):
        bank = make_bank(n=3)
        with pytest.raises(ValueError):
            retrieve(bank, np.zeros(4), 0)
        with pytest.raises(ValueError):
            retrieve(bank, np.zeros(4), 4)

    def test_empty_bank_rejected(self):
        bank = make_bank(n=2)
        bank.entries = []
        with pytest.raises(BankStateError):
            retrieve(bank, np.zeros(4), 1)

    def test_scale_invariance_of_selection(self):
        bank = make_bank(n=12)
        rng = np.random.default_rng(7)
        q = rng.standard_normal(4)
        _, w1, idx1 = retrieve(bank, q, 4)
        scaled = make_bank(n=12)
        for e in scaled.entries:
            e.key = e.key * 3.0
        scaled._keys = None
        _, w2, idx2 = retrieve(scaled, q * 3.0, 4)
        assert idx1.tolist() == idx2.tolist()
        assert not np.allclose(w1, w2)  # weights shift through kappa

    def test_weight_monotone_in_score(self):
        bank = make_bank(n=5, d_key=3)
        q = np.array([1.0, 0.0, 0.0])
        _, w1, idx1 = retrieve(bank, q, 3)
        target = int(idx1[1])
        bank.entries[target].key = (
            bank.entries[target].key + np.array([0.4, 0, 0], dtype=np.float32))
        bank._keys = None
        _, w2, idx2 = retrieve(bank, q, 3)
        pos1 = idx1.tolist().index(target)
        pos2 = idx2.tolist().index(target)
        assert w2[pos2] >= w1[pos1]

    def test_kappa_to_zero_is_one_hot(self):
        bank = make_bank(n=8, kappa=1e-4)
        rng = np.random.default_rng(9)
        _, w, _ = retrieve(bank, rng.standard_normal(4), 5)
        assert w[0] > 1.0 - 1e-6
        assert np.all(w[1:] < 1e-6)


class TestBuildBank:
    def setup_bank(self, tmp_path, n_per_task=2, tasks=(0, 4)):
        out = str(tmp_path / "d")
        env.generate_dataset(out, n_per_task=n_per_task, seed=21, tasks=list(tasks))
        trajs = load_dataset(out)
        stats = compute_stats(trajs)
        rng = np.random.default_rng(0)
        enc = BehaviorEncoder(rng, d_obs=env.D_OBS, d_act=env.D_ACT, num_tasks=8,
                              d_model=16, n_blocks=1, d_state=4)
        qh = QueryHead(rng, 16)
        return enc, qh, trajs, stats

    def test_one_entry_per_demo(self, tmp_path):
        enc, qh, trajs, stats = self.setup_bank(tmp_path)
        bank = build_bank(enc, qh, trajs, stats)
        assert len(bank.entries) == len(trajs)
        assert all(abs(np.linalg.norm(e.key) - 1.0) < 1e-5 for e in bank.entries)

    def test_deterministic_rebuild(self, tmp_path):
        enc, qh, trajs, stats = self.setup_bank(tmp_path)
        a = build_bank(enc, qh, trajs, stats)
        b = build_bank(enc, qh, trajs, stats)
        pa, pb = str(tmp_path / "a.bvmb"), str(tmp_path / "b.bvmb")
        save_bank(pa, a)
        save_bank(pb, b)
        assert open(pa, "rb").read() == open(pb, "rb").read()

    def test_values_match_independent_recomputation(self, tmp_path):
        enc, qh, trajs, stats = self.setup_bank(tmp_path)
        bank = build_bank(enc, qh, trajs, stats, frame_skip=4)
        tr = trajs[-1]
        view = normalize_trajectory(tr, stats).frame_skip(4)
        lat = enc.encode_trajectory(view.obs, view.act, tr.task_id,
                                    times=view.times)
        stored = bank.entries[-1].value.astype(np.float64)
        assert np.abs(stored - lat.z_proto.data).max() < 1e-6

    def test_empty_dataset_rejected(self, tmp_path):
        enc, qh, trajs, stats = self.setup_bank(tmp_path)
        with pytest.raises(BankStateError):
            build_bank(enc, qh, [], stats)


class TestPersistence:
    def test_save_load_save_is_byte_identical(self, tmp_path):
        bank = make_bank(n=9)
        p1, p2 = str(tmp_path / "a.bvmb"), str(tmp_path / "b.bvmb")
        save_bank(p1, bank)
        save_bank(p2, load_bank(p1))
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_roundtrip_preserves_fields(self, tmp_path):
        bank = make_bank(n=5, kappa=0.37)
        path = str(tmp_path / "x.bvmb")
        save_bank(path, bank)
        loaded = load_bank(path)
        assert loaded.kappa == pytest.approx(0.37)
        assert loaded.built_from == "test"
        for a, b in zip(bank.entries, loaded.entries):
            assert np.array_equal(a.key, b.key)
            assert np.array_equal(a.value, b.value)
            assert (a.task_id, a.episode_id) == (b.task_id, b.episode_id)

    def test_payload_corruption_detected_by_crc(self, tmp_path):
        bank = make_bank(n=4)
        path = str(tmp_path / "x.bvmb")
        save_bank(path, bank)
        blob = bytearray(open(path, "rb").read())
        blob[40] ^= 0xFF  # inside the first entry's key
        open(path, "wb").write(bytes(blob))
        with pytest.raises(BankCorruptionError, match="CRC"):
            load_bank(path)

    def test_truncation_reports_offset(self, tmp_path):
        bank = make_bank(n=4)
        path = str(tmp_path / "x.bvmb")
        save_bank(path, bank)
        blob = open(path, "rb").read()[:50]
        open(path, "wb").write(blob)
        with pytest.raises(BankCorruptionError, match="byte"):
            load_bank(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = str(tmp_path / "x.bvmb")
        open(path, "wb").write(b"NOPE" + b"\x00" * 60)
        with pytest.raises(BankFormatError):
            load_bank(path)

    def test_dimension_mismatch_is_loud(self, tmp_path):
        # a bank built under a different width fails the policy's check, it
        # is never silently misread
        bank = make_bank(n=3, d_value=5)
        path = str(tmp_path / "x.bvmb")
        save_bank(path, bank)
        loaded = load_bank(path)
        assert loaded.d_value == 5
        assert loaded.d_key == 4
