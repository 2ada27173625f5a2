import numpy as np
import pytest

from setvec import checkpoint as C
from setvec import model as M
from setvec.errors import FormatError, IncompatibilityError


def random_checkpoint(arch=None, seed=0) -> C.Checkpoint:
    arch = arch or M.ArchConfig()
    rng = np.random.default_rng(seed)
    p = M.init_params(arch, rng)
    p.target_shift, p.target_scale = 0.1 + rng.random(), 1 / 3
    for k in p.bn_state:
        p.bn_state[k] = rng.random(p.bn_state[k].shape).astype(p.bn_state[k].dtype)
    state = C.OptimizerState.fresh(p)
    state.step = 17
    for k in state.m:
        state.m[k] = rng.normal(size=state.m[k].shape)
        state.v[k] = rng.random(state.v[k].shape)
    return C.Checkpoint(p, state, {"lambda1": 100.0, "nested": {"x": [1, 2]}}, seed=2**63 + 5, epoch=4)


def assert_same(a: C.Checkpoint, b: C.Checkpoint):
    assert a.params.equals(b.params)
    assert a.opt_state.step == b.opt_state.step
    for k in a.opt_state.m:
        assert a.opt_state.m[k].tobytes() == b.opt_state.m[k].tobytes()
        assert a.opt_state.v[k].tobytes() == b.opt_state.v[k].tobytes()
    assert (a.config, a.seed, a.epoch, a.config_hash) == (b.config, b.seed, b.epoch, b.config_hash)


class TestRoundTrip:
    @pytest.mark.parametrize("arch", [M.ArchConfig(), M.ArchConfig(dtype="float32"),
                                      M.ArchConfig.for_volumes(patch_size=12, channels=(2, 3))])
    def test_bit_exact(self, tmp_path, arch):
        ck = random_checkpoint(arch)
        C.save_checkpoint(ck, tmp_path / "c.bin")
        assert_same(ck, C.load_checkpoint(tmp_path / "c.bin"))

    def test_deterministic_bytes(self):
        assert C.to_bytes(random_checkpoint()) == C.to_bytes(random_checkpoint())

    def test_config_hash_tracks_config(self):
        a = random_checkpoint()
        b = random_checkpoint()
        b.config = {**a.config, "lambda1": 0.0}
        assert a.config_hash != b.config_hash
        assert a.config_hash == C.config_hash({"nested": {"x": [1, 2]}, "lambda1": 100.0})


class TestRejection:
    def test_tampered_byte(self, tmp_path):
        raw = bytearray(C.to_bytes(random_checkpoint()))
        raw[len(raw) // 2] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            C.from_bytes(bytes(raw))

    def test_truncated(self):
        raw = C.to_bytes(random_checkpoint())
        with pytest.raises(FormatError):
            C.from_bytes(raw[:-100])
        with pytest.raises(FormatError):
            C.from_bytes(raw[:10])

    def test_bad_magic(self):
        raw = C.to_bytes(random_checkpoint())
        with pytest.raises(FormatError, match="magic"):
            C.from_bytes(b"NOTACKPT" + raw[8:])

    def test_version_mismatch(self):
        import hashlib
        import struct
        raw = C.to_bytes(random_checkpoint())
        body = bytearray(raw[:-32])
        struct.pack_into("<I", body, 8, C.VERSION + 1)
        forged = bytes(body) + hashlib.sha256(bytes(body)).digest()
        with pytest.raises(IncompatibilityError, match="version"):
            C.from_bytes(forged)

    def test_architecture_mismatch(self, tmp_path):
        C.save_checkpoint(random_checkpoint(M.ArchConfig()), tmp_path / "c.bin")
        with pytest.raises(IncompatibilityError):
            C.load_checkpoint(tmp_path / "c.bin", expect_arch=M.ArchConfig.for_volumes())
        C.load_checkpoint(tmp_path / "c.bin", expect_arch=M.ArchConfig())

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        C.save_checkpoint(random_checkpoint(), tmp_path / "c.bin")
        assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]
