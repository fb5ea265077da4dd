import struct

import numpy as np
import pytest

from radarkit import nets
from radarkit.diffcore import Tensor
from radarkit.nets import (
    ArchConfig,
    BadMagicError,
    CheckpointError,
    TruncatedCheckpointError,
    VersionMismatchError,
    build_classifier,
    build_detector,
    load_checkpoint,
    param_count,
    save_checkpoint,
)

ARCHS = ["cnn-small", "cnn-res"]


def small_count(C, S, out):
    # closed form for cnn-small, written out independently of layer_specs
    return 16 * C * 9 + 16 + 32 * 16 * 9 + 32 + 32 * (S // 4) ** 2 * 128 + 128 + 128 * out + out


@pytest.mark.parametrize("C,S,out", [(3, 32, 10), (3, 16, 10), (1, 8, 1), (3, 16, 1)])
def test_param_count_cnn_small(C, S, out):
    cfg = ArchConfig("cnn-small", C, S, out, out == 1)
    assert param_count(cfg) == small_count(C, S, out)
    assert nets.build_model(cfg, 0).num_params() == small_count(C, S, out)


def test_param_count_cnn_res_adds_one_block():
    a = param_count(ArchConfig("cnn-res", 3, 16, 10, False))
    b = param_count(ArchConfig("cnn-small", 3, 16, 10, False))
    assert a - b == 16 * 16 * 9 + 16


@pytest.mark.parametrize("arch", ARCHS)
def test_output_shapes(arch):
    x = Tensor(np.random.default_rng(0).uniform(size=(5, 3, 16, 16)))
    f = build_classifier(arch, 0, image_size=16).eval()
    g = build_detector(arch, 0, image_size=16).eval()
    assert f(x).shape == (5, 10)
    assert g(x).shape == (5,)
    s = nets.detect(g, x).data
    assert np.all((s > 0) & (s < 1))


def test_image_size_must_divide_by_four():
    with pytest.raises(ValueError):
        build_classifier("cnn-small", 0, image_size=10)


def test_unknown_architecture():
    with pytest.raises(ValueError, match="cnn-huge"):
        build_classifier("cnn-huge", 0)


@pytest.mark.parametrize("arch", ARCHS)
def test_init_is_seeded(arch):
    a = build_detector(arch, 4, image_size=8).state()
    b = build_detector(arch, 4, image_size=8).state()
    c = build_detector(arch, 5, image_size=8).state()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_he_uniform_bounds():
    f = build_classifier("cnn-small", 0, image_size=16)
    w = f.params["layer0.weight"].data
    bound = np.sqrt(6.0 / (3 * 9))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound
    assert not f.params["layer0.bias"].data.any()


def test_zeroed_detector_outputs_half():
    g = build_detector("cnn-small", 0, image_size=8).eval()
    for p in g.params.values():
        p.data[...] = 0.0
    s = nets.detect_scores(g, np.random.default_rng(1).uniform(size=(4, 3, 8, 8)))
    assert np.array_equal(s, np.full(4, 0.5))


@pytest.mark.parametrize("arch", ARCHS)
def test_batched_matches_per_item(arch):
    x = np.random.default_rng(2).uniform(size=(7, 3, 16, 16))
    f = build_classifier(arch, 3, image_size=16).eval()
    whole = f(Tensor(x)).data
    single = np.concatenate([f(Tensor(x[i:i + 1])).data for i in range(7)])
    assert np.abs(whole - single).max() < 1e-12


def test_eval_freezes_parameters():
    f = build_classifier("cnn-small", 0, image_size=8)
    assert all(p.requires_grad for p in f.params.values())
    f.eval()
    assert not any(p.requires_grad for p in f.params.values())
    with pytest.raises(ValueError):
        f.set_mode("inference")


def test_copy_is_deep():
    f = build_classifier("cnn-small", 0, image_size=8)
    c = f.copy()
    c.params["layer0.weight"].data[...] = 0
    assert f.params["layer0.weight"].data.any()


class TestCheckpoint:
    @pytest.mark.parametrize("arch", ARCHS)
    @pytest.mark.parametrize("detector", [False, True])
    def test_round_trip_bytes(self, tmp_path, arch, detector):
        m = (build_detector(arch, 1, image_size=16) if detector
             else build_classifier(arch, 1, image_size=16, num_classes=7))
        p1, p2 = tmp_path / "a.rdr", tmp_path / "b.rdr"
        save_checkpoint(m, p1)
        back = load_checkpoint(p1)
        assert back.arch == m.arch
        assert back.mode == "eval"
        save_checkpoint(back, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_layout(self, tmp_path):
        m = build_detector("cnn-small", 0, image_size=8)
        path = tmp_path / "d.rdr"
        save_checkpoint(m, path)
        buf = path.read_bytes()
        assert buf[:4] == b"RDR1"
        version, count = struct.unpack("<II", buf[4:12])
        assert version == 1 and count == len(m.params)
        (nlen,) = struct.unpack("<H", buf[12:14])
        assert buf[14:14 + nlen] == b"layer0.weight"
        assert buf[14 + nlen] == 4  # rank
        dims = struct.unpack("<4I", buf[15 + nlen:31 + nlen])
        assert dims == (16, 3, 3, 3)
        first = struct.unpack("<d", buf[31 + nlen:39 + nlen])[0]
        assert first == m.params["layer0.weight"].data.reshape(-1)[0]

    def _saved(self, tmp_path):
        path = tmp_path / "c.rdr"
        save_checkpoint(build_classifier("cnn-small", 0, image_size=8), path)
        return path, path.read_bytes()

    def test_bad_magic(self, tmp_path):
        path, buf = self._saved(tmp_path)
        path.write_bytes(b"XXXX" + buf[4:])
        with pytest.raises(BadMagicError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path, buf = self._saved(tmp_path)
        path.write_bytes(buf[:4] + struct.pack("<I", 2) + buf[8:])
        with pytest.raises(VersionMismatchError, match="version"):
            load_checkpoint(path)

    @pytest.mark.parametrize("cut", [6, 20, 200, -1])
    def test_truncated(self, tmp_path, cut):
        path, buf = self._saved(tmp_path)
        path.write_bytes(buf[:cut])
        with pytest.raises(TruncatedCheckpointError, match="truncation"):
            load_checkpoint(path)

    def test_missing_tensor(self, tmp_path):
        m = build_classifier("cnn-small", 0, image_size=8)
        state = m.state()
        del state["layer3.bias"]
        path = tmp_path / "m.rdr"
        path.write_bytes(nets.encode_tensors(state))
        with pytest.raises(TruncatedCheckpointError, match="layer3.bias"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path, buf = self._saved(tmp_path)
        path.write_bytes(buf + b"\0")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)
