import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from countlab import checkpoint, images, model, nn, shards
from countlab.errors import FormatError


def make_shard(n=3, c=1, h=5, w=4, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.integers(0, 256, size=(n, c, h, w), dtype=np.uint8)
    labels = rng.integers(0, 6, size=n, dtype=np.uint8)
    placements = [[(int(rng.integers(0, 10)), int(rng.integers(0, h)),
                    int(rng.integers(0, w)))] * int(rng.integers(0, 3))
                  for _ in range(n)]
    return shards.ShardData(imgs, labels, placements)


class TestShards:
    def test_round_trip_bit_exact(self, tmp_path):
        data = make_shard()
        p = tmp_path / "x.cnts"
        shards.write_shard(data, p)
        back = shards.read_shard(p)
        assert np.array_equal(back.images, data.images)
        assert np.array_equal(back.labels, data.labels)
        assert [list(map(tuple, pl)) for pl in back.placements] == \
               [list(map(tuple, pl)) for pl in data.placements]

    def test_images_f32_round_trip(self, tmp_path):
        data = make_shard(seed=1)
        p = tmp_path / "x.cnts"
        shards.write_shard(data, p)
        a = data.images_f32()
        b = shards.read_shard(p).images_f32()
        assert np.array_equal(a, b)
        assert a.dtype == np.float32
        assert a.max() <= 1.0 and a.min() >= 0.0

    def test_quantize_round_trip(self):
        img = np.arange(256, dtype=np.float32).reshape(16, 16) / 255.0
        q = shards.quantize_image(img)
        assert np.array_equal(shards.quantize_image(q.astype(np.float32) / 255.0), q)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.cnts"
        p.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            shards.read_shard(p)

    def test_truncated(self, tmp_path):
        data = make_shard()
        p = tmp_path / "x.cnts"
        shards.write_shard(data, p)
        p.write_bytes(p.read_bytes()[:-5])
        with pytest.raises(FormatError):
            shards.read_shard(p)

    def test_trailing_bytes(self, tmp_path):
        data = make_shard()
        p = tmp_path / "x.cnts"
        shards.write_shard(data, p)
        p.write_bytes(p.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            shards.read_shard(p)

    def test_inconsistent_counts_rejected(self, tmp_path):
        data = make_shard()
        data.placements.pop()
        with pytest.raises(FormatError):
            shards.write_shard(data, tmp_path / "x.cnts")

    @given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 6),
           st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_property(self, n, h, w, seed):
        import tempfile
        from pathlib import Path
        data = make_shard(n=n, h=h, w=w, seed=seed)
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "x.cnts"
            shards.write_shard(data, p)
            back = shards.read_shard(p)
        assert np.array_equal(back.images, data.images)
        assert np.array_equal(back.labels, data.labels)


class TestNetpbm:
    def test_pgm_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (7, 9), dtype=np.uint8)
        p = tmp_path / "a.pgm"
        images.write_pgm(img, p)
        back = images.read_pgm(p)
        assert np.array_equal(shards.quantize_image(back), img)

    def test_pgm_float_input_scaled(self, tmp_path):
        img = np.array([[0.0, 1.0]], dtype=np.float32)
        p = tmp_path / "b.pgm"
        images.write_pgm(img, p)
        assert np.array_equal(images.read_pgm(p), [[0.0, 1.0]])

    def test_pgm_comment_header(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n255\n\x00\xff")
        assert np.array_equal(images.read_pgm(p), [[0.0, 1.0]])

    def test_pgm_bad_magic(self, tmp_path):
        p = tmp_path / "d.pgm"
        p.write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(FormatError):
            images.read_pgm(p)

    def test_pgm_truncated(self, tmp_path):
        p = tmp_path / "e.pgm"
        p.write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(FormatError):
            images.read_pgm(p)

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.random.default_rng(1).integers(0, 256, (3, 2, 3), dtype=np.uint8)
        p = tmp_path / "f.ppm"
        images.write_ppm(rgb, p)
        assert np.array_equal(images.read_ppm(p), rgb)

    def test_ppm_rejects_wrong_shape(self, tmp_path):
        with pytest.raises(FormatError):
            images.write_ppm(np.zeros((2, 2), dtype=np.uint8), tmp_path / "g.ppm")


class TestCheckpoint:
    def _ckpt(self, velocity=True, seed=0):
        net = model.build_net(model.ArchSpec(
            layers=[nn.Conv(np.random.default_rng(seed).normal(
                size=(2, 1, 3, 3)).astype(np.float32), np.zeros(2, np.float32), 1),
                nn.Relu(), nn.MaxPool(2, 2), nn.Lrn(3),
                nn.Fc(np.random.default_rng(seed + 1).normal(
                    size=(3, 2 * 2 * 2)).astype(np.float32), np.zeros(3, np.float32))],
            class_count=3))
        vel = [np.random.default_rng(seed + 2).normal(size=p.shape).astype(np.float32)
               for p in nn.param_tensors(net)] if velocity else None
        return checkpoint.Checkpoint(net, vel, 42, {"master_seed": 7})

    def test_round_trip_bit_exact(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "a.cntc"
        checkpoint.save_checkpoint(ck, p)
        back = checkpoint.load_checkpoint(p)
        assert back.iteration == 42
        assert back.rng_state == {"master_seed": 7}
        for a, b in zip(nn.param_tensors(ck.net), nn.param_tensors(back.net)):
            assert np.array_equal(a, b)
        for a, b in zip(ck.velocity, back.velocity):
            assert np.array_equal(a, b)

    def test_no_velocity(self, tmp_path):
        ck = self._ckpt(velocity=False)
        p = tmp_path / "b.cntc"
        checkpoint.save_checkpoint(ck, p)
        assert checkpoint.load_checkpoint(p).velocity is None

    def test_save_load_save_identical_bytes(self, tmp_path):
        ck = self._ckpt()
        p1, p2 = tmp_path / "c1.cntc", tmp_path / "c2.cntc"
        checkpoint.save_checkpoint(ck, p1)
        checkpoint.save_checkpoint(checkpoint.load_checkpoint(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_forward_agrees_after_reload(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "d.cntc"
        checkpoint.save_checkpoint(ck, p)
        x = np.random.default_rng(5).normal(size=(1, 1, 6, 6)).astype(np.float32)
        a = nn.forward(ck.net, x).logits
        b = nn.forward(checkpoint.load_checkpoint(p).net, x).logits
        assert np.array_equal(a, b)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.cntc"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(p)

    def test_version_mismatch_mentions_migration(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "f.cntc"
        checkpoint.save_checkpoint(ck, p)
        raw = bytearray(p.read_bytes())
        raw[4] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="migration"):
            checkpoint.load_checkpoint(p)

    def test_truncated_payload(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "g.cntc"
        checkpoint.save_checkpoint(ck, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(p)

    def test_trailing_bytes(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "h.cntc"
        checkpoint.save_checkpoint(ck, p)
        p.write_bytes(p.read_bytes() + b"\x00\x00")
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(p)

    def test_corrupt_header(self, tmp_path):
        ck = self._ckpt()
        p = tmp_path / "i.cntc"
        checkpoint.save_checkpoint(ck, p)
        raw = bytearray(p.read_bytes())
        raw[12] = 0xFF  # stomp the JSON header
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            checkpoint.load_checkpoint(p)
