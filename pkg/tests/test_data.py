import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from matseg.data import (PhantomConfig, Sample, decode_tensor, encode_tensor, generate_phantom, generate_phantoms,
                         load_checkpoint, load_dataset, load_images, load_tensor, save_checkpoint, save_dataset,
                         save_tensor, split_dataset, stack)
from matseg.data.phantom import sector_mask
from matseg.data.pnm import read_pgm, read_ppm, to_uint8, write_pgm, write_ppm
from matseg.errors import ConfigError, FormatError, IntegrityError, ShapeError, ValidationError
from matseg.models import UNetConfig, build_matae_unet, build_vanilla_unet
from matseg.optim import AdamState


def write_pair(root, stem, image, mask):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    write_pgm(root / "images" / f"{stem}.pgm", image)
    write_pgm(root / "masks" / f"{stem}.pgm", mask)


class TestPnm:
    def test_pgm_round_trip(self, tmp_path, rng):
        px = rng.integers(0, 256, (5, 7), dtype=np.uint8)
        write_pgm(tmp_path / "a.pgm", px)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), px)
        assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n7 5\n255\n")

    def test_ppm_round_trip(self, tmp_path, rng):
        px = rng.integers(0, 256, (3, 4, 3), dtype=np.uint8)
        write_ppm(tmp_path / "a.ppm", px)
        np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), px)

    def test_header_comments_and_whitespace(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5 # made by hand\n2\t2 # dims\n255\n\x00\x01\x02\x03")
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), [[0, 1], [2, 3]])

    @pytest.mark.parametrize("data", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\n2 2\n65535\n" + b"\0" * 8,
                                      b"P5\n2", b"P5\nx 2\n255\n\0\0\0\0"])
    def test_bad_files(self, tmp_path, data):
        (tmp_path / "bad.pgm").write_bytes(data)
        with pytest.raises(FormatError):
            read_pgm(tmp_path / "bad.pgm")

    def test_to_uint8(self):
        np.testing.assert_array_equal(to_uint8(np.array([0.0, 0.5, 1.0, 1.5, -1.0])), [0, 128, 255, 255, 0])


class TestLoadDataset:
    def test_three_pairs_in_stem_order(self, tmp_path, rng):
        for stem in ("b", "c", "a"):
            write_pair(tmp_path, stem, rng.integers(0, 256, (4, 4), dtype=np.uint8), np.zeros((4, 4), np.uint8))
        samples = load_dataset(tmp_path)
        assert [s.id for s in samples] == ["a", "b", "c"]
        assert samples[0].image.shape == (1, 4, 4) and samples[0].image.dtype == np.float32

    def test_scaling_and_binarization(self, tmp_path):
        img = np.array([[0, 255], [51, 102]], np.uint8)
        mask = np.array([[200, 127], [128, 0]], np.uint8)
        write_pair(tmp_path, "x", img, mask)
        s = load_dataset(tmp_path)[0]
        np.testing.assert_allclose(s.image[0], img / 255.0, rtol=1e-7)
        np.testing.assert_array_equal(s.mask[0], [[1, 0], [1, 0]])

    def test_image_without_mask_names_stem(self, tmp_path):
        write_pair(tmp_path, "ok", np.zeros((2, 2), np.uint8), np.zeros((2, 2), np.uint8))
        write_pgm(tmp_path / "images" / "orphan.pgm", np.zeros((2, 2), np.uint8))
        with pytest.raises(FileNotFoundError, match="orphan"):
            load_dataset(tmp_path)

    def test_size_mismatch(self, tmp_path):
        write_pair(tmp_path, "x", np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8))
        with pytest.raises(FormatError, match="x"):
            load_dataset(tmp_path)

    def test_missing_layout(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_save_load_round_trip(self, tmp_path):
        samples = generate_phantoms(PhantomConfig(size=(32, 32), seed=3), 3)
        save_dataset(samples, tmp_path)
        loaded = load_dataset(tmp_path)
        for a, b in zip(samples, loaded):
            assert a.id == b.id
            np.testing.assert_array_equal(a.mask, b.mask)
            np.testing.assert_array_equal(to_uint8(a.image), to_uint8(b.image))
            assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-7

    def test_load_images(self, tmp_path):
        write_pgm(tmp_path / "f1.pgm", np.full((4, 4), 255, np.uint8))
        ((stem, img),) = load_images(tmp_path)
        assert stem == "f1" and img.shape == (1, 4, 4) and img.max() == 1.0


class TestSample:
    def test_non_binary_mask(self):
        with pytest.raises(ValidationError):
            Sample(np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5), "s")

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Sample(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)), "s")

    def test_stack(self):
        s = Sample(np.zeros((1, 2, 2), np.float32), np.ones((1, 2, 2), np.float32), "s")
        images, masks = stack([s, s])
        assert images.shape == masks.shape == (2, 1, 2, 2)


class TestPhantom:
    def test_deterministic(self):
        cfg = PhantomConfig(seed=11)
        a, b = generate_phantom(cfg, 5), generate_phantom(cfg, 5)
        assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes() and a.id == b.id

    def test_index_independent_of_order(self):
        cfg = PhantomConfig(seed=2)
        batch = generate_phantoms(cfg, 4)
        assert batch[3].image.tobytes() == generate_phantom(cfg, 3).image.tobytes()

    def test_seeds_differ(self):
        assert generate_phantom(PhantomConfig(seed=0), 0).image.tobytes() != \
            generate_phantom(PhantomConfig(seed=1), 0).image.tobytes()

    def test_area_fraction_in_range(self):
        cfg = PhantomConfig(seed=4)
        lo, hi = cfg.lv_area_fraction
        for s in generate_phantoms(cfg, 100):
            assert lo <= s.mask.mean() <= hi

    def test_mask_and_image_inside_sector(self):
        cfg = PhantomConfig(seed=5)
        outside = ~sector_mask(cfg.size, cfg.sector_angle)
        for s in generate_phantoms(cfg, 20):
            assert not s.mask[0][outside].any()
            assert not s.image[0][outside].any()

    def test_value_ranges(self):
        for s in generate_phantoms(PhantomConfig(size=(64, 48), seed=6), 200):
            assert s.image.shape == (1, 64, 48)
            assert np.isfinite(s.image).all() and s.image.min() >= 0 and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_cavity_darker_than_wall(self):
        s = generate_phantom(PhantomConfig(seed=8), 0)
        assert s.image[s.mask > 0].mean() < s.image[(s.mask == 0) & (s.image > 0)].mean()

    @pytest.mark.parametrize("bad", [dict(size=(8, 8)), dict(eccentricity=(2.0, 1.5)), dict(sector_angle=5),
                                     dict(lv_area_fraction=(0.1, 0.6)), dict(eccentricity=(0.5, 2.0))])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            generate_phantom(PhantomConfig(**bad), 0)


class TestSplit:
    def test_paper_sizes(self):
        samples = list(range(1014))
        train, test = split_dataset(samples, 1000, 14, seed=0)
        assert len(train) == 1000 and len(test) == 14 and not set(train) & set(test)

    def test_empty_test(self):
        train, test = split_dataset(list(range(5)), 5, 0)
        assert len(train) == 5 and test == []

    def test_deterministic(self):
        assert split_dataset(list(range(50)), 30, 20, seed=4) == split_dataset(list(range(50)), 30, 20, seed=4)

    def test_insufficient(self):
        with pytest.raises(ValidationError):
            split_dataset(list(range(5)), 4, 2)


class TestTensorFile:
    def test_layout(self):
        buf = encode_tensor(np.array([[1.0, 2.0]], dtype=np.float32))
        assert buf[:4] == b"MTNS"
        assert struct.unpack_from("<HBB", buf, 4) == (1, 0, 2)
        assert struct.unpack_from("<2I", buf, 8) == (1, 2)
        assert buf[16:] == struct.pack("<2f", 1.0, 2.0)

    @settings(max_examples=100, deadline=None)
    @given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=1, max_dims=4, max_side=5),
                  elements=st.floats(allow_nan=True, width=32)))
    def test_round_trip_bitwise(self, a):
        back, end = decode_tensor(encode_tensor(a))
        assert back.dtype == a.dtype and back.shape == a.shape and back.tobytes() == a.tobytes()

    def test_file_round_trip(self, tmp_path, rng):
        a = rng.standard_normal((2, 3, 4))
        save_tensor(tmp_path / "t.mtns", a)
        assert load_tensor(tmp_path / "t.mtns").tobytes() == a.tobytes()

    def test_truncated(self):
        buf = encode_tensor(np.zeros(4))
        for cut in (3, 10, len(buf) - 1):
            with pytest.raises(FormatError):
                decode_tensor(buf[:cut])

    def test_bad_magic_and_version(self):
        buf = bytearray(encode_tensor(np.zeros(2)))
        with pytest.raises(FormatError):
            decode_tensor(b"XXXX" + bytes(buf[4:]))
        buf[4] = 9
        with pytest.raises(FormatError):
            decode_tensor(bytes(buf))

    def test_unsupported_dtype(self):
        with pytest.raises(FormatError):
            encode_tensor(np.zeros(2, np.int32))


class TestCheckpoint:
    def test_round_trip_forward_bitwise(self, tmp_path, rng):
        model = build_matae_unet(UNetConfig(depth=2, base_channels=4, seed=3))
        save_checkpoint(tmp_path / "m.ckpt", model, epoch=7, seed=3)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert ck.epoch == 7 and ck.seed == 3 and ck.model.kind == "matae"
        x = rng.random((2, 1, 16, 16)).astype(np.float32)
        assert model(x).logits.value.tobytes() == ck.model(x).logits.value.tobytes()

    def test_every_parameter_once(self, tmp_path):
        model = build_vanilla_unet(UNetConfig(depth=2, base_channels=2))
        save_checkpoint(tmp_path / "m.ckpt", model)
        ck = load_checkpoint(tmp_path / "m.ckpt")
        assert int(ck.header["entries"]) == len(list(model.named_parameters()))
        assert {n for n, _ in ck.model.named_parameters()} == {n for n, _ in model.named_parameters()}

    def test_reload_then_save_same_bytes(self, tmp_path):
        model = build_vanilla_unet(UNetConfig(depth=2, base_channels=2))
        save_checkpoint(tmp_path / "a.ckpt", model, epoch=1)
        save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt").model, epoch=1)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_adam_state_round_trip(self, tmp_path, rng):
        model = build_vanilla_unet(UNetConfig(depth=1, base_channels=2))
        state = AdamState(lr=3e-4, t=5)
        for n, p in model.named_parameters():
            state.m[n] = rng.standard_normal(p.value.shape).astype(np.float32)
            state.v[n] = rng.random(p.value.shape).astype(np.float32)
        save_checkpoint(tmp_path / "m.ckpt", model, state)
        back = load_checkpoint(tmp_path / "m.ckpt").adam
        assert (back.t, back.lr, back.beta1, back.beta2, back.eps) == (5, 3e-4, 0.9, 0.999, 1e-8)
        for n in state.m:
            assert back.m[n].tobytes() == state.m[n].tobytes() and back.v[n].tobytes() == state.v[n].tobytes()

    def test_header_is_text(self, tmp_path):
        save_checkpoint(tmp_path / "m.ckpt", build_vanilla_unet(UNetConfig(depth=1, base_channels=1)))
        head = (tmp_path / "m.ckpt").read_bytes().split(b"\n\n", 1)[0].decode()
        assert head.splitlines()[0] == "format=matseg-checkpoint"
        assert "depth=1" in head and "model=vanilla" in head

    def test_truncated_leaves_model_untouched(self, tmp_path):
        src = build_vanilla_unet(UNetConfig(depth=1, base_channels=2, seed=1))
        save_checkpoint(tmp_path / "m.ckpt", src)
        data = (tmp_path / "m.ckpt").read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(data[:-10])
        target = build_vanilla_unet(UNetConfig(depth=1, base_channels=2, seed=2))
        before = [p.value.copy() for p in target.parameters()]
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.ckpt", target)
        for b, p in zip(before, target.parameters()):
            np.testing.assert_array_equal(b, p.value)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"format=other\nversion=1\n\n")
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_config_from_file_is_authoritative(self, tmp_path):
        save_checkpoint(tmp_path / "d2.ckpt", build_vanilla_unet(UNetConfig(depth=2, base_channels=4)))
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "d2.ckpt", build_vanilla_unet(UNetConfig(depth=4, base_channels=4)))
        assert load_checkpoint(tmp_path / "d2.ckpt").model.config.depth == 2

    def test_missing_parameter_listed(self, tmp_path):
        from matseg.data.checkpoint import _assign
        model = build_vanilla_unet(UNetConfig(depth=1, base_channels=1))
        tensors = {n: p.value for n, p in model.named_parameters() if n != "head.bias"}
        with pytest.raises(IntegrityError, match="head.bias"):
            _assign(model, tensors)
