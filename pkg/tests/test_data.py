import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smamba.config import ConfigError, GenSpec
from smamba.data import (
    CounterRng,
    DatasetError,
    gen_sample,
    gen_synthetic,
    load_dir,
    multiscale_augment,
    resize_pair,
    save_dataset,
    splitmix64,
)
from smamba.pnm import (
    MalformedHeaderError,
    MaxvalError,
    TruncatedPayloadError,
    UnsupportedFormatError,
    decode_pnm,
    encode_pnm,
    load_mask,
    load_ppm,
    save_mask,
    save_ppm,
)


def lag1_autocorrelation(image, mask):
    """Mean correlation of horizontally adjacent background pixels, per channel."""
    bg = (mask[:, :-1] == 0) & (mask[:, 1:] == 0)
    out = []
    for c in range(3):
        a, b = image[:, :-1, c][bg], image[:, 1:, c][bg]
        out.append(np.corrcoef(a, b)[0, 1])
    return float(np.mean(out))


class TestCounterRng:
    def test_splitmix_reference_outputs(self):
        # first two outputs of the published splitmix64 generator seeded with 0
        assert splitmix64(0) == 0xE220A8397B1DCDAF
        assert splitmix64(0x9E3779B97F4A7C15) == 0x6E789E6AA1B965F4

    def test_array_and_scalar_paths_agree(self):
        xs = [0, 1, 2**63, 2**64 - 1]
        np.testing.assert_array_equal(splitmix64(np.array(xs, dtype=np.uint64)), [splitmix64(x) for x in xs])

    def test_stream_continues(self):
        a = CounterRng(7, 1)
        first = a.uniform(size=4)
        rest = a.uniform(size=3)
        np.testing.assert_array_equal(np.concatenate([first, rest]), CounterRng(7, 1).uniform(size=7))

    def test_uniform_range(self):
        u = CounterRng(3).uniform(size=10000)
        assert u.min() >= 0.0 and u.max() < 1.0
        assert abs(u.mean() - 0.5) < 0.02


class TestGenerator:
    def test_deterministic(self):
        spec = GenSpec(n=3, size=32)
        a, b = gen_synthetic(spec, 11), gen_synthetic(spec, 11)
        for x, y in zip(a, b):
            assert x.id == y.id and x.seed == y.seed
            assert x.image.tobytes() == y.image.tobytes()
            assert x.mask.tobytes() == y.mask.tobytes()

    def test_seeds_differ(self):
        a, b = gen_sample(GenSpec(size=32), 1, 0), gen_sample(GenSpec(size=32), 2, 0)
        assert not np.array_equal(a.image, b.image)

    def test_foreground_fraction_sweep(self):
        spec = GenSpec(size=32)
        fractions = [gen_sample(spec, seed, 0).mask.mean() for seed in range(1000)]
        assert min(fractions) >= 0.02 and max(fractions) <= 0.5

    def test_pair_invariants(self):
        for pair in gen_synthetic(GenSpec(n=5, size=48, split="test-unseen"), 0):
            assert pair.image.shape == (48, 48, 3) and pair.mask.shape == (48, 48)
            assert set(np.unique(pair.mask)) <= {0.0, 1.0}
            assert pair.image.min() >= 0.0 and pair.image.max() <= 1.0
            np.testing.assert_array_equal(np.rint(pair.image * 255) / 255, pair.image)

    @pytest.mark.parametrize("kw", [dict(contrast=0.0), dict(contrast=-0.1), dict(size=16), dict(split="val")])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            GenSpec(**kw)

    def test_unseen_texture_differs(self):
        seen = [lag1_autocorrelation(p.image, p.mask) for p in gen_synthetic(GenSpec(n=20, split="test-seen"), 0)]
        unseen = [lag1_autocorrelation(p.image, p.mask) for p in gen_synthetic(GenSpec(n=20, split="test-unseen"), 0)]
        assert np.mean(seen) - np.mean(unseen) > 0.1

    def test_splits_are_keyed_apart(self):
        a = gen_sample(GenSpec(size=32, split="train"), 0, 0)
        b = gen_sample(GenSpec(size=32, split="test-seen"), 0, 0)
        assert a.seed != b.seed


class TestPnm:
    def test_mask_payload_bytes(self, tmp_path):
        save_mask(tmp_path / "m.pgm", np.array([[0, 1], [1, 0]]))
        data = (tmp_path / "m.pgm").read_bytes()
        assert data == b"P5\n2 2\n255\n\x00\xff\xff\x00"

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
    def test_round_trip(self, h, w, seed):
        rng = np.random.default_rng(seed)
        gray = rng.integers(0, 256, size=(h, w), dtype=np.uint8)
        rgb = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        np.testing.assert_array_equal(decode_pnm(encode_pnm(gray)), gray)
        np.testing.assert_array_equal(decode_pnm(encode_pnm(rgb)), rgb)

    def test_file_round_trip(self, tmp_path):
        pair = gen_sample(GenSpec(size=32), 0, 0)
        save_ppm(tmp_path / "a.ppm", pair.image)
        save_mask(tmp_path / "a.pgm", pair.mask)
        np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), pair.image)
        np.testing.assert_array_equal(load_mask(tmp_path / "a.pgm"), pair.mask)

    def test_comment_in_header(self):
        assert decode_pnm(b"P5\n# note\n1 1\n255\n\x07").tolist() == [[7]]

    @pytest.mark.parametrize(
        "buf, error, code",
        [
            (b"P4\n1 1\n\x00", UnsupportedFormatError, 14),
            (b"P5\n2 x\n255\n\x00\x00", MalformedHeaderError, 11),
            (b"JUNK", MalformedHeaderError, 11),
            (b"P5\n2 2\n255\n\x00", TruncatedPayloadError, 12),
            (b"P5\n1 1\n65535\n\x00\x00", MaxvalError, 13),
        ],
    )
    def test_errors(self, buf, error, code):
        with pytest.raises(error) as info:
            decode_pnm(buf)
        assert info.value.code == code


class TestResize:
    def test_scale_one_is_identity(self):
        pair = gen_sample(GenSpec(size=32), 0, 0)
        assert resize_pair(pair, 1.0) is pair

    def test_down_up_preserves_foreground(self):
        spec = GenSpec(size=64)
        for seed in range(100):
            pair = gen_sample(spec, seed, 0)
            back = resize_pair(resize_pair(pair, 0.75), 64 / 48)
            assert back.mask.shape == (64, 64)
            assert abs(back.mask.mean() - pair.mask.mean()) <= 0.1 * pair.mask.mean()

    def test_mask_stays_binary(self):
        pair = resize_pair(gen_sample(GenSpec(size=64), 3, 0), 1.25)
        assert pair.mask.shape == (80, 80)
        assert set(np.unique(pair.mask)) <= {0.0, 1.0}

    def test_too_small(self):
        with pytest.raises(ValueError):
            resize_pair(gen_sample(GenSpec(size=32), 0, 0), 0.75, min_size=32)

    def test_augment_scale_set(self):
        pair = gen_sample(GenSpec(size=32), 0, 0)
        rng = np.random.default_rng(0)
        sizes = {multiscale_augment(pair, rng).mask.shape[0] for _ in range(30)}
        assert sizes == {24, 32, 40}
        with pytest.raises(ValueError):
            multiscale_augment(pair, rng, scales=(0.5, 1.0))


class TestLoadDir:
    def test_empty_dir(self, tmp_path):
        with pytest.raises(DatasetError):
            load_dir(tmp_path)

    def test_ordered_pairs(self, tmp_path):
        pairs = gen_synthetic(GenSpec(n=3, size=32), 5)
        save_dataset(pairs[::-1], tmp_path)
        loaded = load_dir(tmp_path)
        assert [p.id for p in loaded] == sorted(p.id for p in pairs)
        assert [p.seed for p in loaded] == [p.seed for p in pairs]
        np.testing.assert_array_equal(loaded[1].image, pairs[1].image)

    def test_size_mismatch_names_id(self, tmp_path):
        save_ppm(tmp_path / "a.ppm", np.zeros((64, 64, 3)))
        save_mask(tmp_path / "a.pgm", np.zeros((32, 32)))
        with pytest.raises(DatasetError, match=r"ids: a \(64x64 image"):
            load_dir(tmp_path)

    def test_missing_partner(self, tmp_path):
        save_ppm(tmp_path / "lonely.ppm", np.zeros((8, 8, 3)))
        with pytest.raises(DatasetError, match="lonely"):
            load_dir(tmp_path)
