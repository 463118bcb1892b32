import struct

import numpy as np
import pytest

from sbmce.channel import (
    ChannelDataset,
    ScenarioConfig,
    generate_channel,
    generate_channels,
    load_dataset,
    make_splits,
    normalize,
    save_dataset,
    steering_vector,
)
from sbmce.errors import FormatError, ParameterError
from sbmce.numerics import beamspace, make_rng


@pytest.fixture(scope="module")
def small_splits():
    cfg = ScenarioConfig(n_rx=8, n_tx=2, seed=3)
    return make_splits(cfg, 400, 50, 300, make_rng(11))


class TestGenerateChannel:
    def test_shape(self):
        H = generate_channel(ScenarioConfig(n_rx=8, n_tx=3), make_rng(0))
        assert H.shape == (8, 3)
        assert np.all(np.isfinite(H))

    def test_single_path_is_rank_one(self):
        cfg = ScenarioConfig(n_rx=16, n_tx=4, n_paths=1)
        rng = make_rng(1)
        for _ in range(20):
            s = np.linalg.svd(generate_channel(cfg, rng), compute_uv=False)
            assert s[0] ** 2 / np.sum(s**2) >= 1 - 1e-10

    def test_steering_entries_unit_modulus(self):
        a = steering_vector(16, np.deg2rad(np.linspace(-90, 90, 31)))
        np.testing.assert_allclose(np.abs(a), 1.0, atol=1e-14)

    def test_half_wavelength_phase_progression(self):
        theta = np.deg2rad(30.0)
        a = steering_vector(4, theta)
        np.testing.assert_allclose(a, np.exp(1j * np.pi * 0.5 * np.arange(4)), atol=1e-14)

    def test_deterministic(self):
        cfg = ScenarioConfig()
        a = generate_channel(cfg, make_rng(5))
        b = generate_channel(cfg, make_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_energy_varies_between_samples(self):
        h = generate_channels(ScenarioConfig(), 200, make_rng(6))
        energy = np.sum(np.abs(h) ** 2, axis=1)
        assert np.var(energy) > 0

    @pytest.mark.parametrize("n_paths", [1, 3, 5])
    def test_beamspace_energy_compression(self, n_paths):
        cfg = ScenarioConfig(n_rx=16, n_tx=4, n_paths=n_paths)
        h = generate_channels(cfg, 500, make_rng(7))
        B = np.abs(beamspace(h, 16, 4)) ** 2
        top = int(np.ceil(0.1 * B.shape[1]))
        frac = np.sort(B, axis=1)[:, ::-1][:, :top].sum(axis=1) / B.sum(axis=1)
        assert np.mean(frac) >= 0.6

    @pytest.mark.parametrize(
        "kw",
        [
            {"n_rx": 0},
            {"n_paths": 0},
            {"sector_halfangle": 0.0},
            {"sector_halfangle": 91.0},
            {"rician_k_db_range": (5.0, 1.0)},
        ],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ParameterError):
            ScenarioConfig(**kw)


class TestNormalize:
    def test_identical_unit_norm_samples(self):
        h = np.zeros((10, 8), dtype=complex)
        h[:, 0] = 1.0
        ds = normalize(ChannelDataset(h, 4, 2))
        np.testing.assert_allclose(np.sum(np.abs(ds.samples) ** 2, axis=1), 8.0)

    def test_mean_energy(self, small_splits):
        train, _, _ = small_splits
        assert train.mean_energy() == pytest.approx(16.0, rel=1e-6)

    def test_train_factor_carries_over_to_test(self, small_splits):
        train, _, test = small_splits
        assert test.scale == train.scale
        # per-sample energy has a coefficient of variation well below 0.5,
        # so 300 samples put the mean within ~10%
        assert test.mean_energy() == pytest.approx(16.0, rel=0.1)

    def test_empty(self):
        with pytest.raises(ParameterError):
            normalize(ChannelDataset(np.zeros((0, 4)), 2, 2))

    def test_zero_energy(self):
        with pytest.raises(ParameterError):
            normalize(ChannelDataset(np.zeros((3, 4)), 2, 2))


class TestSplits:
    def test_sizes(self):
        tr, va, te = make_splits(ScenarioConfig(n_rx=4, n_tx=2), 100, 10, 10, make_rng(0))
        assert (len(tr), len(va), len(te)) == (100, 10, 10)
        assert (tr.split, va.split, te.split) == ("train", "val", "test")

    def test_disjoint_streams(self):
        tr, va, te = make_splits(ScenarioConfig(n_rx=4, n_tx=2), 20, 20, 20, make_rng(0))
        assert not np.allclose(tr.samples, va.samples)
        assert not np.allclose(tr.samples, te.samples)
        assert not np.allclose(va.samples, te.samples)

    def test_invalid_counts(self):
        with pytest.raises(ParameterError):
            make_splits(ScenarioConfig(), 0, 1, 1, make_rng(0))


class TestPersistence:
    def test_roundtrip_bitwise(self, tmp_path, small_splits):
        train = small_splits[0].to_beamspace()
        save_dataset(train, tmp_path / "d.bin")
        back = load_dataset(tmp_path / "d.bin")
        assert back.samples.tobytes() == train.samples.tobytes()
        assert (back.n_rx, back.n_tx, back.domain_tag) == (8, 2, "beamspace")

    def test_header_layout(self, tmp_path, small_splits):
        ds = small_splits[2]
        path = tmp_path / "d.bin"
        save_dataset(ds, path)
        raw = path.read_bytes()
        assert raw[:6] == b"SBMCH1"
        version, n_rx, n_tx, m, tag = struct.unpack("<HIIQB", raw[6:25])
        assert (version, n_rx, n_tx, m, tag) == (1, 8, 2, len(ds), 0)
        assert len(raw) == 25 + 16 * m * n_rx * n_tx
        # first sample, first entry: interleaved little-endian re, im
        re, im = struct.unpack("<dd", raw[25:41])
        assert complex(re, im) == ds.samples[0, 0]
        # column-major: second stored value is H[1, 0]
        re, im = struct.unpack("<dd", raw[41:57])
        assert complex(re, im) == ds.samples[0, 1]

    def test_truncated(self, tmp_path, small_splits):
        path = tmp_path / "d.bin"
        save_dataset(small_splits[1], path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated"):
            load_dataset(path)

    def test_version_bump_rejected(self, tmp_path, small_splits):
        path = tmp_path / "d.bin"
        save_dataset(small_splits[1], path)
        raw = bytearray(path.read_bytes())
        raw[6:8] = struct.pack("<H", 2)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version 2"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "d.bin"
        path.write_bytes(b"NOTSBM" + bytes(30))
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_dimension_corruption(self, tmp_path, small_splits):
        path = tmp_path / "d.bin"
        save_dataset(small_splits[1], path)
        raw = bytearray(path.read_bytes())
        raw[8:12] = struct.pack("<I", 9)  # n_rx 8 -> 9: payload no longer matches
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load_dataset(path)
