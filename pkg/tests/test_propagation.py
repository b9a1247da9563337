import json

import numpy as np
import pytest

from iseg.errors import DimMismatch, EmptyMemory, IsegError, MissingWeights
from iseg.masks import save_gray
from iseg.propagation import ENCODER_STAGE2, MemoryBank, PropagationConfig, \
    _affinity_weights, downsample_mask, evaluate_volume, extract_key, \
    load_volume, propagate_volume, readout, save_volume_masks
from iseg.synthetic import gen_synthetic, gen_synthetic_volume, spread_seeds


def aligned_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Quantize a mask onto the key grid so it survives the value round trip."""
    h, w = mask.shape
    grid = mask.reshape(h // patch, patch, w // patch, patch).mean((1, 3)) >= 0.5
    return np.repeat(np.repeat(grid, patch, 0), patch, 1).astype(np.uint8)


def identical_volume(depth=12, size=32, seed=3):
    s = gen_synthetic(seed, size, size)
    vol = np.repeat(s.image[None], depth, axis=0)
    return vol, aligned_mask(s.gt, 2)


class TestExtractKey:
    def test_deterministic(self, rng):
        s = rng.random((32, 32))
        cfg = PropagationConfig()
        a = extract_key(s, cfg)
        b = extract_key(s.copy(), cfg)
        assert a.tobytes() == b.tobytes()

    def test_constant_slice_equal_descriptors(self):
        cfg = PropagationConfig()
        key = extract_key(np.full((16, 16), 0.4), cfg)
        np.testing.assert_allclose(
            key, np.broadcast_to(key[0, 0], key.shape), atol=1e-12)

    def test_unit_norm_everywhere(self, rng):
        cfg = PropagationConfig()
        key = extract_key(rng.random((32, 32)), cfg)
        norms = np.linalg.norm(key, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_encoder_source_needs_weights(self, rng):
        cfg = PropagationConfig(feature_source=ENCODER_STAGE2)
        with pytest.raises(MissingWeights):
            extract_key(rng.random((16, 16)), cfg)

    def test_encoder_source_unit_norm(self, rng, tiny_config, tiny_weights):
        cfg = PropagationConfig(feature_source=ENCODER_STAGE2)
        key = extract_key(rng.random((16, 16)), cfg, tiny_weights, tiny_config)
        assert key.shape == (4, 4, 8)
        np.testing.assert_allclose(np.linalg.norm(key, axis=-1), 1.0,
                                   atol=1e-12)


class TestMemoryBank:
    def test_capacity_fifo_with_pinned_seed(self, rng):
        bank = MemoryBank(3)
        keys = [rng.random((2, 2, 4)) for _ in range(5)]
        bank.add(keys[0], np.zeros((2, 2)), pinned=True)
        for k in keys[1:]:
            bank.add(k, np.ones((2, 2)))
        assert len(bank) == 3
        assert bank.entries[0][0] is keys[0]      # pinned survives
        assert bank.entries[1][0] is keys[3]      # oldest unpinned evicted
        assert bank.entries[2][0] is keys[4]

    def test_dim_mismatch(self, rng):
        bank = MemoryBank(2)
        with pytest.raises(DimMismatch):
            bank.add(rng.random((2, 2, 4)), np.zeros((3, 3)))


class TestReadout:
    def test_identical_key_returns_value_exactly(self, rng):
        # unique descriptors + top_k=1: the zero-distance self-match wins
        key = extract_key(rng.random((16, 16)), PropagationConfig())
        value = rng.random((8, 8))
        bank = MemoryBank(4)
        bank.add(key, value)
        out = readout(key, bank, top_k=1)
        assert out.tobytes() == value.tobytes()

    def test_all_ones_memory(self, rng):
        bank = MemoryBank(4)
        for _ in range(3):
            bank.add(extract_key(rng.random((16, 16)), PropagationConfig()),
                     np.ones((8, 8)))
        q = extract_key(rng.random((16, 16)), PropagationConfig())
        np.testing.assert_allclose(readout(q, bank, top_k=8), 1.0, atol=1e-12)

    def test_separated_keys_top1_excludes_second(self):
        # two orthogonal one-hot key populations; query equals the first
        k1 = np.zeros((2, 2, 4))
        k1[..., 0] = 1.0
        k2 = np.zeros((2, 2, 4))
        k2[..., 1] = 1.0
        bank = MemoryBank(4)
        bank.add(k1, np.full((2, 2), 0.25))
        bank.add(k2, np.full((2, 2), 0.75))
        out = readout(k1, bank, top_k=1)
        np.testing.assert_allclose(out, 0.25, atol=1e-6)

    def test_empty_memory(self, rng):
        with pytest.raises(EmptyMemory):
            readout(rng.random((2, 2, 4)), MemoryBank(2), 4)

    def test_convex_combination_bounds(self, rng):
        bank = MemoryBank(4)
        vals = []
        for _ in range(3):
            v = rng.random((8, 8))
            vals.append(v)
            bank.add(extract_key(rng.random((16, 16)), PropagationConfig()), v)
        out = readout(extract_key(rng.random((16, 16)), PropagationConfig()),
                      bank, top_k=5)
        assert out.min() >= min(v.min() for v in vals) - 1e-12
        assert out.max() <= max(v.max() for v in vals) + 1e-12

    def test_affinity_weights_sum_to_one(self, rng):
        q = rng.normal(size=(10, 5))
        k = rng.normal(size=(40, 5))
        _, w = _affinity_weights(q, k, top_k=7)
        assert w.shape == (10, 7)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


class TestPropagateVolume:
    def test_identical_slices_reproduce_seed_exactly(self):
        vol, seed_mask = identical_volume()
        cfg = PropagationConfig(top_k=1, seed_slices=[(6, seed_mask)])
        masks, provenance = propagate_volume(vol, cfg)
        for d in range(vol.shape[0]):
            assert (masks[d] == seed_mask).all(), d
        assert set(provenance.values()) == {6}

    def test_all_slices_seeded_verbatim(self, rng):
        vol, gt = gen_synthetic_volume(1, 8, 32, 32)
        cfg = PropagationConfig(seed_slices=[(i, gt[i]) for i in range(8)])
        masks, provenance = propagate_volume(vol, cfg)
        assert masks.tobytes() == gt.tobytes()
        assert provenance == {i: i for i in range(8)}

    def test_reversal_symmetry(self):
        # tie-free seeds: reversing the stack and mirroring seed indices
        # must reverse the outputs
        vol, gt = gen_synthetic_volume(7, 16, 32, 32)
        seeds = [4, 11]
        cfg = PropagationConfig(seed_slices=[(i, gt[i]) for i in seeds])
        masks, _ = propagate_volume(vol, cfg)

        rvol = vol[::-1].copy()
        rseeds = [(15 - i, gt[i]) for i in seeds]
        rcfg = PropagationConfig(seed_slices=rseeds)
        rmasks, _ = propagate_volume(rvol, rcfg)
        assert rmasks[::-1].tobytes() == masks.tobytes()

    def test_provenance_nearest_seed_tie_to_lower(self, rng):
        vol, gt = gen_synthetic_volume(2, 9, 32, 32)
        cfg = PropagationConfig(seed_slices=[(2, gt[2]), (6, gt[6])])
        _, prov = propagate_volume(vol, cfg)
        assert prov[0] == prov[1] == prov[3] == 2
        assert prov[4] == 2          # equidistant: lower seed index wins
        assert prov[5] == prov[7] == prov[8] == 6

    def test_needs_seeds_and_valid_indices(self, rng):
        vol, gt = gen_synthetic_volume(3, 4, 32, 32)
        with pytest.raises(IsegError):
            propagate_volume(vol, PropagationConfig())
        with pytest.raises(IsegError):
            propagate_volume(vol, PropagationConfig(
                seed_slices=[(9, gt[0])]))

    def test_quality_improves_with_seed_count(self):
        better = 0
        for seed in range(5):
            vol, gt = gen_synthetic_volume(seed, 32, 32, 32)
            scores = []
            for n in (1, 5):
                nested = {1: [16], 5: [4, 11, 16, 21, 28]}[n]
                cfg = PropagationConfig(
                    seed_slices=[(i, gt[i]) for i in nested])
                masks, _ = propagate_volume(vol, cfg)
                for i in nested:  # seed slices come back verbatim
                    assert masks[i].tobytes() == gt[i].tobytes()
                scores.append(evaluate_volume(masks, gt).dsc)
            if scores[1] >= scores[0]:
                better += 1
            assert scores[1] > 0.6
        assert better >= 4


class TestEvaluateVolume:
    def test_identity(self, rng):
        _, gt = gen_synthetic_volume(4, 6, 32, 32)
        m = evaluate_volume(gt, gt)
        assert (m.dsc, m.sen, m.ppv, m.iou) == (1.0, 1.0, 1.0, 1.0)

    def test_empty_prediction(self):
        _, gt = gen_synthetic_volume(5, 4, 32, 32)
        m = evaluate_volume(np.zeros_like(gt), gt)
        assert m.dsc == 0.0 and m.sen == 0.0

    def test_dim_mismatch(self):
        with pytest.raises(DimMismatch):
            evaluate_volume(np.zeros((2, 4, 4)), np.zeros((3, 4, 4)))


class TestVolumeIO:
    def test_png_dir_round_trip(self, tmp_path, rng):
        vol = rng.random((5, 16, 16))
        d = tmp_path / "vol"
        d.mkdir()
        for i in range(5):
            save_gray(d / f"{i:03d}.png", vol[i])
        loaded = load_volume(d)
        assert loaded.shape == (5, 16, 16)
        assert np.abs(loaded - vol).max() <= 0.5 / 255 + 1e-9

    def test_raw_blob_with_sidecar(self, tmp_path, rng):
        raw = rng.integers(0, 256, size=(4, 8, 6), dtype=np.uint8)
        blob = tmp_path / "vol.raw"
        blob.write_bytes(raw.tobytes())
        (tmp_path / "vol.json").write_text(
            json.dumps({"depth": 4, "height": 8, "width": 6}))
        loaded = load_volume(blob)
        np.testing.assert_allclose(loaded, raw / 255.0)

    def test_raw_blob_size_mismatch(self, tmp_path):
        blob = tmp_path / "vol.raw"
        blob.write_bytes(b"\x00" * 10)
        (tmp_path / "vol.json").write_text(
            json.dumps({"depth": 2, "height": 4, "width": 4}))
        with pytest.raises(DimMismatch):
            load_volume(blob)

    def test_missing_sidecar(self, tmp_path):
        blob = tmp_path / "vol.raw"
        blob.write_bytes(b"\x00" * 8)
        with pytest.raises(IsegError):
            load_volume(blob)

    def test_save_masks_and_provenance(self, tmp_path):
        masks = np.zeros((3, 8, 8), dtype=np.uint8)
        masks[1, 2:5, 2:5] = 1
        save_volume_masks(tmp_path / "out", masks, {0: 1, 1: 1, 2: 1})
        files = sorted((tmp_path / "out").glob("*.png"))
        assert [f.name for f in files] == ["000.png", "001.png", "002.png"]
        prov = json.loads((tmp_path / "out" / "provenance.json").read_text())
        assert prov == {"0": 1, "1": 1, "2": 1}


def test_downsample_mask_block_mean():
    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[0:2, 0:2] = 1
    mask[2, 2] = 1
    got = downsample_mask(mask, 2, 2)
    np.testing.assert_allclose(got, [[1.0, 0.0], [0.0, 0.25]])


def test_spread_seeds():
    assert spread_seeds(32, 1) == [16]
    assert spread_seeds(32, 3) == [8, 16, 24]
    assert spread_seeds(32, 5) == [5, 10, 16, 21, 26]
