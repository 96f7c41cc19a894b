import hashlib

import pytest

from pcbdet.config import (DEFAULT_VAL_FRACTION, RunConfig, component_seed)


class TestComponentSeed:
    def test_matches_hash_construction(self):
        digest = hashlib.sha256(b"7:anchors").digest()
        want = int.from_bytes(digest[:8], "little")
        assert component_seed(7, "anchors") == want

    def test_deterministic(self):
        assert component_seed(0, "split") == component_seed(0, "split")

    def test_distinct_per_component(self):
        names = ["split", "anchors", "init", "gan", "shuffle"]
        seeds = {component_seed(42, n) for n in names}
        assert len(seeds) == len(names)

    def test_distinct_per_master(self):
        assert component_seed(1, "split") != component_seed(2, "split")

    def test_fits_numpy_seed_range(self):
        assert 0 <= component_seed(123, "x") < 2 ** 64


class TestRunConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=9, epochs=12, synth_boards=50,
                        augmentations=[[["rotate90", 1]]])
        again = RunConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            RunConfig.from_json('{"seed": 1, "warp_factor": 9}')

    def test_hash_stable(self):
        assert RunConfig(seed=5).config_hash() == RunConfig(seed=5).config_hash()

    def test_hash_sensitive_to_fields(self):
        assert RunConfig(seed=5).config_hash() != RunConfig(seed=6).config_hash()
        assert RunConfig(lr=0.001).config_hash() != \
            RunConfig(lr=0.002).config_hash()

    def test_stamp_contents(self):
        cfg = RunConfig(seed=3)
        stamp = cfg.stamp()
        assert stamp == {"config_hash": cfg.config_hash(), "seed": 3}

    def test_load(self, tmp_path):
        cfg = RunConfig(seed=11)
        p = tmp_path / "config.json"
        p.write_text(cfg.to_json())
        assert RunConfig.load(p) == cfg

    def test_reference_val_fraction(self):
        assert DEFAULT_VAL_FRACTION == pytest.approx(66 / 1386)
