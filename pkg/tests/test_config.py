import json

import pytest

from backpass import config as cfgmod


class TestLoad:
    def test_defaults(self):
        cfg = cfgmod.load()
        assert cfg.seed == 0 and cfg.threads == 1
        assert cfg.inference.steps == 2 and cfg.inference.top_m == 15
        assert cfg.sample.group == 5

    def test_overrides_and_seed_propagation(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 4, "em": {"em_iters": 3}, "inference": {"scales": [0.5, 1.0]}}))
        cfg = cfgmod.load(p, seed=9, out="x", threads=2)
        assert (cfg.seed, cfg.out, cfg.threads) == (9, "x", 2)
        assert cfg.em.em_iters == 3 and cfg.em.seed == 9
        assert cfg.dataset.seed == 9 and cfg.encoder.seed == 9
        assert cfg.inference.scales == [0.5, 1.0]

    def test_snapshot_roundtrip(self, tmp_path):
        cfg = cfgmod.load(seed=3)
        cfg.snapshot(tmp_path / "r.json")
        back = cfgmod.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert back.to_dict() == cfg.to_dict()


class TestReject:
    @pytest.mark.parametrize("raw", [
        {"bogus": 1},
        {"em": {"nope": 1}},
        {"em": {"em_iters": "3"}},
        {"sample": {"clamp_top": 1}},
        {"em": []},
        {"inference": {"steps": 0}},
        {"inference": {"scales": []}},
        {"threads": 0},
        {"seed": -1},
        {"dataset": {"occlusion_rate": 1.5}},
        {"em": {"em_iters": 0}},
    ])
    def test_invalid(self, tmp_path, raw):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(raw))
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(p)

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{not json")
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load(tmp_path / "absent.json")
