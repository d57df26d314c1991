import json
import math
from pathlib import Path

import numpy as np
import pytest

import pydis

ROOT = Path(__file__).resolve().parents[2]


def test_ess_edge_cases():
    assert pydis.ess(np.ones(7))["ess"] == pytest.approx(7.0)
    assert pydis.ess(np.array([0.0, 3.0, 0.0]))["ess"] == pytest.approx(1.0)


def test_truncation_bound():
    rng = np.random.default_rng(0)
    w = rng.lognormal(sigma=3.0, size=500)
    t = pydis.auto_truncate(w, 0.1)
    assert t["feasible"]
    tw = t["weights"]
    assert tw.max() / tw.sum() <= 0.1 + 1e-9
    assert np.all(tw <= w)


def test_weights_keep_relative_scale():
    mant, off = pydis.compute_weights(np.array([-1000.0, -1001.0]), np.zeros(2))
    assert off == -1000.0
    assert mant[1] == pytest.approx(math.exp(-1.0))


def test_resample_respects_zeros():
    idx = pydis.resample(np.array([0.0, 1.0, 0.0, 1.0]), 200, 5)
    assert set(idx) <= {1, 3}


def test_identity_flow_is_near_standard_normal():
    q = pydis.Flow(2, seed=3)
    x, logq = q.sample(4000, 9)
    assert x.shape == (4000, 2)
    assert np.allclose(q.log_prob(x), logq, atol=1e-9)
    assert np.abs(x.mean(axis=0)).max() < 0.1
    assert np.abs(x.std(axis=0) - 1.0).max() < 0.1


def test_sinusoid_density_support():
    d = pydis.sinusoid_log_density(np.array([[0.0, 0.0], [4.0, 0.0]]), 0.0)
    assert np.isfinite(d[0])
    assert d[1] == -math.inf


def test_bad_config_is_rejected(tmp_path):
    cfg = json.loads((ROOT / "configs/sinusoid.json").read_text())
    cfg["bogus"] = 1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(cfg))
    with pytest.raises(ValueError):
        pydis.check_config(p)


def test_generate_matches_fixture():
    theta, data = pydis.generate_data(ROOT / "configs/mg1.json")
    assert np.allclose(theta, [0.1, 4.0, 5.0])
    assert data.shape == (20, 1)
    shipped = np.loadtxt(ROOT / "fixtures/mg1/fixture.txt", comments="#")
    assert np.array_equal(data[:, 0], shipped)


def test_short_sinusoid_run(tmp_path):
    cfg = json.loads((ROOT / "configs/sinusoid.json").read_text())
    cfg["dis"].update({"n_samples": 500, "target_ess": 250, "max_iters": 3})
    cfg["pretrain"]["max_steps"] = 20
    p = tmp_path / "small.json"
    p.write_text(json.dumps(cfg))
    manifest = pydis.run(p, tmp_path / "out")
    assert manifest["iterations"] <= 3
    assert (tmp_path / "out/posterior.csv").exists()
    s = pydis.summarise(tmp_path / "out/posterior.csv")
    assert [c["name"] for c in s["coordinates"]] == ["theta_1", "theta_2"]
