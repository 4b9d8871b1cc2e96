import json
import math
import os

import numpy as np
import pytest

import illusion_defense as il

SMALL = {
    "seed": 7,
    "data": {
        "num_classes": 6,
        "height": 8,
        "width": 8,
        "embed_dim": 16,
        "train_per_class": 20,
        "eval_per_class": 3,
        "prototype_smoothing_std": 1.0,
    },
    "reconstruct": {"pca_rank": 8, "eta_trials": 4, "dm": {"steps": 10}},
    "attack": {"max_iters": 200, "loop_budget": 200, "eot_samples": 2},
    "consensus": {"num_samples": 5, "eta_check_samples": 5, "sweep_values": [1, 3]},
}


@pytest.fixture(scope="module")
def session():
    return il.Session(json.dumps(SMALL))


def test_binomial_model():
    assert abs(il.majority_attack_probability(0.1, 5) - 0.00856) <= 1e-5
    assert il.majority_attack_probability(0.5, 9) == 0.5
    with pytest.raises(ValueError):
        il.majority_attack_probability(0.5, 0)


def test_cosine():
    assert il.cosine_similarity(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(math.sqrt(0.5))


def test_default_config_round_trips():
    cfg = json.loads(il.default_config())
    assert cfg["seed"] == 7
    assert il.config_hash(json.dumps(cfg)) == il.config_hash("")


def test_config_errors_name_the_field():
    with pytest.raises(il.ConfigError, match="consensus.num_samples"):
        il.config_hash(json.dumps({"consensus": {"num_samples": 0}}))


def test_dataset_is_deterministic():
    a = il.generate_dataset(json.dumps(SMALL))
    b = il.generate_dataset(json.dumps(SMALL))
    assert a["content_hash"] == b["content_hash"]
    assert a["train_pixels"].shape == (120, 64)
    assert a["eval_pixels"].shape == (18, 64)
    assert a["label_embeddings"].shape == (6, 16)
    assert np.all((a["train_pixels"] >= 0) & (a["train_pixels"] <= 1))
    np.testing.assert_allclose(np.linalg.norm(a["label_embeddings"], axis=1), 1.0, atol=1e-12)


def test_attack_and_defence(session):
    data = session.dataset()
    x = data["eval_pixels"][0]
    label = data["eval_labels"][0]
    assert int(np.argmax(session.scores(x))) == label
    target = (label + 1) % 6
    r = session.attack(x, target)
    assert np.max(np.abs(r["perturbed"] - x)) <= 0.1 + 1e-12
    assert r["loops_used"] == len(r["cos_trajectory"])
    c = session.consensus(r["perturbed"], sample_id=0)
    assert len(c["votes"]) == 5
    assert sum(c["vote_counts"]) == 5
    assert c["winner"] in c["votes"]


def test_sanitizers(session):
    x = session.dataset()["eval_pixels"][1]
    ae = session.sanitize(x, "ae")
    assert np.all((ae >= 0) & (ae <= 1))
    np.testing.assert_array_equal(session.sanitize(x, "vae", 3), session.sanitize(x, "vae", 3))
    assert session.sanitize(x, "dm", 1).shape == (64,)
    with pytest.raises(ValueError):
        session.sanitize(x, "gan")
    with pytest.raises(ValueError):
        session.sanitize(np.zeros(3), "ae")


def test_grid_shape(session):
    rows = session.grid()
    assert len(rows) == 6 * 4 * 2
    none = [r for r in rows if r["method"] == "none" and r["input_kind"] == "org_img" and r["label_kind"] == "original"]
    assert len(none) == 1 and none[0]["n"] == 18


def test_run_experiment_writes_report(tmp_path):
    cfg = dict(SMALL, experiment="grid", out_dir=str(tmp_path))
    out = il.run_experiment(json.dumps(cfg))
    assert out == str(tmp_path)
    for name in ("grid.csv", "calibration.csv", "summary.json", "config_echo.json", "timing.json"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "grid.csv")) as f:
        assert f.readline().startswith("method,input_kind,label_kind,top1,top5")
