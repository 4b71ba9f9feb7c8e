import copy

import numpy as np
import pytest

from helpers import tiny_dataset
from refgs import jsonio
from refgs.numkit import NumericalError
from refgs.referfield import TrainHyper
from refgs.trainer import (
    TrainConfig,
    TrainContext,
    checkpoint_dict,
    init,
    load_checkpoint,
    load_trace,
    predict,
    save_checkpoint,
    save_trace,
    train,
    train_step,
    train_two_stage,
)


def _cfg(iterations=20, **kw):
    return TrainConfig(hyper=TrainHyper(iterations=iterations), **kw)


def test_init_shapes_and_scales():
    ds = tiny_dataset()
    st = init(ds.cloud, _cfg())
    assert st.referring.shape == (len(ds.cloud), 16)
    assert abs(st.referring.std() - 0.01) < 0.002
    assert abs(st.referring.mean()) < 0.002
    layer = st.model.refer_proj
    assert layer.weight.shape == (128, 16)
    assert np.abs(layer.weight).max() <= np.sqrt(6 / (16 + 128))
    assert not layer.bias.any()
    assert st.iteration == 0 and st.geometry_hash == ds.cloud.geometry_hash()


def test_init_is_seeded():
    ds = tiny_dataset()
    a, b = init(ds.cloud, _cfg(seed=4)), init(ds.cloud, _cfg(seed=4))
    assert jsonio.dumps(checkpoint_dict(a)) == jsonio.dumps(checkpoint_dict(b))
    assert not np.array_equal(a.referring, init(ds.cloud, _cfg(seed=5)).referring)


def test_learning_rates_per_group():
    st = init(tiny_dataset().cloud, _cfg())
    lrs = st.learning_rates()
    assert lrs.pop("referring") == 0.0025
    assert set(lrs.values()) == {1e-4}


def test_zero_iterations_equals_init():
    ds = tiny_dataset()
    st = train(ds, _cfg(0, seed=2))
    assert jsonio.dumps(checkpoint_dict(st)) == jsonio.dumps(checkpoint_dict(init(ds.cloud, _cfg(0, seed=2))))
    assert st.trace == []


def test_training_is_deterministic_and_freezes_geometry():
    ds = tiny_dataset()
    before = ds.cloud.geometry_hash()
    a, b = train(ds, _cfg(15)), train(ds, _cfg(15))
    assert jsonio.dumps(checkpoint_dict(a)) == jsonio.dumps(checkpoint_dict(b))
    assert a.trace == b.trace
    assert ds.cloud.geometry_hash() == before
    c = train(ds, _cfg(15, seed=1))
    assert not np.array_equal(a.referring, c.referring)


def test_trace_rows():
    st = train(tiny_dataset(), _cfg(12))
    assert [r["iter"] for r in st.trace] == list(range(12))
    assert st.iteration == 12
    for r in st.trace:
        assert r["total"] == pytest.approx(r["bce"] + 0.02 * r["con"], rel=1e-12)
    np.testing.assert_allclose(st.trace[0]["tau"], 0.1)


def test_training_reduces_the_mask_loss():
    st = train(tiny_dataset(), _cfg(400))
    bce = [r["bce"] for r in st.trace]
    assert np.mean(bce[-100:]) < 0.8 * np.mean(bce[:50])


def test_ablated_objective_terms():
    ds = tiny_dataset()
    st = train(ds, _cfg(5, gtcl=False))
    assert all(r["con"] == 0.0 and r["total"] == r["bce"] for r in st.trace)
    assert _cfg(pcmi=False, gtcl=False).label == "baseline"
    assert _cfg(gtcl=False).label == "+pcmi"
    assert _cfg(pcmi=False).label == "+gtcl"


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(-1)
    with pytest.raises(ValueError):
        _cfg(similarity="dot")
    with pytest.raises(ValueError):
        _cfg(stage=3)


def test_mismatched_target_shape_is_an_error():
    ds = tiny_dataset()
    ctx = TrainContext(ds)
    with pytest.raises(ValueError, match="shape"):
        train_step(init(ds.cloud, _cfg()), ctx, ds.train_views[0], 0, np.zeros((3, 3), bool))


def test_non_finite_loss_names_the_sample():
    ds = tiny_dataset()
    ctx = TrainContext(ds)
    st = init(ds.cloud, _cfg())
    st.referring[:] = np.nan
    (v, e) = ds.training_pairs()[0]
    with pytest.raises(NumericalError, match=f"view={v} expr={e}"):
        train_step(st, ctx, v, e, ds.pseudo[(v, e)])


def test_dataset_without_pseudo_masks_is_an_error():
    ds = copy.copy(tiny_dataset())
    ds.pseudo = {}
    with pytest.raises(ValueError, match="pseudo"):
        train(ds, _cfg(1))


def test_checkpoint_round_trip(tmp_path):
    ds = tiny_dataset()
    st = train(ds, _cfg(10))
    st.meta = {"data_hash": "abc"}
    save_checkpoint(st, tmp_path / "ck.json")
    back = load_checkpoint(tmp_path / "ck.json")
    assert back.meta == {"data_hash": "abc"} and back.iteration == 10
    ctx = TrainContext(ds)
    v, e = ds.novel_views[0], ds.expression_ids("test")[0]
    assert np.array_equal(predict(st, ctx, v, e), predict(back, ctx, v, e))
    save_checkpoint(back, tmp_path / "again.json")
    assert (tmp_path / "ck.json").read_bytes() == (tmp_path / "again.json").read_bytes()
    save_trace(st, tmp_path / "t.jsonl")
    assert load_trace(tmp_path / "t.jsonl") == st.trace


def test_tampered_checkpoint_is_rejected(tmp_path):
    st = init(tiny_dataset().cloud, _cfg())
    d = checkpoint_dict(st)
    d["config"]["d_r"] = 4
    jsonio.dump(d, tmp_path / "bad.json")
    with pytest.raises(ValueError, match="hash"):
        load_checkpoint(tmp_path / "bad.json")
    d = checkpoint_dict(st)
    d["version"] = 99
    jsonio.dump(d, tmp_path / "old.json")
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(tmp_path / "old.json")


def test_two_stage_trains_second_stage_on_first_stage_masks(tmp_path):
    ds = tiny_dataset()
    s2, refined, s1 = train_two_stage(ds, _cfg(8), out_dir=tmp_path)
    assert s1.config.stage == 1 and s2.config.stage == 2
    assert sorted(refined) == ds.training_pairs()
    ctx = TrainContext(ds)
    for (v, e), m in refined.items():
        assert np.array_equal(m, predict(s1, ctx, v, e))
    assert len(list((tmp_path / "refined").glob("*.pgm"))) == len(refined)
    # a fresh initialisation, not a continuation of stage 1
    assert s2.iteration == 8
    assert tiny_dataset().pseudo is ds.pseudo
