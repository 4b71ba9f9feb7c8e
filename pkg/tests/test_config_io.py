import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from refgs import jsonio
from refgs.config import ConfigError, RunConfig, config_from_dict, load_config
from refgs.imageio import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm

# -- config ---------------------------------------------------------------------------------


def test_empty_config_is_all_defaults():
    cfg = config_from_dict({})
    assert cfg.to_dict() == RunConfig().to_dict()
    assert cfg.train.hyper.iterations == 5000 and cfg.train.d_r == 16 and cfg.eps == 0.3


def test_partial_config_keeps_other_defaults(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 3, "train": {"hyper": {"lam": 0.5}}}))
    cfg = load_config(tmp_path / "c.json")
    assert cfg.seed == 3 and cfg.train.hyper.lam == 0.5
    assert cfg.train.hyper.eps == 0.3 and cfg.dataset.scene.n_objects == 8


def test_round_trip_through_to_dict():
    cfg = config_from_dict({"selector": "top1", "dataset": {"cameras": {"elevation": [20, 30]}}})
    again = config_from_dict(json.loads(jsonio.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    assert again.dataset.cameras.elevation == (20.0, 30.0)


@pytest.mark.parametrize("data, path", [
    ({"bogus": 1}, "bogus"),
    ({"train": {"hyper": {"lr": 1}}}, "train.hyper.lr"),
    ({"train": {"d_r": 0}}, "train.d_r"),
    ({"train": {"hyper": {"eps": 1.0}}}, "train.hyper.eps"),
    ({"selector": "best"}, "selector"),
    ({"train": {"similarity": "dot"}}, "train.similarity"),
    ({"seed": "one"}, "seed"),
    ({"train": {"pcmi": 1}}, "train.pcmi"),
    ({"dataset": {"cameras": {"elevation": [1, 2, 3]}}}, "dataset.cameras.elevation"),
    ({"dataset": []}, "dataset"),
    ({"eval": {"grid": "full"}}, "eval.grid"),
])
def test_bad_fields_name_their_path(data, path):
    with pytest.raises(ConfigError, match=path.replace(".", r"\.")):
        config_from_dict(data)


def test_non_object_config_is_an_error():
    with pytest.raises(ConfigError):
        config_from_dict([1, 2])


def test_hashes_track_the_relevant_fields():
    a = config_from_dict({})
    b = config_from_dict({"train": {"hyper": {"lam": 0.1}}})
    c = config_from_dict({"seed": 1})
    assert a.dataset_hash() == b.dataset_hash() != c.dataset_hash()
    assert a.train.config_hash() != b.train.config_hash()
    h = a.dataset_hash()
    assert a.pseudo_hash(h) != config_from_dict({"selector": "top1"}).pseudo_hash(h)


# -- json -----------------------------------------------------------------------------------


def test_json_float_encoding():
    assert jsonio.dumps([1.0, -0.0, 0.1, 1e-300, 3]) == "[1.0,-0.0,0.10000000000000001,1e-300,3]"
    back = json.loads(jsonio.dumps([1.0, -0.0]))
    assert isinstance(back[0], float) and math.copysign(1, back[1]) == -1
    with pytest.raises(ValueError):
        jsonio.dumps(float("nan"))
    with pytest.raises(TypeError):
        jsonio.dumps({1, 2})


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=20))
def test_json_floats_round_trip_exactly(xs):
    back = json.loads(jsonio.dumps(xs))
    assert [x.hex() for x in back] == [float(x).hex() for x in xs]


def test_json_numpy_values():
    assert jsonio.dumps({"a": np.arange(3), "b": np.float32(0.5), "c": np.bool_(True)}) == '{"a":[0,1,2],"b":0.5,"c":true}'


def test_content_hash_ignores_key_order():
    assert jsonio.content_hash({"a": 1, "b": [2.0]}) == jsonio.content_hash({"b": [2.0], "a": 1})
    assert jsonio.content_hash({"a": 1}) != jsonio.content_hash({"a": 2})


# -- images ---------------------------------------------------------------------------------


def test_pgm_round_trip_with_comment(tmp_path):
    m = np.random.default_rng(0).random((5, 7)) > 0.5
    write_pgm(tmp_path / "m.pgm", m, comment="config_hash=abc\nview=3")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n# config_hash=abc\n# view=3\n7 5\n255\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "m.pgm"), m * 255)


def test_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(1).random((4, 3, 3))
    write_ppm(tmp_path / "c.ppm", rgb)
    np.testing.assert_array_equal(read_ppm(tmp_path / "c.ppm"), np.round(rgb * 255).astype(np.uint8))
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "c.ppm")


def test_pfm_round_trip_is_float32_exact(tmp_path):
    v = np.random.default_rng(2).normal(size=(6, 4))
    write_pfm(tmp_path / "r.pfm", v)
    np.testing.assert_array_equal(read_pfm(tmp_path / "r.pfm"), v.astype(np.float32).astype(np.float64))
    assert (tmp_path / "r.pfm").read_bytes().startswith(b"Pf\n4 6\n-1.0\n")


def test_gzip_json_is_byte_stable(tmp_path):
    obj = {"x": [0.5, 1.25], "n": 3}
    jsonio.dump(obj, tmp_path / "a.json.gz")
    jsonio.dump(obj, tmp_path / "b.json.gz")
    assert (tmp_path / "a.json.gz").read_bytes() == (tmp_path / "b.json.gz").read_bytes()
    assert jsonio.load(tmp_path / "a.json.gz") == obj
