import json

import numpy as np
import pytest

from ecnet.params import Init, flatten, freeze, iter_leaves, load, manifest, num_params, save


def small_tree():
    init = Init(np.random.default_rng(0))
    return {"lin": init.linear(192, 192), "blocks": [init.conv_norm(3, 4, 3), init.layer_norm(4)]}


def test_linear_parameter_count():
    assert num_params(Init(np.random.default_rng(0)).linear(192, 192)) == 37_056
    assert num_params(Init(np.random.default_rng(0)).linear(192, 192, bias=False)) == 36_864


def test_leaf_names_use_dots_and_indices():
    names = [n for n, _ in iter_leaves(small_tree())]
    assert names == ["lin.weight", "lin.bias", "blocks.0.weight", "blocks.0.norm.weight", "blocks.0.norm.bias",
                     "blocks.1.weight", "blocks.1.bias"]
    with pytest.raises(TypeError):
        list(iter_leaves({"bad": 3}))


def test_init_is_seeded():
    a = flatten(small_tree())
    b = flatten(small_tree())
    assert all(np.array_equal(a[k], b[k]) for k in a)
    conv = Init(np.random.default_rng(1)).conv(8, 16, 3, groups=2)
    assert conv["weight"].shape == (16, 4, 3, 3)
    assert np.abs(conv["weight"]).max() <= 1 / np.sqrt(36)


def test_freeze_makes_leaves_read_only():
    tree = freeze(small_tree())
    with pytest.raises(ValueError):
        tree["lin"]["weight"][0, 0] = 1.0


def test_manifest_offsets_are_contiguous():
    entries = manifest(small_tree())
    offset = 0
    for e in entries:
        assert e["offset"] == offset
        offset += int(np.prod(e["shape"]))
    assert offset == num_params(small_tree())


def test_save_load_roundtrip(tmp_path):
    tree = small_tree()
    blob, meta = save(tree, tmp_path / "model", {"name": "tiny"})
    assert blob.suffix == ".bin" and meta.suffix == ".json"
    assert blob.stat().st_size == 4 * num_params(tree)
    doc = json.loads(meta.read_text())
    assert doc["meta"] == {"name": "tiny"} and doc["count"] == num_params(tree)
    back = load(tmp_path / "model")
    assert isinstance(back["blocks"], list)
    a, b = flatten(tree), flatten(back)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_load_detects_truncated_blob(tmp_path):
    blob, _ = save(small_tree(), tmp_path / "m")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(ValueError):
        load(tmp_path / "m")
