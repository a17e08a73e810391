import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import tiny_policy
from pail.checkpoint import (MAGIC, load_module, load_optimizer, load_tensors, optimizer_tensors, read_meta,
                             save_module, save_tensors, state_hash)


def test_round_trip_preserves_names_shapes_values_and_meta(tmp_path):
    tensors = {"w": torch.arange(6, dtype=torch.float32).view(2, 3), "b": torch.tensor([0.5, -1.0]),
               "scalar": torch.tensor(3.25)}
    save_tensors(tmp_path / "t.ckpt", tensors, {"epoch": 4, "note": "x"})
    back, meta = load_tensors(tmp_path / "t.ckpt")
    assert meta == {"epoch": 4, "note": "x"}
    assert list(back) == ["w", "b", "scalar"]
    for k, v in tensors.items():
        assert back[k].shape == v.shape and torch.equal(back[k], v)


def test_layout_is_magic_header_then_little_endian_payload(tmp_path):
    save_tensors(tmp_path / "t.ckpt", {"x": np.array([1.0, 2.0])}, {"k": 1})
    raw = (tmp_path / "t.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 + n:] == np.array([1.0, 2.0], dtype="<f4").tobytes()
    assert read_meta(tmp_path / "t.ckpt") == {"k": 1}


def test_identical_content_gives_identical_bytes(tmp_path):
    p = tiny_policy()
    save_module(tmp_path / "a.ckpt", p, {"epoch": 1})
    save_module(tmp_path / "b.ckpt", p, {"epoch": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_module_round_trip_restores_state_hash(tmp_path):
    src, dst = tiny_policy(0), tiny_policy(1)
    assert state_hash(src) != state_hash(dst)
    save_module(tmp_path / "p.ckpt", src)
    load_module(tmp_path / "p.ckpt", dst)
    assert state_hash(src) == state_hash(dst)


def test_missing_tensor_is_reported(tmp_path):
    save_tensors(tmp_path / "p.ckpt", {"embed.weight": torch.zeros(8, 5)})
    with pytest.raises(ValueError, match="missing tensors"):
        load_module(tmp_path / "p.ckpt", tiny_policy())


def test_foreign_file_is_rejected(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTATENSOR" + bytes(16))
    with pytest.raises(ValueError, match="not a tensor archive"):
        load_tensors(tmp_path / "x.ckpt")
    with pytest.raises(ValueError, match="not a tensor archive"):
        read_meta(tmp_path / "x.ckpt")


def test_optimizer_state_round_trip(tmp_path):
    p = tiny_policy()
    opt = torch.optim.Adam(p.parameters(), lr=1e-3)
    for _ in range(2):
        opt.zero_grad()
        sum(x.sum() for x in p.parameters()).backward()
        opt.step()
    save_tensors(tmp_path / "o.ckpt", optimizer_tensors(opt, "policy"))
    fresh = torch.optim.Adam(tiny_policy().parameters(), lr=1e-3)
    tensors, _ = load_tensors(tmp_path / "o.ckpt")
    load_optimizer(fresh, tensors, "policy")
    a, b = opt.state_dict()["state"], fresh.state_dict()["state"]
    assert set(a) == set(b)
    for i in a:
        for key in a[i]:
            assert torch.equal(torch.as_tensor(a[i][key], dtype=torch.float32), b[i][key].float())


@settings(max_examples=40, deadline=None)
@given(shape=st.lists(st.integers(0, 4), max_size=3), seed=st.integers(0, 1000))
def test_any_float32_tensor_round_trips(tmp_path_factory, shape, seed):
    x = torch.randn(shape, generator=torch.Generator().manual_seed(seed))
    path = tmp_path_factory.mktemp("ckpt") / "t.ckpt"
    save_tensors(path, {"x": x})
    back, _ = load_tensors(path)
    assert back["x"].shape == x.shape and torch.equal(back["x"], x)
