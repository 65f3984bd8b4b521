import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcut.checkpoint import decode, encode, load_checkpoint, read_checkpoint, save_checkpoint
from convcut.errors import LoadError
from convcut.model import build_model, profile_config
from convcut.nn import Module
from convcut.rng import make_rng


def tiny(seed=0, **kw):
    return build_model(profile_config("tiny", num_classes=3, **kw), make_rng(seed))


def test_empty_model_is_header_only(tmp_path):
    path = tmp_path / "empty.ccut"
    save_checkpoint(Module(), path)
    assert path.read_bytes() == b"CCUT" + struct.pack("<II", 1, 0)


def test_exact_layout():
    buf = encode({"b": np.array([1.5], np.float32), "a": np.array([[1, 2]], np.float32)})
    expected = b"CCUT" + struct.pack("<II", 1, 2)
    expected += struct.pack("<I", 1) + b"a" + struct.pack("<III", 2, 1, 2) + struct.pack("<2f", 1, 2)
    expected += struct.pack("<I", 1) + b"b" + struct.pack("<II", 1, 1) + struct.pack("<f", 1.5)
    assert buf == expected


def test_save_is_deterministic(tmp_path):
    model = tiny()
    save_checkpoint(model, tmp_path / "a.ccut")
    save_checkpoint(model, tmp_path / "b.ccut")
    assert (tmp_path / "a.ccut").read_bytes() == (tmp_path / "b.ccut").read_bytes()


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       st.lists(st.integers(1, 4), min_size=0, max_size=4), max_size=6),
       st.integers(0, 1000))
def test_size_formula_and_round_trip(shapes, seed):
    r = np.random.default_rng(seed)
    tensors = {n: r.standard_normal(s).astype(np.float32) for n, s in shapes.items()}
    buf = encode(tensors)
    size = 12 + sum(4 + len(n.encode()) + 4 + 4 * a.ndim + 4 * a.size for n, a in tensors.items())
    assert len(buf) == size
    back = decode(buf)
    assert list(back) == sorted(tensors)
    for n, a in tensors.items():
        assert back[n].tobytes() == a.tobytes() and back[n].shape == a.shape


def test_model_round_trip_bitwise(tmp_path):
    src, dst = tiny(1), tiny(2)
    path = tmp_path / "m.ccut"
    save_checkpoint(src, path)
    report = load_checkpoint(path, dst)
    assert report.clean
    assert len(report.loaded) == len(src.state())
    for n, p in src.named_parameters():
        assert dst.state()[n].data.tobytes() == p.data.tobytes()


def test_lenient_backbone_only_load_reports_head_and_det(tmp_path):
    src = tiny(1)
    path = tmp_path / "backbone.ccut"
    save_checkpoint({n: src.state()[n].data for n in src.backbone_names()}, path)
    dst = tiny(2)
    report = load_checkpoint(path, dst, strict=False)
    non_backbone = sorted(set(dst.state()) - set(dst.backbone_names()))
    assert report.missing == non_backbone
    assert all(n.startswith(("det.", "head.")) for n in report.missing)
    assert not report.unexpected and not report.mismatched
    for n in dst.backbone_names():
        assert dst.state()[n].data.tobytes() == src.state()[n].data.tobytes()


def test_strict_renamed_entry_is_named_and_nothing_applied(tmp_path):
    src, dst = tiny(1), tiny(2)
    state = {n: p.data for n, p in src.named_parameters()}
    state["head.renamed"] = state.pop("head.bias")
    path = tmp_path / "r.ccut"
    save_checkpoint(state, path)
    before = {n: p.data.tobytes() for n, p in dst.named_parameters()}
    with pytest.raises(LoadError, match="head.renamed") as info:
        load_checkpoint(path, dst, strict=True)
    assert "head.bias" in str(info.value)
    assert all(p.data.tobytes() == before[n] for n, p in dst.named_parameters())


def test_shape_mismatch(tmp_path):
    src = tiny(1)
    path = tmp_path / "s.ccut"
    save_checkpoint(src, path)
    dst = build_model(profile_config("tiny", num_classes=4), make_rng(0))
    with pytest.raises(LoadError, match="head.weight"):
        load_checkpoint(path, dst)
    report = load_checkpoint(path, dst, strict=False)
    assert report.mismatched == ["head.bias", "head.weight"]


@pytest.mark.parametrize("mutate,fragment", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_corrupt_files(tmp_path, mutate, fragment):
    path = tmp_path / "c.ccut"
    path.write_bytes(mutate(encode({"w": np.ones(3, np.float32)})))
    with pytest.raises(LoadError, match=fragment):
        read_checkpoint(path)


def test_duplicate_entries_rejected():
    one = encode({"w": np.ones(1, np.float32)})
    body = one[12:]
    with pytest.raises(LoadError, match="duplicate"):
        decode(b"CCUT" + struct.pack("<II", 1, 2) + body + body)


def test_missing_file(tmp_path):
    with pytest.raises(LoadError, match="none.ccut"):
        read_checkpoint(tmp_path / "none.ccut")
