import struct

import numpy as np
import pytest

from qrlab.checkpoint import CHECKPOINT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint
from qrlab.errors import SchemaError


def _ckpt(rng):
    return Checkpoint(
        {"epoch": 2, "note": "x"},
        {"b/w": rng.normal(size=(3, 2)), "a": rng.normal(size=4), "s": np.array(1.5)},
        {"a": rng.normal(size=4)},
        {"a": rng.uniform(size=4)},
    )


def test_round_trip_bit_exact(tmp_path, rng):
    ck = _ckpt(rng)
    save_checkpoint(tmp_path / "c.qrck", ck)
    back = load_checkpoint(tmp_path / "c.qrck")
    assert back.meta["epoch"] == 2
    for a, b in ((ck.params, back.params), (ck.adam_m, back.adam_m), (ck.adam_v, back.adam_v)):
        assert sorted(a) == sorted(b)
        for k in a:
            assert a[k].tobytes() == b[k].tobytes() and a[k].shape == b[k].shape


def test_layout_is_documented_form(tmp_path, rng):
    ck = _ckpt(rng)
    save_checkpoint(tmp_path / "c.qrck", ck)
    raw = (tmp_path / "c.qrck").read_bytes()
    magic, version, meta_len = struct.unpack_from("<4sIQ", raw)
    assert magic == MAGIC and version == CHECKPOINT_VERSION
    payload = raw[16 + meta_len : -4]
    # params sorted by name, then optimizer moments
    expected = b"".join(ck.params[k].astype("<f8").tobytes() for k in sorted(ck.params))
    expected += ck.adam_m["a"].tobytes() + ck.adam_v["a"].tobytes()
    assert payload == expected


def test_same_content_same_bytes(tmp_path, rng):
    ck = _ckpt(rng)
    save_checkpoint(tmp_path / "a.qrck", ck)
    save_checkpoint(tmp_path / "b.qrck", ck)
    assert (tmp_path / "a.qrck").read_bytes() == (tmp_path / "b.qrck").read_bytes()


@pytest.mark.parametrize("mutate", [
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw[:4] + struct.pack("<I", 99) + raw[8:],
    lambda raw: raw[:-20] + bytes(16) + raw[-4:],
    lambda raw: raw[:10],
])
def test_corruption_detected(tmp_path, rng, mutate):
    save_checkpoint(tmp_path / "c.qrck", _ckpt(rng))
    p = tmp_path / "c.qrck"
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(SchemaError):
        load_checkpoint(p)
