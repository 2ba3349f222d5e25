import struct

import numpy as np
import pytest

from growkit.checkpoint import ALIGN, MAGIC, VERSION, CheckpointMeta, load_checkpoint, save_checkpoint
from growkit.errors import HeaderError, TensorBoundsError, TruncatedPayloadError
from growkit.growth import MaskSet
from growkit.model import ModelConfig, init_params

CFG = ModelConfig(vocab_size=61, d_model=16, d_ffn=32, n_heads=2, head_dim=8, n_layers=2, max_seq_len=24)


def make_ckpt(path, seed=0, **meta_kw):
    params = init_params(CFG, seed=seed)
    save_checkpoint(path, params, CheckpointMeta(config=CFG, **meta_kw))
    return params


def test_roundtrip_tensors_exact(tmp_path):
    path = tmp_path / "a.ckpt"
    params = make_ckpt(path)
    loaded, meta = load_checkpoint(path)
    assert meta.config == CFG
    for (na, a), (nb, b) in zip(params.named_tensors(), loaded.named_tensors()):
        assert na == nb
        assert np.array_equal(a, b)


def test_write_read_write_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    make_ckpt(p1)
    params, meta = load_checkpoint(p1)
    save_checkpoint(p2, params, meta)
    assert p1.read_bytes() == p2.read_bytes()


def test_provenance_roundtrip(tmp_path):
    path = tmp_path / "a.ckpt"
    masks = MaskSet(base_d_model=16, base_d_ffn=32, width_gates=np.array([0.25]),
                    layer_gates={1: 0.5, 3: 0.0}, horizon=100)
    make_ckpt(path, history=["op=direct dir=depth g=2 pattern=- noise=0.0 seed=1"],
              origin_map=(1, 2, 1, 2), masks=masks)
    _, meta = load_checkpoint(path)
    assert meta.history == ["op=direct dir=depth g=2 pattern=- noise=0.0 seed=1"]
    assert meta.origin_map == (1, 2, 1, 2)
    assert meta.masks.base_d_model == 16
    assert meta.masks.width_gates.tolist() == [0.25]
    assert meta.masks.layer_gates == {1: 0.5, 3: 0.0}
    assert meta.masks.horizon == 100
    # and the full file still reproduces byte-for-byte
    p2 = tmp_path / "b.ckpt"
    params, meta2 = load_checkpoint(path)
    save_checkpoint(p2, params, meta2)
    assert path.read_bytes() == p2.read_bytes()


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    make_ckpt(path)
    blob = path.read_bytes()
    bad = tmp_path / "trunc.ckpt"
    bad.write_bytes(blob[: len(blob) - 257])
    with pytest.raises(TruncatedPayloadError) as exc:
        load_checkpoint(bad)
    assert exc.value.code == "truncated-payload"


def test_out_of_bounds_index_rejected(tmp_path):
    # hand-build a container whose tensor index points past the payload
    header_lines = ["[model]"]
    for f, v in zip(("vocab_size", "d_model", "d_ffn", "n_heads", "head_dim", "n_layers", "max_seq_len"),
                    (61, 16, 32, 2, 8, 1, 24)):
        header_lines.append(f"{f}={v}")
    header_lines.append("[tensors]")
    header_lines.append(f"embedding=f32;61,16;{ALIGN * 10_000}")
    header = ("\n".join(header_lines) + "\n").encode()
    preamble = struct.pack("<8sIQ", MAGIC, VERSION, len(header))
    bad = tmp_path / "oob.ckpt"
    bad.write_bytes(preamble + header + b"\0" * 256)
    with pytest.raises(TruncatedPayloadError):
        load_checkpoint(bad)


def test_overlapping_tensors_rejected(tmp_path):
    header_lines = ["[model]"]
    for f, v in zip(("vocab_size", "d_model", "d_ffn", "n_heads", "head_dim", "n_layers", "max_seq_len"),
                    (61, 16, 32, 2, 8, 1, 24)):
        header_lines.append(f"{f}={v}")
    header_lines.append("[tensors]")
    header_lines.append("embedding=f32;61,16;0")
    header_lines.append("head=f32;61,16;64")  # overlaps the embedding bytes
    header = ("\n".join(header_lines) + "\n").encode()
    preamble = struct.pack("<8sIQ", MAGIC, VERSION, len(header))
    bad = tmp_path / "overlap.ckpt"
    bad.write_bytes(preamble + header + b"\0" * (61 * 16 * 4 * 4))
    with pytest.raises(TensorBoundsError) as exc:
        load_checkpoint(bad)
    assert exc.value.code == "tensor-out-of-bounds"


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    make_ckpt(path)
    blob = bytearray(path.read_bytes())
    blob[:8] = b"NOTMAGIC"
    bad = tmp_path / "magic.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(HeaderError):
        load_checkpoint(bad)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    make_ckpt(path)
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 99)
    bad = tmp_path / "ver.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(HeaderError):
        load_checkpoint(bad)


def test_distinct_error_codes():
    assert TruncatedPayloadError.code != TensorBoundsError.code
