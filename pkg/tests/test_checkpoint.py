import json
import struct
import zlib
from pathlib import Path

import numpy as np
import pytest

from moma.autograd import Tensor
from moma.checkpoint import (
    BadMagicError,
    ChecksumError,
    ConfigMismatchError,
    ManifestError,
    MetricsError,
    MetricsLog,
    VersionError,
    append_metrics,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
)
from moma.vit import PRESETS, ModelWeights, ViTConfig, init_weights, preset

GOLDEN = Path(__file__).parent / "data" / "golden_v1.ckpt"
GOLDEN_CFG = dict(image_size=4, patch_size=2, depth=1, heads=1, dim=2, mlp_ratio=4.0, decoder_depth=1,
                  decoder_dim=2, decoder_heads=1, use_class_token=False, channels=3)
GOLDEN_PARAMS = {"a": np.array([[1.0, -2.0], [3.5, 0.25]]), "b": np.array([1e-3])}


def build_golden() -> bytes:
    """Byte layout written out by hand: magic, u32 version, u32 header length, JSON, f32 LE payload, u32 CRC."""
    payload = struct.pack("<4f", 1.0, -2.0, 3.5, 0.25) + struct.pack("<f", 1e-3)
    header = {
        "config": GOLDEN_CFG,
        "role": "student",
        "manifest": [{"name": "a", "rank": 2, "dims": [2, 2], "offset": 0},
                     {"name": "b", "rank": 1, "dims": [1], "offset": 16}],
        "payload_bytes": 20,
        "extra": {},
    }
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"MOMA" + struct.pack("<II", 1, len(h)) + h + payload + struct.pack("<I", zlib.crc32(payload))


def golden_weights():
    return ModelWeights(ViTConfig(**GOLDEN_CFG), {k: Tensor(v) for k, v in GOLDEN_PARAMS.items()}, "student")


def test_golden_file_matches_layout():
    assert GOLDEN.read_bytes() == build_golden()


def test_golden_decode():
    w = load_checkpoint(GOLDEN)
    assert w.config == ViTConfig(**GOLDEN_CFG) and w.role == "student"
    np.testing.assert_array_equal(w["a"].data, np.float32(GOLDEN_PARAMS["a"]))
    assert w["b"].data.dtype == np.float32


def test_golden_encode():
    assert encode_checkpoint(golden_weights()) == GOLDEN.read_bytes()


def test_round_trip_bitwise(tmp_path):
    w = init_weights(preset("micro"), 3, decoder=True)
    path = save_checkpoint(w, tmp_path / "w.ckpt", {"note": "x"})
    back, extra = load_checkpoint(path, with_extra=True)
    assert extra == {"note": "x"} and list(back.params) == list(w.params)
    for name, t in w.params.items():
        assert back[name].data.tobytes() == t.data.tobytes()


def test_float64_downcast_on_save(tmp_path):
    w = golden_weights()
    w.params["a"] = Tensor(GOLDEN_PARAMS["a"], dtype=np.float64)
    back = load_checkpoint(save_checkpoint(w, tmp_path / "w.ckpt"))
    assert back["a"].dtype == np.float32


def test_teacher_role_frozen_on_load(tmp_path):
    w = init_weights(preset("micro"), 0, role="teacher_moco")
    back = load_checkpoint(save_checkpoint(w, tmp_path / "t.ckpt"))
    assert back.is_teacher and all(not p.requires_grad and not p.data.flags.writeable for p in back.parameters())


def test_load_does_not_modify_file(tmp_path):
    path = save_checkpoint(golden_weights(), tmp_path / "g.ckpt")
    before = path.read_bytes()
    load_checkpoint(path)
    assert path.read_bytes() == before


def test_flipped_payload_byte():
    blob = bytearray(build_golden())
    blob[-6] ^= 0x01
    with pytest.raises(ChecksumError):
        decode_checkpoint(bytes(blob))


def test_bad_magic():
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"NOPE" + build_golden()[4:])


def test_version_skew():
    blob = bytearray(build_golden())
    blob[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionError):
        decode_checkpoint(bytes(blob))


def _with_header(mutate):
    blob = build_golden()
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12:12 + hlen])
    mutate(header)
    h = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return blob[:4] + struct.pack("<II", 1, len(h)) + h + blob[12 + hlen:]


def test_manifest_overflow():
    def grow(h):
        h["manifest"][1]["dims"] = [4]
    with pytest.raises(ManifestError):
        decode_checkpoint(_with_header(grow))


def test_manifest_overlap():
    def overlap(h):
        h["manifest"][1]["offset"] = 12
    with pytest.raises(ManifestError):
        decode_checkpoint(_with_header(overlap))


def test_truncated_file():
    with pytest.raises(ManifestError):
        decode_checkpoint(build_golden()[:-3])


def test_config_mismatch_names_both(tmp_path):
    path = save_checkpoint(init_weights(PRESETS["micro"], 0), tmp_path / "m.ckpt")
    with pytest.raises(ConfigMismatchError) as err:
        load_checkpoint(path, expected_config=PRESETS["tiny"])
    assert "dim=64" in str(err.value) and "dim=128" in str(err.value)


def test_base_vs_small_mismatch():
    w = ModelWeights(PRESETS["base"], {"x": Tensor(np.zeros(1))})
    with pytest.raises(ConfigMismatchError, match="768.*384"):
        decode_checkpoint(encode_checkpoint(w), PRESETS["small"])


# metrics log

def test_metrics_append_and_reread(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", ("loss",))
    rows = [{"run_id": "r", "step": 0, "wall_time": 0.5, "lr": 0.1, "loss": 2.0},
            {"run_id": "r", "step": 1, "wall_time": 1.0, "lr": 0.2, "loss": 1.5}]
    for r in rows:
        append_metrics(log, r)
    assert read_metrics(tmp_path / "m.csv") == rows


def test_metrics_non_increasing_step(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", ("loss",))
    append_metrics(log, {"run_id": "r", "step": 3, "wall_time": 0, "lr": 0, "loss": 1})
    with pytest.raises(MetricsError):
        append_metrics(log, {"run_id": "r", "step": 3, "wall_time": 0, "lr": 0, "loss": 1})
    append_metrics(log, {"run_id": "other", "step": 0, "wall_time": 0, "lr": 0, "loss": 1})


def test_metrics_reopen_keeps_step_order(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", ("loss",))
    append_metrics(log, {"run_id": "r", "step": 5, "wall_time": 0, "lr": 0, "loss": 1})
    again = MetricsLog(tmp_path / "m.csv", ("loss",))
    with pytest.raises(MetricsError):
        append_metrics(again, {"run_id": "r", "step": 5, "wall_time": 0, "lr": 0, "loss": 1})


def test_metrics_unknown_column(tmp_path):
    log = MetricsLog(tmp_path / "m.csv", ("loss",))
    with pytest.raises(MetricsError):
        append_metrics(log, {"run_id": "r", "step": 0, "wall_time": 0, "lr": 0, "acc": 1})
