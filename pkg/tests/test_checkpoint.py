import json
import struct
from dataclasses import replace

import pytest
import torch

from app.checkpoint import MAGIC, checkpoint_from_model, load_checkpoint, load_model, save_checkpoint
from app.dit import build_model, velocity
from app.panels import build_inpaint_mask
from common.errors import ArtifactIOError, ValidationError
from common.seeding import gaussian


def _header(raw: bytes) -> dict:
    (n,) = struct.unpack("<Q", raw[8:16])
    return json.loads(raw[16 : 16 + n])


def test_round_trip(tmp_path, small_config):
    model = build_model(small_config, seed=8)
    path = save_checkpoint(tmp_path / "m.ckpt", checkpoint_from_model(model, seed=8, step=12, train={"lr": 1e-4}))
    loaded, ck = load_model(path)

    assert ck.config == small_config and ck.seed == 8 and ck.step == 12 and ck.train == {"lr": 1e-4}
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)

    layout = small_config.layout
    z = gaussian((1, 3, layout.H, 3 * layout.W), 0)
    cond = torch.zeros_like(z)
    mask = build_inpaint_mask(layout).unsqueeze(0)
    assert torch.equal(velocity(model, z, 0.5, cond, mask)[0], velocity(loaded, z, 0.5, cond, mask)[0])


def test_file_layout(tmp_path, small_config):
    model = build_model(small_config, seed=0)
    path = save_checkpoint(tmp_path / "m.ckpt", checkpoint_from_model(model, seed=0))
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    head = _header(raw)
    assert head["format_version"] == 1
    assert head["model_config"]["layout"] == {"H": 32, "W": 24, "patch": 4, "text_tokens": 2}
    names = [a["name"] for a in head["arrays"]]
    assert names == list(model.state_dict().keys())
    n_floats = sum(int(torch.tensor(a["shape"]).prod()) if a["shape"] else 1 for a in head["arrays"])
    (hlen,) = struct.unpack("<Q", raw[8:16])
    assert len(raw) == 16 + hlen + 4 * n_floats


def test_save_is_byte_identical(tmp_path, small_config):
    a = save_checkpoint(tmp_path / "a.ckpt", checkpoint_from_model(build_model(small_config, seed=2), seed=2))
    b = save_checkpoint(tmp_path / "b.ckpt", checkpoint_from_model(build_model(small_config, seed=2), seed=2))
    assert a.read_bytes() == b.read_bytes()


def test_corrupt_files(tmp_path, small_config):
    path = save_checkpoint(tmp_path / "m.ckpt", checkpoint_from_model(build_model(small_config, seed=0), seed=0))
    raw = path.read_bytes()

    (tmp_path / "magic.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValidationError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")

    (tmp_path / "short.ckpt").write_bytes(raw[:-10])
    with pytest.raises(ValidationError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")

    (tmp_path / "long.ckpt").write_bytes(raw + b"\x00\x00\x00\x00")
    with pytest.raises(ValidationError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")

    with pytest.raises(ArtifactIOError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_config_mismatch(tmp_path, small_config):
    ck = checkpoint_from_model(build_model(small_config, seed=0), seed=0)
    ck.config = replace(small_config, layers=3)
    with pytest.raises(ValidationError):
        ck.build_model()
