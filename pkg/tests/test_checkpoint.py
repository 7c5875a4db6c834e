import numpy as np
import pytest

from punet.architectures import create_model
from punet.checkpoint import MAGIC, load_checkpoint, load_into, read_header, save_checkpoint
from punet.errors import CheckpointError
from punet.tensor import Tensor


@pytest.fixture
def model():
    m = create_model("pure20", 10, seed=4)
    # make running stats non-trivial
    m(Tensor(np.random.default_rng(0).random((2, 3, 32, 32), dtype=np.float32)))
    return m


def test_round_trip_bitwise(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ckpt", model, meta={"epoch": 3})
    ckpt = load_checkpoint(path)
    assert ckpt.meta == {"epoch": 3} and ckpt.dtype == "float32"
    original = model.state_dict()
    assert list(ckpt.state) == list(original)
    for k, v in original.items():
        assert ckpt.state[k].dtype == v.dtype and ckpt.state[k].tobytes() == v.tobytes()
    rebuilt = ckpt.build()
    x = Tensor(np.ones((1, 3, 32, 32), np.float32))
    model.eval(), rebuilt.eval()
    assert model(x).data.tobytes() == rebuilt(x).data.tobytes()


def test_header_contents(tmp_path, model):
    raw = save_checkpoint(tmp_path / "m.ckpt", model).read_bytes()
    assert raw[:8] == MAGIC
    header, _ = read_header(raw)
    kinds = {e["name"]: e["kind"] for e in header["manifest"]}
    assert kinds["stages.0.0.conv2.theta"] == "param"
    assert kinds["stem.bn.running_var"] == "buffer"
    assert header["arch"]["stage_blocks"] == [3, 3, 3]


def test_float64_round_trip(tmp_path):
    m = create_model("resnet20", 10, seed=0, dtype=np.float64)
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "d.ckpt", m))
    assert ckpt.dtype == "float64"
    assert all(ckpt.state[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())


def test_corruption_detected(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = bytearray(path.read_bytes())
    raw[-5] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)


def test_bad_magic_and_truncation(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:6])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_arch_mismatch(tmp_path, model):
    ckpt = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", model))
    with pytest.raises(CheckpointError):
        load_into(create_model("pure32", 10), ckpt)
    with pytest.raises(CheckpointError):
        load_into(create_model("pure20", 5), ckpt)
    load_into(create_model("pure20", 10, seed=9), ckpt)
