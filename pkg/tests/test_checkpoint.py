import numpy as np
import pytest

from distill_lab import checkpoint as C
from distill_lab.errors import (
    CheckpointError,
    CorruptPayloadError,
    TopologyMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from distill_lab.nn import Classifier, Connector, FeatureExtractor, Network, forward, freeze, init_network
from distill_lab.tensor import Tensor


def _student_with_connector():
    rng = np.random.default_rng(0)
    phi = FeatureExtractor([2, 8], rng)
    conn = Connector(8, 16, depth=3, seed=1)
    g = Classifier(16, 3, rng)
    freeze(g)
    net = Network(phi, g, conn, seed=9)
    # populate running statistics
    net.train()
    net(Tensor(rng.normal(size=(32, 2))))
    net.eval()
    return net


@pytest.fixture(params=["plain", "connector", "float32"])
def module(request):
    if request.param == "plain":
        return init_network([2, 16, 8], 3, seed=4)
    if request.param == "connector":
        return _student_with_connector()
    return init_network([2, 5], 2, seed=1, dtype=np.float32)


def test_save_load_save_is_byte_identical(tmp_path, module):
    p1 = C.save_checkpoint(module, tmp_path / "a.ckpt", step=17)
    loaded = C.load_checkpoint(p1).to_module()
    p2 = C.save_checkpoint(loaded, tmp_path / "b.ckpt", step=17)
    assert p1.read_bytes() == p2.read_bytes()


def test_round_trip_is_bit_exact(tmp_path, module):
    C.save_checkpoint(module, tmp_path / "m.ckpt")
    loaded = C.load_checkpoint(tmp_path / "m.ckpt").to_module()
    for (na, pa), (nb, pb) in zip(module.named_parameters(), loaded.named_parameters()):
        assert na == nb
        assert pa.data.dtype == pb.data.dtype
        assert pa.data.tobytes() == pb.data.tobytes()
        assert pa.frozen == pb.frozen
    for (na, ba), (nb, bb) in zip(module.named_buffers(), loaded.named_buffers()):
        assert na == nb and ba.tobytes() == bb.tobytes()


def test_forward_agrees_after_load(tmp_path):
    net = _student_with_connector()
    C.save_checkpoint(net, tmp_path / "n.ckpt")
    back = C.load_network(tmp_path / "n.ckpt")
    back.eval()
    x = np.random.default_rng(5).normal(size=(11, 2))
    assert forward(net, x)[0].data.tobytes() == forward(back, x)[0].data.tobytes()
    assert back.seed == 9


def test_manifest_is_readable_text(tmp_path):
    C.save_checkpoint(init_network([2, 4], 3, seed=0), tmp_path / "m.ckpt", seed=3, step=5)
    data = (tmp_path / "m.ckpt").read_bytes()
    head = data[: data.index(b"end_manifest")].decode()
    assert "format_version: 1" in head
    assert "param.phi.layers.0.weight: shape=4x2 offset=0" in head
    assert "seed: 3" in head and "step: 5" in head


def test_connector_checkpoint(tmp_path):
    c = Connector(4, 6, depth=2, seed=3, batchnorm=False)
    C.save_checkpoint(c, tmp_path / "c.ckpt")
    back = C.load_module(tmp_path / "c.ckpt", kind="connector")
    assert back.widths == c.widths and not back.batchnorm


def _bytes(tmp_path):
    p = C.save_checkpoint(init_network([2, 8], 3, seed=0), tmp_path / "x.ckpt")
    return p.read_bytes()


def test_corrupt_byte_rejected(tmp_path):
    data = bytearray(_bytes(tmp_path))
    data[-5] ^= 0x01
    with pytest.raises(CorruptPayloadError):
        C.decode(bytes(data))


def test_truncated_payload_rejected(tmp_path):
    with pytest.raises(TruncatedPayloadError):
        C.decode(_bytes(tmp_path)[:-8])


def test_truncated_manifest_rejected(tmp_path):
    with pytest.raises(TruncatedPayloadError):
        C.decode(_bytes(tmp_path)[:40])


def test_trailing_garbage_rejected(tmp_path):
    with pytest.raises(CorruptPayloadError):
        C.decode(_bytes(tmp_path) + b"\x00")


def test_version_mismatch_rejected(tmp_path):
    data = _bytes(tmp_path).replace(b"format_version: 1", b"format_version: 2", 1)
    with pytest.raises(VersionMismatchError):
        C.decode(data)


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        C.decode(b"hello\nend_manifest\n")


def test_topology_mismatch_rejected(tmp_path):
    C.save_checkpoint(init_network([2, 8], 3, seed=0), tmp_path / "n.ckpt")
    with pytest.raises(TopologyMismatchError):
        C.load_network(tmp_path / "n.ckpt", widths=[2, 16, 3])
    with pytest.raises(TopologyMismatchError):
        C.load_module(tmp_path / "n.ckpt", kind="connector")


def test_load_errors_are_distinct():
    kinds = {TruncatedPayloadError, CorruptPayloadError, VersionMismatchError, TopologyMismatchError}
    assert len(kinds) == 4
    for a in kinds:
        for b in kinds - {a}:
            assert not issubclass(a, b)
