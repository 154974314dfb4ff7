import numpy as np
import pytest

from nlnet import container
from nlnet.backbones import build_network, desk_spec, insert_nonlocal
from nlnet.checkpoint import block_names, load_checkpoint, load_state, save_checkpoint, state_arrays
from nlnet.errors import ConfigError
from nlnet.nonlocal_block import NonLocalConfig
from nlnet.tensor import Tensor, no_grad


def test_roundtrip_and_layout(rng):
    arrays = {"b": rng.normal(size=(2, 3)), "a": np.arange(4)}
    data = container.dumps({"format": "x", "n": 1}, arrays)
    assert data.startswith(container.MAGIC)
    manifest, back = container.loads(data)
    assert manifest["format"] == "x" and [e["name"] for e in manifest["entries"]] == ["a", "b"]
    assert back["a"].dtype == np.int64 and np.array_equal(back["a"], arrays["a"])
    assert np.array_equal(back["b"], arrays["b"])
    # same content, different insertion order -> same bytes
    assert container.dumps({"n": 1, "format": "x"}, {"a": arrays["a"], "b": arrays["b"]}) == data


def test_rejects_garbage():
    with pytest.raises(container.ContainerError):
        container.loads(b"NOTNLN" + bytes(20))
    good = container.dumps({}, {"a": np.zeros(3)})
    with pytest.raises(container.ContainerError):
        container.loads(good[:-8])
    with pytest.raises(container.ContainerError):
        container.dumps({}, {"s": np.array(["x"])})


def _net(seed=0):
    net = build_network(desk_spec(input_shape=(8, 16, 16)), width_scale=0.25, seed=seed)
    return insert_nonlocal(net, [("res3", 1), ("res4", 0)], NonLocalConfig("dot_product", subsample_spatial=2))


def test_checkpoint_roundtrip(tmp_path, rng):
    net = _net(3)
    for p in net.parameters():
        p.data = p.data + 0.01 * rng.normal(size=p.shape)
    for _, b in net.named_buffers():
        b[...] = rng.uniform(0.5, 1.5, size=b.shape)
    path = tmp_path / "ck.nlnet"
    save_checkpoint(net, path, meta={"note": "hi"})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "hi"}
    assert back.spec == net.spec
    x = rng.normal(size=(2, 8, 16, 16, 1))
    net.eval()
    with no_grad():
        assert np.array_equal(back(Tensor(x)).data, net(Tensor(x)).data)
    assert block_names(path) == ["res3.nl0", "res4.nl0"]
    save_checkpoint(back, tmp_path / "again.nlnet", meta={"note": "hi"})
    assert (tmp_path / "again.nlnet").read_bytes() == path.read_bytes()


def test_load_state_mismatch():
    net = _net()
    arrays = state_arrays(net)
    arrays.pop(next(iter(arrays)))
    with pytest.raises(ConfigError, match="missing"):
        load_state(net, arrays)
    arrays = state_arrays(net)
    k = next(k for k in arrays if k.endswith("fc.weight"))
    arrays[k] = np.zeros((1, 1))
    with pytest.raises(ConfigError, match="shape"):
        load_state(net, arrays)


def test_dataset_file_is_not_a_checkpoint(tmp_path):
    container.write(tmp_path / "d.nlnet", {"format": "nlnet-dataset"}, {"clips": np.zeros(1)})
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "d.nlnet")
