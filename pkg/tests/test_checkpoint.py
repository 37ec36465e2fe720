import numpy as np
import pytest

from ofscnn.checkpoint import load_checkpoint, save_checkpoint
from ofscnn.data import FormatError
from ofscnn.network import ConvSpec, Network, NetworkSpec


def small_net(seed=0):
    spec = NetworkSpec(input_resolution=(10, 8), conv_layers=[ConvSpec(2, k0=3.3), ConvSpec(3, mode="fixed", size=3)],
                       pool_after=(0,), fc_nodes=4)
    return Network(spec, seed)


def test_roundtrip_restores_network(tmp_path):
    net = small_net()
    net.layers[0].set_size(3.8)
    save_checkpoint(tmp_path / "c.ofsc", net.state_dict(), meta={"note": "x"})
    meta, state = load_checkpoint(tmp_path / "c.ofsc")
    assert meta == {"note": "x"}
    other = small_net(seed=5)
    other.load_state_dict(state)
    x = np.random.default_rng(0).standard_normal((3, 1, 10, 8))
    np.testing.assert_array_equal(net.forward(x), other.forward(x))
    assert other.layers[0].k == 3.8


def test_state_values_bit_exact(tmp_path):
    state = small_net().state_dict()
    save_checkpoint(tmp_path / "c.ofsc", state)
    _, back = load_checkpoint(tmp_path / "c.ofsc")
    assert back.keys() == state.keys()
    for key, value in state.items():
        if isinstance(value, np.ndarray):
            assert back[key].tobytes() == value.tobytes()
        else:
            assert back[key] == value


def test_bad_magic(tmp_path):
    (tmp_path / "c.ofsc").write_bytes(b"XXXX" + bytes(10))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "c.ofsc")


def test_truncated(tmp_path):
    save_checkpoint(tmp_path / "c.ofsc", small_net().state_dict())
    raw = (tmp_path / "c.ofsc").read_bytes()
    (tmp_path / "c.ofsc").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.ofsc")
