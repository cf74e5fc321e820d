import io
import json
import pathlib
import struct
import warnings

import numpy as np
import pytest
import torch as th

from simfree_soc.common.errors import CheckpointError
from simfree_soc.common.policies import MlpPolicy, PisPolicy
from simfree_soc.common.save_util import (
    FORMAT_VERSION,
    MAGIC,
    export_params_text,
    load_params,
    open_path,
    save_params,
)
from simfree_soc.common.torch_layers import ParamLayout
from simfree_soc.problems import FunnelTarget, funnel_score


def _layout():
    layout = ParamLayout()
    layout.register("net.0.weight", (2, 3))
    layout.register("net.0.bias", (2,))
    return layout


def _write(tmp_path, name="params.bin", meta=None):
    path = tmp_path / name
    params = np.arange(8, dtype=np.float64) / 3.0
    save_params(path, _layout(), params, {"policy": "mlp"}, meta)
    return path, params


def test_save_load_params(tmp_path):
    path, params = _write(tmp_path, meta={"iteration": 12, "seed": 3})
    header, loaded = load_params(path)
    assert np.array_equal(loaded, params)
    assert loaded.dtype == np.float64
    assert header["meta"] == {"iteration": 12, "seed": 3}
    assert header["architecture"] == {"policy": "mlp"}
    assert header["size"] == 8
    assert ParamLayout.from_list(header["layout"]).diff(_layout()) == []

    raw = path.read_bytes()
    magic, version, header_length = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC == b"SFSOCPRM"
    assert version == FORMAT_VERSION == 1
    assert json.loads(raw[20 : 20 + header_length])["size"] == 8
    assert len(raw) == 20 + header_length + 8 * 8
    # Payload is little-endian float64
    assert np.array_equal(np.frombuffer(raw[20 + header_length :], dtype="<f8"), params)


def test_save_load_in_memory():
    buffer = io.BytesIO()
    params = th.linspace(-1, 1, 8, dtype=th.float64)
    save_params(buffer, _layout(), params, {"policy": "mlp"})
    assert not buffer.closed
    buffer.seek(0)
    _, loaded = load_params(buffer)
    assert np.array_equal(loaded, params.numpy())


def test_save_wrong_size(tmp_path):
    with pytest.raises(ValueError):
        save_params(tmp_path / "bad.bin", _layout(), np.zeros(7), {"policy": "mlp"})


@pytest.mark.parametrize(
    "corrupt, match",
    [
        (lambda raw: raw[:10], "no complete preamble"),
        (lambda raw: b"NOTPARAM" + raw[8:], "bad magic"),
        (lambda raw: raw[:8] + struct.pack("<I", 2) + raw[12:], "format version 2"),
        (lambda raw: raw[:30], "inside its header"),
        (lambda raw: raw[:-8], "truncated or corrupted"),
        (lambda raw: raw + b"\x00", "truncated or corrupted"),
    ],
)
def test_corrupted_checkpoints(tmp_path, corrupt, match):
    path, _ = _write(tmp_path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_params(path)


def test_corrupted_header(tmp_path):
    header = b"{not json"
    path = tmp_path / "broken.bin"
    path.write_bytes(struct.pack("<8sIQ", MAGIC, FORMAT_VERSION, len(header)) + header)
    with pytest.raises(CheckpointError, match="corrupted header"):
        load_params(path)


def test_policy_save_load(tmp_path):
    policy = MlpPolicy(3, net_arch=[16, 16], num_freqs=4, seed=5)
    path = str(tmp_path / "policy.bin")
    policy.save(path, meta={"iteration": 7})

    loaded = MlpPolicy.load(path)
    assert isinstance(loaded, MlpPolicy)
    assert loaded.get_architecture() == policy.get_architecture()
    assert np.array_equal(loaded.parameters_to_vector(), policy.parameters_to_vector())
    x = th.randn(4, 3, dtype=th.float64)
    assert th.equal(loaded(0.3, x), policy(0.3, x))

    with pytest.raises(CheckpointError, match="does not match"):
        MlpPolicy(3, net_arch=[16], num_freqs=4).load_checkpoint(path)


def test_pis_policy_needs_score(tmp_path):
    target = FunnelTarget(dim=4)

    def score(x):
        return funnel_score(target, x)

    policy = PisPolicy(4, score, t_arch=(8,), x_arch=(8, 8), head_arch=(8,), gate_arch=(8, 8), num_freqs=4, seed=3)
    path = str(tmp_path / "pis.bin")
    policy.save(path)
    loaded = PisPolicy.load(path, score_fn=score)
    assert np.array_equal(loaded.parameters_to_vector(), policy.parameters_to_vector())
    x = th.randn(5, 4, dtype=th.float64)
    assert th.allclose(loaded(0.5, x), policy(0.5, x), rtol=0, atol=0)
    with pytest.raises(ValueError):
        PisPolicy.load(path)


def test_export_params_text(tmp_path):
    params = np.arange(8, dtype=np.float64)
    path = tmp_path / "dump" / "params.txt"
    export_params_text(path, _layout(), params)
    lines = path.read_text().splitlines()
    assert lines == [
        "# net.0.weight shape=[2, 3] offset=0",
        "0.0 1.0 2.0",
        "3.0 4.0 5.0",
        "# net.0.bias shape=[2] offset=6",
        "6.0 7.0",
    ]


@pytest.mark.parametrize("pathtype", [str, pathlib.Path])
def test_open_file_str_pathlib(tmp_path, pathtype):
    # check that suffix isn't added because we used open_path first
    with open_path(pathtype(f"{tmp_path}/t1"), "w") as fp1:
        fp1.write(b"foo")
    assert fp1.closed
    with warnings.catch_warnings(record=True) as record:
        with open_path(pathtype(f"{tmp_path}/t1"), "r") as fp1:
            assert fp1.read() == b"foo"
    assert not record

    # test without suffix
    with open_path(pathtype(f"{tmp_path}/t1"), "w", suffix="bin") as fp1:
        fp1.write(b"bar")
    assert fp1.closed
    assert pathlib.Path(f"{tmp_path}/t1.bin").read_bytes() == b"bar"

    # reading falls back on the suffixed path
    with warnings.catch_warnings(record=True) as record:
        with open_path(pathtype(f"{tmp_path}/t2"), "w", suffix="bin") as fp1:
            fp1.write(b"baz")
        with open_path(pathtype(f"{tmp_path}/t2"), "r", suffix="bin") as fp1:
            assert fp1.read() == b"baz"
    assert len(record) == 0

    with warnings.catch_warnings(record=True) as record:
        warnings.simplefilter("always")
        open_path(pathtype(f"{tmp_path}/t2"), "r", suffix="bin", verbose=2).close()
    assert len(record) == 1

    # test that a warning is only raised when verbose = 2
    with warnings.catch_warnings(record=True) as record:
        warnings.simplefilter("always")
        open_path(pathtype(f"{tmp_path}/t1.bin"), "w", verbose=0).close()
        open_path(pathtype(f"{tmp_path}/t1.bin"), "w", verbose=1).close()
        open_path(pathtype(f"{tmp_path}/t1.bin"), "w", verbose=2).close()
    assert len(record) == 1

    with pytest.raises(FileNotFoundError):
        open_path(pathtype(f"{tmp_path}/missing"), "r")


def test_open_file(tmp_path):

    # path must much the type
    with pytest.raises(TypeError):
        open_path(123, None, None, None)

    p1 = tmp_path / "test1"
    fp = p1.open("wb")

    # provided path must match the mode
    with pytest.raises(ValueError):
        open_path(fp, "r")
    with pytest.raises(ValueError):
        open_path(fp, "randomstuff")

    # test identity
    _ = open_path(fp, "w")
    assert _ is not None
    assert fp is _

    # Can't use a closed path
    with pytest.raises(ValueError):
        fp.close()
        open_path(fp, "w")

    buff = io.BytesIO()
    assert buff.writable()
    _ = open_path(buff, "w")
    assert _ is buff
    with pytest.raises(ValueError):
        buff.close()
        open_path(buff, "w")
