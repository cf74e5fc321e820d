"""
Save util used to serialize policy parameters

Parameter checkpoints are binary files:

    magic (8 bytes) | format version (uint32) | header length (uint64) | JSON header | float64 payload

all integers and floats little-endian. The JSON header holds the parameter
layout, the policy architecture and free-form metadata.
"""
import functools
import io
import json
import pathlib
import struct
import warnings
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch as th

from simfree_soc.common.errors import CheckpointError
from simfree_soc.common.torch_layers import ParamLayout

MAGIC = b"SFSOCPRM"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sIQ")
_PAYLOAD_DTYPE = np.dtype("<f8")


@functools.singledispatch
def open_path(path: Union[str, pathlib.Path, io.BufferedIOBase], mode: str, verbose: int = 0, suffix: Optional[str] = None):
    """
    Opens a path for reading or writing with a preferred suffix and raises debug information.
    If the provided path is a derivative of io.BufferedIOBase it ensures that the file
    matches the provided mode, i.e. If the mode is read ("r", "read") it checks that the path is readable.
    If the mode is write ("w", "write") it checks that the file is writable.

    If the provided path is a string or a pathlib.Path, it ensures that it exists. If the mode is "read"
    it checks that it exists, if it doesn't exist it attempts to read path.suffix if a suffix is provided.
    If the mode is "write" and the path does not exist, it creates all the parent folders.

    :param path: the path to open.
    :param mode: how to open the file. "w"|"write" for writing, "r"|"read" for reading.
    :param verbose: Verbosity level, 0 means only warnings, 2 means debug information.
    :param suffix: The preferred suffix.
    :return:
    """
    if not isinstance(path, io.BufferedIOBase):
        raise TypeError("Path parameter has invalid type.", io.BufferedIOBase)
    if path.closed:
        raise ValueError("File stream is closed.")
    mode = mode.lower()
    try:
        mode = {"write": "w", "read": "r", "w": "w", "r": "r"}[mode]
    except KeyError as e:
        raise ValueError("Expected mode to be either 'w' or 'r'.") from e
    if ("w" == mode) and not path.writable() or ("r" == mode) and not path.readable():
        e1 = "writable" if "w" == mode else "readable"
        raise ValueError(f"Expected a {e1} file.")
    return path


@open_path.register(str)
def open_path_str(path: str, mode: str, verbose: int = 0, suffix: Optional[str] = None) -> io.BufferedIOBase:
    return open_path(pathlib.Path(path), mode, verbose, suffix)


@open_path.register(pathlib.Path)
def open_path_pathlib(path: pathlib.Path, mode: str, verbose: int = 0, suffix: Optional[str] = None) -> io.BufferedIOBase:
    """
    Open a path given by a pathlib.Path. If writing to the path, the parent folders are created.

    :param path: the path to open
    :param mode: "w" for writing, "r" for reading
    :param verbose: Verbosity level, 0 means only warnings, 2 means debug information.
    :param suffix: when reading fails, retry with this suffix appended;
        when writing a path without suffix, append it
    :return:
    """
    mode = {"write": "w", "read": "r"}.get(mode.lower(), mode.lower())
    if mode not in ("w", "r"):
        raise ValueError("Expected mode to be either 'w' or 'r'.")

    if mode == "r":
        try:
            return open_path(path.open("rb"), mode, verbose)
        except FileNotFoundError:
            if suffix is None or suffix == "":
                raise
            newpath = pathlib.Path(f"{path}.{suffix}")
            if verbose == 2:
                warnings.warn(f"Path '{path}' not found. Attempting {newpath}.")
            return open_path(newpath.open("rb"), mode, verbose)

    if path.suffix == "" and suffix is not None and suffix != "":
        path = pathlib.Path(f"{path}.{suffix}")
    if path.exists() and path.is_file() and verbose == 2:
        warnings.warn(f"Path '{path}' exists, will overwrite it.")
    path.parent.mkdir(exist_ok=True, parents=True)
    return open_path(path.open("wb"), mode, verbose)


def _as_payload(params: Union[th.Tensor, np.ndarray]) -> np.ndarray:
    if isinstance(params, th.Tensor):
        params = params.detach().cpu().numpy()
    return np.ascontiguousarray(params, dtype=_PAYLOAD_DTYPE)


def save_params(
    path: Union[str, pathlib.Path, io.BufferedIOBase],
    layout: ParamLayout,
    params: Union[th.Tensor, np.ndarray],
    architecture: Dict[str, Any],
    meta: Optional[Dict[str, Any]] = None,
    verbose: int = 0,
) -> None:
    """
    Write a parameter checkpoint.

    :param path: where to write (a path or an open binary file)
    :param layout: layout of the flat vector
    :param params: flat parameter vector
    :param architecture: architecture record of the policy
    :param meta: free-form JSON serializable metadata (iteration, seed, ...)
    :param verbose: Verbosity level, 0 means only warnings, 2 means debug information.
    """
    payload = _as_payload(params)
    if payload.shape != (layout.size,):
        raise ValueError(f"Parameter vector has shape {payload.shape}, the layout expects ({layout.size},)")
    header = json.dumps(
        {"layout": layout.to_list(), "size": layout.size, "architecture": architecture, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    file = open_path(path, "w", verbose=verbose, suffix="bin")
    try:
        file.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        file.write(header)
        file.write(payload.tobytes())
    finally:
        if not isinstance(path, io.BufferedIOBase):
            file.close()


def load_params(path: Union[str, pathlib.Path, io.BufferedIOBase], verbose: int = 0) -> Tuple[Dict[str, Any], np.ndarray]:
    """
    Read a parameter checkpoint.

    :param path: where to read from (a path or an open binary file)
    :param verbose: Verbosity level, 0 means only warnings, 2 means debug information.
    :return: the header (``layout``, ``size``, ``architecture``, ``meta``) and the flat vector
    """
    file = open_path(path, "r", verbose=verbose, suffix="bin")
    try:
        data = file.read()
    finally:
        if not isinstance(path, io.BufferedIOBase):
            file.close()

    if len(data) < _PREAMBLE.size:
        raise CheckpointError(f"Checkpoint {path} is truncated: {len(data)} bytes, no complete preamble")
    magic, version, header_length = _PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a parameter checkpoint (bad magic {magic!r})")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    header_end = _PREAMBLE.size + header_length
    if len(data) < header_end:
        raise CheckpointError(f"Checkpoint {path} is truncated inside its header")
    try:
        header = json.loads(data[_PREAMBLE.size : header_end].decode("utf-8"))
        layout = ParamLayout.from_list(header["layout"])
        size = int(header["size"])
    except (ValueError, KeyError, TypeError) as error:
        raise CheckpointError(f"Checkpoint {path} has a corrupted header: {error}") from error
    if size != layout.size:
        raise CheckpointError(f"Checkpoint {path} declares {size} parameters but its layout holds {layout.size}")
    expected = header_end + size * _PAYLOAD_DTYPE.itemsize
    if len(data) != expected:
        raise CheckpointError(f"Checkpoint {path} is truncated or corrupted: {len(data)} bytes, expected {expected}")
    params = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, count=size, offset=header_end).astype(np.float64)
    return header, params


def export_params_text(
    path: Union[str, pathlib.Path],
    layout: ParamLayout,
    params: Union[th.Tensor, np.ndarray],
) -> None:
    """
    Plain text dump of the parameters, one tensor per block, for debugging.

    :param path: output file
    :param layout: layout of the flat vector
    :param params: flat parameter vector
    """
    payload = _as_payload(params)
    path = pathlib.Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    with path.open("w") as file_handler:
        for name in layout:
            slot = layout[name]
            values = payload[slot.slice].reshape(slot.shape)
            file_handler.write(f"# {name} shape={list(slot.shape)} offset={slot.offset}\n")
            for row in np.atleast_2d(values):
                file_handler.write(" ".join(repr(float(value)) for value in row) + "\n")
