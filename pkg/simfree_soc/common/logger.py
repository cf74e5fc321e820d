import datetime
import json
import os
import sys
import tempfile
import warnings
from collections import defaultdict
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas
import torch as th

try:
    from torch.utils.tensorboard import SummaryWriter
except ImportError:
    SummaryWriter = None


DEBUG = 10
INFO = 20
WARN = 30
ERROR = 40
DISABLED = 50

_LEVEL_PREFIX = {WARN: "WARN:", ERROR: "ERROR:"}

# Formats that write into the logging folder
FILE_FORMATS = ("log", "json", "csv", "tensorboard")

Excluded = Optional[Union[str, Tuple[str, ...]]]


class FormatUnsupportedError(NotImplementedError):
    """
    Raised when a value cannot be written by some of the requested formats.

    :param unsupported_formats: the formats that reject the value, for instance ``["csv"]``
    :param value_description: what kind of value was logged
    """

    def __init__(self, unsupported_formats: Sequence[str], value_description: str):
        if len(unsupported_formats) > 1:
            format_str = f"formats {', '.join(unsupported_formats)} are"
        else:
            format_str = f"format {unsupported_formats[0]} is"
        super().__init__(
            f"The {format_str} not supported for the {value_description} value logged.\n"
            f"Pass `exclude` to `Logger.record` to skip these formats."
        )


def _is_array(value: Any) -> bool:
    if isinstance(value, th.Tensor):
        return value.numel() != 1
    if isinstance(value, np.ndarray):
        return value.size != 1
    return False


def _as_scalar(value: Any) -> Any:
    if isinstance(value, (th.Tensor, np.ndarray, np.generic)):
        return value.item()
    return value


def _is_excluded(key_excluded: Dict[str, Excluded], key: str, _format: str) -> bool:
    excluded = key_excluded.get(key)
    return excluded is not None and _format in excluded


class KVWriter:
    """
    Writes one row of key/value pairs per ``Logger.dump``.
    """

    def write(self, key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], step: int = 0) -> None:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SeqWriter:
    """
    Writes free text messages.
    """

    def write_sequence(self, sequence: List) -> None:
        raise NotImplementedError


class HumanOutputFormat(KVWriter, SeqWriter):
    """
    ASCII table of the metrics, one table per dump, keys in recording order.
    Used for the ``stdout`` and ``log`` formats.

    :param filename_or_file: path of the text file, or an open stream
    :param max_length: keys and values longer than this are truncated
    """

    def __init__(self, filename_or_file: Union[str, TextIO], max_length: int = 36):
        self.max_length = max_length
        if isinstance(filename_or_file, str):
            self.file = open(filename_or_file, "wt")
            self.own_file = True
        else:
            if not hasattr(filename_or_file, "write"):
                raise ValueError(f"Expected a file or a path, got {filename_or_file}")
            self.file = filename_or_file
            self.own_file = False

    def _format_value(self, value: Any) -> str:
        value = _as_scalar(value)
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:<10.4g}"
        return str(value)

    def write(self, key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], step: int = 0) -> None:
        key2str = {}
        for key, value in key_values.items():
            if _is_excluded(key_excluded, key, "stdout") or _is_excluded(key_excluded, key, "log"):
                continue
            if _is_array(value):
                raise FormatUnsupportedError(["stdout", "log"], "array")
            truncated_key = self._truncate(key)
            if truncated_key in key2str:
                raise ValueError(
                    f"Key '{key}' truncated to '{truncated_key}' that already exists. Consider increasing `max_length`."
                )
            key2str[truncated_key] = self._truncate(self._format_value(value))

        if not key2str:
            warnings.warn("Tried to write empty key-value dict")
            return

        key_width = max(map(len, key2str.keys()))
        val_width = max(map(len, key2str.values()))
        dashes = "-" * (key_width + val_width + 7)
        lines = [dashes]
        lines += [f"| {key:<{key_width}} | {value:<{val_width}} |" for key, value in key2str.items()]
        lines.append(dashes)
        self.file.write("\n".join(lines) + "\n")
        self.file.flush()

    def _truncate(self, string: str) -> str:
        if len(string) > self.max_length:
            string = string[: self.max_length - 3] + "..."
        return string

    def write_sequence(self, sequence: List) -> None:
        self.file.write(" ".join(sequence) + "\n")
        self.file.flush()

    def close(self) -> None:
        if self.own_file:
            self.file.close()


def filter_excluded_keys(key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], _format: str) -> Dict[str, Any]:
    """
    Drop the keys excluded from ``_format``.

    :param key_values: one metrics row
    :param key_excluded: formats excluded per key
    :param _format: the format being written
    :return: the remaining key/value pairs
    """
    return {key: value for key, value in key_values.items() if not _is_excluded(key_excluded, key, _format)}


class JSONOutputFormat(KVWriter):
    """
    JSON lines: one object per dump.

    :param filename: path of the file
    """

    def __init__(self, filename: str):
        self.file = open(filename, "wt")

    def write(self, key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], step: int = 0) -> None:
        def to_json(value: Any) -> Any:
            if isinstance(value, th.Tensor):
                value = value.detach().cpu().numpy()
            if _is_array(value):
                return value.tolist()
            return _as_scalar(value)

        row = {key: to_json(value) for key, value in filter_excluded_keys(key_values, key_excluded, "json").items()}
        self.file.write(json.dumps(row) + "\n")
        self.file.flush()

    def close(self) -> None:
        self.file.close()


class CSVOutputFormat(KVWriter):
    """
    CSV file with the columns in the order the keys were first recorded.
    Missing values are empty cells; floats are written with ``repr`` so they read back exactly.
    When a new key shows up, the header is rewritten and earlier rows are padded.

    :param filename: path of the file
    """

    def __init__(self, filename: str):
        self.file = open(filename, "w+t")
        self.keys: List[str] = []
        self.separator = ","
        self.quotechar = '"'

    def _add_columns(self, extra_keys: List[str]) -> None:
        self.keys.extend(extra_keys)
        self.file.seek(0)
        rows = self.file.read().splitlines()[1:]
        self.file.seek(0)
        self.file.truncate()
        padding = self.separator * len(extra_keys)
        self.file.write("\n".join([self.separator.join(self.keys)] + [row + padding for row in rows]) + "\n")

    def _cell(self, value: Any) -> str:
        if _is_array(value):
            raise FormatUnsupportedError(["csv"], "array")
        value = _as_scalar(value)
        if value is None:
            return ""
        if isinstance(value, str):
            return self.quotechar + value.replace(self.quotechar, self.quotechar * 2) + self.quotechar
        if isinstance(value, bool):
            return str(int(value))
        if isinstance(value, float):
            return repr(value)
        return str(value)

    def write(self, key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], step: int = 0) -> None:
        key_values = filter_excluded_keys(key_values, key_excluded, "csv")
        extra_keys = [key for key in key_values if key not in self.keys]
        if extra_keys:
            self._add_columns(extra_keys)
        cells = [self._cell(key_values.get(key)) for key in self.keys]
        self.file.write(self.separator.join(cells) + "\n")
        self.file.flush()

    def close(self) -> None:
        self.file.close()


class TensorBoardOutputFormat(KVWriter):
    """
    Scalars, histograms for array values and text for strings, indexed by iteration.

    :param folder: the event file folder
    """

    def __init__(self, folder: str):
        if SummaryWriter is None:
            raise ImportError("tensorboard is not installed, you can use `pip install tensorboard` to do so")
        self.writer = SummaryWriter(log_dir=folder)

    def write(self, key_values: Dict[str, Any], key_excluded: Dict[str, Excluded], step: int = 0) -> None:
        for key, value in filter_excluded_keys(key_values, key_excluded, "tensorboard").items():
            if value is None:
                continue
            if _is_array(value):
                self.writer.add_histogram(key, value, step)
            elif isinstance(value, str):
                self.writer.add_text(key, value, step)
            else:
                self.writer.add_scalar(key, _as_scalar(value), step)
        self.writer.flush()

    def close(self) -> None:
        if self.writer:
            self.writer.close()
            self.writer = None


def make_output_format(_format: str, log_dir: Optional[str], log_suffix: str = "") -> KVWriter:
    """
    Build the writer of one format.

    :param _format: one of 'stdout', 'log', 'json', 'csv' or 'tensorboard'
    :param log_dir: folder of the file formats, created when missing
    :param log_suffix: appended to the file names
    :return: the writer
    """
    if _format == "stdout":
        return HumanOutputFormat(sys.stdout)
    if log_dir is None:
        raise ValueError(f"The '{_format}' format needs a logging directory")
    os.makedirs(log_dir, exist_ok=True)
    if _format == "log":
        return HumanOutputFormat(os.path.join(log_dir, f"log{log_suffix}.txt"))
    elif _format == "json":
        return JSONOutputFormat(os.path.join(log_dir, f"metrics{log_suffix}.json"))
    elif _format == "csv":
        return CSVOutputFormat(os.path.join(log_dir, f"metrics{log_suffix}.csv"))
    elif _format == "tensorboard":
        return TensorBoardOutputFormat(log_dir)
    else:
        raise ValueError(f"Unknown format specified: {_format}")


class Logger:
    """
    Collects the metrics of one iteration and writes them to every output format on ``dump``.
    Text messages go to the formats that accept free text (``stdout`` and ``log``).

    :param folder: the logging folder, None when nothing is written to disk
    :param output_formats: the writers
    """

    def __init__(self, folder: Optional[str], output_formats: List[KVWriter]):
        self.name_to_value = defaultdict(float)
        self.name_to_count = defaultdict(int)
        self.name_to_excluded = defaultdict(str)
        self.level = INFO
        self.dir = folder
        self.output_formats = output_formats

    def record(self, key: str, value: Any, exclude: Excluded = None) -> None:
        """
        Set ``key`` for the current row; the last value wins.

        :param key: metric name
        :param value: scalar, string, None (an empty cell) or an array (tensorboard and json only)
        :param exclude: formats that skip this key
        """
        self.name_to_value[key] = value
        self.name_to_excluded[key] = exclude

    def record_dict(self, key_values: Dict[str, Any], exclude: Excluded = None) -> None:
        """Record several keys at once, in the order of ``key_values``."""
        for key, value in key_values.items():
            self.record(key, value, exclude)

    def record_mean(self, key: str, value: Any, exclude: Excluded = None) -> None:
        """
        Like ``record``, but repeated calls before a dump are averaged.

        :param key: metric name
        :param value: scalar value, None resets the key to an empty cell
        :param exclude: formats that skip this key
        """
        if value is None:
            self.name_to_value[key] = None
            return
        old_val, count = self.name_to_value[key], self.name_to_count[key]
        self.name_to_value[key] = old_val * count / (count + 1) + value / (count + 1)
        self.name_to_count[key] = count + 1
        self.name_to_excluded[key] = exclude

    def dump(self, step: int = 0) -> None:
        """
        Write the current row to all formats and start a new one.

        :param step: the iteration, used by tensorboard
        """
        if self.level == DISABLED:
            return
        for _format in self.output_formats:
            _format.write(self.name_to_value, self.name_to_excluded, step)

        self.name_to_value.clear()
        self.name_to_count.clear()
        self.name_to_excluded.clear()

    def log(self, *args, level: int = INFO) -> None:
        """
        Write ``args`` separated by spaces if ``level`` passes the threshold.

        :param args: message parts
        :param level: DEBUG=10, INFO=20, WARN=30, ERROR=40
        """
        if self.level <= level:
            prefix = _LEVEL_PREFIX.get(level)
            self._do_log(((prefix,) if prefix else ()) + args)

    def debug(self, *args) -> None:
        self.log(*args, level=DEBUG)

    def info(self, *args) -> None:
        self.log(*args, level=INFO)

    def warn(self, *args) -> None:
        self.log(*args, level=WARN)

    def error(self, *args) -> None:
        self.log(*args, level=ERROR)

    def set_level(self, level: int) -> None:
        """
        Set the threshold of text messages; DISABLED also silences ``dump``.

        :param level: DEBUG=10, INFO=20, WARN=30, ERROR=40, DISABLED=50
        """
        self.level = level

    def get_dir(self) -> Optional[str]:
        """The logging folder, None when nothing is written to disk."""
        return self.dir

    def close(self) -> None:
        for _format in self.output_formats:
            _format.close()

    def _do_log(self, args) -> None:
        for _format in self.output_formats:
            if isinstance(_format, SeqWriter):
                _format.write_sequence(list(map(str, args)))


def configure(folder: Optional[str] = None, format_strings: Optional[List[str]] = None) -> Logger:
    """
    Build a logger.

    :param folder: the logging folder
        (if None, $SIMFREE_LOGDIR, if still None, tempdir/simfree-[date & time]).
        Only used when a file format is requested.
    :param format_strings: the output formats
        (if None, $SIMFREE_LOG_FORMAT, if still None, ['stdout', 'log', 'csv'])
    :return: the logger
    """
    if format_strings is None:
        format_strings = os.getenv("SIMFREE_LOG_FORMAT", "stdout,log,csv").split(",")
    format_strings = list(filter(None, format_strings))

    if any(_format in FILE_FORMATS for _format in format_strings):
        if folder is None:
            folder = os.getenv("SIMFREE_LOGDIR")
        if folder is None:
            folder = os.path.join(tempfile.gettempdir(), datetime.datetime.now().strftime("simfree-%Y-%m-%d-%H-%M-%S-%f"))
        os.makedirs(folder, exist_ok=True)

    logger = Logger(folder=folder, output_formats=[make_output_format(f, folder) for f in format_strings])
    if any(_format in FILE_FORMATS for _format in format_strings):
        logger.log(f"Logging to {folder}")
    return logger


def read_json(filename: str) -> pandas.DataFrame:
    """
    Load a ``metrics.json`` file.

    :param filename: path of the file
    :return: one row per dump
    """
    with open(filename) as file_handler:
        rows = [json.loads(line) for line in file_handler if line.strip()]
    if not rows:
        raise pandas.errors.EmptyDataError(f"No rows in {filename}")
    return pandas.DataFrame(rows)


def read_csv(filename: str) -> pandas.DataFrame:
    """
    Load a ``metrics.csv`` file.

    :param filename: path of the file
    :return: one row per dump, empty cells as NaN
    """
    return pandas.read_csv(filename, index_col=None, comment="#")
