"""Time-tag data model, unit conversions, RNG contract and time-tag file I/O.

Units used throughout the package:

* timestamps: integer picoseconds
* fit times and lifetimes: nanoseconds (float)
* intensities: kW/cm^2, rates: counts/s
* energies: meV, areas: Angstrom^2, pressures: Pa, temperatures: K

Binary time-tag layout (all little-endian)::

    offset  size  field
    0       8     magic  b"PHSTTAG\\0"
    8       2     u16 format version (currently 1)
    10      2     u16 record size in bytes (16)
    12      4     u32 length L of the metadata blob
    16      L     UTF-8 JSON encoding of AcquisitionMeta
    16+L    16*n  records: u8 channel, 7 reserved zero bytes, u64 time_ps

The record count is implied by the file size.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoFailure, MalformedRecord, UnknownChannel, UnsortedStream

PS_PER_NS = 1000
PS_PER_US = 1_000_000
PS_PER_S = 1_000_000_000_000

MAGIC = b"PHSTTAG\x00"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<8sHHI")
RECORD_DTYPE = np.dtype([("channel", "u1"), ("reserved", "V7"), ("time", "<u8")])
RECORD_SIZE = RECORD_DTYPE.itemsize
HBT_CHANNELS = (0, 1)

RNG_NAME = "numpy.PCG64 via SeedSequence"


def ns_to_ps(t_ns):
    """Nanoseconds to picoseconds (float); exact for integer-ps values."""
    return np.asarray(t_ns, dtype=float) * PS_PER_NS


def ps_to_ns(t_ps):
    return np.asarray(t_ps, dtype=float) / PS_PER_NS


def s_to_ps(t_s):
    return np.asarray(t_s, dtype=float) * PS_PER_S


def ps_to_s(t_ps):
    return np.asarray(t_ps, dtype=float) / PS_PER_S


def celsius_to_kelvin(t_c):
    return np.asarray(t_c, dtype=float) + 273.15


def kelvin_to_celsius(t_k):
    return np.asarray(t_k, dtype=float) - 273.15


def make_rng(seed, *path):
    """Return the generator for sub-stream ``path`` of ``seed``.

    Sub-streams are addressed by a tuple of non-negative integers that becomes
    the SeedSequence spawn key, so any stage can be regenerated on its own.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass
class AcquisitionMeta:
    duration: float = 0.0  # s
    bin_width: float = 106.9  # ps
    pulse_period: float = 0.0  # ps, 0 for CW
    seed: int = 0
    notes: str = ""

    def __post_init__(self):
        if not self.bin_width > 0:
            raise MalformedRecord(f"bin_width must be positive, got {self.bin_width}")
        if self.pulse_period != 0 and not self.pulse_period > self.bin_width:
            raise MalformedRecord("pulse_period must be 0 (CW) or larger than bin_width")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("duration", "bin_width", "pulse_period", "seed", "notes") if k in d}
        return cls(**known)


@dataclass(frozen=True)
class TimeTagStream:
    """Sorted detector clicks: parallel ``channels`` (uint8) and ``times`` (int64 ps)."""

    channels: np.ndarray
    times: np.ndarray
    meta: AcquisitionMeta = field(default_factory=AcquisitionMeta)

    def __post_init__(self):
        ch = np.ascontiguousarray(self.channels, dtype=np.uint8)
        t = np.ascontiguousarray(self.times, dtype=np.int64)
        if ch.shape != t.shape or ch.ndim != 1:
            raise MalformedRecord("channels and times must be 1-D arrays of equal length")
        ch.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "times", t)

    def __len__(self):
        return len(self.times)

    def validate(self):
        validate_records(self.channels, self.times)
        return self

    def channel_times(self, channel):
        return self.times[self.channels == channel]

    @classmethod
    def from_channel_times(cls, a, b, meta=None):
        """Merge channel-0 times ``a`` and channel-1 times ``b`` into one stream."""
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        times = np.concatenate([a, b])
        channels = np.concatenate([np.zeros(len(a), np.uint8), np.ones(len(b), np.uint8)])
        order = np.lexsort((channels, times))
        return cls(channels[order], times[order], meta or AcquisitionMeta())

    def __eq__(self, other):
        if not isinstance(other, TimeTagStream):
            return NotImplemented
        return (
            np.array_equal(self.channels, other.channels)
            and np.array_equal(self.times, other.times)
            and self.meta == other.meta
        )

    __hash__ = None


def validate_records(channels, times):
    channels = np.asarray(channels)
    times = np.asarray(times)
    bad = np.flatnonzero(~np.isin(channels, HBT_CHANNELS))
    if bad.size:
        i = int(bad[0])
        raise UnknownChannel(f"record {i}: channel {int(channels[i])} not in {HBT_CHANNELS}")
    if times.size and times.min() < 0:
        i = int(np.flatnonzero(times < 0)[0])
        raise MalformedRecord(f"record {i}: negative time {int(times[i])}")
    down = np.flatnonzero(np.diff(times) < 0)
    if down.size:
        i = int(down[0]) + 1
        raise UnsortedStream(
            f"record {i}: time {int(times[i])} ps precedes record {i - 1} at {int(times[i - 1])} ps",
            index=i,
        )


def _encode_binary(stream):
    blob = json.dumps(stream.meta.to_dict(), sort_keys=True).encode("utf-8")
    head = PREAMBLE.pack(MAGIC, FORMAT_VERSION, RECORD_SIZE, len(blob))
    rec = np.zeros(len(stream), dtype=RECORD_DTYPE)
    rec["channel"] = stream.channels
    rec["time"] = stream.times.astype(np.uint64)
    return head + blob + rec.tobytes()


def binary_header_size(meta):
    return PREAMBLE.size + len(json.dumps(meta.to_dict(), sort_keys=True).encode("utf-8"))


def _decode_binary(buf):
    if len(buf) == 0:
        return np.empty(0, np.uint8), np.empty(0, np.int64), AcquisitionMeta()
    if len(buf) < PREAMBLE.size:
        raise MalformedRecord("file shorter than the 16-byte header")
    magic, version, rec_size, blob_len = PREAMBLE.unpack_from(buf, 0)
    if magic != MAGIC:
        raise MalformedRecord(f"bad magic {magic!r}")
    if version != FORMAT_VERSION or rec_size != RECORD_SIZE:
        raise MalformedRecord(f"unsupported version {version} / record size {rec_size}")
    start = PREAMBLE.size + blob_len
    if start > len(buf):
        raise MalformedRecord("metadata blob runs past end of file")
    try:
        meta = AcquisitionMeta.from_dict(json.loads(buf[PREAMBLE.size:start].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise MalformedRecord(f"unreadable metadata blob: {exc}") from exc
    body = len(buf) - start
    if body % RECORD_SIZE:
        raise MalformedRecord(
            f"record {body // RECORD_SIZE}: truncated ({body % RECORD_SIZE} trailing bytes)"
        )
    rec = np.frombuffer(buf, dtype=RECORD_DTYPE, offset=start)
    t = rec["time"]
    if t.size and t.max() > np.iinfo(np.int64).max:
        i = int(np.flatnonzero(t > np.iinfo(np.int64).max)[0])
        raise MalformedRecord(f"record {i}: time exceeds int64 range")
    return rec["channel"].copy(), t.astype(np.int64), meta


def _decode_csv(text):
    if not text.strip():
        return np.empty(0, np.uint8), np.empty(0, np.int64), AcquisitionMeta()
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if [h.strip() for h in header] != ["channel", "time_ps"]:
        raise MalformedRecord(f"expected header 'channel,time_ps', got {','.join(header)!r}")
    ch, t = [], []
    for i, row in enumerate(reader):
        if not row:
            continue
        try:
            c, tt = int(row[0]), int(row[1])
        except (ValueError, IndexError) as exc:
            raise MalformedRecord(f"record {i}: cannot parse {row!r}") from exc
        if len(row) != 2:
            raise MalformedRecord(f"record {i}: expected 2 fields, got {len(row)}")
        if not 0 <= c < 256:
            raise UnknownChannel(f"record {i}: channel {c} not in {HBT_CHANNELS}")
        ch.append(c)
        t.append(tt)
    return np.array(ch, np.uint8), np.array(t, np.int64), AcquisitionMeta()


def read_timetags(path, format="binary"):
    """Read and validate a time-tag file written in ``format`` ("binary" or "csv")."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if format == "binary":
        ch, t, meta = _decode_binary(raw)
    elif format == "csv":
        ch, t, meta = _decode_csv(raw.decode("utf-8"))
    else:
        raise ValueError(f"unknown time-tag format {format!r}")
    validate_records(ch, t)
    return TimeTagStream(ch, t, meta)


def write_timetags(stream, path, format="binary"):
    stream.validate()
    path = Path(path)
    try:
        if format == "binary":
            path.write_bytes(_encode_binary(stream))
        elif format == "csv":
            with open(path, "w", newline="") as fh:
                fh.write("channel,time_ps\n")
                buf = io.StringIO()
                np.savetxt(buf, np.column_stack([stream.channels, stream.times]), fmt="%d", delimiter=",")
                fh.write(buf.getvalue())
        else:
            raise ValueError(f"unknown time-tag format {format!r}")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_timetag_chunks(chunks, path, meta, format="binary"):
    """Write consecutive time-ordered chunks as one file without holding them all.

    Returns the number of records written. Produces the same bytes as
    :func:`write_timetags` on the concatenated stream with ``meta``.
    """
    path = Path(path)
    n = 0
    last = None
    try:
        with open(path, "wb") as fh:
            if format == "binary":
                blob = json.dumps(meta.to_dict(), sort_keys=True).encode("utf-8")
                fh.write(PREAMBLE.pack(MAGIC, FORMAT_VERSION, RECORD_SIZE, len(blob)) + blob)
            elif format == "csv":
                fh.write(b"channel,time_ps\n")
            else:
                raise ValueError(f"unknown time-tag format {format!r}")
            for chunk in chunks:
                chunk.validate()
                if len(chunk) and last is not None and chunk.times[0] < last:
                    raise UnsortedStream(f"record {n}: chunk starts before previous chunk ends", index=n)
                if format == "binary":
                    rec = np.zeros(len(chunk), dtype=RECORD_DTYPE)
                    rec["channel"] = chunk.channels
                    rec["time"] = chunk.times.astype(np.uint64)
                    fh.write(rec.tobytes())
                elif len(chunk):
                    buf = io.StringIO()
                    np.savetxt(buf, np.column_stack([chunk.channels, chunk.times]), fmt="%d", delimiter=",")
                    fh.write(buf.getvalue().encode("ascii"))
                if len(chunk):
                    last = int(chunk.times[-1])
                n += len(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
    return n


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, os.PathLike):
        return os.fspath(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_json(path):
    """Load a JSON config, dropping ``_comment``-style keys (leading underscore)."""
    with open(path) as fh:
        return _strip_comments(json.load(fh))


def _strip_comments(obj):
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj
