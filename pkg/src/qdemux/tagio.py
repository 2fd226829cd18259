"""Binary time-tag files and CSV interchange.

Layout (little-endian, densely packed)::

    header   16 octets: "TTAG", version u16, tick_ps u32, channel_count u16, 4 zero octets
    record   12 octets: ticks u64, channel u8, flags u8, reserved u16

Records are globally nondecreasing in ticks and strictly increasing within a
channel. Flag bit 0 marks a laser-trigger record.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterator, NamedTuple

import numpy as np

from .errors import CorruptionError, CsvParseError, OrderingError, TagFormatError, TruncationError

MAGIC = b"TTAG"
VERSION = 1
DEFAULT_TICK_PS = 81
HEADER = struct.Struct("<4sHIH4s")
HEADER_SIZE = HEADER.size
RECORD_DTYPE = np.dtype([("ticks", "<u8"), ("channel", "u1"), ("flags", "u1"), ("reserved", "<u2")])
RECORD_SIZE = RECORD_DTYPE.itemsize
FLAG_TRIGGER = 1
BLOCK_RECORDS = 1 << 16

assert HEADER_SIZE == 16 and RECORD_SIZE == 12


@dataclass(frozen=True)
class TagFileHeader:
    tick_ps: int = DEFAULT_TICK_PS
    channel_count: int = 1
    version: int = VERSION

    def __post_init__(self):
        if self.version != VERSION:
            raise TagFormatError(f"unsupported version {self.version}")
        if not 1 <= self.tick_ps < 2**32:
            raise TagFormatError(f"tick_ps out of range: {self.tick_ps}")
        if not 1 <= self.channel_count < 2**16:
            raise TagFormatError(f"channel_count out of range: {self.channel_count}")

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.tick_ps, self.channel_count, b"\0" * 4)

    @classmethod
    def unpack(cls, raw: bytes) -> "TagFileHeader":
        if len(raw) < HEADER_SIZE:
            raise TruncationError(0, f"header truncated to {len(raw)} octets")
        magic, version, tick_ps, channels, _ = HEADER.unpack(raw)
        if magic != MAGIC:
            raise TagFormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise TagFormatError(f"unsupported version {version}")
        return cls(tick_ps=tick_ps, channel_count=channels, version=version)


class TagRecord(NamedTuple):
    ticks: int
    channel: int
    flags: int = 0


def to_array(records) -> np.ndarray:
    """Structured record array from an array or an iterable of records."""
    if isinstance(records, np.ndarray) and records.dtype.names:
        out = np.zeros(records.size, RECORD_DTYPE)
        for name in ("ticks", "channel", "flags"):
            out[name] = records[name]
        return out
    rows = []
    for i, r in enumerate(records):
        t, c, f = int(r[0]), int(r[1]), int(r[2]) if len(r) > 2 else 0
        if not (0 <= t < 2**64 and 0 <= c < 256 and 0 <= f < 256):
            raise OrderingError(i, f"field out of range in {tuple(r)!r}")
        rows.append((t, c, f, 0))
    return np.array(rows, dtype=RECORD_DTYPE)


def records_from_channels(per_channel) -> np.ndarray:
    """Merge per-channel sorted tick arrays into one globally ordered record array."""
    parts = []
    for ch, ticks in enumerate(per_channel):
        arr = np.zeros(len(ticks), RECORD_DTYPE)
        arr["ticks"] = ticks
        arr["channel"] = ch
        parts.append(arr)
    rec = np.concatenate(parts) if parts else np.zeros(0, RECORD_DTYPE)
    return rec[np.lexsort((rec["channel"], rec["ticks"]))]


def channel_ticks(records: np.ndarray, channel: int) -> np.ndarray:
    """Photon ticks of one channel as int64, trigger records excluded."""
    sel = records[(records["channel"] == channel) & ((records["flags"] & FLAG_TRIGGER) == 0)]
    return sel["ticks"].astype(np.int64)


class _OrderCheck:
    """Ordering invariants checked block by block, state carried across blocks."""

    def __init__(self, channel_count: int):
        self.channel_count = channel_count
        self.last = np.zeros(256, np.uint64)
        self.seen = np.zeros(256, bool)
        self.last_global = None

    def first_violation(self, block: np.ndarray, base: int):
        """``(index, reason)`` of the first violation in ``block``, or None."""
        if block.size == 0:
            return None
        t = block["ticks"]
        ch = block["channel"].astype(np.intp)
        bad = []
        over = np.flatnonzero(ch >= self.channel_count)
        if over.size:
            bad.append((int(over[0]), f"channel {int(ch[over[0]])} >= channel_count {self.channel_count}"))
        down = np.flatnonzero(t[1:] < t[:-1]) + 1
        if self.last_global is not None and t[0] < self.last_global:
            down = np.concatenate(([0], down))
        if down.size:
            bad.append((int(down[0]), "ticks decrease"))
        # stable sort by channel keeps each channel's records in file order
        order = np.argsort(ch, kind="stable")
        cs, ts = ch[order], t[order]
        same = np.zeros(cs.size, bool)
        same[1:] = cs[1:] == cs[:-1]
        rep = np.zeros(cs.size, bool)
        rep[1:] = same[1:] & (ts[1:] <= ts[:-1])
        first = ~same
        rep[first] = self.seen[cs[first]] & (ts[first] <= self.last[cs[first]])
        if rep.any():
            bad.append((int(order[rep].min()), "per-channel ticks not strictly increasing"))
        if bad:
            idx, reason = min(bad)
            return base + idx, reason
        self.last_global = t[-1]
        last_of = np.ones(cs.size, bool)
        last_of[:-1] = cs[1:] != cs[:-1]
        self.last[cs[last_of]] = ts[last_of]
        self.seen[cs[last_of]] = True
        return None


def write_tags(header: TagFileHeader, records, sink: BinaryIO) -> int:
    """Write header and records; returns the octet count.

    Nothing is written when the records violate the ordering invariants.
    """
    arr = to_array(records)
    check = _OrderCheck(header.channel_count)
    bad = check.first_violation(arr, 0)
    if bad is not None:
        raise OrderingError(*bad)
    payload = header.pack() + arr.tobytes()
    sink.write(payload)
    return len(payload)


def write_tag_file(path, header: TagFileHeader, records) -> int:
    with open(path, "wb") as fh:
        return write_tags(header, records, fh)


class TagReader:
    """Streaming reader; the header is validated on construction.

    ``blocks()`` yields structured arrays of at most ``block_records`` rows;
    iterating the reader yields ``TagRecord`` tuples. Memory use is bounded by
    the block size.
    """

    def __init__(self, source: BinaryIO, block_records: int = BLOCK_RECORDS):
        self._src = source
        self._block = block_records
        self.header = TagFileHeader.unpack(source.read(HEADER_SIZE))
        self._started = False

    def blocks(self) -> Iterator[np.ndarray]:
        if self._started:
            raise TagFormatError("tag stream already consumed")
        self._started = True
        state = _OrderCheck(self.header.channel_count)
        index = 0
        while True:
            raw = self._src.read(self._block * RECORD_SIZE)
            if not raw:
                return
            whole = len(raw) // RECORD_SIZE
            block = np.frombuffer(raw[: whole * RECORD_SIZE], RECORD_DTYPE)
            bad = state.first_violation(block, index)
            if bad is not None:
                raise CorruptionError(bad[0], f"record {bad[0]}: {bad[1]}")
            if whole:
                yield block
            index += whole
            if len(raw) % RECORD_SIZE:
                raise TruncationError(HEADER_SIZE + RECORD_SIZE * index)
            if len(raw) < self._block * RECORD_SIZE:
                return

    def __iter__(self) -> Iterator[TagRecord]:
        for block in self.blocks():
            for t, c, f in zip(block["ticks"].tolist(), block["channel"].tolist(), block["flags"].tolist()):
                yield TagRecord(t, c, f)

    def read_all(self) -> np.ndarray:
        parts = list(self.blocks())
        return np.concatenate(parts) if parts else np.zeros(0, RECORD_DTYPE)


def read_tags(source: BinaryIO) -> tuple[TagFileHeader, Iterator[TagRecord]]:
    reader = TagReader(source)
    return reader.header, iter(reader)


def read_tag_file(path) -> tuple[TagFileHeader, np.ndarray]:
    with open(path, "rb") as fh:
        reader = TagReader(fh)
        return reader.header, reader.read_all()


# --------------------------------------------------------------------------
# CSV

CSV_HEADER = ("ticks", "channel", "flags")


def export_csv(records, sink) -> None:
    arr = to_array(records)
    sink.write("ticks,channel,flags\n")
    for t, c, f in zip(arr["ticks"].tolist(), arr["channel"].tolist(), arr["flags"].tolist()):
        sink.write(f"{t},{c},{f}\n")


def import_csv(source) -> list[TagRecord]:
    """Parse ``ticks,channel,flags`` rows; line numbers in errors count the header as 1."""
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    head = next(reader, None)
    if head is None or tuple(h.strip() for h in head) != CSV_HEADER:
        raise CsvParseError(1, "expected header ticks,channel,flags")
    out = []
    limits = (2**64, 2**8, 2**8)
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 3:
            raise CsvParseError(line, f"expected 3 fields, got {len(row)}")
        try:
            vals = [int(x.strip(), 10) for x in row]
        except ValueError:
            raise CsvParseError(line, f"non-integer field in {row!r}") from None
        for v, lim, name in zip(vals, limits, CSV_HEADER):
            if not 0 <= v < lim:
                raise CsvParseError(line, f"{name} out of range: {v}")
        out.append(TagRecord(*vals))
    return out
