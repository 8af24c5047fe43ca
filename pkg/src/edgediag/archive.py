"""Binary weight archives for the cloud-to-edge handoff.

Single-file container for a named tensor collection plus a manifest,
with a trailing CRC-32. Everything is little-endian and the writer is
fully deterministic: identical inputs produce identical bytes, and files
are written atomically (temp file + rename). The complete byte layout is
documented in FORMAT.md at the repository root.

    magic           8 bytes  b"EDGEWTS1"
    version         u32      currently 1
    manifest_len    u32      length of the UTF-8 manifest JSON
    manifest        bytes    canonical JSON (sorted keys)
    entry_count     u32
    entries         repeated: name_len u16, name UTF-8, ndim u8,
                    dims u32 each, payload float32 little-endian
    crc32           u32      IEEE CRC-32 over every preceding byte

Entries whose names end in ``.running_mean``/``.running_var`` load as
non-trainable state; everything else loads trainable. Loading checks
magic, version, CRC and (when an expectation is given) the manifest's
model kind and config hash, each failure with its own error type.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import ParamStore
from .tensor import Tensor

__all__ = [
    "MAGIC",
    "VERSION",
    "Manifest",
    "ArchiveError",
    "BadMagicError",
    "VersionError",
    "CrcError",
    "ManifestMismatchError",
    "TruncatedError",
    "save_archive",
    "load_archive",
    "load_subset",
    "read_manifest",
]

MAGIC = b"EDGEWTS1"
VERSION = 1

_NONTRAINABLE_SUFFIXES = (".running_mean", ".running_var")


class ArchiveError(Exception):
    """Base for every weight-archive failure."""


class BadMagicError(ArchiveError):
    pass


class VersionError(ArchiveError):
    pass


class CrcError(ArchiveError):
    pass


class ManifestMismatchError(ArchiveError):
    pass


class TruncatedError(ArchiveError):
    pass


@dataclass
class Manifest:
    """Provenance carried with a weight archive."""

    kind: str = ""
    config_hash: str = ""
    seed: int = 0
    source_condition: int = 0
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "config_hash": self.config_hash,
                "seed": self.seed,
                "source_condition": self.source_condition,
                "metadata": self.metadata,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        raw = json.loads(text)
        return cls(
            kind=raw.get("kind", ""),
            config_hash=raw.get("config_hash", ""),
            seed=int(raw.get("seed", 0)),
            source_condition=int(raw.get("source_condition", 0)),
            metadata=raw.get("metadata", {}),
        )

    def check_compatible(self, other: "Manifest") -> None:
        """Refuse a load when the structural identity does not match."""
        if self.kind != other.kind:
            raise ManifestMismatchError(
                f"archive holds a {other.kind!r} model, expected {self.kind!r}"
            )
        if self.config_hash != other.config_hash:
            raise ManifestMismatchError(
                f"config hash mismatch: expected {self.config_hash}, "
                f"archive has {other.config_hash}"
            )


def _encode(store: ParamStore, manifest: Manifest) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    mjson = manifest.to_json().encode("utf-8")
    parts.append(struct.pack("<I", len(mjson)))
    parts.append(mjson)
    names = store.names()
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        data = store[name].data
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ArchiveError(f"entry name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", data.ndim))
        for dim in data.shape:
            parts.append(struct.pack("<I", dim))
        parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_archive(store: ParamStore, manifest: Manifest, path) -> None:
    """Write atomically; byte output is a pure function of the inputs."""
    blob = _encode(store, manifest)
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".edgewts-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"file ends inside {what} (need {n} bytes at offset {self.pos})"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what) -> int:
        return self.take(1, what)[0]

    def u16(self, what) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def _read_blob(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse(blob: bytes, verify_crc: bool = True):
    if len(blob) < len(MAGIC) + 4:
        raise TruncatedError("file shorter than the fixed header")
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:8]!r}, expected {MAGIC!r}")
    if verify_crc:
        if len(blob) < len(MAGIC) + 8:
            raise TruncatedError("file ends before the checksum")
        stored = struct.unpack("<I", blob[-4:])[0]
        actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
        if stored != actual:
            raise CrcError(f"checksum mismatch: stored {stored:#010x}, actual {actual:#010x}")
    rd = _Reader(blob[:-4] if verify_crc else blob)
    rd.take(len(MAGIC), "magic")
    version = rd.u32("version")
    if version != VERSION:
        raise VersionError(f"unsupported archive version {version}")
    mlen = rd.u32("manifest length")
    try:
        manifest = Manifest.from_json(rd.take(mlen, "manifest").decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as err:
        raise TruncatedError(f"manifest does not parse: {err}") from None
    count = rd.u32("entry count")
    entries = []
    for i in range(count):
        nlen = rd.u16(f"entry {i} name length")
        name = rd.take(nlen, f"entry {i} name").decode("utf-8")
        ndim = rd.u8(f"entry {i} rank")
        dims = tuple(rd.u32(f"entry {i} dim") for _ in range(ndim))
        numel = int(np.prod(dims)) if dims else 1
        payload = rd.take(4 * numel, f"entry {i} payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        entries.append((name, arr))
    if rd.pos != len(rd.blob):
        raise TruncatedError(f"{len(rd.blob) - rd.pos} trailing bytes after the last entry")
    return manifest, entries


def read_manifest(path) -> Manifest:
    manifest, _ = _parse(_read_blob(path))
    return manifest


def _store_from(entries) -> ParamStore:
    store = ParamStore()
    for name, arr in entries:
        trainable = not name.endswith(_NONTRAINABLE_SUFFIXES)
        store.add(name, Tensor(arr), trainable=trainable)
    return store


def load_archive(path, expected_manifest: Optional[Manifest] = None) -> ParamStore:
    """Full load with integrity and (optional) identity checks."""
    manifest, entries = _parse(_read_blob(path))
    if expected_manifest is not None:
        expected_manifest.check_compatible(manifest)
    return _store_from(entries)


def load_subset(path, name_prefix: str) -> ParamStore:
    """Load only the entries whose names start with the prefix.

    Unknown extra entries are ignored by construction, which is the
    forward-compatibility contract of subset loading. An absent prefix
    yields an empty store, not an error.
    """
    _, entries = _parse(_read_blob(path))
    return _store_from([(n, a) for n, a in entries if n.startswith(name_prefix)])
