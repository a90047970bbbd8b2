"""Binary checkpoint format with per-tensor content hashes.

Layout (all integers little-endian):

    magic  b"TPPC"
    u32    format version (1)
    u32    meta length, then meta as UTF-8 JSON
           {stage, config snapshot, rng state}
    u32    number of parameter records
    per record:
        u16  name length, then UTF-8 name
        u8   group code (0 backbone, 1 target, 2 head)
        u8   dtype code (0 = float64)
        u8   rank, then rank * u64 dims
        u64  payload offset (relative to payload region start)
        u64  FNV-1a hash of the payload bytes
    payload region: concatenated raw little-endian float64 data

Load verifies every hash; load followed by save reproduces byte-identical
parameter payloads. Writes are atomic (temp file, then rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .registry import ParamGroup, ParamRegistry

MAGIC = b"TPPC"
FORMAT_VERSION = 1

_GROUP_CODE = {ParamGroup.BACKBONE: 0, ParamGroup.TARGET: 1, ParamGroup.HEAD: 2}
_CODE_GROUP = {v: k for k, v in _GROUP_CODE.items()}

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over raw bytes."""
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _hash_array(arr: np.ndarray) -> int:
    return fnv1a64(np.ascontiguousarray(arr, dtype="<f8").tobytes())


@dataclass
class CheckpointEntry:
    group: ParamGroup
    data: np.ndarray
    content_hash: int


@dataclass
class Checkpoint:
    """In-memory snapshot: ordered name -> entry, plus provenance meta."""

    meta: dict
    entries: dict[str, CheckpointEntry] = field(default_factory=dict)

    @classmethod
    def from_registry(cls, registry: ParamRegistry, stage: str,
                      config: dict | None = None, rng_state: dict | None = None,
                      groups=None, exclude_prefixes: tuple[str, ...] = ()) -> "Checkpoint":
        meta = {
            "format_version": FORMAT_VERSION,
            "stage": stage,
            "config": config or {},
            "rng": rng_state or {},
        }
        ckpt = cls(meta=meta)
        for p in registry:
            if groups is not None and p.group not in groups:
                continue
            if any(p.name.startswith(pre) for pre in exclude_prefixes):
                continue
            data = p.data.copy()
            ckpt.entries[p.name] = CheckpointEntry(p.group, data, _hash_array(data))
        return ckpt

    def names(self, group: ParamGroup | None = None) -> list[str]:
        return [n for n, e in self.entries.items() if group is None or e.group is group]

    def hashes(self, group: ParamGroup | None = None) -> dict[str, int]:
        return {n: e.content_hash for n, e in self.entries.items()
                if group is None or e.group is group}

    # -- file io ---------------------------------------------------------

    def save(self, path: str) -> None:
        meta_bytes = json.dumps(self.meta, sort_keys=True).encode()
        records = []
        payloads = []
        offset = 0
        for name, entry in self.entries.items():
            raw = np.ascontiguousarray(entry.data, dtype="<f8").tobytes()
            name_b = name.encode()
            rec = struct.pack("<H", len(name_b)) + name_b
            rec += struct.pack("<BBB", _GROUP_CODE[entry.group], 0, entry.data.ndim)
            rec += struct.pack(f"<{entry.data.ndim}Q", *entry.data.shape)
            rec += struct.pack("<QQ", offset, entry.content_hash)
            records.append(rec)
            payloads.append(raw)
            offset += len(raw)
        blob = (MAGIC + struct.pack("<I", FORMAT_VERSION)
                + struct.pack("<I", len(meta_bytes)) + meta_bytes
                + struct.pack("<I", len(records)) + b"".join(records)
                + b"".join(payloads))
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != MAGIC:
            raise StructuralError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
        pos = 4
        version, = struct.unpack_from("<I", blob, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise StructuralError(f"{path}: unsupported format version {version}")
        meta_len, = struct.unpack_from("<I", blob, pos)
        pos += 4
        meta = json.loads(blob[pos:pos + meta_len].decode())
        pos += meta_len
        count, = struct.unpack_from("<I", blob, pos)
        pos += 4
        headers = []
        for _ in range(count):
            name_len, = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode()
            pos += name_len
            group_code, dtype_code, rank = struct.unpack_from("<BBB", blob, pos)
            pos += 3
            if dtype_code != 0:
                raise StructuralError(f"{path}: unknown dtype code {dtype_code} for {name}")
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            offset, content_hash = struct.unpack_from("<QQ", blob, pos)
            pos += 16
            headers.append((name, _CODE_GROUP[group_code], dims, offset, content_hash))
        payload_start = pos
        ckpt = cls(meta=meta)
        for name, group, dims, offset, content_hash in headers:
            nbytes = 8 * int(np.prod(dims)) if dims else 8
            start = payload_start + offset
            raw = blob[start:start + nbytes]
            if fnv1a64(raw) != content_hash:
                raise StructuralError(f"{path}: content hash mismatch for {name}")
            data = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
            ckpt.entries[name] = CheckpointEntry(group, data, content_hash)
        return ckpt

    # -- application -------------------------------------------------------

    def apply_to_registry(self, registry: ParamRegistry, groups=None,
                          require_all: bool = True) -> list[str]:
        """Copy entries into same-named registry params.

        With `groups`, only entries in those groups are considered, and every
        registry param of those groups must be present in the file. Group tags
        must agree between file and registry. Returns the names applied.
        """
        offenders = []
        applied = []
        wanted = {n: e for n, e in self.entries.items()
                  if groups is None or e.group in groups}
        if require_all:
            target_names = {p.name for p in registry
                            if groups is None or p.group in groups}
            for missing in sorted(target_names - set(wanted)):
                offenders.append(f"{missing}: missing from checkpoint")
            for extra in sorted(set(wanted) - target_names):
                offenders.append(f"{extra}: not in model registry")
        for name, entry in wanted.items():
            if name not in registry:
                continue
            p = registry.get(name)
            if p.group is not entry.group:
                offenders.append(
                    f"{name}: group {entry.group.value} in file vs {p.group.value} in registry")
                continue
            if p.data.shape != entry.data.shape:
                offenders.append(
                    f"{name}: shape {list(entry.data.shape)} in file vs {list(p.data.shape)} in model")
                continue
            p.tensor.data = entry.data.copy()
            applied.append(name)
        if offenders:
            raise StructuralError("checkpoint/model mismatches: " + "; ".join(offenders))
        return applied


@dataclass
class AuditReport:
    """Result of a freeze audit: names of frozen params whose content changed."""

    changed: list[str]
    checked: int

    @property
    def passed(self) -> bool:
        return not self.changed

    def summary(self) -> str:
        if self.passed:
            return f"PASS ({self.checked} parameters bit-identical)"
        lines = "\n".join(f"  CHANGED {name}" for name in self.changed)
        return f"FAIL ({len(self.changed)} of {self.checked} parameters changed)\n{lines}"


def audit_freeze(before: Checkpoint, after: Checkpoint, frozen_groups) -> AuditReport:
    """Compare content hashes of frozen-group params between two snapshots.

    The two snapshots must contain exactly the same names within the audited
    groups; any difference in the name sets is a structural error.
    """
    frozen_groups = set(frozen_groups)
    changed = []
    checked = 0
    for group in sorted(frozen_groups, key=lambda g: g.value):
        b = before.hashes(group)
        a = after.hashes(group)
        if set(b) != set(a):
            only_b = sorted(set(b) - set(a))
            only_a = sorted(set(a) - set(b))
            raise StructuralError(
                f"audit: {group.value} name sets differ; "
                f"only in before: {only_b}; only in after: {only_a}")
        for name in b:
            checked += 1
            if b[name] != a[name]:
                changed.append(name)
    return AuditReport(changed=sorted(changed), checked=checked)
