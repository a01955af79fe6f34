"""Summation erasure code and rotating parity placement.

Entries live on parameter-server shards and are identified by a global
integer id; entry ``e`` is hosted by logical server ``e // entries_per_server``.
Groups of ``k`` entries from distinct servers are summed into one parity
vector hosted on yet another server, chosen round-robin so parity counts per
server differ by at most one.  Recovering a lost vector is a subtraction.

Groups that cannot be filled with ``k`` real entries are completed with
virtual all-zero padding members (``PAD_ENTRY``), which are owned by no
server and never updated.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

ENTRY_DTYPE = np.float32
PAD_ENTRY = -1
PAD_SERVER = -1

_LAYOUT_MAGIC = b"CPLY"
_LAYOUT_VERSION = 1


class LayoutError(ValueError):
    """Raised when a parity layout cannot be constructed or parsed."""


@dataclass(frozen=True)
class CodeParams:
    """Code dimensions: ``k`` data entries per group, one parity each."""

    k: int
    r: int = 1

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.r != 1:
            raise ValueError(f"only single-parity groups are supported (r=1), got r={self.r}")


@dataclass(frozen=True)
class ParityGroup:
    group_id: int
    member_entry_ids: tuple[int, ...]   # PAD_ENTRY marks a virtual zero member
    member_servers: tuple[int, ...]     # PAD_SERVER for padding slots
    parity_server: int

    def real_members(self) -> list[tuple[int, int]]:
        """(slot, entry_id) pairs for non-padding members."""
        return [(i, e) for i, e in enumerate(self.member_entry_ids) if e != PAD_ENTRY]


@dataclass
class ParityLayout:
    """Immutable after construction; safe to share across threads."""

    num_servers: int
    entries_per_server: int
    params: CodeParams
    groups: list[ParityGroup]
    entry_to_group: dict[int, tuple[int, int]] = field(repr=False)  # entry -> (group, slot)

    @property
    def total_entries(self) -> int:
        return self.num_servers * self.entries_per_server

    def entry_home(self, entry_id: int) -> int:
        if not 0 <= entry_id < self.total_entries:
            raise KeyError(f"unknown entry id {entry_id}")
        return entry_id // self.entries_per_server

    def group_of(self, entry_id: int) -> ParityGroup:
        gid, _ = self.entry_to_group[entry_id]
        return self.groups[gid]

    def parity_groups_of(self, server: int) -> list[int]:
        return [g.group_id for g in self.groups if g.parity_server == server]

    def member_groups_of(self, server: int) -> list[int]:
        return sorted({self.entry_to_group[e][0] for e in self.entries_of(server)})

    def entries_of(self, server: int) -> range:
        lo = server * self.entries_per_server
        return range(lo, lo + self.entries_per_server)

    def affected_groups(self, server: int) -> list[int]:
        """Groups that lose a member or their parity when ``server`` fails."""
        touched = set(self.member_groups_of(server))
        touched.update(self.parity_groups_of(server))
        return sorted(touched)

    def parity_counts(self) -> list[int]:
        counts = [0] * self.num_servers
        for g in self.groups:
            counts[g.parity_server] += 1
        return counts

    def to_bytes(self) -> bytes:
        k = self.params.k
        head = struct.pack(
            "<4sHIHII",
            _LAYOUT_MAGIC,
            _LAYOUT_VERSION,
            self.num_servers,
            k,
            self.entries_per_server,
            len(self.groups),
        )
        rows = bytearray()
        for g in self.groups:
            rows += struct.pack("<Ii", g.group_id, g.parity_server)
            for slot in range(k):
                rows += struct.pack("<qi", g.member_entry_ids[slot], g.member_servers[slot])
        body = bytes(rows)
        return head + struct.pack("<I", zlib.crc32(body)) + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParityLayout":
        head_size = struct.calcsize("<4sHIHII")
        magic, version, s, k, epp, ngroups = struct.unpack("<4sHIHII", blob[:head_size])
        if magic != _LAYOUT_MAGIC:
            raise LayoutError("bad layout magic")
        if version != _LAYOUT_VERSION:
            raise LayoutError(f"unsupported layout version {version}")
        (crc,) = struct.unpack("<I", blob[head_size : head_size + 4])
        body = blob[head_size + 4 :]
        if zlib.crc32(body) != crc:
            raise LayoutError("layout checksum mismatch")
        groups = []
        off = 0
        for _ in range(ngroups):
            gid, pserver = struct.unpack_from("<Ii", body, off)
            off += struct.calcsize("<Ii")
            members = []
            servers = []
            for _ in range(k):
                e, srv = struct.unpack_from("<qi", body, off)
                off += struct.calcsize("<qi")
                members.append(e)
                servers.append(srv)
            groups.append(ParityGroup(gid, tuple(members), tuple(servers), pserver))
        return cls._assemble(s, epp, CodeParams(k=k), groups)

    @classmethod
    def _assemble(cls, num_servers, entries_per_server, params, groups) -> "ParityLayout":
        entry_to_group: dict[int, tuple[int, int]] = {}
        for g in groups:
            for slot, e in g.real_members():
                if e in entry_to_group:
                    raise LayoutError(f"entry {e} appears in more than one group")
                entry_to_group[e] = (g.group_id, slot)
        return cls(num_servers, entries_per_server, params, groups, entry_to_group)


def build_layout(num_servers: int, entries_per_server: int, params: CodeParams) -> ParityLayout:
    """Assign every entry to one parity group with rotating parity placement.

    Group ``g`` puts its parity on server ``g % num_servers`` and collects its
    members by walking the server ring from the next server onward, taking the
    lowest unconsumed local index from each server that still has entries.
    A tail group short of ``k`` real members is filled with padding.
    """
    k = params.k
    if num_servers <= k:
        raise LayoutError(
            f"need at least k+1={k + 1} servers to place {k} members plus parity "
            f"on distinct servers, got {num_servers}"
        )
    if entries_per_server < 0:
        raise ValueError("entries_per_server must be non-negative")

    cursors = [0] * num_servers  # next unconsumed local index per server
    remaining = num_servers * entries_per_server
    groups: list[ParityGroup] = []
    gid = 0
    while remaining > 0:
        members: list[int] = []
        servers: list[int] = []
        # If every leftover entry sits on the would-be parity server, shift the
        # parity one server over; the tail group cannot self-host its parity.
        for shift in range(num_servers):
            parity_server = (gid + shift) % num_servers
            for step in range(1, num_servers):
                srv = (parity_server + step) % num_servers
                if cursors[srv] < entries_per_server:
                    members.append(srv * entries_per_server + cursors[srv])
                    servers.append(srv)
                    cursors[srv] += 1
                    remaining -= 1
                    if len(members) == k:
                        break
            if members:
                break
        while len(members) < k:
            members.append(PAD_ENTRY)
            servers.append(PAD_SERVER)
        groups.append(ParityGroup(gid, tuple(members), tuple(servers), parity_server))
        gid += 1
    return ParityLayout._assemble(num_servers, entries_per_server, params, groups)


def _check_vectors(vectors, expect_dim=None):
    dim = expect_dim
    for v in vectors:
        if v.ndim != 1:
            raise ValueError("expected rank-1 vectors")
        if dim is None:
            dim = v.shape[0]
        elif v.shape[0] != dim:
            raise ValueError(f"dimension mismatch: {v.shape[0]} != {dim}")
    return dim


def encode(members: list[np.ndarray]) -> np.ndarray:
    """Elementwise sum of the member vectors, accumulated in 64-bit.

    Summation order is fixed left to right so results are reproducible.
    """
    if not members:
        raise ValueError("encode requires at least one member")
    _check_vectors(members)
    acc = np.zeros(members[0].shape[0], dtype=np.float64)
    for v in members:
        acc += v.astype(np.float64, copy=False)
    return acc.astype(ENTRY_DTYPE)


def decode(parity: np.ndarray, surviving: list[np.ndarray], missing_slot: int) -> np.ndarray:
    """Recover one member: parity minus the sum of the survivors.

    ``surviving`` holds the other k-1 members in slot order with the missing
    slot removed; ``missing_slot`` must index into the original k slots.
    """
    k = len(surviving) + 1
    if not 0 <= missing_slot < k:
        raise ValueError(f"missing_slot {missing_slot} out of range for k={k}")
    _check_vectors(surviving, expect_dim=parity.shape[0])
    acc = parity.astype(np.float64)
    for v in surviving:
        acc -= v.astype(np.float64, copy=False)
    return acc.astype(ENTRY_DTYPE)
