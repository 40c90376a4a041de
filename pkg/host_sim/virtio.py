# tzcvm_sim/host_sim/virtio.py
"""
Split-virtqueue devices behind the shadow I/O region.

The cVM's I/O region is a protected IPA run holding the rings of every queue
followed by bounce-buffer pages. The guest driver writes descriptors into
its (secure) copy; the monitor mirrors the region to the shadow; the host
device model only ever touches the shadow.

Layout of one queue (queue_size entries):
    desc  16 B each   addr u64, len u32, flags u16, next u16
    avail             flags u16, idx u16, ring[u16 × n], used_event u16
    used              flags u16, idx u16, ring[(id u32, len u32) × n], avail_event u16
"""
from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, List, Optional, Protocol, Sequence, Tuple

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from mem_model.config import GRANULE_SIZE
from mem_model.granules import Requestor
from mem_model.memory import PhysicalMemory

from .config import BLK_INTID, NET_INTID, settings
from .errors import BadDescriptor

logger = logging.getLogger(__name__)

DESC_SIZE = 16
VIRTQ_DESC_F_NEXT = 1
VIRTQ_DESC_F_WRITE = 2

SECTOR_SIZE = 512
BLK_T_IN = 0
BLK_T_OUT = 1
BLK_S_OK = 0
BLK_S_IOERR = 1
BLK_S_UNSUPP = 2
BLK_HEADER = struct.Struct("<IIQ")

QUEUES: Tuple[Tuple[str, int], ...] = (("blk", 0), ("net", 0), ("net", 1))
NET_RX, NET_TX = 0, 1
DEVICE_MMIO_OFFSET = {"blk": 0x10000, "net": 0x20000}
QUEUE_NOTIFY = 0x50
DEVICE_INTID = {"blk": BLK_INTID, "net": NET_INTID}


# ─── Layout ──────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class QueueLayout:
    desc: int
    avail: int
    used: int
    size: int

    def desc_ipa(self, index: int) -> int:
        return self.desc + DESC_SIZE * (index % self.size)

    def avail_slot(self, index: int) -> int:
        return self.avail + 4 + 2 * (index % self.size)

    def used_slot(self, index: int) -> int:
        return self.used + 4 + 8 * (index % self.size)


def queue_bytes(size: int) -> int:
    return DESC_SIZE * size + (4 + 2 * size + 2) + (4 + 8 * size + 2)


def queue_pages(size: int) -> int:
    return -(-queue_bytes(size) // GRANULE_SIZE)


@dataclass(frozen=True)
class IoLayout:
    ipa_base: int
    queue_size: int
    data_pages: int

    @classmethod
    def for_pages(cls, ipa_base: int, pages: int, queue_size: int) -> "IoLayout":
        return cls(ipa_base, queue_size, pages - len(QUEUES) * queue_pages(queue_size))

    @property
    def ring_pages(self) -> int:
        return len(QUEUES) * queue_pages(self.queue_size)

    @property
    def pages(self) -> int:
        return self.ring_pages + self.data_pages

    @property
    def size(self) -> int:
        return self.pages * GRANULE_SIZE

    @property
    def data_base(self) -> int:
        return self.ipa_base + self.ring_pages * GRANULE_SIZE

    def queue(self, device: str, queue: int) -> QueueLayout:
        slot = QUEUES.index((device, queue))
        desc = self.ipa_base + slot * queue_pages(self.queue_size) * GRANULE_SIZE
        avail = desc + DESC_SIZE * self.queue_size
        used = avail + 4 + 2 * self.queue_size + 2
        return QueueLayout(desc, avail, used, self.queue_size)

    def queue_span(self, device: str, queue: int) -> Tuple[int, int]:
        """(offset, length) of one queue's rings inside the region."""
        q = self.queue(device, queue)
        return q.desc - self.ipa_base, queue_bytes(self.queue_size)

    def contains(self, ipa: int, length: int = 1) -> bool:
        return self.ipa_base <= ipa and ipa + length <= self.ipa_base + self.size

    def data_page(self, n: int) -> int:
        return self.data_base + n * GRANULE_SIZE


def notify_address(mmio_base: int, device: str) -> int:
    return mmio_base + DEVICE_MMIO_OFFSET[device] + QUEUE_NOTIFY


def device_for_notify(mmio_base: int, ipa: int) -> Optional[str]:
    for device in DEVICE_MMIO_OFFSET:
        if ipa == notify_address(mmio_base, device):
            return device
    return None


# ─── Guest-side driver ───────────────────────────────────────────────────────
class GuestMemoryAccess(Protocol):
    def read(self, ipa: int, length: int) -> bytes: ...
    def write(self, ipa: int, data: bytes) -> None: ...


def driver_submit(mem: GuestMemoryAccess, layout: IoLayout, device: str, queue: int,
                  descriptors: Sequence[Tuple[int, int, bool]], state: Dict[str, int]) -> int:
    """Chain `descriptors` (ipa, length, device_writes) into the queue and publish the head."""
    q = layout.queue(device, queue)
    key = f"{device}{queue}"
    head = state.get(f"{key}.next", 0) % q.size
    n = len(descriptors)
    for k, (ipa, length, device_writes) in enumerate(descriptors):
        index = (head + k) % q.size
        flags = (VIRTQ_DESC_F_NEXT if k < n - 1 else 0) | (VIRTQ_DESC_F_WRITE if device_writes else 0)
        mem.write(q.desc_ipa(index), struct.pack("<QIHH", ipa, length, flags, (index + 1) % q.size))
    (avail_idx,) = struct.unpack("<H", mem.read(q.avail + 2, 2))
    mem.write(q.avail_slot(avail_idx), struct.pack("<H", head))
    mem.write(q.avail + 2, struct.pack("<H", (avail_idx + 1) & 0xFFFF))
    state[f"{key}.next"] = head + n
    return head


def driver_reap(mem: GuestMemoryAccess, layout: IoLayout, device: str, state: Dict[str, int]) -> List[Dict[str, int]]:
    """Used-ring entries published since the last reap, for every queue of `device`."""
    completed: List[Dict[str, int]] = []
    for dev, queue in QUEUES:
        if dev != device:
            continue
        q = layout.queue(dev, queue)
        key = f"{dev}{queue}.used"
        last = state.get(key, 0)
        (used_idx,) = struct.unpack("<H", mem.read(q.used + 2, 2))
        while last != used_idx:
            ident, length = struct.unpack("<II", mem.read(q.used_slot(last), 8))
            completed.append({"device": dev, "queue": queue, "id": ident, "len": length})
            last = (last + 1) & 0xFFFF
        state[key] = last
    return completed


# ─── Host view of the shadow ─────────────────────────────────────────────────
class ShadowWindow:
    """Byte access to the shadow copy of an I/O region, as the host."""

    def __init__(self, memory: PhysicalMemory, layout: IoLayout, shadow: Sequence[int]):
        self.memory = memory
        self.layout = layout
        self.shadow = tuple(shadow)
        self._host = Requestor.host()

    def _spans(self, ipa: int, length: int):
        if not self.layout.contains(ipa, length):
            raise BadDescriptor(f"[{ipa:#x}, +{length}) is outside the shared I/O region")
        offset = ipa - self.layout.ipa_base
        while length > 0:
            page, within = divmod(offset, GRANULE_SIZE)
            chunk = min(length, GRANULE_SIZE - within)
            yield self.shadow[page], within, chunk
            offset += chunk
            length -= chunk

    def read(self, ipa: int, length: int) -> bytes:
        return b"".join(self.memory.read(self._host, g, off, n) for g, off, n in self._spans(ipa, length))

    def write(self, ipa: int, data: bytes) -> None:
        pos = 0
        for g, off, n in list(self._spans(ipa, len(data))):
            self.memory.write(self._host, g, data[pos:pos + n], off)
            pos += n


@dataclass(frozen=True)
class Desc:
    addr: int
    length: int
    flags: int
    next: int

    @property
    def device_writes(self) -> bool:
        return bool(self.flags & VIRTQ_DESC_F_WRITE)


def read_chain(window: ShadowWindow, q: QueueLayout, head: int) -> List[Desc]:
    chain: List[Desc] = []
    index = head
    for _ in range(q.size):
        desc = Desc(*struct.unpack("<QIHH", window.read(q.desc_ipa(index), DESC_SIZE)))
        chain.append(desc)
        if not desc.flags & VIRTQ_DESC_F_NEXT:
            return chain
        index = desc.next
    raise BadDescriptor(f"descriptor chain from {head} loops")


def chain_in_bounds(window: ShadowWindow, chain: Sequence[Desc]) -> bool:
    return all(window.layout.contains(d.addr, d.length) for d in chain)


def publish_used(window: ShadowWindow, q: QueueLayout, head: int, written: int) -> None:
    (used_idx,) = struct.unpack("<H", window.read(q.used + 2, 2))
    window.write(q.used_slot(used_idx), struct.pack("<II", head, written))
    window.write(q.used + 2, struct.pack("<H", (used_idx + 1) & 0xFFFF))


# ─── Backends ────────────────────────────────────────────────────────────────
_io_retry = retry(
    reraise=True,
    retry=retry_if_exception_type(OSError),
    stop=stop_after_attempt(settings.io_retry_attempts),
    wait=wait_exponential(multiplier=0.01, min=0.01, max=0.2),
)


class BlkBackend:
    """Flat image file, 512-byte sectors."""

    def __init__(self, path: Path, sectors: Optional[int] = None):
        self.path = Path(path)
        self.sectors = sectors or settings.blk_sectors
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists() or self.path.stat().st_size < self.size:
            with open(self.path, "ab") as fh:
                fh.truncate(self.size)
        self.tags: Dict[int, bytes] = {}    # sector -> integrity tag of the page stored there

    @property
    def size(self) -> int:
        return self.sectors * SECTOR_SIZE

    def _check(self, sector: int, length: int) -> None:
        if sector < 0 or sector * SECTOR_SIZE + length > self.size:
            raise BadDescriptor(f"sector {sector} (+{length} B) beyond a {self.sectors}-sector image")

    @_io_retry
    def read(self, sector: int, length: int) -> bytes:
        self._check(sector, length)
        with open(self.path, "rb") as fh:
            fh.seek(sector * SECTOR_SIZE)
            return fh.read(length)

    @_io_retry
    def write(self, sector: int, data: bytes) -> None:
        self._check(sector, len(data))
        with open(self.path, "r+b") as fh:
            fh.seek(sector * SECTOR_SIZE)
            fh.write(data)


class LoopbackPipe:
    def __init__(self) -> None:
        self.frames: Deque[bytes] = deque()
        self.sent = 0
        self.received = 0

    def send(self, frame: bytes) -> None:
        self.frames.append(frame)
        self.sent += 1

    def receive(self) -> Optional[bytes]:
        if not self.frames:
            return None
        self.received += 1
        return self.frames.popleft()


# ─── Device models ───────────────────────────────────────────────────────────
@dataclass
class Chain:
    queue: int
    head: int
    descs: List[Desc]
    valid: bool

    def data_spans(self, layout: IoLayout) -> List[Tuple[int, int]]:
        if not self.valid:
            return []
        return [(d.addr - layout.ipa_base, d.length) for d in self.descs]


@dataclass
class VirtioDevice:
    name: str
    last_avail: Dict[int, int] = field(default_factory=dict)
    requests: int = 0
    errors: int = 0

    def queues(self) -> List[int]:
        return [q for dev, q in QUEUES if dev == self.name]

    def available(self, window: ShadowWindow, queue: int) -> List[Chain]:
        q = window.layout.queue(self.name, queue)
        (avail_idx,) = struct.unpack("<H", window.read(q.avail + 2, 2))
        last = self.last_avail.get(queue, 0)
        chains: List[Chain] = []
        while last != avail_idx:
            (head,) = struct.unpack("<H", window.read(q.avail_slot(last), 2))
            try:
                descs = read_chain(window, q, head)
                chains.append(Chain(queue, head, descs, chain_in_bounds(window, descs)))
            except BadDescriptor:
                chains.append(Chain(queue, head, [], False))
            last = (last + 1) & 0xFFFF
        return chains

    def consume(self, queue: int, count: int = 1) -> None:
        self.last_avail[queue] = (self.last_avail.get(queue, 0) + count) & 0xFFFF

    def process(self, window: ShadowWindow, chains: List[Chain], sidecar: Optional[Dict[int, bytes]]) -> int:
        raise NotImplementedError


class BlkDevice(VirtioDevice):
    def __init__(self, backend: BlkBackend):
        super().__init__("blk")
        self.backend = backend

    def process(self, window: ShadowWindow, chains: List[Chain], sidecar: Optional[Dict[int, bytes]]) -> int:
        q = window.layout.queue("blk", 0)
        done = 0
        for chain in chains:
            written = 0
            status = BLK_S_OK
            try:
                if not chain.valid or len(chain.descs) < 2:
                    raise BadDescriptor(f"blk request {chain.head} has an out-of-range descriptor")
                header, *data, status_desc = chain.descs
                rtype, _, sector = BLK_HEADER.unpack(window.read(header.addr, BLK_HEADER.size))
                for d in data:
                    if rtype == BLK_T_OUT:
                        self.backend.write(sector, window.read(d.addr, d.length))
                        self._save_tags(window, d, sector, sidecar)
                    elif rtype == BLK_T_IN:
                        window.write(d.addr, self.backend.read(sector, d.length))
                        self._restore_tags(window, d, sector, sidecar)
                        written += d.length
                    else:
                        status = BLK_S_UNSUPP
                        break
                    sector += d.length // SECTOR_SIZE
                window.write(status_desc.addr, bytes([status]))
                written += 1
            except BadDescriptor as exc:
                logger.warning("blk: %s", exc)
                self.errors += 1
                status_desc = chain.descs[-1] if chain.descs else None
                if status_desc is not None and window.layout.contains(status_desc.addr, 1):
                    window.write(status_desc.addr, bytes([BLK_S_IOERR]))
            publish_used(window, q, chain.head, written)
            self.consume(0)
            self.requests += 1
            done += 1
        return done

    def _save_tags(self, window: ShadowWindow, d: Desc, sector: int, sidecar: Optional[Dict[int, bytes]]) -> None:
        if not sidecar or d.addr % GRANULE_SIZE or d.length % GRANULE_SIZE:
            return
        for i in range(d.length // GRANULE_SIZE):
            tag = sidecar.get(d.addr // GRANULE_SIZE + i)
            if tag is not None:
                self.backend.tags[sector + i * (GRANULE_SIZE // SECTOR_SIZE)] = tag

    def _restore_tags(self, window: ShadowWindow, d: Desc, sector: int, sidecar: Optional[Dict[int, bytes]]) -> None:
        if sidecar is None or d.addr % GRANULE_SIZE or d.length % GRANULE_SIZE:
            return
        for i in range(d.length // GRANULE_SIZE):
            tag = self.backend.tags.get(sector + i * (GRANULE_SIZE // SECTOR_SIZE))
            if tag is not None:
                sidecar[d.addr // GRANULE_SIZE + i] = tag


class NetDevice(VirtioDevice):
    def __init__(self, pipe: Optional[LoopbackPipe] = None):
        super().__init__("net")
        self.pipe = pipe or LoopbackPipe()

    def process(self, window: ShadowWindow, chains: List[Chain], sidecar: Optional[Dict[int, bytes]]) -> int:
        done = 0
        tx = window.layout.queue("net", NET_TX)
        for chain in (c for c in chains if c.queue == NET_TX):
            if chain.valid:
                self.pipe.send(b"".join(window.read(d.addr, d.length) for d in chain.descs if not d.device_writes))
            else:
                logger.warning("net: TX chain %d has an out-of-range descriptor", chain.head)
                self.errors += 1
            publish_used(window, tx, chain.head, 0)
            self.consume(NET_TX)
            done += 1
        rx = window.layout.queue("net", NET_RX)
        for chain in (c for c in chains if c.queue == NET_RX):
            if not chain.valid:
                logger.warning("net: RX chain %d has an out-of-range descriptor", chain.head)
                self.errors += 1
                publish_used(window, rx, chain.head, 0)
                self.consume(NET_RX)
                done += 1
                continue
            frame = self.pipe.receive()
            if frame is None:
                break           # buffer stays posted until a frame arrives
            written = 0
            for d in chain.descs:
                if not d.device_writes or written >= len(frame):
                    continue
                chunk = frame[written:written + d.length]
                window.write(d.addr, chunk)
                written += len(chunk)
            publish_used(window, rx, chain.head, written)
            self.consume(NET_RX)
            done += 1
        self.requests += done
        return done


def blk_request(layout: IoLayout, header_ipa: int, data_ipa: int, length: int, status_ipa: int,
                write: bool) -> List[Tuple[int, int, bool]]:
    """Descriptor triple for one blk request; the header must already be in guest memory."""
    return [
        (header_ipa, BLK_HEADER.size, False),
        (data_ipa, length, not write),
        (status_ipa, 1, True),
    ]


def blk_header(write: bool, sector: int) -> bytes:
    return BLK_HEADER.pack(BLK_T_OUT if write else BLK_T_IN, 0, sector)
