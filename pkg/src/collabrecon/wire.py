"""Client/server wire protocol and the pooled queue used on both ends.

Every message is a 16-byte little-endian header (magic ``CRWM``, u16 version,
u16 message type, u64 body length) followed by the body. Depth travels as a
16-bit millimetre PNG, colour as JPEG.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Callable, Generic, Iterator, TypeVar

import cv2
import numpy as np

from .se3 import POSE_STRUCT, RigidTransform
from .volume import CameraIntrinsics

MAGIC = b"CRWM"
VERSION = 1
HEADER = struct.Struct("<4sHHQ")
FRAME_HEAD = struct.Struct("<q56sII")
INTRINSICS = struct.Struct("<4d2I")
DEFAULT_JPEG_QUALITY = 90
MAX_BODY = 1 << 28


class MessageType(IntEnum):
    HELLO = 1
    FRAME = 2
    RENDER_REQUEST = 3
    RENDERED_IMAGE = 4
    BYE = 5


class WireError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def quantise_depth(depth: np.ndarray) -> np.ndarray:
    """Meters -> uint16 millimetres; 0 stays invalid, out-of-range becomes 0."""
    mm = np.rint(np.asarray(depth, dtype=np.float64) * 1000.0)
    mm[(mm < 0) | (mm > 65535) | ~np.isfinite(mm)] = 0
    return mm.astype(np.uint16)


def dequantise_depth(mm: np.ndarray) -> np.ndarray:
    return mm.astype(np.float32) / 1000.0


def encode_depth_png(depth_mm: np.ndarray) -> bytes:
    if depth_mm.dtype != np.uint16:
        raise TypeError("depth PNG payload must be uint16 millimetres")
    ok, buf = cv2.imencode(".png", depth_mm, [cv2.IMWRITE_PNG_COMPRESSION, 6])
    if not ok:
        raise RuntimeError("PNG encoding failed")
    return buf.tobytes()


def decode_depth_png(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_UNCHANGED)
    if img is None or img.dtype != np.uint16 or img.ndim != 2:
        raise ValueError("payload is not a 16-bit greyscale PNG")
    return img


def encode_color_jpeg(rgb: np.ndarray, quality: int = DEFAULT_JPEG_QUALITY) -> bytes:
    ok, buf = cv2.imencode(".jpg", np.ascontiguousarray(rgb[..., ::-1]), [cv2.IMWRITE_JPEG_QUALITY, int(quality)])
    if not ok:
        raise RuntimeError("JPEG encoding failed")
    return buf.tobytes()


def decode_color_jpeg(data: bytes) -> np.ndarray:
    img = cv2.imdecode(np.frombuffer(data, np.uint8), cv2.IMREAD_COLOR)
    if img is None:
        raise ValueError("payload is not a JPEG image")
    return np.ascontiguousarray(img[..., ::-1])


def pack_message(kind: MessageType, body: bytes) -> bytes:
    return HEADER.pack(MAGIC, VERSION, int(kind), len(body)) + body


def unpack_header(data: bytes, offset: int = 0) -> tuple[MessageType, int]:
    if len(data) - offset < HEADER.size:
        raise WireError("truncated header", offset + max(0, len(data) - offset))
    magic, version, kind, length = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}", offset)
    if version != VERSION:
        raise WireError(f"unsupported version {version}", offset + 4)
    try:
        kind = MessageType(kind)
    except ValueError:
        raise WireError(f"unknown message type {kind}", offset + 6) from None
    if length > MAX_BODY:
        raise WireError(f"body length {length} exceeds limit", offset + 8)
    return kind, length


@dataclass
class FrameMessage:
    frame_index: int
    pose: RigidTransform
    depth_png: bytes
    color_jpeg: bytes

    @property
    def depth_mm(self) -> np.ndarray:
        return decode_depth_png(self.depth_png)

    @property
    def depth(self) -> np.ndarray:
        return dequantise_depth(self.depth_mm)

    @property
    def color(self) -> np.ndarray:
        return decode_color_jpeg(self.color_jpeg)


def encode_frame(depth: np.ndarray, color: np.ndarray, pose: RigidTransform, index: int,
                 jpeg_quality: int = DEFAULT_JPEG_QUALITY) -> bytes:
    depth = np.asarray(depth)
    if not np.all(np.isfinite(depth)):
        raise ValueError("depth must be finite")
    d = encode_depth_png(quantise_depth(depth))
    c = encode_color_jpeg(color, jpeg_quality)
    body = FRAME_HEAD.pack(int(index), pose.to_bytes(), len(d), len(c)) + d + c
    return pack_message(MessageType.FRAME, body)


def decode_frame(data: bytes, offset: int = 0) -> FrameMessage:
    kind, length = unpack_header(data, offset)
    if kind is not MessageType.FRAME:
        raise WireError(f"expected a frame message, got {kind.name}", offset + 6)
    body_at = offset + HEADER.size
    if len(data) < body_at + length:
        raise WireError(f"truncated body: need {length} bytes", len(data))
    return _frame_from_body(data[body_at:body_at + length], body_at)


def _frame_from_body(body: bytes, base: int = 0) -> FrameMessage:
    if len(body) < FRAME_HEAD.size:
        raise WireError("truncated frame header", base + len(body))
    index, pose_bytes, nd, nc = FRAME_HEAD.unpack_from(body)
    if FRAME_HEAD.size + nd + nc != len(body):
        raise WireError(f"payload lengths {nd}+{nc} do not match body of {len(body)} bytes", base + 8 + 56)
    try:
        pose = RigidTransform.from_bytes(pose_bytes)
    except ValueError as exc:
        raise WireError(f"invalid pose: {exc}", base + 8) from None
    d0 = FRAME_HEAD.size
    return FrameMessage(index, pose, bytes(body[d0:d0 + nd]), bytes(body[d0 + nd:]))


@dataclass
class Hello:
    name: str
    depth_intrinsics: CameraIntrinsics
    color_intrinsics: CameraIntrinsics

    def encode(self) -> bytes:
        name = self.name.encode("utf-8")
        body = struct.pack("<H", len(name)) + name
        for K in (self.depth_intrinsics, self.color_intrinsics):
            body += INTRINSICS.pack(K.fx, K.fy, K.cx, K.cy, K.width, K.height)
        return pack_message(MessageType.HELLO, body)

    @classmethod
    def decode_body(cls, body: bytes) -> Hello:
        try:
            (n,) = struct.unpack_from("<H", body)
            name = body[2:2 + n].decode("utf-8")
            Ks = [CameraIntrinsics(*INTRINSICS.unpack_from(body, 2 + n + i * INTRINSICS.size)) for i in range(2)]
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise WireError(f"malformed hello: {exc}", 0) from None
        return cls(name, *Ks)


@dataclass
class RenderRequest:
    client_id: int
    pose: RigidTransform

    def encode(self) -> bytes:
        return pack_message(MessageType.RENDER_REQUEST, struct.pack("<I", self.client_id) + self.pose.to_bytes())

    @classmethod
    def decode_body(cls, body: bytes) -> RenderRequest:
        if len(body) != 4 + POSE_STRUCT.size:
            raise WireError("render request has wrong length", len(body))
        (cid,) = struct.unpack_from("<I", body)
        return cls(cid, RigidTransform.from_bytes(body, 4))


@dataclass
class RenderedImage:
    client_id: int
    pose: RigidTransform
    color_jpeg: bytes

    def encode(self) -> bytes:
        body = struct.pack("<I", self.client_id) + self.pose.to_bytes() + struct.pack("<I", len(self.color_jpeg))
        return pack_message(MessageType.RENDERED_IMAGE, body + self.color_jpeg)

    @classmethod
    def decode_body(cls, body: bytes) -> RenderedImage:
        head = 4 + POSE_STRUCT.size + 4
        if len(body) < head:
            raise WireError("truncated rendered image", len(body))
        (cid,) = struct.unpack_from("<I", body)
        pose = RigidTransform.from_bytes(body, 4)
        (n,) = struct.unpack_from("<I", body, 4 + POSE_STRUCT.size)
        if head + n != len(body):
            raise WireError("rendered image payload length mismatch", head)
        return cls(cid, pose, bytes(body[head:]))

    @property
    def color(self) -> np.ndarray:
        return decode_color_jpeg(self.color_jpeg)


def bye() -> bytes:
    return pack_message(MessageType.BYE, b"")


def decode_body(kind: MessageType, body: bytes):
    if kind is MessageType.FRAME:
        return _frame_from_body(body, HEADER.size)
    if kind is MessageType.HELLO:
        return Hello.decode_body(body)
    if kind is MessageType.RENDER_REQUEST:
        return RenderRequest.decode_body(body)
    if kind is MessageType.RENDERED_IMAGE:
        return RenderedImage.decode_body(body)
    return None


def iter_messages(data: bytes) -> Iterator[tuple[MessageType, object]]:
    """Decode a concatenated byte stream of framed messages."""
    offset = 0
    while offset < len(data):
        kind, length = unpack_header(data, offset)
        start = offset + HEADER.size
        if start + length > len(data):
            raise WireError(f"truncated body: need {length} bytes", len(data))
        try:
            yield kind, decode_body(kind, data[start:start + length])
        except WireError as exc:
            raise WireError(str(exc).split(" (at byte")[0], start + exc.offset) from None
        offset = start + length


def _recv_exact(sock, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_message(sock) -> tuple[MessageType, object]:
    header = _recv_exact(sock, HEADER.size)
    kind, length = unpack_header(header)
    return kind, decode_body(kind, _recv_exact(sock, length) if length else b"")


class MemoryTransport:
    """In-process byte pipe with the socket methods the client and server use."""

    def __init__(self):
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._closed = False

    def sendall(self, data: bytes) -> None:
        with self._cond:
            if self._closed:
                raise ConnectionError("transport closed")
            self._buf += data
            self._cond.notify_all()

    def recv(self, n: int) -> bytes:
        with self._cond:
            while not self._buf and not self._closed:
                self._cond.wait()
            out = bytes(self._buf[:n])
            del self._buf[:n]
            return out

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def getvalue(self) -> bytes:
        with self._cond:
            return bytes(self._buf)


def connect(address) -> socket.socket:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        address = (host or "127.0.0.1", int(port))
    return socket.create_connection(address)


T = TypeVar("T")


class OverflowPolicy(str, Enum):
    DISCARD = "discard"
    GROW = "grow"
    REPLACE_RANDOM = "replace_random"
    WAIT = "wait"


class PushHandle(Generic[T]):
    def __init__(self, queue: PooledQueue, item: T):
        self.queue = queue
        self.item = item
        self._done = False

    def end_push(self) -> None:
        if not self._done:
            self._done = True
            self.queue.end_push(self)

    def cancel(self) -> None:
        if not self._done:
            self._done = True
            self.queue._cancel(self)

    def __enter__(self):
        return self.item

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.end_push()
        else:
            self.cancel()


class PopHandle(Generic[T]):
    def __init__(self, queue: PooledQueue, item: T):
        self.queue = queue
        self.item = item
        self._done = False

    def release(self) -> None:
        if not self._done:
            self._done = True
            self.queue._release(self)

    def __enter__(self):
        return self.item

    def __exit__(self, *exc):
        self.release()


class PooledQueue(Generic[T]):
    """Bounded FIFO backed by a pool of reusable items.

    ``begin_push`` takes an item from the pool (applying the overflow policy
    when the pool is empty), ``end_push`` enqueues it, ``pop`` hands out the
    front item and ``PopHandle.release`` returns it to the pool. Safe for one
    producer and one consumer thread.
    """

    def __init__(self, factory: Callable[[], T], capacity: int,
                 policy: OverflowPolicy | str = OverflowPolicy.DISCARD, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.factory = factory
        self.capacity = capacity
        self.policy = OverflowPolicy(policy)
        self._pool: deque = deque(factory() for _ in range(capacity))
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._rng = np.random.default_rng(seed)
        self._closed = False
        self.allocated = capacity
        self.checked_out = 0
        self.pushed = 0
        self.popped = 0
        self.discarded = 0

    def begin_push(self, timeout: float | None = None) -> PushHandle | None:
        with self._cond:
            self.pushed += 1
            if not self._pool:
                if self.policy is OverflowPolicy.DISCARD:
                    self.discarded += 1
                    return None
                if self.policy is OverflowPolicy.GROW:
                    self._pool.append(self.factory())
                    self.allocated += 1
                elif self.policy is OverflowPolicy.REPLACE_RANDOM:
                    if not self._queue:
                        self.discarded += 1
                        return None
                    victim = int(self._rng.integers(len(self._queue)))
                    item = self._queue[victim]
                    del self._queue[victim]
                    self.discarded += 1
                    self._pool.append(item)
                else:
                    ok = self._cond.wait_for(lambda: self._pool or self._closed, timeout)
                    if self._closed or not ok:
                        self.discarded += 1
                        return None
            if self._closed:
                self.discarded += 1
                return None
            item = self._pool.pop()
            self.checked_out += 1
            return PushHandle(self, item)

    def end_push(self, handle: PushHandle) -> None:
        with self._cond:
            self._queue.append(handle.item)
            self.checked_out -= 1
            handle._done = True
            self._cond.notify_all()

    def _cancel(self, handle: PushHandle) -> None:
        with self._cond:
            self._pool.append(handle.item)
            self.checked_out -= 1
            self.discarded += 1
            self._cond.notify_all()

    def pop(self, block: bool = False, timeout: float | None = None) -> PopHandle | None:
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self._queue or self._closed, timeout)
            if not self._queue:
                return None
            item = self._queue.popleft()
            self.popped += 1
            self.checked_out += 1
            return PopHandle(self, item)

    def _release(self, handle: PopHandle) -> None:
        with self._cond:
            self._pool.append(handle.item)
            self.checked_out -= 1
            self._cond.notify_all()

    def peek(self) -> T | None:
        with self._cond:
            return self._queue[0] if self._queue else None

    def empty(self) -> bool:
        with self._cond:
            return not self._queue

    def size(self) -> int:
        with self._cond:
            return len(self._queue)

    def __len__(self):
        return self.size()

    @property
    def pool_size(self) -> int:
        with self._cond:
            return len(self._pool)

    def close(self) -> None:
        """Wake every waiter; subsequent pushes are discarded."""
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed
