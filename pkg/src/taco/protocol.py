"""Bit-exact wire format and the two-party session state machines.

Messages travel over a lossless in-order channel. Payload index streams are
fixed-width big-endian bit-packed; cell positions use whichever of a
coordinate list or a bitmap is fewer bits. Header and mode bytes are control
plane and excluded from rate accounting.
"""

from __future__ import annotations

import math
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .codec import CodecModel, LatentGrid, decode, encode
from .errors import FormatError, ProtocolError
from .imagecore import Image
from .saliency import ImportanceGrid, TaskModel, predict, select_top_p
from .semcom import (
    LsfDecision,
    RateGeometry,
    bits_per_index,
    build_mask,
    context_plus_task_rate_bits,
    context_rate_bits,
    extract_patch,
    full_latent_rate_bits,
    fuse,
    make_context,
    position_payload_bits,
    reproject_context,
)

MAGIC = b"TC"
VERSION = 1


class MsgType(IntEnum):
    CONTEXT_ONLY = 0
    CONTEXT_PLUS_TASK = 1
    FULL_LATENT = 2
    TASK_PATCH = 3
    MORE_INFO_REQUEST = 4
    REGION_REQUEST = 5


def pack_bits(values, bits: int) -> bytes:
    """Pack ints into a big-endian bitstream, zero-padded to a byte boundary."""
    acc = 0
    n = 0
    out = bytearray()
    for v in values:
        v = int(v)
        if v < 0 or v >= (1 << bits):
            raise FormatError(f"value {v} does not fit in {bits} bits")
        acc = (acc << bits) | v
        n += bits
        while n >= 8:
            n -= 8
            out.append((acc >> n) & 0xFF)
    if n:
        out.append((acc << (8 - n)) & 0xFF)
    return bytes(out)


def unpack_bits(data: bytes, bits: int, count: int) -> list[int]:
    acc = 0
    n = 0
    pos = 0
    out = []
    for _ in range(count):
        while n < bits:
            if pos >= len(data):
                raise FormatError("bitstream truncated")
            acc = (acc << 8) | data[pos]
            pos += 1
            n += 8
        n -= bits
        out.append((acc >> n) & ((1 << bits) - 1))
    return out


def _packed_len(count: int, bits: int) -> int:
    return (count * bits + 7) // 8


@dataclass(frozen=True)
class SemMessage:
    """One wire message; round-trips bit-exactly through serialize/deserialize."""

    msg_type: MsgType
    grid_h: int
    grid_w: int
    index_bits: int
    f_ctx: int = 1
    ctx_indices: tuple[int, ...] = ()   # row-major; CONTEXT_* types
    positions: tuple[tuple[int, int], ...] = ()  # CONTEXT_PLUS_TASK / TASK_PATCH
    patch_indices: tuple[int, ...] = ()          # aligned with positions
    full_indices: tuple[int, ...] = ()           # FULL_LATENT, row-major
    box: tuple[int, int, int, int] | None = None  # REGION_REQUEST, pixel coords

    def payload_bits(self) -> int:
        """Rate-accounted payload bits (headers and mode bytes excluded)."""
        b = self.index_bits
        t = self.msg_type
        if t == MsgType.CONTEXT_ONLY:
            return len(self.ctx_indices) * b
        if t == MsgType.FULL_LATENT:
            return self.grid_h * self.grid_w * b
        if t == MsgType.CONTEXT_PLUS_TASK:
            pos, _ = position_payload_bits(self.grid_h, self.grid_w, len(self.positions))
            return len(self.ctx_indices) * b + pos + len(self.patch_indices) * b
        if t == MsgType.TASK_PATCH:
            pos, _ = position_payload_bits(self.grid_h, self.grid_w, len(self.positions))
            return pos + len(self.patch_indices) * b
        if t == MsgType.REGION_REQUEST:
            return 64  # 4 pixel coordinates, 2 bytes each
        return 0  # MORE_INFO_REQUEST is pure control


def _canonical_patch(msg: SemMessage) -> tuple[tuple, tuple]:
    """Position/index pairs sorted row-major, the only order the wire carries.

    Bitmap-coded positions come back row-major no matter how they were
    produced, so the indices must be packed in that same order.
    """
    pairs = sorted(zip(msg.positions, msg.patch_indices))
    if not pairs:
        return (), ()
    positions, indices = zip(*pairs)
    return positions, indices


def _encode_positions(msg: SemMessage, positions) -> bytes:
    h, w = msg.grid_h, msg.grid_w
    count = len(positions)
    _, mode = position_payload_bits(h, w, count)
    if mode == "list":
        cell_bits = max(1, math.ceil(math.log2(h * w)))
        flat = [a * w + b for a, b in positions]
        return bytes([0]) + struct.pack(">H", count) + pack_bits(flat, cell_bits)
    bitmap = np.zeros(h * w, dtype=np.uint8)
    for a, b in positions:
        bitmap[a * w + b] = 1
    return bytes([1]) + pack_bits(bitmap.tolist(), 1)


def _decode_positions(buf: bytes, off: int, h: int, w: int):
    mode = buf[off]
    off += 1
    if mode == 0:
        (count,) = struct.unpack_from(">H", buf, off)
        off += 2
        cell_bits = max(1, math.ceil(math.log2(h * w)))
        nbytes = _packed_len(count, cell_bits)
        flat = unpack_bits(buf[off : off + nbytes], cell_bits, count)
        off += nbytes
        positions = tuple((v // w, v % w) for v in flat)
    elif mode == 1:
        nbytes = _packed_len(h * w, 1)
        bits = unpack_bits(buf[off : off + nbytes], 1, h * w)
        off += nbytes
        positions = tuple((i // w, i % w) for i, v in enumerate(bits) if v)
    else:
        raise FormatError(f"unknown position mode {mode}")
    return positions, off


def serialize(msg: SemMessage) -> bytes:
    if msg.grid_h > 0xFFFF or msg.grid_w > 0xFFFF:
        raise FormatError(f"grid {msg.grid_h}x{msg.grid_w} exceeds 16-bit dims")
    head = MAGIC + struct.pack(
        ">BBHHB", VERSION, int(msg.msg_type), msg.grid_h, msg.grid_w, msg.index_bits
    )
    b = msg.index_bits
    t = msg.msg_type
    if t == MsgType.CONTEXT_ONLY:
        body = pack_bits(msg.ctx_indices, b)
    elif t == MsgType.FULL_LATENT:
        body = pack_bits(msg.full_indices, b)
    elif t == MsgType.CONTEXT_PLUS_TASK:
        positions, patch = _canonical_patch(msg)
        body = bytes([msg.f_ctx])
        body += pack_bits(msg.ctx_indices, b)
        body += _encode_positions(msg, positions)
        body += pack_bits(patch, b)
    elif t == MsgType.TASK_PATCH:
        positions, patch = _canonical_patch(msg)
        body = _encode_positions(msg, positions) + pack_bits(patch, b)
    elif t == MsgType.REGION_REQUEST:
        body = struct.pack(">HHHH", *msg.box)
    elif t == MsgType.MORE_INFO_REQUEST:
        body = b""
    else:  # pragma: no cover
        raise FormatError(f"unknown message type {t}")
    return head + body


def deserialize(buf: bytes) -> SemMessage:
    if len(buf) < 9 or buf[:2] != MAGIC:
        raise FormatError("bad magic")
    version, mtype, h, w, b = struct.unpack_from(">BBHHB", buf, 2)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    t = MsgType(mtype)
    off = 9
    if t == MsgType.CONTEXT_ONLY:
        idx = tuple(unpack_bits(buf[off:], b, h * w))
        return SemMessage(t, h, w, b, ctx_indices=idx)
    if t == MsgType.FULL_LATENT:
        idx = tuple(unpack_bits(buf[off:], b, h * w))
        return SemMessage(t, h, w, b, full_indices=idx)
    if t == MsgType.CONTEXT_PLUS_TASK:
        f_ctx = buf[off]
        off += 1
        if h % f_ctx or w % f_ctx:
            raise FormatError(f"grid {h}x{w} not divisible by f_ctx={f_ctx}")
        n_ctx = (h // f_ctx) * (w // f_ctx)
        nbytes = _packed_len(n_ctx, b)
        ctx = tuple(unpack_bits(buf[off : off + nbytes], b, n_ctx))
        off += nbytes
        positions, off = _decode_positions(buf, off, h, w)
        patch = tuple(unpack_bits(buf[off:], b, len(positions)))
        return SemMessage(
            t, h, w, b, f_ctx=f_ctx, ctx_indices=ctx,
            positions=positions, patch_indices=patch,
        )
    if t == MsgType.TASK_PATCH:
        positions, off = _decode_positions(buf, off, h, w)
        patch = tuple(unpack_bits(buf[off:], b, len(positions)))
        return SemMessage(t, h, w, b, positions=positions, patch_indices=patch)
    if t == MsgType.REGION_REQUEST:
        box = struct.unpack_from(">HHHH", buf, off)
        return SemMessage(t, h, w, b, box=box)
    return SemMessage(t, h, w, b)  # MORE_INFO_REQUEST


class Channel:
    """Lossless FIFO byte channel with per-direction payload-bit counters."""

    def __init__(self):
        self.queue: deque[tuple[str, bytes]] = deque()
        self.sent_bits = {"tx": 0, "rx": 0}
        self.sent_bytes = {"tx": 0, "rx": 0}
        self.received_bits = {"tx": 0, "rx": 0}
        self.transcript: list[tuple[str, bytes]] = []

    def send(self, sender: str, msg: SemMessage) -> None:
        raw = serialize(msg)
        self.queue.append((sender, raw))
        self.transcript.append((sender, raw))
        self.sent_bits[sender] += msg.payload_bits()
        self.sent_bytes[sender] += len(raw)

    def recv(self, receiver: str) -> SemMessage:
        if not self.queue:
            raise ProtocolError("channel empty")
        sender, raw = self.queue.popleft()
        if sender == receiver:
            raise ProtocolError("message addressed to its own sender")
        msg = deserialize(raw)
        self.received_bits[sender] += msg.payload_bits()
        return msg

    def dump_transcript(self, path: str) -> None:
        with open(path, "wb") as fh:
            for sender, raw in self.transcript:
                fh.write(struct.pack(">cI", sender[:1].encode(), len(raw)))
                fh.write(raw)


@dataclass
class TransmitterState:
    codec: CodecModel
    task: TaskModel
    x: Image
    importance: ImportanceGrid | None
    f_ctx: int = 4
    search_set: tuple = (10, 20, 30, 50, 70, 90, 100)
    round: int = 0
    current_p: float | None = None
    sent_cells: set = field(default_factory=set)
    sent_full: bool = False

    def __post_init__(self):
        self.geom = RateGeometry.from_image(
            self.x.height, self.x.width, self.codec.config.f_model, self.f_ctx
        )
        self.z = encode(self.codec, self.x)
        self.ctx = make_context(self.codec, self.x, self.f_ctx)

    @property
    def index_bits(self) -> int:
        return bits_per_index(self.codec.config.codebook_size)


@dataclass
class ReceiverState:
    codec: CodecModel
    task: TaskModel
    confidence_threshold: float = 0.85
    round: int = 0
    f_ctx: int = 1
    grid: tuple[int, int] | None = None
    z_u: LatentGrid | None = None
    z_full: LatentGrid | None = None
    patches: dict = field(default_factory=dict)

    def reconstruct(self) -> Image:
        if self.z_full is not None:
            return decode(self.codec, self.z_full)
        if self.z_u is None:
            raise ProtocolError("no context received yet")
        mask = build_mask(tuple(self.patches.keys()), *self.z_u.indices.shape)
        return decode(self.codec, fuse(self.z_u, self.patches, mask))


def _context_tuple(ctx_grid: LatentGrid) -> tuple[int, ...]:
    return tuple(int(v) for v in ctx_grid.indices.reshape(-1))


def build_message(tx: TransmitterState, decision: LsfDecision) -> SemMessage:
    g = tx.geom
    b = tx.index_bits
    if decision.mode == "context_only":
        return SemMessage(
            MsgType.CONTEXT_ONLY, g.ctx_h, g.ctx_w, b,
            ctx_indices=_context_tuple(tx.ctx.z_c),
        )
    if decision.mode == "full_latent":
        return SemMessage(
            MsgType.FULL_LATENT, g.grid_h, g.grid_w, b,
            full_indices=tuple(int(v) for v in tx.z.indices.reshape(-1)),
        )
    patch = extract_patch(tx.z, decision.selected)
    return SemMessage(
        MsgType.CONTEXT_PLUS_TASK, g.grid_h, g.grid_w, b, f_ctx=tx.f_ctx,
        ctx_indices=_context_tuple(tx.ctx.z_c),
        positions=tuple(decision.selected),
        patch_indices=tuple(patch[c] for c in decision.selected),
    )


def transmit_round(tx: TransmitterState, decision: LsfDecision, ch: Channel) -> None:
    """Send the message matching an LSF decision and update transmitter state."""
    msg = build_message(tx, decision)
    ch.send("tx", msg)
    tx.round += 1
    if decision.mode == "full_latent":
        tx.sent_full = True
        tx.current_p = 100
    elif decision.mode == "context_plus_task":
        tx.current_p = decision.p
        tx.sent_cells.update(decision.selected)
    else:
        tx.current_p = None


def receive_and_reconstruct(rx: ReceiverState, msg: SemMessage) -> Image:
    """Fold one message into receiver state and return the reconstruction."""
    rx.round += 1
    t = msg.msg_type
    if t == MsgType.FULL_LATENT:
        h, w = msg.grid_h, msg.grid_w
        hw = h * w * rx.codec.config.f_model
        ww = w * rx.codec.config.f_model
        rx.grid = (h, w)
        rx.z_full = LatentGrid(
            np.array(msg.full_indices, dtype=np.int64).reshape(h, w), (hw, ww)
        )
        return rx.reconstruct()
    if t == MsgType.CONTEXT_ONLY:
        # header dims describe the context grid; reprojection restores the
        # full-image grid by the context factor agreed out of band
        ch_, cw = msg.grid_h, msg.grid_w
        f = rx.f_ctx
        src = (ch_ * rx.codec.config.f_model, cw * rx.codec.config.f_model)
        z_c = LatentGrid(
            np.array(msg.ctx_indices, dtype=np.int64).reshape(ch_, cw), src
        )
        rx.grid = (ch_ * f, cw * f)
        rx.z_u = reproject_context(rx.codec, z_c, f)
        rx.patches = {}
        return rx.reconstruct()
    if t == MsgType.CONTEXT_PLUS_TASK:
        h, w = msg.grid_h, msg.grid_w
        f = msg.f_ctx
        rx.f_ctx = f
        ch_, cw = h // f, w // f
        src = (ch_ * rx.codec.config.f_model, cw * rx.codec.config.f_model)
        z_c = LatentGrid(
            np.array(msg.ctx_indices, dtype=np.int64).reshape(ch_, cw), src
        )
        rx.grid = (h, w)
        rx.z_u = reproject_context(rx.codec, z_c, f)
        rx.patches = dict(zip(msg.positions, (int(v) for v in msg.patch_indices)))
        return rx.reconstruct()
    if t == MsgType.TASK_PATCH:
        if rx.z_u is None and rx.z_full is None:
            raise ProtocolError("TASK_PATCH before any context message")
        if rx.grid != (msg.grid_h, msg.grid_w):
            raise ProtocolError(
                f"patch grid {msg.grid_h}x{msg.grid_w} does not match session {rx.grid}"
            )
        rx.patches.update(zip(msg.positions, (int(v) for v in msg.patch_indices)))
        return rx.reconstruct()
    raise ProtocolError(f"receiver cannot reconstruct from {t.name}")


def confidence_gate(
    rx: ReceiverState, task: TaskModel, x_hat: Image
) -> SemMessage | None:
    """Request more cells while the task's max softmax sits below threshold."""
    _, probs = predict(task, x_hat)
    if float(probs.max()) < rx.confidence_threshold and rx.grid is not None:
        return SemMessage(
            MsgType.MORE_INFO_REQUEST, rx.grid[0], rx.grid[1],
            bits_per_index(rx.codec.config.codebook_size),
        )
    return None


def answer_more_info(tx: TransmitterState, ch: Channel) -> bool:
    """Send the next-higher percentage as delta cells; FULL_LATENT is absorbing.

    Returns False once everything has been sent already.
    """
    if tx.sent_full:
        return False
    candidates = [p for p in sorted(tx.search_set) if tx.current_p is None or p > tx.current_p]
    g, b = tx.geom, tx.index_bits
    if not candidates:
        ch.send("tx", build_message(tx, LsfDecision("full_latent", 100, 0, True)))
        tx.sent_full = True
        tx.round += 1
        return True
    p = candidates[0]
    selected = select_top_p(tx.importance, p)
    delta = tuple(c for c in selected if c not in tx.sent_cells)
    msg = SemMessage(
        MsgType.TASK_PATCH, g.grid_h, g.grid_w, b,
        positions=delta,
        patch_indices=tuple(int(tx.z.indices[a, bb]) for a, bb in delta),
    )
    ch.send("tx", msg)
    tx.round += 1
    tx.current_p = p
    tx.sent_cells.update(delta)
    if len(tx.sent_cells) == tx.geom.grid_h * tx.geom.grid_w:
        tx.sent_full = True
    return True


def pixel_box_to_cells(
    box: tuple[int, int, int, int], f_model: int, grid_h: int, grid_w: int
) -> tuple[tuple[int, int], ...]:
    """Map a half-open pixel box to the latent cells it touches."""
    r0, c0, r1, c1 = box
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"empty region box {box}")
    a0, b0 = r0 // f_model, c0 // f_model
    a1 = min(grid_h, -(-r1 // f_model))
    b1 = min(grid_w, -(-c1 // f_model))
    return tuple((a, b) for a in range(a0, a1) for b in range(b0, b1))


def region_request_round(
    rx: ReceiverState, tx: TransmitterState, box: tuple[int, int, int, int], ch: Channel
) -> Image:
    """Receiver asks for a pixel region; transmitter answers with its latent cells."""
    g, b = tx.geom, tx.index_bits
    req = SemMessage(MsgType.REGION_REQUEST, g.grid_h, g.grid_w, b, box=tuple(box))
    ch.send("rx", req)
    seen = ch.recv("tx")
    cells = pixel_box_to_cells(seen.box, tx.codec.config.f_model, g.grid_h, g.grid_w)
    fresh = tuple(c for c in cells if c not in tx.sent_cells)
    resp = SemMessage(
        MsgType.TASK_PATCH, g.grid_h, g.grid_w, b,
        positions=fresh,
        patch_indices=tuple(int(tx.z.indices[a, bb]) for a, bb in fresh),
    )
    ch.send("tx", resp)
    tx.round += 1
    tx.sent_cells.update(fresh)
    return receive_and_reconstruct(rx, ch.recv("rx"))
