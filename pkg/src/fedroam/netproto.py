"""Synchronous federated rounds across real processes: one aggregation
server, K clients, a length-prefixed binary wire protocol.

Frame layout: u32 big-endian payload length, u8 message type, payload.
Parameter payloads embed the model file format verbatim, so a wire round is
bit-equivalent to the in-process simulation: the server holds no data and no
image bytes ever cross the wire.

Per-message payload encodings are little-endian; strings are u16-length
prefixed UTF-8.
"""

from __future__ import annotations

import socket
import struct
import time
from dataclasses import dataclass
from typing import Union

from . import fl, nn
from .data import Dataset
from .seeds import component

MAX_FRAME = 64 * 1024 * 1024
DEFAULT_PORT = 7180

MSG_JOIN_REQUEST = 1
MSG_JOIN_ACCEPT = 2
MSG_GLOBAL_MODEL = 3
MSG_LOCAL_UPDATE = 4
MSG_ROUND_COMPLETE = 5
MSG_SHUTDOWN = 6
MSG_ERROR = 7

ERR_DUPLICATE_ID = 1
ERR_ARCH_MISMATCH = 2
ERR_PROTOCOL = 3
ERR_INTERNAL = 4


class ProtocolError(Exception):
    """Wire-protocol violation."""


class OversizeFrameError(ProtocolError):
    pass


class UnknownMessageTypeError(ProtocolError):
    pass


class MalformedMessageError(ProtocolError):
    pass


class RejectedError(ProtocolError):
    """Server refused this client (duplicate id, arch mismatch, ...)."""

    def __init__(self, code: int, text: str):
        super().__init__(f"rejected by server (code {code}): {text}")
        self.code = code
        self.text = text


class AbortedRunError(ProtocolError):
    """A client vanished mid-round; the run stops with partial reports."""

    def __init__(self, round_index: int, reports: list[fl.RoundReport], cause: str):
        super().__init__(f"run aborted in round {round_index}: {cause}")
        self.round_index = round_index
        self.reports = reports


# ---------------------------------------------------------------------------
# Messages


@dataclass(frozen=True)
class JoinRequest:
    client_id: str
    sample_count: int
    arch_checksum: int


@dataclass(frozen=True)
class JoinAccept:
    cfg: fl.RoundConfig
    seed_salt: int     # stream token the server assigned to this client


@dataclass(frozen=True)
class GlobalModel:
    round_index: int
    params_bytes: bytes


@dataclass(frozen=True)
class LocalUpdate:
    round_index: int
    client_id: str
    sample_count: int
    params_bytes: bytes
    final_loss: float


@dataclass(frozen=True)
class RoundComplete:
    round_index: int


@dataclass(frozen=True)
class Shutdown:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    text: str


Message = Union[JoinRequest, JoinAccept, GlobalModel, LocalUpdate,
                RoundComplete, Shutdown, Error]


# ---------------------------------------------------------------------------
# Encoding


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for wire format")
    return struct.pack("<H", len(raw)) + raw


class _Reader:
    """Strict cursor over a payload; any short read is a protocol error."""

    def __init__(self, payload: bytes, what: str):
        self.payload = payload
        self.offset = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.payload):
            raise MalformedMessageError(f"{self.what}: payload ends early "
                                        f"(need {n} bytes at offset {self.offset})")
        out = self.payload[self.offset:self.offset + n]
        self.offset += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def take_str(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def rest(self) -> bytes:
        out = self.payload[self.offset:]
        self.offset = len(self.payload)
        return out

    def done(self):
        if self.offset != len(self.payload):
            raise MalformedMessageError(
                f"{self.what}: {len(self.payload) - self.offset} trailing payload bytes")


def encode(msg: Message) -> bytes:
    """Full frame bytes (header included) for one message."""
    if isinstance(msg, JoinRequest):
        mtype = MSG_JOIN_REQUEST
        payload = _pack_str(msg.client_id) + struct.pack("<QI", msg.sample_count,
                                                         msg.arch_checksum)
    elif isinstance(msg, JoinAccept):
        c = msg.cfg
        mtype = MSG_JOIN_ACCEPT
        payload = struct.pack("<IIIdQQ", c.rounds, c.local_epochs, c.batch_size,
                              c.lr, c.seed & (2**64 - 1), msg.seed_salt)
    elif isinstance(msg, GlobalModel):
        mtype = MSG_GLOBAL_MODEL
        payload = struct.pack("<I", msg.round_index) + msg.params_bytes
    elif isinstance(msg, LocalUpdate):
        mtype = MSG_LOCAL_UPDATE
        payload = (struct.pack("<I", msg.round_index) + _pack_str(msg.client_id)
                   + struct.pack("<Qd", msg.sample_count, msg.final_loss)
                   + msg.params_bytes)
    elif isinstance(msg, RoundComplete):
        mtype = MSG_ROUND_COMPLETE
        payload = struct.pack("<I", msg.round_index)
    elif isinstance(msg, Shutdown):
        mtype = MSG_SHUTDOWN
        payload = b""
    elif isinstance(msg, Error):
        mtype = MSG_ERROR
        payload = struct.pack("<H", msg.code) + _pack_str(msg.text)
    else:
        raise TypeError(f"not a wire message: {msg!r}")
    if len(payload) > MAX_FRAME:
        raise OversizeFrameError(f"payload of {len(payload)} bytes exceeds {MAX_FRAME}")
    return struct.pack(">I", len(payload)) + bytes([mtype]) + payload


def decode(frame: bytes) -> Message:
    """Parse one full frame; rejects oversize lengths before any payload use."""
    if len(frame) < 5:
        raise MalformedMessageError(f"frame of {len(frame)} bytes has no header")
    (length,) = struct.unpack(">I", frame[:4])
    if length > MAX_FRAME:
        raise OversizeFrameError(f"frame declares {length} bytes, cap is {MAX_FRAME}")
    mtype = frame[4]
    if len(frame) - 5 != length:
        raise MalformedMessageError(
            f"frame declares {length} payload bytes but carries {len(frame) - 5}")
    payload = frame[5:]
    if mtype == MSG_JOIN_REQUEST:
        r = _Reader(payload, "JoinRequest")
        client_id = r.take_str()
        count, crc = r.unpack("<QI")
        r.done()
        return JoinRequest(client_id, count, crc)
    if mtype == MSG_JOIN_ACCEPT:
        r = _Reader(payload, "JoinAccept")
        rounds, epochs, batch, lr, seed, salt = r.unpack("<IIIdQQ")
        r.done()
        try:
            cfg = fl.RoundConfig(rounds, epochs, batch, lr, seed)
        except ValueError as e:
            raise MalformedMessageError(f"JoinAccept carries invalid config: {e}") from e
        return JoinAccept(cfg, salt)
    if mtype == MSG_GLOBAL_MODEL:
        r = _Reader(payload, "GlobalModel")
        (round_index,) = r.unpack("<I")
        return GlobalModel(round_index, r.rest())
    if mtype == MSG_LOCAL_UPDATE:
        r = _Reader(payload, "LocalUpdate")
        (round_index,) = r.unpack("<I")
        client_id = r.take_str()
        count, loss = r.unpack("<Qd")
        return LocalUpdate(round_index, client_id, count, r.rest(), loss)
    if mtype == MSG_ROUND_COMPLETE:
        r = _Reader(payload, "RoundComplete")
        (round_index,) = r.unpack("<I")
        r.done()
        return RoundComplete(round_index)
    if mtype == MSG_SHUTDOWN:
        _Reader(payload, "Shutdown").done()
        return Shutdown()
    if mtype == MSG_ERROR:
        r = _Reader(payload, "Error")
        (code,) = r.unpack("<H")
        text = r.take_str()
        r.done()
        return Error(code, text)
    raise UnknownMessageTypeError(f"unknown message type 0x{mtype:02x}")


# ---------------------------------------------------------------------------
# Socket plumbing


class CountingConnection:
    """Socket wrapper moving whole frames and metering both directions."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.bytes_sent = 0
        self.bytes_received = 0

    def send_msg(self, msg: Message) -> None:
        frame = encode(msg)
        self.sock.sendall(frame)
        self.bytes_sent += len(frame)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("connection closed mid-frame")
            buf.extend(chunk)
        self.bytes_received += n
        return bytes(buf)

    def recv_msg(self) -> Message:
        header = self._recv_exact(4)
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME:
            raise OversizeFrameError(f"frame declares {length} bytes, cap is {MAX_FRAME}")
        rest = self._recv_exact(1 + length)
        return decode(header + rest)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class ClientHandle:
    client_id: str
    conn: CountingConnection
    sample_count: int


@dataclass
class ServeResult:
    params: nn.ModelParams
    reports: list[fl.RoundReport]
    bytes_sent_per_round: list[int]
    bytes_received_per_round: list[int]


class FLServer:
    """Aggregation server: holds no data, only fuses parameter vectors.

    Binds in the constructor (so ``port`` is known before ``run``), waits for
    ``expected_clients`` distinct joins, then drives synchronous rounds. The
    result is bit-identical to ``fl.run_federated`` with the same
    configuration and client datasets.
    """

    def __init__(self, bind: tuple[str, int], expected_clients: int,
                 cfg: fl.RoundConfig, arch: nn.ArchDescriptor | None = None):
        if expected_clients < 1:
            raise ValueError("expected_clients must be >= 1")
        self.cfg = cfg
        self.arch = arch or nn.default_arch()
        self.expected_clients = expected_clients
        self.listener = socket.create_server(bind)
        self.port = self.listener.getsockname()[1]

    def _register_clients(self) -> list[ClientHandle]:
        clients: dict[str, ClientHandle] = {}
        expected_crc = nn.arch_checksum(self.arch)
        while len(clients) < self.expected_clients:
            sock, _ = self.listener.accept()
            conn = CountingConnection(sock)
            try:
                msg = conn.recv_msg()
            except (ProtocolError, ConnectionError, OSError):
                conn.close()
                continue
            if not isinstance(msg, JoinRequest):
                conn.send_msg(Error(ERR_PROTOCOL, f"expected JoinRequest, got {type(msg).__name__}"))
                conn.close()
                continue
            if msg.client_id in clients:
                conn.send_msg(Error(ERR_DUPLICATE_ID, f"client id {msg.client_id!r} already joined"))
                conn.close()
                continue
            if msg.arch_checksum != expected_crc:
                conn.send_msg(Error(ERR_ARCH_MISMATCH,
                                    f"arch checksum {msg.arch_checksum:#x} != {expected_crc:#x}"))
                conn.close()
                continue
            conn.send_msg(JoinAccept(self.cfg, component(msg.client_id)))
            clients[msg.client_id] = ClientHandle(msg.client_id, conn, msg.sample_count)
        return sorted(clients.values(), key=lambda h: h.client_id)

    def run(self) -> ServeResult:
        try:
            handles = self._register_clients()
        finally:
            self.listener.close()
        reports: list[fl.RoundReport] = []
        sent_per_round: list[int] = []
        recv_per_round: list[int] = []
        try:
            global_params = nn.init_params(self.arch, self.cfg.seed)
            for r in range(self.cfg.rounds):
                t0 = time.perf_counter()
                sent0 = sum(h.conn.bytes_sent for h in handles)
                recv0 = sum(h.conn.bytes_received for h in handles)
                blob = nn.serialize_params(global_params)
                updates: list[LocalUpdate] = []
                try:
                    for h in handles:
                        h.conn.send_msg(GlobalModel(r, blob))
                    for h in handles:
                        msg = h.conn.recv_msg()
                        if not isinstance(msg, LocalUpdate):
                            raise ProtocolError(
                                f"expected LocalUpdate from {h.client_id!r}, got {type(msg).__name__}")
                        if msg.round_index != r or msg.client_id != h.client_id:
                            raise ProtocolError(
                                f"update for round {msg.round_index} from {msg.client_id!r}, "
                                f"expected round {r} from {h.client_id!r}")
                        updates.append(msg)
                except (ConnectionError, OSError, ProtocolError) as e:
                    raise AbortedRunError(r, reports, str(e)) from e
                try:
                    parsed = [(nn.deserialize_params(u.params_bytes), u.sample_count)
                              for u in updates]
                except nn.ModelFormatError as e:
                    raise AbortedRunError(r, reports, f"update payload unparseable: {e}") from e
                # Handles are already in canonical id order, so fusion order
                # matches the in-process run.
                fused = fl.fedavg(parsed, uniform=self.cfg.uniform_weighting)
                global_params = fused
                reports.append(fl.RoundReport(
                    round_index=r,
                    client_stats=tuple((u.client_id, u.final_loss, u.sample_count)
                                       for u in updates),
                    global_checksum=nn.params_checksum(global_params),
                    wall_time_s=time.perf_counter() - t0,
                    traffic_bytes=fl.round_traffic_bytes(global_params, len(handles)),
                ))
                for h in handles:
                    h.conn.send_msg(RoundComplete(r))
                sent_per_round.append(sum(h.conn.bytes_sent for h in handles) - sent0)
                recv_per_round.append(sum(h.conn.bytes_received for h in handles) - recv0)
            for h in handles:
                h.conn.send_msg(Shutdown())
            return ServeResult(global_params, reports, sent_per_round, recv_per_round)
        finally:
            for h in handles:
                h.conn.close()


def serve(bind: tuple[str, int], expected_clients: int, cfg: fl.RoundConfig,
          arch: nn.ArchDescriptor | None = None) -> ServeResult:
    return FLServer(bind, expected_clients, cfg, arch).run()


@dataclass
class JoinReport:
    client_id: str
    rounds_completed: int
    final_loss: float
    bytes_sent: int
    bytes_received: int


def join(server: tuple[str, int], client_id: str, dataset: Dataset,
         arch: nn.ArchDescriptor | None = None, retries: int = 3,
         backoff_s: float = 1.0) -> JoinReport:
    """Participate in a served run: local-train every broadcast model and
    reply with parameters only (never image bytes)."""
    arch = arch or nn.default_arch()
    client = fl.ClientState(client_id, dataset)

    last_err: Exception | None = None
    sock = None
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection(server, timeout=600.0)
            break
        except (ConnectionRefusedError, ConnectionResetError, OSError) as e:
            last_err = e
            if attempt < retries:
                time.sleep(backoff_s)
    if sock is None:
        raise ConnectionError(f"could not reach server {server}: {last_err}")

    conn = CountingConnection(sock)
    rounds_done = 0
    final_loss = float("nan")
    try:
        conn.send_msg(JoinRequest(client_id, client.sample_count, nn.arch_checksum(arch)))
        msg = conn.recv_msg()
        if isinstance(msg, Error):
            raise RejectedError(msg.code, msg.text)
        if not isinstance(msg, JoinAccept):
            raise ProtocolError(f"expected JoinAccept, got {type(msg).__name__}")
        cfg = msg.cfg
        if msg.seed_salt != component(client_id):
            raise ProtocolError("server assigned a seed stream for a different client id")
        last_round = -1
        while True:
            msg = conn.recv_msg()
            if isinstance(msg, Shutdown):
                break
            if isinstance(msg, Error):
                raise RejectedError(msg.code, msg.text)
            if isinstance(msg, RoundComplete):
                if msg.round_index < last_round:
                    raise ProtocolError("round numbers must not decrease")
                continue
            if isinstance(msg, GlobalModel):
                if msg.round_index < last_round:
                    raise ProtocolError("round numbers must not decrease")
                last_round = msg.round_index
                try:
                    params = nn.deserialize_params(msg.params_bytes)
                except nn.ModelFormatError as e:
                    raise ProtocolError(f"global model payload unparseable: {e}") from e
                trained, count, loss = fl.local_train(params, client, cfg,
                                                      round_index=msg.round_index)
                conn.send_msg(LocalUpdate(msg.round_index, client_id, count,
                                          nn.serialize_params(trained), loss))
                rounds_done += 1
                final_loss = loss
                continue
            raise ProtocolError(f"unexpected {type(msg).__name__} from server")
    finally:
        conn.close()
    return JoinReport(client_id, rounds_done, final_loss,
                      conn.bytes_sent, conn.bytes_received)
