"""Datagram bridge between a plant and the trained policies.

Wire format (all little-endian):

    measurement  "FGMV" u8 version=1, u8 type=0x01, u8 agent, u32 seq, f64 sim_time, u16 n, n x f64
    set-point    "FGMV" u8 version=1, u8 type=0x02, u8 agent, u32 seq, u16 n, n x f64

A measurement carries raw p.u. voltage magnitudes in bus-major order
(GFM phases a, b, c then GFL phases a, b, c); a set-point carries the gated
voltage correction and echoes the measurement's seq.
"""
from __future__ import annotations

import json
import logging
import math
import select
import signal
import socket
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import grid
from .env import EnvConfig, MicrogridEnv, action_gate
from .fedsac import DETERMINISTIC, select_action

log = logging.getLogger(__name__)

MAGIC = b"FGMV"
VERSION = 1
MSG_MEASUREMENT = 0x01
MSG_SETPOINT = 0x02
_MEAS = struct.Struct("<4sBBBIdH")
_SETP = struct.Struct("<4sBBBIH")
MEAS_HEADER = _MEAS.size   # 21
SETP_HEADER = _SETP.size   # 13
MAX_DATAGRAM = 65507


class DecodeError(ValueError):
    def __init__(self, code: str, msg: str = ""):
        super().__init__(f"{code}: {msg}" if msg else code)
        self.code = code


BAD_MAGIC, BAD_VERSION, BAD_LENGTH, NON_FINITE, BAD_TYPE = "BadMagic", "BadVersion", "BadLength", "NonFinite", "BadType"


@dataclass(frozen=True)
class MeasurementPacket:
    agent_id: int
    seq: int
    sim_time: float
    values: tuple[float, ...]


@dataclass(frozen=True)
class SetpointPacket:
    agent_id: int
    seq: int
    values: tuple[float, ...]


def _check_fields(agent_id: int, seq: int, n: int) -> None:
    if not 0 <= agent_id <= 0xFF or not 0 <= seq <= 0xFFFFFFFF or not 0 <= n <= 0xFFFF:
        raise ValueError("agent id, seq or value count out of range for the wire format")


def encode(pkt) -> bytes:
    if not isinstance(pkt, (MeasurementPacket, SetpointPacket)):
        raise TypeError(f"cannot encode {type(pkt).__name__}")
    vals = np.asarray(pkt.values, dtype="<f8")
    _check_fields(pkt.agent_id, pkt.seq, len(vals))
    if isinstance(pkt, MeasurementPacket):
        head = _MEAS.pack(MAGIC, VERSION, MSG_MEASUREMENT, pkt.agent_id, pkt.seq, pkt.sim_time, len(vals))
    else:
        head = _SETP.pack(MAGIC, VERSION, MSG_SETPOINT, pkt.agent_id, pkt.seq, len(vals))
    return head + vals.tobytes()


def decode(data: bytes):
    """Parse one datagram; raises DecodeError (and nothing else) on any malformed input."""
    data = bytes(data)
    if len(data) < SETP_HEADER:
        raise DecodeError(BAD_LENGTH, f"{len(data)} bytes is shorter than any header")
    if data[:4] != MAGIC:
        raise DecodeError(BAD_MAGIC)
    if data[4] != VERSION:
        raise DecodeError(BAD_VERSION, f"version {data[4]}")
    kind = data[5]
    if kind == MSG_MEASUREMENT:
        if len(data) < MEAS_HEADER:
            raise DecodeError(BAD_LENGTH, "truncated measurement header")
        _, _, _, agent, seq, sim_time, n = _MEAS.unpack_from(data)
        head = MEAS_HEADER
    elif kind == MSG_SETPOINT:
        _, _, _, agent, seq, n = _SETP.unpack_from(data)
        sim_time = 0.0
        head = SETP_HEADER
    else:
        raise DecodeError(BAD_TYPE, f"message type {kind:#04x}")
    if len(data) != head + 8 * n:
        raise DecodeError(BAD_LENGTH, f"{len(data)} bytes for {n} values")
    vals = np.frombuffer(data, dtype="<f8", count=n, offset=head)
    if not (math.isfinite(sim_time) and np.all(np.isfinite(vals))):
        raise DecodeError(NON_FINITE)
    values = tuple(float(v) for v in vals)
    if kind == MSG_MEASUREMENT:
        return MeasurementPacket(agent, seq, sim_time, values)
    return SetpointPacket(agent, seq, values)


def try_decode(data: bytes):
    """(packet, None) or (None, error code)."""
    try:
        return decode(data), None
    except DecodeError as exc:
        return None, exc.code


# --------------------------------------------------------------------------- #
# server
# --------------------------------------------------------------------------- #
class PolicyPipeline:
    """normalize -> deterministic policy -> gate, exactly as the environment applies it."""

    def __init__(self, checkpoint):
        self.ckpt = checkpoint
        cfg = checkpoint.env_cfg()
        self.phases = cfg.phases
        self.gate_threshold = cfg.gate_threshold
        self.bound = cfg.action_bound
        self.v_ss = [np.repeat(np.asarray(v, dtype=np.float64), self.phases) for v in checkpoint.v_ss]

    def n_values(self, agent_id: int) -> int:
        return self.v_ss[agent_id].shape[0]

    def __call__(self, agent_id: int, raw) -> float:
        obs = np.asarray(raw, dtype=np.float64) / self.v_ss[agent_id]
        u = select_action(self.ckpt.agents[agent_id], obs, DETERMINISTIC)
        return action_gate(u, obs, self.gate_threshold, self.bound)


class PolicyServer:
    def __init__(self, checkpoint, bind=("127.0.0.1", 0)):
        self.pipeline = PolicyPipeline(checkpoint)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.bind(tuple(bind))
        except OSError as exc:
            self.sock.close()
            raise OSError(exc.errno, f"cannot bind policy server to {bind[0]}:{bind[1]}: {exc.strerror}") from exc
        self.address = self.sock.getsockname()
        self.last_seq: dict[tuple, int] = {}   # (sender, agent) -> highest seq answered
        self.stats = Counter()
        self.latency_max = 0.0
        self.latency_sum = 0.0
        self._stop = threading.Event()

    def handle(self, data: bytes, sender=None) -> bytes | None:
        """Reply bytes for one datagram, or None when it is dropped.

        Sequence numbers must increase per (sender, agent); a new client
        socket therefore starts a fresh watermark.
        """
        self.stats["received"] += 1
        pkt, err = try_decode(data)
        if err is not None:
            self.stats[f"drop_{err}"] += 1
            return None
        if not isinstance(pkt, MeasurementPacket):
            self.stats[f"drop_{BAD_TYPE}"] += 1
            return None
        if pkt.agent_id >= len(self.pipeline.v_ss) or len(pkt.values) != self.pipeline.n_values(pkt.agent_id):
            self.stats["drop_BadShape"] += 1
            return None
        key = (sender, pkt.agent_id)
        if pkt.seq <= self.last_seq.get(key, -1):
            self.stats["drop_Replay"] += 1
            return None
        self.last_seq[key] = pkt.seq
        action = self.pipeline(pkt.agent_id, pkt.values)
        self.stats["replied"] += 1
        return encode(SetpointPacket(pkt.agent_id, pkt.seq, (action,)))

    def serve_forever(self, poll: float = 0.05) -> None:
        while not self._stop.is_set():
            ready, _, _ = select.select([self.sock], [], [], poll)
            if not ready:
                continue
            try:
                data, addr = self.sock.recvfrom(MAX_DATAGRAM)
            except OSError:
                continue
            t0 = time.perf_counter()
            try:
                reply = self.handle(data, addr)
            except Exception:  # a packet must never take the server down
                log.exception("unexpected error handling packet from %s", addr)
                self.stats["drop_Internal"] += 1
                reply = None
            if reply is not None:
                try:
                    self.sock.sendto(reply, addr)
                except OSError as exc:
                    log.warning("reply to %s failed: %s", addr, exc)
                    self.stats["send_errors"] += 1
            dt = time.perf_counter() - t0
            self.latency_max = max(self.latency_max, dt)
            self.latency_sum += dt

    def start(self) -> threading.Thread:
        th = threading.Thread(target=self.serve_forever, daemon=True)
        th.start()
        return th

    def stop(self) -> None:
        self._stop.set()

    def close(self) -> dict:
        self.stop()
        self.sock.close()
        return self.summary()

    def summary(self) -> dict:
        n = max(self.stats["received"], 1)
        drops = {k[5:]: v for k, v in sorted(self.stats.items()) if k.startswith("drop_")}
        return {"received": self.stats["received"], "replied": self.stats["replied"], "dropped": drops,
                "latency_ms_max": self.latency_max * 1e3, "latency_ms_mean": self.latency_sum / n * 1e3}


def serve(checkpoint, bind, stop_event: threading.Event | None = None, out=None) -> dict:
    """Run a policy server until ``stop_event`` is set or interrupted; prints one JSON stats line."""
    server = PolicyServer(checkpoint, bind)
    log.info("policy server listening on %s:%d", *server.address)
    if stop_event is not None:
        threading.Thread(target=lambda: (stop_event.wait(), server.stop()), daemon=True).start()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: server.stop())
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    stats = server.close()
    print(json.dumps(stats, sort_keys=True), file=out, flush=True)
    return stats


# --------------------------------------------------------------------------- #
# loopback plant
# --------------------------------------------------------------------------- #
class TransportAbort(RuntimeError):
    pass


def measurement_values(raw_bus_voltages, phases: int = 3) -> np.ndarray:
    return np.repeat(np.asarray(raw_bus_voltages, dtype=np.float64), phases)


def loopback_client(model: grid.NetworkModel, scenario, server_address, env_cfg: EnvConfig | None = None,
                    horizon: int | None = None, timeout: float = 0.1, abort_after: int | None = None,
                    seq_start: int = 0):
    """Drive the built-in simulator through the wire path.

    Every step sends one measurement per agent and waits for the matching
    set-point; a missing reply applies a zero action and flags the step.
    ``abort_after`` consecutive fully timed-out steps raise TransportAbort,
    whose ``rows`` attribute holds the partial trajectory.
    Returns (trajectory rows, gated action matrix, timeout flags).
    """
    cfg = env_cfg or EnvConfig()
    if horizon is not None:
        cfg = EnvConfig(**{**cfg.__dict__, "episode_length": int(horizon)})
    env = MicrogridEnv(model, cfg, record=True)
    env.reset(scenario)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(timeout)
    rows, actions, flags = [], [], []
    seq = int(seq_start)
    missed_in_row = 0
    try:
        while not env.done:
            raw = env.raw_voltages()
            act = np.zeros(env.n_agents)
            timed_out = False
            for k in range(env.n_agents):
                seq += 1
                pkt = MeasurementPacket(k, seq, env.t * cfg.dt, tuple(measurement_values(raw[k], cfg.phases)))
                reply = _exchange(sock, server_address, encode(pkt), k, seq, timeout)
                if reply is None:
                    timed_out = True
                else:
                    act[k] = reply.values[0]
            missed_in_row = missed_in_row + 1 if timed_out else 0
            res = env.step(act)
            n_before = len(rows)
            rows.extend(env.rows[len(rows):])
            for r in rows[n_before:]:
                r["timeout"] = int(timed_out)
            actions.append(res.info["gated_actions"])
            flags.append(timed_out)
            if abort_after is not None and missed_in_row >= abort_after:
                err = TransportAbort(f"no reply from {server_address[0]}:{server_address[1]} "
                                     f"for {missed_in_row} consecutive steps")
                err.rows = rows
                raise err
    finally:
        sock.close()
    return rows, np.array(actions), np.array(flags, dtype=bool)


def _exchange(sock, address, payload: bytes, agent_id: int, seq: int, timeout: float):
    try:
        sock.sendto(payload, tuple(address))
    except OSError:
        return None
    deadline = time.monotonic() + timeout
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return None
        sock.settimeout(remaining)
        try:
            data, _ = sock.recvfrom(MAX_DATAGRAM)
        except (socket.timeout, OSError):
            return None
        pkt, err = try_decode(data)
        if err is None and isinstance(pkt, SetpointPacket) and pkt.agent_id == agent_id and pkt.seq == seq \
                and len(pkt.values) == 1:
            return pkt
