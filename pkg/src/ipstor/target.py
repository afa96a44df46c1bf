"""iSCSI target: discovery, login (optional CHAP), and READ(10)/WRITE(10) execution."""

from __future__ import annotations

import enum
import hmac
import logging
import os
import threading
from dataclasses import dataclass, field
from hashlib import sha256

from .errors import ConfigError, IpstorError, ProtocolError, StartupError
from .pdu import (BLOCK_SIZE, DEFAULT_MAX_DATA_SEGMENT, LOGIN_AUTH_FAILED,
                  LOGIN_INITIATOR_ERROR, LOGIN_MISSING_FIELDS, LOGIN_NOT_FOUND, STAGE_FULL_FEATURE,
                  STAGE_OPERATIONAL, STAGE_SECURITY, CdbKind, Opcode, Pdu, PduReader,
                  ScsiStatus, cdb_of, decode_text, encode_pdu, encode_text, login_specific,
                  note_for, status_specific)

log = logging.getLogger(__name__)

DEFAULT_PORT = 3260
DEFAULT_LUN_BYTES = 64 * 1024 * 1024
MAX_PENDING_COMMANDS = 64
SN_MASK = 0xFFFFFFFF

# sense: ILLEGAL REQUEST with LBA OUT OF RANGE / LOGICAL UNIT NOT SUPPORTED
ASC_LBA_OUT_OF_RANGE = 0x21
ASC_LUN_NOT_SUPPORTED = 0x25


def chap_response(secret, challenge):
    return sha256(secret.encode() + challenge).digest()


# --- configuration ---------------------------------------------------------------

@dataclass
class LunConfig:
    lun: int
    blocks: int = DEFAULT_LUN_BYTES // BLOCK_SIZE
    file: str | None = None


@dataclass
class TargetConfig:
    target_name: str = "iqn.2025-01.lab:disk0"
    listen: tuple[str, int] = ("192.168.2.1", DEFAULT_PORT)
    luns: list[LunConfig] = field(default_factory=lambda: [LunConfig(0)])
    chap: tuple[str, str] | None = None
    max_data_segment: int = DEFAULT_MAX_DATA_SEGMENT
    psk: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.target_name:
            raise ConfigError("target_name must not be empty")
        # port 0 asks the OS for a free port (tcp tests)
        if not 0 <= int(self.listen[1]) <= 65535:
            raise ConfigError(f"port {self.listen[1]} out of range")
        ids = [lun.lun for lun in self.luns]
        if len(ids) != len(set(ids)):
            raise ConfigError("duplicate LUN ids")
        for lun in self.luns:
            if lun.blocks < 1:
                raise ConfigError(f"LUN {lun.lun} needs at least one block")
        if self.max_data_segment < 512:
            raise ConfigError("max_data_segment must be >= 512")

    @classmethod
    def parse(cls, text):
        """Read the flat ``key = value`` configuration format."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            values[key.strip()] = value.strip()
        kw = {}
        luns = {}
        for key, value in values.items():
            if key == "target_name":
                kw["target_name"] = value
            elif key == "listen":
                kw["listen"] = parse_address(value, DEFAULT_PORT)
            elif key == "max_data_segment":
                kw["max_data_segment"] = _int(key, value)
            elif key == "ipsec.psk":
                kw["psk"] = value
            elif key in ("chap.user", "chap.secret"):
                continue
            elif key.startswith("lun."):
                parts = key.split(".")
                if len(parts) != 3 or parts[2] not in ("blocks", "file"):
                    raise ConfigError(f"unknown key {key!r}")
                lun = luns.setdefault(_int(key, parts[1]), {})
                lun[parts[2]] = _int(key, value) if parts[2] == "blocks" else value
            else:
                raise ConfigError(f"unknown key {key!r}")
        if ("chap.user" in values) != ("chap.secret" in values):
            raise ConfigError("chap.user and chap.secret must be given together")
        if "chap.user" in values:
            kw["chap"] = (values["chap.user"], values["chap.secret"])
        if luns:
            kw["luns"] = [LunConfig(n, **spec) for n, spec in sorted(luns.items())]
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.parse(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None


def _int(key, value):
    try:
        return int(value, 0)
    except ValueError:
        raise ConfigError(f"{key}: {value!r} is not an integer") from None


def parse_address(text, default_port):
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"bad address {text!r}") from None


# --- backing stores ----------------------------------------------------------------

class MemoryStore:
    def __init__(self, blocks):
        self.capacity = blocks * BLOCK_SIZE
        self._data = bytearray(self.capacity)
        self._lock = threading.Lock()

    def read(self, offset, length):
        with self._lock:
            return bytes(self._data[offset:offset + length])

    def write(self, offset, data):
        if offset < 0 or offset + len(data) > self.capacity:
            raise ValueError("write outside the store")
        with self._lock:
            self._data[offset:offset + len(data)] = data

    def flush(self):
        pass

    def close(self):
        pass


class FileStore:
    def __init__(self, path, blocks):
        self.capacity = blocks * BLOCK_SIZE
        self._lock = threading.Lock()
        try:
            self._fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
            if os.fstat(self._fd).st_size < self.capacity:
                os.ftruncate(self._fd, self.capacity)
        except OSError as exc:
            raise StartupError(f"cannot open backing file {path}: {exc}") from None

    def read(self, offset, length):
        with self._lock:
            return os.pread(self._fd, length, offset)

    def write(self, offset, data):
        if offset < 0 or offset + len(data) > self.capacity:
            raise ValueError("write outside the store")
        with self._lock:
            os.pwrite(self._fd, data, offset)

    def flush(self):
        with self._lock:
            os.fsync(self._fd)

    def close(self):
        if self._fd >= 0:
            self.flush()
            os.close(self._fd)
            self._fd = -1


def open_store(lun: LunConfig):
    return FileStore(lun.file, lun.blocks) if lun.file else MemoryStore(lun.blocks)


# --- session state machine --------------------------------------------------------

class SessionPhase(enum.Enum):
    AWAITING_LOGIN = "awaiting-login"
    DISCOVERY = "discovery"
    FULL_FEATURE = "full-feature"
    LOGGED_OUT = "logged-out"


def _sense(asc):
    fixed = bytes([0x70, 0, 0x05, 0, 0, 0, 0, 10, 0, 0, 0, 0, asc, 0, 0, 0, 0, 0])
    return len(fixed).to_bytes(2, "big") + fixed


@dataclass
class _Pending:
    cmd: Pdu
    expected: int
    data_outs: list = field(default_factory=list)
    received: int = 0

    @property
    def complete(self):
        return self.received == self.expected


class TargetSession:
    """One connection's iSCSI state. Feed request PDUs, get response PDUs."""

    def __init__(self, server, randbytes=os.urandom):
        self.server = server
        self.phase = SessionPhase.AWAITING_LOGIN
        self.exp_cmd_sn = 0
        self.stat_sn = 1
        self.max_data_segment = DEFAULT_MAX_DATA_SEGMENT
        self.peer = None
        self.target = None
        self.closing = False
        self._randbytes = randbytes
        self._login = None
        self._challenge = None
        self._pending = {}
        self._by_tag = {}

    # -- helpers ------------------------------------------------------------

    def _next_stat_sn(self):
        sn = self.stat_sn
        self.stat_sn = (sn + 1) & SN_MASK
        return sn

    def _response(self, opcode, request, data=b"", **fields):
        return Pdu.make(opcode, data, initiator_task_tag=request.itt,
                        stat_sn=self._next_stat_sn(), cmd_sn=self.exp_cmd_sn, **fields)

    def _login_reply(self, request, keys, csg, nsg, transit, status=(0, 0)):
        return self._response(Opcode.LOGIN_RESPONSE, request, encode_text(keys),
                              opcode_specific=login_specific(csg, nsg, transit, status))

    def _reject(self, request, status, reason):
        log.info("login from %s rejected: %s", self.peer, reason)
        self.closing = True
        return self._login_reply(request, [], STAGE_SECURITY, STAGE_SECURITY, False, status)

    # -- dispatch -----------------------------------------------------------

    def handle(self, pdu):
        op = pdu.opcode
        if op is Opcode.LOGIN_REQUEST:
            return [self.handle_login(pdu)]
        if self.phase not in (SessionPhase.DISCOVERY, SessionPhase.FULL_FEATURE):
            raise ProtocolError(f"{op.name} in phase {self.phase.value}")
        if op is Opcode.TEXT_REQUEST:
            return [self.handle_text(pdu)]
        if op is Opcode.NOP_OUT:
            return [self.handle_nop(pdu)]
        if op is Opcode.LOGOUT_REQUEST:
            return [self.handle_logout(pdu)]
        if op is Opcode.SCSI_COMMAND:
            self._queue_command(pdu)
            return self._drain()
        if op is Opcode.SCSI_DATA_OUT:
            self._add_data(pdu)
            return self._drain()
        raise ProtocolError(f"unexpected {op.name} from initiator")

    # -- login ----------------------------------------------------------------

    def handle_login(self, pdu):
        if self.phase is not SessionPhase.AWAITING_LOGIN:
            raise ProtocolError("login on an established session")
        keys = dict(decode_text(pdu.data))
        if self._challenge is not None:
            return self._finish_chap(pdu, keys)

        name = keys.get("InitiatorName")
        if not name:
            return self._reject(pdu, LOGIN_MISSING_FIELDS, "no InitiatorName")
        session_type = keys.get("SessionType", "Normal")
        if session_type not in ("Discovery", "Normal"):
            raise ProtocolError(f"unknown SessionType {session_type!r}")
        target = None
        if session_type == "Normal":
            target = self.server.find(keys.get("TargetName"))
            if target is None:
                return self._reject(pdu, LOGIN_NOT_FOUND, f"unknown target {keys.get('TargetName')!r}")
        try:
            offer = int(keys.get("MaxRecvDataSegmentLength", DEFAULT_MAX_DATA_SEGMENT))
            connections = int(keys.get("MaxConnections", "1"))
        except ValueError:
            raise ProtocolError("non-numeric negotiation key") from None
        if offer < 512 or connections < 1:
            raise ProtocolError("negotiation value out of range")
        if connections > 1:
            return self._reject(pdu, LOGIN_INITIATOR_ERROR, "multi-connection sessions unsupported")
        self.peer = name
        self.exp_cmd_sn = pdu.bhs.cmd_sn
        self._login = (session_type, target, offer)

        chap = target.chap if target is not None else self.server.discovery_chap
        if chap is None:
            return self._login_success(pdu)
        if "CHAP" not in keys.get("AuthMethod", "None").split(","):
            return self._reject(pdu, LOGIN_AUTH_FAILED, "CHAP required but not offered")
        self._challenge = self._randbytes(16)
        return self._login_reply(
            pdu, [("AuthMethod", "CHAP"), ("CHAP_A", "SHA-256"),
                  ("CHAP_C", "0x" + self._challenge.hex())],
            STAGE_SECURITY, STAGE_OPERATIONAL, False)

    def _finish_chap(self, pdu, keys):
        session_type, target, _ = self._login
        user, secret = target.chap if target is not None else self.server.discovery_chap
        response = keys.get("CHAP_R", "")
        try:
            digest = bytes.fromhex(response[2:] if response.startswith("0x") else response)
        except ValueError:
            digest = b""
        expected = chap_response(secret, self._challenge)
        if keys.get("CHAP_N") != user or not hmac.compare_digest(digest, expected):
            return self._reject(pdu, LOGIN_AUTH_FAILED, "CHAP response mismatch")
        return self._login_success(pdu)

    def _login_success(self, pdu):
        session_type, target, offer = self._login
        limit = target.max_data_segment if target is not None else DEFAULT_MAX_DATA_SEGMENT
        self.max_data_segment = min(offer, limit)
        keys = [("MaxRecvDataSegmentLength", str(self.max_data_segment)),
                ("HeaderDigest", "None"), ("DataDigest", "None")]
        if session_type == "Discovery":
            self.phase = SessionPhase.DISCOVERY
        else:
            self.phase = SessionPhase.FULL_FEATURE
            self.target = target
            keys = [("TargetPortalGroupTag", "1"), ("MaxConnections", "1"),
                    ("InitialR2T", "No"), ("ImmediateData", "No")] + keys
        return self._login_reply(pdu, keys, STAGE_OPERATIONAL, STAGE_FULL_FEATURE, True)

    # -- discovery / nop / logout ---------------------------------------------

    def handle_text(self, pdu):
        if self.phase is not SessionPhase.DISCOVERY:
            raise ProtocolError("text request outside a discovery session")
        keys = decode_text(pdu.data)
        if ("SendTargets", "All") not in keys:
            raise ProtocolError("text request without SendTargets=All")
        out = []
        for name, address in self.server.listing():
            out += [("TargetName", name), ("TargetAddress", f"{address},1")]
        return self._response(Opcode.TEXT_RESPONSE, pdu, encode_text(out))

    def handle_nop(self, pdu):
        if self.phase not in (SessionPhase.DISCOVERY, SessionPhase.FULL_FEATURE):
            raise ProtocolError("NOP-Out before login")
        return self._response(Opcode.NOP_IN, pdu, pdu.data, lun=pdu.bhs.lun)

    def handle_logout(self, pdu):
        self.phase = SessionPhase.LOGGED_OUT
        self.closing = True
        return self._response(Opcode.LOGOUT_RESPONSE, pdu)

    # -- SCSI -----------------------------------------------------------------

    def _queue_command(self, pdu):
        if self.phase is not SessionPhase.FULL_FEATURE:
            raise ProtocolError("SCSI command outside a normal session")
        if pdu.data:
            raise ProtocolError("immediate data is not supported")
        cdb = cdb_of(pdu)
        sn = pdu.bhs.cmd_sn
        ahead = (sn - self.exp_cmd_sn) & SN_MASK
        if ahead >= MAX_PENDING_COMMANDS:
            raise ProtocolError(f"CmdSN {sn} outside window at {self.exp_cmd_sn}")
        if sn in self._pending or pdu.itt in self._by_tag:
            raise ProtocolError(f"duplicate CmdSN {sn} or task tag")
        entry = _Pending(pdu, cdb.transfer_length if cdb.kind is CdbKind.WRITE_10 else 0)
        self._pending[sn] = entry
        self._by_tag[pdu.itt] = entry

    def _add_data(self, pdu):
        entry = self._by_tag.get(pdu.itt)
        if entry is None or entry.expected == 0:
            raise ProtocolError(f"Data-Out for unknown write 0x{pdu.itt:08x}")
        if pdu.bhs.buffer_offset != entry.received:
            raise ProtocolError("Data-Out offset out of sequence")
        entry.received += len(pdu.data)
        if entry.received > entry.expected:
            raise ProtocolError("more Data-Out than the command requested")
        entry.data_outs.append(pdu)

    def _drain(self):
        out = []
        while True:
            entry = self._pending.get(self.exp_cmd_sn)
            if entry is None or not entry.complete:
                return out
            del self._pending[self.exp_cmd_sn]
            del self._by_tag[entry.cmd.itt]
            self.exp_cmd_sn = (self.exp_cmd_sn + 1) & SN_MASK
            out += self.handle_cmd(entry.cmd, entry.data_outs)

    def _check(self, cmd, asc):
        return self._response(Opcode.SCSI_RESPONSE, cmd, _sense(asc), lun=cmd.bhs.lun,
                              opcode_specific=status_specific(ScsiStatus.CHECK_CONDITION))

    def handle_cmd(self, cmd, data_outs=()):
        """Execute one command whose Data-Out PDUs (if any) have all arrived."""
        cdb = cdb_of(cmd)
        offset, length = cdb.lba * BLOCK_SIZE, cdb.transfer_length
        data = b""
        if cdb.kind is CdbKind.WRITE_10:
            pos = 0
            for d in data_outs:
                if d.bhs.buffer_offset != pos:
                    raise ProtocolError("Data-Out offsets are not contiguous")
                pos += len(d.data)
            if pos != length:
                raise ProtocolError(f"write carried {pos} bytes, CDB asks for {length}")
            data = b"".join(d.data for d in data_outs)
        elif data_outs:
            raise ProtocolError("Data-Out sent for a read")
        store = self.target and self.server.store(self.target.target_name, cmd.bhs.lun)
        if store is None:
            return [self._check(cmd, ASC_LUN_NOT_SUPPORTED)]
        if offset + length > store.capacity:
            return [self._check(cmd, ASC_LBA_OUT_OF_RANGE)]
        out = []
        if cdb.kind is CdbKind.WRITE_10:
            store.write(offset, data)
        else:
            payload = store.read(offset, length)
            step = self.max_data_segment
            for pos in range(0, length, step):
                out.append(Pdu.make(
                    Opcode.SCSI_DATA_IN, payload[pos:pos + step], lun=cmd.bhs.lun,
                    final_flag=pos + step >= length, initiator_task_tag=cmd.itt,
                    buffer_offset=pos, cmd_sn=self.exp_cmd_sn))
        out.append(self._response(Opcode.SCSI_RESPONSE, cmd, lun=cmd.bhs.lun,
                                  opcode_specific=status_specific(ScsiStatus.GOOD)))
        return out


# --- server ---------------------------------------------------------------------------

class TargetConnection:
    """Glue between a channel endpoint and a :class:`TargetSession`."""

    def __init__(self, server, endpoint, randbytes):
        self.server = server
        self.endpoint = endpoint
        self.session = TargetSession(server, randbytes)
        self.reader = PduReader()

    def on_data(self, data):
        try:
            for pdu in self.reader.feed(data):
                for resp in self.session.handle(pdu):
                    self.endpoint.send(encode_pdu(resp), note_for(resp))
                if self.session.closing:
                    self.endpoint.close()
                    return
        except IpstorError as exc:
            log.info("closing connection from %s:%d: %s", *self.endpoint.remote, exc)
            self.endpoint.abort(exc)

    def on_close(self):
        self.server._forget(self)


class TargetServer:
    """Serves one or more targets behind a single portal address."""

    def __init__(self, configs, listen=None):
        if isinstance(configs, TargetConfig):
            configs = [configs]
        self.configs = list(configs)
        names = [c.target_name for c in self.configs]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate target names")
        self.listen_address = listen or (self.configs[0].listen if self.configs
                                         else ("0.0.0.0", DEFAULT_PORT))
        self.discovery_chap = next((c.chap for c in self.configs if c.chap), None)
        self.address = None
        self._stores = {}
        self._connections = set()
        self._lock = threading.Lock()
        self._listener = None
        self._randbytes = os.urandom
        try:
            for c in self.configs:
                self._stores[c.target_name] = {lun.lun: open_store(lun) for lun in c.luns}
        except StartupError:
            self._close_stores()
            raise

    def find(self, name):
        return next((c for c in self.configs if c.target_name == name), None)

    def store(self, target_name, lun):
        return self._stores.get(target_name, {}).get(lun)

    def listing(self):
        host, port = self.address or self.listen_address
        return [(c.target_name, f"{host}:{port}") for c in self.configs]

    @property
    def active_sessions(self):
        with self._lock:
            return len(self._connections)

    def start(self, network, psk=None):
        rng = getattr(network, "rng", None)
        if rng is not None:
            self._randbytes = rng.randbytes
        if psk is None and self.configs and self.configs[0].psk:
            from .channel import load_psk
            psk = load_psk(self.configs[0].psk)
        self._listener = network.listen(self.listen_address, self._accept, psk=psk)
        self.address = tuple(self._listener.address)
        return self

    def _accept(self, endpoint):
        conn = TargetConnection(self, endpoint, self._randbytes)
        with self._lock:
            self._connections.add(conn)
        endpoint.serve(conn.on_data, conn.on_close)

    def _forget(self, conn):
        with self._lock:
            self._connections.discard(conn)

    def _close_stores(self):
        for luns in self._stores.values():
            for store in luns.values():
                store.close()

    def shutdown(self):
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        with self._lock:
            conns = list(self._connections)
        for conn in conns:
            conn.endpoint.close()
        self._close_stores()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(config, network, psk=None):
    """Start serving ``config`` on ``network``; returns the running server."""
    return TargetServer(config).start(network, psk)
