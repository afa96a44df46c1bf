"""iSCSI initiator: discovery, login, and synchronous block I/O."""

from __future__ import annotations

import collections
import logging
import threading
from dataclasses import dataclass

from .errors import (AuthFailure, IpstorError, LoginError, ProtocolError, StorageError,
                     TransportError, UsageError)
from .pdu import (BLOCK_SIZE, DEFAULT_MAX_DATA_SEGMENT, LOGIN_AUTH_FAILED, STAGE_FULL_FEATURE,
                  STAGE_SECURITY, Cdb, CdbKind, Opcode, Pdu, PduReader, ScsiStatus,
                  command_specific, decode_text, encode_pdu, encode_text, login_fields,
                  login_specific, note_for, scsi_status)
from .target import DEFAULT_PORT, chap_response

log = logging.getLogger(__name__)

DEFAULT_INITIATOR_NAME = "iqn.2025-01.ipstor:initiator"
MAX_BLOCKS_PER_COMMAND = 0xFFFF
SN_MASK = 0xFFFFFFFF


@dataclass
class InitiatorConfig:
    name: str = DEFAULT_INITIATOR_NAME
    portal: tuple[str, int] = ("192.168.2.1", DEFAULT_PORT)
    chap: tuple[str, str] | None = None
    max_recv_data_segment: int = DEFAULT_MAX_DATA_SEGMENT
    psk: bytes | None = None

    def __post_init__(self):
        if not self.name:
            raise UsageError("initiator name must not be empty")
        host, port = self.portal
        if not host or not 1 <= int(port) <= 65535:
            raise UsageError(f"bad portal {host}:{port}")
        if self.max_recv_data_segment < 512:
            raise UsageError("max_recv_data_segment must be >= 512")


class Session:
    """A logged-in connection. Single owner; one command at a time."""

    def __init__(self, config, endpoint, session_type, target_name=None):
        self.config = config
        self.endpoint = endpoint
        self.session_type = session_type
        self.target_name = target_name
        self.max_data_segment = config.max_recv_data_segment
        self.negotiated = {}
        self.cmd_sn = 1
        self.exp_stat_sn = 0
        self.logged_in = False
        self._itt = 0
        self._reader = PduReader()
        self._inbox = collections.deque()
        self._busy = threading.Lock()

    # -- plumbing ---------------------------------------------------------------

    def _next_itt(self):
        self._itt = (self._itt + 1) % SN_MASK  # never the reserved 0xffffffff
        return self._itt

    def _send(self, pdu):
        self.endpoint.send(encode_pdu(pdu), note_for(pdu))

    def _receive(self, itt):
        while not self._inbox:
            data = self.endpoint.recv()
            if not data:
                raise TransportError("connection closed by target")
            self._inbox.extend(self._reader.feed(data))
        pdu = self._inbox.popleft()
        if pdu.itt != itt:
            raise ProtocolError(f"response for task 0x{pdu.itt:08x}, expected 0x{itt:08x}")
        if pdu.opcode is not Opcode.SCSI_DATA_IN:
            self.exp_stat_sn = (pdu.bhs.stat_sn + 1) & SN_MASK
        return pdu

    def _expect(self, itt, opcode):
        pdu = self._receive(itt)
        if pdu.opcode is not opcode:
            raise ProtocolError(f"expected {opcode.name}, got {pdu.opcode.name}")
        return pdu

    def _request(self, opcode, data=b"", **fields):
        return Pdu.make(opcode, data, cmd_sn=self.cmd_sn, exp_stat_sn=self.exp_stat_sn, **fields)

    def _enter(self):
        if not self.logged_in:
            raise UsageError("session is not logged in")
        if not self._busy.acquire(blocking=False):
            raise UsageError("session is already in use by another task")

    def _abort(self):
        self.logged_in = False
        self.endpoint.close()

    # -- login -----------------------------------------------------------------

    def login(self):
        keys = [("InitiatorName", self.config.name), ("SessionType", self.session_type)]
        if self.target_name is not None:
            keys.append(("TargetName", self.target_name))
        keys += [("AuthMethod", "CHAP,None" if self.config.chap else "None"),
                 ("MaxRecvDataSegmentLength", str(self.config.max_recv_data_segment)),
                 ("MaxConnections", "1")]
        try:
            resp = self._login_step(keys)
            _, nsg, transit, _ = login_fields(resp)
            if not (transit and nsg == STAGE_FULL_FEATURE):
                resp = self._login_step(self._chap_answer(dict(decode_text(resp.data))))
            self.negotiated = dict(decode_text(resp.data))
            self.max_data_segment = int(self.negotiated.get(
                "MaxRecvDataSegmentLength", self.config.max_recv_data_segment))
        except (IpstorError, ValueError) as exc:
            self.endpoint.close()
            if isinstance(exc, ValueError):
                raise ProtocolError(f"bad login response: {exc}") from None
            raise
        self.logged_in = True
        return self

    def _login_step(self, keys):
        itt = self._next_itt()
        self._send(self._request(
            Opcode.LOGIN_REQUEST, encode_text(keys), initiator_task_tag=itt,
            opcode_specific=login_specific(STAGE_SECURITY, STAGE_FULL_FEATURE, True)))
        try:
            resp = self._expect(itt, Opcode.LOGIN_RESPONSE)
        except TransportError as exc:
            raise TransportError(f"login failed: {exc}") from None
        status = login_fields(resp)[3]
        if status == LOGIN_AUTH_FAILED:
            raise AuthFailure("target rejected the credentials")
        if status[0] != 0:
            raise LoginError(f"login rejected (class {status[0]}, detail {status[1]})", *status)
        return resp

    def _chap_answer(self, keys):
        challenge = keys.get("CHAP_C", "")
        if keys.get("AuthMethod") != "CHAP" or not challenge.startswith("0x"):
            raise ProtocolError("target continued login without a CHAP challenge")
        if self.config.chap is None:
            raise AuthFailure("target requires CHAP but no credentials are configured")
        user, secret = self.config.chap
        digest = chap_response(secret, bytes.fromhex(challenge[2:]))
        return [("CHAP_N", user), ("CHAP_R", "0x" + digest.hex())]

    # -- commands ---------------------------------------------------------------

    def send_targets(self):
        """Run SendTargets=All; returns ``[(target_name, (host, port))]``."""
        self._enter()
        try:
            itt = self._next_itt()
            self._send(self._request(Opcode.TEXT_REQUEST, encode_text([("SendTargets", "All")]),
                                     initiator_task_tag=itt))
            resp = self._expect(itt, Opcode.TEXT_RESPONSE)
        finally:
            self._busy.release()
        out, name = [], None
        for key, value in decode_text(resp.data):
            if key == "TargetName":
                name = value
            elif key == "TargetAddress" and name is not None:
                addr = value.split(",", 1)[0]
                host, _, port = addr.rpartition(":")
                out.append((name, (host, int(port))))
        return out

    def _command(self, kind, lun, lba, blocks):
        itt = self._next_itt()
        pdu = self._request(Opcode.SCSI_COMMAND, lun=lun, initiator_task_tag=itt,
                            opcode_specific=command_specific(Cdb(kind, lba, blocks)))
        self.cmd_sn = (self.cmd_sn + 1) & SN_MASK
        self._send(pdu)
        return itt

    @staticmethod
    def _status(resp):
        status = scsi_status(resp)
        if status != ScsiStatus.GOOD:
            raise StorageError(status, resp.data[2:])
        return ScsiStatus.GOOD

    def write(self, lun, lba, data):
        """Write ``data`` (a positive multiple of 512 bytes) at ``lba``."""
        if not data or len(data) % BLOCK_SIZE:
            raise UsageError("write length must be a positive multiple of 512")
        blocks = len(data) // BLOCK_SIZE
        if blocks > MAX_BLOCKS_PER_COMMAND:
            raise UsageError(f"at most {MAX_BLOCKS_PER_COMMAND} blocks per command")
        self._enter()
        try:
            itt = self._command(CdbKind.WRITE_10, lun, lba, blocks)
            step = self.max_data_segment
            for off in range(0, len(data), step):
                chunk = data[off:off + step]
                self._send(Pdu.make(Opcode.SCSI_DATA_OUT, chunk, lun=lun,
                                    final_flag=off + step >= len(data), initiator_task_tag=itt,
                                    exp_stat_sn=self.exp_stat_sn, buffer_offset=off))
            return self._status(self._expect(itt, Opcode.SCSI_RESPONSE))
        finally:
            self._busy.release()

    def read(self, lun, lba, blocks):
        if not 1 <= blocks <= MAX_BLOCKS_PER_COMMAND:
            raise UsageError(f"blocks must be in 1..{MAX_BLOCKS_PER_COMMAND}")
        self._enter()
        try:
            itt = self._command(CdbKind.READ_10, lun, lba, blocks)
            buf = bytearray()
            final = False
            while True:
                pdu = self._receive(itt)
                if pdu.opcode is Opcode.SCSI_RESPONSE:
                    break
                if pdu.opcode is not Opcode.SCSI_DATA_IN or final:
                    raise ProtocolError(f"unexpected {pdu.opcode.name} during read")
                if pdu.bhs.buffer_offset != len(buf):
                    raise ProtocolError(
                        f"Data-In offset {pdu.bhs.buffer_offset}, expected {len(buf)}")
                buf += pdu.data
                final = pdu.bhs.final_flag
            self._status(pdu)
            if len(buf) != blocks * BLOCK_SIZE or not final:
                raise ProtocolError(f"read returned {len(buf)} of {blocks * BLOCK_SIZE} bytes")
            return bytes(buf)
        finally:
            self._busy.release()

    def nop_ping(self, payload=b""):
        """Round trip one NOP-Out; returns seconds on the endpoint's clock."""
        self._enter()
        try:
            itt = self._next_itt()
            start = self.endpoint.now_ns()
            self._send(self._request(Opcode.NOP_OUT, payload, initiator_task_tag=itt))
            reply = self._expect(itt, Opcode.NOP_IN)
            elapsed = self.endpoint.now_ns() - start
        finally:
            self._busy.release()
        if reply.data != bytes(payload):
            raise ProtocolError("NOP-In did not echo the ping payload")
        return elapsed / 1e9

    def logout(self):
        if not self.logged_in:
            raise UsageError("session already logged out")
        self._enter()
        self.logged_in = False
        try:
            itt = self._next_itt()
            self._send(self._request(Opcode.LOGOUT_REQUEST, initiator_task_tag=itt))
            self._expect(itt, Opcode.LOGOUT_RESPONSE)
        except IpstorError as exc:
            log.warning("logout did not complete cleanly: %s", exc)
        finally:
            self._busy.release()
            self.endpoint.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self.logged_in:
            self.logout()


class Initiator:
    def __init__(self, config, network):
        self.config = config
        self.network = network

    def _open(self, session_type, target_name=None):
        endpoint = self.network.connect(self.config.portal, psk=self.config.psk)
        return Session(self.config, endpoint, session_type, target_name).login()

    def discover(self):
        session = self._open("Discovery")
        try:
            return session.send_targets()
        finally:
            session.logout()

    def login(self, target_name):
        return self._open("Normal", target_name)


def discover(config, network):
    return Initiator(config, network).discover()


def login(config, network, target_name):
    return Initiator(config, network).login(target_name)
