"""A miniature iSCSI stack with plain, record-layer and packet-layer transport security."""

from .channel import CryptoCostModel, LinkParams, SecurityMode, make_network, wire_bytes
from .errors import (AnalysisError, AuthFailure, ConfigError, HandshakeError, IntegrityError,
                     IpstorError, LoginError, ProtocolError, ReplayError, StartupError,
                     StorageError, TransportError, UsageError)
from .initiator import Initiator, InitiatorConfig, Session
from .target import LunConfig, TargetConfig, TargetServer

__version__ = "0.1.0"
