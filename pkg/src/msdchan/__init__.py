"""Mass-storage covert channel testbed.

A desk-scale stack: bit-exact SCSI CDB codec, an MSD emulator whose covert
endpoint signals pending commands by delaying TEST UNIT READY
acknowledgements, a polling implant that relays console payloads over
session-multiplexed datagrams, an analyst console (CLI + HTTP/JSON), and a
timing harness measuring whether channel activity is externally visible.
"""

from .scsi import Cdb, ControlByte, FrameClass, classify, mark_covert, \
    parse_cdb, serialize_cdb
from .datagram import Datagram, DatagramType
from .emulator import BlockStore, Emulator, PollConfig
from .implant import ChannelConfig, CovertChannel, ImplantRuntime, \
    PollObservation
from .console import AnalystConsole, ChannelStats
from .transport import ScsiExchange, ScsiResponse, connect

__version__ = "0.1.0"

__all__ = [
    "AnalystConsole",
    "BlockStore",
    "Cdb",
    "ChannelConfig",
    "ChannelStats",
    "ControlByte",
    "CovertChannel",
    "Datagram",
    "DatagramType",
    "Emulator",
    "FrameClass",
    "ImplantRuntime",
    "PollConfig",
    "PollObservation",
    "ScsiExchange",
    "ScsiResponse",
    "classify",
    "connect",
    "mark_covert",
    "parse_cdb",
    "serialize_cdb",
]
