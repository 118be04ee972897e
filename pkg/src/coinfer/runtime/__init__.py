"""Networked co-inference runtime: wire protocol, edge server, device client."""
from .device import DeviceClient, DeviceOptions, SessionError, SessionStats, run_device
from .protocol import ProtocolError, TaskBlock, decode_message, encode_message
from .server import EdgeServer, ServerOptions, run_server

__all__ = ["DeviceClient", "DeviceOptions", "EdgeServer", "ProtocolError", "ServerOptions", "SessionError",
           "SessionStats", "TaskBlock", "decode_message", "encode_message", "run_device", "run_server"]
