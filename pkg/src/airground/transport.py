"""Newline-framed message transport over a stream socket.

The simulator uses an in-memory queue; this module is for running a host and
agents as separate processes (see ``scripts/host_listener.py`` and
``scripts/agent_stub.py``).
"""

from __future__ import annotations

import socket
import threading
from typing import Optional

from .protocol import Message, decode, encode

MAX_LINE = 1 << 20


class LineChannel:
    """One message per line in each direction.  ``send`` is safe to call from several threads."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._rfile = sock.makefile("rb")
        self._lock = threading.Lock()

    @classmethod
    def connect(cls, host: str, port: int, timeout: Optional[float] = None) -> "LineChannel":
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, msg: Message) -> None:
        data = encode(msg)
        with self._lock:
            self.sock.sendall(data)

    def recv(self) -> Optional[Message]:
        """Next message, or None on a clean end of stream.  Truncated lines raise FramingError."""
        line = self._rfile.readline(MAX_LINE + 1)
        if not line:
            return None
        return decode(line)

    def close(self) -> None:
        try:
            self._rfile.close()
        finally:
            self.sock.close()

    def __enter__(self) -> "LineChannel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
