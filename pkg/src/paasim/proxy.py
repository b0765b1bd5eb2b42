"""Message proxy: an execution-free container that sits behind the input
endpoint and forwards each message to the worker encoded in its target uri."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .core import Message, MessageKind, authenticate
from .netsim import Actor, Network, Via

log = logging.getLogger(__name__)

PROXY_READY = "proxy_ready"


class MissingInternalEndpoint(LookupError):
    pass


@dataclass
class ProxyState:
    ready: bool = False
    forwarded_count: int = 0
    nak_count: int = 0
    auth_failures: int = 0
    buffered_count: int = 0


class MessageProxy(Actor):
    def __init__(self, network: Network, shared_key: str):
        super().__init__(network, shared_key)
        self.state = ProxyState()
        self._buffer: list[Message] = []

    @property
    def ready(self) -> bool:
        return self.state.ready

    def receive(self, m: Message, sender) -> None:
        if not authenticate(m, self.shared_key):
            self.state.auth_failures += 1
            log.warning("proxy dropped %s: bad shared key", m.id)
            self.network.record("auth_drop", msg=m.id, at=self.id)
            return
        if not self.state.ready:
            self._buffer.append(m)
            self.state.buffered_count += 1
            return
        self.on_external_message(m)

    def on_external_message(self, m: Message) -> None:
        """Forward ``m`` unchanged to the internal endpoint named by its target."""
        if not self.state.ready:
            raise RuntimeError("proxy is not ready")
        ie = m.target.internal_endpoint
        if ie is None:
            self.state.nak_count += 1
            log.info("proxy rejected %s: target %s has no internal endpoint", m.id, m.target)
            self.post(MessageKind.PROXY_NAK, m.source,
                      {"reason": MissingInternalEndpoint.__name__}, ref_id=m.id)
            return
        self.state.forwarded_count += 1
        self.network.send(m, Via.DIRECT, sender=self.id, to=ie)

    def mark_ready(self) -> None:
        """Open the message channel, release buffered traffic and announce readiness."""
        if self.state.ready:
            return
        self.state.ready = True
        self.network.publish(PROXY_READY, instance=self.id)
        pending, self._buffer = self._buffer, []
        for m in pending:
            self.on_external_message(m)
