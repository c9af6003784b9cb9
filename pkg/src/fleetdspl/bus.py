"""In-process publish/subscribe bus standing in for device transports.

Topics are ``sensor/<id>``, ``cmd/<id>`` and ``ack/<id>``.  Delivery happens
within the publishing tick and is FIFO per topic.  Topics with subscribers are
delivered synchronously; the rest are queued until drained.
"""

from __future__ import annotations

from collections import defaultdict, deque
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any


@dataclass(frozen=True)
class BusMessage:
    topic: str
    payload: dict[str, Any]
    tick: int


Handler = Callable[[BusMessage], None]


@dataclass
class Bus:
    _subscribers: dict[str, list[Handler]] = field(default_factory=lambda: defaultdict(list))
    _queues: dict[str, deque] = field(default_factory=lambda: defaultdict(deque))
    dropped: set[str] = field(default_factory=set)

    def subscribe(self, topic: str, handler: Handler) -> None:
        self._subscribers[topic].append(handler)

    def unsubscribe_all(self, topic: str) -> None:
        self._subscribers.pop(topic, None)

    def publish(self, topic: str, payload: dict[str, Any], tick: int) -> None:
        if topic in self.dropped:
            return
        msg = BusMessage(topic, payload, tick)
        handlers = self._subscribers.get(topic)
        if handlers:
            for handler in list(handlers):
                handler(msg)
        else:
            self._queues[topic].append(msg)

    def drain(self, topic: str) -> list[BusMessage]:
        queue = self._queues.pop(topic, None)
        return list(queue) if queue else []

    def pending_topics(self, prefix: str = "") -> list[str]:
        return sorted(t for t, q in self._queues.items() if q and t.startswith(prefix))
