"""Deterministic discrete-event core: simulation clock, time-ordered event
queue, and labeled random-number streams.

Ties at equal fire time are broken by insertion order (FIFO), which removes
any platform-dependent heap nondeterminism. Time is simulated seconds as
double-precision floats.
"""

import hashlib
import heapq
import itertools
from dataclasses import dataclass

import numpy as np

# Event kinds
MINE_BLOCK = "mine-block"
RECEIVE_BLOCK = "receive-block"
RECEIVE_TX = "receive-tx"
CLIENT_TRAIN_DONE = "client-train-done"
CLIENT_BLOCK_DELIVERED = "client-block-delivered"
SIM_STOP = "sim-stop"


@dataclass(frozen=True)
class Event:
    """A simulation occurrence. Payloads are referenced by id only."""

    kind: str
    actor: int = -1  # miner or client id; -1 when not applicable
    obj: int = -1    # block or tx id; -1 when not applicable


@dataclass(frozen=True)
class TraceRecord:
    time: float
    seq: int
    kind: str
    actor: int
    obj: int


def label_seed(label: str) -> int:
    """Stable 64-bit key for a stream label (builtin hash() is salted)."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Engine:
    """Single-threaded event dispatcher with a monotone clock.

    Dispatch order is a deterministic function of (schedule calls, seed):
    events pop in (fire_time, insertion seq) order.
    """

    def __init__(self, seed: int, trace: bool = False):
        self.seed = seed
        self.now = 0.0
        self._heap: list[tuple[float, int, Event]] = []
        self._seq = itertools.count()
        self._handlers: dict[str, object] = {}
        self.trace: list[TraceRecord] | None = [] if trace else None

    def schedule(self, fire_time: float, event: Event) -> int:
        """Enqueue `event` to fire at `fire_time`. Returns the event's seq id."""
        if fire_time < self.now:
            raise ValueError(
                f"cannot schedule {event.kind} at t={fire_time} in the past (now={self.now})"
            )
        seq = next(self._seq)
        heapq.heappush(self._heap, (fire_time, seq, event))
        return seq

    def schedule_in(self, delay: float, event: Event) -> int:
        return self.schedule(self.now + delay, event)

    def next(self) -> tuple[float, int, Event] | None:
        """Pop the earliest event and advance the clock; None when exhausted."""
        if not self._heap:
            return None
        fire_time, seq, event = heapq.heappop(self._heap)
        self.now = fire_time
        return fire_time, seq, event

    def on(self, kind: str, handler) -> None:
        self._handlers[kind] = handler

    def run_until(self, stop) -> None:
        """Dispatch events in order until `stop()` is true or the queue drains.

        The stop predicate is checked before every dispatch, so `stop` that is
        already true returns immediately without consuming events.
        """
        while not stop():
            item = self.next()
            if item is None:
                return
            fire_time, seq, event = item
            handler = self._handlers.get(event.kind)
            if handler is None:
                raise RuntimeError(f"no handler registered for event kind {event.kind!r}")
            if self.trace is not None:
                self.trace.append(
                    TraceRecord(fire_time, seq, event.kind, event.actor, event.obj)
                )
            handler(event)

    def rng_stream(self, label: str) -> np.random.Generator:
        """Fresh generator keyed by (global seed, label).

        The same (seed, label) pair always yields an identical sequence;
        distinct labels give independent streams, so perturbing one stochastic
        component cannot shift the draws of another.
        """
        return np.random.default_rng(np.random.SeedSequence([self.seed, label_seed(label)]))
