"""Measurement-triggered belief exchange between agents.

Agents talk only when one of them has ranged the other.  Each step the
simulator publishes every agent's propagated belief (and bias book); an
observer then requests the snapshot of the agent it measured.  Every reply is
logged so the communication cost of a run can be audited afterwards.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Optional

import numpy as np

from .types import Belief, BiasBook, NumericalError

logger = logging.getLogger(__name__)

BELIEF = "belief"
BIAS_BOOK = "bias_book"
HEADER_BYTES = 16  # sender id + stamp
FLOAT_BYTES = 8


class UnreachableError(RuntimeError):
    pass


class StaleMessageError(NumericalError):
    pass


@dataclass(frozen=True)
class BeliefMessage:
    sender: int
    stamp: int
    x_hat: np.ndarray
    P: np.ndarray

    @property
    def payload_bytes(self) -> int:
        n = self.x_hat.size
        return HEADER_BYTES + FLOAT_BYTES * (n + n * n)

    def belief(self, heading: Optional[int] = None) -> Belief:
        return Belief(self.x_hat, self.P, self.stamp, heading)


@dataclass(frozen=True)
class BiasCorrelationMessage:
    sender: int
    stamp: int
    C: Mapping[int, np.ndarray]

    def __post_init__(self):
        for l, v in self.C.items():
            if not np.all(np.isfinite(v)):
                raise ValueError(f"bias correlation entry {l} is not finite")

    @property
    def payload_bytes(self) -> int:
        return HEADER_BYTES + sum(FLOAT_BYTES * (1 + v.size) for v in self.C.values())

    def book(self) -> BiasBook:
        return BiasBook(self.sender, self.C)


@dataclass(frozen=True)
class MessageRecord:
    step: int
    sender: int
    receiver: int
    type: str
    payload_bytes: int


def check_stamp(msg, step: int) -> None:
    if msg.stamp != step:
        raise StaleMessageError(
            f"message from {msg.sender} has stamp {msg.stamp}, expected {step}")


class Network:
    """Per-step mailbox of published agent snapshots.

    ``reachable(observer, target)`` decides whether a request can be served;
    by default every agent is reachable.
    """

    def __init__(self, reachable: Optional[Callable[[int, int], bool]] = None):
        self._reachable = reachable
        self._step: Optional[int] = None
        self._beliefs: dict[int, Belief] = {}
        self._books: dict[int, BiasBook] = {}
        self.log: list[MessageRecord] = []
        self.dropped = 0

    def publish(self, step: int, beliefs: Mapping[int, Belief],
                books: Mapping[int, BiasBook]) -> None:
        self._step = step
        self._beliefs = dict(beliefs)
        self._books = dict(books)

    def set_reachability(self, reachable: Optional[Callable[[int, int], bool]]) -> None:
        self._reachable = reachable

    def request_exchange(self, observer: int, target: int, needs_bias_book: bool
                         ) -> tuple[BeliefMessage, Optional[BiasCorrelationMessage]]:
        if target not in self._beliefs:
            raise KeyError(f"{target} is not a published agent; beacons do not exchange")
        if self._reachable is not None and not self._reachable(observer, target):
            self.dropped += 1
            logger.info("step %s: %s cannot reach %s, measurement dropped",
                        self._step, observer, target)
            raise UnreachableError(f"{target} is out of communication range of {observer}")
        bel = self._beliefs[target]
        msg = BeliefMessage(target, bel.stamp, bel.x, bel.P)
        self.log.append(MessageRecord(self._step, target, observer, BELIEF, msg.payload_bytes))
        bias_msg = None
        if needs_bias_book:
            book = self._books[target]
            bias_msg = BiasCorrelationMessage(target, bel.stamp, book.C)
            self.log.append(MessageRecord(self._step, target, observer, BIAS_BOOK,
                                          bias_msg.payload_bytes))
        return msg, bias_msg

    def counts(self) -> dict[str, int]:
        out = {BELIEF: 0, BIAS_BOOK: 0}
        for rec in self.log:
            out[rec.type] += 1
        out["bytes"] = sum(rec.payload_bytes for rec in self.log)
        return out


MESSAGE_COLUMNS = ("step", "sender", "receiver", "type", "payload_bytes")


def write_message_log(records: Iterable[MessageRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MESSAGE_COLUMNS)
        for r in records:
            w.writerow((r.step, r.sender, r.receiver, r.type, r.payload_bytes))


def read_message_log(path) -> list[MessageRecord]:
    with open(path, newline="") as fh:
        return [MessageRecord(int(r["step"]), int(r["sender"]), int(r["receiver"]), r["type"],
                              int(r["payload_bytes"])) for r in csv.DictReader(fh)]
