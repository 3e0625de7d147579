"""Communication link that delays each message by a Gaussian-distributed latency."""
from __future__ import annotations

import numpy as np

from cosim.errors import CosimError
from cosim.federate import CSFederate, Kind, Status, describe

_TIME_DIGITS = 9

DESCRIPTION = describe(
    "comm_delay",
    Kind.CS,
    parameters=[
        ("mu", "real", 0.010),
        ("sigma", "real", 0.002),
        ("d_min", "real", 0.0),
        ("initial", "real", 0.0),
    ],
    inputs=[("u", "real", 0.0)],
    outputs=[("y", "real", 0.0), ("last_delay", "real", 0.0)],
)


def draw_delays(rng: np.random.Generator, n: int, mu: float, sigma: float, d_min: float = 0.0) -> np.ndarray:
    """``n`` latencies ``max(d_min, N(mu, sigma))``."""
    return np.maximum(d_min, rng.normal(mu, sigma, size=n))


class CommDelay(CSFederate):
    """Every change of the input is one message with its own latency.

    The output is the value of the most recently sent message that has
    arrived; before the first arrival it is ``initial``.
    """

    supports_rollback = True
    stochastic = True

    def __init__(self):
        super().__init__(DESCRIPTION)
        self.rng = np.random.default_rng(0)
        self._queue: list[tuple[float, float]] = []  # (arrival time, value), in send order
        self._last_sent: float | None = None
        self.delays: list[float] = []

    def seed(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def setup(self) -> None:
        if not self["mu"] > 0 or self["sigma"] < 0 or self["d_min"] < 0:
            raise CosimError("comm delay needs mu > 0, sigma >= 0, d_min >= 0")
        self._queue = []
        self._last_sent = None
        self.delays = []
        self["y"] = self["initial"]

    def _send(self, now: float, value: float) -> None:
        d = float(draw_delays(self.rng, 1, self["mu"], self["sigma"], self["d_min"])[0])
        self.delays.append(d)
        self["last_delay"] = d
        self._queue.append((round(now + d, _TIME_DIGITS), value))
        self._last_sent = value

    def step(self, current_time: float, step_size: float) -> Status:
        now = round(current_time + step_size, _TIME_DIGITS)
        u = float(self["u"])
        if self._last_sent is None or u != self._last_sent:
            self._send(now, u)
        arrived = [k for k, (t, _) in enumerate(self._queue) if t <= now]
        if arrived:
            newest = arrived[-1]
            self["y"] = self._queue[newest][1]
            # anything sent before the newest arrival can no longer be observed
            self._queue = self._queue[newest + 1:]
        return Status.OK

    def _state_snapshot(self):
        return (self.rng.bit_generator.state, list(self._queue), self._last_sent, len(self.delays))

    def _state_restore(self, extra) -> None:
        state, queue, last, n = extra
        self.rng.bit_generator.state = state
        self._queue = list(queue)
        self._last_sent = last
        del self.delays[n:]
