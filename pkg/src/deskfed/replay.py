"""Experience buffer with recency windows and prioritized sampling.

Sampling restricts itself to the c_k most recent transitions, where c_k
shrinks over the updates of an episode (update index t_dot out of T_dot
total). Within that window, draws follow priority^nu and come back with
max-normalized importance weights. The two priority exponents of the
sampling rule must be equal, otherwise the distribution would not
normalize; this module enforces that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 100_000
    eta: float = 0.996
    c_min: int = 2500
    nu1: float = 0.6
    nu2: float = 0.6
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must lie in (0,1], got {self.eta}")
        if not 0 < self.c_min <= self.capacity:
            raise ValueError("need 0 < c_min <= capacity")
        if self.nu1 != self.nu2:
            raise ValueError(
                "the sampling rule only normalizes when nu1 == nu2; "
                f"got {self.nu1} and {self.nu2}"
            )
        if min(self.nu1, self.nu2) < 0 or self.epsilon <= 0:
            raise ValueError("exponents must be >= 0 and epsilon > 0")


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        self.action = np.asarray(self.action, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        if self.state.shape != self.next_state.shape:
            raise ValueError(
                f"state length {self.state.size} != next_state "
                f"length {self.next_state.size}"
            )


def ere_window(cfg: BufferConfig, t_dot: int, t_total: int,
               buffer_len: int) -> int:
    """Most-recent-window size c_k for update t_dot of t_total."""
    if not 1 <= t_dot <= t_total:
        raise ValueError(f"need 1 <= t_dot <= t_total, got {t_dot}/{t_total}")
    raw = int(np.floor(cfg.capacity * cfg.eta ** (t_dot * 1000.0 / t_total)))
    return min(max(raw, cfg.c_min), buffer_len)


def priority_from_td(td1: float, td2: float, epsilon: float) -> float:
    """Shared priority of one transition from both critics' TD errors."""
    return 0.5 * (abs(float(td1)) + abs(float(td2))) + float(epsilon)


class ReplayBuffer:
    """FIFO transition store with priority-weighted recency sampling.

    Entries are addressed by monotonically increasing sequence ids, so a
    priority update that targets an already-evicted transition is detected
    and counted instead of corrupting a neighbour.
    """

    def __init__(self, cfg: BufferConfig):
        self.cfg = cfg
        self._items: list[Transition] = []
        self._priorities: list[float] = []
        self._base = 0  # sequence id of _items[0]
        self.stale_updates_skipped = 0

    def __len__(self) -> int:
        return len(self._items)

    @property
    def max_priority(self) -> float:
        return max(self._priorities) if self._priorities else 1.0

    def push(self, transition: Transition) -> int:
        """Append with the buffer's current max priority; returns its id."""
        priority = self.max_priority
        self._items.append(transition)
        self._priorities.append(priority)
        if len(self._items) > self.cfg.capacity:
            self._items.pop(0)
            self._priorities.pop(0)
            self._base += 1
        return self._base + len(self._items) - 1

    def sample(self, batch_size: int, t_dot: int, t_total: int,
               rng: np.random.Generator):
        """Draw batch_size transitions from the recent window.

        Returns (transitions, is_weights, sequence_ids).
        """
        if len(self._items) < batch_size:
            raise ValueError(
                f"buffer holds {len(self._items)} < batch_size {batch_size}"
            )
        c_k = ere_window(self.cfg, t_dot, t_total, len(self._items))
        window = np.asarray(self._priorities[-c_k:], dtype=np.float64)
        scaled = window ** self.cfg.nu1
        probs = scaled / scaled.sum()
        local = rng.choice(c_k, size=batch_size, replace=True, p=probs)
        weights = (1.0 / (c_k * probs[local])) ** self.cfg.nu2
        weights = weights / weights.max()
        offset = self._base + len(self._items) - c_k
        ids = [int(offset + i) for i in local]
        items = [self._items[len(self._items) - c_k + i] for i in local]
        return items, weights, ids

    def update_priorities(self, ids, new_priorities) -> None:
        """Replace priorities (floored at epsilon); stale ids are skipped."""
        for seq, p in zip(ids, new_priorities):
            pos = int(seq) - self._base
            if pos < 0:
                self.stale_updates_skipped += 1
                continue
            if pos >= len(self._items):
                raise IndexError(f"sequence id {seq} was never assigned")
            self._priorities[pos] = max(float(p), self.cfg.epsilon)

    def priorities(self) -> np.ndarray:
        return np.asarray(self._priorities, dtype=np.float64)

    def recent(self, count: int) -> list:
        return self._items[-count:]
