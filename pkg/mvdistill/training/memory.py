"""
mvdistill: Loss History

Fixed-capacity FIFO of recent training losses with a smoothed readout.
Stored inside the train state so a resumed run continues the same window.
"""

from __future__ import annotations

from typing import Dict, List, Optional


class LossHistory:
    """Recent (step, loss) pairs; the oldest entry is evicted once full."""

    def __init__(self, max_items: int = 200):
        self._items: List[Dict[str, float]] = []
        self._max_items = max_items

    def add(self, step: int, loss: float) -> None:
        self._items.append({"step": step, "loss": float(loss)})
        if len(self._items) > self._max_items:
            self._items.pop(0)

    def recent(self, n: int = 5) -> List[Dict[str, float]]:
        return self._items[-n:]

    def smoothed(self, window: int = 50) -> Optional[float]:
        """Mean of the last `window` losses, None when empty."""
        tail = self._items[-window:]
        if not tail:
            return None
        return sum(item["loss"] for item in tail) / len(tail)

    def __len__(self) -> int:
        return len(self._items)

    def state_dict(self) -> Dict[str, object]:
        return {"max_items": self._max_items, "items": [dict(item) for item in self._items]}

    @classmethod
    def from_state_dict(cls, state: Dict[str, object]) -> "LossHistory":
        history = cls(int(state["max_items"]))
        history._items = [dict(item) for item in state["items"]]
        return history

    def clear(self) -> None:
        self._items.clear()
