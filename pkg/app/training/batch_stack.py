# app/training/batch_stack.py
"""
Pre-batched data stacks drawn from in chunks of k batches.

A stack holds one permutation of its dataset cut into full batches (the
remainder is dropped). When the stack holds at least k batches, it is
reshuffled only when fewer than k remain before a draw. A stack smaller
than k batches reshuffles whenever fewer than batch_size samples remain.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Union
import logging

import torch

from app.core.errors import ConfigError
from app.objectives.losses import LabeledBatch

logger = logging.getLogger(__name__)

Batch = Union[torch.Tensor, LabeledBatch]


@dataclass
class BatchStack:
    inputs: torch.Tensor
    batch_size: int
    seed: int
    labels: Optional[torch.Tensor] = None
    cursor: int = 0
    draws: int = 0
    reshuffles: int = 0
    last_reshuffle: Optional[int] = None  # draw number of the most recent reshuffle
    _generator: torch.Generator = field(init=False, repr=False)
    _order: torch.Tensor = field(init=False, repr=False)

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.batch_size < 1 or n < self.batch_size:
            raise ConfigError(
                f"Dataset of {n} samples is smaller than one batch of {self.batch_size}",
                details={"samples": n, "batch_size": self.batch_size},
            )
        if self.labels is not None and self.labels.shape[0] != n:
            raise ConfigError("Inputs and labels differ in length")
        self._generator = torch.Generator().manual_seed(int(self.seed))
        self._order = torch.randperm(n, generator=self._generator)

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_batches(self) -> int:
        return self.num_samples // self.batch_size

    @property
    def remaining_batches(self) -> int:
        return (self.num_samples - self.cursor) // self.batch_size

    def _reshuffle(self) -> None:
        self._order = torch.randperm(self.num_samples, generator=self._generator)
        self.cursor = 0
        self.reshuffles += 1
        self.last_reshuffle = self.draws

    def _take(self) -> Batch:
        idx = self._order[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        if self.labels is None:
            return self.inputs[idx]
        return LabeledBatch(self.inputs[idx], self.labels[idx])

    def state_dict(self) -> Dict[str, Any]:
        return {
            "cursor": self.cursor,
            "draws": self.draws,
            "reshuffles": self.reshuffles,
            "last_reshuffle": self.last_reshuffle,
            "order": self._order.clone(),
            "generator": self._generator.get_state(),
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.cursor = int(state["cursor"])
        self.draws = int(state["draws"])
        self.reshuffles = int(state["reshuffles"])
        self.last_reshuffle = state["last_reshuffle"]
        self._order = state["order"].clone()
        self._generator.set_state(state["generator"])


def stack_next(stack: BatchStack, k: int) -> List[Batch]:
    if k < 1:
        raise ValueError("k must be >= 1")
    stack.draws += 1
    if stack.num_batches >= k:
        if stack.remaining_batches < k:
            stack._reshuffle()
        return [stack._take() for _ in range(k)]

    out = []
    for _ in range(k):
        if stack.num_samples - stack.cursor < stack.batch_size:
            stack._reshuffle()
        out.append(stack._take())
    return out


def trace_reshuffles(stack: BatchStack, k: int, draws: int) -> List[int]:
    """Draw `draws` times from `stack`; returns the draw numbers that reshuffled."""
    seen = []
    for _ in range(draws):
        before = stack.reshuffles
        stack_next(stack, k)
        if stack.reshuffles > before:
            seen.append(stack.draws)
    return seen
