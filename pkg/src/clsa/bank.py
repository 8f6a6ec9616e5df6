"""FIFO representation bank of past key embeddings."""
from __future__ import annotations

import torch
import torch.nn.functional as F

NORM_TOL = 1e-4


class RepresentationBank:
    """Fixed-size FIFO queue of unit-norm key embeddings.

    Rows start as independent random unit vectors. Each :meth:`enqueue`
    overwrites the oldest rows, so after any sequence of pushes the bank
    holds the last ``capacity`` vectors (or initial rows not yet reached).
    """

    def __init__(self, capacity: int, dim: int, seed: int = 0):
        if capacity <= 0 or dim <= 0:
            raise ValueError("capacity and dim must be positive")
        gen = torch.Generator().manual_seed(seed)
        self.capacity = capacity
        self.dim = dim
        self._storage = F.normalize(torch.randn(capacity, dim, generator=gen), dim=1)
        self.cursor = 0

    def __len__(self) -> int:
        return self.capacity

    @torch.no_grad()
    def enqueue(self, embeddings: torch.Tensor) -> "RepresentationBank":
        z = embeddings.detach().to(self._storage.dtype)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected (b, {self.dim}) embeddings, got {tuple(z.shape)}")
        b = z.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} exceeds bank capacity {self.capacity}")
        norms = z.norm(dim=1)
        if not torch.all((norms - 1).abs() <= NORM_TOL):
            raise ValueError("bank entries must be unit-norm; normalise embeddings first")
        idx = (self.cursor + torch.arange(b)) % self.capacity
        self._storage[idx] = z
        self.cursor = int((self.cursor + b) % self.capacity)
        return self

    def snapshot(self) -> torch.Tensor:
        """A copy of the ``capacity x dim`` storage, unaffected by later pushes."""
        return self._storage.clone()

    def state_dict(self) -> dict:
        return {"storage": self._storage.clone(), "cursor": self.cursor}

    def load_state_dict(self, state: dict) -> None:
        storage = state["storage"]
        if tuple(storage.shape) != (self.capacity, self.dim):
            raise ValueError(f"bank shape {tuple(storage.shape)} != {(self.capacity, self.dim)}")
        self._storage = storage.clone()
        self.cursor = int(state["cursor"])


def new_bank(capacity: int, dim: int, seed: int = 0) -> RepresentationBank:
    return RepresentationBank(capacity, dim, seed)
