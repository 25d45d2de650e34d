"""Content digests over named parameter collections.

Used to prove that frozen weights survive training untouched and to verify
checkpoint integrity. The digest is a sha256 over (name, shape, raw float32
bytes) in sorted name order, so it is independent of dict insertion order.
"""

from __future__ import annotations

import hashlib
from typing import Iterable, Mapping

import numpy as np
import torch


def parameter_digest(named_tensors: Mapping[str, torch.Tensor] | Iterable[tuple[str, torch.Tensor]]) -> str:
    if isinstance(named_tensors, Mapping):
        items = named_tensors.items()
    else:
        items = list(named_tensors)
    h = hashlib.sha256()
    for name, tensor in sorted(items, key=lambda kv: kv[0]):
        arr = tensor.detach().cpu().numpy()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(arr.shape)).encode("ascii"))
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return h.hexdigest()
