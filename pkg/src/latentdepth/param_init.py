"""Deterministic, seed-driven parameter initialization.

Modules are built with torch's default init, then re-initialized here in
sorted parameter-name order from an explicit generator, so two builds with
the same seed and config are bit identical.

Modules may declare ZERO_INIT_PARAMS, a tuple of local parameter names that
must start at exactly zero (identity residuals, gate convs, head biases).
Those parameters never consume generator draws, which keeps the random
stream of the remaining parameters identical across configs that merely add
or remove zero-initialized submodules.
"""

from __future__ import annotations

import torch
from torch import nn


def zero_init_names(module: nn.Module) -> set[str]:
    names: set[str] = set()
    for mod_name, m in module.named_modules():
        for local in getattr(m, "ZERO_INIT_PARAMS", ()):
            names.add(f"{mod_name}.{local}" if mod_name else local)
    return names


def seeded_init_(module: nn.Module, generator: torch.Generator) -> None:
    skip = zero_init_names(module)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if name in skip:
                p.zero_()
            elif p.dim() >= 2:
                fan_in = p.shape[1:].numel()
                std = (2.0 / fan_in) ** 0.5
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
            elif name.endswith("bias"):
                p.zero_()
            else:
                # 1-d weight vectors are norm gains
                p.fill_(1.0)
