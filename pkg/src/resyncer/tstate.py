"""Torch module/optimizer state <-> named float32 numpy arrays.

Bridges nn.Module training state and the checkpoint container in ndio.
Array names use prefixes: ``param/`` for weights, ``adam_m/`` / ``adam_v/``
for Adam moments, so one flat dict round-trips a full training state.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DataError

PARAM = "param/"
ADAM_M = "adam_m/"
ADAM_V = "adam_v/"


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        PARAM + name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = {}
    for name, tensor in module.state_dict().items():
        key = PARAM + name
        if key not in arrays:
            raise DataError(f"checkpoint missing weight {name}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise DataError(
                f"weight {name} shape {arr.shape} != expected {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy()).to(tensor.dtype)
    module.load_state_dict(state)


def adam_arrays(optimizer: torch.optim.Adam, module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Adam moment tensors keyed by parameter name; step count under meta."""
    named = {id(p): n for n, p in module.named_parameters()}
    out: dict[str, np.ndarray] = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = named[id(p)]
            out[ADAM_M + name] = state["exp_avg"].cpu().numpy().astype(np.float32)
            out[ADAM_V + name] = state["exp_avg_sq"].cpu().numpy().astype(np.float32)
    return out


def load_adam_arrays(
    optimizer: torch.optim.Adam,
    module: torch.nn.Module,
    arrays: dict[str, np.ndarray],
    step: int,
) -> None:
    if not any(k.startswith(ADAM_M) for k in arrays):
        return
    for name, p in module.named_parameters():
        mk, vk = ADAM_M + name, ADAM_V + name
        if mk not in arrays or vk not in arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.from_numpy(arrays[mk].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[vk].copy()),
        }
