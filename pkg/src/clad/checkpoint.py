"""Self-describing checkpoint container.

A single ``.npz`` file mapping parameter names to little-endian float32
payloads (shape carried by the array), plus a JSON config echo, RNG state, and
arbitrary JSON metadata. The same format is used by every module.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig

_PARAM_PREFIX = "param::"
_META_CONFIG = "__config_json__"
_META_EXTRA = "__extra_json__"
_META_RNG = "__torch_rng_state__"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str | Path, module: torch.nn.Module, config: RunConfig,
                    extra: dict | None = None,
                    rng_state: torch.Tensor | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        if np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype("<f4")
        arrays[_PARAM_PREFIX + name] = arr
    arrays[_META_CONFIG] = np.frombuffer(config.to_json().encode(), dtype=np.uint8)
    arrays[_META_EXTRA] = np.frombuffer(
        json.dumps(extra or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    if rng_state is None:
        rng_state = torch.get_rng_state()
    arrays[_META_RNG] = rng_state.numpy()
    _write_npz_deterministic(path, arrays)
    return path


def _write_npz_deterministic(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """npz with fixed zip timestamps: identical inputs give identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]))
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], RunConfig, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    with np.load(path) as z:
        params = {
            k[len(_PARAM_PREFIX):]: z[k] for k in z.files if k.startswith(_PARAM_PREFIX)
        }
        config = RunConfig.from_json(bytes(z[_META_CONFIG]).decode())
        extra = json.loads(bytes(z[_META_EXTRA]).decode())
    return params, config, extra


def load_into(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = module.state_dict()
    missing = set(state) - set(params)
    unexpected = set(params) - set(state)
    if missing or unexpected:
        raise CheckpointError(
            f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}"
        )
    module.load_state_dict(
        {k: torch.as_tensor(v).to(state[k].dtype) for k, v in params.items()}
    )
