"""Checkpoint archives as plain ``.npz`` files.

Arrays are keyed by module path under a component prefix (``estimator/``,
``reconstructor/``) and optimizer moments live under ``optim/<name>/``. All
non-array information (configs, genotypes, epoch, history) is a JSON string
stored under ``meta``, so archives load with ``allow_pickle=False``.
"""
from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np
import torch

from .cells import Genotype

GENOTYPE_SEPARATOR = "\n---\n"


def genotypes_to_text(genotypes) -> str:
    return GENOTYPE_SEPARATOR.join(g.to_text().rstrip("\n") for g in genotypes) + "\n"


def genotypes_from_text(text: str) -> list[Genotype]:
    return [Genotype.from_text(chunk) for chunk in text.strip("\n").split(GENOTYPE_SEPARATOR)]


def _module_arrays(prefix, module):
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _optimizer_arrays(prefix, opt):
    arrays, meta = {}, {"param_groups": [], "steps": {}}
    sd = opt.state_dict()
    for group in sd["param_groups"]:
        meta["param_groups"].append({k: (list(v) if isinstance(v, tuple) else v)
                                     for k, v in group.items()})
    for idx, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy()
    return arrays, meta


def _restore_optimizer(opt, prefix, arrays, meta):
    state = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix + "/"):
            continue
        idx, key = name[len(prefix) + 1:].split("/", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    groups = []
    for group in meta["param_groups"]:
        g = dict(group)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save_checkpoint(path, meta: dict, modules: dict, optimizers: dict | None = None) -> None:
    """Write ``modules`` ({prefix: nn.Module}) and ``optimizers`` ({name: optim}) to ``path``."""
    arrays = {}
    meta = dict(meta)
    meta["optimizers"] = {}
    for prefix, module in modules.items():
        if module is not None:
            arrays.update(_module_arrays(prefix, module))
    for name, opt in (optimizers or {}).items():
        if opt is None:
            continue
        a, m = _optimizer_arrays(f"optim/{name}", opt)
        arrays.update(a)
        meta["optimizers"][name] = m
    arrays["meta"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(meta, arrays)``; raises FileNotFoundError for a missing archive."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(str(arrays.pop("meta")))
    return meta, arrays


def load_module(module, prefix: str, arrays: dict) -> None:
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v.copy())
          for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd)


def load_optimizer(opt, name: str, meta: dict, arrays: dict) -> None:
    if opt is None or name not in meta.get("optimizers", {}):
        return
    _restore_optimizer(opt, f"optim/{name}", arrays, meta["optimizers"][name])


def has_component(arrays: dict, prefix: str) -> bool:
    return any(k.startswith(prefix + "/") for k in arrays)
