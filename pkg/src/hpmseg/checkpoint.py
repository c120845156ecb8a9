"""Checkpoint archives: one zip (npz) holding named ``.npy`` parameter arrays
and a ``manifest.json`` member.

Pretraining archives use the prefixes ``student.encoder.``,
``student.reconstructor.``, ``student.predictor.``, ``teacher.`` and
``optim.``; segmentation archives use ``seg.`` (encoder under
``seg.encoder.``). Encoder names are identical after stripping the prefix,
so a pretrained encoder loads into the segmentation net by prefix match.
"""

from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np
import torch

MANIFEST = "manifest.json"


def save_checkpoint(path, arrays, manifest):
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
            zf.writestr(name + ".npy", buf.getvalue())
        zf.writestr(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, path)


def load_checkpoint(path):
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST))
        for name in zf.namelist():
            if name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(
                        io.BytesIO(fh.read()), allow_pickle=False
                    )
    return arrays, manifest


def module_arrays(module, prefix):
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def with_prefix(arrays, prefix):
    """Arrays under ``prefix`` with the prefix stripped, as tensors."""
    return {
        k[len(prefix):]: torch.from_numpy(np.array(v))
        for k, v in arrays.items() if k.startswith(prefix)
    }


def optimizer_arrays(optimizer, prefix="optim."):
    """Flatten optimizer state tensors; param-group settings go in the manifest."""
    sd = optimizer.state_dict()
    arrays = {}
    for pid, state in sd["state"].items():
        for key, val in state.items():
            arrays[f"{prefix}{pid}.{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    return arrays, sd["param_groups"]


def load_optimizer(optimizer, arrays, param_groups, prefix="optim."):
    state = {}
    for name, arr in arrays.items():
        if not name.startswith(prefix):
            continue
        pid, key = name[len(prefix):].split(".", 1)
        state.setdefault(int(pid), {})[key] = torch.from_numpy(np.array(arr))
    optimizer.load_state_dict({"state": state, "param_groups": param_groups})
