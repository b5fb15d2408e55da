"""Process boundary for external feature models (AV-HuBERT-style, SyncNet-style).

The library never imports an ML framework for these models. It writes a
request tensor file, runs the adapter executable named by ``AVSYNC_ADAPTER``
and reads a response tensor file back:

    $AVSYNC_ADAPTER --kind KIND --model-ref REF --request REQ --response RESP

Tensor files are uncompressed ``.npz`` containers: every entry carries its
own dims and dtype, and numeric arrays are always written little-endian.

request:   clip_id (str), modality (str: visual|audio|fused), target_T (int64),
           crops u8[T, 96, 96, 3], mel f32[T_a, 80]
           (the absent modality is an all-zero array of the same shape)
response:  features f32[T, D] (row-major), extractor_id (str),
           optional note (str), e.g. how sub-frame length mismatches were handled
"""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from pathlib import Path

import numpy as np

from .errors import ModelLoadError, ShapeError

ADAPTER_ENV = "AVSYNC_ADAPTER"


def _little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype.kind in "biuf" and arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def write_tensor_file(path, **entries) -> None:
    arrays = {}
    for name, value in entries.items():
        if isinstance(value, str):
            arrays[name] = np.array(value)
        else:
            arrays[name] = np.ascontiguousarray(_little_endian(value))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_tensor_file(path) -> dict:
    out = {}
    with np.load(str(path), allow_pickle=False) as data:
        for name in data.files:
            arr = data[name]
            out[name] = str(arr) if arr.dtype.kind == "U" else arr
    return out


def adapter_command() -> list[str]:
    cmd = os.environ.get(ADAPTER_ENV, "").strip()
    if not cmd:
        raise ModelLoadError(f"external extractor requested but ${ADAPTER_ENV} is not set")
    return shlex.split(cmd)


class AdapterBackend:
    def __init__(self, spec, timeout: float = 600.0):
        self.spec = spec
        self.command = adapter_command()
        self.timeout = timeout

    def run(self, crops, mel, n_steps, modality, clip_id=""):
        with tempfile.TemporaryDirectory() as tmp:
            req = Path(tmp) / "request.npz"
            resp = Path(tmp) / "response.npz"
            write_tensor_file(
                req, clip_id=clip_id, modality=modality, target_T=np.int64(n_steps),
                crops=np.asarray(crops, dtype=np.uint8), mel=np.asarray(mel, dtype=np.float32),
            )
            cmd = self.command + ["--kind", self.spec.kind, "--model-ref", self.spec.model_ref,
                                  "--request", str(req), "--response", str(resp)]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ModelLoadError(f"adapter failed to run: {exc}") from exc
            if proc.returncode != 0 or not resp.exists():
                raise ModelLoadError(f"adapter exited {proc.returncode}: {proc.stderr.strip()[-500:]}")
            payload = read_tensor_file(resp)
        if "features" not in payload:
            raise ShapeError("adapter response has no 'features' entry")
        features = np.asarray(payload["features"], dtype=np.float64)
        if np.isnan(features).any():
            raise ShapeError("adapter returned NaN features")
        return features, payload.get("extractor_id", f"{self.spec.kind}:{self.spec.model_ref}")
