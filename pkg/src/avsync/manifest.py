"""Line-delimited JSON manifests of clips to evaluate."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .errors import ManifestError

REQUIRED = ("clip_id", "video_path")
PATH_FIELDS = ("video_path", "audio_path", "landmarks_path", "gt_video_path", "gt_landmarks_path")
KNOWN = REQUIRED + PATH_FIELDS[1:]


@dataclass(frozen=True)
class ManifestRecord:
    clip_id: str
    video_path: Path
    audio_path: Optional[Path] = None
    landmarks_path: Optional[Path] = None
    gt_video_path: Optional[Path] = None
    gt_landmarks_path: Optional[Path] = None
    line: int = 0


@dataclass(frozen=True)
class Diagnostic:
    line: int
    level: str  # "error" | "warning"
    field: str
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.level}: {self.field}: {self.message}"


def _parse_lines(path: Path):
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            yield lineno, None, f"invalid JSON: {exc.msg}"
            continue
        if not isinstance(obj, dict):
            yield lineno, None, "record is not a JSON object"
            continue
        yield lineno, obj, None


def validate_manifest(path) -> list[Diagnostic]:
    """Per-line problems with a manifest; an empty list means it is usable."""
    path = Path(path)
    diags: list[Diagnostic] = []
    try:
        lines = list(_parse_lines(path))
    except OSError as exc:
        return [Diagnostic(0, "error", "manifest", f"unreadable: {exc}")]
    if not lines:
        return [Diagnostic(0, "error", "manifest", "no records")]
    seen: dict[str, int] = {}
    for lineno, obj, err in lines:
        if err:
            diags.append(Diagnostic(lineno, "error", "record", err))
            continue
        for name in REQUIRED:
            if not isinstance(obj.get(name), str) or not obj.get(name):
                diags.append(Diagnostic(lineno, "error", name, "missing or empty"))
        for name in obj:
            if name not in KNOWN:
                diags.append(Diagnostic(lineno, "warning", name, "unknown field ignored"))
        for name in PATH_FIELDS:
            value = obj.get(name)
            if isinstance(value, str) and value and not (path.parent / value).exists():
                diags.append(Diagnostic(lineno, "error", name, f"file not found: {value}"))
        cid = obj.get("clip_id")
        if isinstance(cid, str) and cid:
            if cid in seen:
                diags.append(Diagnostic(lineno, "warning", "clip_id", f"duplicate of line {seen[cid]}"))
            else:
                seen[cid] = lineno
    return diags


def read_manifest(path, require: tuple = ()) -> list[ManifestRecord]:
    """Parse a manifest, resolving relative paths against its directory.

    ``require`` names optional fields every record must carry; the first
    record lacking one raises ManifestError naming it.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    for lineno, obj, err in _parse_lines(path):
        if err:
            raise ManifestError(f"{path}:{lineno}: {err}")
        for name in REQUIRED + tuple(require):
            if not obj.get(name):
                raise ManifestError(f"{path}:{lineno}: record lacks required field '{name}'")
        paths = {name: (path.parent / obj[name]) if obj.get(name) else None for name in PATH_FIELDS}
        records.append(ManifestRecord(clip_id=str(obj["clip_id"]), line=lineno, **paths))
    if not records:
        raise ManifestError(f"manifest {path} has no records")
    return records
