"""Checkpoint files: a text manifest followed by raw little-endian float32 payloads.

Layout::

    GESTPOSE-CHECKPOINT v1
    stage: stage1
    meta: key=value
    config: key = value
    param: <name> <rank> <extent> ...
    end-header
    <payload bytes, parameters concatenated in manifest order>
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError

MAGIC = "GESTPOSE-CHECKPOINT"
VERSION = "v1"
_END = "end-header"
_LE_F32 = np.dtype("<f4")


@dataclass
class CheckpointManifest:
    stage: str
    config: dict = field(default_factory=dict)
    inventory: list = field(default_factory=list)  # [(name, shape)]
    meta: dict = field(default_factory=dict)

    def payload_bytes(self):
        return sum(4 * int(np.prod(shape, dtype=np.int64)) for _, shape in self.inventory)

    def header_text(self):
        lines = [f"{MAGIC} {VERSION}", f"stage: {self.stage}"]
        lines += [f"meta: {k}={v}" for k, v in self.meta.items()]
        lines += [f"config: {k} = {v}" for k, v in self.config.items()]
        for name, shape in self.inventory:
            extents = " ".join(str(int(e)) for e in shape)
            lines.append(f"param: {name} {len(shape)} {extents}".rstrip())
        lines.append(_END)
        return "\n".join(lines) + "\n"


def save_checkpoint(path, arrays, stage, config=None, meta=None):
    """Write ``arrays`` (ordered name -> ndarray) to ``path``."""
    manifest = CheckpointManifest(
        stage=stage,
        config=dict(config or {}),
        inventory=[(n, tuple(np.shape(a))) for n, a in arrays.items()],
        meta=dict(meta or {"format": "float32-le"}),
    )
    for n, _ in manifest.inventory:
        if " " in n or "\n" in n:
            raise ManifestError(f"parameter name {n!r} contains whitespace")
    with open(path, "wb") as fh:
        fh.write(manifest.header_text().encode("utf-8"))
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype=_LE_F32).tobytes())
    return manifest


def _parse_header(lines):
    if not lines or lines[0].split() != [MAGIC, VERSION]:
        got = lines[0] if lines else "<empty>"
        raise ManifestError(f"not a {MAGIC} {VERSION} file (header {got!r})")
    manifest = CheckpointManifest(stage="")
    for ln in lines[1:]:
        key, _, rest = ln.partition(": ")
        if key == "stage":
            manifest.stage = rest
        elif key == "meta":
            k, _, v = rest.partition("=")
            manifest.meta[k] = v
        elif key == "config":
            k, _, v = rest.partition(" = ")
            manifest.config[k] = v
        elif key == "param":
            parts = rest.split()
            try:
                rank = int(parts[1])
                shape = tuple(int(e) for e in parts[2:])
            except (IndexError, ValueError) as exc:
                raise ManifestError(f"bad parameter line {ln!r}") from exc
            if len(shape) != rank:
                raise ManifestError(f"{parts[0]}: rank {rank} but {len(shape)} extents")
            manifest.inventory.append((parts[0], shape))
        else:
            raise ManifestError(f"unrecognised header line {ln!r}")
    return manifest


def read_manifest(path):
    """Header only; the payload is not validated."""
    manifest, _ = _read(path, with_payload=False)
    return manifest


def _read(path, with_payload=True):
    raw = Path(path).read_bytes()
    marker = ("\n" + _END + "\n").encode()
    cut = raw.find(marker)
    if cut < 0:
        raise ManifestError(f"{path}: missing '{_END}' line")
    header = raw[:cut].decode("utf-8").split("\n")
    manifest = _parse_header(header)
    if not with_payload:
        return manifest, None
    payload = raw[cut + len(marker):]
    expected = manifest.payload_bytes()
    if len(payload) != expected:
        raise ManifestError(
            f"{path}: payload is {len(payload)} bytes, manifest expects {expected} bytes")
    return manifest, payload


def load_checkpoint(path):
    """Return ``(manifest, arrays)`` with arrays in manifest order."""
    manifest, payload = _read(path)
    arrays = {}
    offset = 0
    for name, shape in manifest.inventory:
        n = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(payload, dtype=_LE_F32, count=n, offset=offset) \
            .astype(np.float32).reshape(shape)
        offset += 4 * n
    return manifest, arrays
