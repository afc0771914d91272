"""Versioned tensor container shared by backbone weight files and checkpoints.

Layout is a safetensors file: its JSON header is the manifest (name, dtype, shape,
byte offsets) and its string metadata carries ``format``, ``kind``, ``version``, a
SHA-256 over every tensor's name and bytes, and a JSON blob of extra metadata.
"""

from __future__ import annotations

import hashlib
import json

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from ccfusion.errors import IntegrityError, VersionError
from ccfusion.imagecore import atomic_write

FORMAT = "ccfusion-tensors"
FORMAT_VERSION = 1


def tensor_digest(tensors):
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.view(-1).view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def write_container(path, tensors, kind, meta=None, version=FORMAT_VERSION):
    tensors = {k: v.detach().contiguous().cpu().clone() for k, v in tensors.items()}
    header = {
        "format": FORMAT,
        "kind": kind,
        "version": str(version),
        "sha256": tensor_digest(tensors),
        "meta": json.dumps(meta or {}, sort_keys=True),
    }
    atomic_write(path, lambda tmp: save_file(tensors, tmp, metadata=header), suffix=".tmp")


def read_container(path, kind):
    """Return ``(tensors, meta)``; raises ``VersionError`` or ``IntegrityError``."""
    try:
        with safe_open(str(path), framework="pt") as fh:
            header = fh.metadata() or {}
            tensors = {name: fh.get_tensor(name) for name in fh.keys()}
    except (SafetensorError, OSError, ValueError, RuntimeError) as exc:
        raise IntegrityError(f"{path}: unreadable tensor container ({exc})") from exc
    if header.get("format") != FORMAT:
        raise IntegrityError(f"{path}: not a {FORMAT} file")
    if header.get("kind") != kind:
        raise IntegrityError(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    try:
        version = int(header["version"])
    except (KeyError, ValueError):
        raise IntegrityError(f"{path}: missing format version") from None
    if version > FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version} is newer than supported {FORMAT_VERSION}")
    if tensor_digest(tensors) != header.get("sha256"):
        raise IntegrityError(f"{path}: checksum mismatch")
    return tensors, json.loads(header.get("meta", "{}"))


def read_manifest(path):
    """(name, shape, dtype) for every tensor, without loading data."""
    with safe_open(str(path), framework="pt") as fh:
        out = []
        for name in fh.keys():
            sl = fh.get_slice(name)
            out.append((name, tuple(sl.get_shape()), sl.get_dtype()))
        return out
