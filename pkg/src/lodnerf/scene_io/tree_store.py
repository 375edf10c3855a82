"""Tree persistence: a JSON manifest plus one parameter blob per node.

Blob layout: a 16-byte header (4-byte magic, uint32 format version,
uint64 parameter count), then the node's parameters as little-endian
float32 in a fixed order (density grid, color features, appearance
table).  Array dimensions are global to the tree and live in the
manifest.  Every blob's CRC32 is recorded so a truncated or corrupted
download fails loudly instead of rendering garbage.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ChecksumMismatch, VersionMismatch
from ..field import VoxelField
from ..geometry import Aabb
from ..octree import LodTree, NodeId

BLOB_MAGIC = b"LODN"
FORMAT_VERSION = 1


def _blob_name(nid: NodeId) -> str:
    return f"L{nid.level}_{nid.ix}_{nid.iy}_{nid.iz}.bin"


def _write_blob(path: Path, params: np.ndarray) -> int:
    params = np.ascontiguousarray(params, dtype="<f4")
    payload = params.tobytes()
    header = BLOB_MAGIC + struct.pack("<IQ", FORMAT_VERSION, params.size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    return zlib.crc32(header + payload)


def _read_blob(path: Path, expected_crc: int) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if zlib.crc32(data) != expected_crc:
        raise ChecksumMismatch(f"{path}: blob checksum mismatch")
    if len(data) < 16 or data[:4] != BLOB_MAGIC:
        raise VersionMismatch(f"{path}: not a parameter blob")
    version, count = struct.unpack("<IQ", data[4:16])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    params = np.frombuffer(data[16:], dtype="<f4")
    if params.size != count:
        raise ChecksumMismatch(f"{path}: expected {count} parameters, found {params.size}")
    return params


def save_tree(path, tree: LodTree) -> None:
    """Write the manifest and one blob per node under ``path`` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    field_cfg = None
    nodes = []
    for nid in sorted(tree.nodes):
        node = tree.nodes[nid]
        entry = {
            "id": list(nid),
            "aabb": [list(node.aabb.min_corner), list(node.aabb.max_corner)],
            "gsd": node.gsd,
            "param_bytes": node.param_bytes,
        }
        if node.field is not None:
            fld = node.field
            if field_cfg is None:
                field_cfg = {"resolution": fld.resolution, "n_images": fld.n_images}
            entry["blob"] = _blob_name(nid)
            entry["crc32"] = _write_blob(path / entry["blob"], fld.flat_parameters())
        nodes.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid_size": tree.grid_size,
        "max_depth": tree.max_depth,
        "root_aabb": [list(tree.root_aabb.min_corner), list(tree.root_aabb.max_corner)],
        "total_param_bytes": tree.total_param_bytes,
        "field": field_cfg,
        "nodes": nodes,
    }
    with open(path / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)


def load_tree(path) -> LodTree:
    """Rebuild a tree saved by :func:`save_tree`; topology exact, parameters bit-exact.

    Raises
    ------
    VersionMismatch
        Unknown manifest or blob format version.
    ChecksumMismatch
        A blob fails its CRC32 or has the wrong parameter count.
    """
    path = Path(path)
    with open(path / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"manifest format {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    aabb = Aabb(*manifest["root_aabb"])
    ids = [NodeId(*e["id"]) for e in manifest["nodes"]]
    tree = LodTree(aabb, manifest["grid_size"], manifest["max_depth"], ids)
    cfg = manifest.get("field")
    for entry in manifest["nodes"]:
        if "blob" not in entry:
            continue
        params = _read_blob(path / entry["blob"], entry["crc32"])
        tree.nodes[NodeId(*entry["id"])].field = VoxelField.from_flat(
            params, cfg["resolution"], cfg["n_images"])
    return tree
