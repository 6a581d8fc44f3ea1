"""On-disk formats: image containers, dataset manifests, checkpoints.

Container (``.vol`` / ``.frm``)::

    F2VREG-CONTAINER 1
    shape 32 128 128
    spacing 0.62 0.62 0.62
    center 0.0 0.0 0.0
    dtype float32-le
    order row-major, first axis slowest (z, y, x)
    end
    <prod(shape) little-endian float32 values>

Checkpoint (``.ckpt``)::

    F2VREG-CKPT 1
    {"config": {...}, "tensors": [{"name": ..., "shape": [...]}, ...]}
    <little-endian float32 values of every tensor, in header order>

Manifests are JSON with paths relative to the manifest's directory.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GridSpec, Pose
from .resample import Frame, Volume

CONTAINER_MAGIC = "F2VREG-CONTAINER"
CONTAINER_VERSION = 1
CKPT_MAGIC = "F2VREG-CKPT"
CKPT_VERSION = 1
MANIFEST_FORMAT = "f2vreg-manifest"
MANIFEST_VERSION = 1


class FormatError(ValueError):
    pass


def write_container(path, image: Volume | Frame) -> None:
    spec = image.spec
    header = [
        f"{CONTAINER_MAGIC} {CONTAINER_VERSION}",
        "shape " + " ".join(str(n) for n in spec.shape),
        "spacing " + " ".join(repr(s) for s in spec.spacing),
        "center " + " ".join(repr(c) for c in spec.center),
        "dtype float32-le",
        "order row-major, first axis slowest (z, y, x)",
        "end",
    ]
    payload = np.ascontiguousarray(image.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(payload)


def read_container(path) -> Volume | Frame:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from exc
    fields = {}
    pos = 0
    first = True
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: truncated header")
        line = raw[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if first:
            magic, _, ver = line.partition(" ")
            if magic != CONTAINER_MAGIC:
                raise FormatError(f"{path}: not a container file")
            if ver != str(CONTAINER_VERSION):
                raise FormatError(f"{path}: unsupported container version {ver!r}")
            first = False
            continue
        if line == "end":
            break
        key, _, val = line.partition(" ")
        fields[key] = val
    try:
        shape = tuple(int(v) for v in fields["shape"].split())
        spacing = tuple(float(v) for v in fields["spacing"].split())
        center = tuple(float(v) for v in fields["center"].split())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    if fields.get("dtype") != "float32-le":
        raise FormatError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    n = int(np.prod(shape))
    if len(raw) - pos != 4 * n:
        raise FormatError(f"{path}: payload is {len(raw) - pos} bytes, expected {4 * n}")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(shape)
    spec = GridSpec(shape, spacing, center)
    return Volume(data, spec) if len(shape) == 3 else Frame(data, spec)


# ---------------------------------------------------------------- manifest


@dataclass
class ManifestEntry:
    volume_id: int
    transform_id: int
    split: str
    volume: str
    frames: list[str]
    mask: str
    pose_gt: Pose
    dist_gt: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "volume_id": self.volume_id,
            "transform_id": self.transform_id,
            "split": self.split,
            "volume": self.volume,
            "frames": list(self.frames),
            "mask": self.mask,
            "pose_gt": [float(v) for v in self.pose_gt.as_vector()],
            "dist_gt": [float(v) for v in self.dist_gt],
        }

    @classmethod
    def from_json(cls, d: dict) -> "ManifestEntry":
        return cls(
            int(d["volume_id"]),
            int(d["transform_id"]),
            str(d["split"]),
            d["volume"],
            list(d["frames"]),
            d["mask"],
            Pose.from_vector(d["pose_gt"]),
            tuple(float(v) for v in d["dist_gt"]),
        )


@dataclass
class DatasetManifest:
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    root: Path | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.split] = out.get(e.split, 0) + 1
        return out


def write_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": manifest.seed,
        "config": manifest.config,
        "pose_order": "tx ty tz rx ry rz (mm, degrees; R = Rz Ry Rx about the volume center)",
        "entries": [e.to_json() for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: not a version-{MANIFEST_VERSION} manifest")
    entries = [ManifestEntry.from_json(e) for e in doc["entries"]]
    return DatasetManifest(int(doc["seed"]), entries, doc.get("config", {}), path.parent)


def load_sample(manifest: DatasetManifest, entry: ManifestEntry, cache: dict | None = None):
    """Read one entry's assets into a :class:`f2vreg.simulate.Sample`."""
    from .simulate import Sample

    root = manifest.root or Path(".")

    def get(rel):
        if cache is not None and rel in cache:
            return cache[rel]
        img = read_container(root / rel)
        if cache is not None:
            cache[rel] = img
        return img

    frames = [get(p) for p in entry.frames]
    return Sample(
        volume=get(entry.volume),
        anchor=frames[0],
        adjacent=tuple(frames[1:]),
        mask=get(entry.mask),
        pose_gt=entry.pose_gt,
        dist_gt=np.array(entry.dist_gt),
    )


def load_split(manifest: DatasetManifest, split: str):
    cache: dict = {}
    return [load_sample(manifest, e, cache) for e in manifest.split(split)]


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path, params: dict, config: dict) -> None:
    names = list(params)
    arrays = [np.ascontiguousarray(getattr(params[n], "data", params[n]), dtype="<f4") for n in names]
    header = {"config": config, "tensors": [{"name": n, "shape": list(a.shape)} for n, a in zip(names, arrays)]}
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {CKPT_VERSION}\n".encode("ascii"))
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for a in arrays:
            fh.write(a.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from exc
    l1 = raw.find(b"\n")
    l2 = raw.find(b"\n", l1 + 1)
    if l1 < 0 or l2 < 0 or raw[:l1].decode("ascii", "replace") != f"{CKPT_MAGIC} {CKPT_VERSION}":
        raise FormatError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    try:
        header = json.loads(raw[l1 + 1 : l2])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    pos = l2 + 1
    out = {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated payload at tensor {t['name']!r}")
        out[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out, header["config"]
