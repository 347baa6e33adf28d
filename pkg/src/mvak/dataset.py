"""Dataset emission and loading.

Layout, fixed by the external interface: `manifest.json` at the root plus one
directory per sample holding `view_{k}.ppm` (binary P6, 8-bit), `cond_{k}.f32`
(header line ``MVC1 <c> <h> <w>\\n`` then little-endian float32, channel-major),
`ref.ppm`, and `caption.txt` (space-separated token ids). Generation is a pure
function of (seed, config): reruns are byte-identical. Each manifest entry carries
the per-sample child seed, so the exact Scene can be regenerated for evaluation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .numerics import DomainError, Rng

MANIFEST_NAME = "manifest.json"
COND_MAGIC = b"MVC1"

RAYMAP = "raymap"
GEOMETRY = "geometry"

MODE_SETTINGS = {
    geometry.CAMERA_GUIDED: (geometry.CAMERA_GUIDED, RAYMAP),
    geometry.GEOMETRY_GUIDED: (geometry.GEOMETRY_GUIDED, GEOMETRY),
    "arbitrary": (geometry.ANCHOR, RAYMAP),
}

# Frontal band the reference view is drawn from.
REF_AZIMUTH_RANGE = (-45.0, 45.0)
REF_ELEVATION_RANGE = (-10.0, 30.0)


def write_ppm(path, img: np.ndarray) -> None:
    """img [3, h, w] in [0, 1] -> binary P6."""
    c, h, w = img.shape
    if c != 3:
        raise DomainError("PPM writer expects a 3-channel image")
    data = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> float32 [3, h, w] in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise DomainError(f"not a binary PPM: {path}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise DomainError("only 8-bit PPM supported")
    pos += 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=3 * h * w, offset=pos)
    return (pixels.reshape(h, w, 3).transpose(2, 0, 1) / np.float32(255.0)).astype(np.float32)


def write_cond(path, arr: np.ndarray) -> None:
    """arr [c, h, w] -> MVC1 header + little-endian float32, channel-major."""
    c, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(COND_MAGIC + b" %d %d %d\n" % (c, h, w))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_cond(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline()
        payload = f.read()
    parts = header.split()
    if parts[0] != COND_MAGIC or len(parts) != 4:
        raise DomainError(f"bad conditioning-map header in {path}")
    c, h, w = (int(p) for p in parts[1:])
    arr = np.frombuffer(payload, dtype="<f4", count=c * h * w)
    return arr.reshape(c, h, w).copy()


@dataclass
class Sample:
    views: np.ndarray  # [n, 3, h, w] float32 in [0, 1]
    cond_maps: np.ndarray  # [n, 6, h, w] float32
    reference: np.ndarray  # [3, h, w] float32
    caption_tokens: list[int]
    camera_set_id: str
    seed: int = 0


def reference_camera(rng: Rng) -> geometry.CameraPose:
    azimuth = float(rng.uniform(*REF_AZIMUTH_RANGE))
    elevation = float(rng.uniform(*REF_ELEVATION_RANGE))
    return geometry.make_camera(elevation, azimuth)


def render_sample(scene: geometry.Scene, ref_cam: geometry.CameraPose, mode: str,
                  h: int, w: int, film_extent: float) -> Sample:
    cam_set_id, cond_kind = MODE_SETTINGS[mode]
    cams = geometry.camera_set(cam_set_id)
    views = []
    conds = []
    for cam in cams:
        maps = geometry.rasterize(scene, cam, h, w, film_extent)
        views.append(maps.rgb.astype(np.float32))
        if cond_kind == RAYMAP:
            cond = geometry.compute_raymap(cam, h, w, film_extent)
        else:
            cond = geometry.geometry_cond_maps(maps)
        conds.append(cond.astype(np.float32))
    ref = geometry.rasterize(scene, ref_cam, h, w, film_extent).rgb.astype(np.float32)
    return Sample(
        views=np.stack(views),
        cond_maps=np.stack(conds),
        reference=ref,
        caption_tokens=list(scene.caption_tokens),
        camera_set_id=cam_set_id,
    )


def scene_for_seed(seed: int) -> tuple[geometry.Scene, geometry.CameraPose]:
    """Regenerate the scene and reference camera a sample was rendered from."""
    child = Rng(seed)
    scene = geometry.generate_scene(child)
    return scene, reference_camera(child)


def build_dataset(count: int, mode: str, h: int, w: int, rng: Rng, out_dir,
                  film_extent: float = geometry.FILM_EXTENT) -> dict:
    """Write `count` samples and the manifest; returns the manifest dict."""
    if count < 1:
        raise DomainError("dataset count must be >= 1")
    if mode not in MODE_SETTINGS:
        raise DomainError(f"unknown dataset mode {mode!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create dataset directory {out}: {exc}") from exc

    cam_set_id, cond_kind = MODE_SETTINGS[mode]
    n_views = len(geometry.camera_set(cam_set_id))
    entries = []
    for i in range(count):
        child_seed = rng.child_seed()
        scene, ref_cam = scene_for_seed(child_seed)
        sample = render_sample(scene, ref_cam, mode, h, w, film_extent)
        name = f"sample_{i:05d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        for k in range(n_views):
            write_ppm(sdir / f"view_{k}.ppm", sample.views[k])
            write_cond(sdir / f"cond_{k}.f32", sample.cond_maps[k])
        write_ppm(sdir / "ref.ppm", sample.reference)
        (sdir / "caption.txt").write_text(" ".join(str(t) for t in sample.caption_tokens) + "\n")
        entries.append({"dir": name, "seed": child_seed, "caption": sample.caption_tokens})

    manifest = {
        "format": 1,
        "mode": mode,
        "camera_set": cam_set_id,
        "cond_kind": cond_kind,
        "n": n_views,
        "h": h,
        "w": w,
        "film_extent": film_extent,
        "seed": rng.seed,
        "samples": entries,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / MANIFEST_NAME
    if not path.exists():
        raise IOError(f"no {MANIFEST_NAME} in {dataset_dir}")
    with open(path) as f:
        return json.load(f)


def load_sample(dataset_dir, manifest: dict, index: int) -> Sample:
    entry = manifest["samples"][index]
    sdir = Path(dataset_dir) / entry["dir"]
    n = manifest["n"]
    views = np.stack([read_ppm(sdir / f"view_{k}.ppm") for k in range(n)])
    conds = np.stack([read_cond(sdir / f"cond_{k}.f32") for k in range(n)])
    caption = [int(t) for t in (sdir / "caption.txt").read_text().split()]
    return Sample(
        views=views,
        cond_maps=conds,
        reference=read_ppm(sdir / "ref.ppm"),
        caption_tokens=caption,
        camera_set_id=manifest["camera_set"],
        seed=entry["seed"],
    )


def dir_checksum(root) -> dict[str, str]:
    """Relative file name -> sha256; used by byte-identity tests."""
    import hashlib

    sums = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            sums[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return sums
