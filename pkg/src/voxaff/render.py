"""Voxel ray casting: depth, surface-feature, and affordance renders.

Rays leave the camera through pixel centers and march the r^3 lattice of
the normalized cube with an exact amortized grid traversal (one cell per
step, no samples skipped).  A hit reports the *entry face* of the first
occupied cell; recorded depth is the camera-frame z coordinate of that
face point, which makes unprojection land exactly back on the face.
Pixels whose rays never meet an occupied cell read 0.

The camera must sit outside the cube.  Traversal order at exact tMax
ties is x before y before z, so renders are bit-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import CameraInsideCubeError, DomainError, ShapeMismatchError
from .geometry import Viewpoint
from .synthscene import SyntheticObject, ground_truth_occupancy, surface_features
from .voxel import AffordanceHeatmap, as_index_array

Array = np.ndarray

#: ``kind`` markers for the image JSON container.
_IMAGE_KINDS = ("depth", "scalar", "feature")


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel camera-frame z depths; 0 marks a miss."""

    width: int
    height: int
    values: Array  # (height, width) float64

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.height, self.width):
            raise ShapeMismatchError(
                f"depth values shape {values.shape} != {(self.height, self.width)}"
            )
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DomainError("depths must be finite and non-negative")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class ScalarImage:
    """Per-pixel scalar render (e.g. projected affordance)."""

    width: int
    height: int
    values: Array  # (height, width) float64

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.height, self.width):
            raise ShapeMismatchError(
                f"scalar values shape {values.shape} != {(self.height, self.width)}"
            )
        if not np.all(np.isfinite(values)):
            raise DomainError("scalar image must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def total(self) -> float:
        return float(self.values.sum())


def occupancy_cube(occupied, r: int) -> Array:
    """(r, r, r) boolean lookup cube from a set/array of index triples."""
    arr = as_index_array(occupied, r)
    cube = np.zeros((r, r, r), dtype=bool)
    if arr.shape[0]:
        cube[arr[:, 0], arr[:, 1], arr[:, 2]] = True
    return cube


def _traverse(occ: Array, view: Viewpoint):
    """March every pixel ray through the occupancy cube.

    Returns per-pixel arrays (flattened row-major): ``hit`` mask, world
    ray-length ``t`` to the entry face, hit ``cells`` (n, 3), entry
    ``axis`` in {0,1,2}, face ``sign`` (+-1, pointing against the ray),
    and the camera-frame z per unit ray length (for depth conversion).
    """
    r = occ.shape[0]
    intr = view.intrinsics
    h, w = intr.height, intr.width
    n = h * w

    uu = (np.arange(w) + 0.5 - intr.cx) / intr.fx
    vv = (np.arange(h) + 0.5 - intr.cy) / intr.fy
    du, dv = np.meshgrid(uu, vv)
    dirs_cam = np.stack([du, dv, np.ones_like(du)], axis=-1).reshape(n, 3)
    inv_norm = 1.0 / np.linalg.norm(dirs_cam, axis=1)
    dirs = (dirs_cam * inv_norm[:, None]) @ view.pose.rotation.T
    z_per_t = inv_norm  # camera z component of the unit ray

    origin = view.pose.translation
    if np.max(np.abs(origin)) <= 0.5:
        raise CameraInsideCubeError(f"camera origin {origin} lies inside the cube")

    og = (origin + 0.5) * r
    dg = dirs * r

    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (0.0 - og) / dg
        t_hi = (float(r) - og) / dg
    parallel = dg == 0.0
    t_near = np.where(parallel, -np.inf, np.minimum(t_lo, t_hi))
    t_far = np.where(parallel, np.inf, np.maximum(t_lo, t_hi))
    miss_parallel = np.any(parallel & ((og < 0.0) | (og > r)), axis=1)

    t_enter = t_near.max(axis=1)
    enter_axis = t_near.argmax(axis=1)
    t_exit = t_far.min(axis=1)
    reaches = (t_enter <= t_exit) & (t_exit > 0.0) & ~miss_parallel

    hit = np.zeros(n, dtype=bool)
    t_hit = np.zeros(n)
    cells_hit = np.zeros((n, 3), dtype=np.int64)
    axis_hit = np.zeros(n, dtype=np.int64)
    sign_hit = np.zeros(n, dtype=np.int64)

    idx = np.nonzero(reaches)[0]
    if idx.size == 0:
        return hit, t_hit, cells_hit, axis_hit, sign_hit, z_per_t

    d = dg[idx]
    t_curr = t_enter[idx]
    axis_curr = enter_axis[idx]
    step = np.sign(d).astype(np.int64)
    pos = og + t_curr[:, None] * d
    cell = np.clip(np.floor(pos).astype(np.int64), 0, r - 1)
    # Entry axis is known exactly: the ray enters through that cube face.
    rows = np.arange(idx.size)
    cell[rows, axis_curr] = np.where(step[rows, axis_curr] > 0, 0, r - 1)

    with np.errstate(divide="ignore"):
        t_delta = np.where(d != 0.0, 1.0 / np.abs(d), np.inf)
        next_bound = cell + (step > 0)
        t_max = np.where(d != 0.0, (next_bound - og) / d, np.inf)

    for _ in range(3 * r + 2):
        if idx.size == 0:
            break
        occ_here = occ[cell[:, 0], cell[:, 1], cell[:, 2]]
        if np.any(occ_here):
            out = idx[occ_here]
            hit[out] = True
            t_hit[out] = t_curr[occ_here]
            cells_hit[out] = cell[occ_here]
            axis_hit[out] = axis_curr[occ_here]
            rows_out = np.nonzero(occ_here)[0]
            sign_hit[out] = -step[rows_out, axis_curr[occ_here]]
            keep = ~occ_here
            idx, d, t_curr, axis_curr = idx[keep], d[keep], t_curr[keep], axis_curr[keep]
            step, cell, t_delta, t_max = step[keep], cell[keep], t_delta[keep], t_max[keep]
            if idx.size == 0:
                break
        axis_curr = np.argmin(t_max, axis=1)
        rows = np.arange(idx.size)
        t_curr = t_max[rows, axis_curr]
        cell[rows, axis_curr] += step[rows, axis_curr]
        t_max[rows, axis_curr] += t_delta[rows, axis_curr]
        inside = (cell[rows, axis_curr] >= 0) & (cell[rows, axis_curr] < r)
        if not np.all(inside):
            idx, d, t_curr, axis_curr = (
                idx[inside], d[inside], t_curr[inside], axis_curr[inside],
            )
            step, cell, t_delta, t_max = (
                step[inside], cell[inside], t_delta[inside], t_max[inside],
            )

    return hit, t_hit, cells_hit, axis_hit, sign_hit, z_per_t


def raycast_depth(occupied, r: int, view: Viewpoint) -> DepthImage:
    """Depth of the first occupied cell along each pixel ray (0 = miss).

    Depth is the camera-frame z of the point where the ray crosses into
    the cell, so ``unproject_pixel(u + 0.5, v + 0.5, depth)`` reproduces
    that entry-face point exactly.
    """
    occ = occupancy_cube(occupied, r)
    hit, t_hit, _, _, _, z_per_t = _traverse(occ, view)
    depth = np.where(hit, t_hit * z_per_t, 0.0)
    intr = view.intrinsics
    return DepthImage(width=intr.width, height=intr.height, values=depth.reshape(intr.height, intr.width))


def render_views(
    obj: SyntheticObject, view: Viewpoint, r: int, channels: int = 16
) -> tuple[DepthImage, Array]:
    """Render one posed observation of an object: depth plus surface features.

    Features carry the hit part's label embedding and the entry-face
    normal (see ``surface_features``); missed pixels stay zero.
    """
    occ = ground_truth_occupancy(obj, r).values[..., 0] > 0
    hit, t_hit, _, axis_hit, sign_hit, z_per_t = _traverse(occ, view)
    intr = view.intrinsics
    h, w = intr.height, intr.width
    depth = np.where(hit, t_hit * z_per_t, 0.0).reshape(h, w)
    feats = np.zeros((h * w, channels))
    if np.any(hit):
        uu = (np.arange(w) + 0.5 - intr.cx) / intr.fx
        vv = (np.arange(h) + 0.5 - intr.cy) / intr.fy
        du, dv = np.meshgrid(uu, vv)
        dirs_cam = np.stack([du, dv, np.ones_like(du)], axis=-1).reshape(-1, 3)
        dirs = (dirs_cam * (z_per_t[:, None])) @ view.pose.rotation.T
        points = view.pose.translation + t_hit[hit, None] * dirs[hit]
        normals = np.zeros((int(hit.sum()), 3))
        normals[np.arange(normals.shape[0]), axis_hit[hit]] = sign_hit[hit]
        feats[hit] = surface_features(obj, points, normals, channels)
    return (
        DepthImage(width=w, height=h, values=depth),
        feats.reshape(h, w, channels),
    )


def render_affordance(occupied, heat: AffordanceHeatmap, view: Viewpoint) -> ScalarImage:
    """Project a voxel heatmap through the occupancy: first-hit value per pixel.

    The full occupancy occludes: a heated voxel hidden behind unheated
    geometry contributes nothing.  Misses and unheated hits read 0.
    """
    occ_arr = as_index_array(occupied, heat.resolution)
    heat.check_support(occ_arr)
    r = heat.resolution
    occ = occupancy_cube(occ_arr, r)
    values = np.zeros((r, r, r))
    if len(heat):
        values[heat.positions[:, 0], heat.positions[:, 1], heat.positions[:, 2]] = heat.values
    hit, _, cells, _, _, _ = _traverse(occ, view)
    out = np.zeros(hit.shape[0])
    out[hit] = values[cells[hit, 0], cells[hit, 1], cells[hit, 2]]
    intr = view.intrinsics
    return ScalarImage(
        width=intr.width, height=intr.height, values=out.reshape(intr.height, intr.width)
    )


# --- serialization ---------------------------------------------------------


def image_to_dict(image) -> dict:
    if isinstance(image, DepthImage):
        kind = "depth"
        values = image.values
    elif isinstance(image, ScalarImage):
        kind = "scalar"
        values = image.values
    elif isinstance(image, np.ndarray) and image.ndim == 3:
        kind = "feature"
        values = image
    else:
        raise DomainError(f"cannot serialize image of type {type(image)!r}")
    record = {
        "kind": kind,
        "width": int(values.shape[1]),
        "height": int(values.shape[0]),
        "values": values.tolist(),
    }
    if kind == "feature":
        record["channels"] = int(values.shape[2])
    return record


def image_from_dict(data: dict):
    try:
        kind = data["kind"]
        if kind not in _IMAGE_KINDS:
            raise DomainError(f"unknown image kind {kind!r}")
        values = np.array(data["values"], dtype=float)
        if kind == "depth":
            return DepthImage(width=int(data["width"]), height=int(data["height"]), values=values)
        if kind == "scalar":
            return ScalarImage(width=int(data["width"]), height=int(data["height"]), values=values)
        expected = (int(data["height"]), int(data["width"]), int(data["channels"]))
        if values.shape != expected:
            raise ShapeMismatchError(f"feature image shape {values.shape} != {expected}")
        return values
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed image record: {exc}") from exc


def save_image(path, image):
    with open(path, "w") as f:
        json.dump(image_to_dict(image), f, sort_keys=True)
        f.write("\n")


def load_image(path):
    with open(path) as f:
        return image_from_dict(json.load(f))


def depth_to_pgm(image: DepthImage) -> str:
    """ASCII PGM preview: zero stays black, max depth maps to gray 255."""
    peak = float(image.values.max())
    if peak > 0:
        gray = np.rint(image.values / peak * 255.0).astype(int)
    else:
        gray = np.zeros_like(image.values, dtype=int)
    lines = ["P2", f"{image.width} {image.height}", "255"]
    lines += [" ".join(str(v) for v in row) for row in gray]
    return "\n".join(lines) + "\n"


def save_depth_pgm(path, image: DepthImage):
    with open(path, "w") as f:
        f.write(depth_to_pgm(image))
