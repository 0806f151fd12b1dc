"""Posed-image datasets in the transforms_{split}.json layout.

Each split file holds ``camera_angle_x`` and a list of frames with a
``file_path`` (extension-less, relative) and a 4x4 ``transform_matrix``
camera-to-world pose (camera looks along -z, y up). Images are 8-bit PNG;
an alpha channel, when present, is kept as per-pixel opacity. Ground-truth
normal maps (``<file_path>_normal.png``, channels mapping n*0.5+0.5) are
loaded when they exist.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .render import Camera

log = logging.getLogger(__name__)


@dataclass
class SceneData:
    cameras: list[Camera]
    images: Tensor  # (V, H, W, 3) sRGB in [0, 1]
    opacity: Tensor | None = None  # (V, H, W) alpha, if images had one
    gt_normals: Tensor | None = None  # (V, H, W, 3) unit or zero rows


def _load_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).astype(np.float32) / 255.0


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def load_scene(root: str, split: str = "train") -> SceneData:
    meta_path = os.path.join(root, f"transforms_{split}.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"missing split description {meta_path}")
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"malformed JSON in {meta_path}: {exc}") from None
    if "camera_angle_x" not in meta:
        raise ValueError(f"{meta_path} lacks camera_angle_x")
    if "frames" not in meta or not meta["frames"]:
        raise ValueError(f"{meta_path} lists no frames")
    angle_x = float(meta["camera_angle_x"])

    cameras: list[Camera] = []
    images, opacities, normals = [], [], []
    have_alpha = have_normals = True
    for i, frame in enumerate(meta["frames"]):
        try:
            rel = frame["file_path"]
            mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        except KeyError as exc:
            raise ValueError(f"frame {i} in {meta_path} lacks {exc}") from None
        if mat.shape != (4, 4):
            raise ValueError(
                f"frame {i} in {meta_path}: pose must be 4x4, got {mat.shape}"
            )
        rot = mat[:3, :3]
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > 1e-4:
            if err > 1e-2:
                raise ValueError(
                    f"frame {i} in {meta_path}: rotation is not orthonormal "
                    f"(max deviation {err:.2e})"
                )
            log.warning(
                "frame %d: re-orthonormalizing slightly skewed rotation (%.2e)", i, err
            )
            mat = mat.copy()
            mat[:3, :3] = _orthonormalize(rot)

        img_path = os.path.join(root, rel + ".png")
        if not os.path.isfile(img_path):
            raise FileNotFoundError(f"frame {i}: missing image {img_path}")
        px = _load_png(img_path)
        if px.ndim != 3 or px.shape[-1] not in (3, 4):
            raise ValueError(f"{img_path}: expected RGB or RGBA pixels")
        if px.shape[-1] == 4:
            opacities.append(torch.from_numpy(px[..., 3].copy()))
        else:
            have_alpha = False
        images.append(torch.from_numpy(px[..., :3].copy()))

        nrm_path = os.path.join(root, rel + "_normal.png")
        if os.path.isfile(nrm_path):
            nv = _load_png(nrm_path)[..., :3] * 2.0 - 1.0
            ln = np.linalg.norm(nv, axis=-1, keepdims=True)
            nv = np.where(ln > 0.5, nv / np.maximum(ln, 1e-12), 0.0)
            normals.append(torch.from_numpy(nv.astype(np.float32)))
        else:
            have_normals = False

        h, w = px.shape[:2]
        cameras.append(Camera(w, h, angle_x, torch.from_numpy(mat).float()))

    shapes = {tuple(im.shape) for im in images}
    if len(shapes) > 1:
        raise ValueError(f"frames have mismatched image sizes: {sorted(shapes)}")
    return SceneData(
        cameras=cameras,
        images=torch.stack(images),
        opacity=torch.stack(opacities) if have_alpha and opacities else None,
        gt_normals=torch.stack(normals) if have_normals and normals else None,
    )
