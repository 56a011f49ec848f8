"""Procedural multi-view cube dataset: render, caption, merge.

A scene is a colored cube with one colored glyph (circle / square / triangle /
cross) per side. Each scene is rendered face-on from the four canonical
azimuths and captioned by a fixed grammar; the per-side captions are merged
into one overall caption. Everything is integer-pixel deterministic so tests
can invert the renderer exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .rng import stream

GRAMMAR_VERSION = 1

# Name -> RGB in [0, 1]. Order fixed; ids are list positions.
PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 0.5),
}
PALETTE_NAMES = tuple(PALETTE)

SHAPES = ("circle", "square", "triangle", "cross")
SIDES = ("front", "right", "back", "left")

# Azimuth of the camera that faces each side: the centers of the side
# intervals used when lifting to 3D (front [10,170] -> 90, right (170,190)
# -> 180, back [190,350] -> 270, left elsewhere -> 0).
SIDE_AZIMUTH = {"front": 90, "right": 180, "back": 270, "left": 0}

BACKGROUND = (0.5, 0.5, 0.5)
RESOLUTION = 32
FACE_LO, FACE_HI = 6, 26    # centered 20x20 body square
GLYPH_LO, GLYPH_HI = 12, 20  # centered 8x8 glyph box


@dataclass(frozen=True)
class Glyph:
    side: str
    shape: str
    color: str


@dataclass(frozen=True)
class SceneSpec:
    body_color: str
    glyphs: tuple  # one Glyph per side, in SIDES order

    def __post_init__(self):
        assert self.body_color in PALETTE
        assert tuple(g.side for g in self.glyphs) == SIDES
        for g in self.glyphs:
            assert g.shape in SHAPES and g.color in PALETTE
            assert g.color != self.body_color, "glyph color must differ from body"

    def glyph_for(self, side: str) -> Glyph:
        return self.glyphs[SIDES.index(side)]

    def key(self) -> tuple:
        return (self.body_color,) + tuple((g.shape, g.color) for g in self.glyphs)


@dataclass(frozen=True)
class CameraPose:
    azimuth: float   # degrees in [0, 360)
    elevation: float  # degrees from the horizontal plane
    radius: float
    position: np.ndarray
    unit_position: np.ndarray

    @staticmethod
    def from_spherical(azimuth: float, elevation: float, radius: float) -> "CameraPose":
        """Azimuth 0 along +X, counterclockwise seen from +Z; elevation up from XY."""
        az = np.deg2rad(azimuth)
        el = np.deg2rad(elevation)
        unit = np.array(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)],
            dtype=np.float64,
        )
        return CameraPose(
            azimuth=float(azimuth % 360.0),
            elevation=float(elevation),
            radius=float(radius),
            position=unit * radius,
            unit_position=unit,
        )


def camera_for_view(side: str) -> CameraPose:
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}, expected one of {SIDES}")
    return CameraPose.from_spherical(SIDE_AZIMUTH[side], 0.0, 2.0)


def camera_basis(pose: CameraPose) -> tuple:
    """Right/up/back unit vectors of a camera at `pose` looking at the origin.

    World up is +Z; the camera looks along -back. Falls back to +X as right
    when the view direction is (anti)parallel to world up.
    """
    back = pose.unit_position
    if np.linalg.norm(back) < 1e-12:
        raise ValueError("camera position has zero norm")
    up_world = np.array([0.0, 0.0, 1.0])
    right = np.cross(up_world, back)
    n = np.linalg.norm(right)
    if n < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / n
    up = np.cross(back, right)
    return right, up, back


def camera_to_world(pose: CameraPose) -> np.ndarray:
    """4x4 camera-to-world matrix, rotation columns (right, up, back)."""
    right, up, back = camera_basis(pose)
    m = np.eye(4, dtype=np.float64)
    m[:3, 0] = right
    m[:3, 1] = up
    m[:3, 2] = back
    m[:3, 3] = pose.unit_position
    return m


def glyph_mask(shape: str) -> np.ndarray:
    """Binary 8x8 stencil of a glyph inside its box (row 0 = top)."""
    mask = np.zeros((8, 8), dtype=bool)
    rr, cc = np.mgrid[0:8, 0:8]
    if shape == "square":
        mask[:, :] = True
    elif shape == "circle":
        # filled disc of radius 4 around the box center (4, 4) in
        # pixel-corner coordinates; pixel centers at k + 0.5
        mask = (rr + 0.5 - 4.0) ** 2 + (cc + 0.5 - 4.0) ** 2 <= 16.0
    elif shape == "triangle":
        # apex at the top middle, base spanning the bottom row
        mask = np.abs(cc - 3.5) <= (rr + 1) / 2.0
    elif shape == "cross":
        # plus sign: 2 px vertical and horizontal arms spanning the box
        mask = (rr == 3) | (rr == 4) | (cc == 3) | (cc == 4)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return mask


def rasterize_view(scene: SceneSpec, side: str, resolution: int = RESOLUTION) -> np.ndarray:
    """Deterministic face-on render of one side, HxWx3 float32 in [0, 1]."""
    if side not in SIDES:
        raise ValueError(f"unknown side {side!r}")
    if resolution != RESOLUTION:
        raise ValueError("only the native 32x32 resolution is supported")
    img = np.empty((resolution, resolution, 3), dtype=np.float32)
    img[:, :] = BACKGROUND
    img[FACE_LO:FACE_HI, FACE_LO:FACE_HI] = PALETTE[scene.body_color]
    g = scene.glyph_for(side)
    box = img[GLYPH_LO:GLYPH_HI, GLYPH_LO:GLYPH_HI]
    box[glyph_mask(g.shape)] = PALETTE[g.color]
    return img


def caption_view(scene: SceneSpec, side: str) -> str:
    g = scene.glyph_for(side)
    return f"a {scene.body_color} cube with a {g.color} {g.shape} on this side"


def merge_captions(scene: SceneSpec) -> str:
    parts = [f"a {scene.body_color} cube with"]
    for i, side in enumerate(SIDES):
        g = scene.glyph_for(side)
        joiner = "" if i == 0 else " and"
        parts.append(f"{joiner} a {g.color} {g.shape} on the {side}")
    return "".join([parts[0]] + parts[1:])


def sample_scene(rng: np.random.Generator) -> SceneSpec:
    """Uniform over valid scenes; glyph colors colliding with the body are redrawn."""
    body = PALETTE_NAMES[rng.integers(0, len(PALETTE_NAMES))]
    glyphs = []
    for side in SIDES:
        shape = SHAPES[rng.integers(0, len(SHAPES))]
        color = body
        while color == body:
            color = PALETTE_NAMES[rng.integers(0, len(PALETTE_NAMES))]
        glyphs.append(Glyph(side=side, shape=shape, color=color))
    return SceneSpec(body_color=body, glyphs=tuple(glyphs))


def save_png(path: str, image: np.ndarray) -> None:
    """8-bit RGB PNG from an HxWx3 float array in [0, 1]."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def image_name(scene_id: int, azimuth: int) -> str:
    return f"scene_{scene_id:05d}_az{azimuth:03d}.png"


def build_dataset(n: int, seed: int, out_dir: str) -> dict:
    """Generate n scenes, write images plus manifest.json, return the manifest.

    Regenerable bit-exactly from (n, seed): scene i is a pure function of the
    (seed, "scene", i) stream, so any build order gives identical bytes.
    """
    images_dir = os.path.join(out_dir, "images")
    os.makedirs(images_dir, exist_ok=True)
    scenes = []
    for i in range(n):
        scene = sample_scene(stream(seed, "scene", i))
        views = []
        for side in SIDES:
            az = SIDE_AZIMUTH[side]
            fname = image_name(i, az)
            save_png(os.path.join(images_dir, fname), rasterize_view(scene, side))
            views.append(
                {
                    "side": side,
                    "azimuth": az,
                    "elevation": 0,
                    "file": os.path.join("images", fname),
                    "caption": caption_view(scene, side),
                }
            )
        scenes.append(
            {
                "id": i,
                "body_color": scene.body_color,
                "glyphs": [
                    {"side": g.side, "shape": g.shape, "color": g.color}
                    for g in scene.glyphs
                ],
                "overall_caption": merge_captions(scene),
                "views": views,
            }
        )
    manifest = {
        "version": GRAMMAR_VERSION,
        "seed": seed,
        "palette": list(PALETTE_NAMES),
        "scenes": scenes,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    return manifest


def load_manifest(data_dir: str) -> dict:
    with open(os.path.join(data_dir, "manifest.json"), encoding="utf-8") as fh:
        return json.load(fh)


def scene_from_entry(entry: dict) -> SceneSpec:
    glyphs = tuple(
        Glyph(side=g["side"], shape=g["shape"], color=g["color"]) for g in entry["glyphs"]
    )
    return SceneSpec(body_color=entry["body_color"], glyphs=glyphs)
