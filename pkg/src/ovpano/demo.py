"""Built-in synthetic scene: three floating spheres inside an open-top courtyard.

The spheres share one countable concept, the courtyard floor and walls form a
single stuff region of a second concept. Colors are exact palette entries of
the mock provider, so every rendered pixel maps to a known concept.
"""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .cloud import PointCloud
from .embed import NEGATIVE_PROMPTS, POSITIVE_PROMPTS, STUFF_PROMPT, THING_PROMPT, MockProvider

THING_CONCEPT = "a red car"
STUFF_CONCEPT = "grass"
BLANK_CONCEPT = NEGATIVE_PROMPTS[2]
SCENE_PROMPT = POSITIVE_PROMPTS[0]

THING_RGB = (200, 30, 30)
STUFF_RGB = (40, 160, 40)
BLANK_RGB = (0, 0, 0)

LABEL_SET = (THING_CONCEPT, STUFF_CONCEPT)
# both concepts carry the scene prompt twice, so their vectors have cosine 4/6;
# a query threshold halfway to 1 separates them
QUERY_THRESHOLD = 0.8
SPHERE_CENTERS = ((-2.5, -2.0, 1.6), (2.5, -1.5, 1.4), (0.0, 2.8, 1.5))


def demo_palette() -> Dict[Tuple[int, int, int], str]:
    return {BLANK_RGB: BLANK_CONCEPT, STUFF_RGB: STUFF_CONCEPT, THING_RGB: THING_CONCEPT}


def demo_traits() -> Dict[str, List[str]]:
    # the scene prompt is listed twice so it dominates the concept blend
    return {
        THING_CONCEPT: [THING_PROMPT, SCENE_PROMPT, SCENE_PROMPT],
        STUFF_CONCEPT: [STUFF_PROMPT, SCENE_PROMPT, SCENE_PROMPT],
    }


def demo_provider(seed: int = 0, dim: int = 256) -> MockProvider:
    return MockProvider(seed, demo_palette(), dim, demo_traits())


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` nearly uniform unit vectors."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def _grid(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ga, gb = np.meshgrid(a, b, indexing="ij")
    return np.stack([ga.ravel(), gb.ravel()], 1)


def make_scene(seed: int = 0, half_size: float = 6.0, wall_height: float = 3.0,
               spacing: float = 0.3, sphere_radius: float = 0.8, sphere_points: int = 260,
               jitter: float = 0.01) -> PointCloud:
    """Courtyard (stuff, class 1) plus three spheres (things, class 0, instances 0..2)."""
    rng = np.random.default_rng(seed)
    ticks = np.arange(-half_size, half_size + 1e-9, spacing)
    heights = np.arange(spacing, wall_height + 1e-9, spacing)
    parts = [np.column_stack([_grid(ticks, ticks), np.zeros(len(ticks) ** 2)])]
    for axis in (0, 1):
        for side in (-half_size, half_size):
            uv = _grid(ticks, heights)
            wall = np.zeros((len(uv), 3))
            wall[:, axis] = side
            wall[:, 1 - axis] = uv[:, 0]
            wall[:, 2] = uv[:, 1]
            parts.append(wall)
    ground = np.concatenate(parts)
    # the corner columns appear on two walls
    ground = np.unique(np.round(ground, 9), axis=0)
    spheres = [np.asarray(c) + sphere_radius * fibonacci_sphere(sphere_points) for c in SPHERE_CENTERS]
    pos = np.concatenate([ground] + spheres)
    pos = pos + rng.normal(scale=jitter, size=pos.shape)
    n_ground = len(ground)
    colors = np.empty((len(pos), 3))
    colors[:n_ground] = np.array(STUFF_RGB) / 255.0
    colors[n_ground:] = np.array(THING_RGB) / 255.0
    sem = np.ones(len(pos), dtype=np.int64)
    sem[n_ground:] = 0
    inst = np.full(len(pos), -1, dtype=np.int64)
    inst[n_ground:] = np.repeat(np.arange(len(spheres)), sphere_points)
    return PointCloud(pos, colors, sem, inst)
