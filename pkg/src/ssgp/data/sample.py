from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

TASKS = ("depth", "optical_flow", "scene_flow")
TASK_CHANNELS = {"depth": 1, "optical_flow": 2, "scene_flow": 4}
_ALIASES = {"flow": "optical_flow", "of": "optical_flow", "sf": "scene_flow",
            "sceneflow": "scene_flow", "opticalflow": "optical_flow"}


def canonical_task(name: str) -> str:
    task = _ALIASES.get(name.lower(), name.lower())
    if task not in TASKS:
        raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")
    return task


@dataclass
class Sample:
    """One training/evaluation example; all arrays ``[C, H, W]`` float32."""

    image: np.ndarray
    sparse_values: np.ndarray
    sparse_mask: np.ndarray
    gt_values: np.ndarray
    gt_mask: np.ndarray
    task: str

    def __post_init__(self):
        c = TASK_CHANNELS[self.task]
        h, w = self.image.shape[1:]
        for name, arr, ch in (("image", self.image, 3), ("sparse_values", self.sparse_values, c),
                              ("sparse_mask", self.sparse_mask, 1), ("gt_values", self.gt_values, c),
                              ("gt_mask", self.gt_mask, 1)):
            if arr.shape != (ch, h, w):
                raise ValueError(f"{name} has shape {arr.shape}, expected {(ch, h, w)}")

    @property
    def channels(self) -> int:
        return TASK_CHANNELS[self.task]

    def with_sparse(self, values: np.ndarray, mask: np.ndarray) -> "Sample":
        return replace(self, sparse_values=values, sparse_mask=mask)
