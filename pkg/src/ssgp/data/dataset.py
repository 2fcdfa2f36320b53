"""On-disk datasets.

Layout::

    <root>/meta                       flat key = value (task, channels, splits)
    <root>/<split>/<id>.image.ppm
    <root>/<split>/<id>.sparse.pfm
    <root>/<split>/<id>.sparse_mask.pgm
    <root>/<split>/<id>.gt.pfm
    <root>/<split>/<id>.gt_mask.pgm

Images are stored as 8-bit PPM, so they are quantized to multiples of 1/255.
"""
from __future__ import annotations

from pathlib import Path

from .. import config as cfgio
from .formats import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm
from .sample import TASK_CHANNELS, Sample, canonical_task

SUFFIXES = ("image.ppm", "sparse.pfm", "sparse_mask.pgm", "gt.pfm", "gt_mask.pgm")


def write_meta(root, task: str, **extra) -> None:
    task = canonical_task(task)
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    items = {"task": task, "channels": TASK_CHANNELS[task], **extra}
    (root / "meta").write_text(cfgio.format_items(items), encoding="utf-8")


def read_meta(root) -> dict[str, str]:
    path = Path(root) / "meta"
    if not path.exists():
        raise FileNotFoundError(f"{root}: no meta file; not a dataset directory")
    meta = cfgio.read_file(path)
    if "task" not in meta:
        raise cfgio.ConfigError(f"{path}: missing 'task'")
    meta["task"] = canonical_task(meta["task"])
    return meta


def write_sample(root, split: str, sample_id: str, sample: Sample) -> None:
    d = Path(root) / split
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / f"{sample_id}.image.ppm", sample.image)
    write_pfm(d / f"{sample_id}.sparse.pfm", sample.sparse_values)
    write_pgm(d / f"{sample_id}.sparse_mask.pgm", sample.sparse_mask)
    write_pfm(d / f"{sample_id}.gt.pfm", sample.gt_values)
    write_pgm(d / f"{sample_id}.gt_mask.pgm", sample.gt_mask)


def read_sample(root, split: str, sample_id: str, task: str) -> Sample:
    d = Path(root) / split
    c = TASK_CHANNELS[task]
    return Sample(read_ppm(d / f"{sample_id}.image.ppm"),
                  read_pfm(d / f"{sample_id}.sparse.pfm", c),
                  read_pgm(d / f"{sample_id}.sparse_mask.pgm"),
                  read_pfm(d / f"{sample_id}.gt.pfm", c),
                  read_pgm(d / f"{sample_id}.gt_mask.pgm"),
                  task)


class Dataset:
    """Sorted, indexable view of one split of a dataset directory."""

    def __init__(self, root, split: str = "train"):
        self.root = Path(root)
        self.split = split
        self.task = read_meta(root)["task"]
        d = self.root / split
        if not d.is_dir():
            raise FileNotFoundError(f"{d}: split directory missing")
        self.ids = sorted(p.name[:-len(".image.ppm")] for p in d.glob("*.image.ppm"))

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> Sample:
        return read_sample(self.root, self.split, self.ids[i], self.task)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]
