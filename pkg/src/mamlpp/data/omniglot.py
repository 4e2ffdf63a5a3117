"""Omniglot ingestion.

Expects ``<root>/<alphabet>/<character>/<image>`` and also accepts the
usual two-archive layout, ``<root>/images_background/...`` plus
``<root>/images_evaluation/...``, merged into one pool.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError
from .pool import OMNIGLOT_CLASSES, ClassPool

IMAGE_SUFFIXES = {".png", ".bmp", ".gif", ".tif", ".tiff"}
ARCHIVES = ("images_background", "images_evaluation")


def _alphabet_roots(root: Path):
    archives = [root / a for a in ARCHIVES if (root / a).is_dir()]
    return archives or [root]


def character_dirs(root):
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"Omniglot root '{root}' does not exist")
    dirs = []
    for base in _alphabet_roots(root):
        for alphabet in sorted(p for p in base.iterdir() if p.is_dir()):
            dirs += sorted(p for p in alphabet.iterdir() if p.is_dir())
    return dirs


def load_image(path, image_size):
    with Image.open(path) as im:
        im = im.convert("L").resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    # strokes are dark on white; flip so ink is 1 and background 0
    return 1.0 - arr


def load_omniglot(root, image_size=28, instances=20, expected_classes=OMNIGLOT_CLASSES) -> ClassPool:
    """Read every character class into a pool of ``[class, 20, size, size]``.

    Raises :class:`DataError` naming the first character directory whose
    image count is not ``instances``, or when the class total is not
    ``expected_classes`` (pass ``None`` to skip that check).
    """
    dirs = character_dirs(root)
    if expected_classes is not None and len(dirs) != expected_classes:
        raise DataError(f"found {len(dirs)} character classes under '{root}', expected {expected_classes}")
    if not dirs:
        raise DataError(f"no character directories under '{root}'")
    images = np.empty((len(dirs), instances, image_size, image_size), dtype=np.float32)
    names = []
    root = Path(root)
    for c, d in enumerate(dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        name = str(d.relative_to(root))
        if len(files) != instances:
            raise DataError(f"class '{name}' has {len(files)} images, expected {instances}")
        for i, f in enumerate(files):
            images[c, i] = load_image(f, image_size)
        names.append(name)
    return ClassPool(images, "omniglot", names)
