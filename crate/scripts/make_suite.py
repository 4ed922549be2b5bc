"""Builds the 128x128 grayscale image suite used by the integration tests.

Sources are the sample images bundled with scikit-image. Each image is
center-cropped to a square, converted to gray, and resized with
anti-aliasing.
"""
import os
import sys

import numpy as np
from skimage import color, data, io, transform, util

NAMES = [
    "astronaut", "brick", "camera", "cell", "chelsea", "clock", "coffee",
    "coins", "grass", "gravel", "hubble_deep_field", "immunohistochemistry",
    "moon", "page", "retina", "rocket", "text", "microaneurysms",
    "motorcycle_left", "horse",
]


def load(name):
    if name == "motorcycle_left":
        return io.imread(os.path.join(os.path.dirname(data.__file__), "motorcycle_left.png"))
    return getattr(data, name)()


def main(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for i, name in enumerate(NAMES):
        img = load(name)
        if img.ndim == 3:
            img = color.rgb2gray(img[..., :3])
        img = util.img_as_float(img).astype(np.float64)
        h, w = img.shape
        side = min(h, w)
        top, left = (h - side) // 2, (w - side) // 2
        img = img[top:top + side, left:left + side]
        img = transform.resize(img, (128, 128), anti_aliasing=True)
        img = np.clip(img, 0.0, 1.0)
        io.imsave(os.path.join(out_dir, f"{i:02d}_{name}.png"),
                  np.round(img * 255).astype(np.uint8), check_contrast=False)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/data/suite")
