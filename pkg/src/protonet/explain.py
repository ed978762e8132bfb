"""Interpretability outputs: per-input explanations, the weight-matrix
report, decoded-prototype exports and reconstruction galleries.

Every number here is recomputed from the network's own forward pass; there
is no surrogate model anywhere.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from protonet import model as M
from protonet.loss import reconstruction_loss
from protonet.tensor import ShapeError, Tensor


@dataclass
class Explanation:
    """One input's full reasoning trace plus the decoded prototype images."""
    input_image: np.ndarray  # [H, W, C]
    distances: np.ndarray  # [m], squared latent distances
    logits: np.ndarray  # [K]
    probabilities: np.ndarray  # [K]
    predicted_class: int
    prototype_images: np.ndarray  # [m, H, W, C]
    per_prototype_weight_row: np.ndarray  # W[predicted_class, :], length m

    def to_json(self, prototype_files=None) -> str:
        return json.dumps({
            "distances": list(self.distances),
            "logits": list(self.logits),
            "probabilities": list(self.probabilities),
            "predicted": self.predicted_class,
            "prototype_files": prototype_files or [],
        }, indent=2)


def explain_input(params, cfg, image) -> Explanation:
    """Forward a single image and package distances, logits, probabilities
    and decoded prototypes."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape != cfg.input_shape:
        raise ShapeError(f"image shape {image.shape} vs model input {cfg.input_shape}")
    trace = M.forward(params, cfg, image[None])
    probs = trace.probabilities.numpy()[0]
    pred = int(np.argmax(probs))
    return Explanation(
        input_image=image,
        distances=trace.distances.numpy()[0].copy(),
        logits=trace.logits.numpy()[0].copy(),
        probabilities=probs.copy(),
        predicted_class=pred,
        prototype_images=M.decode_prototypes(params, cfg),
        per_prototype_weight_row=params.classifier.data[pred].copy(),
    )


@dataclass
class WeightReport:
    """Transposed classifier weights with each prototype's most negative class."""
    matrix: np.ndarray  # W^T, [m, K], full precision
    most_negative_class: np.ndarray  # [m] argmin per prototype row
    fixed_negative_identity: bool = False

    def rounded(self) -> np.ndarray:
        # presentation only; `matrix` keeps full precision
        return np.round(self.matrix, 2)

    def to_csv(self) -> str:
        m, k = self.matrix.shape
        lines = ["prototype," + ",".join(f"class{j}" for j in range(k)) + ",most_negative"]
        disp = self.rounded()
        for i in range(m):
            lines.append(f"{i}," + ",".join(f"{disp[i, j]:.2f}" for j in range(k))
                         + f",{self.most_negative_class[i]}")
        return "\n".join(lines) + "\n"


def weight_report(params, cfg) -> WeightReport:
    wt = params.classifier.data.T.copy()
    return WeightReport(matrix=wt,
                        most_negative_class=np.argmin(wt, axis=1),
                        fixed_negative_identity=cfg.w_mode == "negative_identity")


def _quantize(images: np.ndarray) -> np.ndarray:
    if images.min() < 0.0 or images.max() > 1.0:
        raise ValueError(
            f"pixel values outside [0,1] (min {images.min():.4g}, max {images.max():.4g}); "
            "upstream bug")
    return np.round(images * 255.0).astype(np.uint8)


def _write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def export_images(tensor: np.ndarray, out_dir, fmt: str = "png"):
    """Write [n, H, W, C] values in [0,1] as 8-bit PGM or PNG files."""
    if fmt not in ("png", "pgm"):
        raise ValueError(f"unknown format {fmt!r}")
    arr = _quantize(np.asarray(tensor))
    if fmt == "pgm" and arr.shape[3] != 1:
        raise ValueError("PGM supports single-channel images only")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i, img in enumerate(arr):
        path = os.path.join(out_dir, f"{i:03d}.{fmt}")
        if fmt == "pgm":
            _write_pgm(path, img[:, :, 0])
        else:
            Image.fromarray(img[:, :, 0] if img.shape[2] == 1 else img).save(path)
        paths.append(path)
    return paths


def reconstruction_gallery(params, cfg, dataset, k: int, seed: int,
                           out_dir, fmt: str = "png"):
    """Export a 2-row grid (k originals above their reconstructions) plus a
    per-image squared-error CSV sidecar. Returns (grid_path, csv_path)."""
    if not cfg.autoencoder_enabled:
        raise ValueError("model has no decoder")
    idx = np.random.default_rng(seed).choice(dataset.n, size=k, replace=False)
    originals = dataset.images[idx]
    recon = M.forward(params, cfg, originals).reconstruction.numpy()
    errors = [reconstruction_loss(originals[i:i + 1], Tensor(recon[i:i + 1])).item()
              for i in range(k)]

    h, w, c = cfg.input_shape
    grid = np.zeros((2 * h, k * w, c))
    grid[:h] = np.hstack(list(originals))
    grid[h:] = np.hstack(list(recon))
    os.makedirs(out_dir, exist_ok=True)
    grid_path = os.path.join(out_dir, f"gallery.{fmt}")
    img = _quantize(grid)
    if fmt == "pgm":
        _write_pgm(grid_path, img[:, :, 0])
    else:
        Image.fromarray(img[:, :, 0] if c == 1 else img).save(grid_path)
    csv_path = os.path.join(out_dir, "gallery_errors.csv")
    with open(csv_path, "w") as f:
        f.write("dataset_index,squared_error\n")
        for i, err in zip(idx, errors):
            f.write(f"{i},{err!r}\n")
    return grid_path, csv_path
