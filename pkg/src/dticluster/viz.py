"""Static figures: prototype grids, alignment strips, cluster montages and
run-level plots. Image values are clamped to [0, 1] here and nowhere else."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .clustering import align, squared_distances

PAD = 2
PAD_VALUE = 255
MARK_COLOR = (220, 30, 30)


def viz_path(run_dir, kind: str, index: int = 0) -> Path:
    path = Path(run_dir) / "viz" / f"{kind}_{index}.png"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) float image -> (H, W, 3) uint8, clamped to [0, 1]."""
    x = img.detach().float().clamp(0, 1)
    if x.shape[0] == 1:
        x = x.expand(3, -1, -1)
    return (x.permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)


def grid_shape(K: int) -> tuple[int, int]:
    """Rows and columns of a prototype grid (10 -> 2 x 5)."""
    ncols = min(K, math.ceil(math.sqrt(2.5 * K)))
    return math.ceil(K / ncols), ncols


def tile(images, nrows: int, ncols: int, pad: int = PAD) -> np.ndarray:
    """Row-major tiling of (H, W, 3) uint8 images with ``pad`` pixels between tiles."""
    H, W = images[0].shape[:2]
    canvas = np.full((nrows * H + (nrows - 1) * pad, ncols * W + (ncols - 1) * pad, 3), PAD_VALUE, np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, ncols)
        canvas[r * (H + pad):r * (H + pad) + H, c * (W + pad):c * (W + pad) + W] = im
    return canvas


def save_png(array: np.ndarray, path):
    Image.fromarray(array).save(path)
    return Path(path)


def prototype_grid(centers: torch.Tensor, path, ncols: int | None = None):
    """Tile the K prototypes row-major into one PNG."""
    K = centers.shape[0]
    nrows, cols = grid_shape(K) if ncols is None else (math.ceil(K / ncols), ncols)
    return save_png(tile([to_uint8(c) for c in centers], nrows, cols), path)


def frame(img: np.ndarray, width: int, color) -> np.ndarray:
    H, W = img.shape[:2]
    out = np.empty((H + 2 * width, W + 2 * width, 3), np.uint8)
    out[:] = color
    out[width:width + H, width:width + W] = img
    return out


@torch.no_grad()
def alignment_strip(sample: torch.Tensor, centers: torch.Tensor, steps, predicted, path, border: int = PAD,
                    weights=None, pad: str = "border"):
    """One row ``[sample | T_1(c_1) | ... | T_K(c_K)]`` with the closest aligned
    prototype framed in red. ``predicted`` holds per-step (1, K, P) parameters.
    Returns the marked cluster index."""
    x = sample.unsqueeze(0)
    aligned = align(centers, steps, predicted, pad)[0]
    best = int(torch.argmin(squared_distances(x, aligned.unsqueeze(0), weights)[0]))
    tiles = [frame(to_uint8(sample), border, (PAD_VALUE,) * 3)]
    for k, c in enumerate(aligned):
        tiles.append(frame(to_uint8(c), border, MARK_COLOR if k == best else (PAD_VALUE,) * 3))
    save_png(np.concatenate(tiles, axis=1), path)
    return best


def cluster_members(assignments, k: int, n: int | None = None) -> np.ndarray:
    idx = np.flatnonzero(np.asarray(assignments) == k)
    return idx if n is None else idx[:n]


@torch.no_grad()
def cluster_montage(images, assignments, centers, k: int, n: int, path, aligned_fn=None, dpi: int = 100):
    """Prototype ``k`` on top; below, up to ``n`` member images (first row) and
    the prototype aligned to each of them (second row).

    ``aligned_fn(indices)`` returns the aligned prototype k for those samples
    as (n, C, H, W); without it the raw prototype is repeated.
    Returns the member indices shown."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    members = cluster_members(assignments, k, n)
    cols = max(len(members), 1)
    fig, axes = plt.subplots(3, cols, figsize=(1.1 * cols + 0.4, 3.6), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    axes[0, 0].imshow(to_uint8(centers[k]), interpolation="nearest")
    if len(members) == 0:
        fig.suptitle(f"cluster {k}: empty cluster (prototype only)", fontsize=9)
    else:
        total = int(np.sum(np.asarray(assignments) == k))
        fig.suptitle(f"cluster {k}: {total} members, showing {len(members)}", fontsize=9)
        aligned = aligned_fn(members) if aligned_fn else centers[k].expand(len(members), -1, -1, -1)
        for j, i in enumerate(members):
            axes[1, j].imshow(to_uint8(images[int(i)]), interpolation="nearest")
            axes[2, j].imshow(to_uint8(aligned[j]), interpolation="nearest")
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return members


def plot_elbow(table, path, title="final loss vs K"):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    Ks = [row["K"] for row in table]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(Ks, [row["loss"] for row in table], "o-")
    for row in table:
        ax.scatter([row["K"]] * len(row["losses"]), row["losses"], s=8, c="grey", alpha=0.6)
    ax.set_xlabel("K")
    ax.set_ylabel("final loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_loss_vs_accuracy(runs, path):
    """Scatter of final loss against accuracy over runs, minLoss run highlighted."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in runs if r.status == "ok" and r.acc is not None]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if ok:
        ax.scatter([r.final_loss for r in ok], [100 * r.acc for r in ok], c="tab:blue")
        best = min(ok, key=lambda r: r.final_loss)
        ax.scatter([best.final_loss], [100 * best.acc], c="tab:red", label="minLoss")
        ax.legend()
    ax.set_xlabel("final loss")
    ax.set_ylabel("ACC (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)
