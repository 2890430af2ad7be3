import numpy as np
import torch
from PIL import Image

from dticluster import viz
from dticluster.clustering import squared_distances
from dticluster.evaluation import RunRecord
from dticluster.transforms import parse_steps


def read(path):
    return np.asarray(Image.open(path).convert("RGB"))


def test_grid_shapes():
    assert viz.grid_shape(1) == (1, 1)
    assert viz.grid_shape(10) == (2, 5)
    assert viz.grid_shape(20) == (3, 8)


def test_prototype_grid_single_tile(tmp_path):
    c = torch.rand(1, 1, 6, 7)
    out = read(viz.prototype_grid(c, tmp_path / "g.png"))
    assert out.shape == (6, 7, 3)


def test_prototype_grid_pixels_equal_clamped_prototypes(tmp_path):
    torch.manual_seed(0)
    c = torch.randn(10, 3, 5, 5) * 0.7 + 0.5  # values outside [0, 1] get clamped
    out = read(viz.prototype_grid(c, tmp_path / "g.png"))
    H = W = 5
    assert out.shape == (2 * H + viz.PAD, 5 * W + 4 * viz.PAD, 3)
    for k in range(10):
        r, col = divmod(k, 5)
        tile_ = out[r * (H + viz.PAD):r * (H + viz.PAD) + H, col * (W + viz.PAD):col * (W + viz.PAD) + W]
        direct = (c[k].clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)
        np.testing.assert_array_equal(tile_, direct)


def identity_params(steps, K):
    return [s.identity().expand(1, K, -1) for s in steps]


def test_alignment_strip_identity_layout_and_mark(tmp_path):
    torch.manual_seed(1)
    K, H, W, b = 4, 6, 6, viz.PAD
    centers = torch.rand(K, 1, H, W)
    sample = centers[2] + 0.01 * torch.rand(1, H, W)
    steps = parse_steps("aff-tps", 1)
    best = viz.alignment_strip(sample, centers, steps, identity_params(steps, K), tmp_path / "s.png")
    out = read(tmp_path / "s.png")
    assert out.shape == (H + 2 * b, (K + 1) * (W + 2 * b), 3)
    dist = squared_distances(sample[None], centers[None])[0]
    assert best == int(torch.argmin(dist)) == 2
    # identity predictors: the strip shows the raw prototypes
    for k in range(K):
        x0 = (k + 1) * (W + 2 * b) + b
        np.testing.assert_array_equal(out[b:b + H, x0:x0 + W, 0],
                                      (centers[k, 0].clamp(0, 1).numpy() * 255).round().astype(np.uint8))
    # marked frame is red, others are white
    x_best = (best + 1) * (W + 2 * b)
    assert tuple(out[0, x_best]) == viz.MARK_COLOR
    assert tuple(out[0, (K if best != K - 1 else 1) * (W + 2 * b)]) == (255, 255, 255)


def test_cluster_members_and_montage(tmp_path):
    images = torch.rand(12, 1, 5, 5)
    centers = torch.rand(3, 1, 5, 5)
    assign = np.array([0, 1, 1, 0, 2, 1, 1, 0, 1, 1, 0, 1])
    shown = viz.cluster_montage(images, assign, centers, 1, 4, tmp_path / "m.png")
    assert shown.tolist() == [1, 2, 5, 6]
    assert np.all(assign[shown] == 1)
    everything = viz.cluster_montage(images, assign, centers, 0, 50, tmp_path / "m2.png")
    assert everything.tolist() == [0, 3, 7, 10]
    empty = viz.cluster_montage(images, np.zeros(12, int), centers, 2, 4, tmp_path / "m3.png")
    assert len(empty) == 0 and (tmp_path / "m3.png").exists()


def test_montage_deterministic(tmp_path):
    images = torch.rand(6, 1, 5, 5, generator=torch.Generator().manual_seed(0))
    assign = np.array([0, 0, 1, 0, 1, 1])
    viz.cluster_montage(images, assign, images[:2], 0, 3, tmp_path / "a.png")
    viz.cluster_montage(images, assign, images[:2], 0, 3, tmp_path / "b.png")
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_run_plots(tmp_path):
    table = [{"K": 2, "loss": 3.0, "losses": [3.0, 3.1]}, {"K": 4, "loss": 2.0, "losses": [2.0, 1.9]}]
    assert viz.plot_elbow(table, tmp_path / "e.png").stat().st_size > 0
    runs = [RunRecord(0, 1.0, acc=0.5), RunRecord(1, 0.8, acc=0.7)]
    assert viz.plot_loss_vs_accuracy(runs, tmp_path / "s.png").stat().st_size > 0


def test_viz_path_layout(tmp_path):
    p = viz.viz_path(tmp_path, "prototypes", 0)
    assert p == tmp_path / "viz" / "prototypes_0.png" and p.parent.is_dir()
