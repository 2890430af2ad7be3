import math

import numpy as np
import pytest
import torch

from dticluster import transforms as T
from dticluster.transforms import (
    DegenerateTransformError, color_apply, compose_apply, covariance_apply, identity_points,
    make_grid, make_step, morpho_apply, parse_steps, rotation90_params, sample,
)


def bilinear_oracle(img, gx, gy, pad):
    """Scalar per-pixel bilinear interpolation at normalized (gx, gy)."""
    C, H, W = img.shape
    u = ((gx + 1) * W - 1) / 2
    v = ((gy + 1) * H - 1) / 2
    if pad == "border":
        u = min(max(u, 0.0), W - 1.0)
        v = min(max(v, 0.0), H - 1.0)
    u0, v0 = math.floor(u), math.floor(v)
    out = np.zeros(C)
    for dv in (0, 1):
        for du in (0, 1):
            uu, vv = u0 + du, v0 + dv
            w = (1 - abs(u - uu)) * (1 - abs(v - vv))
            if 0 <= uu < W and 0 <= vv < H:
                out += w * img[:, vv, uu]
    return out


def dilate_oracle(x, size=7):
    H, W = x.shape
    r = size // 2
    out = np.empty_like(x)
    for i in range(H):
        for j in range(W):
            vals = [x[min(max(i + di, 0), H - 1), min(max(j + dj, 0), W - 1)]
                    for di in range(-r, r + 1) for dj in range(-r, r + 1)]
            out[i, j] = max(vals)
    return out


def erode_oracle(x):
    return 1 - dilate_oracle(1 - x)


def test_param_counts():
    counts = {k: make_step(k).param_count for k in T.KINDS}
    assert counts == {"identity": 0, "affine": 6, "projective": 8, "tps": 32, "color": 2, "morpho": 50}
    assert make_step("color", channels=3).param_count == 6
    assert [s.applies_to_covariance for s in parse_steps("col-aff-morpho-proj-tps")] == \
        [False, True, False, True, True]


def test_parse_steps_recipes():
    assert [s.kind for s in parse_steps("aff-morpho-tps")] == ["affine", "morpho", "tps"]
    assert parse_steps("") == [] and parse_steps(None) == []
    with pytest.raises(ValueError):
        parse_steps("aff-warp")


def test_identity_grid_pixel_centers():
    g = make_grid("affine", torch.zeros(6, dtype=torch.float64), 28, 28)
    j = torch.arange(28, dtype=torch.float64)
    assert torch.allclose(g[0, :, 0], (2 * j + 1) / 28 - 1, atol=0)
    assert torch.allclose(g[:, 0, 1], (2 * j + 1) / 28 - 1, atol=0)


def test_affine_translation_shifts_x():
    p = torch.tensor([0, 0, 0.5, 0, 0, 0], dtype=torch.float64)
    g = make_grid("affine", p, 2, 2)
    ident = identity_points(2, 2, torch.float64)
    assert torch.allclose(g[..., 0], ident[..., 0] + 0.5)
    assert torch.allclose(g[..., 1], ident[..., 1])


def test_tps_linear_system_by_brute_force():
    ctrl = T.tps_control_points()
    n = len(ctrl)
    # assemble the system independently and solve it for random displacements
    K = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            r2 = np.sum((ctrl[a] - ctrl[b]) ** 2)
            K[a, b] = 0.0 if r2 == 0 else r2 * np.log(r2)
    P = np.hstack([np.ones((n, 1)), ctrl])
    L = np.block([[K, P], [P.T, np.zeros((3, 3))]])
    rng = np.random.default_rng(0)
    disp = rng.normal(scale=0.1, size=(n, 2))
    rhs = np.vstack([ctrl + disp, np.zeros((3, 2))])
    coef = np.linalg.solve(L, rhs)
    assert np.abs(L @ coef - rhs).max() < 1e-10
    # the map evaluated at the control points reproduces the displaced targets
    pts = torch.from_numpy(ctrl)[None]
    mapped = T.warp_points("tps", torch.from_numpy(disp).reshape(1, -1), pts)[0].numpy()
    assert np.abs(mapped - (ctrl + disp)).max() < 1e-10
    # and agrees with the brute-force solution on arbitrary points
    q = rng.uniform(-1, 1, size=(20, 2))
    r2 = ((q[:, None] - ctrl[None]) ** 2).sum(-1)
    U = np.where(r2 > 0, r2 * np.log(np.where(r2 > 0, r2, 1)), 0)
    brute = U @ coef[:n] + np.hstack([np.ones((20, 1)), q]) @ coef[n:]
    ours = T.warp_points("tps", torch.from_numpy(disp).reshape(1, -1), torch.from_numpy(q)[None])[0]
    assert np.abs(ours.numpy() - brute).max() < 1e-10


def test_tps_zero_is_identity():
    g = make_grid("tps", torch.zeros(32), 28, 28)
    assert (g - identity_points(28, 28)).abs().max() <= 1e-6


def test_wrong_param_length_raises():
    with pytest.raises(ValueError):
        make_grid("affine", torch.zeros(5), 8, 8)
    with pytest.raises(ValueError):
        make_grid("tps", torch.zeros(16), 8, 8)


def test_singular_projective_raises():
    p = torch.tensor([-1.0, 0, 0, 0, 0, 0, 0, 0])  # first row zeroed
    with pytest.raises(DegenerateTransformError):
        make_grid("projective", p, 8, 8)


def test_sample_identity_and_midpoint():
    x = torch.rand(3, 7, 5, dtype=torch.float64)
    out = sample(x, identity_points(7, 5, torch.float64))
    assert torch.allclose(out, x, atol=1e-12)
    img = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]])
    grid = torch.zeros(1, 1, 2)  # halfway between the two columns
    assert sample(img, grid).item() == pytest.approx(0.5)


@pytest.mark.parametrize("pad", ["border", "zeros"])
def test_sample_matches_loop_oracle(pad):
    g = torch.Generator().manual_seed(3)
    img = torch.rand(2, 5, 5, generator=g, dtype=torch.float64)
    grid = torch.rand(5, 5, 2, generator=g, dtype=torch.float64) * 2.4 - 1.2
    out = sample(img, grid, pad)
    for i in range(5):
        for j in range(5):
            ref = bilinear_oracle(img.numpy(), grid[i, j, 0].item(), grid[i, j, 1].item(), pad)
            assert np.allclose(out[:, i, j].numpy(), ref, atol=1e-6)


def test_color_apply():
    x = torch.rand(1, 6, 6, dtype=torch.float64)
    assert torch.equal(color_apply(x, torch.zeros(2, dtype=torch.float64)), x)
    const = color_apply(x, torch.tensor([-1.0, 0.3], dtype=torch.float64))
    assert torch.allclose(const, torch.full_like(x, 0.3))
    rgb = torch.rand(3, 4, 4, dtype=torch.float64)
    p = torch.randn(6, dtype=torch.float64)
    out = color_apply(rgb, p)
    for c in range(3):
        for i in range(4):
            for j in range(4):
                ref = (1 + p[2 * c].item()) * rgb[c, i, j].item() + p[2 * c + 1].item()
                assert abs(out[c, i, j].item() - ref) < 1e-7


def one_hot_center_logits(value=30.0):
    logits = torch.full((49,), -value, dtype=torch.float64)
    logits[24] = value
    return logits


def test_morpho_center_kernel_is_identity():
    x = torch.rand(1, 9, 9, dtype=torch.float64)
    p = torch.cat([torch.zeros(1, dtype=torch.float64), one_hot_center_logits(40.0)])
    assert torch.allclose(morpho_apply(x, p), x, atol=1e-12)
    # default identity parameters of the step are within the stated tolerance
    step = make_step("morpho")
    assert (morpho_apply(x, step.identity(torch.float64)) - x).abs().max() <= 1e-4


@pytest.mark.parametrize("alpha,oracle", [(50.0, dilate_oracle), (-50.0, erode_oracle)])
def test_morpho_limits(alpha, oracle):
    rng = np.random.default_rng(1)
    x = (rng.random((12, 12)) > 0.7).astype(np.float64)
    p = torch.cat([torch.tensor([alpha], dtype=torch.float64), torch.full((49,), 30.0, dtype=torch.float64)])
    out = morpho_apply(torch.from_numpy(x)[None], p)[0].numpy()
    assert np.abs(out - oracle(x)).max() <= 1e-3


def test_morpho_multichannel_is_channelwise():
    x = torch.rand(3, 8, 8, dtype=torch.float64)
    p = torch.randn(50, dtype=torch.float64)
    out = morpho_apply(x, p)
    for c in range(3):
        assert torch.allclose(out[c:c + 1], morpho_apply(x[c:c + 1], p))


def test_compose_identity():
    x = torch.rand(1, 12, 12, dtype=torch.float64)
    steps = parse_steps("aff-tps")
    assert torch.allclose(compose_apply(x, steps, [s.identity(torch.float64) for s in steps]), x, atol=1e-12)
    steps = parse_steps("col-aff-morpho-proj-tps")
    out = compose_apply(x, steps, [s.identity(torch.float64) for s in steps])
    assert (out - x).abs().max() <= 1e-4


def test_compose_translations_add():
    x = torch.rand(1, 16, 16, dtype=torch.float64)
    t1 = torch.tensor([0, 0, 0.13, 0, 0, -0.07], dtype=torch.float64)
    t2 = torch.tensor([0, 0, -0.21, 0, 0, 0.3], dtype=torch.float64)
    steps = parse_steps("aff-aff")
    two = compose_apply(x, steps, [t1, t2])
    one = sample(x, make_grid("affine", t1 + t2, 16, 16))
    assert (two - one)[:, 3:-3, 3:-3].abs().max() <= 1e-5


def test_compose_order_first_step_first():
    # a sampling-map shift applied then a color step must equal color applied after warping
    x = torch.rand(1, 10, 10, dtype=torch.float64)
    steps = parse_steps("aff-col")
    pa = torch.tensor([0.1, 0, 0.2, 0, -0.1, 0], dtype=torch.float64)
    pc = torch.tensor([0.5, -0.2], dtype=torch.float64)
    expected = color_apply(sample(x, make_grid("affine", pa, 10, 10)), pc)
    assert torch.allclose(compose_apply(x, steps, [pa, pc]), expected)


def test_covariance_skips_color_and_morpho():
    var = torch.rand(3, 8, 8, dtype=torch.float64)
    steps = [make_step("color", 3)]
    assert torch.equal(covariance_apply(var, steps, [torch.randn(6, dtype=torch.float64)]), var)
    steps = parse_steps("aff")
    assert torch.allclose(covariance_apply(var, steps, [steps[0].identity(torch.float64)]), var, atol=1e-12)


@pytest.mark.parametrize("turns", [0, 1, 2, 3])
def test_rotation_is_pixel_permutation(turns):
    x = torch.rand(2, 9, 9, dtype=torch.float64)
    out = covariance_apply(x, parse_steps("aff"), [rotation90_params(turns)])
    # sampling at (x, y) -> (-y, x) gives out[i, j] = in[j, W-1-i], i.e. rot90
    assert torch.allclose(out, torch.rot90(x, k=turns, dims=(1, 2)), atol=1e-12)


def test_covariance_non_negative():
    g = torch.Generator().manual_seed(0)
    var = torch.rand(4, 1, 10, 10, generator=g)
    steps = parse_steps("aff-morpho-tps")
    params = [torch.randn(4, s.param_count, generator=g) * 0.3 for s in steps]
    assert (covariance_apply(var, steps, params) >= 0).all()


def smooth_random_image(g, size=8):
    # random low-frequency field: bilinear kinks stay small under eps=1e-3 moves
    t = torch.linspace(0, 1, size, dtype=torch.float64)
    yy, xx = torch.meshgrid(t, t, indexing="ij")
    img = torch.zeros(size, size, dtype=torch.float64)
    for _ in range(4):
        fx, fy, ph = (torch.rand(3, generator=g, dtype=torch.float64) * torch.tensor([0.6, 0.6, 6.28])).tolist()
        img += torch.cos(2 * math.pi * (fx * xx + fy * yy) + ph)
    return (img / 8 + 0.5)[None]


def finite_difference_check(fn, params, eps=1e-3):
    params = params.clone().requires_grad_(True)
    fn(params).backward()
    analytic = params.grad.clone()
    numeric = torch.zeros_like(params)
    with torch.no_grad():
        for i in range(params.numel()):
            d = torch.zeros_like(params)
            d.view(-1)[i] = eps
            numeric.view(-1)[i] = (fn(params + d) - fn(params - d)) / (2 * eps)
    rel = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    return rel.item()


def cell_indices(kind, params, H=8, W=8):
    grid = make_grid(kind, params, H, W)
    u = ((grid[..., 0] + 1) * W - 1) / 2
    v = ((grid[..., 1] + 1) * H - 1) / 2
    return torch.floor(u), torch.floor(v), u, v


def is_kink_free(kind, params, eps):
    """True if no +/-eps move of any parameter carries a sample point across a
    pixel-center line or out of the interpolation range."""
    fu, fv, u, v = cell_indices(kind, params)
    if u.min() <= 0 or v.min() <= 0 or u.max() >= 7 or v.max() >= 7:
        return False
    for i in range(params.numel()):
        for sgn in (-1, 1):
            d = torch.zeros_like(params)
            d[i] = sgn * eps
            gu, gv, _, _ = cell_indices(kind, params + d)
            if not (torch.equal(gu, fu) and torch.equal(gv, fv)):
                return False
    return True


def spatial_probe(kind, g, eps):
    step = make_step(kind)
    base = step.identity(torch.float64)
    # around a 0.75 contraction so sample points stay clear of the border clamp
    if kind == "tps":
        base = -0.25 * torch.from_numpy(T.tps_control_points()).reshape(-1)
    else:
        base[[0, 4]] = -0.25
    for _ in range(200):
        params = base + 0.05 * torch.randn(step.param_count, generator=g, dtype=torch.float64)
        if is_kink_free(kind, params, eps):
            return params
    raise RuntimeError("no kink-free probe found")


@pytest.mark.parametrize("kind", ["affine", "projective", "tps", "color", "morpho"])
def test_gradients_match_finite_differences(kind):
    g = torch.Generator().manual_seed(7)
    step = make_step(kind)
    x = smooth_random_image(g) if step.is_spatial else torch.rand(1, 8, 8, generator=g, dtype=torch.float64)
    target = torch.rand(1, 8, 8, generator=g, dtype=torch.float64)
    if step.is_spatial:
        params = spatial_probe(kind, g, 1e-3)
    elif kind == "morpho":
        params = torch.cat([torch.tensor([3.0]), torch.randn(49, generator=g)]).double()
    else:
        params = 0.1 * torch.randn(step.param_count, generator=g, dtype=torch.float64)

    def loss(p):
        return ((compose_apply(x, [step], [p]) - target) ** 2).sum()

    assert finite_difference_check(loss, params) <= 1e-2
