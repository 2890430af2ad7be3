"""Differentiable image transformations applied to prototypes.

Spatial steps (affine, projective, thin-plate spline) are expressed as point
maps on normalized coordinates and resampled bilinearly; consecutive spatial
steps are fused into a single sampling grid so that chaining them does not
blur the image twice. Color and morphological steps act on pixel values.

Coordinates live in [-1, 1] with pixel centers at +/-(1 - 1/H), i.e. the
``align_corners=False`` convention of :func:`torch.nn.functional.grid_sample`.
Grids store ``x`` (width axis) first, then ``y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

KINDS = ("identity", "affine", "projective", "tps", "color", "morpho")
SPATIAL_KINDS = ("affine", "projective", "tps")
ALIASES = {
    "id": "identity",
    "identity": "identity",
    "aff": "affine",
    "affine": "affine",
    "proj": "projective",
    "projective": "projective",
    "tps": "tps",
    "col": "color",
    "color": "color",
    "colfull": "color_full",
    "color_full": "color_full",
    "morpho": "morpho",
    "mor": "morpho",
}

TPS_GRID = 4
MORPHO_SIZE = 7
# Logit magnitude used for the identity kernel (one-hot at the window center).
MORPHO_SATURATION = 15.0
EXP_FLOOR = -60.0
DET_EPS = 1e-8


class DegenerateTransformError(ValueError):
    """Raised when a transformation cannot be inverted or evaluated."""


@dataclass(frozen=True)
class TransformStep:
    kind: str
    param_count: int
    identity_params: tuple = field(repr=False)
    applies_to_covariance: bool
    channels: int = 1

    @property
    def is_spatial(self) -> bool:
        return self.kind in SPATIAL_KINDS

    def identity(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor(self.identity_params, dtype=dtype, device=device)

    @property
    def token(self) -> str:
        return {"affine": "aff", "projective": "proj", "color": "col",
                "color_full": "colfull"}.get(self.kind, self.kind)


def morpho_identity_params() -> tuple:
    logits = np.full((MORPHO_SIZE, MORPHO_SIZE), -MORPHO_SATURATION)
    logits[MORPHO_SIZE // 2, MORPHO_SIZE // 2] = MORPHO_SATURATION
    return (0.0,) + tuple(logits.ravel().tolist())


def make_step(kind: str, channels: int = 1) -> TransformStep:
    """Build a step from its name (``aff``, ``morpho``, ``tps``, ...)."""
    try:
        kind = ALIASES[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown transformation kind {kind!r}") from None
    if kind == "identity":
        count = 0
    elif kind == "affine":
        count = 6
    elif kind == "projective":
        count = 8
    elif kind == "tps":
        count = 2 * TPS_GRID * TPS_GRID
    elif kind == "color":
        count = 2 * channels
    elif kind == "color_full":
        count = channels * (channels + 1)
    else:
        count = 1 + MORPHO_SIZE * MORPHO_SIZE
    ident = morpho_identity_params() if kind == "morpho" else (0.0,) * count
    return TransformStep(kind, count, ident, kind in SPATIAL_KINDS, channels)


def parse_steps(recipe, channels: int = 1) -> list[TransformStep]:
    """Parse a recipe such as ``"aff-morpho-tps"`` (or a list of names)."""
    if recipe is None:
        return []
    if isinstance(recipe, str):
        names = [t for t in recipe.replace(",", "-").split("-") if t and t != "none"]
    else:
        names = list(recipe)
    return [make_step(n, channels) for n in names]


def recipe_string(steps: Sequence[TransformStep]) -> str:
    return "-".join(s.token for s in steps) or "none"


# -- grids ------------------------------------------------------------------

def identity_points(H: int, W: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Normalized pixel-center coordinates, shape (H, W, 2)."""
    xs = (2 * torch.arange(W, dtype=torch.float64) + 1) / W - 1
    ys = (2 * torch.arange(H, dtype=torch.float64) + 1) / H - 1
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy], dim=-1).to(dtype=dtype, device=device)


def _check_params(kind: str, params: torch.Tensor):
    expected = make_step(kind).param_count
    if params.shape[-1] != expected:
        raise ValueError(f"{kind} expects {expected} parameters, got {params.shape[-1]}")


def _affine_points(params, pts):
    mat = params.view(-1, 2, 3) + torch.eye(2, 3, dtype=params.dtype, device=params.device)
    return pts @ mat[:, :, :2].transpose(1, 2) + mat[:, None, :, 2]


def _projective_points(params, pts):
    B = params.shape[0]
    full = torch.cat([params, params.new_zeros(B, 1)], dim=1).view(B, 3, 3)
    mat = full + torch.eye(3, dtype=params.dtype, device=params.device)
    det = torch.linalg.det(mat.detach())
    if bool((det.abs() < DET_EPS).any()):
        raise DegenerateTransformError("singular projective matrix")
    homog = torch.cat([pts, pts.new_ones(pts.shape[:-1] + (1,))], dim=-1)
    out = homog @ mat.transpose(1, 2)
    return out[..., :2] / out[..., 2:]


@lru_cache(maxsize=None)
def tps_control_points() -> np.ndarray:
    """4x4 lattice spanning [-1, 1]^2, row-major over (y, x); shape (16, 2)."""
    lin = np.linspace(-1.0, 1.0, TPS_GRID)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def _tps_kernel(r2: torch.Tensor) -> torch.Tensor:
    # U(r) = r^2 log r^2, with U(0) = 0
    return r2 * torch.log(torch.where(r2 > 0, r2, torch.ones_like(r2)))


@lru_cache(maxsize=None)
def tps_solver() -> np.ndarray:
    """Rows of the inverse TPS system mapping control values to (w, a); (19, 16)."""
    ctrl = tps_control_points()
    n = len(ctrl)
    d2 = ((ctrl[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
    P = np.concatenate([np.ones((n, 1)), ctrl], axis=1)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = _tps_kernel(torch.from_numpy(d2)).numpy()
    L[:n, n:] = P
    L[n:, :n] = P.T
    return np.linalg.inv(L)[:, :n]


def tps_basis(pts: torch.Tensor) -> torch.Tensor:
    """Interpolation weights of every point w.r.t. the control values; (..., 16)."""
    ctrl = torch.as_tensor(tps_control_points(), dtype=pts.dtype, device=pts.device)
    solver = torch.as_tensor(tps_solver(), dtype=pts.dtype, device=pts.device)
    r2 = ((pts[..., None, :] - ctrl) ** 2).sum(-1)
    feats = torch.cat([_tps_kernel(r2), torch.ones_like(pts[..., :1]), pts], dim=-1)
    return feats @ solver


@lru_cache(maxsize=16)
def _tps_basis_identity(H, W, dtype, device):
    return tps_basis(identity_points(H, W, torch.float64, device).view(-1, 2)).to(dtype)


def _tps_points(params, pts, hw=None):
    disp = params.view(-1, TPS_GRID * TPS_GRID, 2)
    if hw is not None:
        basis = _tps_basis_identity(hw[0], hw[1], params.dtype, params.device)
        return pts + basis @ disp
    return pts + tps_basis(pts) @ disp


def warp_points(kind: str, params: torch.Tensor, pts: torch.Tensor, hw=None) -> torch.Tensor:
    """Apply the sampling map of a spatial step to points of shape (B, n, 2)."""
    _check_params(kind, params)
    if kind == "affine":
        return _affine_points(params, pts)
    if kind == "projective":
        return _projective_points(params, pts)
    if kind == "tps":
        return _tps_points(params, pts, hw)
    raise ValueError(f"{kind} is not a spatial transformation")


def make_grid(kind: str, params: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Sampling grid of a spatial step. ``params`` is (P,) or (B, P)."""
    single = params.dim() == 1
    params = params.view(1, -1) if single else params
    if H < 2 or W < 2:
        raise ValueError("grid needs H, W >= 2")
    pts = identity_points(H, W, params.dtype, params.device).view(1, -1, 2)
    pts = pts.expand(params.shape[0], -1, -1)
    grid = warp_points(kind, params, pts, hw=(H, W)).view(-1, H, W, 2)
    return grid[0] if single else grid


def fused_grid(kinds: Sequence[str], params: Sequence[torch.Tensor], H: int, W: int) -> torch.Tensor:
    """Grid equivalent to applying spatial steps ``kinds[0]`` first, then the rest.

    Resampling twice, ``T2(T1(x))(p) = x(g1(g2(p)))``, so the maps are
    evaluated from the last step to the first.
    """
    B = params[0].shape[0]
    pts = identity_points(H, W, params[0].dtype, params[0].device).view(1, -1, 2).expand(B, -1, -1)
    hw = (H, W)
    for kind, p in zip(reversed(kinds), reversed(params)):
        pts = warp_points(kind, p, pts, hw=hw)
        hw = None
    return pts.view(B, H, W, 2)


def sample(image: torch.Tensor, grid: torch.Tensor, pad: str = "border") -> torch.Tensor:
    """Bilinear resampling of (N, C, H, W) images on (N, H', W', 2) grids."""
    single = image.dim() == 3
    if single:
        image, grid = image[None], grid[None]
    if grid.shape[0] != image.shape[0] or grid.shape[-1] != 2:
        raise ValueError("grid batch/shape does not match image")
    out = F.grid_sample(image, grid.to(image.dtype), mode="bilinear", padding_mode=pad,
                        align_corners=False)
    return out[0] if single else out


# -- value transforms -----------------------------------------------------------

def color_apply(image: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Channel-wise ``(1 + scale_c) * x_c + shift_c``; no clamping."""
    single = image.dim() == 3
    if single:
        image, params = image[None], params[None]
    N, C = image.shape[:2]
    if params.shape[-1] != 2 * C:
        raise ValueError(f"color expects {2 * C} parameters, got {params.shape[-1]}")
    p = params.view(N, C, 2, 1, 1)
    out = (1 + p[:, :, 0]) * image + p[:, :, 1]
    return out[0] if single else out


def color_full_apply(image: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Full affine color mixing (C x C matrix + bias). Opt-in only; it lets
    prototypes hide patterns in individual channels."""
    single = image.dim() == 3
    if single:
        image, params = image[None], params[None]
    N, C = image.shape[:2]
    mat = params[:, : C * C].view(N, C, C) + torch.eye(C, dtype=params.dtype, device=params.device)
    out = torch.einsum("ncd,ndhw->nchw", mat, image) + params[:, C * C:].view(N, C, 1, 1)
    return out[0] if single else out


def morpho_apply(image: torch.Tensor, params: torch.Tensor) -> torch.Tensor:
    """Soft dilation/erosion over a 7x7 window.

    ``params = [alpha, a_logits (49)]``; the kernel ``a = sigmoid(a_logits)`` is
    indexed by window offset. Positive ``alpha`` approaches a max filter,
    negative a min filter. Borders are replicate-padded.
    """
    single = image.dim() == 3
    if single:
        image, params = image[None], params[None]
    N, C, H, W = image.shape
    r = MORPHO_SIZE // 2
    alpha = params[:, 0].repeat_interleave(C).view(N * C, 1, 1, 1)
    kernel = torch.sigmoid(params[:, 1:]).repeat_interleave(C, dim=0)
    kernel = kernel.view(N * C, 1, MORPHO_SIZE, MORPHO_SIZE)
    xp = F.pad(image.reshape(N * C, 1, H, W), (r, r, r, r), mode="replicate")
    z = alpha * xp
    # per-image shift cancels in the ratio; the floor keeps exp() from underflowing
    z = torch.clamp(z - z.amax(dim=(2, 3), keepdim=True).detach(), min=EXP_FLOOR)
    e = torch.exp(z)
    Hp, Wp = H + 2 * r, W + 2 * r
    num = F.conv2d((xp * e).view(1, N * C, Hp, Wp), kernel, groups=N * C)
    den = F.conv2d(e.view(1, N * C, Hp, Wp), kernel, groups=N * C)
    out = (num / (den + 1e-12)).view(N, C, H, W)
    return out[0] if single else out


# -- composition ----------------------------------------------------------------

def _as_batch(image, params):
    single = image.dim() == 3
    if single:
        image = image[None]
        params = [p.reshape(1, -1) for p in params]
    return single, image, list(params)


def _run_steps(image, steps, params, pad, spatial_only):
    N, C, H, W = image.shape
    pending_kinds, pending_params = [], []

    def flush(img):
        if not pending_kinds:
            return img
        grid = fused_grid(pending_kinds, pending_params, H, W)
        pending_kinds.clear()
        pending_params.clear()
        return sample(img, grid, pad)

    out = image
    for step, p in zip(steps, params):
        if p.shape[-1] != step.param_count:
            raise ValueError(f"{step.kind} expects {step.param_count} parameters, got {p.shape[-1]}")
        if step.kind == "identity":
            continue
        if step.is_spatial:
            pending_kinds.append(step.kind)
            pending_params.append(p)
            continue
        if spatial_only:
            continue
        out = flush(out)
        if step.kind == "color":
            out = color_apply(out, p)
        elif step.kind == "color_full":
            out = color_full_apply(out, p)
        else:
            out = morpho_apply(out, p)
    return flush(out)


def compose_apply(image: torch.Tensor, steps: Sequence[TransformStep],
                  params: Sequence[torch.Tensor], pad: str = "border") -> torch.Tensor:
    """Apply ``steps`` in order (first step first) to (N, C, H, W) or (C, H, W)."""
    if len(steps) != len(params):
        raise ValueError("one parameter vector per step is required")
    single, image, params = _as_batch(image, params)
    out = _run_steps(image, steps, params, pad, spatial_only=False)
    return out[0] if single else out


def covariance_apply(var_map: torch.Tensor, steps: Sequence[TransformStep],
                     params: Sequence[torch.Tensor], pad: str = "border") -> torch.Tensor:
    """Warp a diagonal variance image with the spatial steps only.

    Color and morphological steps are meaningless on a covariance and are
    skipped. Bilinear weights are convex, so the output stays non-negative.
    """
    if len(steps) != len(params):
        raise ValueError("one parameter vector per step is required")
    single, var_map, params = _as_batch(var_map, params)
    out = _run_steps(var_map, steps, params, pad, spatial_only=True)
    return out[0] if single else out


def rotation90_params(quarter_turns: int, dtype=torch.float64) -> torch.Tensor:
    """Affine offsets (from identity) of a rotation by ``quarter_turns`` * 90 degrees."""
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][quarter_turns % 4]
    mat = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=dtype)
    return (mat - torch.eye(2, 3, dtype=dtype)).view(6)
