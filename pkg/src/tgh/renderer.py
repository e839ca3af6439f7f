"""Deterministic software splatting renderer.

Pipeline per frame: condition every working-set Gaussian at the timestamp,
cull by temporal factor and depth, project to screen-space 2D Gaussians (EWA
first-order approximation), sort back-to-front, expand each splat into a
pixel rectangle bounded by its opacity level set, evaluate the kernel per
fragment and alpha-blend in depth order. The per-pixel reduction is strictly
sequential in the globally sorted order, so tiled execution is bit-identical
to a single pass. `render_with_gradients` replays the pipeline and
back-propagates the image loss analytically to every Gaussian parameter.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import gaussians as ga
from . import sh
from .camera import Camera
from .errors import InvalidParameterError
from .losses import LossWeights, loss as image_loss
from .store import GaussianBatch

# isoclinic factors are linear in the quaternion: L(q) = sum_c q_c * basis[c]
_LEFT_BASIS = ga.left_isoclinic(np.eye(4))
_RIGHT_BASIS = ga.right_isoclinic(np.eye(4))


@dataclass
class RenderOptions:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alpha_min: float = 1.0 / 255.0      # quad opacity threshold
    alpha_clamp: float = 0.99           # per-fragment opacity ceiling
    cov2_lowpass: float = 0.3           # px^2 added to screen-space covariance
    temporal_cutoff: float = 0.05       # drop splats whose temporal factor < this
    tile_size: int | None = None        # pixels; None = single pass

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not 0.0 < self.alpha_min < 1.0:
            raise InvalidParameterError("alpha_min must lie in (0, 1)")


@dataclass
class Splat2D:
    center2: np.ndarray      # (2,) pixels
    cov2: np.ndarray         # (2, 2) SPD, pixels^2
    depth: float             # camera-space z
    color: np.ndarray        # (3,)
    alpha: float
    gid: int = 0


@dataclass
class QuadRect:
    half_extents: np.ndarray     # (2,) pixels, level-set bounding half-widths
    x0: int                      # inclusive pixel column range [x0, x1]
    x1: int
    y0: int
    y1: int


@dataclass
class Framebuffer:
    width: int
    height: int
    rgb: np.ndarray              # (H, W, 3)
    transmittance: np.ndarray    # (H, W), remaining background visibility


@dataclass
class ParamGradients:
    """Per-Gaussian gradients aligned with the rendered batch's ids."""

    ids: np.ndarray
    mu: np.ndarray
    scale: np.ndarray
    rotor_left: np.ndarray
    rotor_right: np.ndarray
    opacity: np.ndarray
    base_color: np.ndarray
    sh_residual: np.ndarray
    viewspace_norm: np.ndarray   # NDC-scale screen position gradient norms
    touched: np.ndarray          # bool: splat survived culling and covered pixels


# --------------------------------------------------------------------------
# single-splat operations (the unit contracts; render uses the batch path)

def project(cond: ga.ConditionedGaussian3D, cam: Camera, color=None,
            alpha=None, lowpass=0.3, gid=0):
    """Project a conditioned Gaussian to a screen-space splat; None if culled."""
    m = cam.rotation @ np.asarray(cond.mean3, dtype=np.float64) + cam.translation
    if not cam.near <= m[2] <= cam.far:
        return None
    x, y, z = m
    center2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
    J = np.array([[cam.fx / z, 0.0, -cam.fx * x / (z * z)],
                  [0.0, cam.fy / z, -cam.fy * y / (z * z)]])
    K = J @ cam.rotation
    cov2 = K @ cond.cov3 @ K.T + lowpass * np.eye(2)
    return Splat2D(center2=center2, cov2=cov2, depth=float(z),
                   color=np.zeros(3) if color is None else np.asarray(color, dtype=np.float64),
                   alpha=cond.opacity_t if alpha is None else float(alpha), gid=gid)


def depth_sort(depths, ids=None):
    """Back-to-front permutation: decreasing depth, ties by ascending id."""
    depths = np.asarray(depths, dtype=np.float64)
    if not np.all(np.isfinite(depths)):
        raise InvalidParameterError("depths must be finite")
    ids = np.arange(len(depths)) if ids is None else np.asarray(ids)
    return np.lexsort((ids, -depths))


def expand_quad(splat: Splat2D, alpha_min, width=None, height=None):
    """Pixel-aligned bounding rectangle of the level set
    alpha * exp(-0.5 d^T cov2^-1 d) >= alpha_min; None if the splat is dimmer
    than alpha_min everywhere."""
    if not 0.0 < alpha_min < 1.0:
        raise InvalidParameterError("alpha_min must lie in (0, 1)")
    if splat.alpha < alpha_min:
        return None
    level = 2.0 * math.log(splat.alpha / alpha_min)
    half = np.sqrt(level * np.diag(splat.cov2))
    x0 = math.ceil(splat.center2[0] - half[0] - 0.5)
    x1 = math.floor(splat.center2[0] + half[0] - 0.5)
    y0 = math.ceil(splat.center2[1] - half[1] - 0.5)
    y1 = math.floor(splat.center2[1] + half[1] - 0.5)
    if width is not None:
        x0, x1 = max(x0, 0), min(x1, width - 1)
    if height is not None:
        y0, y1 = max(y0, 0), min(y1, height - 1)
    if x0 > x1 or y0 > y1:
        return None
    return QuadRect(half_extents=half, x0=x0, x1=x1, y0=y0, y1=y1)


# --------------------------------------------------------------------------
# fragment machinery

def _build_fragments(center2, conic, alpha, rects):
    """Flatten splat rectangles into per-fragment arrays.

    Splats must already be in front-to-back order so that the per-pixel
    fragment sequences come out depth-ordered. Returns
    (splat_index, pixel_flat_is_deferred) columns: sidx, col, row, gauss, dx, dy.
    """
    x0, x1, y0, y1 = rects
    widths = x1 - x0 + 1
    heights = y1 - y0 + 1
    areas = widths * heights
    total = int(areas.sum())
    if total == 0:
        return (np.empty(0, dtype=np.intp),) * 3 + (np.empty(0),) * 3
    sidx = np.repeat(np.arange(len(areas), dtype=np.intp), areas)
    starts = np.concatenate([[0], np.cumsum(areas)[:-1]])
    offset = np.arange(total, dtype=np.intp) - starts[sidx]
    col = x0[sidx] + offset % widths[sidx]
    row = y0[sidx] + offset // widths[sidx]
    dx = (col + 0.5) - center2[sidx, 0]
    dy = (row + 0.5) - center2[sidx, 1]
    q = conic[sidx, 0] * dx * dx + 2.0 * conic[sidx, 1] * dx * dy + conic[sidx, 2] * dy * dy
    gauss = np.exp(-0.5 * q)
    return sidx, col, row, gauss, dx, dy


def _composite_ordered(px, frag_alpha, frag_color, save=False):
    """Sequential per-pixel over-compositing of depth-ordered fragments.

    px: flat pixel index per fragment, fragments front-to-back within a pixel.
    Returns (unique_px, color_sum, final_T[, order, T_frag, starts, counts]).
    """
    order = np.argsort(px, kind="stable")
    spx = px[order]
    sa = frag_alpha[order]
    sc = frag_color[order]
    is_start = np.empty(len(spx), dtype=bool)
    if len(spx):
        is_start[0] = True
        is_start[1:] = spx[1:] != spx[:-1]
    starts = np.flatnonzero(is_start)
    unique_px = spx[starts]
    counts = np.diff(np.append(starts, len(spx)))
    trans = np.ones(len(starts))
    color = np.zeros((len(starts), 3))
    t_frag = np.empty(len(spx)) if save else None
    max_depth = int(counts.max()) if len(counts) else 0
    for j in range(max_depth):
        act = np.flatnonzero(counts > j)
        f = starts[act] + j
        if save:
            t_frag[f] = trans[act]
        w = sa[f] * trans[act]
        color[act] += w[:, None] * sc[f]
        trans[act] = trans[act] * (1.0 - sa[f])
    if save:
        return unique_px, color, trans, order, t_frag, starts, counts
    return unique_px, color, trans


def _composite_backward(dl_dpx_color, background, sa, sc,
                        trans_final, t_frag, starts, counts):
    """Gradients of the ordered reduction w.r.t. fragment alpha and color.

    dl_dpx_color: (G, 3) upstream gradient per covered pixel group. The final
    pixel is C = sum_i a_i c_i T_i + T_N * bg; `behind` tracks the composited
    color strictly behind the current fragment including the background term,
    so dC/da_i = c_i T_i - behind_i / (1 - a_i) covers the T_N path too.
    Returns (grad_alpha, grad_color) per sorted fragment.
    """
    grad_alpha = np.zeros(len(sa))
    grad_color = np.zeros((len(sa), 3))
    behind = trans_final[:, None] * background[None, :]
    max_depth = int(counts.max()) if len(counts) else 0
    for j in range(max_depth - 1, -1, -1):
        act = np.flatnonzero(counts > j)
        f = starts[act] + j
        a = sa[f]
        t = t_frag[f]
        upstream = dl_dpx_color[act]
        grad_color[f] = upstream * (a * t)[:, None]
        grad_alpha[f] = np.sum(
            upstream * (sc[f] * t[:, None] - behind[act] / (1.0 - a)[:, None]), axis=1)
        behind[act] += (a * t)[:, None] * sc[f]
    return grad_alpha, grad_color


# --------------------------------------------------------------------------
# batch forward

def _forward(batch: GaussianBatch, t, cam: Camera, opts: RenderOptions):
    """Run the full pipeline on a parameter batch; returns (framebuffer, ctx).

    ctx carries every intermediate needed by the analytic backward pass.
    """
    n = len(batch)
    ctx = {"n": n, "batch": batch, "t": float(t), "cam": cam, "opts": opts}
    h_img, w_img = cam.height, cam.width
    if n == 0:
        rgb = np.broadcast_to(opts.background, (h_img, w_img, 3)).copy()
        ctx["keep"] = np.empty(0, dtype=np.intp)
        return Framebuffer(w_img, h_img, rgb, np.ones((h_img, w_img))), ctx

    s_cl = ga.clamp_scales(batch.scale)
    rot_l = batch.rotor_left / np.linalg.norm(batch.rotor_left, axis=1, keepdims=True)
    rot_r = batch.rotor_right / np.linalg.norm(batch.rotor_right, axis=1, keepdims=True)
    left = np.einsum("nc,cij->nij", rot_l, _LEFT_BASIS)
    right = np.einsum("nc,cij->nij", rot_r, _RIGHT_BASIS)
    rot4 = left @ right
    m4 = rot4 * s_cl[:, None, :]
    cov4 = m4 @ np.swapaxes(m4, 1, 2)

    v = cov4[:, :3, 3]
    sigma_t = cov4[:, 3, 3]
    dt = float(t) - batch.mu[:, 3]
    w_t = np.exp(-0.5 * dt * dt / sigma_t)
    mean3 = batch.mu[:, :3] + v * (dt / sigma_t)[:, None]
    cov3 = cov4[:, :3, :3] - v[:, :, None] * v[:, None, :] / sigma_t[:, None, None]

    alpha_splat = batch.opacity * w_t
    cam_pts = mean3 @ cam.rotation.T + cam.translation
    keep = np.flatnonzero((w_t >= opts.temporal_cutoff)
                          & (cam_pts[:, 2] >= cam.near) & (cam_pts[:, 2] <= cam.far)
                          & (alpha_splat >= opts.alpha_min))
    ctx.update(s_cl=s_cl, rot_l=rot_l, rot_r=rot_r, left=left, right=right,
               rot4=rot4, m4=m4, cov4=cov4, v=v, sigma_t=sigma_t, dt=dt, w_t=w_t,
               mean3=mean3, cov3=cov3, alpha_splat=alpha_splat, keep=keep)
    if len(keep) == 0:
        rgb = np.broadcast_to(opts.background, (h_img, w_img, 3)).copy()
        return Framebuffer(w_img, h_img, rgb, np.ones((h_img, w_img))), ctx

    x, y, z = cam_pts[keep, 0], cam_pts[keep, 1], cam_pts[keep, 2]
    center2 = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    jac = np.zeros((len(keep), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    k_mat = jac @ cam.rotation
    cov2 = np.einsum("nij,njk,nlk->nil", k_mat, cov3[keep], k_mat)
    cov2[:, 0, 0] += opts.cov2_lowpass
    cov2[:, 1, 1] += opts.cov2_lowpass
    a_, b_, c_ = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a_ * c_ - b_ * b_
    conic = np.stack([c_ / det, -b_ / det, a_ / det], axis=1)

    u_dir = mean3[keep] - cam.center
    u_norm = np.linalg.norm(u_dir, axis=1)
    dirs = u_dir / u_norm[:, None]
    basis = sh.eval_basis(dirs)
    coeffs = batch.sh_residual[keep].reshape(-1, sh.NUM_RESIDUAL_BASES, 3)
    color_raw = batch.base_color[keep] + np.einsum("nb,nbc->nc", basis, coeffs)
    color = np.clip(color_raw, 0.0, 1.0)

    # back-to-front ordering; fragments are generated front-to-back (reverse)
    order_btf = depth_sort(z, ids=batch.ids[keep])
    front = order_btf[::-1].copy()

    alpha_k = alpha_splat[keep]
    level = 2.0 * np.log(alpha_k / opts.alpha_min)
    half_x = np.sqrt(level * np.maximum(a_, 0.0))
    half_y = np.sqrt(level * np.maximum(c_, 0.0))
    x0 = np.maximum(np.ceil(center2[:, 0] - half_x - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(center2[:, 0] + half_x - 0.5), w_img - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(center2[:, 1] - half_y - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(center2[:, 1] + half_y - 0.5), h_img - 1).astype(np.int64)
    empty = (x0 > x1) | (y0 > y1)
    x1 = np.where(empty, x0 - 1, x1)  # zero-area rects emit no fragments
    y1 = np.where(empty, y0 - 1, y1)

    sidx, col, row, gauss, dx, dy = _build_fragments(
        center2[front], conic[front], alpha_k[front],
        (x0[front], x1[front], y0[front], y1[front]))
    frag_alpha = np.minimum(alpha_k[front][sidx] * gauss, opts.alpha_clamp)
    frag_color = color[front][sidx]
    px = row * w_img + col

    ctx.update(cam_pts=cam_pts, center2=center2, jac=jac, k_mat=k_mat,
               cov2=cov2, det=det, conic=conic, u_norm=u_norm, dirs=dirs,
               basis=basis, color_raw=color_raw, color=color, front=front,
               sidx=sidx, gauss=gauss, dx=dx, dy=dy, px=px,
               frag_alpha=frag_alpha, alpha_k=alpha_k)

    rgb = np.empty((h_img, w_img, 3))
    rgb[:] = opts.background
    trans_img = np.ones((h_img, w_img))
    if opts.tile_size is None:
        parts = [np.arange(len(px), dtype=np.intp)]
    else:
        ts = int(opts.tile_size)
        tile_id = (row // ts) * math.ceil(w_img / ts) + (col // ts)
        parts = [np.flatnonzero(tile_id == tid) for tid in np.unique(tile_id)]
    ctx["composite"] = []
    for part in parts:
        res = _composite_ordered(px[part], frag_alpha[part], frag_color[part],
                                 save=True)
        unique_px, csum, trans, order, t_frag, starts, counts = res
        rows_u, cols_u = np.divmod(unique_px, w_img)
        rgb[rows_u, cols_u] = csum + trans[:, None] * opts.background
        trans_img[rows_u, cols_u] = trans
        ctx["composite"].append((part, res))
    return Framebuffer(w_img, h_img, rgb, trans_img), ctx


def render_batch(batch: GaussianBatch, t, cam: Camera, opts: RenderOptions = None):
    """Render a parameter batch at timestamp t."""
    fb, _ = _forward(batch, t, cam, opts or RenderOptions())
    return fb


def render(h, t, cam: Camera, opts: RenderOptions = None):
    """Render the hierarchy's working set at timestamp t."""
    opts = opts or RenderOptions()
    opts = replace(opts, temporal_cutoff=h.o_th)
    ws = h.query(t)
    return render_batch(h.materialize(ws), t, cam, opts)


def composite(frame: Framebuffer, splats, background):
    """Reference over-operator: blend back-to-front splats onto a background.

    `splats` is a sequence of Splat2D in back-to-front order. Returns a new
    Framebuffer; uses the same fragment kernel as `render`.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    h_img, w_img = frame.height, frame.width
    rgb = np.empty((h_img, w_img, 3))
    rgb[:] = background
    trans_img = np.ones((h_img, w_img))
    if len(splats) == 0:
        return Framebuffer(w_img, h_img, rgb, trans_img)
    front = list(reversed(splats))
    center2 = np.stack([s.center2 for s in front])
    covs = np.stack([s.cov2 for s in front])
    alphas = np.array([s.alpha for s in front])
    colors = np.stack([s.color for s in front])
    det = covs[:, 0, 0] * covs[:, 1, 1] - covs[:, 0, 1] ** 2
    conic = np.stack([covs[:, 1, 1] / det, -covs[:, 0, 1] / det,
                      covs[:, 0, 0] / det], axis=1)
    rects = []
    keep = []
    for i, s in enumerate(front):
        r = expand_quad(s, alpha_min=1e-12, width=w_img, height=h_img) \
            if alphas[i] > 0 else None
        if r is not None:
            rects.append((r.x0, r.x1, r.y0, r.y1))
            keep.append(i)
    if not keep:
        return Framebuffer(w_img, h_img, rgb, trans_img)
    keep = np.array(keep, dtype=np.intp)
    rect_arr = tuple(np.array(v, dtype=np.int64) for v in zip(*rects))
    sidx, col, row, gauss, _, _ = _build_fragments(center2[keep], conic[keep],
                                                   alphas[keep], rect_arr)
    frag_alpha = np.minimum(alphas[keep][sidx] * gauss, 0.99)
    frag_color = colors[keep][sidx]
    px = row * w_img + col
    unique_px, csum, trans = _composite_ordered(px, frag_alpha, frag_color)
    rows_u, cols_u = np.divmod(unique_px, w_img)
    rgb[rows_u, cols_u] = csum + trans[:, None] * background
    trans_img[rows_u, cols_u] = trans
    return Framebuffer(w_img, h_img, rgb, trans_img)


# --------------------------------------------------------------------------
# analytic backward

def _sym_matrix(a_, b_, c_):
    """Symmetric 2x2 [[a, b], [b, c]] from packed entries."""
    out = np.empty(a_.shape + (2, 2))
    out[..., 0, 0] = a_
    out[..., 0, 1] = b_
    out[..., 1, 0] = b_
    out[..., 1, 1] = c_
    return out


def _sym_from_packed(ga_, gb_, gc_):
    """Full-matrix gradient of a function read through (a, b, c) of a
    symmetric 2x2 [[a, b], [b, c]]: the off-diagonal gradient splits in half."""
    return _sym_matrix(ga_, gb_ / 2.0, gc_)


def _backward(ctx, dl_dimage):
    """Propagate an image gradient to all batch parameters."""
    batch = ctx["batch"]
    n = ctx["n"]
    opts = ctx["opts"]
    cam = ctx["cam"]
    grads = ParamGradients(
        ids=np.asarray(batch.ids).copy(),
        mu=np.zeros((n, 4)), scale=np.zeros((n, 4)),
        rotor_left=np.zeros((n, 4)), rotor_right=np.zeros((n, 4)),
        opacity=np.zeros(n), base_color=np.zeros((n, 3)),
        sh_residual=np.zeros((n, sh.RESIDUAL_COEFFS)),
        viewspace_norm=np.zeros(n), touched=np.zeros(n, dtype=bool))
    keep = ctx["keep"]
    if len(keep) == 0 or "composite" not in ctx:
        return grads
    front = ctx["front"]
    nk = len(keep)
    dl_flat = dl_dimage.reshape(-1, 3)

    # fragment-level gradients, accumulated across tiles
    sidx = ctx["sidx"]
    grad_frag_alpha = np.zeros(len(sidx))
    grad_frag_color = np.zeros((len(sidx), 3))
    for part, res in ctx["composite"]:
        unique_px, _, trans, order, t_frag, starts, counts = res
        pa = ctx["frag_alpha"][part][order]
        pc = ctx["color"][front][sidx[part]][order]
        dl_dpx = dl_flat[unique_px]
        g_a, g_c = _composite_backward(dl_dpx, opts.background,
                                       pa, pc, trans, t_frag, starts, counts)
        grad_frag_alpha[part[order]] += g_a
        grad_frag_color[part[order]] += g_c

    # fragment -> splat (front-order indexing)
    alpha_front = ctx["alpha_k"][front]
    gauss = ctx["gauss"]
    raw = alpha_front[sidx] * gauss
    unclamped = raw < opts.alpha_clamp
    grad_raw = grad_frag_alpha * unclamped
    grad_alpha_f = np.zeros(nk)
    np.add.at(grad_alpha_f, sidx, grad_raw * gauss)
    grad_gauss = grad_raw * alpha_front[sidx]
    grad_q = -0.5 * gauss * grad_gauss
    dx, dy = ctx["dx"], ctx["dy"]
    conic_f = ctx["conic"][front]
    grad_conic_f = np.zeros((nk, 3))
    np.add.at(grad_conic_f[:, 0], sidx, grad_q * dx * dx)
    np.add.at(grad_conic_f[:, 1], sidx, grad_q * 2.0 * dx * dy)
    np.add.at(grad_conic_f[:, 2], sidx, grad_q * dy * dy)
    a_f = conic_f[sidx, 0]
    b_f = conic_f[sidx, 1]
    c_f = conic_f[sidx, 2]
    grad_dx = grad_q * 2.0 * (a_f * dx + b_f * dy)
    grad_dy = grad_q * 2.0 * (b_f * dx + c_f * dy)
    grad_center2_f = np.zeros((nk, 2))
    np.add.at(grad_center2_f[:, 0], sidx, -grad_dx)
    np.add.at(grad_center2_f[:, 1], sidx, -grad_dy)
    grad_color_f = np.zeros((nk, 3))
    np.add.at(grad_color_f, sidx, grad_frag_color)
    touched_f = np.zeros(nk, dtype=bool)
    touched_f[np.unique(sidx)] = True

    # undo the front reordering: quantities per kept splat
    inv = np.empty(nk, dtype=np.intp)
    inv[front] = np.arange(nk)
    grad_alpha_k = grad_alpha_f[inv]
    grad_conic = grad_conic_f[inv]
    grad_center2 = grad_center2_f[inv]
    grad_color = grad_color_f[inv]
    touched_k = touched_f[inv]

    # conic -> cov2 via d(X^-1) = -X^-1 dX X^-1
    conic_full = _sym_matrix(ctx["conic"][:, 0], ctx["conic"][:, 1],
                             ctx["conic"][:, 2])
    g_conic_full = _sym_from_packed(grad_conic[:, 0], grad_conic[:, 1],
                                    grad_conic[:, 2])
    grad_cov2 = -conic_full @ g_conic_full @ conic_full

    # cov2 = K cov3 K^T + lowpass I
    k_mat = ctx["k_mat"]
    cov3_keep = ctx["cov3"][keep]
    grad_cov3_k = np.einsum("nji,njk,nkl->nil", k_mat, grad_cov2, k_mat)
    grad_k = 2.0 * np.einsum("nij,njk,nkl->nil", grad_cov2, k_mat, cov3_keep)
    grad_jac = grad_k @ cam.rotation.T

    # center2 and Jacobian entries -> camera-space mean
    pts = ctx["cam_pts"][keep]
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    grad_m = np.zeros((len(keep), 3))
    grad_m[:, 0] += grad_center2[:, 0] * cam.fx * inv_z
    grad_m[:, 1] += grad_center2[:, 1] * cam.fy * inv_z
    grad_m[:, 2] += (-grad_center2[:, 0] * cam.fx * x
                     - grad_center2[:, 1] * cam.fy * y) * inv_z2
    grad_m[:, 0] += grad_jac[:, 0, 2] * (-cam.fx * inv_z2)
    grad_m[:, 1] += grad_jac[:, 1, 2] * (-cam.fy * inv_z2)
    grad_m[:, 2] += (grad_jac[:, 0, 0] * (-cam.fx * inv_z2)
                     + grad_jac[:, 1, 1] * (-cam.fy * inv_z2)
                     + grad_jac[:, 0, 2] * (2.0 * cam.fx * x * inv_z2 * inv_z)
                     + grad_jac[:, 1, 2] * (2.0 * cam.fy * y * inv_z2 * inv_z))
    grad_mean3_k = grad_m @ cam.rotation

    # color: clamp, SH contraction, view direction
    clamp_mask = (ctx["color_raw"] > 0.0) & (ctx["color_raw"] < 1.0)
    g_color_raw = grad_color * clamp_mask
    grad_base_k = g_color_raw
    basis = ctx["basis"]
    grad_coeffs = basis[:, :, None] * g_color_raw[:, None, :]
    coeffs = batch.sh_residual[keep].reshape(-1, sh.NUM_RESIDUAL_BASES, 3)
    grad_basis = np.einsum("nbc,nc->nb", coeffs, g_color_raw)
    basis_grad = sh.eval_basis_grad(ctx["dirs"])
    grad_dirs = np.einsum("nb,nbk->nk", grad_basis, basis_grad)
    dirs = ctx["dirs"]
    dots = np.sum(dirs * grad_dirs, axis=1)
    grad_mean3_k += (grad_dirs - dirs * dots[:, None]) / ctx["u_norm"][:, None]

    # scatter kept-splat gradients back to batch slots
    grad_mean3 = np.zeros((n, 3))
    grad_cov3 = np.zeros((n, 3, 3))
    grad_alpha = np.zeros(n)
    grad_mean3[keep] = grad_mean3_k
    grad_cov3[keep] = grad_cov3_k
    grad_alpha[keep] = grad_alpha_k
    grads.base_color[keep] = grad_base_k
    grads.sh_residual[keep] = grad_coeffs.reshape(len(keep), -1)
    grads.touched[keep] = touched_k
    ndc = grad_center2 * np.array([cam.width / 2.0, cam.height / 2.0])
    grads.viewspace_norm[keep] = np.linalg.norm(ndc, axis=1)

    # conditioning: mean3 / cov3 / temporal factor -> mu, cov4, opacity
    v = ctx["v"]
    sigma_t = ctx["sigma_t"]
    dt = ctx["dt"]
    w_t = ctx["w_t"]
    grad_w = grad_alpha * batch.opacity
    grads.opacity += grad_alpha * w_t
    gm_dot_v = np.sum(grad_mean3 * v, axis=1)
    grad_v = grad_mean3 * (dt / sigma_t)[:, None] \
        - 2.0 * np.einsum("nij,nj->ni", grad_cov3, v) / sigma_t[:, None]
    grad_sigma = (-gm_dot_v * dt / sigma_t ** 2
                  + np.einsum("ni,nij,nj->n", v, grad_cov3, v) / sigma_t ** 2
                  + grad_w * w_t * dt * dt / (2.0 * sigma_t ** 2))
    grads.mu[:, :3] = grad_mean3
    grads.mu[:, 3] = -gm_dot_v / sigma_t + grad_w * w_t * dt / sigma_t

    grad_cov4 = np.zeros((n, 4, 4))
    grad_cov4[:, :3, :3] = grad_cov3
    grad_cov4[:, :3, 3] = grad_v
    grad_cov4[:, 3, 3] = grad_sigma

    # cov4 = M M^T with M = R4 * diag(scales)
    m4 = ctx["m4"]
    grad_m4 = (grad_cov4 + np.swapaxes(grad_cov4, 1, 2)) @ m4
    rot4 = ctx["rot4"]
    s_cl = ctx["s_cl"]
    grad_rot4 = grad_m4 * s_cl[:, None, :]
    grad_s = np.einsum("nij,nij->nj", rot4, grad_m4)
    grads.scale = grad_s * (batch.scale > ga.SCALE_FLOOR)

    grad_left = grad_rot4 @ np.swapaxes(ctx["right"], 1, 2)
    grad_right = np.swapaxes(ctx["left"], 1, 2) @ grad_rot4
    g_ql_hat = np.einsum("nij,cij->nc", grad_left, _LEFT_BASIS)
    g_qr_hat = np.einsum("nij,cij->nc", grad_right, _RIGHT_BASIS)
    for raw_q, q_hat, g_hat, out in (
            (batch.rotor_left, ctx["rot_l"], g_ql_hat, grads.rotor_left),
            (batch.rotor_right, ctx["rot_r"], g_qr_hat, grads.rotor_right)):
        norm = np.linalg.norm(raw_q, axis=1, keepdims=True)
        proj = np.sum(q_hat * g_hat, axis=1, keepdims=True)
        out[:] = (g_hat - q_hat * proj) / norm
    return grads


def render_with_gradients(source, t, cam: Camera, target,
                          weights: LossWeights = None,
                          opts: RenderOptions = None):
    """Render, compare against a target image and back-propagate.

    `source` is either a hierarchy or a GaussianBatch. Returns
    (loss value, framebuffer, ParamGradients).
    """
    opts = opts or RenderOptions()
    weights = weights or LossWeights()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cam.height, cam.width, 3):
        raise InvalidParameterError(
            f"target shape {target.shape} does not match camera "
            f"({cam.height}, {cam.width}, 3)")
    if isinstance(source, GaussianBatch):
        batch = source
    else:
        opts = replace(opts, temporal_cutoff=source.o_th)
        batch = source.materialize(source.query(t))
    fb, ctx = _forward(batch, t, cam, opts)
    value, dl_dimage = image_loss(fb.rgb, target, weights)
    grads = _backward(ctx, dl_dimage)
    return value, fb, grads
