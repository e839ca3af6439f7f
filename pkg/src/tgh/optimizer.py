"""Training: Adam updates on working-set Gaussians, adaptive density control
limited to recently touched primitives, per-step hierarchy reassignment and
the appearance gate wiring. Per-iteration cost depends on working-set size,
not on the total population or video length.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from . import appearance as ap
from . import gaussians as ga
from . import renderer as rn
from .errors import InvalidParameterError
from .hierarchy import TemporalHierarchy
from .losses import LossWeights, psnr

PARAM_GROUPS = ("mu", "scale", "rotor_left", "rotor_right",
                "opacity", "base_color", "sh_residual")


@dataclass
class TrainConfig:
    lr: float = 1.6e-4                   # base learning rate (positions)
    lr_scale_mult: float = 5.0           # scales and rotors
    lr_opacity_mult: float = 25.0
    lr_color_mult: float = 12.5          # base color and residual SH
    scale_position_lr_by_extent: bool = True
    lambda_mse: float = 0.8
    lambda_ssim: float = 0.2
    lambda_perc: float = 0.0             # accepted but must stay 0
    iterations: int | None = None        # None: 50000 scaled by frames/1200
    densify_interval: int = 100
    grad_densify_threshold: float = 2e-4      # view-space NDC units
    prune_opacity_threshold: float = 5e-3
    split_scale_divisor: float = 1.6
    clone_size_fraction: float = 0.01    # of scene extent: clone below, split above
    clone_nudge: float = 0.5             # offset in units of mean spatial scale
    max_gaussians: int | None = None     # densification safety cap
    o_th: float = 0.05
    g_th: float = 1e-6
    lambda_h: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "densify_interval", "grad_densify_threshold",
                     "prune_opacity_threshold", "split_scale_divisor"):
            if getattr(self, name) <= 0:
                raise InvalidParameterError(f"{name} must be positive")
        if min(self.lambda_mse, self.lambda_ssim, self.lambda_perc) < 0:
            raise InvalidParameterError("loss weights must be >= 0")

    def loss_weights(self):
        return LossWeights(mse=self.lambda_mse, ssim=self.lambda_ssim,
                           perc=self.lambda_perc)

    def resolve_iterations(self, frames):
        if self.iterations is not None:
            return int(self.iterations)
        return max(1, round(50_000 * frames / 1200))


class AdamState:
    """First/second moments per Gaussian row, plus per-row update counters.

    beta1 = 0.9, beta2 = 0.999, eps = 1e-15; moments are zero until a row's
    first applied update.
    """

    BETA1 = 0.9
    BETA2 = 0.999
    EPS = 1e-15

    DIMS = {"mu": 4, "scale": 4, "rotor_left": 4, "rotor_right": 4,
            "opacity": 1, "base_color": 3, "sh_residual": 45}

    def __init__(self, capacity=256):
        self.capacity = 0
        self.m = {}
        self.v = {}
        self.steps = np.zeros(0, dtype=np.int64)
        self.ensure_capacity(capacity)

    def ensure_capacity(self, capacity):
        if capacity <= self.capacity:
            return
        for name, dim in self.DIMS.items():
            fresh_m = np.zeros((capacity, dim))
            fresh_v = np.zeros((capacity, dim))
            if self.capacity:
                fresh_m[:self.capacity] = self.m[name]
                fresh_v[:self.capacity] = self.v[name]
            self.m[name] = fresh_m
            self.v[name] = fresh_v
        steps = np.zeros(capacity, dtype=np.int64)
        steps[:self.capacity] = self.steps
        self.steps = steps
        self.capacity = capacity

    def reset_rows(self, rows):
        for name in self.DIMS:
            self.m[name][rows] = 0.0
            self.v[name][rows] = 0.0
        self.steps[rows] = 0


def adam_step(params, grads, m, v, steps, lr):
    """Bias-corrected Adam update applied in place to `params`.

    params/grads/m/v: (N, D) views for the touched rows; steps: (N,) update
    counters already incremented for this step.
    """
    b1, b2, eps = AdamState.BETA1, AdamState.BETA2, AdamState.EPS
    m *= b1
    m += (1 - b1) * grads
    v *= b2
    v += (1 - b2) * grads * grads
    t = steps.astype(np.float64)[:, None] if params.ndim == 2 else steps
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


@dataclass
class DensifyStats:
    """View-space gradient accumulation since the last control pass."""

    capacity: int = 0
    grad_accum: np.ndarray = None
    world_grad: np.ndarray = None
    count: np.ndarray = None
    touched_rows: set = field(default_factory=set)

    def ensure_capacity(self, capacity):
        if capacity <= self.capacity:
            return
        grad = np.zeros(capacity)
        world = np.zeros((capacity, 3))
        cnt = np.zeros(capacity, dtype=np.int64)
        if self.capacity:
            grad[:self.capacity] = self.grad_accum
            world[:self.capacity] = self.world_grad
            cnt[:self.capacity] = self.count
        self.grad_accum, self.world_grad, self.count = grad, world, cnt
        self.capacity = capacity

    def accumulate(self, rows, viewspace_norm, world_grad3):
        self.grad_accum[rows] += viewspace_norm
        self.world_grad[rows] += world_grad3
        self.count[rows] += 1
        self.touched_rows.update(int(r) for r in rows)

    def reset_touched(self):
        rows = np.fromiter(self.touched_rows, dtype=np.intp,
                           count=len(self.touched_rows))
        if len(rows):
            self.grad_accum[rows] = 0.0
            self.world_grad[rows] = 0.0
            self.count[rows] = 0
        self.touched_rows.clear()


@dataclass
class ControlReport:
    pruned: int = 0
    cloned: int = 0
    split: int = 0
    new_ids: list = field(default_factory=list)
    removed_ids: list = field(default_factory=list)


def adaptive_control(h: TemporalHierarchy, stats: DensifyStats, cfg: TrainConfig,
                     rng, scene_extent):
    """Prune / clone / split among the Gaussians touched since the last pass.

    Restricting control to sampled segments keeps its cost independent of
    the total population. Every new or changed Gaussian is re-placed.
    """
    report = ControlReport()
    store = h.store
    rows = np.array(sorted(r for r in stats.touched_rows
                           if store.id_at_row(r) >= 0), dtype=np.intp)
    if len(rows) == 0:
        stats.reset_touched()
        return report

    prune_mask = store.opacity[rows] < cfg.prune_opacity_threshold
    for r in rows[prune_mask]:
        gid = store.id_at_row(r)
        h.remove(gid)
        report.removed_ids.append(gid)
        report.pruned += 1
    rows = rows[~prune_mask]

    room = None
    if cfg.max_gaussians is not None:
        room = max(0, cfg.max_gaussians - len(store))
    counts = stats.count[rows]
    mean_grad = np.where(counts > 0, stats.grad_accum[rows] / np.maximum(counts, 1), 0.0)
    hot = mean_grad >= cfg.grad_densify_threshold
    max_spatial = np.max(store.scale[rows, :3], axis=1)
    size_cut = cfg.clone_size_fraction * scene_extent
    clone_rows = rows[hot & (max_spatial <= size_cut)]
    split_rows = rows[hot & (max_spatial > size_cut)]

    for r in clone_rows:
        if room is not None and room <= 0:
            break
        gid = store.id_at_row(r)
        g = store.get(gid)
        wg = stats.world_grad[r] / max(stats.count[r], 1)
        norm = np.linalg.norm(wg)
        if norm > 0:
            g.mu[:3] -= (wg / norm) * cfg.clone_nudge * np.mean(g.scale[:3])
        new_id = h.insert(g)
        report.new_ids.append(new_id)
        report.cloned += 1
        if room is not None:
            room -= 1

    for r in split_rows:
        if room is not None and room <= 0:
            break
        gid = store.id_at_row(r)
        g = store.get(gid)
        cov_spatial = ga.build_covariance(g)[:3, :3]
        chol = np.linalg.cholesky(cov_spatial + 1e-12 * np.eye(3))
        for _ in range(2):
            child = store.get(gid)
            child.mu[:3] = g.mu[:3] + chol @ rng.standard_normal(3)
            child.scale[:3] = g.scale[:3] / cfg.split_scale_divisor
            new_id = h.insert(child)
            report.new_ids.append(new_id)
        h.remove(gid)
        report.removed_ids.append(gid)
        report.split += 1
        if room is not None:
            room -= 1

    stats.reset_touched()
    return report


@dataclass
class TrainResult:
    metrics: list                       # dicts with the metrics-CSV columns
    gate: ap.AppearanceGate
    vdep_history: list                  # (iteration, view-dependent fraction)
    max_working_set: int = 0
    max_touched: int = 0

METRIC_COLUMNS = ("iteration", "loss", "psnr", "num_gaussians",
                  "working_set_size", "seconds_per_iter")


def scene_extent_of(store):
    rows = store.live_rows()
    if len(rows) == 0:
        return 1.0
    pos = store.mu[rows][:, :3]
    diag = np.linalg.norm(pos.max(axis=0) - pos.min(axis=0))
    return float(diag) if diag > 0 else 1.0


def train(scene, h: TemporalHierarchy, cfg: TrainConfig = None,
          render_opts: rn.RenderOptions = None, on_interval=None):
    """Fit the hierarchy's Gaussians to the scene's posed images.

    `scene` provides cameras, frames, frame_rate and target(cam, frame).
    Returns a TrainResult; the hierarchy is optimized in place.
    """
    cfg = cfg or TrainConfig()
    if len(scene.cameras) == 0 or scene.frames == 0:
        raise InvalidParameterError("scene has no (view, time) samples")
    weights = cfg.loss_weights()
    weights.validate()
    iterations = cfg.resolve_iterations(scene.frames)
    rng = np.random.default_rng(cfg.seed)
    gate = ap.AppearanceGate(g_th=cfg.g_th, lambda_h=cfg.lambda_h)
    adam = AdamState(h.store.capacity)
    stats = DensifyStats()
    stats.ensure_capacity(h.store.capacity)
    extent = scene_extent_of(h.store)
    opts = render_opts or rn.RenderOptions()
    lr_of = {
        "mu": cfg.lr * (extent if cfg.scale_position_lr_by_extent else 1.0),
        "scale": cfg.lr * cfg.lr_scale_mult,
        "rotor_left": cfg.lr * cfg.lr_scale_mult,
        "rotor_right": cfg.lr * cfg.lr_scale_mult,
        "opacity": cfg.lr * cfg.lr_opacity_mult,
        "base_color": cfg.lr * cfg.lr_color_mult,
        "sh_residual": cfg.lr * cfg.lr_color_mult,
    }

    result = TrainResult(metrics=[], gate=gate, vdep_history=[])
    interval_loss = []
    last_psnr = float("nan")
    t_interval = time.perf_counter()
    store = h.store

    for it in range(1, iterations + 1):
        cam_i = int(rng.integers(len(scene.cameras)))
        frame = int(rng.integers(scene.frames))
        cam = scene.cameras[cam_i]
        t_stamp = frame / scene.frame_rate
        ws = h.query(t_stamp)
        result.max_working_set = max(result.max_working_set, len(ws.gaussian_ids))
        batch = h.materialize(ws)
        target = scene.target(cam_i, frame)
        value, fb, grads = rn.render_with_gradients(
            batch, t_stamp, cam, target, weights,
            rn.RenderOptions(background=opts.background, alpha_min=opts.alpha_min,
                             alpha_clamp=opts.alpha_clamp,
                             cov2_lowpass=opts.cov2_lowpass,
                             temporal_cutoff=h.o_th))
        interval_loss.append(value)

        if len(batch) > 0:
            grads.sh_residual = ap.gate_gradients(batch.sh_residual,
                                                  grads.sh_residual, gate)
            rows = store.rows_of(ws.gaussian_ids)
            adam.ensure_capacity(store.capacity)
            stats.ensure_capacity(store.capacity)
            adam.steps[rows] += 1
            steps = adam.steps[rows]
            for name in PARAM_GROUPS:
                col = getattr(store, name)
                grad = getattr(grads, name)
                p = col[rows]
                m = adam.m[name][rows]
                v = adam.v[name][rows]
                if name == "opacity":
                    m, v = m[:, 0], v[:, 0]
                adam_step(p, grad, m, v, steps, lr_of[name])
                col[rows] = p
                if name == "opacity":
                    adam.m[name][rows, 0] = m
                    adam.v[name][rows, 0] = v
                else:
                    adam.m[name][rows] = m
                    adam.v[name][rows] = v
            # keep invariants: opacity in [0, 1], scales above the floor,
            # rotors unit
            store.opacity[rows] = np.clip(store.opacity[rows], 0.0, 1.0)
            store.scale[rows] = np.maximum(store.scale[rows], ga.SCALE_FLOOR)
            for attr in ("rotor_left", "rotor_right"):
                q = getattr(store, attr)[rows]
                q /= np.linalg.norm(q, axis=1, keepdims=True)
                getattr(store, attr)[rows] = q
            h.update_levels([int(g) for g in ws.gaussian_ids])
            touched = grads.touched
            result.max_touched = max(result.max_touched, int(touched.sum()))
            if np.any(touched):
                stats.accumulate(rows[touched], grads.viewspace_norm[touched],
                                 grads.mu[touched][:, :3])

        if it % cfg.densify_interval == 0 or it == iterations:
            report = adaptive_control(h, stats, cfg, rng, extent)
            if report.removed_ids or report.new_ids:
                adam.ensure_capacity(store.capacity)
                stats.ensure_capacity(store.capacity)
                reset = store.rows_of(report.new_ids)
                if len(reset):
                    adam.reset_rows(reset)
            live = store.live_rows()
            fraction = ap.view_dependent_fraction(store.sh_residual[live])
            ap.update_ratio_cutoff(gate, fraction)
            result.vdep_history.append((it, fraction))
            elapsed = time.perf_counter() - t_interval
            n_iters = len(interval_loss)
            last_psnr = psnr(fb.rgb, target)
            result.metrics.append({
                "iteration": it,
                "loss": float(np.mean(interval_loss)) if interval_loss else 0.0,
                "psnr": float(last_psnr),
                "num_gaussians": len(store),
                "working_set_size": len(ws.gaussian_ids),
                "seconds_per_iter": elapsed / max(n_iters, 1),
            })
            if on_interval is not None:
                on_interval(it, result)
            interval_loss = []
            t_interval = time.perf_counter()
    return result


def write_metrics_csv(path, metrics):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in metrics:
            writer.writerow({k: row[k] for k in METRIC_COLUMNS})
