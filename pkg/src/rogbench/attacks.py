"""L-infinity adversarial attacks on volumetric segmentation.

All attacks operate on whole volumes in the [0, 1] attack space; the model is
applied through the tiled predictor so gradients compose through the fusion
weights. epsilon = 0 is the clean sentinel: every attack returns its input.

Gradient attacks maximize a voxel-mean loss (best_loss_trace non-decreasing);
the Square attack minimizes the voxel-mean margin (trace non-increasing).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .inference import TiledPredictor
from .metrics import DiceReport, attack_success, dice_report
from .volumes import AffineMap, LabelMask, TaskSpec, Volume

ATTACK_ORDER = ("apgd-ce", "apgd-dlr", "fab-t", "square")
LOSS_KINDS = ("voxel-ce", "voxel-dlr", "margin")

APGD_MOMENTUM = 0.75
APGD_RHO = 0.75
FAB_ALPHA_MAX = 0.1
FAB_BETA = 0.9
SQUARE_P0 = 0.2
SQUARE_MILESTONES = (0.05, 0.2, 0.5, 0.8)  # query fractions at which p halves
BALL_TOL = 1e-6


@dataclass
class AttackConfig:
    """Adversary parameters; epsilon is quoted in the unit intensity range."""

    epsilon: float
    iterations: int = 5
    queries: int = 2500
    restarts: int = 1
    loss_kind: str = "voxel-ce"
    seed: int = 0
    foreground_only: bool = False
    overlap_fraction: float = 0.5

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative (0 means clean)")
        if self.iterations < 1 and self.queries < 1:
            raise ValueError("need iterations >= 1 or queries >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass
class AttackResult:
    name: str
    adversarial: np.ndarray
    delta: np.ndarray
    dice_report: DiceReport
    success: bool
    evaluations_used: int
    epsilon: float
    best_loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        linf = float(np.abs(self.delta).max()) if self.delta.size else 0.0
        if linf > self.epsilon + BALL_TOL:
            raise ValueError(f"perturbation norm {linf} exceeds epsilon {self.epsilon}")
        lo, hi = float(self.adversarial.min()), float(self.adversarial.max())
        if lo < -BALL_TOL or hi > 1.0 + BALL_TOL:
            raise ValueError(f"adversarial values [{lo}, {hi}] leave the [0, 1] box")


# ---------------------------------------------------------------------------
# Voxel-mean losses
# ---------------------------------------------------------------------------


def _as_logits(logits) -> torch.Tensor:
    if isinstance(logits, np.ndarray):
        logits = torch.from_numpy(logits)
    return logits.float() if not logits.dtype.is_floating_point else logits


def _as_labels(labels) -> torch.Tensor:
    if isinstance(labels, LabelMask):
        labels = labels.labels
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(np.ascontiguousarray(labels))
    return labels.long()


def voxel_ce_loss(logits, labels, foreground_only: bool = False) -> torch.Tensor:
    """Mean over voxels of -log softmax(z)_y."""
    z = _as_logits(logits)
    y = _as_labels(labels)
    if z.shape[1:] != y.shape:
        raise ValueError(f"logits spatial shape {tuple(z.shape[1:])} != labels {tuple(y.shape)}")
    per_voxel = F.cross_entropy(z.unsqueeze(0), y.unsqueeze(0), reduction="none")[0]
    if foreground_only:
        fg = y > 0
        if not bool(fg.any()):
            return per_voxel.mean()
        return per_voxel[fg].mean()
    return per_voxel.mean()


def voxel_dlr_loss(logits, labels) -> torch.Tensor:
    """Difference-of-logits-ratio, voxel-mean.

    For C >= 3: -(z_y - max_{i != y} z_i) / (z_(1) - z_(3) + 1e-12) with z_(k)
    the k-th largest logit. For C = 2 the ratio degenerates, so the plain
    margin -(z_y - z_{1-y}) is used instead.
    """
    z = _as_logits(logits)
    y = _as_labels(labels)
    if z.shape[1:] != y.shape:
        raise ValueError(f"logits spatial shape {tuple(z.shape[1:])} != labels {tuple(y.shape)}")
    num_classes = z.shape[0]
    z_flat = z.reshape(num_classes, -1)
    y_flat = y.reshape(-1)
    idx = torch.arange(y_flat.numel())
    z_y = z_flat[y_flat, idx]
    if num_classes == 2:
        z_other = z_flat[1 - y_flat, idx]
        return (-(z_y - z_other)).mean()
    masked = z_flat.clone()
    masked[y_flat, idx] = -torch.inf
    z_max_other = masked.max(dim=0).values
    z_sorted, _ = z_flat.sort(dim=0, descending=True)
    denom = z_sorted[0] - z_sorted[2] + 1e-12
    return (-(z_y - z_max_other) / denom).mean()


def voxel_margin_loss(logits, labels) -> torch.Tensor:
    """Mean over voxels of z_y - max_{i != y} z_i (low when misclassified)."""
    z = _as_logits(logits)
    y = _as_labels(labels)
    if z.shape[1:] != y.shape:
        raise ValueError(f"logits spatial shape {tuple(z.shape[1:])} != labels {tuple(y.shape)}")
    z_flat = z.reshape(z.shape[0], -1)
    y_flat = y.reshape(-1)
    idx = torch.arange(y_flat.numel())
    z_y = z_flat[y_flat, idx]
    masked = z_flat.clone()
    masked[y_flat, idx] = -torch.inf
    return (z_y - masked.max(dim=0).values).mean()


def _loss_fn(kind: str, foreground_only: bool):
    if kind == "voxel-ce":
        return lambda z, y: voxel_ce_loss(z, y, foreground_only=foreground_only)
    if kind == "voxel-dlr":
        return voxel_dlr_loss
    return voxel_margin_loss


# ---------------------------------------------------------------------------
# Shared evaluation plumbing
# ---------------------------------------------------------------------------


class UnitSpaceModel(torch.nn.Module):
    """Adapter that accepts attack-space inputs and feeds native intensities.

    Networks are trained on normalized intensities while the adversary works
    in the per-channel [0, 1] box, so the inverse affine sits in front of the
    wrapped model. The map is constant per channel; gradients pass through
    with a fixed per-channel scale.
    """

    def __init__(self, model, amap: AffineMap):
        super().__init__()
        self.inner = model
        shape = (1, -1, 1, 1, 1)
        self.register_buffer("_lo", torch.from_numpy(amap.lo.copy()).float().view(shape))
        self.register_buffer("_span", torch.from_numpy(amap.scale.copy()).float().view(shape))

    @property
    def cfg(self):
        return self.inner.cfg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.inner(self._lo + x * self._span)


class _CaseEvaluator:
    """One tiled forward serves loss (differentiable) and Dice (detached)."""

    def __init__(self, model, mask: LabelMask, task: TaskSpec, overlap_fraction: float):
        model.eval()
        self.predictor = TiledPredictor(model, overlap_fraction=overlap_fraction)
        self.mask = mask
        self.task = task
        self.labels_t = torch.from_numpy(np.ascontiguousarray(mask.labels)).long()
        self.forwards = 0

    def loss_grad_dice(self, x_np: np.ndarray, loss_fn):
        """Returns (loss value, grad wrt x, DiceReport) at x."""
        x = torch.from_numpy(x_np).float().requires_grad_(True)
        with torch.enable_grad():
            logits, probs = self.predictor.forward(x)
            loss = loss_fn(logits, self.labels_t)
            (grad,) = torch.autograd.grad(loss, x)
        self.forwards += 1
        report = self._report(probs)
        return float(loss.item()), grad.numpy(), report

    def loss_dice(self, x_np: np.ndarray, loss_fn):
        with torch.no_grad():
            logits, probs = self.predictor.forward(torch.from_numpy(x_np).float())
            loss = loss_fn(logits, self.labels_t)
        self.forwards += 1
        return float(loss.item()), self._report(probs)

    def dice(self, x_np: np.ndarray) -> DiceReport:
        with torch.no_grad():
            _, probs = self.predictor.forward(torch.from_numpy(x_np).float())
        self.forwards += 1
        return self._report(probs)

    def margin_grad(self, x_np: np.ndarray, margin_fn):
        x = torch.from_numpy(x_np).float().requires_grad_(True)
        with torch.enable_grad():
            logits, probs = self.predictor.forward(x)
            g = margin_fn(logits)
            (grad,) = torch.autograd.grad(g, x)
        self.forwards += 1
        return float(g.item()), grad.numpy(), self._report(probs)

    def _report(self, probs) -> DiceReport:
        pred = probs.detach().argmax(dim=0).numpy().astype(np.int64)
        return dice_report(pred, self.mask.labels, self.task.num_classes)


def _project_ball_box(x: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(x, x0 - eps, x0 + eps), 0.0, 1.0)


def _attack_data(x) -> np.ndarray:
    data = x.data if isinstance(x, Volume) else np.asarray(x)
    if data.min() < -BALL_TOL or data.max() > 1.0 + BALL_TOL:
        raise ValueError("attack input must live in the [0, 1] attack space")
    return np.clip(data.astype(np.float32), 0.0, 1.0)


def _clean_result(name, evaluator, x0, task, cfg) -> AttackResult:
    report = evaluator.dice(x0)
    return AttackResult(
        name=name,
        adversarial=x0.copy(),
        delta=np.zeros_like(x0),
        dice_report=report,
        success=attack_success(report.mean, task),
        evaluations_used=1,
        epsilon=cfg.epsilon,
    )


# ---------------------------------------------------------------------------
# PGD baseline
# ---------------------------------------------------------------------------


def pgd_attack(model, x, mask: LabelMask, task: TaskSpec, cfg: AttackConfig) -> AttackResult:
    """Fixed-step signed-gradient ascent on voxel CE; returns the worst iterate."""
    x0 = _attack_data(x)
    ev = _CaseEvaluator(model, mask, task, cfg.overlap_fraction)
    if cfg.epsilon == 0:
        return _clean_result("pgd", ev, x0, task, cfg)
    loss_fn = _loss_fn("voxel-ce", cfg.foreground_only)
    eta = cfg.epsilon / 4.0
    rng = np.random.default_rng(cfg.seed)

    best_x, best_report = x0.copy(), None
    trace = []
    for _ in range(cfg.restarts):
        xk = _project_ball_box(
            x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(np.float32),
            x0,
            cfg.epsilon,
        )
        for _ in range(cfg.iterations):
            loss, grad, report = ev.loss_grad_dice(xk, loss_fn)
            trace.append(loss if not trace else max(trace[-1], loss))
            if best_report is None or report.mean < best_report.mean:
                best_x, best_report = xk.copy(), report
            xk = _project_ball_box(xk + eta * np.sign(grad), x0, cfg.epsilon)
        final_report = ev.dice(xk)
        if best_report is None or final_report.mean < best_report.mean:
            best_x, best_report = xk.copy(), final_report
    return AttackResult(
        name="pgd",
        adversarial=best_x,
        delta=best_x - x0,
        dice_report=best_report,
        success=attack_success(best_report.mean, task),
        evaluations_used=ev.forwards,
        epsilon=cfg.epsilon,
        best_loss_trace=trace,
    )


# ---------------------------------------------------------------------------
# APGD
# ---------------------------------------------------------------------------


def apgd_checkpoints(n_iter: int) -> list[int]:
    """Step-size decision points: p_0=0, p_1=0.22, then growing by >= 0.06.

    The fractions are exact hundredths, so the recursion runs on integer
    hundredths to keep ceil(p * n_iter) free of float drift.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    hundredths = [0, 22]
    while hundredths[-1] < 100:
        step = max(hundredths[-1] - hundredths[-2] - 3, 6)
        hundredths.append(hundredths[-1] + step)
    points = []
    for p in hundredths:
        k = -(-p * n_iter // 100)  # ceil(p/100 * n_iter) exactly
        if k < n_iter and (not points or k > points[-1]):
            points.append(int(k))
    return points


def apgd_attack(model, x, mask: LabelMask, task: TaskSpec, cfg: AttackConfig) -> AttackResult:
    """Momentum PGD with checkpointed step-size halving and best-point restarts."""
    if cfg.loss_kind not in ("voxel-ce", "voxel-dlr"):
        raise ValueError("apgd supports voxel-ce or voxel-dlr losses")
    x0 = _attack_data(x)
    name = "apgd-ce" if cfg.loss_kind == "voxel-ce" else "apgd-dlr"
    ev = _CaseEvaluator(model, mask, task, cfg.overlap_fraction)
    if cfg.epsilon == 0:
        return _clean_result(name, ev, x0, task, cfg)
    loss_fn = _loss_fn(cfg.loss_kind, cfg.foreground_only)
    checkpoints = set(apgd_checkpoints(cfg.iterations)[1:])
    rng = np.random.default_rng(cfg.seed)

    overall_x, overall_report = None, None
    trace = []
    for restart in range(cfg.restarts):
        if restart == 0:
            xk = x0.copy()
        else:
            xk = _project_ball_box(
                x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape).astype(np.float32),
                x0,
                cfg.epsilon,
            )
        eta = 2.0 * cfg.epsilon
        f_k, grad, report = ev.loss_grad_dice(xk, loss_fn)
        x_best, f_best = xk.copy(), f_k
        worst_x, worst_report = xk.copy(), report
        trace.append(f_k if not trace else max(trace[-1], f_k))
        x_prev = xk.copy()
        rises = 0
        steps_in_window = 0
        eta_at_ckpt, f_best_at_ckpt = eta, f_best

        for k in range(1, cfg.iterations + 1):
            z = _project_ball_box(xk + eta * np.sign(grad), x0, cfg.epsilon)
            if k == 1:
                x_next = z
            else:
                x_next = _project_ball_box(
                    xk + APGD_MOMENTUM * (z - xk) + (1 - APGD_MOMENTUM) * (xk - x_prev),
                    x0,
                    cfg.epsilon,
                )
            x_prev, xk = xk, x_next
            if k == cfg.iterations:
                report = ev.dice(xk)
                if report.mean < worst_report.mean:
                    worst_x, worst_report = xk.copy(), report
                break
            f_k_new, grad, report = ev.loss_grad_dice(xk, loss_fn)
            steps_in_window += 1
            if f_k_new > f_k:
                rises += 1
            f_k = f_k_new
            if f_k > f_best:
                x_best, f_best = xk.copy(), f_k
            trace.append(max(trace[-1], f_k))
            if report.mean < worst_report.mean:
                worst_x, worst_report = xk.copy(), report

            if k in checkpoints:
                stalled = eta == eta_at_ckpt and f_best == f_best_at_ckpt
                if rises < APGD_RHO * steps_in_window or stalled:
                    eta /= 2.0
                    xk = x_best.copy()
                    x_prev = x_best.copy()
                    f_k = f_best
                eta_at_ckpt, f_best_at_ckpt = eta, f_best
                rises, steps_in_window = 0, 0

        if overall_report is None or worst_report.mean < overall_report.mean:
            overall_x, overall_report = worst_x, worst_report
    return AttackResult(
        name=name,
        adversarial=overall_x,
        delta=overall_x - x0,
        dice_report=overall_report,
        success=attack_success(overall_report.mean, task),
        evaluations_used=ev.forwards,
        epsilon=cfg.epsilon,
        best_loss_trace=trace,
    )


# ---------------------------------------------------------------------------
# FAB-T
# ---------------------------------------------------------------------------


def linf_hyperplane_step(g_value: float, grad: np.ndarray) -> np.ndarray:
    """L-infinity-minimal delta with g_value + <grad, delta> = 0."""
    l1 = float(np.abs(grad).sum())
    if l1 == 0:
        return np.zeros_like(grad)
    return (-g_value / l1) * np.sign(grad)


def _fab_targets(mask: LabelMask, num_classes: int) -> list[int]:
    labels = mask.labels
    fg = labels[labels > 0]
    pool = fg if fg.size else labels.reshape(-1)
    counts = np.bincount(pool, minlength=num_classes)
    anchor = int(np.argmax(counts))
    return [c for c in range(num_classes) if c != anchor]


def fab_t_attack(model, x, mask: LabelMask, task: TaskSpec, cfg: AttackConfig) -> AttackResult:
    """Targeted minimal-perturbation boundary attack, aggregated over voxels.

    Tracks the smallest successful perturbation across targets; the result is
    that point only if it fits the epsilon ball, otherwise the clean input
    (comparability clause: no out-of-budget adversarial is ever returned).
    """
    x0 = _attack_data(x)
    ev = _CaseEvaluator(model, mask, task, cfg.overlap_fraction)
    if cfg.epsilon == 0:
        return _clean_result("fab-t", ev, x0, task, cfg)
    labels_t = torch.from_numpy(np.ascontiguousarray(mask.labels)).long()
    best_delta, best_norm, best_report = None, np.inf, None

    def margin_for(target: int):
        keep = labels_t != target

        def margin(logits):
            z_flat = logits.reshape(logits.shape[0], -1)
            y_flat = labels_t.reshape(-1)
            idx = torch.arange(y_flat.numel())
            diff = z_flat[target] - z_flat[y_flat, idx]
            k = keep.reshape(-1)
            return diff[k].mean() if bool(k.any()) else diff.mean()

        return margin

    for target in _fab_targets(mask, task.num_classes):
        margin_fn = margin_for(target)
        xk = x0.copy()
        for _ in range(cfg.iterations):
            g, grad, report = ev.margin_grad(xk, margin_fn)
            if attack_success(report.mean, task):
                delta = xk - x0
                norm = float(np.abs(delta).max())
                if norm < best_norm:
                    best_delta, best_norm, best_report = delta.copy(), norm, report
                xk = x0 + FAB_BETA * (xk - x0)  # backward step toward the original
                continue
            step_k = linf_hyperplane_step(g, grad)
            # Projection of the original point onto the same linearized plane.
            g0 = g + float((grad * (x0 - xk)).sum())
            step_0 = linf_hyperplane_step(g0, grad)
            nk = float(np.abs(step_k).max())
            n0 = float(np.abs(step_0).max())
            alpha = min(nk / (nk + n0 + 1e-12), FAB_ALPHA_MAX)
            xk = np.clip(
                (1 - alpha) * (xk + step_k) + alpha * (x0 + step_0), 0.0, 1.0
            ).astype(np.float32)

    if best_delta is not None and best_norm <= cfg.epsilon + BALL_TOL:
        adv = np.clip(x0 + best_delta, 0.0, 1.0)
        return AttackResult(
            name="fab-t",
            adversarial=adv,
            delta=adv - x0,
            dice_report=best_report,
            success=attack_success(best_report.mean, task),
            evaluations_used=ev.forwards,
            epsilon=cfg.epsilon,
        )
    report = ev.dice(x0)
    return AttackResult(
        name="fab-t",
        adversarial=x0.copy(),
        delta=np.zeros_like(x0),
        dice_report=report,
        success=attack_success(report.mean, task),
        evaluations_used=ev.forwards,
        epsilon=cfg.epsilon,
    )


# ---------------------------------------------------------------------------
# Square attack
# ---------------------------------------------------------------------------


def _square_side(progress: float, min_edge: int) -> int:
    p = SQUARE_P0 * 0.5 ** sum(progress >= m for m in SQUARE_MILESTONES)
    return max(1, min(min_edge, int(round(p * min_edge))))


def square_attack(model, x, mask: LabelMask, task: TaskSpec, cfg: AttackConfig) -> AttackResult:
    """Random cube search accepted on voxel-mean margin decrease; gradient-free."""
    x0 = _attack_data(x)
    ev = _CaseEvaluator(model, mask, task, cfg.overlap_fraction)
    if cfg.epsilon == 0:
        return _clean_result("square", ev, x0, task, cfg)
    rng = np.random.default_rng(cfg.seed)
    loss_fn = _loss_fn("margin", False)
    channels, *shape = x0.shape
    eps = cfg.epsilon

    # Stripe init: per (channel, last-axis index) sign, constant elsewhere.
    signs = rng.choice([-1.0, 1.0], size=(channels, shape[-1])).astype(np.float32)
    delta = np.broadcast_to(signs[:, None, None, :], x0.shape) * eps
    x_best = _project_ball_box(x0 + delta, x0, eps)
    loss_best, report_best = ev.loss_dice(x_best, loss_fn)
    trace = [loss_best]

    proposals = max(cfg.queries - 1, 0)
    min_edge = min(shape)
    for i in range(proposals):
        side = _square_side(i / max(proposals, 1), min_edge)
        corner = [int(rng.integers(0, s - side + 1)) for s in shape]
        vals = rng.choice([-eps, eps], size=channels).astype(np.float32)
        cand = x_best.copy()
        region = (slice(None), *[slice(c, c + side) for c in corner])
        cand[region] = np.clip(
            x0[region] + vals.reshape(-1, 1, 1, 1), np.maximum(x0[region] - eps, 0.0),
            np.minimum(x0[region] + eps, 1.0),
        )
        loss_cand, report_cand = ev.loss_dice(cand, loss_fn)
        if loss_cand < loss_best:
            x_best, loss_best, report_best = cand, loss_cand, report_cand
            trace.append(loss_best)
    return AttackResult(
        name="square",
        adversarial=x_best,
        delta=x_best - x0,
        dice_report=report_best,
        success=attack_success(report_best.mean, task),
        evaluations_used=ev.forwards,
        epsilon=cfg.epsilon,
        best_loss_trace=trace,
    )


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def run_autoattack(
    model,
    x,
    mask: LabelMask,
    task: TaskSpec,
    cfg: AttackConfig,
    early_exit: bool = False,
) -> tuple[dict[str, AttackResult], DiceReport]:
    """APGD-CE, APGD-DLR, FAB-T, Square in order; worst case = min mean Dice."""
    if task.clean_mean_dice is None:
        raise ValueError("task needs clean_mean_dice before running the ensemble")
    runners = {
        "apgd-ce": lambda: apgd_attack(
            model, x, mask, task, _with(cfg, loss_kind="voxel-ce")
        ),
        "apgd-dlr": lambda: apgd_attack(
            model, x, mask, task, _with(cfg, loss_kind="voxel-dlr")
        ),
        "fab-t": lambda: fab_t_attack(model, x, mask, task, cfg),
        "square": lambda: square_attack(model, x, mask, task, cfg),
    }
    results: dict[str, AttackResult] = {}
    for name in ATTACK_ORDER:
        results[name] = runners[name]()
        if early_exit and results[name].success:
            break
    worst = min(results.values(), key=lambda r: r.dice_report.mean).dice_report
    return results, worst


def _with(cfg: AttackConfig, **kw) -> AttackConfig:
    d = cfg.__dict__ | kw
    return AttackConfig(**d)
