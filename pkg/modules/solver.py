"""
Direct model fitting of pose and bone-length scales to target joint sets.

The objective is the Euclidean joint loss ½‖F_k(Θ,S) − J‖². The primary
algorithm is Gauss-Newton with Levenberg-Marquardt damping on the stacked
Jacobian [∂J/∂Θ | ∂J/∂S]; bounds are kept by clamping after every step.
A momentum gradient-descent mode minimises the same objective for
comparison with network-style training.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .errors import NumericalError, ValidationError
from .fk_core import check_pose, check_scales, forward_batch, jacobians_batch
from .skeleton import DofKind, JointSet, KinematicTree, PoseVector, ScaleMode, ScaleVector

logger = logging.getLogger(__name__)

MODULE = 'solver'

GRADIENT_TOL = 1e-6
MAX_DAMPING = 1e12
RESTART_MARGIN = 0.5


class Algorithm(str, Enum):
    GAUSS_NEWTON = 'gauss_newton'
    DESCENT = 'descent'


class FitConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: ScaleMode = ScaleMode.FIVE
    max_iters: int = Field(200, ge=0)
    damping_init: float = Field(1e-3, gt=0)
    tol_cost: float = Field(1e-10, gt=0)
    tol_step: float = Field(1e-8, gt=0)
    descent_lr: float = Field(1e-3, gt=0)
    descent_momentum: float = Field(0.9, ge=0, lt=1)
    descent_scale_mm: float = Field(150.0, gt=0)
    algorithm: Algorithm = Algorithm.GAUSS_NEWTON
    restarts: int = Field(0, ge=0)
    restart_cost: float = Field(1e-2, gt=0)
    seed: int = 0


class FitReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    theta_hat: PoseVector
    s_hat: ScaleVector
    final_cost: float
    iterations: int
    converged: bool
    cost_trace: List[float]
    runs: int = 1


class _Problem:
    """Flattened parameter vector x = [Θ | S] (or Θ alone when scales are frozen)."""

    def __init__(self, target: JointSet, tree: KinematicTree, mode: ScaleMode, s_fixed: Optional[np.ndarray]):
        self.tree = tree
        self.mode = mode
        self.target = target.flat
        self.s_fixed = s_fixed
        n_s = 0 if s_fixed is not None else mode.n_params(tree.n_bones)
        self.n_theta = tree.n_dofs
        self.lo = np.concatenate([tree.dof_lo, np.full(n_s, tree.scale_lo)])
        self.hi = np.concatenate([tree.dof_hi, np.full(n_s, tree.scale_hi)])

    def split(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.s_fixed is not None:
            return x, self.s_fixed
        return x[:self.n_theta], x[self.n_theta:]

    def residual(self, x: np.ndarray) -> np.ndarray:
        theta, s = self.split(x)
        return forward_batch(theta, s, self.mode, self.tree)[0].reshape(-1) - self.target

    def linearize(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        theta, s = self.split(x)
        positions, jac_theta, jac_s = jacobians_batch(theta, s, self.mode, self.tree)
        r = positions[0].reshape(-1) - self.target
        if self.s_fixed is not None:
            return r, jac_theta[0]
        return r, np.hstack([jac_theta[0], jac_s[0]])

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lo, self.hi)


def _projected(x: np.ndarray, grad: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    pg = grad.copy()
    pg[(x <= lo) & (grad > 0)] = 0.0
    pg[(x >= hi) & (grad < 0)] = 0.0
    return pg


def projected_gradient(theta: PoseVector, s: ScaleVector, tree: KinematicTree, target: JointSet,
                       freeze_scales: bool = False) -> np.ndarray:
    """Loss gradient with components that point out of the feasible box zeroed."""
    problem = _Problem(target, tree, s.mode, s.values if freeze_scales else None)
    x = theta.theta if freeze_scales else np.concatenate([theta.theta, s.values])
    r, jac = problem.linearize(x)
    return _projected(x, jac.T @ r, problem.lo, problem.hi)


def _is_optimal(pg: np.ndarray, cost: float) -> bool:
    return float(np.linalg.norm(pg)) <= GRADIENT_TOL * (1.0 + cost)


def _check_cost(cost: float, iteration: int) -> None:
    if not np.isfinite(cost):
        raise NumericalError(f'cost became non-finite at iteration {iteration}', MODULE)


def _gauss_newton(problem: _Problem, x: np.ndarray, cfg: FitConfig) -> Tuple[np.ndarray, float, int, bool, List[float]]:
    r, jac = problem.linearize(x)
    cost = 0.5 * float(r @ r)
    _check_cost(cost, 0)
    trace = [cost]
    damping = cfg.damping_init
    iteration = 0
    while iteration < cfg.max_iters:
        if cost <= cfg.tol_cost:
            break
        grad = jac.T @ r
        if _is_optimal(_projected(x, grad, problem.lo, problem.hi), cost):
            break
        normal = jac.T @ jac
        diag = np.maximum(np.diag(normal), 1.0)
        iteration += 1

        accepted = False
        while damping <= MAX_DAMPING:
            step = np.linalg.solve(normal + damping * np.diag(diag), -grad)
            x_new = problem.project(x + step)
            r_new = problem.residual(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            _check_cost(cost_new, iteration)
            if cost_new < cost:
                accepted = True
                damping = max(damping * 0.1, 1e-15)
                break
            damping *= 10.0
        if not accepted:
            logger.debug('Damping exhausted at iteration %d (cost %.6g)', iteration, cost)
            break

        moved = float(np.linalg.norm(x_new - x))
        x = x_new
        r, jac = problem.linearize(x)
        cost = 0.5 * float(r @ r)
        trace.append(cost)
        logger.debug('iteration %d: cost %.6g, damping %.3g', iteration, cost, damping)
        if moved < cfg.tol_step * (1.0 + float(np.linalg.norm(x))):
            break

    grad = jac.T @ r
    converged = cost <= cfg.tol_cost or _is_optimal(_projected(x, grad, problem.lo, problem.hi), cost)
    return x, cost, iteration, converged, trace


def _descent(problem: _Problem, x: np.ndarray, cfg: FitConfig) -> Tuple[np.ndarray, float, int, bool, List[float]]:
    """Momentum descent on residuals in units of `descent_scale_mm`; returns the best iterate."""
    unit = cfg.descent_scale_mm
    velocity = np.zeros_like(x)
    r, jac = problem.linearize(x)
    cost = 0.5 * float(r @ r)
    _check_cost(cost, 0)
    trace = [cost]
    best_x, best_cost = x, cost
    iteration = 0
    while iteration < cfg.max_iters and cost > cfg.tol_cost:
        iteration += 1
        velocity = cfg.descent_momentum * velocity - cfg.descent_lr * (jac.T @ r) / unit ** 2
        x = problem.project(x + velocity)
        r, jac = problem.linearize(x)
        cost = 0.5 * float(r @ r)
        _check_cost(cost, iteration)
        trace.append(cost)
        if cost < best_cost:
            best_x, best_cost = x, cost

    r, jac = problem.linearize(best_x)
    converged = best_cost <= cfg.tol_cost or _is_optimal(_projected(best_x, jac.T @ r, problem.lo, problem.hi),
                                                         best_cost)
    return best_x, best_cost, iteration, converged, trace


def _restart_inits(target: JointSet, tree: KinematicTree, cfg: FitConfig) -> List[np.ndarray]:
    """Seeded random poses with the root translation placed at the target's root joint."""
    inits = []
    mid = 0.5 * (tree.dof_lo + tree.dof_hi)
    half = 0.5 * (tree.dof_hi - tree.dof_lo) * RESTART_MARGIN
    root = target.positions[0]
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.restarts):
        rng = np.random.default_rng(child)
        theta = rng.uniform(mid - half, mid + half)
        for p, dof in enumerate(tree.dofs):
            if dof.kind is DofKind.TRANSLATION:
                theta[p] = np.clip(root['xyz'.index(dof.axis)], dof.lo, dof.hi)
        inits.append(theta)
    return inits


def fit(target: JointSet, tree: KinematicTree, cfg: FitConfig,
        init: Optional[Tuple[PoseVector, ScaleVector]] = None, freeze_scales: bool = False) -> FitReport:
    """
    Fit Θ and S to a target joint set.

    With `freeze_scales` only Θ is optimised and S stays at its initial value.
    When the first run ends above `cfg.restart_cost`, up to `cfg.restarts`
    further runs start from seeded random poses; the cheapest run is returned.

    Raises:
        ValidationError: misaligned target or infeasible init.
        NumericalError: cost became non-finite.
    """
    if target.positions.shape != (tree.n_joints, 3):
        raise ValidationError(
            f'target has shape {target.positions.shape}, expected ({tree.n_joints}, 3)', MODULE)
    theta0, s0 = init or (PoseVector.zeros(tree), ScaleVector.ones(cfg.mode, tree))
    if s0.mode is not cfg.mode:
        raise ValidationError(f'init scales are in {s0.mode.value} mode, config asks for {cfg.mode.value}', MODULE)
    check_pose(theta0, tree)
    check_scales(s0, tree)

    problem = _Problem(target, tree, cfg.mode, s0.values if freeze_scales else None)
    run = _gauss_newton if cfg.algorithm is Algorithm.GAUSS_NEWTON else _descent

    starts = [theta0.theta]
    best = None
    runs = 0
    while starts:
        theta_start = starts.pop(0)
        x0 = theta_start if freeze_scales else np.concatenate([theta_start, s0.values])
        result = run(problem, x0.copy(), cfg)
        runs += 1
        if best is None or result[1] < best[1]:
            best = result
        if runs == 1 and best[1] > cfg.restart_cost and cfg.restarts:
            starts.extend(_restart_inits(target, tree, cfg))
        if best[1] <= cfg.restart_cost:
            break

    x, cost, iterations, converged, trace = best
    theta, s = problem.split(x)
    if runs > 1:
        logger.debug('Fit used %d runs, best cost %.6g', runs, cost)
    return FitReport(theta_hat=PoseVector(theta=theta), s_hat=ScaleVector(mode=cfg.mode, values=s),
                     final_cost=cost, iterations=iterations, converged=converged, cost_trace=trace, runs=runs)


def fit_batch(targets: Sequence[JointSet], tree: KinematicTree, cfg: FitConfig,
              freeze_scales: bool = False, workers: int = 1) -> List[FitReport]:
    """Independent fits, optionally on a thread pool; results keep target order."""
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(lambda t: fit(t, tree, cfg, freeze_scales=freeze_scales), targets))


def fit_scales_over_set(targets: Sequence[JointSet], tree: KinematicTree,
                        cfg: FitConfig) -> Tuple[ScaleVector, List[PoseVector]]:
    """
    One shared scale vector for a set of frames of the same hand.

    Alternates per-frame pose fits with S frozen (warm-started from the
    previous round) and one damped Gauss-Newton step on S over the stacked
    residuals of all frames, until the S step falls below `cfg.tol_step` or
    `cfg.max_iters` rounds have run. Poses are refit against the final S.

    Raises:
        ValidationError: empty target list.
    """
    if not targets:
        raise ValidationError('fitting shared scales needs at least one target', MODULE)
    n_k = cfg.mode.n_params(tree.n_bones)
    goal = np.stack([t.positions for t in targets])
    s = np.ones(n_k)
    thetas = [PoseVector.zeros(tree) for _ in targets]
    damping = cfg.damping_init

    def refit_poses(s_values: np.ndarray) -> List[PoseVector]:
        scales = ScaleVector(mode=cfg.mode, values=s_values)
        return [fit(t, tree, cfg, init=(th, scales), freeze_scales=True).theta_hat
                for t, th in zip(targets, thetas)]

    for round_ in range(cfg.max_iters):
        thetas = refit_poses(s)
        theta_stack = np.stack([th.theta for th in thetas])
        s_stack = np.repeat(s[None, :], len(targets), axis=0)
        positions, _, jac_s = jacobians_batch(theta_stack, s_stack, cfg.mode, tree)
        r = (positions - goal).reshape(-1)
        cost = 0.5 * float(r @ r)
        _check_cost(cost, round_)
        if cost <= cfg.tol_cost * len(targets):
            break
        jac = jac_s.reshape(-1, n_k)
        grad = jac.T @ r
        normal = jac.T @ jac
        diag = np.maximum(np.diag(normal), 1.0)

        s_new = None
        while damping <= MAX_DAMPING:
            trial = np.clip(s + np.linalg.solve(normal + damping * np.diag(diag), -grad),
                            tree.scale_lo, tree.scale_hi)
            r_new = (forward_batch(theta_stack, np.repeat(trial[None, :], len(targets), axis=0),
                                   cfg.mode, tree) - goal).reshape(-1)
            if 0.5 * float(r_new @ r_new) < cost:
                s_new = trial
                damping = max(damping * 0.1, 1e-15)
                break
            damping *= 10.0
        if s_new is None:
            break
        moved = float(np.linalg.norm(s_new - s))
        s = s_new
        logger.info('Shared-scale round %d: cost %.6g, step %.3g', round_ + 1, cost, moved)
        if moved < cfg.tol_step:
            break

    thetas = refit_poses(s)
    return ScaleVector(mode=cfg.mode, values=s), thetas
