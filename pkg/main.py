#!/usr/bin/env python3
"""
HandScaleFK - command-line entry point

Every pipeline stage is a subcommand:
    fk          joints for a parameter file
    gradcheck   analytic vs finite-difference Jacobians at random points
    fit         fit pose and scales to target joints
    calibrate   re-estimate rest bone lengths from annotations
    synth       write a synthetic corpus
    preprocess  convert a local dataset into a corpus
    train-toy   train the toy FK network and checkpoint it
    eval        metrics and plot data for predicted vs ground-truth joints

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from modules.config import get_settings
from modules.errors import HandFKError, ValidationError
from modules.evalkit import DEFAULT_THRESHOLDS_MM, emit_curves, evaluate
from modules.fk_core import forward, jacobians_batch
from modules.paramio import (format_block, format_fit_report, format_joints, read_joints, read_params,
                             write_text)
from modules.preproc import CropSpec, build_corpus, write_corpus
from modules.skeleton import (KinematicTree, PoseVector, ScaleMode, ScaleVector, calibrate_rest_lengths, dump_tree,
                              load_tree_file)
from modules.solver import Algorithm, FitConfig, fit_batch, fit_scales_over_set
from modules.synth import SynthSpec, fd_jacobian, generate, max_relative_error, sample_poses, to_corpus_samples
from modules.toynet import TrainConfig, save_checkpoint, train, write_loss_history

logger = logging.getLogger('handfk')

DEFAULT_MODE = ScaleMode.FIVE
GRADCHECK_TOL = 1e-6


def setup_logging(level: str = 'INFO', log_file: Optional[str] = None) -> logging.Logger:
    """Log to stderr (stdout carries command output) and optionally to a file."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    return logger


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors surface as ValidationError instead of exiting."""

    def error(self, message):
        raise ValidationError(message, 'cli')


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--tree', type=Path, help='skeleton config (default: HANDFK_TREE_CONFIG or bundled)')
    common.add_argument('--seed', type=int, help='master seed (default: HANDFK_SEED or 0)')
    common.add_argument('--mode', choices=[m.value for m in ScaleMode], help='scale mode (default: five)')
    common.add_argument('--log-level', help='logging level (default: HANDFK_LOG_LEVEL or INFO)')

    parser = ArgumentParser(prog='handfk', description='Hand forward kinematics with learnable bone-length scales')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('fk', parents=[common], help='joint positions for a parameter file')
    p.add_argument('--params', type=Path, required=True)
    p.add_argument('--out', type=Path)

    p = sub.add_parser('gradcheck', parents=[common], help='compare analytic and FD Jacobians')
    p.add_argument('--n', type=int, default=200)
    p.add_argument('--tol', type=float, default=GRADCHECK_TOL)

    p = sub.add_parser('fit', parents=[common], help='fit pose and scales to target joints')
    p.add_argument('--target', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--max-iters', type=int, default=200)
    p.add_argument('--restarts', type=int, default=0)
    p.add_argument('--algorithm', choices=[a.value for a in Algorithm], default=Algorithm.GAUSS_NEWTON.value)
    p.add_argument('--workers', type=int, default=1)
    group = p.add_mutually_exclusive_group()
    group.add_argument('--shared-scales', action='store_true', help='one scale vector for all frames')
    group.add_argument('--freeze-scales', action='store_true', help='fit pose only, scales fixed at 1')

    p = sub.add_parser('calibrate', parents=[common], help='rest bone lengths from annotations')
    p.add_argument('--annotations', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True)

    p = sub.add_parser('synth', parents=[common], help='write a synthetic corpus')
    p.add_argument('--n', type=int, default=100)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--noise', type=float, default=0.0, help='joint noise sigma in mm')
    p.add_argument('--margin', type=float, default=0.8)
    p.add_argument('--joints-out', type=Path)

    p = sub.add_parser('preprocess', parents=[common], help='convert a dataset into a corpus')
    p.add_argument('--dataset-dir', type=Path, required=True)
    p.add_argument('--kind', required=True, help='nyu, icvl or msra2015')
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--cube', type=float, default=300.0, help='crop cube side in mm')
    p.add_argument('--workers', type=int, default=1)

    p = sub.add_parser('train-toy', parents=[common], help='train the toy FK network')
    p.add_argument('--n', type=int, default=2000)
    p.add_argument('--noise', type=float, default=2.0)
    p.add_argument('--epochs', type=int, default=200)
    p.add_argument('--batch-size', type=int, default=32)
    p.add_argument('--lr', type=float, default=1e-3)
    p.add_argument('--momentum', type=float, default=0.9)
    p.add_argument('--out', type=Path, required=True, help='checkpoint path')
    p.add_argument('--history', type=Path, help='loss history table')

    p = sub.add_parser('eval', parents=[common], help='metrics and plot data')
    p.add_argument('--pred', type=Path, required=True)
    p.add_argument('--truth', type=Path, required=True)
    p.add_argument('--out', type=Path, required=True)
    p.add_argument('--thresholds', type=float, nargs='*', default=list(DEFAULT_THRESHOLDS_MM))
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Fill unset global flags from settings; returns the resolved view that gets printed."""
    settings = get_settings()
    args.tree = args.tree or settings.tree_config
    args.seed = settings.seed if args.seed is None else args.seed
    args.log_level = (args.log_level or settings.log_level).upper()
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    resolved['log_file'] = settings.log_file
    return resolved


def _mode(args: argparse.Namespace) -> ScaleMode:
    return ScaleMode(args.mode) if args.mode else DEFAULT_MODE


def cmd_fk(args: argparse.Namespace, tree: KinematicTree) -> int:
    theta, s = read_params(args.params)
    if args.mode and s.mode is not ScaleMode(args.mode):
        raise ValidationError(f'{args.params} holds {s.mode.value} scales but --mode is {args.mode}', 'cli')
    text = format_joints([forward(theta, s, tree).joints])
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_gradcheck(args: argparse.Namespace, tree: KinematicTree) -> int:
    if args.n < 1:
        raise ValidationError('--n must be at least 1', 'cli')
    modes = [ScaleMode(args.mode)] if args.mode else list(ScaleMode)
    worst_overall = 0.0
    for mode in modes:
        rng = np.random.default_rng(args.seed)
        thetas = sample_poses(rng, args.n, tree, 0.8)
        scales = rng.uniform(0.8, 1.25, size=(args.n, mode.n_params(tree.n_bones)))
        _, jac_theta, jac_s = jacobians_batch(thetas, scales, mode, tree)
        worst = 0.0
        for i in range(args.n):
            s = ScaleVector(mode=mode, values=scales[i])
            fd_theta, fd_s = fd_jacobian(PoseVector(theta=thetas[i]), s, tree)
            worst = max(worst, max_relative_error(jac_theta[i], fd_theta), max_relative_error(jac_s[i], fd_s))
        print(f'{mode.value}\t{worst:.3e}')
        worst_overall = max(worst_overall, worst)
    return 0 if worst_overall <= args.tol else 2


def cmd_fit(args: argparse.Namespace, tree: KinematicTree) -> int:
    targets = read_joints(args.target)
    cfg = FitConfig(mode=_mode(args), max_iters=args.max_iters, restarts=args.restarts,
                    algorithm=Algorithm(args.algorithm), seed=args.seed)
    if args.shared_scales:
        s, thetas = fit_scales_over_set(targets, tree, cfg)
        text = format_block('scales', s.values, s.mode.value)
        text += ''.join(format_block('pose', th.theta) for th in thetas)
        write_text(args.out, text)
        return 0

    reports = fit_batch(targets, tree, cfg, freeze_scales=args.freeze_scales, workers=args.workers)
    text = ''
    for i, report in enumerate(reports):
        joints = forward(report.theta_hat, report.s_hat, tree).joints
        text += f'# frame {i}\n' + format_fit_report(report, joints)
        logger.info('Frame %d: cost %.6g after %d iterations (converged=%s)', i, report.final_cost,
                    report.iterations, report.converged)
    write_text(args.out, text)
    return 0


def cmd_calibrate(args: argparse.Namespace, tree: KinematicTree) -> int:
    calibrated = calibrate_rest_lengths(read_joints(args.annotations), tree)
    write_text(args.out, dump_tree(calibrated))
    return 0


def cmd_synth(args: argparse.Namespace, tree: KinematicTree) -> int:
    spec = SynthSpec(n_samples=args.n, seed=args.seed, mode=_mode(args), margin=args.margin,
                     noise_sigma_mm=args.noise)
    samples = generate(spec, tree)
    count = write_corpus(args.out, to_corpus_samples(samples, CropSpec()), CropSpec())
    if args.joints_out:
        write_text(args.joints_out, format_joints([s.joints for s in samples]))
    print(f'samples: {count}')
    return 0


def cmd_preprocess(args: argparse.Namespace, tree: KinematicTree) -> int:
    summary = build_corpus(args.dataset_dir, args.kind, args.out, CropSpec(cube_side_mm=args.cube),
                           workers=args.workers)
    sys.stdout.write(summary.as_text())
    return 0


def cmd_train_toy(args: argparse.Namespace, tree: KinematicTree) -> int:
    mode = _mode(args)
    samples = generate(SynthSpec(n_samples=args.n, seed=args.seed, mode=mode, noise_sigma_mm=args.noise), tree)
    cfg = TrainConfig(lr=args.lr, momentum=args.momentum, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed)
    net, history = train(samples, tree, mode, cfg)
    save_checkpoint(net, args.out)
    if args.history:
        write_loss_history(history, args.history)
    if history:
        print(f'loss: {history[0]:.6f} -> {history[-1]:.6f}')
    return 0


def cmd_eval(args: argparse.Namespace, tree: KinematicTree) -> int:
    report = evaluate(read_joints(args.pred), read_joints(args.truth), args.thresholds)
    emit_curves(report, args.out)
    print(f'mean_joint_error_mm: {report.mean_joint_error_mm:.6f}')
    return 0


COMMANDS = {
    'fk': cmd_fk,
    'gradcheck': cmd_gradcheck,
    'fit': cmd_fit,
    'calibrate': cmd_calibrate,
    'synth': cmd_synth,
    'preprocess': cmd_preprocess,
    'train-toy': cmd_train_toy,
    'eval': cmd_eval,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, print the resolved config, dispatch; returns the exit code.

    Failures are reported once, through the stderr log handler.
    """
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        resolved = resolve_config(args)
        setup_logging(args.log_level, resolved['log_file'])
        print(json.dumps(resolved, sort_keys=True))
        sys.stdout.flush()
        tree = load_tree_file(args.tree)
        return COMMANDS[args.command](args, tree)
    except SystemExit as e:
        return int(e.code or 0)
    except (ValidationError, PydanticValidationError) as e:
        logger.error('%s', e)
        return 1
    except HandFKError as e:
        logger.error('%s', e)
        return 2
    except Exception:
        logger.exception('[cli] unexpected failure')
        return 2


def main():
    sys.exit(run())


if __name__ == '__main__':
    main()
