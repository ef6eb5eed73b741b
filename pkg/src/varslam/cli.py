"""``varslam`` command line: simulate, solve, eval, plot.

Exit codes: 0 success, 1 usage error, 2 runtime error (bad input files,
solver failure).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .association import AssociationError
from .fileio import (
    ParseError,
    export_trajectory,
    import_trajectory,
    read_config,
    read_dataset,
    read_solution,
    write_dataset,
    write_solution,
)
from .geometry import GeometryError
from .metrics import LengthMismatch, ate, rpe
from .optimizer import SingularNormalEquations, SolverConfig, run_em
from .simulator import generate_trajectory, generate_world, integrate_odometry, simulate

EXIT_USAGE = 1
EXIT_RUNTIME = 2
DEFAULT_SIGMA_V = 0.05

# category-indexed marker colours; unknown categories are grey
PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _float(lo: float, hi: float | None = None):
    def conv(text: str) -> float:
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid number {text!r}") from None
        if not (v >= lo and (hi is None or v < hi)):
            raise argparse.ArgumentTypeError(f"must lie in [{lo}, {hi if hi is not None else 'inf'})")
        return v

    return conv


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="varslam", description="Object-level SLAM with probabilistic data association.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config", required=True, help="JSON with optional world/trajectory/noise sections")
    s.add_argument("--out", required=True, help="dataset JSON; NAME.gt.traj and NAME.odom.traj are written beside it")
    s.add_argument("--seed", type=_seed, default=None, help="overrides world.seed from the config")

    s = sub.add_parser("solve", help="estimate trajectory and landmarks")
    s.add_argument("--dataset", required=True)
    s.add_argument("--out", required=True, help="solution JSON; the trajectory goes next to it with suffix .traj")
    s.add_argument("--assoc", choices=("exact", "factored"), default="exact")
    s.add_argument("--delta", type=_float(0.0, 1.0), default=1e-3, help="weight pruning threshold")
    s.add_argument("--em-iters", type=_positive_int, default=10)
    s.add_argument(
        "--sigma-v", type=_float(0.0), default=None,
        help=f"orientation noise; default: the dataset's recorded value, else {DEFAULT_SIGMA_V}",
    )
    s.add_argument("--no-orientation", action="store_true", help="associate and optimise on shape features only")

    s = sub.add_parser("eval", help="compare two trajectory files")
    s.add_argument("--est", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--metric", choices=("ate", "rpe"), default="ate")
    s.add_argument("--rpe-delta", type=_positive_int, default=1)

    s = sub.add_parser("plot", help="write an SVG of a solution")
    s.add_argument("--solution", required=True)
    s.add_argument("--gt", help="ground-truth trajectory file")
    s.add_argument("--out", required=True)
    return p


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    world, traj, noise = read_config(args.config)
    if args.seed is not None:
        world.seed = args.seed
    ds = simulate(
        generate_world(world),
        generate_trajectory(traj),
        noise,
        world.seed,
        stride=traj.keyframe_stride,
        world_cfg=world,
        trajectory_cfg=traj,
    )
    write_dataset(ds, args.out)
    # companions for eval/plot: ground truth and dead-reckoned odometry
    export_trajectory(ds.trajectory, sibling(args.out, ".gt.traj"))
    export_trajectory(integrate_odometry(ds.start_pose, ds.odometry), sibling(args.out, ".odom.traj"))
    print(f"landmarks: {len(ds.landmarks)}")
    print(f"keyframes: {len(ds.keyframes)}")
    print(f"detections: {ds.num_detections}")
    return 0


def sibling(path, suffix: str) -> Path:
    """``path`` with its extension replaced by ``suffix``."""
    p = Path(path)
    return p.with_name(p.stem + suffix)


def trajectory_path(solution_path) -> Path:
    return sibling(solution_path, ".traj")


def cmd_solve(args) -> int:
    ds = read_dataset(args.dataset)
    sigma_v = args.sigma_v if args.sigma_v is not None else ds.noise.sigma_v
    cfg = SolverConfig(
        max_em_iters=args.em_iters,
        delta_prune=args.delta,
        sigma_v=sigma_v,
        assoc=args.assoc,
        use_orientation=not args.no_orientation,
    )
    sol = run_em(ds, cfg)
    write_solution(sol, args.out)
    export_trajectory(sol.trajectory, trajectory_path(args.out))
    for i, c in enumerate(sol.cost_history):
        print(f"iteration {i}: cost {c:.6e}")
    print(f"landmarks: {len(sol.landmarks)}")
    return 0


def cmd_eval(args) -> int:
    est = import_trajectory(args.est)
    gt = import_trajectory(args.gt)
    if args.metric == "ate":
        value = ate(est, gt)
    else:
        value = rpe(est, gt, args.rpe_delta)
    print(f"{args.metric}: {value:.4f}")
    return 0


def render_svg(path_xy: np.ndarray, landmarks_xy: np.ndarray, categories, gt_xy: np.ndarray | None = None,
               closed: bool = False, size: int = 600) -> str:
    """Top-down SVG: estimated path, optional ground truth, landmark markers."""
    if closed and len(path_xy):
        path_xy = np.vstack([path_xy, path_xy[:1]])
    clouds = [a for a in (path_xy, landmarks_xy, gt_xy) if a is not None and len(a)]
    pts = np.vstack(clouds) if clouds else np.zeros((1, 2))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    margin = 20.0
    scale = (size - 2 * margin) / span

    def xy(p):
        # y grows downwards in SVG
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    def polyline(a, colour, extra=""):
        coords = " ".join("%.3f,%.3f" % xy(p) for p in a)
        return f'<polyline points="{coords}" fill="none" stroke="{colour}" stroke-width="2"{extra}/>'

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
    ]
    if gt_xy is not None and len(gt_xy):
        out.append(polyline(gt_xy, "#888888", ' stroke-dasharray="6,4" class="ground-truth"'))
    if len(path_xy):
        out.append(polyline(path_xy, "#000000", ' class="estimate"'))
    for p, c in zip(landmarks_xy, categories):
        colour = PALETTE[c % len(PALETTE)] if c is not None and c >= 0 else "#999999"
        x, y = xy(p)
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="5" fill="{colour}" class="landmark"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    sol = read_solution(args.solution)
    path = np.array([x.translation[:2] for x in sol.trajectory]).reshape(-1, 2)
    lms = np.array([l.position[:2] for l in sol.landmarks]).reshape(-1, 2)
    gt = None
    if args.gt:
        gt = np.array([x.translation[:2] for x in import_trajectory(args.gt)]).reshape(-1, 2)
    cats = sol.landmark_categories or [-1] * len(sol.landmarks)
    svg = render_svg(path, lms, cats, gt, closed=sol.closed_loop)
    Path(args.out).write_text(svg, encoding="utf-8")
    return 0


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "eval": cmd_eval, "plot": cmd_plot}
RUNTIME_ERRORS = (
    ParseError,
    LengthMismatch,
    GeometryError,
    AssociationError,
    SingularNormalEquations,
    ValueError,
    OSError,
)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except RUNTIME_ERRORS as exc:
        print(f"varslam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
