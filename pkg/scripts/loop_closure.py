"""Square-loop drift experiment.

For each seed, compares the dead-reckoned odometry, the full solver, and an
oracle that is handed the true landmarks and true associations. The oracle
bounds what any association strategy can reach on the same measurements;
``--ideal`` also reports the oracle with perfect detections, which isolates
the drift of the odometry-only stretches between keyframes.

    python scripts/loop_closure.py --seeds 10
"""

import argparse
import time

import numpy as np

from varslam.association import WeightMatrix
from varslam.metrics import ate
from varslam.optimizer import SolverConfig, graph_from_dataset, optimize_poses, run_em
from varslam.simulator import NoiseConfig, TrajectoryConfig, WorldConfig, integrate_odometry, make_dataset


def scenario(seed: int, sigma_t: float, stride: int, ideal: bool = False):
    noise = NoiseConfig(odom_sigma_rot=0.01, odom_sigma_trans=0.05, sigma_t=sigma_t)
    if ideal:
        noise = NoiseConfig(odom_sigma_rot=0.01, odom_sigma_trans=0.05, sigma_t=0.0, sigma_enc=0.0,
                            sigma_v=0.0, detection_range=1e3, fov_half_angle=np.pi)
    return make_dataset(
        WorldConfig(num_landmarks=12, num_categories=3, seed=seed),
        TrajectoryConfig(shape="square_loop", num_frames=120, keyframe_stride=stride),
        noise,
    )


def oracle_ate(ds, cfg: SolverConfig) -> float:
    g = graph_from_dataset(ds)
    g.landmark_nodes = [l.as_landmark(ds.prototypes) for l in ds.landmarks]
    ids = tuple(l.id for l in g.landmark_nodes)
    for k in ds.keyframes:
        w = np.zeros((len(k.detections), len(ids)))
        for i, d in enumerate(k.detections):
            w[i, d.landmark_id] = 1.0
        g.weight_matrices[k.frame] = WeightMatrix(k.frame, w, ids)
    g, _ = optimize_poses(g, cfg)
    return ate(g.robot_nodes, ds.trajectory)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--sigma-t", type=float, default=0.1)
    ap.add_argument("--stride", type=int, default=15)
    ap.add_argument("--ideal", action="store_true", help="also run the oracle on perfect detections")
    args = ap.parse_args()

    print("seed  odometry  solved  oracle  odo/solved" + ("  ideal-oracle" if args.ideal else ""))
    ratios = []
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        ds = scenario(seed, args.sigma_t, args.stride)
        odo = ate(integrate_odometry(ds.start_pose, ds.odometry), ds.trajectory)
        sol = run_em(ds, SolverConfig())
        solved = ate(sol.trajectory, ds.trajectory)
        line = f"{seed:4d}  {odo:8.3f}  {solved:6.3f}  {oracle_ate(ds, SolverConfig()):6.3f}  {odo / solved:10.2f}"
        if args.ideal:
            ideal = scenario(seed, 0.0, args.stride, ideal=True)
            line += f"  {oracle_ate(ideal, SolverConfig(sigma_v=0.0)):12.3f}"
        print(line)
        ratios.append(odo / solved)
    print(f"seeds with odo/solved >= 5: {sum(r >= 5 for r in ratios)}/{len(ratios)} "
          f"({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
