"""Catastrophic forgetting across incremental-training strategies.

Runs the two-stage general-to-specific protocol on the default 6-class
world with each method and prints how well the stage-1 model still tracks
the three stage-0 classes.  Expected picture:

  - finetune: old-class IDF1 collapses (no old-class supervision);
  - det_pl:   partial retention (boxes survive, identities do not);
  - track_pl: best retention (identity-carrying pseudo-labels plus the
              class-level embedding terms);
  - oracle:   joint-training reference.

    python3 demos/forgetting_comparison.py [seed]

Takes a couple of minutes (four full protocol runs).
"""

import sys
import time

from ciltrack import (
    ContrastiveConfig,
    Method,
    NoiseConfig,
    TrackerConfig,
    TrainingConfig,
    WorldConfig,
    plan_general_specific,
    run_protocol,
)

OLD_CLASSES = (0, 1, 2)


def old_mean(report, key):
    vals = [report.per_class[c][key] for c in OLD_CLASSES]
    vals = [v for v in vals if v is not None]
    return sum(vals) / len(vals) if vals else float("nan")


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
    world = WorldConfig(seed=seed)
    cfg = TrainingConfig(seed=seed)

    rows = []
    for method in (Method.FINETUNE, Method.DET_PL, Method.TRACK_PL, Method.ORACLE):
        t0 = time.time()
        plan = plan_general_specific(world, method)
        reports = run_protocol(
            world, NoiseConfig(), plan, cfg, ContrastiveConfig(), TrackerConfig(),
            f"/tmp/forgetting_{method.value}_{seed}",
        )
        stage1 = reports[1]
        rows.append(
            (
                method.value,
                old_mean(stage1, "IDF1"),
                old_mean(stage1, "MOTA"),
                stage1.means["mIDF1"],
            )
        )
        print(f"  {method.value}: done in {time.time() - t0:.0f}s")

    print(f"\nstage-1 results, seed {seed} (old classes = {OLD_CLASSES})")
    print(f"{'method':>10} {'old IDF1':>10} {'old MOTA':>10} {'all mIDF1':>10}")
    for name, idf1, mota, midf1 in rows:
        print(f"{name:>10} {idf1:>10.3f} {mota:>10.3f} {midf1:>10.3f}")


if __name__ == "__main__":
    main()
