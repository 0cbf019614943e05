"""Effect of the class-level pushing/pulling terms on the embedding space.

Trains the same single-stage model twice on the default world, once with
the class-distribution terms enabled (beta1 = beta2 = 0.01) and once with
them zeroed, then reports

  - the minimum pairwise whitened distance between class prototypes
    (larger = classes better separated), and
  - the per-class spread of matched-proposal embeddings around their
    prototype, against the prior sigma_p (the pulling term pins it there
    instead of letting classes collapse to points).

    python3 demos/embedding_separation.py [seed]

Takes under a minute.
"""

import sys

import numpy as np

from ciltrack import (
    ContrastiveConfig,
    NoiseConfig,
    TrainingConfig,
    WorldConfig,
    corrupt_detections,
    generate_world,
)
from ciltrack import continual, losses, model
from ciltrack.losses import ClassPrototypes, MemoryQueue


def train(seed, ct_cfg):
    world = WorldConfig(seed=seed)
    ds = corrupt_detections(
        generate_world(world), NoiseConfig(), world.seed + continual.NOISE_SEED_OFFSET
    )
    cfg = TrainingConfig(seed=seed)
    classes = set(range(world.n_classes))
    params = model.init_params(
        world.feature_dim,
        len(classes),
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        seed=cfg.seed,
    )
    state = continual.TrainedState(
        params=params,
        class_order=sorted(classes),
        protos=ClassPrototypes(),
        queue=MemoryQueue(),
    )
    return (
        continual.train_model(state, ds, classes, cfg, ct_cfg, True, seed=seed),
        ds,
    )


def min_pairwise_push(protos):
    cs = protos.classes()
    return min(
        losses.push_distance(
            protos.mu[a], protos.mu[b], protos.sigma[a], protos.sigma[b]
        )
        for i, a in enumerate(cs)
        for b in cs[i + 1 :]
    )


def class_spreads(state, ds):
    embeds = {}
    for _, frames in ds.sequences:
        for frame in frames:
            if not frame.proposals:
                continue
            cache = model.forward_batch(
                state.params, np.stack([p.feature for p in frame.proposals])
            )
            matched = losses.match_proposals(frame.proposals, frame.annotations)
            for i, m in enumerate(matched):
                if m is not None:
                    embeds.setdefault(
                        frame.annotations[m].class_id, []
                    ).append(cache.embed[i])
    return {
        c: float(
            np.sqrt(((np.stack(v) - state.protos.mu[c]) ** 2).mean(axis=0)).mean()
        )
        for c, v in embeds.items()
        if state.protos.initialized(c)
    }


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
    ct_on = ContrastiveConfig()
    ct_off = ContrastiveConfig(beta1=0.0, beta2=0.0)

    print("training with class-distribution terms on ...")
    state_on, ds = train(seed, ct_on)
    print("training with class-distribution terms off ...")
    state_off, _ = train(seed, ct_off)

    d_on = min_pairwise_push(state_on.protos)
    d_off = min_pairwise_push(state_off.protos)
    print(f"\nmin pairwise prototype distance: on={d_on:.2f} off={d_off:.2f} "
          f"(ratio {d_on / d_off:.2f}, hinge margin {ct_on.delta_push})")

    spreads = class_spreads(state_on, ds)
    print(f"per-class spread vs prior sigma_p={ct_on.sigma_p}:")
    for c in sorted(spreads):
        print(f"  class {c}: {spreads[c]:.4f}")


if __name__ == "__main__":
    main()
