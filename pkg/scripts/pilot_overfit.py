"""Pilot: overfit a small model on a handful of samples and report metrics."""
import sys
import time

import numpy as np
import torch

from mapupdate import change_oracle, evaluation, model_core, synth_world, training, update_engine

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 800
n_samples = int(sys.argv[2]) if len(sys.argv) > 2 else 16
batch = int(sys.argv[3]) if len(sys.argv) > 3 else 8

size, rho = 160, 5.0
scfg = synth_world.SceneConfig(
    rng_seed=11,
    raster=synth_world.RasterConfig(size, size, rho),
    lanes_per_road=(2, 3),
    road_count=(1, 2),
    lane_width=(2.4, 4.2),
    perturb_offset=(1.8, 2.6),
    change_rates=synth_world.ChangeRates(0.12, 0.15, 0.10),
    noise=synth_world.NoiseConfig(amplitude=0.03,
        occlusion_rate=float(__import__("os").environ.get("PILOT_OCC", "1.0")),
        occlusion_size=(3.0, 7.0)),
    n_points=10,
)
mcfg = model_core.ModelConfig(
    image_size=size, pixels_per_meter=rho, backbone_widths=(24, 48, 96),
    channels=96, num_instances=16, points_per_instance=10, decoder_layers=4,
    attn_heads=8, affinity_dim=48, pos_frequencies=6)

pairs = [synth_world.build_sample(scfg, i) for i in range(n_samples)]
samples = [training.prepare_sample(p, mcfg) for p in pairs]
print("instances per scene:", [len(p.ground_truth.instances) for p in pairs])

import os
tcfg = training.TrainConfig(steps=steps, batch_size=batch, lr=float(os.environ.get("PILOT_LR", "6e-4")), checkpoint_every=0, seed=0, deep_supervision=os.environ.get("PILOT_DEEP", "1") == "1")
t0 = time.time()
result = training.train(samples, mcfg, tcfg, "/tmp/pilot_run")
print("train time %.1f min" % ((time.time() - t0) / 60))
losses = result.losses
print("loss first/last:", losses[0].total, losses[-1].total)
for name in ("l1", "direction", "aligned_cls", "change"):
    print(" ", name, getattr(losses[0], name), "->", getattr(losses[-1], name))

model = result.model
ecfg = evaluation.EvalConfig()
icfg = update_engine.InferenceConfig(keep_threshold=float(__import__("os").environ.get("PILOT_KEEP", "0.4")))
matches = []
total_gt = 0
counts = evaluation.ChangeCounts()
for p in pairs:
    res = update_engine.infer(p.image, p.historical, model, icfg)
    matches.extend(evaluation.match_sample(res.pred_instances, res.prediction.confidence,
                                           p.ground_truth, ecfg))
    total_gt += len(p.ground_truth.instances)
    counts.add(evaluation.change_pr(res.changes, list(p.changes),
                                    evaluation.geoms_of(res.pred_instances), p.ground_truth))
curve = evaluation.construction_pr(matches, total_gt)
rap = evaluation.recall_at_precision(curve, 0.8)
f1 = (2 * counts.p_u * counts.r_u / (counts.p_u + counts.r_u)
      if counts.p_u + counts.r_u else 0.0)
print(f"R@P(0.8) = {rap:.3f}  P_U = {counts.p_u:.3f}  R_U = {counts.r_u:.3f}  F1 = {f1:.3f}")
print("counts:", counts.tp, counts.fp, counts.fn, counts.per_kind)
