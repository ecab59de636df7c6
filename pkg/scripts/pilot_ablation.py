"""Pilot: train fusion variants on a shared dataset and compare held-out
metrics. Usage: pilot_ablation.py <train_count> <test_count> <steps> <variants...>"""
import os
import sys
import time
from pathlib import Path

from mapupdate import evaluation, model_core, synth_world, training, update_engine

train_count = int(sys.argv[1])
test_count = int(sys.argv[2])
steps = int(sys.argv[3])
variants = sys.argv[4:] or ["bev_feature_ca", "none"]

size, rho = 160, 5.0
occ = float(os.environ.get("PILOT_OCC", "1.0"))
keep = float(os.environ.get("PILOT_KEEP", "0.25"))
scfg = synth_world.SceneConfig(
    rng_seed=500,
    raster=synth_world.RasterConfig(size, size, rho),
    lanes_per_road=(2, 3),
    road_count=(1, 2),
    change_rates=synth_world.ChangeRates(0.12, 0.15, 0.10),
    noise=synth_world.NoiseConfig(amplitude=0.03, occlusion_rate=occ,
                                  occlusion_size=(3.0, 7.0)),
    n_points=10,
)
root = Path(os.environ.get("PILOT_ROOT", "/tmp/pilot_gen"))
block = train_count // test_count
if not (root / "manifest.json").exists():
    t0 = time.time()
    synth_world.build_dataset(scfg, train_count + test_count, root,
                              split_ratio=(block, 0, 1))
    print(f"dataset build {time.time()-t0:.0f}s -> {root}")
manifest = synth_world.load_manifest(root)
print("train", len(synth_world.split_indices(manifest, "train")),
      "test", len(synth_world.split_indices(manifest, "test")))

test_pairs = [synth_world.load_sample(root, "test", i)
              for i in synth_world.split_indices(manifest, "test")]
ecfg = evaluation.EvalConfig()
icfg = update_engine.InferenceConfig(keep_threshold=keep)

for fusion in variants:
    mcfg = model_core.ModelConfig(
        image_size=size, pixels_per_meter=rho, backbone_widths=(24, 48, 96),
        channels=96, num_instances=16, points_per_instance=10, decoder_layers=4,
        attn_heads=8, affinity_dim=48, pos_frequencies=6, fusion=fusion)
    samples = training.load_train_samples(root, mcfg, "train")
    tcfg = training.TrainConfig(steps=steps, batch_size=8, seed=6, checkpoint_every=0)
    t0 = time.time()
    result = training.train(samples, mcfg, tcfg, f"/tmp/pilot_gen_run_{fusion}")
    print(f"[{fusion}] train {((time.time()-t0)/60):.1f} min, "
          f"loss {result.losses[0].total:.2f} -> {result.losses[-1].total:.4f}")
    matches, total_gt = [], 0
    counts = evaluation.ChangeCounts()
    for p in test_pairs:
        res = update_engine.infer(p.image, p.historical, result.model, icfg)
        matches.extend(evaluation.match_sample(res.pred_instances,
                                               res.prediction.confidence,
                                               p.ground_truth, ecfg))
        total_gt += len(p.ground_truth.instances)
        counts.add(evaluation.change_pr(res.changes, list(p.changes),
                                        evaluation.geoms_of(res.pred_instances),
                                        p.ground_truth))
    rap = evaluation.recall_at_precision(evaluation.construction_pr(matches, total_gt), 0.8)
    print(f"[{fusion}] held-out: R@P={rap:.3f} P_U={counts.p_u:.3f} R_U={counts.r_u:.3f} "
          f"counts={counts.tp}/{counts.fp}/{counts.fn} per-kind={counts.per_kind}")
