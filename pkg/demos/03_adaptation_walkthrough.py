"""A miniature run of the two-stage pipeline on a 20 x 20 BEV grid.

Stage (a) pretrains the LiDAR encoder on labelled source frames, pulling it
toward the camera BEV features.  Stage (b) self-trains on mixed source /
target scenes with pseudo-labels and an adversarial instance discriminator.
The full-size experiment lives in ``cmda.experiment.headline``.

Run: python3 demos/03_adaptation_walkthrough.py
"""

# %% Small data and a small model keep this under a minute
from cmda.adapt import CMDAModel, EvalConfig, ModelConfig, TrainConfig, evaluate_model, make_state, run_selftrain, train_pretrain
from cmda.adapt import MetricsLog
from cmda.losses import LossWeights
from cmda.scene import generate_dataset, source_preset, target_preset

mcfg = ModelConfig(grid_range=(-16.0, -16.0, -2.0, 16.0, 16.0, 4.0), lidar_hidden=16, head_features=16,
                   disc_hidden=8, depth_bins=8, image_hidden=4, image_size=16)
source = generate_dataset(source_preset(0), 24, "source", image_size=16)
target = generate_dataset(target_preset(1), 16, "target", with_camera=False)
held_out = generate_dataset(target_preset(1), 12, "target", with_camera=False, stream=1, prefix="eval")
ecfg = EvalConfig()

# %% Stage (a): detection loss plus the cross-modal alignment term
model = CMDAModel(mcfg)
pre = make_state(model, TrainConfig(stage="pretrain", epochs=25, batch_size=4, lr=0.03, weights=LossWeights()))
hist = train_pretrain(pre, source)
print(f"pretrain: {pre.step} steps, loss {hist[0]['total']:.3f} -> {hist[-1]['total']:.3f}")
rep = evaluate_model(model, held_out, ecfg, "Direct Transfer")
print(f"Direct Transfer on target: BEV AP {100 * rep.bev_ap:.2f}, 3D AP {100 * rep.ap_3d:.2f}")

# AP stays low at this size; the point here is the flow of data, not the numbers.

# %% Stage (b): LiDAR-only self-training; target labels are never read
st = make_state(model, TrainConfig(stage="selftrain", rounds=2, epochs=1, lr=0.003, t_pos=0.3))
log = MetricsLog()
infos = run_selftrain(st, source, target, held_out, ecfg, log)
for row in log.rows:
    acc = row["disc_acc"]
    print(f"round {row['round']}: 3D AP {100 * row['ap_3d']:.2f}, pseudo-labels {row['pseudo_labels']}, "
          f"disc acc {'n/a' if acc is None else f'{acc:.2f}'}")
print("steps with instances for the discriminator:", sum("disc_acc" in i for i in infos), "of", len(infos))
