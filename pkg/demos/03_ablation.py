"""
Ablating the model's invariance components
==========================================

Each variant drops one piece: the harmonic clock features, the canonical
SPD reweighting or the FiLM conditioning. Delta% is the change in test MAE
relative to the full model (positive means the component helped).
This uses one seed and a short budget; configs/ablation_rotating.json
is the longer run.
"""

from navformer import ExperimentConfig, run_ablation

config = ExperimentConfig.from_mapping({
    "model": {"seq_len": 30, "pred_len": 10, "d_model": 16, "d_ff": 32, "n_layers": 1,
              "n_heads": 2, "patch_len": 8, "stride": 4},
    "data": {"synthetic": {"duration": 2000, "n_telemetry": 3, "segment_length": 200},
             "stride": 2, "eval_stride": 5},
    "epochs": 5, "patience": 3, "batch_size": 32, "seeds": [0],
})

rows = run_ablation(config, ["full", "no_harmonic", "no_spd", "no_film", "only_film"])
print(f"{'variant':<12} {'MAE':>8} {'RMSE':>8} {'delta':>8}")
for r in rows:
    print(f"{r['variant']:<12} {r['mae']:8.4f} {r['rmse']:8.4f} {r['delta_pct']:+7.2f}%")
