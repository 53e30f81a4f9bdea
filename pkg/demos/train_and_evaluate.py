"""Generate a small synthetic dataset, train briefly, evaluate on the test slides.

Run with ``python demos/train_and_evaluate.py``; takes a few seconds.
"""

from dataclasses import replace

from lorentz_st import SynthConfig, TrainConfig, evaluate_split, generate_synthetic, prepare, train

ds = generate_synthetic(SynthConfig(slides=4, spots_per_slide=200))
cfg = TrainConfig(epochs=8, n_genes=100, gene_hidden=128, decoder_hidden=128)
data = prepare(ds, cfg)
print("split:", data.splits)


def show(r):
    print(f"epoch {r['epoch']:2d} loss {r['loss']:8.3f} (pred {r['pred']:8.3f} hca {r['hca']:.3f} "
          f"hea {r['hea']:.3f}) val PCC@50 {r['val_pcc@50']:.4f}")


for arm, flags in (("full", {}), ("no alignment", {"no_hea": True, "no_hca": True})):
    arm_cfg = replace(cfg, **flags)
    result = train(data, arm_cfg, on_epoch=show if not flags else None)
    rep = evaluate_split(result.params, data, "test", arm_cfg)
    print(f"{arm:>13}: best epoch {result.best_epoch}, test PCC@10 {rep.pcc_at[10]:.4f} "
          f"PCC@50 {rep.pcc_at[50]:.4f} MSE {rep.mse:.4f}")
