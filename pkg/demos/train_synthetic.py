"""Train NBoF on the synthetic cluster task and print the learning curve.

Run: python3 demos/train_synthetic.py
"""
from attnbof.data import synth_clusters
from attnbof.train import TrainConfig, train

ds = synth_clusters(D=8, N=20, classes=2, samples_per_class=200, seed=0)
print(ds.provenance)

for attention in ((), ("IA",), ("CA",)):
    cfg = TrainConfig(layers="nbof,dense(32),dropout(0.2),output(2)", codewords=16, epochs=20, batch=64,
                      folds=5, attention=attention, seed=0)
    result = train(cfg, ds, write_files=False)
    name = "+".join(attention) or "none"
    curve = " ".join(f"{row['val_acc']:.2f}" for row in result.history[:10])
    print(f"attention {name:<5} {result.model.summary():<24} held-out by epoch: {curve} ...")
    if attention:
        print(f"  final tau {result.model.taus()}")
