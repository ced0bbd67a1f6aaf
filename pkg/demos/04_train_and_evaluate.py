"""Train a small network on synthetic phantoms and report region
metrics on held-out cases. Takes a couple of minutes on CPU.

Run:  python demos/04_train_and_evaluate.py
"""

from corrseg.blocks import NetworkConfig
from corrseg.data import ModalitySubset, assign_splits, generate_case
from corrseg.metrics import MetricsReport
from corrseg.train import TrainConfig, evaluate, fit

SIZE = 16
N_CASES = 12

cases = [generate_case(seed, SIZE) for seed in range(N_CASES)]
splits = assign_splits(N_CASES, seed=0)
by_split = {s: [c for c, cs in zip(cases, splits) if cs == s]
            for s in ("train", "val", "test")}
print({s: len(v) for s, v in by_split.items()})

config = TrainConfig(
    network=NetworkConfig(levels=3, base_filters=4, seed=0),
    max_epochs=30, train_seed=0)

history = []


def on_epoch(epoch, net, log):
    rec = log.records[-1]
    history.append(rec.val_loss)
    if epoch % 5 == 0:
        print(f"epoch {epoch:3d}: train {rec.train_loss:.3f} "
              f"val {rec.val_loss:.3f}")
    return False


result = fit(config, by_split["train"], by_split["val"],
             epoch_callback=on_epoch)
net = result.restore_best()
print(f"best epoch {result.log.best_epoch}, "
      f"val loss {min(history):.3f}")

row = evaluate(net, by_split["test"], ModalitySubset.full())
report = MetricsReport(rows=[row],
                       meta={"training_regime": "full_modality"})
print()
print(report.to_table())
