"""Third regime search: zero-init side-network classifier."""
import os
import tempfile
import time

import numpy as np
from sklearn.datasets import load_digits

import auxquant as aq
from auxquant.data import DatasetSpec, Pipeline, load_dataset, write_idx
from auxquant.training import TrainConfig, finetune, pretrain


def digits_pipeline(augment="none", pad=1):
    d = load_digits()
    images = (d.images * 15).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    idx = np.arange(len(labels))
    test_mask = idx % 5 == 0
    tmp = tempfile.mkdtemp()
    p = {}
    for split, mask in [("train", ~test_mask), ("test", test_mask)]:
        ip, lp = os.path.join(tmp, f"{split}-im"), os.path.join(tmp, f"{split}-lb")
        write_idx(images[mask], labels[mask], ip, lp)
        p[split] = (ip, lp)
    dspec = DatasetSpec(source={"kind": "idx", "train_images": p["train"][0], "train_labels": p["train"][1],
                                "test_images": p["test"][0], "test_labels": p["test"][1]},
                        augment=augment, crop_padding=pad)
    tr, te = load_dataset(dspec)
    return Pipeline(tr, te, dspec)


def run(name, augment, batch, pre_epochs, lr, width, init, seeds=5):
    pipe = digits_pipeline(augment)
    spec = aq.plain4_spec(num_classes=10, in_channels=1, policy=aq.PrecisionPolicy.default(2))
    t0 = time.time()
    e1_wins, fin_wins, fb, fa = 0, 0, [], []
    for seed in range(seeds):
        pcfg = TrainConfig(epochs=pre_epochs, batch_size=64,
                           optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9}, seed=seed)
        ck, _ = pretrain(spec, pipe, pcfg)
        fcfg = TrainConfig(method="baseline", bitwidth=2, epochs=10, batch_size=batch,
                           optimizer={"kind": "adam", "lr": lr}, seed=seed)
        _, br = finetune(ck, "baseline", pipe, fcfg, spec=spec)
        _, ar = finetune(ck, "auxi", pipe, fcfg,
                         aux_spec=aq.AuxiliarySpec.uniform(4, width=width, classifier_init=init),
                         spec=spec)
        bt = [r.top1 for r in br if r.split == "test"]
        at = [r.top1 for r in ar if r.split == "test"]
        e1_wins += at[0] > bt[0]
        fin_wins += at[-1] > bt[-1]
        fb.append(bt[-1])
        fa.append(at[-1])
        print(f"  {name} s{seed}: e1 b={bt[0]:.3f} a={at[0]:.3f} | fin b={bt[-1]:.3f} a={at[-1]:.3f}", flush=True)
    print(f"{name}: e1 {e1_wins}/{seeds} fin {fin_wins}/{seeds}, "
          f"mean fin b={np.mean(fb):.4f} a={np.mean(fa):.4f} ({time.time()-t0:.0f}s)", flush=True)


run("Z1 b64 none pre3 lr1e-3 w64 zero", "none", 64, 3, 1e-3, 64, "zero")
run("Z2 b16 none pre3 lr1e-3 w64 zero", "none", 16, 3, 1e-3, 64, "zero")
run("Z3 b16 cropflip pre3 lr1e-3 w64 zero", "crop_flip", 16, 3, 1e-3, 64, "zero")
run("Z4 b64 none pre1 lr1e-3 w64 zero", "none", 64, 1, 1e-3, 64, "zero")
