"""Second regime search: smaller batches (more steps/epoch), augmentation."""
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


def run(name, augment, pad, batch, pre_epochs, lr, width, seeds=5):
    pipe = digits_pipeline(augment, pad)
    spec = aq.plain4_spec(num_classes=10, in_channels=1, policy=aq.PrecisionPolicy.default(2))
    t0 = time.time()
    e1_wins, fb, fa = 0, [], []
    for seed in range(seeds):
        pcfg = TrainConfig(epochs=pre_epochs, batch_size=64,
                           optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9}, seed=seed)
        ck, _ = pretrain(spec, pipe, pcfg)
        fcfg = TrainConfig(method="baseline", bitwidth=2, epochs=10, batch_size=batch,
                           optimizer={"kind": "adam", "lr": lr}, seed=seed)
        _, br = finetune(ck, "baseline", pipe, fcfg, spec=spec)
        _, ar = finetune(ck, "auxi", pipe, fcfg,
                         aux_spec=aq.AuxiliarySpec.uniform(4, width=width), spec=spec)
        bt = [r.top1 for r in br if r.split == "test"]
        at = [r.top1 for r in ar if r.split == "test"]
        e1_wins += at[0] > bt[0]
        fb.append(bt[-1])
        fa.append(at[-1])
        print(f"  {name} s{seed}: e1 b={bt[0]:.3f} a={at[0]:.3f} | fin b={bt[-1]:.3f} a={at[-1]:.3f}", flush=True)
    print(f"{name}: e1 wins {e1_wins}/{seeds}, mean fin b={np.mean(fb):.4f} a={np.mean(fa):.4f} "
          f"({time.time()-t0:.0f}s)", flush=True)


run("E b8 none pre3 lr1e-3 w64", "none", 1, 8, 3, 1e-3, 64)
run("F b16 cropflip1 pre3 lr1e-3 w64", "crop_flip", 1, 16, 3, 1e-3, 64)
run("G b8 cropflip1 pre3 lr1e-3 w64", "crop_flip", 1, 8, 3, 1e-3, 64)
run("H b16 none pre1 lr2e-3 w64", "none", 1, 16, 1, 2e-3, 64)
