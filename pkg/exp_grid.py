"""Scratch experiment: find a robust regime for the directional comparison."""
import os
import tempfile
import time

import numpy as np
from sklearn.datasets import load_digits

import auxquant as aq
from auxquant.data import DatasetSpec, Pipeline, load_dataset, write_idx
from auxquant.training import TrainConfig, finetune, pretrain


def digits_pipeline(n_train=None, batch=64):
    d = load_digits()
    images = (d.images * 15).astype(np.uint8)
    labels = d.target.astype(np.uint8)
    idx = np.arange(len(labels))
    test_mask = idx % 5 == 0
    tr_img, tr_lab = images[~test_mask], labels[~test_mask]
    if n_train:
        tr_img, tr_lab = tr_img[:n_train], tr_lab[:n_train]
    tmp = tempfile.mkdtemp()
    p = {}
    for split, (im, lb) in [("train", (tr_img, tr_lab)), ("test", (images[test_mask], labels[test_mask]))]:
        ip, lp = os.path.join(tmp, f"{split}-im"), os.path.join(tmp, f"{split}-lb")
        write_idx(im, lb, ip, lp)
        p[split] = (ip, lp)
    dspec = DatasetSpec(source={"kind": "idx", "train_images": p["train"][0], "train_labels": p["train"][1],
                                "test_images": p["test"][0], "test_labels": p["test"][1]})
    tr, te = load_dataset(dspec)
    return Pipeline(tr, te, dspec)


def cell(pipe, seed, pre_epochs, fin_lr, aux_width, aux_kernel, batch, fin_epochs=10):
    spec = aq.plain4_spec(num_classes=10, in_channels=1, policy=aq.PrecisionPolicy.default(2))
    pcfg = TrainConfig(epochs=pre_epochs, batch_size=batch,
                       optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9}, seed=seed)
    ck, prows = pretrain(spec, pipe, pcfg)
    fcfg = TrainConfig(method="baseline", bitwidth=2, epochs=fin_epochs, batch_size=batch,
                       optimizer={"kind": "adam", "lr": fin_lr}, seed=seed)
    _, brows = finetune(ck, "baseline", pipe, fcfg, spec=spec)
    aux_spec = aq.AuxiliarySpec.uniform(4, width=aux_width, kernel=aux_kernel)
    _, arows = finetune(ck, "auxi", pipe, fcfg, aux_spec=aux_spec, spec=spec)
    bt = [r.top1 for r in brows if r.split == "test"]
    at = [r.top1 for r in arows if r.split == "test"]
    return bt, at


def main():
    configs = [
        ("A pre1 lr1e-3 w64k1 b64 full", dict(n_train=None, pre_epochs=1, fin_lr=1e-3, aux_width=64, aux_kernel=1, batch=64)),
        ("B pre1 lr1e-3 w64k1 b64 n450", dict(n_train=450, pre_epochs=1, fin_lr=1e-3, aux_width=64, aux_kernel=1, batch=64)),
        ("C pre3 lr3e-4 w64k1 b64 full", dict(n_train=None, pre_epochs=3, fin_lr=3e-4, aux_width=64, aux_kernel=1, batch=64)),
        ("D pre1 lr1e-3 w128k3 b32 n450", dict(n_train=450, pre_epochs=1, fin_lr=1e-3, aux_width=128, aux_kernel=3, batch=32)),
    ]
    for name, cfgd in configs:
        n_train = cfgd.pop("n_train")
        pipe = digits_pipeline(n_train=n_train, batch=cfgd["batch"])
        t0 = time.time()
        e1_wins = 0
        fin_b, fin_a = [], []
        for seed in range(3):
            bt, at = cell(pipe, seed, **cfgd)
            e1_wins += at[0] > bt[0]
            fin_b.append(bt[-1])
            fin_a.append(at[-1])
            print(f"  {name} seed{seed}: e1 b={bt[0]:.3f} a={at[0]:.3f} | fin b={bt[-1]:.3f} a={at[-1]:.3f}", flush=True)
        print(f"{name}: e1 wins {e1_wins}/3, mean fin b={np.mean(fin_b):.4f} a={np.mean(fin_a):.4f} ({time.time()-t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
