"""Diagnose: main vs aux gradient magnitudes, quantization shock size,
and whether steps-per-epoch drives the auxi advantage."""
import os
import tempfile

import numpy as np
from sklearn.datasets import load_digits

import auxquant as aq
from auxquant.data import DatasetSpec, Pipeline, load_dataset, write_idx
from auxquant.training import TrainConfig, evaluate, finetune, pretrain
from auxquant.auxiliary import forward_mixed, joint_loss, joint_backward, build_auxiliary
from auxquant.tensor import Tensor


def digits_pipeline(n_train=None):
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


pipe = digits_pipeline()
spec = aq.plain4_spec(num_classes=10, in_channels=1, policy=aq.PrecisionPolicy.default(2))
pcfg = TrainConfig(epochs=3, batch_size=64, optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9}, seed=0)
ck, prows = pretrain(spec, pipe, pcfg)
print("pretrain full-precision test top1:", [r.top1 for r in prows if r.split == "test"][-1])
q0 = evaluate(ck.clone() and aq.Checkpoint(network_spec=spec, params=ck.params, buffers=ck.buffers, dtype=ck.dtype), pipe)
print("quantized (2-bit) net BEFORE finetune: top1 =", q0.top1)

# gradient magnitude diagnosis at step 0
net = aq.build_network(spec, seed=0)
fnames = set(net.parameters())
net.load_state({k: v for k, v in ck.params.items() if k in fnames},
               {k: v for k, v in ck.buffers.items() if k in net.buffers()})
aux = build_auxiliary(aq.AuxiliarySpec.uniform(4, width=64), net, seed=0)
xb, yb = next(pipe.train_batches(64, np.random.default_rng(0), np.random.default_rng(0)))
w = net.bind_weights(trainable=True)
yF, yH = forward_mixed(net, aux, Tensor(xb), "train", w)
L, La = joint_loss(yF, yH, yb)
rep = joint_backward(L, La, net, aux)
print(f"L={float(L.data):.3f} L_aux={float(La.data):.3f}")
for name in ["stem.conv.w", "block0.conv1.w", "block1.conv1.w", "block2.conv1.w", "block3.conv2.w", "classifier.w", "block0.bn1.gamma"]:
    gm, ga, _ = rep.triple(name)
    print(f"  {name:22s} |g_main|={np.abs(gm).mean():.2e}  |g_aux|={np.abs(ga).mean():.2e}  ratio={np.abs(ga).mean()/max(np.abs(gm).mean(),1e-30):.1f}")

# batch-16 cells (more steps per epoch)
for bs in (16,):
    for seed in range(3):
        pcfg = TrainConfig(epochs=3, batch_size=64, optimizer={"kind": "sgd", "lr": 0.1, "momentum": 0.9}, seed=seed)
        ckk, _ = pretrain(spec, pipe, pcfg)
        fcfg = TrainConfig(method="baseline", bitwidth=2, epochs=10, batch_size=bs,
                           optimizer={"kind": "adam", "lr": 1e-3}, seed=seed)
        _, br = finetune(ckk, "baseline", pipe, fcfg, spec=spec)
        _, ar = finetune(ckk, "auxi", pipe, fcfg, aux_spec=aq.AuxiliarySpec.uniform(4, width=64), spec=spec)
        bt = [r.top1 for r in br if r.split == "test"]
        at = [r.top1 for r in ar if r.split == "test"]
        print(f"bs{bs} seed{seed}: e1 b={bt[0]:.3f} a={at[0]:.3f} | fin b={bt[-1]:.3f} a={at[-1]:.3f}", flush=True)
