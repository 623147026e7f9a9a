"""Two-stage protocol, optimizers, evaluation, and the comparison grid."""

import numpy as np
import pytest

import auxquant as aq
from auxquant import ops
from auxquant.auxiliary import AuxiliarySpec
from auxquant.data import Dataset, DatasetSpec, Pipeline, load_dataset
from auxquant.errors import SpecValidationError, TrainingDiverged
from auxquant.network import BlockSpec, NetworkSpec, build_network
from auxquant.optim import Adam, SGD, lr_at_epoch
from auxquant.quantize import PrecisionPolicy, quantize_weight
from auxquant.tensor import Parameter, Tensor, backward, no_grad
from auxquant.training import (TrainConfig, evaluate, finetune, metrics_to_csv,
                               pretrain, run_comparison)


def blobs_pipeline(classes=4, n_train=256, n_test=128, seed=7, augment="none"):
    spec = DatasetSpec(source={"kind": "synthetic", "shape": "blobs", "n_train": n_train,
                               "n_test": n_test, "classes": classes, "seed": seed},
                       augment=augment)
    train, test = load_dataset(spec)
    return Pipeline(train, test, spec)


def tiny_spec(policy=None, classes=4):
    return NetworkSpec(
        in_channels=1, stem_channels=4, num_classes=classes,
        blocks=(BlockSpec(4, 4, 1, "plain"), BlockSpec(4, 6, 2, "plain")),
        policy=policy or PrecisionPolicy.default(2))


SGD_CFG = {"kind": "sgd", "lr": 0.1, "momentum": 0.9}


class TestOptimizers:
    def test_adam_single_step_closed_form(self):
        p = Parameter("w", np.array(0.5), dtype=np.float64)
        opt = Adam(lr=1e-3)
        loss = ops.mul(p.master, p.master)
        grads = backward(loss)
        opt.step({"w": p}, grads)
        g = 1.0  # d(w^2)/dw at 0.5
        m_hat = (0.1 * g) / (1 - 0.9)
        v_hat = (0.001 * g * g) / (1 - 0.999)
        expected = 0.5 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert abs(float(p.data) - expected) < 1e-12

    def test_sgd_momentum_two_steps(self):
        p = Parameter("w", np.array(1.0), dtype=np.float64)
        opt = SGD(lr=0.1, momentum=0.9)
        opt.step({"w": p}, {"w": np.asarray(2.0)})   # v=2,   w = 1 - 0.2
        opt.step({"w": p}, {"w": np.asarray(1.0)})   # v=2.8, w = 0.8 - 0.28
        assert abs(float(p.data) - 0.52) < 1e-15

    def test_missing_grads_treated_as_zero(self):
        p = Parameter("w", np.array(3.0), dtype=np.float64)
        opt = SGD(lr=0.5, momentum=0.0)
        opt.step({"w": p}, {})
        assert float(p.data) == 3.0

    def test_lr_schedule(self):
        assert lr_at_epoch(1.0, (3, 6), 1) == 1.0
        assert lr_at_epoch(1.0, (3, 6), 3) == pytest.approx(0.1)
        assert lr_at_epoch(1.0, (3, 6), 5) == pytest.approx(0.1)
        assert lr_at_epoch(1.0, (3, 6), 6) == pytest.approx(0.01)


class TestTrainConfig:
    def test_validation_collects_violations(self):
        cfg = TrainConfig(method="magic", bitwidth=0, epochs=-1, batch_size=0,
                          lr_milestones=(5, 3), precision="half")
        errs = cfg.validate()
        assert len(errs) >= 5

    def test_milestones_within_epochs(self):
        assert TrainConfig(epochs=10, lr_milestones=(4, 8)).validate() == []
        assert TrainConfig(epochs=10, lr_milestones=(12,)).validate()

    def test_round_trip(self):
        cfg = TrainConfig(method="kd", bitwidth=3, kd_beta=0.5,
                          lr_milestones=(2, 4), aux_loss_weights=(0.1, 0.2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestPretrain:
    def test_separable_blobs_learned_in_two_epochs(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=2, batch_size=64, optimizer=SGD_CFG, seed=1)
        _, rows = pretrain(aq.plain4_spec(num_classes=4), pipe, cfg)
        final_train = [r for r in rows if r.split == "train"][-1]
        assert final_train.top1 >= 0.99

    def test_zero_epochs_checkpoint_equals_initialization(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=0, batch_size=64, optimizer=SGD_CFG, seed=3)
        ck, rows = pretrain(tiny_spec(), pipe, cfg)
        assert rows == []
        fresh = build_network(tiny_spec().with_policy(PrecisionPolicy.full()), seed=3)
        for name, p in fresh.parameters().items():
            assert (ck.params[name] == p.data).all()

    def test_same_seed_bit_identical_checkpoints(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=9)
        ck1, rows1 = pretrain(tiny_spec(), pipe, cfg)
        ck2, rows2 = pretrain(tiny_spec(), pipe, cfg)
        for name in ck1.params:
            assert (ck1.params[name] == ck2.params[name]).all()
        assert [r.loss for r in rows1] == [r.loss for r in rows2]

    def test_divergence_aborts_with_diagnostic(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=3, batch_size=64,
                          optimizer={"kind": "sgd", "lr": 1e30, "momentum": 0.9}, seed=0)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(TrainingDiverged) as exc:
                pretrain(tiny_spec(), pipe, cfg)
        assert exc.value.diagnostic.get("epoch") is not None


class TestFinetune:
    def test_baseline_full_policy_equals_continued_pretraining(self):
        """Ten steps of full-precision 'fine-tuning' must be bit-identical to
        ten more pretraining steps (double precision)."""
        pipe = blobs_pipeline()
        full = tiny_spec(policy=PrecisionPolicy.full())
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=4,
                          precision="float64")
        ck, _ = pretrain(full, pipe, cfg)
        cont_cfg = TrainConfig(epochs=3, batch_size=64, optimizer=SGD_CFG, seed=4,
                               precision="float64")
        ck_pre, _ = pretrain(full, pipe, cont_cfg, init=ck, resume=True, max_steps=10)
        ck_fin, _ = finetune(ck, "baseline", pipe, cont_cfg, spec=full,
                             resume=True, max_steps=10)
        for name in ck_pre.params:
            assert (ck_pre.params[name] == ck_fin.params[name]).all(), name
        for name in ck_pre.buffers:
            assert (ck_pre.buffers[name] == ck_fin.buffers[name]).all(), name

    def test_zero_lr_leaves_parameters_unchanged_but_emits_metrics(self):
        pipe = blobs_pipeline()
        spec = tiny_spec()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=5)
        ck, _ = pretrain(spec, pipe, cfg)
        fcfg = TrainConfig(method="auxi", bitwidth=2, epochs=2, batch_size=64,
                           optimizer={"kind": "sgd", "lr": 0.0, "momentum": 0.0}, seed=5)
        aux = AuxiliarySpec.uniform(2, width=8)
        fck, rows = finetune(ck, "auxi", pipe, fcfg, aux_spec=aux, spec=spec)
        for name in ck.params:
            assert (fck.params[name] == ck.params[name]).all()
        assert len(rows) == 4  # train + test rows for 2 epochs

    def test_method_auxi_requires_aux_spec(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=0)
        ck, _ = pretrain(tiny_spec(), pipe, cfg)
        with pytest.raises(SpecValidationError, match="auxi"):
            finetune(ck, "auxi", pipe, cfg, spec=tiny_spec())

    def test_structure_mismatch_rejected(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=0, batch_size=64, optimizer=SGD_CFG, seed=0)
        ck, _ = pretrain(tiny_spec(), pipe, cfg)
        other = NetworkSpec(in_channels=1, stem_channels=8, num_classes=4,
                            blocks=(BlockSpec(8, 8, 1, "plain"),),
                            policy=PrecisionPolicy.default(2))
        with pytest.raises(SpecValidationError, match="structure"):
            finetune(ck, "baseline", pipe, cfg, spec=other)

    def test_master_weight_integrity(self):
        """Masters stay full precision; the weights used in the forward are
        reproduced exactly by re-quantizing the masters."""
        pipe = blobs_pipeline()
        spec = tiny_spec()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=6)
        ck, _ = pretrain(spec, pipe, cfg)
        fcfg = TrainConfig(method="baseline", bitwidth=2, epochs=1, batch_size=64,
                           optimizer={"kind": "adam", "lr": 1e-3}, seed=6)
        fck, _ = finetune(ck, "baseline", pipe, fcfg, spec=spec)
        net = build_network(spec, seed=0)
        f_names = set(net.parameters())
        net.load_state({k: v for k, v in fck.params.items() if k in f_names},
                       {k: v for k, v in fck.buffers.items() if k in net.buffers()})
        with no_grad():
            w1 = net.bind_weights(trainable=False)
            w2 = net.bind_weights(trainable=False)
        for name in w1:
            assert (w1[name].data == w2[name].data).all()
        # interior masters are off the 4-level grid (i.e. not quantized in place)
        master = fck.params["block0.conv1.w"]
        grid = np.unique(w1["block0.conv1.w"].data)
        assert not np.isin(master, grid).all()

    def test_all_methods_run(self):
        pipe = blobs_pipeline()
        spec = tiny_spec()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=2)
        ck, _ = pretrain(spec, pipe, cfg)
        fcfg = TrainConfig(bitwidth=2, epochs=1, batch_size=64,
                           optimizer={"kind": "adam", "lr": 1e-3}, seed=2)
        for method in ("baseline", "additional_loss", "kd"):
            _, rows = finetune(ck, method, pipe, fcfg, spec=spec)
            assert len(rows) == 2
        _, rows = finetune(ck, "auxi", pipe, fcfg, spec=spec,
                           aux_spec=AuxiliarySpec.uniform(2, width=8))
        assert len(rows) == 2


class TestEvaluate:
    def test_chance_level_on_label_independent_data(self):
        # labels independent of the images: any fixed net scores ~1/classes
        gen = np.random.default_rng(0)
        n = 600
        images = gen.random((n, 1, 8, 8), dtype=np.float32)
        labels = np.arange(n, dtype=np.int64) % 10
        ds = Dataset(images=images, labels=labels, num_classes=10)
        dspec = DatasetSpec(source={"kind": "synthetic", "shape": "blobs",
                                    "n_train": 1, "n_test": 1, "classes": 2})
        pipe = Pipeline(ds, ds, dspec)
        cfg = TrainConfig(epochs=0, batch_size=64, optimizer=SGD_CFG, seed=0)
        ck, _ = pretrain(tiny_spec(classes=10), pipe, cfg)
        row = evaluate(ck, pipe)
        sigma = np.sqrt(0.1 * 0.9 / n)
        assert abs(row.top1 - 0.1) <= 3 * sigma
        assert row.top5 is not None and row.top5 >= row.top1

    def test_deterministic(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=8)
        ck, _ = pretrain(tiny_spec(), pipe, cfg)
        a, b = evaluate(ck, pipe), evaluate(ck, pipe)
        assert (a.loss, a.top1, a.top5) == (b.loss, b.top1, b.top5)

    def test_top5_absent_below_five_classes(self):
        pipe = blobs_pipeline(classes=4)
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=0)
        ck, _ = pretrain(tiny_spec(classes=4), pipe, cfg)
        assert evaluate(ck, pipe).top5 is None

    def test_empty_split_rejected(self):
        pipe = blobs_pipeline()
        pipe.test = Dataset(images=np.zeros((0, 1, 8, 8), dtype=np.float32),
                            labels=np.zeros(0, dtype=np.int64), num_classes=4)
        cfg = TrainConfig(epochs=0, batch_size=64, optimizer=SGD_CFG, seed=0)
        ck, _ = pretrain(tiny_spec(), blobs_pipeline(), cfg)
        with pytest.raises(ValueError, match="empty split"):
            evaluate(ck, pipe)


class TestMetrics:
    def test_rows_ordered_and_lr_schedule_reflected(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=5, batch_size=64, optimizer=SGD_CFG,
                          lr_milestones=(2, 4), seed=0)
        _, rows = pretrain(tiny_spec(), pipe, cfg)
        keys = [(r.epoch, r.split) for r in rows]
        assert keys == sorted(keys)
        lr_by_epoch = {r.epoch: r.lr for r in rows}
        assert lr_by_epoch[1] == pytest.approx(0.1)
        assert lr_by_epoch[2] == pytest.approx(0.01)
        assert lr_by_epoch[3] == pytest.approx(0.01)
        assert lr_by_epoch[4] == pytest.approx(0.001)
        assert lr_by_epoch[5] == pytest.approx(0.001)
        for r in rows:
            assert 0.0 <= r.top1 <= 1.0

    def test_csv_fixed_columns(self):
        pipe = blobs_pipeline()
        cfg = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG, seed=0)
        _, rows = pretrain(tiny_spec(), pipe, cfg)
        csv = metrics_to_csv(rows)
        assert csv.splitlines()[0] == "epoch,split,loss,top1,top5,lr,seconds"
        assert len(csv.splitlines()) == 3


class TestComparison:
    def test_single_method_degenerates_to_one_row_per_seed(self):
        pipe = blobs_pipeline()
        pre = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG)
        fin = TrainConfig(epochs=1, batch_size=64,
                          optimizer={"kind": "adam", "lr": 1e-3})
        result = run_comparison(tiny_spec(), pipe, ["baseline"], [0, 1], pre, fin)
        assert len(result.cells) == 2
        assert all(c.status == "ok" for c in result.cells)
        assert result.aggregates["baseline"]["n"] == 2

    def test_failed_cell_is_isolated(self):
        pipe = blobs_pipeline()
        pre = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG)
        fin = TrainConfig(epochs=1, batch_size=64,
                          optimizer={"kind": "adam", "lr": 1e-3})
        # auxi without an aux spec fails; baseline cells must survive
        result = run_comparison(tiny_spec(), pipe, ["baseline", "kd"], [0], pre, fin,
                                aux_spec=None)
        assert all(c.status == "ok" for c in result.cells)
        with pytest.raises(SpecValidationError):
            run_comparison(tiny_spec(), pipe, ["auxi"], [0], pre, fin, aux_spec=None)

    def test_diverging_cell_recorded_as_failed(self):
        pipe = blobs_pipeline()
        pre = TrainConfig(epochs=1, batch_size=64, optimizer=SGD_CFG)
        fin = TrainConfig(epochs=1, batch_size=64,
                          optimizer={"kind": "sgd", "lr": 1e30, "momentum": 0.9})
        with np.errstate(over="ignore", invalid="ignore"):
            result = run_comparison(tiny_spec(), pipe, ["baseline"], [0], pre, fin)
        assert result.cells[0].status == "failed"
        assert result.aggregates["baseline"]["n"] == 0
        assert result.final_csv().splitlines()[1].endswith("failed,,,")
