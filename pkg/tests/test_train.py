import dataclasses
import io

import numpy as np
import pytest

from faew import train as train_mod
from faew.data import GenSpec, benchmark
from faew.encoder import EncoderConfig
from faew.errors import ConfigError, DataError, TrainingDiverged
from faew.msafa import ConcatFusion, FlowFusion
from faew.tensor import Tensor
from faew.train import (ABLATION_ROWS, SPECTRAL_ROWS, TrainRunConfig, ablate, ablation_configs,
                        ablation_table, load_model, model_config_from_text, model_config_text, predict,
                        save_model, train)

SMALL_GEN = GenSpec(image_size=16, buildings_min=1, buildings_max=3, size_min=3, size_max=6, shift_range=1)
SMALL_ENC = EncoderConfig(image_size=16, patch=4, dim=8, blocks="LG", window=2, heads=2)


@pytest.fixture(scope="module")
def tiny_data():
    return benchmark(seed=3, n_train=8, n_val=4, spec=SMALL_GEN)


def quick(**kw):
    base = dict(steps=4, batch_size=2, lr=1e-3, warmup=0, schedule="constant", clip_norm=0.0,
                val_every=2, eval_batch=4, seed=0)
    return TrainRunConfig(**{**base, **kw})


def weights(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}


class TestTrainLoop:
    def test_lr_zero_freezes_weights(self, tiny_data):
        tr, _ = tiny_data
        start = train(quick(steps=0), tr, None, SMALL_ENC).model
        after = train(quick(lr=0.0, steps=3), tr, None, SMALL_ENC).model
        a, b = weights(start), weights(after)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_loss_falls_on_a_fixed_batch(self, tiny_data):
        tr, _ = tiny_data
        fixed = tr[:2]
        cfg = quick(steps=50, flip=False, photometric=False, temporal_swap=False, lr=2e-3)
        res = train(cfg, tr, None, SMALL_ENC, batch_hook=lambda step, batch: fixed)
        assert len(res.losses) == 50
        assert np.mean(res.losses[-5:]) < 0.5 * res.losses[0]

    def test_bit_deterministic_per_seed(self, tiny_data):
        tr, va = tiny_data
        a = train(quick(), tr, va, SMALL_ENC)
        b = train(quick(), tr, va, SMALL_ENC)
        assert a.losses == b.losses
        wa, wb = weights(a.model), weights(b.model)
        assert all(np.array_equal(wa[k], wb[k]) for k in wa)
        c = train(quick(seed=1), tr, va, SMALL_ENC)
        assert c.losses != a.losses

    def test_validation_schedule_and_trace(self, tiny_data):
        tr, va = tiny_data
        trace = io.StringIO()
        res = train(quick(steps=5), tr, va, SMALL_ENC, trace=trace)
        assert [s for s, _ in res.validations] == [2, 4, 5]
        lines = trace.getvalue().splitlines()
        assert len(lines) == 5 and len(lines[1].split("\t")) == 6 and len(lines[0].split("\t")) == 2

    def test_zero_steps_evaluates_once(self, tiny_data):
        tr, va = tiny_data
        res = train(quick(steps=0), tr, va, SMALL_ENC)
        assert res.losses == [] and [s for s, _ in res.validations] == [0]

    def test_empty_training_set(self):
        with pytest.raises(DataError):
            train(quick(), [], None, SMALL_ENC)

    @pytest.mark.parametrize("kw", [dict(steps=-1), dict(batch_size=0), dict(lr=-1.0), dict(schedule="step")])
    def test_invalid_config(self, kw, tiny_data):
        with pytest.raises(ConfigError):
            train(quick(**kw), tiny_data[0], None, SMALL_ENC)

    def test_non_finite_loss_reports_step(self, tiny_data, monkeypatch):
        real = train_mod.loss_ce
        calls = {"n": 0}

        def poisoned(cmap, mask):
            calls["n"] += 1
            out = real(cmap, mask)
            return out if calls["n"] < 3 else Tensor(np.array(np.nan))

        monkeypatch.setattr(train_mod, "loss_ce", poisoned)
        with pytest.raises(TrainingDiverged) as err:
            train(quick(steps=5), tiny_data[0], None, SMALL_ENC)
        assert err.value.step == 3


class TestCheckpointing:
    def test_config_text_round_trip(self):
        cfg = quick(msafa=False, spectral_mode="imag").model_config(SMALL_ENC)
        assert model_config_from_text(model_config_text(cfg)) == cfg

    def test_saved_model_predicts_identically(self, tiny_data, tmp_path):
        tr, va = tiny_data
        res = train(quick(steps=2), tr, None, SMALL_ENC, checkpoint_path=tmp_path / "m.faew")
        loaded = load_model(tmp_path / "m.faew")
        assert loaded.cfg == res.model.cfg
        for a, b in zip(predict(res.model, va), predict(loaded, va)):
            assert np.array_equal(a, b)
        save_model(loaded, tmp_path / "again.faew")
        assert (tmp_path / "m.faew").read_bytes() == (tmp_path / "again.faew").read_bytes()


class TestAblation:
    def test_module_rows_and_topology(self):
        configs = ablation_configs(quick(), "modules")
        assert [name for name, _ in configs] == [r[0] for r in ABLATION_ROWS]
        from faew.head import ChangeDetector
        kinds = []
        for _, cfg in configs:
            model = ChangeDetector(cfg.model_config(SMALL_ENC), np.random.default_rng(0))
            kinds.append((model.encoder.dafa is not None, type(model.fuse)))
        assert kinds == [(False, ConcatFusion), (True, ConcatFusion), (False, FlowFusion), (True, FlowFusion)]

    def test_spectral_rows(self):
        configs = ablation_configs(quick(), "spectral")
        assert [cfg.spectral_mode for _, cfg in configs] == list(SPECTRAL_ROWS)
        assert all(cfg.dafa and cfg.msafa for _, cfg in configs)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            ablation_configs(quick(), "layers")

    def test_bookkeeping(self, tiny_data):
        tr, va = tiny_data
        logged = []
        configs = ablation_configs(quick(steps=1), "modules")[:2]
        rows = ablate(configs, tr, va, seeds=(0, 1), encoder=SMALL_ENC, log=logged.append)
        assert [r.name for r in rows] == ["baseline", "+DAFA"]
        assert all(len(r.reports) == 2 for r in rows)
        assert len(logged) == 4 and logged[0].startswith("baseline\tseed=0\t")
        table = ablation_table(rows).splitlines()
        assert table[0] == "row\tRc\tF1\tIoU" and len(table) == 3
        f1 = np.mean([rep.f1 for rep in rows[1].reports])
        assert table[2].split("\t")[2] == f"{f1:.2f}"

    def test_dataclass_replace_keeps_base(self):
        base = quick(lr=5e-4)
        assert all(cfg.lr == 5e-4 for _, cfg in ablation_configs(base))
        assert dataclasses.asdict(base)["dafa"] is True
