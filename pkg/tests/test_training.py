import numpy as np
import pytest

from dualcorenet import CrfConfig, Tensor, make_rng, no_grad
from dualcorenet.errors import ConfigError, FormatError, ShapeError, TrainingError
from dualcorenet.layers import NetworkParams
from dualcorenet.model import fused_forward, init_network, network_config
from dualcorenet.pipeline import train_model
from dualcorenet.training import (AdamState, Phase, TrainConfig, adam_step, build_plan, checkpoint_load,
                                  checkpoint_save, make_batch, run_phase)


def scalar_params(value=1.0):
    return NetworkParams({"p": Tensor(np.array([value]), requires_grad=True)})


class TestAdam:
    def test_first_step_is_lr(self, f64):
        params = scalar_params()
        params["p"].grad = np.array([1.0])
        adam_step(params, AdamState.for_params(params))
        assert params["p"].data[0] == pytest.approx(1.0 - 1e-3, rel=1e-6)

    def test_zero_gradient(self):
        params = scalar_params()
        params["p"].grad = np.zeros(1)
        state = AdamState.for_params(params)
        adam_step(params, state)
        assert params["p"].data[0] == 1.0 and state.step == 1

    def test_quadratic(self, f64):
        params = scalar_params()
        state = AdamState.for_params(params, lr=0.1)
        for _ in range(200):
            params.zero_grad()
            (params["p"] * params["p"]).sum().backward()
            adam_step(params, state)
        assert abs(params["p"].data[0]) < 0.05

    def test_frozen_untouched(self, desk):
        params = init_network(desk, make_rng(0))
        for p in params.values():
            p.grad = np.ones_like(p.data)
        before = params.clone()
        state = AdamState.for_params(params)
        trainable = [k for k in params if k.startswith("lpl.")]
        adam_step(params, state, trainable)
        for k in params:
            same = np.array_equal(params[k].data, before[k].data)
            assert same != k.startswith("lpl."), k
            if not k.startswith("lpl."):
                assert not state.m[k].any()

    def test_moment_shapes(self, desk):
        params = init_network(desk, make_rng(0))
        state = AdamState.for_params(params)
        assert all(state.m[k].shape == state.v[k].shape == p.shape for k, p in params.items())

    def test_nan_gradient_named(self):
        params = scalar_params()
        params["p"].grad = np.array([np.nan])
        with pytest.raises(TrainingError, match="p"):
            adam_step(params, AdamState.for_params(params))
        assert params["p"].data[0] == 1.0


class TestPlan:
    def test_default_order(self):
        assert [p.name for p in build_plan(TrainConfig())] == ["lpl", "cgl_seg", "cgl_cls", "joint"]

    def test_zero_epoch_phases_dropped(self):
        assert [p.name for p in build_plan(TrainConfig(epochs_lpl=0, epochs_joint=0))] == ["cgl_seg", "cgl_cls"]

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(seg_lambda=1.2)
        with pytest.raises(ConfigError):
            TrainConfig(batch_size=0)
        with pytest.raises(ConfigError):
            TrainConfig(lr=0)


class TestRunPhase:
    def test_steps_and_history(self, desk, rois):
        params = init_network(desk, make_rng(0))
        state = AdamState.for_params(params)
        phase = Phase("lpl", 3, 1e-3, "lpl", ("lpl.",))
        seen = []
        history = run_phase(phase, 0, rois[:8], params, state, desk, CrfConfig(), TrainConfig(batch_size=4),
                            on_epoch_end=lambda rec, nxt: seen.append(nxt))
        assert state.step == 3 * 2
        assert [r["epoch"] for r in history] == [0, 1, 2] and seen == [1, 2, 3]
        assert all(np.isfinite(r["loss"]) and 0 <= r["metric"] <= 1 for r in history)

    @pytest.mark.parametrize("phase", [Phase("lpl", 1, 1e-3, "lpl", ("lpl.",)),
                                       Phase("cgl_seg", 1, 3e-3, "seg", ("cgl_unet.",))])
    def test_phase_isolation(self, desk, rois, phase):
        params = init_network(desk, make_rng(1))
        before = params.clone()
        # two steps: the zero-initialised mask output blocks upstream gradients on the first
        run_phase(phase, 0, rois[:4], params, AdamState.for_params(params), desk, CrfConfig(), TrainConfig(batch_size=2))
        for k in params:
            assert np.array_equal(params[k].data, before[k].data) != k.startswith(phase.trainable), k

    def test_empty(self, desk):
        params = init_network(desk, make_rng(0))
        with pytest.raises(TrainingError):
            run_phase(Phase("lpl", 1, 1e-3, "lpl", ("lpl.",)), 0, [], params, AdamState.for_params(params), desk,
                      CrfConfig(), TrainConfig())

    def test_unknown_prefix(self, desk, rois):
        params = init_network(desk, make_rng(0))
        with pytest.raises(ConfigError):
            run_phase(Phase("x", 1, 1e-3, "lpl", ("nope.",)), 0, rois[:2], params, AdamState.for_params(params),
                      desk, CrfConfig(), TrainConfig())

    def test_diverged_loss_aborts(self, desk, rois):
        params = init_network(desk, make_rng(0))
        params["lpl.head.weight"].data[...] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            run_phase(Phase("lpl", 1, 1e-3, "lpl", ("lpl.",)), 0, rois[:2], params, AdamState.for_params(params),
                      desk, CrfConfig(), TrainConfig())


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path, desk, rois):
        params = init_network(desk, make_rng(2))
        state = AdamState.for_params(params)
        for p in params.values():
            p.grad = np.full_like(p.data, 0.25)
        adam_step(params, state)
        checkpoint_save(tmp_path / "a.ckpt", params, state, 2, 5)

        other = init_network(desk, make_rng(99))
        other_state = AdamState.for_params(other)
        assert checkpoint_load(tmp_path / "a.ckpt", other, other_state) == (2, 5)
        assert other_state.step == 1
        for k in params:
            assert np.array_equal(params[k].data, other[k].data)
            assert np.array_equal(state.m[k], other_state.m[k]) and np.array_equal(state.v[k], other_state.v[k])
        b = make_batch(rois[:3], desk)
        with no_grad():
            x = fused_forward(b["context"], b["bbox"], params, desk, CrfConfig())
            y = fused_forward(b["context"], b["bbox"], other, desk, CrfConfig())
        assert all(np.array_equal(u.data, v.data) for u, v in zip(x, y))

    def test_mismatch_lists_tensors(self, tmp_path, desk):
        checkpoint_save(tmp_path / "a.ckpt", init_network(desk, make_rng(0)))
        wider = network_config("desk", dense_units=64)
        with pytest.raises(ShapeError) as err:
            checkpoint_load(tmp_path / "a.ckpt", init_network(wider, make_rng(0)))
        assert "lpl.fc.weight" in str(err.value)

    def test_corrupt_magic(self, tmp_path, desk):
        (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + bytes(32))
        with pytest.raises(FormatError):
            checkpoint_load(tmp_path / "bad.ckpt", init_network(desk, make_rng(0)))


TINY = dict(batch_size=2, epochs_lpl=1, epochs_cgl_seg=2, epochs_cgl_cls=1, epochs_joint=1)


class TestTrainModel:
    def test_history_and_snapshot(self, desk, rois, tmp_path):
        result = train_model(rois[:4], desk, CrfConfig(), TrainConfig(**TINY), out_dir=tmp_path)
        assert [(r["phase"], r["epoch"]) for r in result.history] == [
            ("lpl", 0), ("cgl_seg", 0), ("cgl_seg", 1), ("cgl_cls", 0), ("joint", 0)]
        assert len((tmp_path / "history.tsv").read_text().splitlines()) == 6
        for name in ("last", "best", "final", "lpl", "cgl_seg", "cgl_cls", "joint"):
            assert (tmp_path / f"{name}.ckpt").is_file()
        assert result.path_params is not None

    def test_resume_matches_straight_run(self, desk, rois, tmp_path):
        tcfg = TrainConfig(**TINY)
        straight = train_model(rois[:4], desk, CrfConfig(), tcfg, out_dir=tmp_path / "a")

        class Stop(Exception):
            pass

        def stop_after(n):
            count = [0]

            def cb(_):
                count[0] += 1
                if count[0] == n:
                    raise Stop
            return cb

        with pytest.raises(Stop):
            train_model(rois[:4], desk, CrfConfig(), tcfg, out_dir=tmp_path / "b", on_epoch_end=stop_after(2))
        resumed = train_model(rois[:4], desk, CrfConfig(), tcfg, out_dir=tmp_path / "b", resume=True)
        for k in straight.params:
            assert np.array_equal(straight.params[k].data, resumed.params[k].data), k
        assert resumed.history == straight.history
        assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
