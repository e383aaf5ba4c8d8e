import math
from dataclasses import replace

import numpy as np
import pytest

from porf import autodiff as ad
from porf import render
from porf import trainer as T
from porf.epipolar import epipolar_loss, sample_pairs
from porf.errors import DivergenceError, InvalidArgument
from porf.harness import BenchmarkSpec, Dataset, make_benchmark


@pytest.fixture(scope="module")
def tiny():
    spec = BenchmarkSpec(n_frames=8, width=24, height=24, per_pair_count=40, seed=3)
    return make_benchmark(spec)


def cfg(**kw):
    base = dict(iterations=6, rays=48, samples=8, n_pairs=4, pretrain_steps=0, log_every=2, precision="float64")
    base.update(kw)
    return T.TrainConfig(**base)


RENDER_SEGMENTS = ("sdf", "colour", T.BACKGROUND_SEGMENT)


def render_mask(state):
    return state.params.mask(*[s for s in RENDER_SEGMENTS if s in state.params.segments])


@pytest.mark.parametrize("mode", T.MODES)
def test_iteration_zero_is_bit_exact(tiny, mode):
    state = T.init_state(cfg(mode=mode, pretrain_steps=20), tiny)
    for a, b in zip(T.current_poses(state).poses, tiny.initial.poses):
        assert a.r.tobytes() == b.r.tobytes() and a.t.tobytes() == b.t.tobytes()
    # the first step's pose tape also starts from the initial poses
    out = T.iteration_step(state, tiny, apply=False)
    k = out["frame"]
    tape = ad.Tape()
    cam = T.pose_provider(state, tape)(np.array([k]))
    assert cam.r.value[0].tobytes() == tiny.initial[k].r.tobytes()


def test_config_validation():
    for bad in (dict(mode="nope"), dict(preset="huge"), dict(iterations=-1), dict(rays=0), dict(samples=1),
                dict(lr_pose=0.0), dict(beta=-1.0), dict(lr_floor=0.0), dict(background="sky"),
                dict(near=2.0, far=1.0), dict(rays=4, ray_chunks=8), dict(precision="float16")):
        with pytest.raises(InvalidArgument):
            cfg(**bad)
    c = cfg(mode="porf")
    assert c.uses_porf and not c.uses_eg
    assert cfg(mode="baseline_eg").uses_eg and not cfg(mode="baseline_eg").uses_porf


def test_dataset_checks(tiny):
    with pytest.raises(InvalidArgument):
        T.check_dataset(Dataset(tiny.images[:-1], tiny.initial, tiny.intrinsics, tiny.matches, tiny.gt))
    with pytest.raises(InvalidArgument):
        T.check_dataset(Dataset([im[:-1] for im in tiny.images], tiny.initial, tiny.intrinsics))


def test_learning_rate_schedule(tiny):
    state = T.init_state(cfg(iterations=100), tiny)
    lr0 = T.learning_rates(state, 0)
    assert np.all(lr0[state.pose_mask] == 1e-4) and np.all(lr0[~state.pose_mask] == 5e-4)
    end = T.learning_rates(state, 100)
    np.testing.assert_allclose(end, 0.05 * lr0, rtol=1e-12)
    mid = T.learning_rates(state, 50)
    np.testing.assert_allclose(mid, 0.525 * lr0, rtol=1e-12)


def test_eg_gradient_routing_over_100_iterations(tiny):
    state = T.init_state(cfg(mode="full", iterations=100), tiny)
    rmask = render_mask(state)
    for _ in range(100):
        out = T.iteration_step(state, tiny)
        # pose tape (which carries L_EG) never touches rendering parameters
        assert np.all(out["grad_pose"][rmask] == 0.0)
        assert np.array_equal(out["grad"][rmask], out["grad_render"][rmask])
        # and the L_EG term alone has exactly zero adjoint there
        tape = ad.Tape()
        pairs = sample_pairs(tiny.matches, 4, np.random.default_rng(state.iteration))
        eg, _ = epipolar_loss(pairs, T.pose_provider(state, tape), tiny.intrinsics, 20.0, tape)
        tape.backward(eg)
        g = tape.param_grad(state.params)
        assert np.all(g[rmask] == 0.0)
        assert np.any(g[state.params.mask(state.porf.segment)] != 0.0)


def test_eg_reaches_only_the_active_pose_parametrisation(tiny):
    for mode, seg in (("full", "porf"), ("baseline_eg", "bank")):
        state = T.init_state(cfg(mode=mode), tiny)
        out = T.iteration_step(state, tiny, apply=False)
        other = state.bank.segment if seg == "porf" else state.porf.segment
        assert np.all(out["grad"][state.params.mask(other)] == 0.0)


def test_modes_without_eg_report_zero(tiny):
    state = T.init_state(cfg(mode="porf"), tiny)
    out = T.iteration_step(state, tiny)
    assert out["l_eg"] == 0.0 and out["batch"] is None


def test_training_is_deterministic(tiny):
    a = T.train(cfg(mode="full"), tiny)
    b = T.train(cfg(mode="full"), tiny)
    assert a.state.params.data.tobytes() == b.state.params.data.tobytes()
    assert [r["rot_err_deg"] for r in a.log.rows] == [r["rot_err_deg"] for r in b.log.rows]


def test_ray_chunks_change_nothing_but_rounding(tiny):
    a = T.train(cfg(mode="full", ray_chunks=1), tiny)
    b = T.train(cfg(mode="full", ray_chunks=3, threads=2), tiny)
    np.testing.assert_allclose(a.state.params.data, b.state.params.data, rtol=0, atol=1e-10)
    c = T.train(cfg(mode="full", ray_chunks=3, threads=1), tiny)
    assert b.state.params.data.tobytes() == c.state.params.data.tobytes()


def test_run_log_rows_and_csv(tiny, tmp_path):
    res = T.train(cfg(mode="baseline_eg", iterations=5), tiny)
    assert [r["iter"] for r in res.log.rows] == [0, 2, 4, 5]
    assert res.log.rows[0]["rot_err_deg"] == res.log.initial_rot
    path = tmp_path / "log.csv"
    res.log.write_csv(path, deterministic=True)
    text = path.read_text().splitlines()
    assert text[0] == ",".join(T.RUNLOG_FIELDS)
    assert all(line.endswith(",") for line in text[1:])
    back = T.RunLog.read_csv(path)
    assert back.column("l_eg").tolist() == res.log.column("l_eg").tolist()
    with pytest.raises(InvalidArgument):
        res.log.append(iter=1)


def test_iterations_to_fraction():
    log = T.RunLog(initial_rot=1.0)
    for it, rot in ((0, 1.0), (100, 0.7), (200, 0.5), (300, 0.2)):
        log.append(iter=it, rot_err_deg=rot)
    assert log.iterations_to_fraction(0.5) == 200
    assert log.iterations_to_fraction(0.1) is None
    assert T.RunLog().iterations_to_fraction() is None


def test_divergence_raises_and_checkpoints(tiny, tmp_path, monkeypatch):
    monkeypatch.setattr(render, "colour_loss", lambda rgb, target: ad.sum_(rgb * math.nan))
    path = tmp_path / "ckpt.npz"
    with pytest.raises(DivergenceError) as exc:
        T.train(cfg(iterations=40, log_every=1), tiny, checkpoint_path=str(path))
    assert exc.value.checkpoint == str(path) and path.exists()
    assert np.all(np.isfinite(ad.load_checkpoint(str(path)).data))


def test_ablation_table_and_csv(tiny, tmp_path):
    rows = T.ablate(cfg(iterations=2), tiny)
    assert [r.label for r in rows] == ["L1", "L2", "L3", "L4"]
    assert all(np.isfinite(r.final_rot) for r in rows)
    text = T.format_ablation(rows, cfg(iterations=2))
    assert text.startswith("# beta=1.0 lambda=0.1") and "baseline_eg" in text
    path = tmp_path / "ablation.csv"
    rows[1] = replace(rows[1], diverged=True)
    T.write_ablation_csv(path, rows)
    back = T.read_ablation_csv(path)
    assert back[1].diverged and math.isnan(back[1].final_rot)
    assert back[0].final_rot == rows[0].final_rot
    assert "diverged" in T.format_ablation(back)
