import dataclasses
import json
import math

import numpy as np
import pytest

from scenes import tiny_config, tiny_scene
from gs4c import codec
from gs4c.model import Stage, load_ply
from gs4c.pipeline import (
    ConfigurationError,
    PipelineConfig,
    PipelineError,
    PipelineSchedule,
    config_from_dict,
    decode_model,
    load_config,
    eval_subset,
    mean_psnr,
    preset,
    run,
)


@pytest.fixture(scope="module")
def scene():
    return tiny_scene(seed=3)


@pytest.fixture(scope="module")
def result(scene):
    _, pretrained, frames = scene
    return run(pretrained, frames, tiny_config(seed=7))


def test_default_milestones():
    assert PipelineSchedule().milestones() == [
        ("sample", 0), ("prune", 1000), ("merge_1", 2000), ("merge_2", 3000),
        ("mlp", 4000), ("svq3d", 9000), ("svq4d", 10000)]


def test_scaled_schedule_keeps_order():
    sched = PipelineSchedule().scaled(0.1)
    assert [it for _, it in sched.milestones()] == [0, 100, 200, 300, 400, 900, 1000]
    assert sched.total_iters == 1100


@pytest.mark.parametrize("bad", [
    dict(mlp_start=3500),
    dict(t_gs=-1, mlp_start=2999),
    dict(svq3d_start=10500),
    dict(total_iters=9999),
])
def test_inconsistent_schedule_is_configuration_error(bad):
    with pytest.raises(ConfigurationError):
        PipelineSchedule(**bad).validate()


def test_presets_differ_only_where_intended():
    l, m = preset("L"), preset("M")
    assert (l.selection.tau_gs, m.selection.tau_gs) == (0.4, 0.2)
    assert dataclasses.replace(m, selection=l.selection) == l
    assert preset("t").schedule.milestones()[-3:] == [("mlp", 6000), ("svq3d", 9000), ("svq4d", 10000)]
    with pytest.raises(ConfigurationError):
        preset("XL")


def test_config_overlay(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 4\n[selection]\ntau_gs = 0.3\n[schedule]\nmerge_rounds = 1\nmlp_start = 3000\n")
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.selection.tau_gs == 0.3
    assert cfg.merge.rounds == 1 and cfg.selection.quantile_p == PipelineConfig().selection.quantile_p


@pytest.mark.parametrize("d,match", [
    ({"selection": {"tau": 0.1}}, "tau"),
    ({"colour": 1}, "colour"),
    ({"learning_rates": {"nope": 1.0}}, "nope"),
    ({"loss_kind": "huber"}, "loss_kind"),
    ({"schedule": {"t_gs": 5}}, "mlp_start"),
])
def test_bad_config_is_configuration_error(d, match):
    with pytest.raises(ConfigurationError, match=match):
        config_from_dict(d)


def test_unparseable_config_file(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigurationError, match="cannot parse"):
        load_config(tmp_path / "c.json")


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------

def test_reports_follow_milestones(result):
    cfg = tiny_config(seed=7)
    names = [(r.milestone, r.iteration) for r in result.reports]
    assert names == cfg.schedule.milestones() + [("pack", cfg.schedule.total_iters)]


def test_sampled_count_and_count_trace(result, scene):
    n = len(scene[1])
    counts = [r.count for r in result.reports]
    assert counts[0] == math.ceil(0.5 * n)
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert len(result.cloud) == result.parts.count == counts[-1]
    assert all(math.isfinite(r.psnr) for r in result.reports)


def test_container_decodes_to_final_model(result, scene):
    cloud, app = decode_model(codec.unpack(result.container))
    assert cloud.stage is Stage.COMPRESSED
    for name in ("mean_xyz", "mean_t", "scale_xyz", "rot_l", "opacity", "color_f", "feature"):
        np.testing.assert_array_equal(getattr(cloud, name), getattr(result.cloud, name), err_msg=name)
    frames = scene[2]
    assert mean_psnr(cloud, eval_subset(frames, 2), app) == result.final.psnr
    assert result.breakdown.total == len(result.container)


def test_input_cloud_is_untouched(scene):
    _, pretrained, frames = scene
    before = pretrained.mean_xyz.copy()
    run(pretrained, frames, tiny_config(steps=1))
    assert np.array_equal(pretrained.mean_xyz, before)


def test_same_seed_same_bytes(scene):
    _, pretrained, frames = scene
    a = run(pretrained, frames, tiny_config(seed=2)).container
    b = run(pretrained, frames, tiny_config(seed=2)).container
    assert a == b


def test_zero_length_schedule_still_packs(scene):
    _, pretrained, frames = scene
    cfg = dataclasses.replace(tiny_config(), schedule=PipelineSchedule(0, 0, 0, 1, 0, 0, 0, 0))
    out = run(pretrained, frames, cfg)
    assert {r.iteration for r in out.reports} == {0}
    assert out.parts.count == len(out.cloud)


def test_checkpoints_at_every_milestone(tmp_path, scene):
    _, pretrained, frames = scene
    run(pretrained, frames, tiny_config(steps=1), checkpoint_dir=tmp_path)
    for name in ("sample", "prune", "merge_1", "mlp", "svq3d", "svq4d", "pack"):
        assert (tmp_path / f"{name}.ply").exists(), name
    # the state saved at a milestone is the optimizer that ran up to it
    assert json.loads((tmp_path / "prune.optimizer.json").read_text())["step"] == 1


def test_stage_failure_names_stage_and_saves_state(tmp_path, scene):
    _, pretrained, frames = scene
    cfg = dataclasses.replace(tiny_config(), selection=dataclasses.replace(tiny_config().selection, tau_gs=1e-4))
    with pytest.raises(PipelineError) as err:
        run(pretrained, frames, cfg, checkpoint_dir=tmp_path)
    assert err.value.stage == "sample"
    assert err.value.checkpoint == tmp_path / "failed_sample.ply"
    assert err.value.checkpoint.exists()
