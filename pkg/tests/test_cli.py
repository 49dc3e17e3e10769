import json

import numpy as np
import pytest

from avatarforge.body import BodyConfiguration, save_pose_sequence
from avatarforge.cli import main
from avatarforge.field import ImplicitAvatarField
from avatarforge.renderer import load_float_map
from avatarforge.rigs import make_capsule_rig
from tests.conftest import TINY_FIELD_KWARGS


@pytest.fixture(scope="module")
def rig_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("rig") / "capsule.rig"
    make_capsule_rig(num_joints=3).save(path)
    return str(path)


@pytest.fixture(scope="module")
def ckpt_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    ImplicitAvatarField(seed=0, **TINY_FIELD_KWARGS).save(path)
    return str(path)


def test_missing_rig_is_a_usage_error(tmp_path, capsys):
    code = main(["reconstruct", "--rig", str(tmp_path / "nope.rig"),
                 "--out", str(tmp_path / "o.ckpt")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_remote_oracle_requires_endpoint(rig_file, ckpt_file, tmp_path,
                                         capsys):
    code = main(["generate", "--rig", rig_file, "--template", ckpt_file,
                 "--out", str(tmp_path / "o.ckpt"), "--oracle", "remote"])
    assert code == 2
    assert "--endpoint" in capsys.readouterr().err


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code = main(["render", "--checkpoint", str(bad),
                 "--out", str(tmp_path / "out")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_subcommand_exits_2(capsys):
    assert main(["frobnicate"]) == 2


def test_reconstruct_writes_a_loadable_checkpoint(rig_file, tmp_path, capsys):
    out = tmp_path / "template.ckpt"
    log = tmp_path / "diag.jsonl"
    code = main(["reconstruct", "--rig", rig_file, "--out", str(out),
                 "--steps", "3", "--views", "6", "--res", "12",
                 "--log", str(log)])
    assert code == 0
    assert "held-out PSNR" in capsys.readouterr().out
    ImplicitAvatarField.load(out)
    events = [json.loads(l)["event"] for l in log.read_text().splitlines()]
    assert "reconstruct_start" in events and "reconstruct_step" in events


def test_generate_prints_schedule_banner_and_saves(rig_file, ckpt_file,
                                                   tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"desk": True,
                               "coarse_body_captures": 2,
                               "coarse_head_captures": 1,
                               "fine_body_captures": 2,
                               "fine_head_captures": 1}))
    out = tmp_path / "gen" / "avatar.ckpt"
    code = main(["generate", "--rig", rig_file, "--template", ckpt_file,
                 "--out", str(out), "--config", str(cfg),
                 "--coarse-epochs", "1", "--fine-epochs", "1",
                 "--prompt", "a test subject"])
    assert code == 0
    banner = capsys.readouterr().out
    assert "generation schedule: coarse 32x32 for 1 epochs" in banner
    assert "(2 body + 1 head captures/epoch)" in banner
    assert "fine 64x64 for 1 epochs" in banner
    ImplicitAvatarField.load(out)
    assert (out.parent / "stage_coarse.ckpt").exists()
    assert (out.parent / "stage_fine.ckpt").exists()


def test_render_outputs(ckpt_file, tmp_path):
    out = tmp_path / "render"
    code = main(["render", "--checkpoint", ckpt_file, "--out", str(out),
                 "--res", "16", "--samples", "16", "--depth"])
    assert code == 0
    assert (out / "rgb.png").exists()
    assert (out / "depth.png").exists()
    assert load_float_map(out / "opacity.f32").shape == (16, 16)
    assert load_float_map(out / "depth.f32").shape == (16, 16)


def test_animate_writes_one_png_per_frame(rig_file, ckpt_file, tmp_path):
    poses = tmp_path / "walk.json"
    frames = [BodyConfiguration(pose=np.full((3, 3), 0.1 * i),
                                shape=np.zeros(2)) for i in range(3)]
    save_pose_sequence(poses, frames)
    out = tmp_path / "anim"
    code = main(["animate", "--checkpoint", ckpt_file, "--rig", rig_file,
                 "--poses", str(poses), "--out", str(out),
                 "--res", "12", "--samples", "12"])
    assert code == 0
    assert sorted(p.name for p in out.glob("*.png")) == [
        "frame_0000.png", "frame_0001.png", "frame_0002.png"]


def test_reshape_interpolates_shapes(rig_file, ckpt_file, tmp_path):
    out = tmp_path / "reshape"
    code = main(["reshape", "--checkpoint", ckpt_file, "--rig", rig_file,
                 "--beta-a", "[0,0]", "--beta-b", "[1.5,0.5]",
                 "--frames", "2", "--out", str(out),
                 "--res", "12", "--samples", "12"])
    assert code == 0
    assert len(list(out.glob("frame_*.png"))) == 2


def test_composite_outputs(ckpt_file, tmp_path):
    scene = tmp_path / "scene.json"
    scene.write_text(json.dumps({"spheres": [
        {"center": [0.4, 0.0, 0.0], "radius": 0.3, "color": [0, 1, 0]}]}))
    out = tmp_path / "comp"
    code = main(["composite", "--checkpoint", ckpt_file, "--scene", str(scene),
                 "--out", str(out), "--res", "16", "--samples", "16"])
    assert code == 0
    assert (out / "composite.png").exists()
    assert load_float_map(out / "depth.f32").shape == (16, 16)
