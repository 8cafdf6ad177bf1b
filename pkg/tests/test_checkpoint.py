from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np
import pytest

from fedgrid import fedsac as fs
from fedgrid.checkpoint import Checkpoint, CheckpointError, decode_array, encode_array
from fedgrid.env import MicrogridEnv


@pytest.fixture()
def ckpt(nm3_env):
    cfg = fs.desk_profile(hidden=(8, 8))
    agents, _ = fs.make_agents(nm3_env, cfg, 0)
    return Checkpoint(agents, [list(v) for v in nm3_env.v_ss], asdict(nm3_env.cfg), cfg.to_dict(), 0, 0)


def test_array_encoding_is_lossless():
    a = np.array([0.1, -0.0, 1e-300, np.pi, 5e-324])
    assert decode_array(encode_array(a)).tobytes() == a.tobytes()
    with pytest.raises(CheckpointError):
        decode_array(encode_array(a), expected_len=4)
    with pytest.raises(CheckpointError):
        decode_array("AAAA")


def test_save_load_save_is_byte_identical(ckpt, tmp_path):
    ckpt.save(tmp_path / "a.json")
    Checkpoint.load(tmp_path / "a.json").save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = Checkpoint.load(tmp_path / "a.json")
    for a, b in zip(ckpt.agents, back.agents):
        for name in fs.AgentBundle.NETS:
            assert np.array_equal(getattr(a, name).flat, getattr(b, name).flat)


def test_truncated_file_fails_cleanly(ckpt, tmp_path):
    text = ckpt.dumps()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "t.json")


def test_wrong_version_and_missing_fields(ckpt):
    d = ckpt.to_dict()
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_dict({**d, "format_version": 99})
    broken = json.loads(json.dumps(d))
    del broken["agents"][0]["nets"]["critic2"]
    with pytest.raises(CheckpointError):
        Checkpoint.from_dict(broken)
    with pytest.raises(CheckpointError):
        Checkpoint.from_dict([])


def test_agent_count_mismatch(ckpt, nm3_env):
    two = Checkpoint(ckpt.agents[:2], ckpt.v_ss[:2], ckpt.env_config, ckpt.fed_config)
    with pytest.raises(CheckpointError, match="2 agents"):
        two.check_env(nm3_env)
    ckpt.check_env(nm3_env)


def test_parameter_length_mismatch(ckpt):
    d = ckpt.to_dict()
    d["agents"][0]["nets"]["actor"]["layer_sizes"] = [6, 9, 9, 2]
    with pytest.raises(CheckpointError, match="values"):
        Checkpoint.from_dict(d)


def test_loaded_policy_acts_identically(ckpt, nm3_model, tmp_path):
    ckpt.save(tmp_path / "c.json")
    back = Checkpoint.load(tmp_path / "c.json")
    obs = np.full(6, 0.96)
    assert [fs.select_action(a, obs) for a in ckpt.agents] == [fs.select_action(a, obs) for a in back.agents]
    assert isinstance(back.env_cfg().action_bound, float)
    assert MicrogridEnv(nm3_model, back.env_cfg()).obs_dim == 6
