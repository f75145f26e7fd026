import struct

import numpy as np
import pytest

from flockgnn.arch import ArchHyper, init_params
from flockgnn.flocking import ExpertPolicy, FlockingConfig, rollout, sample_initial_conditions, stack_states
from flockgnn.io import (FormatError, checkpoint_bytes, export_params_csv, export_trajectory_csv,
                         load_checkpoint, load_matrix, load_matrix_csv, load_trajectories,
                         matrix_from_bytes, matrix_to_bytes, params_from_bytes,
                         read_key_value_file, save_checkpoint, save_matrix, save_matrix_csv,
                         save_trajectories, trajectory_bytes, trajectory_from_bytes)


def test_matrix_binary_layout():
    M = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    blob = matrix_to_bytes(M, "shift")
    assert blob[:4] == b"GSHF"
    assert struct.unpack_from("<HII", blob, 4) == (1, 2, 3)
    assert np.frombuffer(blob[14:], "<f8").tolist() == [1, 2, 3, 4, 5, 6]
    assert np.array_equal(matrix_from_bytes(blob, "shift"), M)
    with pytest.raises(FormatError):
        matrix_from_bytes(blob, "signal")


def test_matrix_files_roundtrip(tmp_path, rng):
    M = rng.normal(size=(7, 3))
    save_matrix(tmp_path / "x.bin", M)
    save_matrix_csv(tmp_path / "x.csv", M)
    assert np.array_equal(load_matrix(tmp_path / "x.bin"), M)
    assert np.array_equal(load_matrix_csv(tmp_path / "x.csv"), M)
    assert (tmp_path / "x.csv").read_text().splitlines()[0] == "7,3"


@pytest.mark.parametrize("arch", ["GF", "GCNN", "GRNN"])
def test_checkpoint_roundtrip(tmp_path, arch):
    params = init_params(ArchHyper(arch, G=3, K=2, K_out=1), 5)
    save_checkpoint(tmp_path / "m.ckpt", params)
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.hyper == params.hyper
    assert np.array_equal(back.flat(), params.flat())
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"FGNNCKPT"


def test_checkpoint_rejects_bad_data():
    blob = checkpoint_bytes(init_params(ArchHyper("GF", G=2, K=1), 0))
    with pytest.raises(FormatError):
        params_from_bytes(b"XXXXXXXX" + blob[8:])
    hlen = struct.unpack_from("<I", blob, 10)[0]
    off = 14 + hlen
    bad = blob[:off] + struct.pack("<Q", 3) + blob[off + 8:]
    with pytest.raises(FormatError):
        params_from_bytes(bad)


def test_params_csv(tmp_path):
    params = init_params(ArchHyper("GF", G=2, K=1), 0)
    export_params_csv(tmp_path / "p.csv", params)
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "tensor,k,row,col,value"
    assert len(lines) == 1 + params.flat().size


def test_trajectory_roundtrip(tmp_path):
    cfg = FlockingConfig(N=9, duration=0.1)
    tr = rollout(ExpertPolicy(), stack_states([sample_initial_conditions(cfg, s) for s in (1, 2)]), cfg)
    save_trajectories(tmp_path / "t.traj", tr, cfg)
    back, cfg2 = load_trajectories(tmp_path / "t.traj")
    assert cfg2 == cfg
    for f in tr.__dataclass_fields__:
        assert np.array_equal(getattr(back, f), getattr(tr, f)), f
    assert trajectory_bytes(back, cfg2) == trajectory_bytes(tr, cfg)


def test_trajectory_digest_check():
    cfg = FlockingConfig(N=4, duration=0.02)
    tr = rollout(ExpertPolicy(), sample_initial_conditions(cfg, 0), cfg)
    blob = bytearray(trajectory_bytes(tr, cfg))
    off = 8 + struct.calcsize("<HIIId")
    blob[off] = ord("z")
    with pytest.raises(FormatError):
        trajectory_from_bytes(bytes(blob))


def test_trajectory_csv(tmp_path):
    cfg = FlockingConfig(N=3, duration=0.02)
    tr = rollout(ExpertPolicy(), sample_initial_conditions(cfg, 0), cfg)
    export_trajectory_csv(tmp_path / "t.csv", tr)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0].startswith("traj,t,agent,x,y")
    assert len(lines) == 1 + 2 * 3


def test_key_value_file(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nN = 20\nlr=0.01  # inline\n\n")
    assert read_key_value_file(p) == {"N": "20", "lr": "0.01"}
    p.write_text("oops\n")
    with pytest.raises(FormatError):
        read_key_value_file(p)
