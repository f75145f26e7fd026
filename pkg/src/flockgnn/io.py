"""On-disk formats.

All binary data is little-endian; matrices are row-major float64.

Matrix file (graph signals, shift operators)::

    magic   4 bytes   b"GSIG" (signal) or b"GSHF" (shift operator)
    version u16       1
    rows    u32
    cols    u32
    data    rows*cols float64

Matrix CSV: first row ``rows,cols``, then one line per matrix row.

Checkpoint::

    magic   8 bytes   b"FGNNCKPT"
    version u16       1
    hlen    u32       length of the hyperparameter block
    hyper   hlen      UTF-8 JSON of ArchHyper fields
    count   u64       number of parameters
    taps    count     float64, tensors in ArchHyper.tensor_shapes order,
                      each C-ordered as (K+1, F_in, F_out)

Trajectory container::

    magic   8 bytes   b"FLKTRAJ1"
    version u16       1
    count   u32       number of trajectories
    N, T    u32, u32
    T_s     float64
    digest  16 bytes  ASCII config digest
    clen    u32       length of the config block
    config  clen      UTF-8 JSON of FlockingConfig fields
    then per trajectory:
        failed        u8
        failure_time  i32
        T step blocks: positions (N,2), velocities (N,2), X (N,6), U (N,2),
                       cost float64, S as np.packbits of the (N,N) boolean
                       adjacency (row-major, ceil(N*N/8) bytes)
"""

import csv
import io as stdio
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .arch import ArchHyper, ModelParams, param_count
from .flocking import FlockingConfig, Trajectory

MATRIX_MAGIC = {"signal": b"GSIG", "shift": b"GSHF"}
CKPT_MAGIC = b"FGNNCKPT"
TRAJ_MAGIC = b"FLKTRAJ1"
VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes or text to ``path`` via a temporary file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def matrix_to_bytes(M, kind="signal"):
    M = np.ascontiguousarray(M, dtype="<f8")
    if M.ndim != 2:
        raise FormatError("only 2-D matrices are serialised")
    return MATRIX_MAGIC[kind] + struct.pack("<HII", VERSION, *M.shape) + M.tobytes()


def matrix_from_bytes(blob, kind="signal"):
    if blob[:4] != MATRIX_MAGIC[kind]:
        raise FormatError(f"not a {kind} file")
    version, rows, cols = struct.unpack_from("<HII", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=14)
    return data.reshape(rows, cols).astype(np.float64)


def save_matrix(path, M, kind="signal"):
    atomic_write(path, matrix_to_bytes(M, kind))


def load_matrix(path, kind="signal"):
    return matrix_from_bytes(Path(path).read_bytes(), kind)


def save_matrix_csv(path, M):
    M = np.asarray(M, dtype=np.float64)
    lines = [f"{M.shape[0]},{M.shape[1]}"]
    lines += [",".join(repr(float(v)) for v in row) for row in M]
    atomic_write(path, "\n".join(lines) + "\n")


def load_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    n, f = (int(v) for v in rows[0])
    M = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(n, f)
    return M


def checkpoint_bytes(params):
    hyper = json.dumps(params.hyper.as_dict(), sort_keys=True).encode()
    flat = np.ascontiguousarray(params.flat(), dtype="<f8")
    return (CKPT_MAGIC + struct.pack("<HI", VERSION, len(hyper)) + hyper
            + struct.pack("<Q", flat.size) + flat.tobytes())


def params_from_bytes(blob):
    if blob[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    version, hlen = struct.unpack_from("<HI", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 14
    hyper = ArchHyper(**json.loads(blob[off:off + hlen].decode()))
    off += hlen
    (count,) = struct.unpack_from("<Q", blob, off)
    if count != param_count(hyper):
        raise FormatError(f"checkpoint holds {count} values, hyperparameters need "
                          f"{param_count(hyper)}")
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=off + 8)
    return ModelParams.from_flat(hyper, flat.astype(np.float64))


def save_checkpoint(path, params):
    atomic_write(path, checkpoint_bytes(params))


def load_checkpoint(path):
    return params_from_bytes(Path(path).read_bytes())


def export_params_csv(path, params):
    lines = ["tensor,k,row,col,value"]
    for name, taps in params.taps.items():
        for (k, r, c), v in np.ndenumerate(taps):
            lines.append(f"{name},{k},{r},{c},{v!r}")
    atomic_write(path, "\n".join(lines) + "\n")


def _step_dtype(N):
    return np.dtype([
        ("positions", "<f8", (N, 2)), ("velocities", "<f8", (N, 2)),
        ("X", "<f8", (N, 6)), ("U", "<f8", (N, 2)), ("cost", "<f8"),
        ("S", "u1", ((N * N + 7) // 8,)),
    ])


def trajectory_bytes(traj, cfg):
    B, T, N = traj.positions.shape[:3]
    cfg_blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    parts = [TRAJ_MAGIC, struct.pack("<HIIId", VERSION, B, N, T, cfg.T_s),
             cfg.digest().encode("ascii"), struct.pack("<I", len(cfg_blob)), cfg_blob]
    steps = np.zeros((B, T), dtype=_step_dtype(N))
    steps["positions"] = traj.positions
    steps["velocities"] = traj.velocities
    steps["X"] = traj.X
    steps["U"] = traj.U
    steps["cost"] = traj.cost
    steps["S"] = np.packbits(traj.S.reshape(B, T, N * N), axis=-1)
    for b in range(B):
        parts.append(struct.pack("<Bi", bool(traj.failed[b]), int(traj.failure_time[b])))
        parts.append(steps[b].tobytes())
    return b"".join(parts)


def trajectory_from_bytes(blob):
    if blob[:8] != TRAJ_MAGIC:
        raise FormatError("not a trajectory file")
    version, B, N, T, _ = struct.unpack_from("<HIIId", blob, 8)
    if version != VERSION:
        raise FormatError(f"unsupported trajectory version {version}")
    off = 8 + struct.calcsize("<HIIId")
    digest = blob[off:off + 16].decode("ascii")
    off += 16
    (clen,) = struct.unpack_from("<I", blob, off)
    off += 4
    cfg = FlockingConfig(**json.loads(blob[off:off + clen].decode()))
    off += clen
    if cfg.digest() != digest:
        raise FormatError("config digest mismatch")
    dt = _step_dtype(N)
    failed = np.zeros(B, dtype=bool)
    failure_time = np.zeros(B, dtype=int)
    steps = np.empty((B, T), dtype=dt)
    for b in range(B):
        f, ft = struct.unpack_from("<Bi", blob, off)
        failed[b], failure_time[b] = bool(f), ft
        off += 5
        steps[b] = np.frombuffer(blob, dtype=dt, count=T, offset=off)
        off += T * dt.itemsize
    S = np.unpackbits(steps["S"], axis=-1, count=N * N).reshape(B, T, N, N).astype(bool)
    traj = Trajectory(steps["positions"].copy(), steps["velocities"].copy(), S,
                      steps["X"].copy(), steps["U"].copy(), steps["cost"].copy(),
                      failed, failure_time)
    return traj, cfg


def save_trajectories(path, traj, cfg):
    atomic_write(path, trajectory_bytes(traj, cfg))


def load_trajectories(path):
    return trajectory_from_bytes(Path(path).read_bytes())


def export_trajectory_csv(path, traj):
    """One row per (trajectory, step, agent), ready for plotting."""
    B, T, N = traj.positions.shape[:3]
    header = "traj,t,agent,x,y,vx,vy,ux,uy,cost"
    lines = [header]
    for b in range(B):
        for t in range(T):
            for i in range(N):
                p, v, u = traj.positions[b, t, i], traj.velocities[b, t, i], traj.U[b, t, i]
                lines.append(f"{b},{t},{i},{p[0]!r},{p[1]!r},{v[0]!r},{v[1]!r},"
                             f"{u[0]!r},{u[1]!r},{traj.cost[b, t]!r}")
    atomic_write(path, "\n".join(lines) + "\n")


def write_csv(path, header, rows):
    buf = stdio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def read_key_value_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out
