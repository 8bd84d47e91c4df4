"""PDPL policy weight files.

Layout (little-endian)::

    b"PDPL"                     magic
    u32  version                (1)
    u8   kind                   0 = rbn, 1 = mlp
    u8   role                   0 = primal, 1 = dual
    u32  n_dims, then n_dims x u32 dims
    f64  parameters
    f64  certified_t            NaN when uncertified
    u64  training seed

RBN: ``dims = (input_dim, n_rb, output_dim)``; parameters are the centers
(n_rb x input_dim, row-major), the ``W_s`` diagonal (input_dim), then the
coefficient matrix (output_dim x n_rb, row-major).

MLP: ``dims = (input_dim, n_1, ..., n_L)``; for each layer in order, the
weight matrix (n_i x n_{i-1}, row-major) followed by its bias.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .networks import DUAL, MLP, PRIMAL, RBN, MlpNet, Policy, RbnNet

MAGIC = b"PDPL"
VERSION = 1
_KINDS = {RBN: 0, MLP: 1}
_ROLES = {PRIMAL: 0, DUAL: 1}
_F64 = np.dtype("<f8")


class PolicyFormatError(ValueError):
    pass


def policy_to_bytes(policy: Policy) -> bytes:
    net = policy.net
    if policy.kind == RBN:
        dims = [net.input_dim, net.n_rb, net.output_dim]
        blocks = [net.centers, net.scaling, net.coef]
    else:
        dims = list(net.shape.dims)
        blocks = []
        for W, b in zip(net.weights, net.biases):
            blocks += [W, b]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IBBI", VERSION, _KINDS[policy.kind], _ROLES[policy.role], len(dims)))
    buf.write(struct.pack(f"<{len(dims)}I", *dims))
    for blk in blocks:
        buf.write(np.ascontiguousarray(blk, dtype=_F64).tobytes())
    t = np.nan if policy.certified_t is None else float(policy.certified_t)
    seed = int(policy.train_meta.get("seed", 0)) if policy.train_meta else 0
    buf.write(struct.pack("<dQ", t, seed))
    return buf.getvalue()


def policy_from_bytes(data: bytes) -> Policy:
    if data[:4] != MAGIC:
        raise PolicyFormatError("not a PDPL file")
    off = 4
    version, kind_code, role_code, n_dims = struct.unpack_from("<IBBI", data, off)
    off += struct.calcsize("<IBBI")
    if version != VERSION:
        raise PolicyFormatError(f"unsupported version {version}")
    kinds = {v: k for k, v in _KINDS.items()}
    roles = {v: k for k, v in _ROLES.items()}
    if kind_code not in kinds or role_code not in roles:
        raise PolicyFormatError("unknown kind or role code")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims

    def take(shape):
        nonlocal off
        count = int(np.prod(shape))
        if off + 8 * count > len(data):
            raise PolicyFormatError("truncated parameter block")
        arr = np.frombuffer(data, dtype=_F64, count=count, offset=off).astype(float).reshape(shape)
        off += 8 * count
        return arr

    kind = kinds[kind_code]
    if kind == RBN:
        if n_dims != 3:
            raise PolicyFormatError("RBN descriptor needs 3 dims")
        d, k, o = dims
        net = RbnNet(take((k, d)), take((d,)), take((o, k)))
    else:
        if n_dims < 2:
            raise PolicyFormatError("MLP descriptor needs at least 2 dims")
        Ws, bs = [], []
        for i in range(n_dims - 1):
            Ws.append(take((dims[i + 1], dims[i])))
            bs.append(take((dims[i + 1],)))
        net = MlpNet(Ws, bs)
    if off + 16 != len(data):
        raise PolicyFormatError("unexpected file length")
    t, seed = struct.unpack_from("<dQ", data, off)
    certified = None if np.isnan(t) else float(t)
    return Policy(kind, roles[role_code], net, certified, {"seed": int(seed)})


def save_policy(policy: Policy, path) -> None:
    with open(path, "wb") as fh:
        fh.write(policy_to_bytes(policy))


def load_policy(path) -> Policy:
    with open(path, "rb") as fh:
        return policy_from_bytes(fh.read())
