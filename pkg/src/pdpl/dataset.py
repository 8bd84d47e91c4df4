"""Labeled datasets of solved MPC problems.

Parameters are drawn from deterministic per-block substreams
``SeedSequence([seed, block])``, so the first ``k`` accepted rows of a
dataset are the same for every requested size ``N >= k``. Draws whose QP is
not solved to optimality are rejected and counted.

CSV layout: one comment line ``# pdpl-dataset <json header>``, one line of
``name:type`` column labels, then one row per sample with the 20 parameters,
``J_star``, the ``n`` entries of ``U_star`` and the ``m`` entries of
``lambda_star``; floats are written with 17 significant digits so the
round trip is exact.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .lpv_mpc import condense, parameter_names
from .policies.training import LabeledSet
from .qp import kkt_residuals, solve_primal

log = logging.getLogger(__name__)

BLOCK = 1000
HEADER_TAG = "# pdpl-dataset "


class DatasetError(RuntimeError):
    pass


@dataclass
class Dataset:
    header: dict
    P: np.ndarray
    J: np.ndarray
    U: np.ndarray
    lam: np.ndarray
    _labeled: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return self.P.shape[0]

    def head(self, k: int) -> "Dataset":
        if k >= len(self):
            return self
        # draw counts refer to the full dataset, so a prefix cannot be extended
        hdr = dict(self.header, N=int(k), accepted=int(k), truncated_from=len(self))
        return Dataset(hdr, self.P[:k], self.J[:k], self.U[:k], self.lam[:k])

    def labeled(self, config: Config, k: int | None = None) -> LabeledSet:
        """Stack the QP data of the first ``k`` rows for training."""
        k = len(self) if k is None else k
        full = self._labeled.get("set")
        if full is None or len(full) < k:
            full = labeled_set(config, self.P, self.J, self.U, self.lam)
            self._labeled["set"] = full
        return full.head(k)


def labeled_set(config: Config, P, J, U, lam) -> LabeledSet:
    qps = [condense(config.mpc, config.vehicle, p) for p in P]
    Hs = qps[0].H
    shared = all(q.H is Hs or np.array_equal(q.H, Hs) for q in qps)
    return LabeledSet(
        P=np.asarray(P, dtype=float),
        Q=np.array([q.Q for q in qps]),
        c=np.array([q.c for q in qps]),
        H=Hs if shared else np.array([q.H for q in qps]),
        h=np.array([q.h for q in qps]),
        J=np.asarray(J, dtype=float),
        U=np.asarray(U, dtype=float),
        lam=np.asarray(lam, dtype=float),
    )


def block_parameters(config: Config, seed: int, block: int) -> np.ndarray:
    box = config.box
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(block)]))
    return box.lower + (box.upper - box.lower) * rng.random((BLOCK, box.dim))


def generate_dataset(config: Config, N: int, seed: int, max_reject_rate: float | None = None) -> Dataset:
    """Draw parameters until ``N`` are solved to optimality."""
    if N < 1:
        raise ValueError("N must be >= 1")
    empty = Dataset({"config_hash": config.problem_hash(), "seed": int(seed), "N": 0,
                     "n_param": config.mpc.n_param, "n_var": config.mpc.n_var, "n_con": config.mpc.n_con,
                     "attempted": 0, "accepted": 0, "rejected": 0},
                    np.zeros((0, config.mpc.n_param)), np.zeros(0),
                    np.zeros((0, config.mpc.n_var)), np.zeros((0, config.mpc.n_con)))
    return extend_dataset(empty, config, N, max_reject_rate)


def extend_dataset(ds: Dataset, config: Config, N: int, max_reject_rate: float | None = None) -> Dataset:
    """Continue the draw sequence of ``ds`` until it holds ``N`` rows.

    The result is identical to ``generate_dataset(config, N, seed)``; a
    dataset already holding ``N`` or more rows is returned truncated.
    """
    if len(ds) >= N:
        return ds.head(N)
    if "truncated_from" in ds.header:
        raise DatasetError("cannot extend a truncated dataset")
    if ds.header["config_hash"] != config.problem_hash():
        raise DatasetError("dataset was generated under a different problem configuration")
    max_reject_rate = config.pipeline.max_reject_rate if max_reject_rate is None else max_reject_rate
    spec, vp, solver = config.mpc, config.vehicle, config.solver
    seed = ds.header["seed"]
    P, J, U, lam = [ds.P], [ds.J], [ds.U], [ds.lam]
    count = len(ds)
    attempted, rejected = ds.header["attempted"], ds.header["rejected"]
    block, offset = divmod(attempted, BLOCK)
    while count < N:
        for p in block_parameters(config, seed, block)[offset:]:
            if count == N:
                break
            attempted += 1
            qp = condense(spec, vp, p)
            sol = solve_primal(qp, solver)
            if not sol.ok:
                rejected += 1
                log.info("rejected draw %d (status %s)", attempted - 1, sol.status)
                if rejected > max_reject_rate * max(attempted, 100):
                    raise DatasetError(f"rejection rate {rejected}/{attempted} exceeds "
                                       f"{max_reject_rate:.0%}; check the parameter box")
                continue
            P.append(p[None]); J.append([sol.J_star]); U.append(sol.U_star[None]); lam.append(sol.lambda_star[None])
            count += 1
        block += 1
        offset = 0
    header = dict(ds.header, N=int(N), attempted=attempted, accepted=int(N), rejected=rejected)
    return Dataset(header, np.concatenate(P), np.concatenate(J), np.concatenate(U), np.concatenate(lam))


def column_names(n_param_names, n_var: int, n_con: int) -> list[str]:
    return (list(n_param_names) + ["J_star"] + [f"U_star_{i}" for i in range(n_var)]
            + [f"lambda_star_{i}" for i in range(n_con)])


def dataset_to_csv(ds: Dataset, config: Config) -> bytes:
    cols = column_names(parameter_names(config.mpc), ds.U.shape[1], ds.lam.shape[1])
    buf = io.StringIO()
    buf.write(HEADER_TAG + json.dumps(ds.header, sort_keys=True) + "\n")
    buf.write(",".join(f"{c}:f8" for c in cols) + "\n")
    rows = np.column_stack([ds.P, ds.J, ds.U, ds.lam])
    np.savetxt(buf, rows, fmt="%.17g", delimiter=",")
    return buf.getvalue().encode()


def save_dataset(ds: Dataset, config: Config, path) -> None:
    Path(path).write_bytes(dataset_to_csv(ds, config))


def load_dataset(path, config: Config | None = None, check_fraction: float = 0.01,
                 seed: int = 0) -> Dataset:
    """Read a dataset; with ``config`` a random fraction of rows is re-checked against its KKT conditions."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith(HEADER_TAG):
            raise DatasetError("missing dataset header")
        header = json.loads(first[len(HEADER_TAG):])
        cols = fh.readline().strip().split(",")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    n_param, n_var, n_con = header["n_param"], header["n_var"], header["n_con"]
    if len(cols) != n_param + 1 + n_var + n_con or rows.shape[1] != len(cols):
        raise DatasetError("column count does not match the header")
    if rows.shape[0] != header["N"]:
        raise DatasetError(f"header announces {header['N']} rows, file has {rows.shape[0]}")
    P = rows[:, :n_param]
    J = rows[:, n_param]
    U = rows[:, n_param + 1:n_param + 1 + n_var]
    lam = rows[:, n_param + 1 + n_var:]
    ds = Dataset(header, P, J, U, lam)
    if config is not None:
        if header["config_hash"] != config.problem_hash():
            raise DatasetError("dataset was generated under a different problem configuration")
        verify_rows(ds, config, check_fraction, seed)
    return ds


def verify_rows(ds: Dataset, config: Config, fraction: float, seed: int = 0) -> int:
    """KKT spot check of a random subset of rows; returns the number checked."""
    if len(ds) == 0 or fraction <= 0:
        return 0
    k = min(len(ds), max(1, int(round(fraction * len(ds)))))
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=k, replace=False))
    tol = config.solver.tol
    for i in idx:
        qp = condense(config.mpc, config.vehicle, ds.P[i])
        res = kkt_residuals(qp, ds.U[i], ds.lam[i])
        if res.max() > tol:
            raise DatasetError(f"row {i} fails the KKT check: {res}")
        if abs(0.5 * ds.U[i] @ qp.Q @ ds.U[i] + qp.c @ ds.U[i] - ds.J[i]) > tol * max(1.0, abs(ds.J[i])):
            raise DatasetError(f"row {i}: stored J_star does not match U_star")
    return k
