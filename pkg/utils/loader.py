"""Artifact files: risk tables, policy tables and network checkpoints.

Every artifact is a zip container holding ``header.json`` plus one ``.npy``
member per array. Members are written with a fixed timestamp and sorted JSON so
that saving the same object twice yields identical bytes.

Header fields common to all kinds: ``format`` (artifact kind), ``version``.
Risk tables (``rdp-risk-table``) add ``grid`` (axis names, discrete flags, coordinates),
``errors``, ``error_grid``, ``cost_support`` and ``meta``; ``probs`` is stored
row-major as (grid..., error, atom).
"""
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from utils.errors import TableFormatError

FORMAT_VERSION = 1
_FIXED_TIME = (1980, 1, 1, 0, 0, 0)


def write_container(path, kind, header, arrays):
    header = dict(header, format=kind, version=FORMAT_VERSION)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_FIXED_TIME)
        info.compress_type = zipfile.ZIP_DEFLATED
        zf.writestr(info, json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_FIXED_TIME)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, member.getvalue())
    path.write_bytes(buffer.getvalue())
    return path


def read_container(path, kind):
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != kind:
                raise TableFormatError(f"{path} holds a {header.get('format')!r}, expected {kind!r}")
            if header.get("version") != FORMAT_VERSION:
                raise TableFormatError(
                    f"{path} has format version {header.get('version')}, this build reads {FORMAT_VERSION}"
                )
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (zipfile.BadZipFile, EOFError, KeyError, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise TableFormatError(f"{path} is truncated or not a {kind} file: {exc}") from exc
    return header, arrays


def save_table(table, path):
    header = {
        "grid": table.grid.to_header(),
        "errors": table.errors.tolist(),
        "error_grid": table.error_grid.to_header() if table.error_grid is not None else None,
        "cost_support": table.cost_support.tolist(),
        "meta": table.meta,
    }
    return write_container(path, "rdp-risk-table", header, {"probs": table.probs})


def load_table(path):
    from algorithms.distdp import RiskTable
    from algorithms.grid import Grid

    header, arrays = read_container(path, "rdp-risk-table")
    grid = Grid.from_header(header["grid"])
    error_grid = Grid.from_header(header["error_grid"]) if header["error_grid"] else None
    probs = arrays.get("probs")
    if probs is None:
        raise TableFormatError(f"{path} has no probability array")
    return RiskTable(grid, np.asarray(header["errors"]), np.asarray(header["cost_support"]),
                     probs, error_grid, header["meta"])


def save_net(net, path, meta=None):
    header = {
        "layer_sizes": list(net.layer_sizes),
        "output_activation": net.output_activation,
        "meta": meta or {},
    }
    arrays = {f"param_{i:02d}": p for i, p in enumerate(net.params)}
    return write_container(path, "rdp-network", header, arrays)


def load_net(path):
    from algorithms.perceptnet import PerceptionNet

    header, arrays = read_container(path, "rdp-network")
    n_params = 2 * (len(header["layer_sizes"]) - 1)
    try:
        weights = [arrays[f"param_{i:02d}"] for i in range(n_params)]
    except KeyError as exc:
        raise TableFormatError(f"{path} is missing network parameter {exc}") from exc
    net = PerceptionNet(header["layer_sizes"], header["output_activation"], weights=weights)
    return net, header["meta"]


def save_policy(policy, path):
    header = {"grid": policy.grid.to_header(), "meta": policy.meta}
    return write_container(path, "rdp-policy", header, {"q": policy.q})


def load_policy(path):
    from algorithms.grid import Grid
    from features.daa import DaaPolicy

    header, arrays = read_container(path, "rdp-policy")
    if "q" not in arrays:
        raise TableFormatError(f"{path} has no action-value array")
    return DaaPolicy(Grid.from_header(header["grid"]), arrays["q"], header["meta"])
