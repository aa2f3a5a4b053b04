"""Columnar text format for paths, flows and point clouds.

One row per (time, index) with header ``t,idx,x0,x1,...``.  Lines starting
with ``#`` are comments.  Floats are written with ``repr`` precision so a
file round-trips exactly.
"""

import numpy as np

__all__ = ["read_columnar", "read_point_cloud", "write_columnar", "write_bundle", "write_flow"]


class FormatError(ValueError):
    pass


def write_columnar(path, times, states):
    """Write states (K, P, q) observed at ``times`` (K,)."""
    states = np.asarray(states)
    K, P, q = states.shape
    with open(path, "w") as fh:
        fh.write(",".join(["t", "idx"] + [f"x{j}" for j in range(q)]) + "\n")
        for k in range(K):
            t = repr(float(times[k]))
            for i in range(P):
                fh.write(t + "," + str(i) + "," + ",".join(repr(float(v)) for v in states[k, i]) + "\n")


def write_bundle(path, bundle):
    write_columnar(path, bundle.grid, bundle.states)


def write_flow(path, flow, stride=1):
    idx = np.arange(0, len(flow.grid), stride)
    write_columnar(path, flow.grid[idx], flow.support[idx])


def read_columnar(path):
    """Return (t, idx, coords) arrays; raises FormatError naming the bad line."""
    ts, ids, rows = [], [], []
    q = None
    with open(path) as fh:
        header_seen = False
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            cells = [c.strip() for c in line.split(",")]
            if not header_seen:
                if cells[:2] != ["t", "idx"] or len(cells) < 3:
                    raise FormatError(f"{path}:{lineno}: header must be t,idx,x0,... got {line!r}")
                q = len(cells) - 2
                header_seen = True
                continue
            if len(cells) != q + 2:
                raise FormatError(f"{path}:{lineno}: expected {q + 2} columns, found {len(cells)}")
            try:
                t = float(cells[0])
                i = int(cells[1])
                vals = [float(c) for c in cells[2:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric entry in {line!r}") from None
            if not all(np.isfinite(vals)) or not np.isfinite(t):
                raise FormatError(f"{path}:{lineno}: non-finite value")
            ts.append(t)
            ids.append(i)
            rows.append(vals)
    if not header_seen:
        raise FormatError(f"{path}: empty file, no header")
    if not rows:
        raise FormatError(f"{path}: no data rows")
    return np.array(ts), np.array(ids), np.array(rows)


def read_point_cloud(path, time=None):
    """Points (P, q) at one time; defaults to the last time present in the file."""
    t, _, x = read_columnar(path)
    target = t.max() if time is None else float(time)
    sel = np.isclose(t, target, rtol=0, atol=1e-12)
    if not sel.any():
        raise FormatError(f"{path}: no rows at t={target}")
    return x[sel]
