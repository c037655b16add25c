"""CSV input/output: panels, long-format draws and summaries.

Panel schema: columns ``unit_id, time, y, z1..zp``, one row per (unit, time).
Draw schema: ``draw_id, block, index, value``; scalar blocks use index 0,
vector blocks 1-based indices, and allocations are written as 1-based labels.
"""
from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import PanelData
from .sampler import DrawStore

log = logging.getLogger(__name__)

_MISSING = {"", "na", "nan", "null", "none", "."}
_SCALARS = ("K", "kplus", "gamma", "e0", "C0", "loglik")
_VECTORS = ("beta", "alpha", "sigma2", "weight")


def _num(s):
    if s is None or s.strip().lower() in _MISSING:
        return math.nan
    return float(s)


@dataclass(frozen=True)
class PanelLoad:
    data: PanelData
    dropped: tuple

    def report(self) -> str:
        d = self.data
        return f"N={d.N} T={d.T} p={d.p} dropped={len(self.dropped)}"


def load_panel(path, mode="static", h=0) -> PanelData:
    return read_panel(path, mode, h).data


def read_panel(path, mode="static", h=0) -> PanelLoad:
    """Read a long-format panel CSV into a balanced, lag-aligned panel.

    Units with any missing cell on the global time grid are dropped (with a
    warning). In dynamic mode the period just before the first usable one is
    kept as ``y0``; the first usable period is ``max(h, 1)`` (dynamic) or
    ``h`` (static) positions into the grid, and ``Z[i, t]`` holds z from ``h``
    periods earlier.
    """
    if mode not in ("static", "dynamic"):
        raise DataError("mode must be 'static' or 'dynamic'")
    if h < 0:
        raise DataError("h must be nonnegative")
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read panel {path}: {exc}") from None
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("unit_id", "time", "y"):
            if col not in header:
                raise DataError(f"panel file lacks column {col!r}")
        zcols = sorted((c for c in header if re.fullmatch(r"z\d+", c)), key=lambda c: int(c[1:]))
        if [int(c[1:]) for c in zcols] != list(range(1, len(zcols) + 1)):
            raise DataError("covariate columns must be z1..zp without gaps")
        cells = {}
        order, seen = [], set()
        try:
            for lineno, row in enumerate(reader, start=2):
                uid = row["unit_id"]
                t = _num(row["time"])
                if math.isnan(t):
                    raise DataError(f"line {lineno}: missing time for unit {uid!r}")
                key = (uid, t)
                if key in cells:
                    raise DataError(f"unit {uid!r} has duplicate rows for time {row['time']}")
                if uid not in seen:
                    order.append(uid)
                    seen.add(uid)
                cells[key] = [_num(row["y"])] + [_num(row[c]) for c in zcols]
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"non-numeric entry in {path}: {exc}") from None
    if not cells:
        raise DataError("panel file has no rows")

    times = np.array(sorted({t for _, t in cells}))
    if times.size > 1:
        steps = np.diff(times)
        bad = np.flatnonzero(~np.isclose(steps, steps[0], rtol=0, atol=1e-9 * max(1.0, abs(steps[0]))))
        if bad.size:
            t0, t1 = times[bad[0]], times[bad[0] + 1]
            unit = next((u for u in order if (u, t0) in cells and (u, t1) in cells), order[0])
            raise DataError(f"non-contiguous times: unit {unit!r} jumps from {t0:g} to {t1:g} "
                            f"while the panel step is {steps[0]:g}")

    keep, dropped = [], []
    for u in order:
        rows = [cells.get((u, t)) for t in times]
        if any(r is None or any(math.isnan(v) for v in r) for r in rows):
            dropped.append(u)
        else:
            keep.append(u)
    if dropped:
        log.warning("dropped %d unit(s) with missing cells: %s", len(dropped),
                    ", ".join(map(str, dropped[:10])) + (" ..." if len(dropped) > 10 else ""))
    if not keep:
        raise DataError("no unit has complete observations")

    arr = np.array([[cells[(u, t)] for t in times] for u in keep])  # (N, n_times, 1+p)
    dynamic = mode == "dynamic"
    start = max(h, 1) if dynamic else h
    T = times.size - start
    if T < 1:
        raise DataError(f"{times.size} periods leave no usable observations with h={h}, mode={mode}")
    y = arr[:, start:, 0].T.copy()
    Z = arr[:, start - h:start - h + T, 1:].copy()
    y0 = arr[:, start - 1, 0].copy() if dynamic else None
    log.info("loaded panel: N=%d, T=%d, p=%d, dropped=%d", len(keep), T, len(zcols), len(dropped))
    data = PanelData(y=y, Z=Z, y0=y0, h=h, dynamic=dynamic, unit_ids=tuple(keep))
    return PanelLoad(data, tuple(dropped))


def write_panel(path, data: PanelData):
    """Write a panel with ``h = 0``; dynamic panels get a period 0 row holding ``y0``.

    Covariates of period 0 are never used by the fit and are written as 0.
    """
    p = data.p
    ids = data.unit_ids or tuple(str(i + 1) for i in range(data.N))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit_id", "time", "y"] + [f"z{l}" for l in range(1, p + 1)])
        for i, uid in enumerate(ids):
            if data.dynamic:
                w.writerow([uid, 0, repr(float(data.y0[i]))] + ["0.0"] * p)
            for t in range(data.T):
                w.writerow([uid, t + 1, repr(float(data.y[t, i]))]
                           + [repr(float(v)) for v in data.Z[i, t]])


def write_draws(path, store: DrawStore):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["draw_id", "block", "index", "value"])
        for d in range(len(store)):
            did = d + 1
            w.writerow([did, "K", 0, store.K[d]])
            w.writerow([did, "kplus", 0, store.kplus[d]])
            if store.dynamic:
                w.writerow([did, "gamma", 0, repr(store.gamma[d])])
            w.writerow([did, "e0", 0, repr(store.e0[d])])
            w.writerow([did, "C0", 0, repr(store.C0[d])])
            w.writerow([did, "loglik", 0, repr(store.loglik[d])])
            for name, vec in (("beta", store.beta[d]), ("alpha", store.alpha[d]),
                              ("sigma2", store.sigma2[d]), ("weight", store.weights[d])):
                for j, v in enumerate(vec, 1):
                    w.writerow([did, name, j, repr(float(v))])
            if store.chi is not None:
                for i, c in enumerate(store.chi[d], 1):
                    w.writerow([did, "chi", i, int(c) + 1])


def read_draws(path) -> DrawStore:
    """Inverse of :func:`write_draws`; ``p`` and the dynamic flag are inferred."""
    recs = {}
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["draw_id", "block", "index", "value"]:
                raise DataError("draws file must have columns draw_id, block, index, value")
            for row in reader:
                d = int(row["draw_id"])
                rec = recs.setdefault(d, {})
                blk, idx = row["block"], int(row["index"])
                if blk in _SCALARS:
                    rec[blk] = float(row["value"])
                elif blk in _VECTORS or blk == "chi":
                    rec.setdefault(blk, {})[idx] = float(row["value"])
                else:
                    raise DataError(f"unknown block {blk!r} in draws file")
    except OSError as exc:
        raise DataError(f"cannot read draws {path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed draws file {path}: {exc}") from None
    if not recs:
        raise DataError("draws file is empty")
    ids = sorted(recs)
    dynamic = "gamma" in recs[ids[0]]
    p = max((max(r.get("beta", {0: 0})) for r in recs.values()), default=0)
    store = DrawStore(dynamic=dynamic, p=p)
    has_chi = "chi" in recs[ids[0]]
    if has_chi:
        store.chi = []

    def vec(r, name):
        m = r.get(name, {})
        return np.array([m[j] for j in sorted(m)], dtype=float)

    for d in ids:
        r = recs[d]
        store.K.append(int(r["K"]))
        store.kplus.append(int(r["kplus"]))
        store.gamma.append(r["gamma"] if dynamic else np.nan)
        store.e0.append(r["e0"])
        store.C0.append(r["C0"])
        store.loglik.append(r["loglik"])
        store.beta.append(vec(r, "beta"))
        store.alpha.append(vec(r, "alpha"))
        store.sigma2.append(vec(r, "sigma2"))
        store.weights.append(vec(r, "weight"))
        if has_chi:
            store.chi.append(vec(r, "chi").astype(np.int64) - 1)
        if store.alpha[-1].size != store.K[-1]:
            raise DataError(f"draw {d}: atom block length differs from K")
    return store


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def write_rows(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
