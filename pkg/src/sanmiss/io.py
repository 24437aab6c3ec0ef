"""File formats: datasets (CSV), tables and margins (JSON), run configs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import MISSING, Dataset
from .errors import ConfigError, ValidationError
from .tables import (MomentConstraint, ProbTable, Variable, VariableSpace, _normalize,
                     build_space)

NA = "NA"
JOINT_TOL = 1e-9


def fmt_float(x: float) -> str:
    """17 significant digits: enough to round-trip any double."""
    return format(float(x), ".17g")


def clean_json(obj):
    """Recursively convert numpy scalars/arrays and map non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(obj, path) -> None:
    # json writes floats with repr, the shortest string that round-trips
    text = json.dumps(clean_json(obj), indent=2, sort_keys=False, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"file not found: {path}", path=str(path)) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", path=str(path)) from None


# ---------------------------------------------------------------------------
# spaces and tables


def space_from_json(obj) -> VariableSpace:
    try:
        variables = [(v["name"], v["levels"]) for v in obj["variables"]]
        y_block = obj.get("y_block", [])
    except (KeyError, TypeError):
        raise ConfigError("space needs 'variables' (name, levels) and 'y_block'") from None
    return build_space(variables, y_block)


def table_to_json(table: ProbTable) -> dict:
    return {"variables": [{"name": v.name, "levels": list(v.levels)} for v in table.variables],
            "mass": table.flat.tolist()}


def table_from_json(obj, space: VariableSpace | None = None) -> ProbTable:
    """Table JSON: ``{"variables": [names or {name, levels}], "mass": [...]}``.

    Bare names are resolved through ``space``.
    """
    try:
        decl = obj["variables"]
        mass = obj["mass"]
    except (KeyError, TypeError):
        raise ConfigError("table needs 'variables' and 'mass'") from None
    variables = []
    for v in decl:
        if isinstance(v, str):
            if space is None:
                raise ConfigError(f"variable {v!r} given by name but no space is declared")
            variables.append(space[v])
        else:
            variables.append(Variable(str(v["name"]), tuple(str(x) for x in v["levels"])))
    shape = tuple(v.size for v in variables)
    arr = np.asarray(mass, dtype=np.float64)
    if arr.size != int(np.prod(shape, dtype=np.int64)):
        raise ValidationError("table mass length does not match its variables")
    return ProbTable(variables, arr.reshape(shape))


# ---------------------------------------------------------------------------
# datasets


def load_dataset(path, space: VariableSpace, always_observed: Sequence[str] = ()) -> Dataset:
    """Read a CSV with a header naming the variables and ``NA`` for missing."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ValidationError(f"{path}: empty file") from None
            rows = [r for r in reader if r]
    except FileNotFoundError:
        raise ConfigError(f"data file not found: {path}", path=str(path)) from None
    except csv.Error as exc:
        raise ValidationError(f"{path}: malformed CSV ({exc})") from None
    header = [h.strip() for h in header]
    if sorted(header) != sorted(space.names):
        raise ValidationError(f"{path}: header {header} does not match variables "
                              f"{list(space.names)}")
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    cols = [header.index(n) for n in space.names]
    lookups = [{lvl: i for i, lvl in enumerate(v.levels)} for v in space.variables]
    codes = np.empty((len(rows), len(space.names)), dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValidationError(f"{path}: line {i + 2} has {len(row)} fields, "
                                  f"expected {len(header)}", line=i + 2)
        for k, c in enumerate(cols):
            cell = row[c]
            if cell == NA:
                codes[i, k] = MISSING
                continue
            try:
                codes[i, k] = lookups[k][cell]
            except KeyError:
                name = space.variables[k].name
                raise ValidationError(f"{path}: line {i + 2}: unknown level {cell!r} for "
                                      f"{name!r}", variable=name, level=cell,
                                      line=i + 2) from None
    ds = Dataset(space, codes)
    for n in always_observed:
        if np.any(ds.column(n) == MISSING):
            raise ValidationError(f"{path}: variable {n!r} is declared fully observed but "
                                  "has NA entries", variable=n)
    return ds


def write_dataset(dataset: Dataset, path) -> None:
    space = dataset.space
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(space.names)
        levels = [v.levels for v in space.variables]
        for row in dataset.codes:
            w.writerow([NA if c == MISSING else levels[k][c] for k, c in enumerate(row)])


# ---------------------------------------------------------------------------
# margins


@dataclass(frozen=True, eq=False)
class Margins:
    """Parsed auxiliary information: moment constraints, plus the joint table
    when it was given in joint form."""

    constraints: tuple[MomentConstraint, ...]
    joint: ProbTable | None = None


def _level(space, name, label):
    return space[name].level_index(label)


def parse_moment(m, k, lookup, allowed=None) -> MomentConstraint:
    """One moment entry; ``lookup[name]`` resolves scope names to variables."""
    try:
        scope = [str(s) for s in m["scope"]]
        target = float(m["target"])
    except (KeyError, TypeError, ValueError):
        raise ValidationError(f"moment {k} needs 'scope' and a numeric 'target'") from None
    if not math.isfinite(target):
        raise ValidationError(f"moment {k} has a non-finite target")
    for n in scope:
        if (allowed is not None and n not in allowed) or n not in lookup:
            raise ValidationError(f"moment {k}: unknown scope variable {n!r}", variable=n)
    variables = [lookup[n] for n in scope]
    shape = tuple(v.size for v in variables)
    if "values" in m:
        vals = np.asarray(m["values"], dtype=np.float64)
        if vals.size != int(np.prod(shape, dtype=np.int64)):
            raise ValidationError(f"moment {k}: expected {int(np.prod(shape))} values")
        vals = vals.reshape(shape)
    elif "values_by_cell" in m:
        vals = np.zeros(shape)
        for e in m["values_by_cell"]:
            try:
                idx = tuple(v.level_index(e["cells"][v.name]) for v in variables)
            except KeyError:
                raise ValidationError(f"moment {k}: cell {e.get('cells')} does not cover "
                                      f"scope {scope}") from None
            vals[idx] = float(e["value"])
    else:
        raise ValidationError(f"moment {k} needs 'values' or 'values_by_cell'")
    if not np.all(np.isfinite(vals)):
        raise ValidationError(f"moment {k} has non-finite values")
    return MomentConstraint(tuple(scope), vals, target, name=str(m.get("name", f"m{k}")))


def load_margins(source, space: VariableSpace) -> Margins:
    """Parse margins from a path or an already-loaded JSON object.

    ``{"joint": [{"cells": {var: level, ...}, "prob": p}, ...]}`` expands to
    one indicator constraint per cell of the listed variables (cells not
    listed have probability 0).  ``{"moments": [{"scope": [...], "values":
    [...] | "values_by_cell": [{"cells": {...}, "value": v}], "target": t}]}``
    lists constraints directly.
    """
    obj = read_json(source) if isinstance(source, (str, Path)) else source
    if not isinstance(obj, dict) or not ({"joint", "moments"} & set(obj)):
        raise ConfigError("margins need a 'joint' or a 'moments' entry")
    out, joint = [], None
    if "joint" in obj:
        entries = obj["joint"]
        if not entries:
            raise ValidationError("joint margin is empty")
        names = list(entries[0]["cells"].keys())
        for n in names:
            if n not in space.y_names:
                raise ValidationError(f"margin variable {n!r} is not in the Y block",
                                      variable=n)
        shape = tuple(space[n].size for n in names)
        arr = np.zeros(shape)
        seen = set()
        for e in entries:
            cells = e["cells"]
            if sorted(cells) != sorted(names):
                raise ValidationError("joint margin entries use different variables")
            idx = tuple(_level(space, n, cells[n]) for n in names)
            if idx in seen:
                raise ValidationError(f"duplicate joint margin cell {cells}")
            seen.add(idx)
            p = float(e["prob"])
            if not math.isfinite(p) or p < 0:
                raise ValidationError(f"invalid probability {e['prob']!r}")
            arr[idx] = p
        total = math.fsum(arr.ravel())
        if abs(total - 1.0) > JOINT_TOL:
            raise ValidationError(f"joint margin sums to {total!r}, not 1", total=total)
        arr = _normalize(arr)
        joint = ProbTable([space[n] for n in names], arr)
        for cell in np.ndindex(*shape):
            vals = np.zeros(shape)
            vals[cell] = 1.0
            label = ",".join(f"{n}={space[n].levels[c]}" for n, c in zip(names, cell))
            out.append(MomentConstraint(tuple(names), vals, float(arr[cell]), name=label))
    for k, m in enumerate(obj.get("moments", [])):
        out.append(parse_moment(m, k, space, allowed=space.y_names))
    return Margins(tuple(out), joint)


def joint_to_margins_json(table: ProbTable) -> dict:
    return {"joint": [{"cells": {v.name: v.levels[c] for v, c in zip(table.variables, cell)},
                       "prob": float(table.mass[cell])}
                      for cell in np.ndindex(*table.shape)]}


# ---------------------------------------------------------------------------
# samples


def write_samples(path, names: Sequence[str], chains) -> None:
    """One row per retained draw: chain index, draw index, then parameters."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw"] + list(names))
        for c, ch in enumerate(chains):
            mat = ch.draws()
            for t, row in enumerate(mat):
                w.writerow([c, t] + [fmt_float(v) for v in row])


def read_samples(path):
    """Returns ``(names, chain_ids, matrix)``."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [r for r in reader if r]
    except FileNotFoundError:
        raise ConfigError(f"samples file not found: {path}", path=str(path)) from None
    except StopIteration:
        raise ValidationError(f"{path}: empty samples file") from None
    if header[:2] != ["chain", "draw"]:
        raise ValidationError(f"{path}: not a samples file")
    if not rows:
        raise ValidationError(f"{path}: no draws")
    try:
        arr = np.array([[float(x) for x in r] for r in rows])
    except ValueError:
        raise ValidationError(f"{path}: non-numeric entry") from None
    return header[2:], arr[:, 0].astype(int), arr[:, 2:]
