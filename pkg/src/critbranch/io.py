"""Model files and run artifacts.

Model files are flat ``key = value`` text, one entry per line, ``#`` starts a
comment. Indexed keys use 1-based brackets, e.g. ``rate[2] = 3/2``. Numbers
may be written as fractions and are parsed exactly. ``offspring[i]`` may
repeat; every other key must appear once.

Finite-type schema::

    kind = finite
    types = d
    rate[i] = gamma_i                       (i = 1..d)
    offspring[i] = p: c_1 c_2 ... c_d       (children of each type)
    yield_multiplier = kappa                (optional)

Neutron schema (see :mod:`critbranch.nbp` for the meaning of each key)::

    kind = nbp
    geometry = ball | box
    radius = R            shells = r_1 r_2 ...     (ball; inner shell radii)
    lower = a  upper = b  cuts = x_1 x_2 ...       (box; x-plane region cuts)
    v_min = .. v_max = ..
    sigma_s[i] = ..  sigma_f[i] = ..  yield[i] = p_0 p_1 ... p_N   (region i)
    fission_velocity = iid | cluster   cluster_kappa = ..
    scatter_speed = uniform | keep
    yield_multiplier = kappa
"""

import hashlib
import json
import re
import time
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from .finite import FiniteTypeModel, ModelValidationError

_LINE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)(?:\[(\d+)\])?\s*=\s*(.*)$")
_REPEATABLE = {"offspring"}


class ModelFileError(ValueError):
    def __init__(self, msg, line=None, field=None, source="<model>"):
        where = source if line is None else f"{source}:{line}"
        if field:
            where += f" [{field}]"
        super().__init__(f"{where}: {msg}")
        self.line = line
        self.field = field


class ParsedFile:
    """Key/value entries with their line numbers, for error reporting."""

    def __init__(self, text, source):
        self.source = source
        self.entries = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            m = _LINE.match(line)
            if not m:
                raise ModelFileError(f"cannot parse {raw.strip()!r}", no, source=source)
            key, idx, val = m.group(1), m.group(2), m.group(3).strip()
            full = key if idx is None else (key, int(idx))
            if full in self.entries and key not in _REPEATABLE:
                raise ModelFileError("duplicate key", no, self.label(full), source)
            self.entries.setdefault(full, []).append((val, no))

    @staticmethod
    def label(full):
        return full if isinstance(full, str) else f"{full[0]}[{full[1]}]"

    def error(self, msg, full=None):
        line = self.entries[full][0][1] if full in self.entries else None
        return ModelFileError(msg, line, None if full is None else self.label(full), self.source)

    def get(self, full, default=None, required=False):
        if full not in self.entries:
            if required:
                raise ModelFileError("missing required key", field=self.label(full), source=self.source)
            return default
        return self.entries[full][0][0]

    def number(self, full, default=None, required=False, exact=False):
        raw = self.get(full, default=None, required=required)
        if raw is None:
            return default
        try:
            v = Fraction(raw)
        except (ValueError, ZeroDivisionError):
            raise self.error(f"not a number: {raw!r}", full) from None
        return v if exact else float(v)

    def numbers(self, full, required=False):
        raw = self.get(full, required=required)
        if raw is None:
            return []
        try:
            return [float(Fraction(x)) for x in raw.split()]
        except (ValueError, ZeroDivisionError):
            raise self.error(f"not a list of numbers: {raw!r}", full) from None

    def indexed(self, key):
        return sorted(k[1] for k in self.entries if isinstance(k, tuple) and k[0] == key)

    def unknown_keys(self, allowed):
        for full in self.entries:
            name = full if isinstance(full, str) else full[0]
            if name not in allowed:
                raise self.error("unknown key", full)


def _parse_finite(pf):
    pf.unknown_keys({"kind", "name", "types", "rate", "offspring", "yield_multiplier"})
    d_raw = pf.number("types", required=True, exact=True)
    if d_raw.denominator != 1 or d_raw < 1:
        raise pf.error("types must be a positive integer", "types")
    d = int(d_raw)
    rates = []
    for i in range(1, d + 1):
        r = pf.number(("rate", i), required=True)
        if not r > 0:
            raise pf.error("rate must be positive", ("rate", i))
        rates.append(r)
    for idx in pf.indexed("rate") + pf.indexed("offspring"):
        if not 1 <= idx <= d:
            raise pf.error(f"type index {idx} outside 1..{d}")
    tables = []
    for i in range(1, d + 1):
        full = ("offspring", i)
        if full not in pf.entries:
            raise ModelFileError("missing offspring law", field=pf.label(full), source=pf.source)
        rows = []
        for val, no in pf.entries[full]:
            if ":" not in val:
                raise ModelFileError("expected 'p: c_1 ... c_d'", no, pf.label(full), pf.source)
            p_raw, kids = val.split(":", 1)
            try:
                p = Fraction(p_raw.strip())
                if any(ch in p_raw for ch in ".eE"):
                    p = float(p)  # decimals are checked to a tolerance, fractions exactly
                cnt = [int(c) for c in kids.split()]
            except (ValueError, ZeroDivisionError):
                raise ModelFileError(f"bad outcome {val!r}", no, pf.label(full), pf.source) from None
            if len(cnt) != d:
                raise ModelFileError(f"expected {d} counts, got {len(cnt)}", no, pf.label(full), pf.source)
            rows.append((p, cnt))
        tables.append(rows)
    name = pf.get("name", default=Path(pf.source).stem)
    try:
        model = FiniteTypeModel(rates, tables, name=name)
    except ModelValidationError as e:
        raise ModelFileError(str(e), source=pf.source) from None
    kappa = pf.number("yield_multiplier")
    if kappa is not None:
        if not kappa > 0:
            raise pf.error("yield_multiplier must be positive", "yield_multiplier")
        if kappa != 1:
            model = model.with_yield_multiplier(kappa)
            model.name = name
    return model


def parse_model_text(text, source="<model>"):
    pf = ParsedFile(text, source)
    kind = pf.get("kind", required=True)
    if kind == "finite":
        return _parse_finite(pf)
    if kind == "nbp":
        from .nbp import parse_nbp
        return parse_nbp(pf)
    raise pf.error(f"unknown kind {kind!r}", "kind")


def bundled_models():
    root = resources.files("critbranch") / "data"
    return sorted(p.name[:-6] for p in root.iterdir() if p.name.endswith(".model"))


def load_model(name_or_path):
    """Load a model from a file path or a bundled name such as ``model-2t``."""
    path = Path(name_or_path)
    if path.is_file():
        return parse_model_text(path.read_text(), str(path))
    name = str(name_or_path)
    res = resources.files("critbranch") / "data" / f"{name}.model"
    if res.is_file():
        return parse_model_text(res.read_text(), f"{name}.model")
    raise ModelFileError(f"no model file or bundled model named {name_or_path!r} "
                         f"(bundled: {', '.join(bundled_models())})")


def model_hash(model):
    return hashlib.sha256(model.describe().encode()).hexdigest()


def format_float(x):
    return "%.17g" % x


def write_summary(path, payload):
    """JSON run summary; the timestamp is the only non-reproducible field."""
    data = dict(payload)
    data["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")
