"""Datasets, CSV ingestion and the model specification file.

Data files are CSV with a header.  Responses are either a single column
(exact values or ordinal categories ``1..K``) or a pair of bound columns in
which an empty cell means an infinite bound.

Specification files are INI-style with sections ``[model]``, ``[data]``,
``[optimizer]`` and, for simulation, ``[design]`` and ``[parameters]``::

    [model]
    response = continuous        ; continuous | censored | ordinal
    basis = bernstein            ; linear | loglinear | bernstein | ordinal
    order = 6
    link = probit                ; probit | logit | cloglog
    marginalization = M1         ; M1 | M2

    [data]
    cluster = id
    y = response                 ; or y_lower / y_upper
    fixed = trt, time
    random = 1, time             ; "1" is the constant column

    [optimizer]
    cubature = qmc               ; qmc | sparse
    nodes = 8192                 ; QMC nodes or sparse-grid level
    adaptive = yes               ; per-cluster centring and scaling of the nodes

``gamma`` packs the lower triangle of ``Lambda`` row by row.
"""

from __future__ import annotations

import configparser
import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bases import BasisKind, TransformationBasis, with_data_support
from .integrate import CubatureRule
from .likelihood import ClusterData, ModelSpec
from .links import get_link

INTERCEPT = "1"
RESPONSES = ("continuous", "censored", "ordinal")


class DataError(ValueError):
    """Malformed data file; messages carry the offending line."""


class SpecError(ValueError):
    """Malformed specification file; messages carry the offending line."""


@dataclass(frozen=True)
class RoleMap:
    """Column roles of a data file.

    Args:
        cluster: cluster id column.
        y: exact response or ordinal category column.
        y_lower, y_upper: bound columns of interval responses.
        fixed: fixed-effects columns.
        random: random-effects columns; ``"1"`` is the constant column.
        strata: optional column selecting the transformation function.
        categories: number of ordinal categories, or ``None``.
    """

    cluster: str = "cluster"
    y: str | None = "y"
    y_lower: str | None = None
    y_upper: str | None = None
    fixed: tuple[str, ...] = ()
    random: tuple[str, ...] = (INTERCEPT,)
    strata: str | None = None
    categories: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        if INTERCEPT in self.fixed:
            raise DataError("fixed effects must not contain the constant column; the intercept is part of h")
        has_y = self.y is not None
        has_bounds = self.y_lower is not None or self.y_upper is not None
        if has_y == has_bounds:
            raise DataError("specify either y or the pair y_lower/y_upper")
        if has_bounds and (self.y_lower is None or self.y_upper is None):
            raise DataError("interval responses need both y_lower and y_upper")

    @property
    def interval(self) -> bool:
        return self.y is None


@dataclass
class Dataset:
    """Clustered observations in first-appearance order of cluster ids."""

    clusters: list[ClusterData]
    roles: RoleMap
    strata_levels: tuple[str, ...] = ()
    ordinal: bool = False

    @property
    def fixed_names(self) -> tuple[str, ...]:
        return self.roles.fixed

    @property
    def random_names(self) -> tuple[str, ...]:
        return self.roles.random

    @property
    def n_obs(self) -> int:
        return sum(c.size for c in self.clusters)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def exact(self) -> bool:
        return self.clusters[0].exact

    def response_values(self) -> np.ndarray:
        """Finite bound values of all observations (for basis supports)."""
        v = np.concatenate([np.concatenate([c.y_lower, c.y_upper]) for c in self.clusters])
        return v[np.isfinite(v)]


def _float(cell: str, what: str, line: int, path) -> float:
    try:
        val = float(cell)
    except ValueError:
        raise DataError(f"{path}:{line}: {what} {cell!r} is not a number") from None
    if math.isnan(val):
        raise DataError(f"{path}:{line}: {what} is NaN")
    return val


def parse_dataset(path, roles: RoleMap) -> Dataset:
    """Read and validate a CSV file.

    Empty bound cells are infinite (lower: ``-inf``, upper: ``inf``).
    Ordinal categories ``k`` become category-index bounds ``(k - 1, k]``.

    Raises:
        DataError: unknown column, malformed row, or inconsistent responses;
            the message names the column and line.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        col = {name: i for i, name in enumerate(header)}
        needed = [roles.cluster] + list(roles.fixed) + [r for r in roles.random if r != INTERCEPT]
        needed += [roles.y] if roles.y else [roles.y_lower, roles.y_upper]
        if roles.strata:
            needed.append(roles.strata)
        for name in needed:
            if name not in col:
                raise DataError(f"{path}:1: column {name!r} not found in header {header}")
        order: list[str] = []
        rows: dict[str, dict[str, list]] = {}
        strata_levels: dict[str, int] = {}
        K = roles.categories
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            cid = row[col[roles.cluster]].strip()
            if not cid:
                raise DataError(f"{path}:{line}: missing cluster id")
            if roles.y:
                cell = row[col[roles.y]].strip()
                if not cell:
                    raise DataError(f"{path}:{line}: missing response in column {roles.y!r}")
                val = _float(cell, f"response {roles.y!r}", line, path)
                if K is not None:
                    if val != int(val) or not 1 <= val <= K:
                        raise DataError(f"{path}:{line}: category {cell!r} outside 1..{K}")
                    lo = -np.inf if val == 1 else val - 1
                    up = np.inf if val == K else val
                else:
                    lo = up = val
            else:
                lc = row[col[roles.y_lower]].strip()
                uc = row[col[roles.y_upper]].strip()
                lo = -np.inf if not lc else _float(lc, f"bound {roles.y_lower!r}", line, path)
                up = np.inf if not uc else _float(uc, f"bound {roles.y_upper!r}", line, path)
                if not lo < up:
                    raise DataError(f"{path}:{line}: lower bound must be below upper bound (got {lo}, {up})")
            xs = []
            for name in roles.fixed:
                cell = row[col[name]].strip()
                if not cell:
                    raise DataError(f"{path}:{line}: missing value in column {name!r}")
                xs.append(_float(cell, f"column {name!r}", line, path))
            us = []
            for name in roles.random:
                if name == INTERCEPT:
                    us.append(1.0)
                    continue
                cell = row[col[name]].strip()
                if not cell:
                    raise DataError(f"{path}:{line}: missing value in column {name!r}")
                us.append(_float(cell, f"column {name!r}", line, path))
            s = 0
            if roles.strata:
                level = row[col[roles.strata]].strip()
                if not level:
                    raise DataError(f"{path}:{line}: missing stratum in column {roles.strata!r}")
                s = strata_levels.setdefault(level, len(strata_levels))
            if cid not in rows:
                order.append(cid)
                rows[cid] = {"lo": [], "up": [], "X": [], "U": [], "s": [], "line": line}
            r = rows[cid]
            r["lo"].append(lo)
            r["up"].append(up)
            r["X"].append(xs)
            r["U"].append(us)
            r["s"].append(s)
    if not order:
        raise DataError(f"{path}: no observations")
    Q, R = len(roles.fixed), len(roles.random)
    clusters = []
    for cid in order:
        r = rows[cid]
        try:
            clusters.append(
                ClusterData(
                    cid,
                    r["lo"],
                    r["up"],
                    np.array(r["X"], dtype=float).reshape(len(r["lo"]), Q),
                    np.array(r["U"], dtype=float).reshape(len(r["lo"]), R),
                    np.array(r["s"]) if roles.strata else None,
                )
            )
        except ValueError as exc:
            raise DataError(f"{path}:{r['line']}: {exc}") from None
    return Dataset(clusters, roles, tuple(strata_levels), ordinal=K is not None)


def format_number(v: float) -> str:
    """Shortest text that round-trips at 17 significant digits."""
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def write_dataset(dataset: Dataset, path) -> None:
    """Write a dataset in the layout :func:`parse_dataset` reads back."""
    roles = dataset.roles
    header = [roles.cluster]
    header += [roles.y] if roles.y else [roles.y_lower, roles.y_upper]
    header += list(roles.fixed) + [r for r in roles.random if r != INTERCEPT]
    if roles.strata:
        header.append(roles.strata)
    levels = dataset.strata_levels or tuple(str(i + 1) for i in range(1 + max(
        (int(c.strata.max()) for c in dataset.clusters if c.strata is not None), default=0)))
    rand_idx = [i for i, r in enumerate(roles.random) if r != INTERCEPT]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for c in dataset.clusters:
            for j in range(c.size):
                row = [c.cluster_id]
                if roles.y:
                    if roles.categories is not None:
                        row.append(str(int(c.y_upper[j]) if np.isfinite(c.y_upper[j]) else roles.categories))
                    else:
                        row.append(format_number(c.y_lower[j]))
                else:
                    row += ["" if np.isinf(v) else format_number(v) for v in (c.y_lower[j], c.y_upper[j])]
                row += [format_number(v) for v in c.X[j]]
                row += [format_number(c.U[j, i]) for i in rand_idx]
                if roles.strata:
                    row.append(levels[int(c.strata[j])])
                w.writerow(row)


# ---------------------------------------------------------------------------
# specification files
# ---------------------------------------------------------------------------


@dataclass
class SpecFile:
    """Parsed specification file."""

    path: str
    model: ModelSpec
    response: str
    roles: RoleMap
    rule: CubatureRule
    tol: float = 1e-6
    max_outer: int = 20
    support: tuple[float, float] | None = None
    design: dict = field(default_factory=dict)
    parameters: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict)

    def resolve(self, dataset: Dataset) -> ModelSpec:
        """Model with Bernstein support and stratum count taken from ``dataset``."""
        basis = with_data_support(self.model.basis, dataset.response_values())
        n_strata = max(1, len(dataset.strata_levels)) if self.roles.strata else 1
        return ModelSpec(basis, self.model.link, self.model.marginalization, self.model.R, n_strata)

    def where(self, section: str, key: str) -> str:
        line = self.lines.get((section, key))
        return f"{self.path}:{line}" if line else f"{self.path}: [{section}] {key}"


def _line_map(text: str) -> dict:
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip().lower()
            lines[(section, None)] = no
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", s)
        if m and section:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def _split(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _boolean(value: str) -> bool:
    return configparser.ConfigParser.BOOLEAN_STATES[value.lower()]


def parse_spec(path) -> SpecFile:
    """Parse a specification file.

    Raises:
        SpecError: unknown section/key or invalid value, with its line.
    """
    path = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecError(f"{path}: {exc.strerror}") from None
    lines = _line_map(text)
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        cp.read_string(text, source=path)
    except configparser.Error as exc:
        raise SpecError(f"{path}: {exc}") from None

    def where(sec, key=None):
        line = lines.get((sec, key)) or lines.get((sec, None))
        return f"{path}:{line}" if line else path

    allowed = {
        "model": {"response", "basis", "order", "categories", "support", "link", "marginalization"},
        "data": {"cluster", "y", "y_lower", "y_upper", "fixed", "random", "strata"},
        "optimizer": {"tol", "max_outer", "cubature", "nodes", "seed", "adaptive"},
        "design": {"clusters", "size", "seed", "covariates", "round", "slope_times"},
        "parameters": {"theta", "beta", "gamma"},
    }
    for sec in cp.sections():
        if sec not in allowed:
            raise SpecError(f"{where(sec)}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in allowed[sec]:
                raise SpecError(f"{where(sec, key)}: unknown key {key!r} in [{sec}]")
    if "model" not in cp:
        raise SpecError(f"{path}: missing [model] section")
    m = cp["model"]
    d = cp["data"] if "data" in cp else {}
    o = cp["optimizer"] if "optimizer" in cp else {}

    def get(sec, sect, key, conv, default=None):
        if key not in sect:
            return default
        raw = sect[key].strip()
        try:
            return conv(raw)
        except (ValueError, KeyError) as exc:
            raise SpecError(f"{where(sec, key)}: invalid {key} {raw!r}: {exc}") from None

    response = get("model", m, "response", str.lower, "continuous")
    if response not in RESPONSES:
        raise SpecError(f"{where('model', 'response')}: response must be one of {', '.join(RESPONSES)}")
    default_basis = "ordinal" if response == "ordinal" else "linear"
    kind = get("model", m, "basis", lambda s: BasisKind(s.lower()), BasisKind(default_basis))
    categories = get("model", m, "categories", int)
    if response == "ordinal":
        if categories is None or categories < 2:
            raise SpecError(f"{where('model', 'categories')}: ordinal responses need categories >= 2")
        if kind is not BasisKind.ORDINAL:
            raise SpecError(f"{where('model', 'basis')}: ordinal responses use the ordinal basis")
        order = categories - 1
    else:
        if kind is BasisKind.ORDINAL:
            raise SpecError(f"{where('model', 'basis')}: the ordinal basis needs response = ordinal")
        order = get("model", m, "order", int, 6 if kind is BasisKind.BERNSTEIN else 1)
    support = get("model", m, "support", lambda s: tuple(float(v) for v in _split(s)))
    if support is not None and len(support) != 2:
        raise SpecError(f"{where('model', 'support')}: support needs two values")
    try:
        basis = TransformationBasis(kind, order, support)
    except ValueError as exc:
        raise SpecError(f"{where('model', 'order')}: {exc}") from None
    link = get("model", m, "link", get_link, get_link("probit"))
    scheme = get("model", m, "marginalization", lambda s: s.upper(), "M1")
    if scheme not in ("M1", "M2"):
        raise SpecError(f"{where('model', 'marginalization')}: marginalization must be M1 or M2")

    random = get("data", d, "random", _split, (INTERCEPT,))
    if not random:
        raise SpecError(f"{where('data', 'random')}: at least one random-effects column is required")
    fixed = get("data", d, "fixed", _split, ())
    if INTERCEPT in fixed:
        raise SpecError(f"{where('data', 'fixed')}: fixed effects must not contain the constant column; "
                        "the intercept is part of h")
    y = get("data", d, "y", str)
    y_lower = get("data", d, "y_lower", str)
    y_upper = get("data", d, "y_upper", str)
    if response == "censored":
        if y is not None or y_lower is None or y_upper is None:
            raise SpecError(f"{where('data', 'y_lower')}: censored responses need y_lower and y_upper (and no y)")
    else:
        if y_lower is not None or y_upper is not None:
            raise SpecError(f"{where('data', 'y_lower')}: y_lower/y_upper are only allowed for censored responses")
        y = y or "y"
    try:
        roles = RoleMap(
            cluster=get("data", d, "cluster", str, "cluster"),
            y=y if response != "censored" else None,
            y_lower=y_lower,
            y_upper=y_upper,
            fixed=fixed,
            random=random,
            strata=get("data", d, "strata", str),
            categories=categories if response == "ordinal" else None,
        )
        model = ModelSpec(basis, link, scheme, len(random))
    except ValueError as exc:
        raise SpecError(f"{where('data')}: {exc}") from None
    try:
        rule = CubatureRule(
            get("optimizer", o, "cubature", str.lower, "qmc"),
            get("optimizer", o, "nodes", int),
            get("optimizer", o, "seed", int, 29),
            get("optimizer", o, "adaptive", _boolean, True),
        )
    except ValueError as exc:
        raise SpecError(f"{where('optimizer', 'cubature')}: {exc}") from None
    design = {k: v.strip() for k, v in cp["design"].items()} if "design" in cp else {}
    parameters = {}
    if "parameters" in cp:
        for key, raw in cp["parameters"].items():
            parameters[key] = get("parameters", cp["parameters"], key, lambda s: np.array([float(v) for v in _split(s)]))
    return SpecFile(
        path=path,
        model=model,
        response=response,
        roles=roles,
        rule=rule,
        tol=get("optimizer", o, "tol", float, 1e-6),
        max_outer=get("optimizer", o, "max_outer", int, 20),
        support=support,
        design=design,
        parameters=parameters,
        lines=lines,
    )
