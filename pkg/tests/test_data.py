import numpy as np
import pytest

from mitram.bases import BasisKind
from mitram.data import DataError, RoleMap, SpecError, format_number, parse_dataset, parse_spec, write_dataset


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_two_rows_one_cluster(tmp_path):
    p = write(tmp_path, "d.csv", "cluster,y\na,1.5\na,2.5\n")
    ds = parse_dataset(p, RoleMap())
    assert ds.n_clusters == 1 and ds.clusters[0].size == 2 and ds.exact
    np.testing.assert_array_equal(ds.clusters[0].U, [[1.0], [1.0]])


def test_empty_bounds_are_infinite(tmp_path):
    p = write(tmp_path, "d.csv", "id,lo,hi,x\n1,2.0,,0.5\n1,,3.0,1.5\n2,1,2,0\n")
    ds = parse_dataset(p, RoleMap(cluster="id", y=None, y_lower="lo", y_upper="hi", fixed=("x",)))
    c = ds.clusters[0]
    assert c.y_upper[0] == np.inf and c.y_lower[1] == -np.inf
    assert not ds.exact


def test_non_contiguous_clusters_first_appearance(tmp_path):
    p = write(tmp_path, "d.csv", "cluster,y\nb,1\na,2\nb,3\n")
    ds = parse_dataset(p, RoleMap())
    assert [c.cluster_id for c in ds.clusters] == ["b", "a"]
    np.testing.assert_array_equal(ds.clusters[0].y_lower, [1, 3])


def test_ordinal_categories(tmp_path):
    p = write(tmp_path, "d.csv", "cluster,y\na,1\na,2\na,3\n")
    c = parse_dataset(p, RoleMap(categories=3)).clusters[0]
    np.testing.assert_array_equal(c.y_lower, [-np.inf, 1, 2])
    np.testing.assert_array_equal(c.y_upper, [1, 2, np.inf])
    with pytest.raises(DataError, match=":3:"):
        parse_dataset(write(tmp_path, "e.csv", "cluster,y\na,1\na,4\n"), RoleMap(categories=3))


@pytest.mark.parametrize(
    "text, roles, pattern",
    [
        ("cluster,y\na,1\na,x\n", RoleMap(), r"d\.csv:3: response 'y'"),
        ("cluster,y\na,1\na\n", RoleMap(), r":3: expected 2 fields"),
        ("cluster,y\na,1\n", RoleMap(fixed=("age",)), r":1: column 'age'"),
        ("cluster,y,x\na,1,\n", RoleMap(fixed=("x",)), r":2: missing value in column 'x'"),
        ("cluster,lo,hi\na,2,1\n", RoleMap(y=None, y_lower="lo", y_upper="hi"), r":2: lower bound"),
        ("cluster,y\n,1\n", RoleMap(), r":2: missing cluster id"),
        ("cluster,y\n", RoleMap(), "no observations"),
    ],
)
def test_line_numbered_errors(tmp_path, text, roles, pattern):
    with pytest.raises(DataError, match=pattern):
        parse_dataset(write(tmp_path, "d.csv", text), roles)


def test_rolemap_validation():
    with pytest.raises(DataError):
        RoleMap(y="y", y_lower="lo", y_upper="hi")
    with pytest.raises(DataError):
        RoleMap(y=None, y_lower="lo")


def test_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    roles = RoleMap(cluster="id", y=None, y_lower="lo", y_upper="hi", fixed=("x",), random=("1", "t"), strata="s")
    lines = ["id,lo,hi,x,t,s"]
    for i in range(30):
        lo = rng.normal()
        lo_cell = "" if i % 5 == 0 else repr(lo)
        hi_cell = "" if i % 6 == 0 else repr(lo + 1)
        lines.append(f"c{i % 7},{lo_cell},{hi_cell},{rng.normal()!r},{i / 3!r},{'ab'[i % 2]}")
    p = write(tmp_path, "d.csv", "\n".join(lines) + "\n")
    a = parse_dataset(p, roles)
    write_dataset(a, tmp_path / "o.csv")
    b = parse_dataset(tmp_path / "o.csv", roles)
    assert a.strata_levels == b.strata_levels
    for x, y in zip(a.clusters, b.clusters):
        assert x.cluster_id == y.cluster_id
        for f in ("y_lower", "y_upper", "X", "U", "strata"):
            np.testing.assert_array_equal(getattr(x, f), getattr(y, f))
    write_dataset(b, tmp_path / "o2.csv")
    assert (tmp_path / "o.csv").read_bytes() == (tmp_path / "o2.csv").read_bytes()


def test_format_number():
    assert format_number(0.1) == "0.10000000000000001"
    assert float(format_number(np.pi)) == np.pi
    assert format_number(np.inf) == "inf"


SPEC = """\
[model]
response = ordinal   ; comment
categories = 4
link = logit
marginalization = M2

[data]
cluster = id
y = grade
fixed = trt, time
random = 1, time

[optimizer]
cubature = sparse
nodes = 12
"""


def test_parse_spec(tmp_path):
    sf = parse_spec(write(tmp_path, "m.spec", SPEC))
    assert sf.model.basis.kind is BasisKind.ORDINAL and sf.model.basis.n_categories == 4
    assert sf.model.link.name == "logit" and sf.model.marginalization.value == "M2"
    assert sf.model.R == 2 and sf.roles.fixed == ("trt", "time") and sf.roles.categories == 4
    assert sf.rule.kind == "sparse" and sf.rule.nodes == 12 and sf.rule.adaptive
    sf = parse_spec(write(tmp_path, "m.spec", SPEC + "adaptive = no\n"))
    assert not sf.rule.adaptive


@pytest.mark.parametrize(
    "old, new, pattern",
    [
        ("link = logit", "link = cauchit", r"m\.spec:4: invalid link"),
        ("marginalization = M2", "marginalization = M3", r"m\.spec:5:"),
        ("nodes = 12", "nodes = many", r"m\.spec:15: invalid nodes"),
        ("nodes = 12", "depth = 3", r"m\.spec:15: unknown key 'depth'"),
        ("[optimizer]", "[solver]", r"m\.spec:13: unknown section"),
        ("categories = 4", "categories = 1", r"m\.spec:3:"),
        ("nodes = 12", "adaptive = maybe", r"m\.spec:15: invalid adaptive"),
        ("cubature = sparse", "cubature = mcmc", r"m\.spec:14:"),
        ("fixed = trt, time", "fixed = 1, trt", r"m\.spec:10:.*constant column"),
    ],
)
def test_spec_errors_are_line_anchored(tmp_path, old, new, pattern):
    with pytest.raises(SpecError, match=pattern):
        parse_spec(write(tmp_path, "m.spec", SPEC.replace(old, new)))


def test_spec_resolves_support_and_strata(tmp_path):
    sf = parse_spec(write(tmp_path, "m.spec", "[model]\nbasis = bernstein\norder = 3\n[data]\nstrata = g\n"))
    ds = parse_dataset(write(tmp_path, "d.csv", "cluster,y,g\na,1,u\na,4,v\nb,2,u\n"), sf.roles)
    spec = sf.resolve(ds)
    assert spec.basis.support == (1.0, 4.0) and spec.n_strata == 2 and spec.P == 8
