import numpy as np
import pytest

from stratakit.core import (
    DegenerateDataError,
    DesignResult,
    GroupPartition,
    Propensity,
    PropensityMap,
    RandomSource,
    SchemaError,
    StratakitError,
    UnitSchema,
    UnitTable,
    load_units,
    round_half_down,
    standardize,
)


# ------------------------- Propensities -----------------------


def test_propensity_normalises_and_compares_exactly():
    assert Propensity(6, 8) == Propensity(3, 4)
    assert str(Propensity(6, 8)) == "3/4"
    assert Propensity(1, 3) < Propensity(3, 8) < Propensity(1, 2)
    assert float(Propensity(3, 8)) == 0.375


def test_propensity_parse():
    assert Propensity.parse("3/10") == Propensity(3, 10)
    assert Propensity.parse(" 2 / 4 ") == Propensity(1, 2)
    assert Propensity.parse("1") == Propensity(1, 1)
    with pytest.raises(StratakitError):
        Propensity.parse("0.5")


@pytest.mark.parametrize("a,k", [(0, 3), (5, 4), (1, 0), (-1, 2)])
def test_propensity_rejects_out_of_range(a, k):
    with pytest.raises(StratakitError):
        Propensity(a, k)


@pytest.mark.parametrize("n,level,expected", [
    (1000, "3/10", 300),
    (10, "3/8", 4),   # 3.75
    (4, "3/8", 1),    # 1.5 rounds down
    (10, "1/4", 2),   # 2.5 rounds down
    (7, "1/2", 3),
    (9, "1/1", 9),
])
def test_round_half_down(n, level, expected):
    assert round_half_down(n, Propensity.parse(level)) == expected


def test_propensity_map_levels_and_strata():
    pm = PropensityMap.parse(["1/2", "1/4", "2/4", "1/4", "1"])
    assert pm.levels == (Propensity(1, 4), Propensity(1, 2), Propensity(1, 1))
    np.testing.assert_array_equal(pm.stratum(Propensity(1, 2)), [0, 2])
    assert not pm.is_constant
    np.testing.assert_allclose(pm.floats(), [0.5, 0.25, 0.5, 0.25, 1.0])
    assert pm.subset([1, 3]).is_constant


# ----------------------------- Units --------------------------


def test_unit_table_validation():
    with pytest.raises(SchemaError):
        UnitTable(psi1=np.zeros((1, 2)))
    with pytest.raises(SchemaError, match="row 2"):
        UnitTable(psi1=np.zeros((3, 1)), cost=[1.0, 0.0, 2.0])
    with pytest.raises(SchemaError):
        UnitTable(psi1=[[0.0], [np.nan]])
    t = UnitTable(psi1=np.arange(6.0).reshape(3, 2))
    assert t.psi2_aliased and t.psi2 is t.psi1
    assert t.unit_ids() == ("0", "1", "2")
    with pytest.raises(ValueError):
        t.psi1[0, 0] = 9.0


def test_take_supports_repeated_rows():
    t = UnitTable(psi1=[[0.0], [1.0], [2.0]], cost=[1.0, 2.0, 3.0], ids=["a", "b", "c"])
    sub = t.take([2, 2, 0])
    np.testing.assert_array_equal(sub.cost, [3.0, 3.0, 1.0])
    assert sub.ids == ("c", "c", "a")


def test_load_units_parses_three_rows(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text("x1,x2,cost\n0.5,1,2\n1.5,2,3\n-1,0,1\n", encoding="utf-8")
    table = load_units(path, UnitSchema(psi1_cols=("x1", "x2"), cost_col="cost", y_col="y"))
    assert table.n == 3
    assert table.psi1.shape == (3, 2)
    np.testing.assert_array_equal(table.cost, [2.0, 3.0, 1.0])
    assert table.y_obs is None
    assert table.psi2_aliased


def test_load_units_names_bad_cost_row(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text("x1,cost\n1,2\n2,0\n3,1\n", encoding="utf-8")
    with pytest.raises(SchemaError, match=r"row 2.*cost"):
        load_units(path, UnitSchema(psi1_cols=("x1",), cost_col="cost"))


def test_load_units_names_non_numeric_column(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text("x1,x2\n1,2\n2,abc\n", encoding="utf-8")
    with pytest.raises(SchemaError, match=r"row 2, column 'x2'"):
        load_units(path, UnitSchema(psi1_cols=("x1", "x2")))


def test_load_units_allows_blank_outcomes(tmp_path):
    path = tmp_path / "u.csv"
    path.write_text("x1,y\n1,2.5\n2,\n3,1\n", encoding="utf-8")
    table = load_units(path, UnitSchema(psi1_cols=("x1",), y_col="y"))
    assert np.isnan(table.y_obs[1])
    assert table.y_obs[2] == 1.0


@pytest.mark.parametrize("body,col,schema", [
    ("x1,y\n1,2\n2,n/a\n", "y", UnitSchema(psi1_cols=("x1",), y_col="y")),
    ("x1\n1\ninf\n", "x1", UnitSchema(psi1_cols=("x1",))),
])
def test_load_units_rejects_unusable_cells(tmp_path, body, col, schema):
    path = tmp_path / "u.csv"
    path.write_text(body, encoding="utf-8")
    with pytest.raises(SchemaError, match=rf"row 2, column '{col}'"):
        load_units(path, schema)


def test_load_units_missing_file_and_column(tmp_path):
    with pytest.raises(SchemaError, match="no such file"):
        load_units(tmp_path / "nope.csv", UnitSchema(psi1_cols=("x",)))
    path = tmp_path / "u.csv"
    path.write_text("x1\n1\n2\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="x9"):
        load_units(path, UnitSchema(psi1_cols=("x9",)))


def test_standardize_hand_computed():
    t = standardize(UnitTable(psi1=[[1.0, 10.0], [2.0, 20.0], [3.0, 60.0]], cost=[1.0, 2.0, 3.0]))
    np.testing.assert_allclose(t.psi1[:, 0], [-1.0, 0.0, 1.0])
    np.testing.assert_allclose(t.psi1.var(axis=0, ddof=1), [1.0, 1.0])
    np.testing.assert_allclose(t.psi1.mean(axis=0), [0.0, 0.0], atol=1e-15)
    np.testing.assert_array_equal(t.cost, [1.0, 2.0, 3.0])


def test_standardize_is_idempotent():
    base = standardize(UnitTable(psi1=np.random.default_rng(1).normal(size=(30, 3))))
    again = standardize(base)
    np.testing.assert_allclose(again.psi1, base.psi1, atol=1e-12)


def test_standardize_rejects_constant_column():
    t = UnitTable(psi1=[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]], psi1_names=("a", "b"))
    with pytest.raises(DegenerateDataError, match="'b'"):
        standardize(t)


# --------------------------- Partitions -----------------------


def test_partition_validate_reports_problems():
    half = Propensity(1, 2)
    good = GroupPartition(((0, 1), (2, 3), (4,)), (half, half, half), frozenset({2}))
    assert good.validate(range(5)) == []
    bad = GroupPartition(((0, 1, 2), (2, 3)), (half, half))
    problems = bad.validate(range(4))
    assert any("reuses unit 2" in p for p in problems)
    assert any("has 3 units" in p for p in problems)


def test_merge_offsets_remainder_flags():
    half = Propensity(1, 2)
    a = GroupPartition(((0, 1), (2,)), (half, half), frozenset({1}))
    b = GroupPartition(((3, 4), (5,)), (half, half), frozenset({1}))
    merged = GroupPartition.merge([a, b])
    assert merged.remainder_groups == frozenset({1, 3})
    assert merged.units.tolist() == [0, 1, 2, 3, 4, 5]


def test_design_check_flags_violations():
    half = Propensity(1, 2)
    part = GroupPartition(((0, 1), (2, 3)), (half, half))
    q = PropensityMap.constant(4, half)
    ok = DesignResult([1, 0, 0, 1], [0, 0, 0, 1], part, GroupPartition((), ()), q, q, seed=1)
    assert ok.check() == []
    bad = DesignResult([1, 1, 0, 1], [0, 0, 1, 0], part, GroupPartition((), ()), q, q, seed=1)
    problems = bad.check()
    assert any("treated but not sampled" in p for p in problems)
    assert any("sampling group 0" in p for p in problems)


def test_complete_partition_counts_rounded_share():
    level = Propensity(3, 8)
    part = GroupPartition.complete_design(range(10), level)
    q = PropensityMap.constant(10, level)
    T = np.zeros(10, dtype=int)
    T[:4] = 1
    design = DesignResult(T, np.zeros(10), part, GroupPartition((), ()), q, q, seed=0)
    assert design.check() == []


# --------------------------- Randomness -----------------------


def test_random_source_streams_are_named_and_reproducible():
    a = RandomSource(5).generator("assignment", "3/8").random(4)
    b = RandomSource(5).generator("assignment", "3/8").random(4)
    c = RandomSource(5).generator("assignment", "1/2").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_child_matches_full_label_path():
    via_child = RandomSource(5).child("rep", 3).generator("dgp").random(3)
    direct = RandomSource(5).generator("rep", 3, "dgp").random(3)
    np.testing.assert_array_equal(via_child, direct)


def test_random_source_rejects_negative_seed():
    with pytest.raises(StratakitError):
        RandomSource(-1)
