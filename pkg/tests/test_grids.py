import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqcbf import grids
from eqcbf.errors import BadGrid, BadMagic, DimMismatch, NaNCell, OutOfDomain, TruncatedPayload, VersionMismatch
from eqcbf.grids import EXPLICIT, FAILED, INFERRED, Axis, GridSpec, ValueGrid


def _grid3(rng):
    spec = GridSpec.from_axes(Axis("x", -1, 1, 5), Axis("y", 0, 2, 3), Axis("psi", -np.pi, np.pi, 8, True))
    vals = rng.normal(size=spec.shape)
    prov = rng.integers(0, 2, size=spec.shape)
    return ValueGrid(spec, vals, prov, dict(system="bicycle", T=8.0, nested=dict(a=[1, 2])))


def test_lattice_point_is_exact(rng):
    g = _grid3(rng)
    pts = g.spec.points()
    np.testing.assert_array_equal(g.interpolate(pts), g.values.ravel())


def test_midpoint_linear():
    g = ValueGrid.filled(GridSpec.from_axes(Axis("x", 0, 1, 2)), [0.0, 2.0])
    assert g.interpolate([0.5]) == pytest.approx(1.0)


def test_periodic_wraparound():
    spec = GridSpec.from_axes(Axis("psi", 0, 2 * np.pi, 3, True))
    g = ValueGrid.filled(spec, [1.0, 4.0, 7.0])
    eps = 1e-3
    q = 2 * np.pi - eps
    # between the last slice (at 4 pi / 3, value 7) and the first (value 1)
    frac = (q - 4 * np.pi / 3) / (2 * np.pi / 3)
    assert g.interpolate([q]) == pytest.approx(7.0 + frac * (1.0 - 7.0))
    assert g.interpolate([-eps]) == pytest.approx(g.interpolate([q]))


def test_out_of_domain_and_nan_cell():
    g = ValueGrid.filled(GridSpec.from_axes(Axis("x", 0, 1, 3)), [0.0, np.nan, 1.0])
    assert g.provenance[1] == FAILED
    with pytest.raises(OutOfDomain):
        g.interpolate([1.5])
    with pytest.raises(NaNCell):
        g.interpolate([0.25])
    assert g.interpolate([1.0 + 1e-3], clamp_tol=0.01) == pytest.approx(1.0)


def test_degenerate_axis():
    spec = GridSpec.from_axes(Axis("x", -1, 1, 3), Axis("y", 0, 0, 1))
    g = ValueGrid.filled(spec, [[1.0], [2.0], [3.0]])
    assert g.interpolate([0.5, 0.0]) == pytest.approx(2.5)
    with pytest.raises(OutOfDomain):
        g.interpolate([0.5, 0.1])


def test_axis_validation():
    with pytest.raises(BadGrid):
        Axis("x", 0, 1, 0)
    with pytest.raises(BadGrid):
        Axis("x", 0, 1, 1)
    with pytest.raises(BadGrid):
        Axis("x", 1, 1, 3)
    with pytest.raises(BadGrid):
        GridSpec(())


def test_roundtrip_is_bit_exact(rng, tmp_path):
    g = _grid3(rng)
    path = tmp_path / "g.eqcb"
    grids.save(g, path)
    h = grids.load(path)
    assert h.spec == g.spec
    assert h.values.tobytes() == g.values.tobytes()
    np.testing.assert_array_equal(h.provenance, g.provenance)
    assert h.metadata == g.metadata
    assert grids.dumps(h) == grids.dumps(g)


def test_corrupted_files(rng):
    blob = grids.dumps(_grid3(rng))
    with pytest.raises(BadMagic):
        grids.loads(b"XXXX" + blob[4:])
    with pytest.raises(VersionMismatch):
        grids.loads(blob[:4] + (7).to_bytes(4, "little") + blob[8:])
    with pytest.raises(TruncatedPayload):
        grids.loads(blob[:-5])
    with pytest.raises(TruncatedPayload):
        grids.loads(blob[:6])


def test_compare(rng):
    g = _grid3(rng)
    assert grids.compare(g, g).max_abs_dev == 0.0
    shifted = ValueGrid(g.spec, g.values + 0.01, g.provenance)
    c = grids.compare(g, shifted)
    assert c.mean_abs_dev == pytest.approx(0.01) and c.max_abs_dev == pytest.approx(0.01)
    holes = g.values.copy()
    holes[0, 0, :3] = np.nan
    c = grids.compare(g, ValueGrid.filled(g.spec, holes))
    assert c.n_skipped == 3 and c.n_compared == g.spec.size - 3
    other = ValueGrid.filled(GridSpec.from_axes(Axis("x", 0, 1, 2)), [0.0, 1.0])
    with pytest.raises(DimMismatch):
        grids.compare(g, other)


def test_config_hash_changes():
    a = grids.config_hash(dict(T=8.0, gamma=0.1))
    assert a == grids.config_hash(dict(gamma=0.1, T=8.0))
    assert a != grids.config_hash(dict(T=8.0, gamma=0.11))


def test_slice_and_csv(rng, tmp_path):
    g = _grid3(rng)
    s = grids.slice_grid(g, dict(psi=0.0))
    assert s.spec.names == ["x", "y"]
    np.testing.assert_array_equal(s.values, g.values[:, :, 4])
    with pytest.warns(UserWarning):
        off = grids.slice_grid(g, dict(psi=0.1))
    np.testing.assert_array_equal(off.values, s.values)
    with pytest.raises(KeyError):
        grids.slice_grid(g, dict(theta=0.0))
    path = tmp_path / "s.csv"
    grids.export_csv(g, path, dict(psi=0.0))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,y,value,provenance"
    assert len(lines) == 1 + 15
    assert lines[1].split(",")[-1] in ("explicit", "inferred")


def test_census_counts():
    g = ValueGrid(GridSpec.from_axes(Axis("x", 0, 1, 4)), [0, 1, 2, 3], [EXPLICIT, INFERRED, INFERRED, FAILED])
    assert g.counts() == dict(explicit=1, inferred=2, failed=1)


@settings(deadline=None, max_examples=80)
@given(st.floats(-1, 1), st.floats(0, 2), st.floats(-10, 10), st.integers(0, 10_000))
def test_interpolation_within_stencil_bounds(x, y, psi, seed):
    g = _grid3(np.random.default_rng(seed))
    v = g.interpolate([x, y, psi])
    assert g.values.min() - 1e-12 <= v <= g.values.max() + 1e-12
    # stencil of the query
    ix = np.clip(int(np.floor((x + 1) / 0.5)), 0, 3)
    iy = np.clip(int(np.floor(y / 1.0)), 0, 1)
    k = int(np.floor((np.mod(psi + np.pi, 2 * np.pi)) / (np.pi / 4))) % 8
    corners = g.values[np.ix_([ix, ix + 1], [iy, iy + 1], [k, (k + 1) % 8])]
    assert corners.min() - 1e-12 <= v <= corners.max() + 1e-12
