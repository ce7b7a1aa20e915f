import numpy as np
import pytest

from maxtomo.fem import MaterialField, PhysicsParams
from maxtomo.forward import ForwardModel
from maxtomo.phantom import EPS_GEL
from maxtomo.scattering import (ScatteringError, ScatteringMatrix, compute_smatrix, magnitude_db,
                                normalize_row, opposite_index, read_smatrix_csv,
                                write_smatrix_csv)


def test_mode_matching_trace_gives_one(small_model, small_chamber):
    modes = small_model.modes
    fields = [modes[3].evaluate] * len(modes)
    S = compute_smatrix(fields, modes, mesh=small_chamber)
    assert abs(S.values[3, 3] - 1) <= 1e-10


def test_rotated_trace_gives_minus_i(small_model, small_chamber):
    modes = small_model.modes
    fields = [lambda x: 1j * modes[0].evaluate(x)] * len(modes)
    S = compute_smatrix(fields, modes, mesh=small_chamber)
    assert abs(S.values[0, 0] + 1j) <= 1e-10


def test_zero_field_gives_zero(small_model):
    U = np.zeros((small_model.dof_map.n_dofs, small_model.n_ports), dtype=complex)
    S = compute_smatrix(U, small_model.modes)
    assert np.all(S.values == 0)


def test_missing_columns_rejected(small_model):
    U = np.zeros((small_model.dof_map.n_dofs, 3), dtype=complex)
    with pytest.raises(ScatteringError, match="missing"):
        compute_smatrix(U, small_model.modes)


def test_amplitude_invariance(small_chamber):
    mat = MaterialField.uniform(small_chamber, EPS_GEL)
    S1 = ForwardModel(small_chamber, PhysicsParams(amplitude=1.0)).forward(mat).smatrix
    S10 = ForwardModel(small_chamber, PhysicsParams(amplitude=10.0)).forward(mat).smatrix
    assert np.max(np.abs(S10.values - S1.values)) <= 1e-10 * np.max(np.abs(S1.values))


def test_normalization_sets_opposite_to_one(rng):
    S = ScatteringMatrix(rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8)))
    for j in range(8):
        i = opposite_index(j, 8)
        out = normalize_row(S, j, i)
        assert out.values[i, j] == 1 + 0j
        assert magnitude_db(out.values[i, j]) == 0.0


def test_normalization_scale_invariance(rng):
    row = rng.normal(size=8) + 1j * rng.normal(size=8)
    c = 0.3 - 2.1j
    assert np.allclose(normalize_row(row, 0, 4), normalize_row(c * row, 0, 4), rtol=1e-14)


def test_normalization_zero_opposite():
    with pytest.raises(ScatteringError, match="zero"):
        normalize_row(np.array([1.0, 0.0, 2.0, 3.0]), 0, 1)


def test_opposite_index_within_ring():
    assert [opposite_index(j, 8) for j in range(8)] == [4, 5, 6, 7, 0, 1, 2, 3]
    assert opposite_index(9, 8) == 13


def test_magnitude_db():
    assert magnitude_db(1.0) == 0.0
    assert np.isclose(magnitude_db(0.1), -20.0)
    assert np.isclose(magnitude_db(3 + 4j), 20 * np.log10(5))
    assert abs(magnitude_db(3 + 4j) - 13.979) < 1e-3
    with pytest.warns(RuntimeWarning):
        assert magnitude_db(0.0) == -np.inf


def test_csv_roundtrip_is_bit_exact(tmp_path, rng):
    vals = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
    mask = np.ones((4, 4), dtype=bool)
    mask[2, 1] = False
    S = ScatteringMatrix(vals, mask)
    p = tmp_path / "s.csv"
    write_smatrix_csv(S, p)
    text = p.read_text()
    assert text.startswith("tx,rx,re,im\n")
    assert len(text.splitlines()) == 1 + 15
    back = read_smatrix_csv(p, 4)
    assert np.array_equal(back.mask, mask)
    assert np.array_equal(back.values[mask], vals[mask])


def test_csv_bad_header(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("a,b,c,d\n")
    with pytest.raises(ScatteringError, match="header"):
        read_smatrix_csv(p)


def test_masked_entries_are_never_read():
    vals = np.ones((2, 2)) * np.nan
    S = ScatteringMatrix(vals, np.zeros((2, 2), dtype=bool))
    assert np.all(S.values == 0)
