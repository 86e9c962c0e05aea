import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evppi import psa
from evppi.errors import (DegenerateColumnError, DomainError, InsufficientDataError, ParseError,
                          SchemaError, ValidationError)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def nb_matrices(min_rows=1):
    return st.integers(min_rows, 30).flatmap(
        lambda s: st.integers(2, 5).flatmap(lambda t: arrays(float, (s, t), elements=finite)))


def _write(tmp_path, text):
    p = tmp_path / "psa.csv"
    p.write_text(text)
    return p


class TestLoad:
    def test_effect_cost_mode(self, tmp_path):
        p = _write(tmp_path, "p1,p2,e0,c0,e1,c1\n1,2,0.1,10,0.2,20\n3,4,0.3,30,0.4,40\n5,6,0.5,50,0.6,60\n")
        ds = psa.load_psa(p)
        assert (ds.S, ds.P, ds.T) == (3, 2, 1)
        assert ds.mode == "effect-cost"
        assert ds.param_names == ("p1", "p2")
        np.testing.assert_array_equal(ds.params[:, 0], [1, 3, 5])

    def test_net_benefit_mode(self, tmp_path):
        ds = psa.load_psa(_write(tmp_path, "a,nb0,nb1\n1,2,3\n2,3,4\n"))
        assert ds.mode == "net-benefit"
        assert ds.T == 1

    def test_na_cell_names_row_and_column(self, tmp_path):
        with pytest.raises(ParseError) as err:
            psa.load_psa(_write(tmp_path, "p1,e0,c0,e1,c1\n1,2,3,4,5\n1,NA,3,4,5\n"))
        assert err.value.row == 2 and err.value.column == "e0"
        assert "e0" in str(err.value)

    def test_missing_declared_column(self, tmp_path):
        p = _write(tmp_path, "p1,e0,c0,e1,c1\n1,2,3,4,5\n1,2,3,4,5\n")
        with pytest.raises(SchemaError):
            psa.load_psa(p, psa.PsaSchema(params=["p9"]))

    def test_too_few_rows(self, tmp_path):
        with pytest.raises(InsufficientDataError):
            psa.load_psa(_write(tmp_path, "p1,nb0,nb1\n1,2,3\n"))

    def test_round_trip(self, tmp_path, savi_data):
        p = tmp_path / "out.csv"
        savi_data.to_csv(p)
        back = psa.load_psa(p)
        np.testing.assert_array_equal(back.params, savi_data.params)
        np.testing.assert_array_equal(back.net_benefits, savi_data.net_benefits)


class TestNetBenefit:
    @pytest.mark.parametrize("e, c, k, expected", [(1, 0, 0, 0), (-1, 1, 3, -4), (-0.5, 1.5, 3, -3)])
    def test_values(self, e, c, k, expected):
        ds = psa.PsaDataset(np.array([[0.0], [1.0]]), ("p",), effects=np.full((2, 2), e),
                            costs=np.full((2, 2), c))
        np.testing.assert_allclose(psa.net_benefit(ds, k).nb, expected)

    def test_negative_wtp(self):
        ds = psa.PsaDataset(np.array([[0.0], [1.0]]), ("p",), effects=np.ones((2, 2)), costs=np.ones((2, 2)))
        with pytest.raises(DomainError):
            psa.net_benefit(ds, -1)

    def test_net_benefit_mode_ignores_wtp(self):
        ds = psa.PsaDataset(np.array([[0.0], [1.0]]), ("p",), net_benefits=np.array([[1.0, 2], [3, 4]]))
        nb = psa.net_benefit(ds, 5)
        np.testing.assert_array_equal(nb.nb, ds.net_benefits)
        assert nb.warnings


class TestIncremental:
    def test_examples(self):
        out = psa.incremental_net_benefit(psa.NetBenefitMatrix(np.array([[1.0, 2], [3, 1]])))
        np.testing.assert_array_equal(out.nb, [[0, 1], [0, -2]])
        same = psa.incremental_net_benefit(psa.NetBenefitMatrix(np.array([[5.0, 5], [7, 7]])))
        np.testing.assert_array_equal(same.nb, 0)
        toy = psa.incremental_net_benefit(psa.NetBenefitMatrix(np.array([[-4.0, -3.0]])))
        np.testing.assert_array_equal(toy.nb, [[0, 1]])

    def test_needs_a_comparator(self):
        with pytest.raises(ValidationError):
            psa.incremental_net_benefit(psa.NetBenefitMatrix(np.ones((3, 1))))


class TestEstimators:
    def test_evpi_examples(self):
        assert psa.evpi_mc(np.array([[1.0, 1], [2, 2]])) == 0
        assert psa.evpi_mc(np.array([[3.0, 1.0]])) == 0
        assert psa.evpi_mc(np.array([[1.0, 2], [3, 1]])) == pytest.approx(0.5)

    def test_evppi_examples(self):
        assert psa.evppi_from_fitted(np.array([[1.0, 2], [1, 2]])) == 0
        m = np.array([[1.0, 2], [3, 1], [0, 5]])
        assert psa.evppi_from_fitted(m) == psa.evpi_mc(m)
        assert psa.evppi_from_fitted(np.array([[0.0, 1], [0, -1]])) == pytest.approx(0.5)

    def test_optimal_arm_ties_go_low(self):
        assert psa.optimal_arm(np.array([[1.0, 1.0], [1.0, 1.0]])) == 0

    @given(nb_matrices())
    def test_evpi_nonnegative(self, m):
        assert psa.evpi_mc(m) >= -1e-9 * max(1.0, np.abs(m).max())

    @given(nb_matrices(), st.data())
    @settings(max_examples=50)
    def test_evppi_offset_invariance(self, m, data):
        v = data.draw(arrays(float, m.shape[0], elements=finite))
        a, b = psa.evppi_from_fitted(m), psa.evppi_from_fitted(m + v[:, None])
        assert a == pytest.approx(b, abs=1e-9 * max(1.0, np.abs(m).max(), np.abs(v).max()))

    @given(nb_matrices(), st.randoms(use_true_random=False))
    @settings(max_examples=50)
    def test_evpi_permutation_invariance(self, m, r):
        rows, cols = list(range(m.shape[0])), list(range(m.shape[1]))
        r.shuffle(rows)
        r.shuffle(cols)
        assert psa.evpi_mc(m[rows][:, cols]) == pytest.approx(psa.evpi_mc(m), abs=1e-9 * max(1, np.abs(m).max()))


class TestRescale:
    def test_two_point(self):
        # divisor S - 1: the sample sd of (0, 2) is sqrt(2)
        z, rec = psa.rescale_columns(np.array([[0.0], [2.0]]))
        np.testing.assert_allclose(z[:, 0], [-1 / np.sqrt(2), 1 / np.sqrt(2)])
        assert rec.center[0] == 1
        assert rec.scale[0] == pytest.approx(np.sqrt(2))

    def test_idempotent(self, rng):
        z, _ = psa.rescale_columns(rng.normal(size=(50, 3)))
        z2, _ = psa.rescale_columns(z)
        np.testing.assert_allclose(z2, z, atol=1e-12)

    def test_constant_column_named(self):
        with pytest.raises(DegenerateColumnError) as err:
            psa.rescale_columns(np.array([[1.0, 2], [1, 3], [1, 4]]), ["flat", "ok"])
        assert err.value.column == "flat"

    @given(arrays(float, (10, 3), elements=st.floats(-1e3, 1e3)))
    def test_inverse(self, m):
        if np.any(m.std(axis=0) < 1e-3):
            return
        z, rec = psa.rescale_columns(m)
        back = rec.invert(z)
        np.testing.assert_allclose(back, m, rtol=1e-12, atol=1e-12 * np.abs(m).max())


class TestSubset:
    def test_complement_partition(self):
        sub = psa.SubsetSpec((3, 0), 5)
        assert sorted(sub.focal + sub.complement) == list(range(5))

    @pytest.mark.parametrize("focal", [(), (0, 0), (5,)])
    def test_invalid(self, focal):
        with pytest.raises(ValidationError):
            psa.SubsetSpec(focal, 5)

    def test_labels(self):
        assert psa.SubsetSpec.from_labels(["b", "0"], ["a", "b"]).focal == (1, 0)
        with pytest.raises(SchemaError, match="zz"):
            psa.SubsetSpec.from_labels(["zz"], ["a", "b"])
