import itertools

import numpy as np
import pytest

from equivox.so3 import (
    Irrep,
    RepLayout,
    Rotation,
    clebsch_gordan,
    cube_rotations,
    irrep_dim,
    rep_matrix,
    scalar_layout,
    selection_paths,
    selection_rule,
    spherical_harmonics,
    tensor_product_reduce,
    wigner_d,
)


def random_rotations(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Rotation.random(rng) for _ in range(n)]


class TestIrrep:
    def test_dimensions(self):
        assert irrep_dim(0) == 1
        assert irrep_dim(1) == 3
        assert irrep_dim(2) == 5

    def test_negative_order_rejected(self):
        with pytest.raises(ValueError):
            irrep_dim(-1)
        with pytest.raises(ValueError):
            Irrep(-2)

    def test_parity_label(self):
        assert Irrep(1, "odd").parity == "o"
        assert str(Irrep(2, "e")) == "2e"
        with pytest.raises(ValueError):
            Irrep(0, "x")


class TestRepLayout:
    def test_parse_print_roundtrip(self):
        text = "8x0e+4x1e+2x2e"
        layout = RepLayout.parse(text)
        assert str(layout) == text
        assert layout.dim == 8 * 1 + 4 * 3 + 2 * 5 == 30

    def test_roundtrip_with_odd_parities(self):
        text = "4x0e+4x0o+2x1o+1x2e"
        assert str(RepLayout.parse(text)) == text

    def test_copy_enumeration_is_bijective(self):
        layout = RepLayout.parse("2x0e+3x1e+1x2e")
        copies = list(layout.copies())
        assert [i for i, _, _ in copies] == list(range(layout.num_copies))
        offsets = [off for _, off, _ in copies]
        dims = [ir.dim for _, _, ir in copies]
        assert offsets == list(np.cumsum([0] + dims[:-1]))
        assert offsets[-1] + dims[-1] == layout.dim

    def test_malformed_rejected(self):
        for bad in ("8x0", "0x1e", "8x0e+", "1y2e"):
            with pytest.raises(ValueError):
                RepLayout.parse(bad)


class TestRotation:
    def test_validation(self):
        with pytest.raises(ValueError):
            Rotation(np.eye(3) * 2.0)
        flip = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Rotation(flip)

    def test_compose_and_inverse(self):
        r1, r2 = random_rotations(2, seed=3)
        both = r2.compose(r1)
        np.testing.assert_allclose(both.matrix, r2.matrix @ r1.matrix)
        np.testing.assert_allclose(
            r1.compose(r1.inverse()).matrix, np.eye(3), atol=1e-14
        )


class TestSphericalHarmonics:
    def test_order_zero_is_constant_one(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            np.testing.assert_allclose(spherical_harmonics(0, u), [1.0])

    def test_component_norm_identity(self):
        # |Y^l(u)|^2 = 2l+1 under component normalization
        rng = np.random.default_rng(2)
        for l in (0, 1, 2):
            for _ in range(50):
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                y = spherical_harmonics(l, u)
                assert abs(y @ y - (2 * l + 1)) < 1e-9

    def test_north_pole_vector_norm(self):
        y = spherical_harmonics(1, (0.0, 0.0, 1.0))
        assert abs(np.linalg.norm(y) - np.sqrt(3)) < 1e-12

    def test_rejects_non_unit_and_large_l(self):
        with pytest.raises(ValueError):
            spherical_harmonics(1, (1.0, 1.0, 0.0))
        with pytest.raises(ValueError):
            spherical_harmonics(3, (0.0, 0.0, 1.0))

    def test_equivariance_against_wigner(self):
        # Y^l(Ru) = D^l(R) Y^l(u)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            r = Rotation.random(rng)
            u = rng.normal(size=3)
            u /= np.linalg.norm(u)
            for l in (0, 1, 2):
                d = wigner_d(l, r).matrix
                err = np.abs(
                    spherical_harmonics(l, r.matrix @ u) - d @ spherical_harmonics(l, u)
                ).max()
                worst = max(worst, err)
        assert worst < 1e-9


class TestWignerD:
    def test_order_zero_trivial(self):
        for r in random_rotations(3, seed=4):
            np.testing.assert_allclose(wigner_d(0, r).matrix, [[1.0]])

    def test_identity_rotation(self):
        for l in (0, 1, 2):
            np.testing.assert_allclose(
                wigner_d(l, Rotation.identity()).matrix, np.eye(2 * l + 1), atol=1e-14
            )

    def test_l1_trace_matches_rotation_trace(self):
        # D^1 is similar to R, so traces agree
        for r in random_rotations(10, seed=5):
            d = wigner_d(1, r).matrix
            assert abs(np.trace(d) - np.trace(r.matrix)) < 1e-10

    def test_orthogonality(self):
        for r in random_rotations(20, seed=6):
            for l in (1, 2):
                d = wigner_d(l, r).matrix
                assert np.abs(d @ d.T - np.eye(2 * l + 1)).max() < 1e-10

    def test_homomorphism(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            r1, r2 = Rotation.random(rng), Rotation.random(rng)
            r12 = r1.compose(r2)
            for l in (1, 2):
                err = np.abs(
                    wigner_d(l, r12).matrix
                    - wigner_d(l, r1).matrix @ wigner_d(l, r2).matrix
                ).max()
                worst = max(worst, err)
        assert worst < 1e-9

    def test_unsupported_order_rejected(self):
        with pytest.raises(ValueError):
            wigner_d(3, Rotation.identity())


class TestRepMatrix:
    def test_scalar_layout_is_identity(self):
        layout = scalar_layout(3)
        for r in random_rotations(3, seed=8):
            np.testing.assert_allclose(rep_matrix(layout, r), np.eye(3))

    def test_identity_rotation_gives_identity(self):
        layout = RepLayout.parse("1x0e+1x1e")
        np.testing.assert_allclose(
            rep_matrix(layout, Rotation.identity()), np.eye(4), atol=1e-14
        )

    def test_block_structure_and_orthogonality(self):
        layout = RepLayout.parse("8x0e+4x1e+2x2e")
        (r,) = random_rotations(1, seed=9)
        m = rep_matrix(layout, r)
        assert m.shape == (30, 30)
        assert np.abs(m @ m.T - np.eye(30)).max() < 1e-10
        mask = np.zeros((30, 30), dtype=bool)
        for _, off, ir in layout.copies():
            mask[off : off + ir.dim, off : off + ir.dim] = True
        assert np.all(m[~mask] == 0.0)


class TestClebschGordan:
    def test_scalar_triple_is_multiplication(self):
        cg = clebsch_gordan(0, 0, 0)
        np.testing.assert_allclose(cg.coefficients, [[[1.0]]])

    def test_110_is_dot_product(self):
        cg = clebsch_gordan(1, 1, 0)
        np.testing.assert_allclose(
            cg.coefficients[:, :, 0], np.eye(3) / np.sqrt(3), atol=1e-12
        )

    def test_111_is_cross_product(self):
        eps = np.zeros((3, 3, 3))
        for i, j, k in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
            eps[i, j, k] = 1.0
            eps[j, i, k] = -1.0
        cg = clebsch_gordan(1, 1, 1)
        np.testing.assert_allclose(cg.coefficients, eps / np.sqrt(6), atol=1e-12)

    def test_forbidden_triple_is_flagged_zero(self):
        cg = clebsch_gordan(0, 0, 2)
        assert not cg.allowed
        assert np.all(cg.coefficients == 0.0)
        assert cg.coefficients.shape == (1, 1, 5)

    def test_unit_frobenius_norm(self):
        for l1, l2, l3 in itertools.product(range(3), repeat=3):
            if not selection_rule(l1, l2, l3):
                continue
            cg = clebsch_gordan(l1, l2, l3)
            assert abs(np.linalg.norm(cg.coefficients) - 1.0) < 1e-12

    def test_equivariance_constraint(self):
        # D3 C = C (D1 x D2), checked as the reduced-product commutation
        rng = np.random.default_rng(10)
        worst = 0.0
        for l1, l2, l3 in itertools.product(range(3), repeat=3):
            if not selection_rule(l1, l2, l3):
                continue
            c = clebsch_gordan(l1, l2, l3).coefficients
            for _ in range(20):
                r = Rotation.random(rng)
                d1 = wigner_d(l1, r).matrix
                d2 = wigner_d(l2, r).matrix
                d3 = wigner_d(l3, r).matrix
                lhs = np.einsum("abn,ai,bj->ijn", c, d1, d2)
                rhs = np.einsum("nm,ijm->ijn", d3, c)
                worst = max(worst, np.abs(lhs - rhs).max())
        assert worst < 1e-8

    def test_unsupported_order_rejected(self):
        with pytest.raises(ValueError):
            clebsch_gordan(3, 0, 3)


class TestTensorProductReduce:
    def test_scalars_multiply(self):
        out = tensor_product_reduce([2.0], [-3.5], 0)
        np.testing.assert_allclose(out, [-7.0])

    def test_bilinearity_zero(self):
        rng = np.random.default_rng(11)
        v = rng.normal(size=3)
        for l3 in (0, 1, 2):
            np.testing.assert_allclose(
                tensor_product_reduce(v, np.zeros(3), l3), np.zeros(2 * l3 + 1)
            )

    def test_cross_product(self):
        v = np.array([1.0, 0.0, 0.0])
        w = np.array([0.0, 1.0, 0.0])
        out = tensor_product_reduce(v, w, 1)
        np.testing.assert_allclose(out, np.cross(v, w) / np.sqrt(6), atol=1e-12)

    def test_equivariance(self):
        rng = np.random.default_rng(12)
        for l1, l2, l3 in [(1, 1, 2), (2, 1, 1), (2, 2, 2)]:
            v = rng.normal(size=2 * l1 + 1)
            w = rng.normal(size=2 * l2 + 1)
            r = Rotation.random(rng)
            lhs = tensor_product_reduce(
                wigner_d(l1, r).matrix @ v, wigner_d(l2, r).matrix @ w, l3
            )
            rhs = wigner_d(l3, r).matrix @ tensor_product_reduce(v, w, l3)
            np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            tensor_product_reduce(np.zeros(2), np.zeros(3), 1)


def brute_force_paths(in_layout, out_layout, l_max):
    """Independent enumeration of Eq.-style selection triples."""
    triples = set()
    for i, _, ir_i in in_layout.copies():
        for l in range(l_max + 1):
            for j, _, ir_j in out_layout.copies():
                if abs(ir_i.l - ir_j.l) <= l <= ir_i.l + ir_j.l:
                    triples.add((i, l, j))
    return triples


class TestSelectionPaths:
    def test_vector_to_vector(self):
        lin = RepLayout.parse("1x1e")
        table = selection_paths(lin, lin, 2)
        assert sorted(p.l for p in table.paths) == [0, 1, 2]

    def test_scalar_to_tensor(self):
        table = selection_paths(RepLayout.parse("1x0e"), RepLayout.parse("1x2e"), 2)
        assert len(table) == 1
        assert table.paths[0].l == 2

    def test_table1_layouts_match_brute_force(self):
        lin = RepLayout.parse("2x0e+1x1e+1x2e")
        lout = RepLayout.parse("1x0e+1x1e+3x2e")
        table = selection_paths(lin, lout, 2)
        expected = brute_force_paths(lin, lout, 2)
        assert {(p.i, p.l, p.j) for p in table.paths} == expected
        assert len(table) == len(expected)

    def test_deterministic_ordering(self):
        lin = RepLayout.parse("2x0e+2x1e")
        table = selection_paths(lin, lin, 2)
        keys = [(p.i, p.l, p.j) for p in table.paths]
        assert keys == sorted(keys)

    def test_offsets_are_consistent(self):
        lin = RepLayout.parse("1x0e+1x2e")
        lout = RepLayout.parse("2x1e")
        table = selection_paths(lin, lout, 2)
        in_offsets = {i: off for i, off, _ in lin.copies()}
        out_offsets = {j: off for j, off, _ in lout.copies()}
        for p in table.paths:
            assert p.in_offset == in_offsets[p.i]
            assert p.out_offset == out_offsets[p.j]


class TestCubeRotations:
    def test_there_are_24(self):
        rots = cube_rotations()
        assert len(rots) == 24
        mats = {tuple(r.matrix.ravel()) for r in rots}
        assert len(mats) == 24

    def test_group_closure(self):
        rots = cube_rotations()
        mats = {tuple(np.rint(r.matrix).astype(int).ravel()) for r in rots}
        assert tuple(np.eye(3, dtype=int).ravel()) in mats
        for a in rots[:6]:
            for b in rots[:6]:
                prod = np.rint(a.matrix @ b.matrix).astype(int)
                assert tuple(prod.ravel()) in mats
