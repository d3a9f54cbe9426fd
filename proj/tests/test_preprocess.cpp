#include "doctest.h"

#include "test_util.hpp"
#include "topofuse/preprocess.hpp"
#include "topofuse/synth.hpp"

#include <cmath>
#include <numeric>

using namespace topofuse;
using testutil::code_of;

TEST_CASE("filter_genes keeps genes expressed in at least tau spots") {
    Matrix m(7, 4);
    m.setZero();
    // Nonzero counts per column: 0, 2, 5, 7.
    m.col(1).head(2).setOnes();
    m.col(2).head(5).setConstant(3.0);
    m.col(3).setConstant(0.5);

    const auto a = filter_genes(m, 1);
    CHECK(a.kept == std::vector<Index>{1, 2, 3});
    CHECK(a.matrix.cols() == 3);
    CHECK(a.matrix.col(0) == m.col(1));

    const auto b = filter_genes(m, 5);
    CHECK(b.kept == std::vector<Index>{2, 3});

    const auto identity = filter_genes(m, 0);
    CHECK(identity.kept == std::vector<Index>{0, 1, 2, 3});
    CHECK(identity.matrix == m);

    CHECK(code_of([&] { filter_genes(m, 8); }) == ErrorCode::AllGenesFiltered);
}

TEST_CASE("lognorm formula and library-size identity") {
    Matrix zero = Matrix::Zero(1, 2);
    CHECK(code_of([&] { lognorm(zero, 1e4); }) == ErrorCode::ZeroLibrary);

    Matrix single(1, 1);
    single << 5;
    CHECK(lognorm(single, 10)(0, 0) == doctest::Approx(std::log(11.0)).epsilon(1e-15));

    Matrix equal(1, 2);
    equal << 2, 2;
    const Matrix out = lognorm(equal, 4);
    CHECK(out(0, 0) == doctest::Approx(std::log(3.0)).epsilon(1e-15));
    CHECK(out(0, 1) == doctest::Approx(std::log(3.0)).epsilon(1e-15));

    Rng rng(3);
    Matrix counts = testutil::random_matrix(5, 8, rng).cwiseAbs();
    const Matrix ln = lognorm(counts, 1e4);
    for (Index i = 0; i < counts.rows(); ++i) {
        CHECK(std::abs(ln.row(i).array().exp().sum() - static_cast<double>(ln.cols()) - 1e4) < 1e-8);
    }
}

TEST_CASE("select_hvg ranks by variance with ties to the lower index") {
    // Population variances 1, 3, 2.
    Matrix m(2, 3);
    m << -1, -std::sqrt(3.0), -std::sqrt(2.0), 1, std::sqrt(3.0), std::sqrt(2.0);
    CHECK(select_hvg(m, 2) == std::vector<Index>{1, 2});
    CHECK(select_hvg(m, 10) == std::vector<Index>{1, 2, 0});

    Matrix with_constant(3, 3);
    with_constant << 5, 0, 1, 5, 1, 1, 5, 2, 1;
    CHECK(select_hvg(with_constant, 1) == std::vector<Index>{1});

    Matrix tied(2, 3);
    tied << 0, 1, 0, 1, 0, 1;
    CHECK(select_hvg(tied, 2) == std::vector<Index>{0, 1});
}

TEST_CASE("select_hvg is permutation-equivariant") {
    Rng rng(11);
    Matrix m = testutil::random_matrix(20, 9, rng);
    for (Index c = 0; c < m.cols(); ++c) {
        m.col(c) *= 1.0 + static_cast<double>(c);
    }
    std::vector<Index> perm{4, 2, 7, 0, 8, 1, 6, 3, 5};
    Matrix permuted(m.rows(), m.cols());
    for (Index c = 0; c < m.cols(); ++c) {
        permuted.col(c) = m.col(perm[static_cast<std::size_t>(c)]);
    }
    const auto base = select_hvg(m, 4);
    const auto moved = select_hvg(permuted, 4);
    std::vector<Index> mapped;
    for (Index c : moved) {
        mapped.push_back(perm[static_cast<std::size_t>(c)]);
    }
    CHECK(mapped == base);
}

TEST_CASE("standardize handles constant columns and is idempotent") {
    Matrix m(2, 2);
    m << 1, 0, 1, 2;
    const auto s = standardize(m);
    CHECK(s.matrix(0, 0) == 0.0);
    CHECK(s.matrix(1, 0) == 0.0);
    CHECK(s.matrix(0, 1) == doctest::Approx(-1.0));
    CHECK(s.matrix(1, 1) == doctest::Approx(1.0));

    Rng rng(5);
    const Matrix x = testutil::random_matrix(15, 4, rng, 3.0);
    const auto once = standardize(x);
    const auto twice = standardize(once.matrix);
    CHECK((once.matrix - twice.matrix).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("pca oracles") {
    SUBCASE("3x2 line matches the closed-form 2x2 eigendecomposition") {
        Matrix m(3, 2);
        m << 0, 0, 1, 2, 2, 4;
        const auto p = pca(m, 1);
        // Population covariance [[2/3, 4/3], [4/3, 8/3]]: eigenvalues from the 2x2 characteristic polynomial.
        const double a = 2.0 / 3.0, b = 4.0 / 3.0, d = 8.0 / 3.0;
        const double tr = a + d, det = a * d - b * b;
        const double l1 = 0.5 * (tr + std::sqrt(tr * tr - 4 * det));
        Vector v(2);
        v << b, l1 - a;
        v.normalize();
        if (v(1) < 0) {
            v = -v;
        }
        CHECK(p.eigenvalues(0) == doctest::Approx(l1).epsilon(1e-12));
        CHECK(std::abs(p.basis(0, 0) - v(0)) < 1e-12);
        CHECK(std::abs(p.basis(1, 0) - v(1)) < 1e-12);
        const Vector centered_x = m.col(0).array() - 1.0;
        const Vector centered_y = m.col(1).array() - 2.0;
        for (Index i = 0; i < 3; ++i) {
            CHECK(std::abs(p.scores(i, 0) - (centered_x(i) * v(0) + centered_y(i) * v(1))) < 1e-12);
        }
    }
    SUBCASE("points on y=x") {
        Matrix m(4, 2);
        m << 0, 0, 1, 1, 2, 2, 5, 5;
        CHECK(code_of([&] { pca(m, 2); }) == ErrorCode::RankDeficient);
        const auto p = pca(m, 1);
        CHECK(p.basis(0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
        CHECK(p.basis(1, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
    }
    SUBCASE("zero components rejected") {
        Matrix m(3, 2);
        m << 0, 1, 1, 0, 2, 2;
        CHECK(code_of([&] { pca(m, 0); }) == ErrorCode::OutOfRange);
        CHECK(code_of([&] { pca(m, 3); }) == ErrorCode::OutOfRange);
    }
    SUBCASE("full reconstruction, orthonormal basis, non-increasing eigenvalues") {
        Rng rng(9);
        const Matrix x = testutil::random_matrix(12, 5, rng);
        const auto p = pca(x, 5);
        const Matrix centered = x.rowwise() - x.colwise().mean();
        CHECK((p.scores * p.basis.transpose() - centered).cwiseAbs().maxCoeff() < 1e-8);
        CHECK((p.basis.transpose() * p.basis - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-8);
        for (Index i = 1; i < 5; ++i) {
            CHECK(p.eigenvalues(i) <= p.eigenvalues(i - 1));
        }
        for (Index c = 0; c < 5; ++c) {
            Index at = 0;
            p.basis.col(c).cwiseAbs().maxCoeff(&at);
            CHECK(p.basis(at, c) > 0);
        }
    }
}

TEST_CASE("preprocess pipeline output satisfies the column invariants") {
    SynthSpec spec;
    spec.n_domains = 3;
    spec.spots_per_domain = 20;
    spec.genes = 40;
    spec.mor_dims = 6;
    const auto data = generate(spec).data;
    RunConfig cfg;
    cfg.tau = 5;
    cfg.n_hvg = 25;
    cfg.n_pcs_mor = 4;
    const auto pre = preprocess(data, cfg);
    CHECK(pre.tra.rows() == data.n_spots());
    CHECK(pre.tra.cols() == 25);
    CHECK(pre.selected_gene_ids.size() == 25);
    CHECK(std::is_sorted(pre.selected_columns.begin(), pre.selected_columns.end()));
    for (std::size_t j = 0; j < pre.selected_columns.size(); ++j) {
        CHECK(pre.selected_gene_ids[j] == data.gene_ids[static_cast<std::size_t>(pre.selected_columns[j])]);
    }
    const double n = static_cast<double>(pre.tra.rows());
    for (Index c = 0; c < pre.tra.cols(); ++c) {
        const double mean = pre.tra.col(c).mean();
        const double sd = std::sqrt((pre.tra.col(c).array() - mean).square().sum() / n);
        CHECK(std::abs(mean) < 1e-8);
        CHECK(std::abs(sd - 1.0) < 1e-6);
    }
    REQUIRE(pre.mor.has_value());
    CHECK(pre.mor->cols() == 4);
    REQUIRE(pre.pca_basis.has_value());
    CHECK((pre.pca_basis->transpose() * *pre.pca_basis - Matrix::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-8);
}
