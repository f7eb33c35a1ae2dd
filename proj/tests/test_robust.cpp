#include "dse/robust.hpp"
#include "test_helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace dse;
using namespace dse::robust;

namespace {

// Small encoder/decoder pair over a 14-row, p-column window layout
// (one machine), with a unit normalizer so raw and normalized agree.
struct Rig {
    nn::DenseNet encoder, decoder;
    Normalizer norm;
    int p = 3, dz = 2;
    int rows = statespace::kRowsAll;

    Rig(std::uint64_t seed, int hidden = 8) {
        rng::Stream stream(seed);
        encoder = nn::make_mlp(rows * p, {hidden}, 2 * dz, stream);
        decoder = nn::make_mlp(dz, {hidden}, rows * (p + 1), stream);
        norm.mean = Eigen::VectorXd::Zero(rows);
        norm.std = Eigen::VectorXd::Ones(rows);
    }

    Eigen::MatrixXd window(std::uint64_t seed) const {
        rng::Stream stream(seed);
        Eigen::MatrixXd b(rows, p);
        for (Eigen::Index i = 0; i < b.size(); ++i) b(i) = 0.5 * stream.normal();
        return b;
    }
};

// Independent long-double evaluation of the entropic Wasserstein closed form.
long double entropic_w_oracle_1d(long double mu, long double s1, long double mu2, long double s2,
                                 long double beta) {
    const long double dmu = mu - mu2;
    const long double prod = s1 * s1 * s2 * s2;
    const long double root = sqrtl(1.0L + 4.0L * beta * beta * prod);
    return beta / 2.0L * (dmu * dmu + s1 * s1 + s2 * s2) - 0.5L * logl(2.0L * prod) +
           0.5L * logl(root + 1.0L) - 0.5L * (root - 1.0L) - logl(2.0L * static_cast<long double>(M_PI)) - 1.0L;
}

} // namespace

TEST_CASE("attack objective at zero perturbation is zero") {
    Rig rig(1);
    Eigen::MatrixXd b = rig.window(2);
    Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(rig.rows, rig.p);
    REQUIRE(attack_objective(rig.encoder, rig.decoder, rig.norm, b, zero, 1.0) ==
            Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("attack objective without penalty is non-positive") {
    Rig rig(3);
    Eigen::MatrixXd b = rig.window(4);
    rng::Stream stream(5);
    Eigen::MatrixXd delta(rig.rows, rig.p);
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta(i) = 0.01 * stream.normal();
    REQUIRE(attack_objective(rig.encoder, rig.decoder, rig.norm, b, delta, 0.0) <= 0.0);
}

TEST_CASE("attack objective gradient matches finite differences") {
    Rig rig(6);
    Eigen::MatrixXd b = rig.window(7);
    rng::Stream stream(8);
    Eigen::MatrixXd delta(rig.rows, rig.p);
    for (Eigen::Index i = 0; i < delta.size(); ++i) delta(i) = 0.02 * stream.normal();

    Eigen::MatrixXd grad;
    attack_objective(rig.encoder, rig.decoder, rig.norm, b, delta, 0.7, 2.0, &grad);

    const double h = 1e-6;
    double worst = 0.0;
    for (Eigen::Index i = 0; i < delta.size(); i += 7) {
        Eigen::MatrixXd up = delta, dn = delta;
        up(i) += h;
        dn(i) -= h;
        const double fu = attack_objective(rig.encoder, rig.decoder, rig.norm, b, up, 0.7);
        const double fd = attack_objective(rig.encoder, rig.decoder, rig.norm, b, dn, 0.7);
        const double numeric = (fu - fd) / (2.0 * h);
        const double denom = std::max({std::abs(grad(i)), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(grad(i) - numeric) / denom);
    }
    REQUIRE(worst < 1e-4);
}

TEST_CASE("constraint projection contract and idempotence") {
    auto budget = PerturbationBudget::for_windows(1, 4, 0.05);
    Eigen::MatrixXd b = Eigen::MatrixXd::Constant(statespace::kRowsAll, 4, 0.5);
    rng::Stream stream(9);
    Eigen::MatrixXd raw(statespace::kRowsAll, 4);
    for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = stream.normal();

    Eigen::MatrixXd projected = project_constraints(raw, b, budget);

    // support: zero outside the measured-channel rows
    for (int v = 0; v < statespace::kRowsX; ++v)
        REQUIRE(projected.row(statespace::row_x(1, 0, v)).cwiseAbs().maxCoeff() == 0.0);
    for (int v = 0; v < statespace::kRowsU; ++v)
        REQUIRE(projected.row(statespace::row_u(1, 0, v)).cwiseAbs().maxCoeff() == 0.0);
    // box and ball
    REQUIRE(((b + projected).array() >= budget.lower.array() - 1e-12).all());
    REQUIRE(((b + projected).array() <= budget.upper.array() + 1e-12).all());
    REQUIRE(projected.norm() <= budget.xi * (1.0 + 1e-9));
    // exact idempotence
    Eigen::MatrixXd twice = project_constraints(projected, b, budget);
    REQUIRE((twice - projected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pgd respects max_iters = 0 and the constraint set") {
    Rig rig(10);
    Eigen::MatrixXd b = rig.window(11);
    auto budget = PerturbationBudget::for_windows(1, rig.p, 0.05);
    PgdConfig cfg;
    cfg.max_iters = 0;
    auto result = pgd_worst_case(rig.encoder, rig.decoder, rig.norm, b, budget, cfg);
    REQUIRE(result.delta.cwiseAbs().maxCoeff() == 0.0);

    cfg.max_iters = 30;
    cfg.eta1 = 0.05;
    cfg.seed = 12;
    result = pgd_worst_case(rig.encoder, rig.decoder, rig.norm, b, budget, cfg);
    REQUIRE(result.final_norm <= budget.xi * (1.0 + 1e-9));
    for (int v = 0; v < statespace::kRowsX; ++v)
        REQUIRE(result.delta.row(statespace::row_x(1, 0, v)).cwiseAbs().maxCoeff() == 0.0);
    // the trace is non-increasing and the attack strictly improves on zero
    for (std::size_t i = 1; i < result.objective_trace.size(); ++i)
        REQUIRE(result.objective_trace[i] <= result.objective_trace[i - 1] + 1e-12);
    REQUIRE(result.objective_trace.back() < result.objective_trace.front());

    // determinism in the seed
    auto again = pgd_worst_case(rig.encoder, rig.decoder, rig.norm, b, budget, cfg);
    REQUIRE((again.delta - result.delta).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pgd finds the top singular direction of a linear pipeline") {
    // one linear encoder layer (mu head) and one linear decoder layer
    const int rows = statespace::kRowsAll, p = 2, dz = 3;
    rng::Stream stream(13);
    nn::DenseNet encoder, decoder;
    {
        nn::DenseNet::Layer le;
        le.w = Eigen::MatrixXd::Zero(2 * dz, rows * p);
        for (int r = 0; r < dz; ++r)
            for (int c = 0; c < rows * p; ++c) le.w(r, c) = 0.3 * stream.normal();
        le.b = Eigen::VectorXd::Zero(2 * dz);
        le.act = nn::Act::linear;
        encoder.layers.push_back(le);
        nn::DenseNet::Layer ld;
        ld.w = Eigen::MatrixXd::Zero(rows, dz);
        for (Eigen::Index i = 0; i < ld.w.size(); ++i) ld.w(i) = 0.3 * stream.normal();
        ld.b = Eigen::VectorXd::Zero(rows);
        ld.act = nn::Act::linear;
        decoder.layers.push_back(ld);
    }
    Normalizer norm;
    norm.mean = Eigen::VectorXd::Zero(rows);
    norm.std = Eigen::VectorXd::Ones(rows);

    // unrestricted support so the oracle is a plain SVD
    PerturbationBudget budget;
    budget.xi = 0.05;
    budget.support = Eigen::MatrixXd::Ones(rows, p);
    budget.lower = Eigen::MatrixXd::Constant(rows, p, -10.0);
    budget.upper = Eigen::MatrixXd::Constant(rows, p, 10.0);

    // full linear map delta -> decoder output difference
    Eigen::MatrixXd mu_head = encoder.layers[0].w.topRows(dz);
    Eigen::MatrixXd m = decoder.layers[0].w * mu_head;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
    Eigen::VectorXd v1 = svd.matrixV().col(0);

    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(rows, p);
    PgdConfig cfg;
    cfg.max_iters = 2000;
    cfg.eta1 = 0.05;
    cfg.lambda_pen = 1e-4;
    cfg.tol = 1e-14;
    cfg.seed = 14;
    auto result = pgd_worst_case(encoder, decoder, norm, b, budget, cfg);

    Eigen::VectorXd flat = statespace::detail::flatten_row_major(result.delta);
    const double cosine = std::abs(flat.normalized().dot(v1));
    REQUIRE(std::acos(std::min(cosine, 1.0)) < 1e-3);
}

TEST_CASE("entropic Wasserstein closed form") {
    Eigen::VectorXd mu(3), s(3), mu2(3), s2(3);
    mu << 0.2, -0.5, 1.0;
    s << 0.8, 1.3, 0.6;
    mu2 << -0.1, 0.4, 0.9;
    s2 << 1.1, 0.7, 1.4;
    const double beta = 1.3;

    SECTION("argument swap symmetry") {
        REQUIRE(entropic_gaussian_w(mu, s, mu2, s2, beta) ==
                Catch::Approx(entropic_gaussian_w(mu2, s2, mu, s, beta)).margin(1e-12));
    }
    SECTION("coordinate permutation invariance") {
        Eigen::PermutationMatrix<3> perm;
        perm.indices() << 2, 0, 1;
        REQUIRE(entropic_gaussian_w(perm * mu, perm * s, perm * mu2, perm * s2, beta) ==
                Catch::Approx(entropic_gaussian_w(mu, s, mu2, s2, beta)).margin(1e-12));
    }
    SECTION("strictly increasing in the mean gap") {
        double prev = entropic_gaussian_w(mu, s, mu2, s2, beta);
        for (double shift : {0.3, 0.9, 2.0}) {
            Eigen::VectorXd mu_far = mu.array() + shift;
            const double now = entropic_gaussian_w(mu_far, s, mu2, s2, beta);
            REQUIRE(now > prev);
            prev = now;
        }
    }
    SECTION("matches the independent high-precision evaluation") {
        Eigen::VectorXd one_mu(1), one_s(1), one_mu2(1), one_s2(1);
        one_mu << 0.7;
        one_s << 1.0;
        one_mu2 << 0.7;
        one_s2 << 1.0;
        const double got = entropic_gaussian_w(one_mu, one_s, one_mu2, one_s2, 1.0);
        const double want = static_cast<double>(entropic_w_oracle_1d(0.7L, 1.0L, 0.7L, 1.0L, 1.0L));
        REQUIRE(got == Catch::Approx(want).margin(1e-10));

        double total = 0.0;
        for (int i = 0; i < 3; ++i)
            total += static_cast<double>(entropic_w_oracle_1d(mu[i], s[i], mu2[i], s2[i], beta));
        REQUIRE(entropic_gaussian_w(mu, s, mu2, s2, beta) == Catch::Approx(total).margin(1e-10));
    }
    SECTION("rejects non-positive sigma") {
        Eigen::VectorXd bad = s;
        bad[1] = 0.0;
        REQUIRE_THROWS_AS(entropic_gaussian_w(mu, bad, mu2, s2, beta), std::invalid_argument);
    }
    SECTION("gradients match finite differences") {
        auto g = entropic_gaussian_w_grad(mu, s, mu2, s2, beta);
        const double h = 1e-7;
        for (int i = 0; i < 3; ++i) {
            Eigen::VectorXd up = mu, dn = mu;
            up[i] += h;
            dn[i] -= h;
            const double fd =
                (entropic_gaussian_w(up, s, mu2, s2, beta) - entropic_gaussian_w(dn, s, mu2, s2, beta)) /
                (2.0 * h);
            REQUIRE(g.d_mu[i] == Catch::Approx(fd).margin(1e-6));
            Eigen::VectorXd su = s, sd = s;
            su[i] += h;
            sd[i] -= h;
            const double fs =
                (entropic_gaussian_w(mu, su, mu2, s2, beta) - entropic_gaussian_w(mu, sd, mu2, s2, beta)) /
                (2.0 * h);
            REQUIRE(g.d_sigma[i] == Catch::Approx(fs).margin(1e-6));
            Eigen::VectorXd s2u = s2, s2d = s2;
            s2u[i] += h;
            s2d[i] -= h;
            const double fs2 =
                (entropic_gaussian_w(mu, s, mu2, s2u, beta) - entropic_gaussian_w(mu, s, mu2, s2d, beta)) /
                (2.0 * h);
            REQUIRE(g.d_sigma2[i] == Catch::Approx(fs2).margin(1e-6));
        }
    }
}

TEST_CASE("robust loss reduces to encoder loss plus the clean Wasserstein term at xi = 0") {
    Rig rig(15);
    std::vector<Eigen::MatrixXd> b = {rig.window(16), rig.window(17)};
    std::vector<Eigen::MatrixXd> zero = {Eigen::MatrixXd::Zero(rig.rows, rig.p),
                                         Eigen::MatrixXd::Zero(rig.rows, rig.p)};
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(rig.rows * (rig.p + 1), 2);
    Eigen::MatrixXd eps = Eigen::MatrixXd::Random(rig.dz, 2);
    const double alpha = 0.1, beta = 1.0;

    const double robust = robust_loss(rig.encoder, rig.decoder, rig.norm, b, zero, a, alpha, beta, eps);

    Eigen::MatrixXd b_flat(rig.rows * rig.p, 2);
    for (int i = 0; i < 2; ++i)
        b_flat.col(i) = statespace::detail::flatten_row_major(rig.norm.normalize(b[i]));
    const double enc = gen::encoder_loss(rig.encoder, rig.decoder, b_flat, a, alpha, eps);

    double wass = 0.0;
    for (int i = 0; i < 2; ++i) {
        auto lg = gen::encode(rig.encoder, b_flat.col(i));
        wass += entropic_gaussian_w(lg.mu, lg.sigma(), lg.mu, lg.sigma(), beta);
    }
    wass /= 2.0;
    REQUIRE(robust == Catch::Approx(enc + wass).margin(1e-10));
}

TEST_CASE("robust loss gradient matches finite differences") {
    Rig rig(18);
    std::vector<Eigen::MatrixXd> b = {rig.window(19), rig.window(20)};
    rng::Stream stream(21);
    std::vector<Eigen::MatrixXd> delta;
    for (int i = 0; i < 2; ++i) {
        Eigen::MatrixXd d = Eigen::MatrixXd::Zero(rig.rows, rig.p);
        for (Eigen::Index j = 0; j < d.size(); ++j) d(j) = 0.01 * stream.normal();
        delta.push_back(d);
    }
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(rig.rows * (rig.p + 1), 2);
    Eigen::MatrixXd eps = Eigen::MatrixXd::Random(rig.dz, 2);

    nn::Gradients<double> grads;
    robust_loss(rig.encoder, rig.decoder, rig.norm, b, delta, a, 0.1, 1.2, eps, &grads);
    Eigen::VectorXd analytic = nn::grads_to_vector(rig.encoder, grads);
    auto eval = [&]() { return robust_loss(rig.encoder, rig.decoder, rig.norm, b, delta, a, 0.1, 1.2, eps); };
    Eigen::VectorXd numeric = testutil::fd_param_gradient(rig.encoder, eval);
    REQUIRE(testutil::max_rel_error(analytic, numeric) < 1e-4);
}
