#include "dse/cdm.hpp"
#include "test_helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace dse;
using namespace dse::diffusion;

namespace {

// A denoiser whose single linear layer maps every noisy input at level t to
// the fixed point z_star exactly.
DenoiserNet perfect_point_denoiser(const Eigen::VectorXd& z_star, double t, double sigma_data = 0.5) {
    DenoiserNet d;
    d.sigma_data = sigma_data;
    const auto dz = z_star.size();
    nn::DenseNet::Layer l;
    l.w = Eigen::MatrixXd::Zero(dz, dz + 1);
    l.w.leftCols(dz) = -(d.c_skip(t) / (d.c_out(t) * d.c_in(t))) * Eigen::MatrixXd::Identity(dz, dz);
    l.b = z_star / d.c_out(t);
    l.act = nn::Act::linear;
    d.f.layers.push_back(l);
    return d;
}

nn::DenseNet identity_decoder(int dz) {
    nn::DenseNet net;
    nn::DenseNet::Layer l;
    l.w = Eigen::MatrixXd::Identity(dz, dz);
    l.b = Eigen::VectorXd::Zero(dz);
    l.act = nn::Act::linear;
    net.layers.push_back(l);
    return net;
}

} // namespace

TEST_CASE("noise schedule endpoints and shape") {
    auto s = build_schedule(100);
    REQUIRE(s.levels[0] == 0.0);
    REQUIRE(s.levels[1] == 0.002);
    REQUIRE(s.levels[100] == 80.0);
    for (int n = 2; n <= 100; ++n) REQUIRE(s.levels[n] > s.levels[n - 1]);
    REQUIRE(s.m == 50);

    // independent high-precision evaluation of the midpoint for N = 3
    auto s3 = build_schedule(3, 7.0, 0.002, 80.0, 3);
    const long double lo = powl(0.002L, 1.0L / 7.0L);
    const long double hi = powl(80.0L, 1.0L / 7.0L);
    const long double mid = powl(lo + 0.5L * (hi - lo), 7.0L);
    REQUIRE(s3.levels[2] == Catch::Approx(static_cast<double>(mid)).epsilon(1e-14));

    REQUIRE_THROWS_AS(build_schedule(1), std::invalid_argument);
    REQUIRE_THROWS_AS(build_schedule(10, 7.0, 0.0, 80.0), std::invalid_argument);
    REQUIRE_THROWS_AS(build_schedule(10, 7.0, 0.002, 80.0, 11), std::invalid_argument);
}

TEST_CASE("forward sampling") {
    Eigen::VectorXd z0(3);
    z0 << 1.0, -2.0, 0.5;
    Eigen::VectorXd eps = Eigen::VectorXd::Ones(3);
    REQUIRE((forward_sample(z0, 0.0, eps) - z0).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((forward_sample(z0, 2.0, Eigen::VectorXd::Zero(3)) - z0).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE_THROWS_AS(forward_sample(z0, -1.0, eps), std::invalid_argument);

    rng::Stream stream(1);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd e(1);
        e[0] = stream.normal();
        const double v = forward_sample(z0.head(1), 2.0, e)[0];
        sum += v;
        sq += v * v;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    REQUIRE(std::abs(var - 4.0) < 0.02 * 4.0);
}

TEST_CASE("denoiser scaling functions and boundary") {
    DenoiserNet d;
    d.sigma_data = 0.5;
    rng::Stream stream(2);
    d.f = nn::make_mlp(4, {6}, 3, stream);

    // independently evaluated closed forms at sigma_data = 0.5
    for (double t : {0.002, 0.1, 1.0, 17.0}) {
        const double sd = 0.5;
        REQUIRE(d.c_skip(t) == Catch::Approx(sd * sd / (t * t + sd * sd)).epsilon(1e-14));
        REQUIRE(d.c_in(t) == Catch::Approx(1.0 / std::sqrt(t * t + sd * sd)).epsilon(1e-14));
        REQUIRE(d.c_out(t) == Catch::Approx(sd * t / std::sqrt(sd * sd + t * t)).epsilon(1e-14));
        REQUIRE(d.c_noise(t) == Catch::Approx(std::log(t) / 4.0).epsilon(1e-14));
    }

    // zero inner net: D(z, t) = c_skip(t) z exactly
    DenoiserNet zero;
    zero.sigma_data = 0.5;
    nn::DenseNet::Layer l;
    l.w = Eigen::MatrixXd::Zero(3, 4);
    l.b = Eigen::VectorXd::Zero(3);
    l.act = nn::Act::linear;
    zero.f.layers.push_back(l);
    Eigen::MatrixXd z = Eigen::MatrixXd::Random(3, 5);
    for (double t : {0.002, 0.5, 3.0}) {
        Eigen::MatrixXd out = zero.denoise(z, t);
        REQUIRE((out - zero.c_skip(t) * z).cwiseAbs().maxCoeff() < 1e-15);
    }
    // boundary: t = 0 returns the input unchanged
    REQUIRE((zero.denoise(z, 0.0) - z).cwiseAbs().maxCoeff() == 0.0);
    // near zero the skip path dominates
    Eigen::MatrixXd near = zero.denoise(z, 0.002 / 10.0);
    REQUIRE((near - z).cwiseAbs().maxCoeff() / z.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("consistency loss degenerate and perfect cases") {
    const int dz = 3;
    auto schedule = build_schedule(20, 7.0, 0.002, 80.0, 20);
    auto decoder = identity_decoder(dz);
    LatentScaler scaler;
    scaler.mean = Eigen::VectorXd::Zero(dz);
    scaler.std = Eigen::VectorXd::Constant(dz, 1.0);
    scaler.sigma_data = 0.5;

    rng::Stream stream(3);
    DenoiserNet student;
    student.f = nn::make_mlp(dz + 1, {8}, dz, stream);
    Eigen::MatrixXd z0 = Eigen::MatrixXd::Random(dz, 4);
    Eigen::MatrixXd eps = Eigen::MatrixXd::Random(dz, 4);

    SECTION("equal levels and tied parameters give zero loss") {
        auto degenerate = schedule;
        degenerate.levels[6] = degenerate.levels[5];
        REQUIRE(consistency_loss(student, student, decoder, scaler, z0, degenerate, 5, eps) ==
                Catch::Approx(0.0).margin(1e-14));
    }

    SECTION("a perfect denoiser on a point mass gives zero loss") {
        Eigen::VectorXd z_star = Eigen::VectorXd::Constant(dz, 0.3);
        const int n = 7;
        auto perfect_hi = perfect_point_denoiser(z_star, schedule.at(n + 1));
        auto perfect_lo = perfect_point_denoiser(z_star, schedule.at(n));
        Eigen::MatrixXd batch = z_star.replicate(1, 4);
        REQUIRE(consistency_loss(perfect_hi, perfect_lo, decoder, scaler, batch, schedule, n, eps) ==
                Catch::Approx(0.0).margin(1e-18));
    }

    SECTION("gradient flows into the student only") {
        DenoiserNet teacher;
        rng::Stream s2(4);
        teacher.f = nn::make_mlp(dz + 1, {8}, dz, s2);
        const int n = 4;
        nn::Gradients<double> grads;
        consistency_loss(student, teacher, decoder, scaler, z0, schedule, n, eps, &grads);
        Eigen::VectorXd analytic = nn::grads_to_vector(student.f, grads);
        auto eval = [&]() {
            return consistency_loss(student, teacher, decoder, scaler, z0, schedule, n, eps);
        };
        Eigen::VectorXd numeric = testutil::fd_param_gradient(student.f, eval);
        REQUIRE(testutil::max_rel_error(analytic, numeric) < 1e-4);

        // the teacher affects the value but receives no gradient path
        const double base = eval();
        DenoiserNet bumped = teacher;
        bumped.f.layers[0].b[0] += 1e-3;
        const double moved = consistency_loss(student, bumped, decoder, scaler, z0, schedule, n, eps);
        REQUIRE(moved != base);
    }
}

TEST_CASE("consistency training fits a toy latent mixture") {
    rng::Stream stream(5);
    const int dz = 2, n = 1024;
    Eigen::MatrixXd latents(dz, n);
    for (int i = 0; i < n; ++i) {
        const bool left = i % 2 == 0;
        latents(0, i) = (left ? -1.0 : 1.0) + 0.2 * stream.normal();
        latents(1, i) = (left ? 0.8 : -0.8) + 0.2 * stream.normal();
    }
    auto schedule = build_schedule(18, 7.0, 0.002, 10.0, 18);
    auto decoder = identity_decoder(dz);
    CdmTrainConfig cfg;
    cfg.steps = 4000;
    cfg.batch = 64;
    cfg.lr = 2e-3;
    cfg.hidden = {48, 48};
    cfg.seed = 6;
    auto result = train_consistency(latents, decoder, schedule, cfg);

    // one-step generation from the top of the schedule
    rng::Stream gen_stream(7);
    const int samples = 256;
    Eigen::MatrixXd generated(dz, samples);
    const double t_top = schedule.at(schedule.n_steps);
    for (int i = 0; i < samples; ++i) {
        Eigen::VectorXd eps(dz);
        for (int j = 0; j < dz; ++j) eps[j] = gen_stream.normal();
        Eigen::VectorXd z = result.denoiser.denoise(Eigen::MatrixXd(t_top * eps), t_top).col(0);
        generated.col(i) = result.scaler.unscale(Eigen::MatrixXd(z)).col(0);
    }
    const double ed = testutil::energy_distance(generated, latents.leftCols(samples));
    INFO("energy distance " << ed);
    REQUIRE(ed < 0.15);

    // training progressed
    const std::size_t tenth = result.curve.rows.size() / 10;
    std::vector<double> first, last;
    for (std::size_t i = 0; i < tenth; ++i) first.push_back(result.curve.rows[i][1]);
    for (std::size_t i = result.curve.rows.size() - tenth; i < result.curve.rows.size(); ++i)
        last.push_back(result.curve.rows[i][1]);
    std::sort(first.begin(), first.end());
    std::sort(last.begin(), last.end());
    REQUIRE(last[last.size() / 2] < first[first.size() / 2]);
}

TEST_CASE("ema rate one freezes the teacher at initialization") {
    rng::Stream stream(8);
    const int dz = 2;
    Eigen::MatrixXd latents = Eigen::MatrixXd::Random(dz, 128);
    auto schedule = build_schedule(10, 7.0, 0.002, 5.0, 10);
    auto decoder = identity_decoder(dz);
    CdmTrainConfig cfg;
    cfg.steps = 50;
    cfg.batch = 16;
    cfg.hidden = {8};
    cfg.ema_rate = 1.0;
    cfg.seed = 9;
    auto result = train_consistency(latents, decoder, schedule, cfg);
    // reproduce the deterministic init: teacher must equal it exactly
    rng::Stream init_stream(rng::derive_seed(cfg.seed, "cdm"));
    nn::DenseNet init = nn::make_mlp(dz + 1, cfg.hidden, dz, init_stream);
    REQUIRE((result.teacher.f.layers[0].w - init.layers[0].w).cwiseAbs().maxCoeff() == 0.0);
    // while the student moved
    REQUIRE((result.denoiser.f.layers[0].w - init.layers[0].w).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("detection and imputation mask algebra") {
    const int dz = 4;
    Eigen::VectorXd z_star = Eigen::VectorXd::Constant(dz, 0.2);
    auto schedule = build_schedule(40, 7.0, 0.002, 20.0, 30);
    LatentScaler scaler;
    scaler.mean = Eigen::VectorXd::Zero(dz);
    scaler.std = Eigen::VectorXd::Ones(dz);
    scaler.sigma_data = 0.5;
    auto denoiser = perfect_point_denoiser(scaler.scale(z_star), schedule.at(schedule.m));

    RecoveryConfig cfg;
    cfg.tau = {schedule.m};
    cfg.seed = 11;

    SECTION("infinite threshold flags nothing and imputation is the identity on trusted data") {
        cfg.threshold = std::numeric_limits<double>::infinity();
        rng::Stream stream(cfg.seed);
        auto det = detect_anomalies(denoiser, scaler, z_star, schedule, cfg, stream);
        REQUIRE(det.mask.count() == 0);
        auto imputed = impute_latent(denoiser, scaler, det, schedule, cfg, stream);
        REQUIRE((imputed - det.z_hat_scaled).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("full mask makes the output independent of the received values") {
        cfg.threshold = -1.0; // everything flagged
        Eigen::VectorXd za = Eigen::VectorXd::Constant(dz, 5.0);
        Eigen::VectorXd zb = Eigen::VectorXd::Constant(dz, -7.0);
        auto ra = recover(denoiser, scaler, identity_decoder(dz), za, schedule, cfg);
        auto rb = recover(denoiser, scaler, identity_decoder(dz), zb, schedule, cfg);
        REQUIRE(ra.detection.mask.count() == dz);
        REQUIRE((ra.z_recovered - rb.z_recovered).cwiseAbs().maxCoeff() == 0.0);
    }

    SECTION("recovery is deterministic and preserves trusted coordinates") {
        cfg.threshold = 0.5;
        Eigen::VectorXd z_bad = z_star;
        z_bad[2] += 10.0;
        auto r1 = recover(denoiser, scaler, identity_decoder(dz), z_bad, schedule, cfg);
        auto r2 = recover(denoiser, scaler, identity_decoder(dz), z_bad, schedule, cfg);
        REQUIRE((r1.z_recovered - r2.z_recovered).cwiseAbs().maxCoeff() == 0.0);
        // the perfect denoiser pulls everything to z_star, so the corrupted
        // coordinate is flagged
        REQUIRE(r1.detection.mask[2]);
        // unflagged coordinates carry the denoised estimate exactly
        for (int i = 0; i < dz; ++i)
            if (!r1.detection.mask[i]) {
                const double expected = scaler.unscale(Eigen::MatrixXd(r1.detection.z_hat_scaled))(i, 0);
                REQUIRE(r1.z_recovered[i] == expected);
            }
    }
}

TEST_CASE("denoiser checkpoint round-trips with its schedule header") {
    rng::Stream stream(12);
    DenoiserNet d;
    d.sigma_data = 0.5;
    d.f = nn::make_mlp(5, {8}, 4, stream);
    LatentScaler scaler;
    scaler.mean = Eigen::VectorXd::Random(4);
    scaler.std = Eigen::VectorXd::Random(4).cwiseAbs() + Eigen::VectorXd::Ones(4);
    scaler.sigma_data = 0.5;
    auto schedule = build_schedule(100, 7.0, 0.002, 80.0, 50);
    gen::ModelMeta meta;
    meta.machines = {0};
    auto tmp = std::filesystem::temp_directory_path() / "dse_denoiser.ckpt";
    save_denoiser(tmp, d, scaler, schedule, 1.25, meta);
    auto loaded = load_denoiser(tmp);
    REQUIRE(loaded.schedule.levels[1] == 0.002);
    REQUIRE(loaded.schedule.levels[100] == 80.0);
    REQUIRE(loaded.schedule.m == 50);
    REQUIRE(loaded.threshold == 1.25);
    REQUIRE((loaded.denoiser.f.layers[0].w - d.f.layers[0].w).cwiseAbs().maxCoeff() == 0.0);
    REQUIRE((loaded.scaler.mean - scaler.mean).cwiseAbs().maxCoeff() == 0.0);
}
