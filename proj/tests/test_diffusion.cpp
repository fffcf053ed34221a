// Noise schedule, forward noising, guidance combination, timestep spacing,
// and the deterministic DDIM walk (including branch-count accounting).

#include <doctest.h>

#include <cmath>

#include "ootd/diffusion.hpp"
#include "ootd/errors.hpp"
#include "ootd/rng.hpp"

using namespace ootd;

namespace {

UNetConfig tiny_eps_cfg() {
    UNetConfig c;
    c.in_ch = 8;
    c.out_ch = 4;
    c.base = 8;
    c.temb_dim = 16;
    c.heads = 4;
    c.cond_dim = 16;
    c.zero_init_in_ch = 4;
    return c;
}

UNetConfig tiny_omega_cfg() {
    UNetConfig c = tiny_eps_cfg();
    c.in_ch = 4;
    c.zero_init_in_ch = 0;
    return c;
}

}  // namespace

TEST_CASE("linear schedule: endpoints, strict decrease, clean slot") {
    NoiseSchedule s = NoiseSchedule::linear(1000);
    CHECK(s.T == 1000);
    CHECK(s.alpha_bars[0] == 1.0);
    CHECK(s.betas[1] == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(s.betas[1000] == doctest::Approx(2e-2).epsilon(1e-12));
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.alphas[t] == doctest::Approx(1.0 - s.betas[t]).epsilon(1e-15));
        CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
    }
    // abar_T for this schedule is tiny but positive.
    CHECK(s.alpha_bars[1000] > 0.0);
    CHECK(s.alpha_bars[1000] < 1e-4);

    CHECK_THROWS_AS(NoiseSchedule::linear(0), RangeError);
    CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.5, 1.5), RangeError);
}

TEST_CASE("add_noise: clean limit, coefficients, inversion, bounds") {
    NoiseSchedule s = NoiseSchedule::linear(1000);
    Rng r(3);
    Tensor z0 = normal<float>(r.fork("z"), {4, 3, 2});
    Tensor eps = normal<float>(r.fork("e"), {4, 3, 2});

    Tensor z_at_0 = add_noise(s, z0, eps, 0);
    CHECK(z_at_0.bitwise_equal(z0));

    Tensor ones = Tensor::ones({2, 2});
    Tensor zeros = Tensor::zeros({2, 2});
    Tensor zt = add_noise(s, ones, zeros, 500);
    for (size_t i = 0; i < zt.size(); ++i)
        CHECK(zt.at(i) == doctest::Approx(std::sqrt(s.alpha_bars[500])).epsilon(1e-6));
    Tensor nt = add_noise(s, zeros, ones, 500);
    for (size_t i = 0; i < nt.size(); ++i)
        CHECK(nt.at(i) == doctest::Approx(std::sqrt(1.0 - s.alpha_bars[500])).epsilon(1e-6));

    // Knowing eps, the clean latent is recoverable.
    int t = 777;
    Tensor noisy = add_noise(s, z0, eps, t);
    double sa = std::sqrt(s.alpha_bars[t]), sb = std::sqrt(1.0 - s.alpha_bars[t]);
    for (size_t i = 0; i < z0.size(); ++i)
        CHECK((noisy.at(i) - sb * eps.at(i)) / sa == doctest::Approx(z0.at(i)).epsilon(1e-4));

    CHECK_THROWS_AS(add_noise(s, z0, eps, -1), RangeError);
    CHECK_THROWS_AS(add_noise(s, z0, eps, 1001), RangeError);
    CHECK_THROWS_AS(add_noise(s, z0, Tensor({4, 3, 3}), 5), ShapeError);
}

TEST_CASE("training loss is elementwise mean squared error") {
    Tensor a = Tensor::from_data({2}, {1.0f, 2.0f});
    Tensor b = Tensor::zeros({2});
    CHECK(loss_ootd(a, b) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(loss_ootd(a, a) == 0.0);
    CHECK_THROWS_AS(loss_ootd(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("guidance combination identities") {
    Rng r(5);
    Tensor c = normal<float>(r.fork("c"), {4, 2, 2});
    Tensor u = normal<float>(r.fork("u"), {4, 2, 2});

    // s = 1 is exactly the conditional output.
    CHECK(cfg_combine(c, u, 1.0).bitwise_equal(c));
    // equal branches collapse to that branch at any scale.
    CHECK(cfg_combine(c, c.clone(), 3.7).bitwise_equal(c));
    // scalar check: u + s(c - u).
    Tensor c1 = Tensor::from_data({1}, {1.0f});
    Tensor u1 = Tensor::from_data({1}, {0.0f});
    CHECK(cfg_combine(c1, u1, 2.5).at(0) == doctest::Approx(2.5).epsilon(1e-7));

    CHECK_THROWS_AS(cfg_combine(c, u, 0.99), RangeError);
    CHECK_THROWS_AS(cfg_combine(c, Tensor({4, 2, 3}), 1.5), ShapeError);
}

TEST_CASE("ddim timestep subsequence is evenly spaced and ends at T") {
    std::vector<int> t20 = ddim_timesteps(1000, 20);
    REQUIRE(t20.size() == 20);
    for (int i = 0; i < 20; ++i) CHECK(t20[(size_t)i] == 50 * (i + 1));

    std::vector<int> t3 = ddim_timesteps(7, 3);
    CHECK(t3 == std::vector<int>{2, 4, 7});

    std::vector<int> tfull = ddim_timesteps(5, 5);
    CHECK(tfull == std::vector<int>{1, 2, 3, 4, 5});

    CHECK_THROWS_AS(ddim_timesteps(1000, 0), RangeError);
    CHECK_THROWS_AS(ddim_timesteps(1000, 1001), RangeError);
}

TEST_CASE("ddim with an oracle noise model reproduces the target exactly") {
    NoiseSchedule s = NoiseSchedule::linear(100);
    Rng r(9);
    Tensor x0 = normal<float>(r.fork("x0"), {4, 2, 2});
    Tensor zT = normal<float>(r.fork("zT"), {4, 2, 2});

    // eps consistent with "z is x0 noised at t": eps = (z - sa*x0)/sb.
    auto oracle = [&](const Tensor& z, int t) {
        double sa = std::sqrt(s.alpha_bars[t]), sb = std::sqrt(1.0 - s.alpha_bars[t]);
        Tensor e(z.shape());
        for (size_t i = 0; i < z.size(); ++i)
            e.at(i) = (float)(((double)z.at(i) - sa * (double)x0.at(i)) / sb);
        return e;
    };

    for (int steps : {1, 5, 20}) {
        Tensor out = ddim_trajectory<float>(s, zT.clone(), steps, oracle);
        for (size_t i = 0; i < out.size(); ++i)
            CHECK(std::abs(out.at(i) - x0.at(i)) <= 1e-5);
    }
}

TEST_CASE("ddim pre-step callback sees 1-based indices and descending timesteps") {
    NoiseSchedule s = NoiseSchedule::linear(100);
    std::vector<std::pair<int, int>> seen;
    auto eps_fn = [](const Tensor& z, int) { return Tensor::zeros(z.shape()); };
    ddim_trajectory<float>(s, Tensor::ones({1, 2, 2}), 4, eps_fn,
                           [&](int idx, int t, const Tensor&) { seen.push_back({idx, t}); });
    REQUIRE(seen.size() == 4);
    CHECK(seen[0] == std::pair<int, int>{1, 100});
    CHECK(seen[1] == std::pair<int, int>{2, 75});
    CHECK(seen[2] == std::pair<int, int>{3, 50});
    CHECK(seen[3] == std::pair<int, int>{4, 25});
}

TEST_CASE("guided sampling: branch counts, determinism, s=1 equivalence") {
    ParamStore store;
    UNet omega(store, "omega.", tiny_omega_cfg(), Rng(21));
    UNet eps(store, "eps.", tiny_eps_cfg(), Rng(22));
    NoiseSchedule sch = NoiseSchedule::linear(50);

    Rng r(30);
    Tensor xm = normal<float>(r.fork("xm"), {4, 4, 4});
    Tensor gz = normal<float>(r.fork("gz"), {4, 4, 4});
    Tensor psi = normal<float>(r.fork("psi"), {2, 16});
    GarmentFeatureStack fc = omega.outfit_forward(gz, psi);
    GarmentFeatureStack fu = omega.outfit_forward(Tensor::zeros({4, 4, 4}), psi);

    SampleConfig cfg;
    cfg.sampler_steps = 5;
    cfg.seed = 77;

    SUBCASE("s > 1 runs two model calls per step") {
        cfg.guidance = 2.0;
        DdimStats st;
        Tensor out = ddim_sample(eps, sch, xm, fc, fu, psi, cfg, &st);
        CHECK(st.steps == 5);
        CHECK(st.denoise_calls == 10);
        CHECK(out.all_finite());

        // Identical seeds reproduce bitwise; different seeds do not.
        DdimStats st2;
        Tensor out2 = ddim_sample(eps, sch, xm, fc, fu, psi, cfg, &st2);
        CHECK(out.bitwise_equal(out2));
        cfg.seed = 78;
        Tensor out3 = ddim_sample(eps, sch, xm, fc, fu, psi, cfg);
        CHECK_FALSE(out.bitwise_equal(out3));
    }

    SUBCASE("s = 1 runs one call per step and forcing the branch changes nothing") {
        cfg.guidance = 1.0;
        DdimStats st;
        Tensor single = ddim_sample(eps, sch, xm, fc, fu, psi, cfg, &st);
        CHECK(st.denoise_calls == 5);

        cfg.force_both_branches = true;
        DdimStats st2;
        Tensor forced = ddim_sample(eps, sch, xm, fc, fu, psi, cfg, &st2);
        CHECK(st2.denoise_calls == 10);
        CHECK(single.bitwise_equal(forced));
    }

    SUBCASE("config validation") {
        cfg.sampler_steps = 0;
        CHECK_THROWS_AS(ddim_sample(eps, sch, xm, fc, fu, psi, cfg), RangeError);
        cfg.sampler_steps = 51;
        CHECK_THROWS_AS(ddim_sample(eps, sch, xm, fc, fu, psi, cfg), RangeError);
        cfg.sampler_steps = 5;
        cfg.guidance = 0.5;
        CHECK_THROWS_AS(ddim_sample(eps, sch, xm, fc, fu, psi, cfg), RangeError);
    }

    SUBCASE("the unconditional branch matters once s exceeds 1") {
        cfg.guidance = 3.0;
        Tensor a = ddim_sample(eps, sch, xm, fc, fu, psi, cfg);
        GarmentFeatureStack fu2 = omega.outfit_forward(gz, psi);  // cond == uncond
        Tensor b = ddim_sample(eps, sch, xm, fc, fu2, psi, cfg);
        CHECK_FALSE(a.bitwise_equal(b));
    }
}
