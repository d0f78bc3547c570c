#include <cmath>
#include <functional>
#include <vector>

#include <doctest.h>

#include "ensembledown/errors.hpp"
#include "ensembledown/nn/adam.hpp"
#include "ensembledown/nn/layers.hpp"
#include "ensembledown/nn/net.hpp"
#include "ensembledown/rng.hpp"

using namespace ensembledown;
using namespace ensembledown::nn;

namespace {

void fill_random(Tens<double>& t, RngStream& rng, double scale = 1.0) {
    for (auto& x : t.v) x = scale * rng.normal();
}

// Scalar objective L = sum(g_out .* f(inputs)); analytic gradients are checked
// entrywise against central finite differences on the same objective.
double fd_gradient(std::function<double()> loss, double* x, double h) {
    const double x0 = *x;
    *x = x0 + h;
    const double lp = loss();
    *x = x0 - h;
    const double lm = loss();
    *x = x0;
    return (lp - lm) / (2.0 * h);
}

// Denominator floor 1e-3: gradients that are exactly zero by symmetry (e.g. a
// bias absorbed by a following normalization) otherwise turn finite-difference
// roundoff (~1e-10) into large spurious relative errors.
double rel_err(double a, double b) {
    return std::abs(a - b) / std::max(1e-3, std::abs(a) + std::abs(b));
}

// Check every parameter entry of `refs` (capped per tensor) plus, optionally,
// the input tensor's gradient, against finite differences.
struct FdHarness {
    std::function<double()> loss;        // runs forward, returns sum(g .* out)
    std::function<void()> run_backward;  // zeroes grads, runs backward
    double h = 1e-5;

    double check_refs(ParamRefs<double>& refs, size_t cap_per_tensor = 64) {
        run_backward();
        // snapshot analytic grads before FD perturbs state
        std::vector<std::vector<double>> analytic;
        for (auto& r : refs) analytic.push_back(*r.grad);
        double worst = 0.0;
        RngStream pick(777);
        for (size_t ri = 0; ri < refs.size(); ++ri) {
            std::vector<double>& val = *refs[ri].value;
            std::vector<size_t> idx;
            if (val.size() <= cap_per_tensor) {
                for (size_t j = 0; j < val.size(); ++j) idx.push_back(j);
            } else {
                idx.push_back(0);
                idx.push_back(val.size() - 1);
                for (size_t k = 0; k + 2 < cap_per_tensor; ++k)
                    idx.push_back(pick.uniform_index(val.size()));
            }
            for (size_t j : idx) {
                const double fd = fd_gradient(loss, &val[j], h);
                worst = std::max(worst, rel_err(analytic[ri][j], fd));
            }
        }
        return worst;
    }

    double check_vector(const std::vector<double>& analytic, std::vector<double>& x,
                        size_t cap = 128) {
        double worst = 0.0;
        RngStream pick(778);
        std::vector<size_t> idx;
        if (x.size() <= cap) {
            for (size_t j = 0; j < x.size(); ++j) idx.push_back(j);
        } else {
            idx.push_back(0);
            idx.push_back(x.size() - 1);
            for (size_t k = 0; k + 2 < cap; ++k) idx.push_back(pick.uniform_index(x.size()));
        }
        for (size_t j : idx) {
            const double fd = fd_gradient(loss, &x[j], h);
            worst = std::max(worst, rel_err(analytic[j], fd));
        }
        return worst;
    }
};

double dot(const Tens<double>& a, const Tens<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

}  // namespace

TEST_CASE("conv3x3 gradients match finite differences") {
    RngStream rng(11);
    Conv3x3<double> conv;
    conv.init(3, 4, rng);
    Tens<double> in(2, 3, 6, 5), g(2, 4, 6, 5), out, gin;
    fill_random(in, rng);
    fill_random(g, rng);

    ParamRefs<double> refs;
    conv.params(refs, "conv");
    FdHarness fh;
    fh.loss = [&] {
        conv.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        conv.backward(g, gin);
    };
    CHECK(fh.check_refs(refs) < 1e-7);
    fh.run_backward();
    CHECK(fh.check_vector(gin.v, in.v) < 1e-7);
}

TEST_CASE("conv3x3 circular padding wraps rows and columns") {
    RngStream rng(12);
    Conv3x3<double> conv;
    conv.init(1, 1, rng);
    // impulse at (0,0): with periodic wrap it must contribute to (h-1, w-1)
    Tens<double> in(1, 1, 4, 4), out;
    in.v[0] = 1.0;
    conv.forward(in, out);
    ParamRefs<double> refs;
    conv.params(refs, "c");
    const std::vector<double>& w = *refs[0].value;  // [1,1,3,3]
    const double bias = (*refs[1].value)[0];
    // out(3,3) reads in(3+dy, 3+dx); the impulse sits at the wrapped (+1,+1)
    // offset, i.e. the last kernel tap
    CHECK(out.v[15] == doctest::Approx(w[8] + bias).epsilon(1e-12));
    // out(1,1) reads it through the (-1,-1) offset, the first tap
    CHECK(out.v[5] == doctest::Approx(w[0] + bias).epsilon(1e-12));
}

TEST_CASE("conv1x1 gradients match finite differences") {
    RngStream rng(13);
    Conv1x1<double> conv;
    conv.init(4, 3, rng);
    Tens<double> in(2, 4, 3, 5), g(2, 3, 3, 5), out, gin;
    fill_random(in, rng);
    fill_random(g, rng);
    ParamRefs<double> refs;
    conv.params(refs, "c");
    FdHarness fh;
    fh.loss = [&] {
        conv.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        conv.backward(g, gin);
    };
    CHECK(fh.check_refs(refs) < 1e-7);
    fh.run_backward();
    CHECK(fh.check_vector(gin.v, in.v) < 1e-7);
}

TEST_CASE("transposed conv2x2 doubles resolution and matches finite differences") {
    RngStream rng(14);
    ConvT2x2<double> up;
    up.init(3, 2, rng);
    Tens<double> in(2, 3, 5, 4), g, out, gin;
    fill_random(in, rng);
    up.forward(in, out);
    CHECK(out.h == 10);
    CHECK(out.w == 8);
    g.resize(out.b, out.c, out.h, out.w);
    fill_random(g, rng);

    ParamRefs<double> refs;
    up.params(refs, "u");
    FdHarness fh;
    fh.loss = [&] {
        up.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        up.backward(g, gin);
    };
    CHECK(fh.check_refs(refs) < 1e-7);
    fh.run_backward();
    CHECK(fh.check_vector(gin.v, in.v) < 1e-6);
}

TEST_CASE("average pool halves resolution; constant field is preserved") {
    Tens<double> in(1, 2, 6, 4), out;
    for (auto& x : in.v) x = 3.25;
    AvgPool2<double> pool;
    pool.forward(in, out);
    CHECK(out.h == 3);
    CHECK(out.w == 2);
    for (double x : out.v) CHECK(x == doctest::Approx(3.25).epsilon(1e-15));

    // linear op: backward distributes grad/4 to each cell of the window
    Tens<double> g(1, 2, 3, 2), gin;
    for (auto& x : g.v) x = 1.0;
    pool.backward(g, gin);
    for (double x : gin.v) CHECK(x == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("group norm normalizes groups and matches finite differences") {
    RngStream rng(15);
    GroupNorm<double> gn;
    gn.init(6, norm_groups_for(6));
    Tens<double> in(2, 6, 4, 3), g(2, 6, 4, 3), out, gin;
    fill_random(in, rng, 2.0);
    fill_random(g, rng);

    gn.forward(in, out);
    // with unit gamma / zero beta each normalized group has mean 0, var 1
    for (int s = 0; s < 2; ++s)
        for (int c = 0; c < 6; ++c) {
            const double* p = out.chan(s, c);
            double m = 0.0, v = 0.0;
            for (size_t i = 0; i < out.plane(); ++i) m += p[i];
            m /= static_cast<double>(out.plane());
            for (size_t i = 0; i < out.plane(); ++i) v += (p[i] - m) * (p[i] - m);
            v /= static_cast<double>(out.plane());
            CHECK(std::abs(m) < 1e-12);
            // var/(var+eps) with eps=1e-5 leaves a small deficit below 1
            CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
        }

    ParamRefs<double> refs;
    gn.params(refs, "gn");
    FdHarness fh;
    fh.h = 1e-5;
    fh.loss = [&] {
        gn.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        gn.backward(g, gin);
    };
    CHECK(fh.check_refs(refs) < 1e-6);
    fh.run_backward();
    CHECK(fh.check_vector(gin.v, in.v) < 1e-6);
}

TEST_CASE("group count reduction finds a divisor") {
    CHECK(norm_groups_for(16) == 8);
    CHECK(norm_groups_for(6) == 6);
    CHECK(norm_groups_for(7) == 7);
    CHECK(norm_groups_for(4) == 4);
    CHECK(norm_groups_for(12) == 6);
    CHECK(norm_groups_for(1) == 1);
}

TEST_CASE("silu forward and derivative") {
    SiLU<double> act;
    Tens<double> in(1, 1, 1, 5), out, g(1, 1, 1, 5), gin;
    in.v = {-2.0, -0.5, 0.0, 0.5, 2.0};
    act.forward(in, out);
    for (int i = 0; i < 5; ++i) {
        const double x = in.v[i];
        CHECK(out.v[i] == doctest::Approx(x / (1.0 + std::exp(-x))).epsilon(1e-14));
    }
    for (auto& x : g.v) x = 1.0;
    act.backward(g, gin);
    FdHarness fh;
    fh.loss = [&] {
        act.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {};
    CHECK(fh.check_vector(gin.v, in.v) < 1e-9);
}

TEST_CASE("linear layer matches finite differences") {
    RngStream rng(16);
    Linear<double> lin;
    lin.init(5, 4, rng);
    Tens<double> in(3, 5, 1, 1), g(3, 4, 1, 1), out, gin;
    fill_random(in, rng);
    fill_random(g, rng);
    ParamRefs<double> refs;
    lin.params(refs, "l");
    FdHarness fh;
    fh.loss = [&] {
        lin.forward(in, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        lin.backward(g, gin);
    };
    CHECK(fh.check_refs(refs) < 1e-8);
    fh.run_backward();
    CHECK(fh.check_vector(gin.v, in.v) < 1e-8);
}

TEST_CASE("residual block with time bias matches finite differences") {
    RngStream rng(17);
    ResBlock<double> rb;
    rb.init(3, 5, 4, rng);
    Tens<double> x(2, 3, 4, 4), e(2, 4, 1, 1), g(2, 5, 4, 4), out, gx;
    fill_random(x, rng);
    fill_random(e, rng);
    fill_random(g, rng);
    ParamRefs<double> refs;
    rb.params(refs, "rb");
    Tens<double> ge(2, 4, 1, 1);
    FdHarness fh;
    fh.loss = [&] {
        rb.forward(x, &e, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        ge.zero();
        rb.backward(g, gx, &ge);
    };
    CHECK(fh.check_refs(refs) < 1e-6);
    fh.run_backward();
    CHECK(fh.check_vector(gx.v, x.v) < 1e-6);
    CHECK(fh.check_vector(ge.v, e.v) < 1e-6);
}

TEST_CASE("residual block without projection uses identity skip") {
    RngStream rng(18);
    ResBlock<double> rb;
    rb.init(4, 4, 0, rng);
    Tens<double> x(1, 4, 4, 4), out, g(1, 4, 4, 4), gx;
    fill_random(x, rng);
    fill_random(g, rng);
    ParamRefs<double> refs;
    rb.params(refs, "rb");
    // no skip-projection params when c_in == c_out
    for (const auto& r : refs) CHECK(r.name.find("skip") == std::string::npos);
    FdHarness fh;
    fh.loss = [&] {
        rb.forward(x, nullptr, out);
        return dot(g, out);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        rb.backward(g, gx, nullptr);
    };
    CHECK(fh.check_refs(refs) < 1e-6);
    fh.run_backward();
    CHECK(fh.check_vector(gx.v, x.v) < 1e-6);
}

TEST_CASE("coordinate channels: shape, range, periodicity") {
    auto coords = make_coord_channels<double>(16, 12);
    CHECK(coords.size() == size_t(kCoordChannels) * 16 * 12);
    for (double v : coords) {
        CHECK(v <= 1.0 + 1e-12);
        CHECK(v >= -1.0 - 1e-12);
    }
    // channel 0 = sin(2*pi*y/ny): zero at y=0, periodic continuation
    for (int x = 0; x < 12; ++x) CHECK(std::abs(coords[x]) < 1e-12);
    // channel 1 = cos(2*pi*y/ny): one at y=0
    for (int x = 0; x < 12; ++x)
        CHECK(coords[16 * 12 + x] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("sinusoidal time embedding distinguishes steps") {
    Tens<double> e;
    sinusoidal_embedding<double>({0, 1, 500, 1000}, 8, 1.0, e);
    CHECK(e.b == 4);
    CHECK(e.c == 8);
    // t = 0: sin components 0, cos components 1
    for (int i = 0; i < 4; ++i) {
        CHECK(e.v[2 * i] == doctest::Approx(0.0).epsilon(1e-14));
        CHECK(e.v[2 * i + 1] == doctest::Approx(1.0).epsilon(1e-14));
    }
    // distinct steps get distinct embeddings
    for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b) {
            double d = 0.0;
            for (int i = 0; i < 8; ++i) d += std::abs(e.v[a * 8 + i] - e.v[b * 8 + i]);
            CHECK(d > 1e-3);
        }
    Tens<double> bad;
    CHECK_THROWS(sinusoidal_embedding<double>({1}, 7, 1.0, bad));
}

namespace {

DenoiserConfig tiny_denoiser_cfg(int depth) {
    DenoiserConfig cfg;
    cfg.channels = 2;
    cfg.ny = 8;
    cfg.nx = 8;
    cfg.width = 4;
    cfg.depth = depth;
    cfg.time_dim = 4;
    cfg.schedule_T = 64;
    cfg.coords = true;
    cfg.pos_embed = true;
    return cfg;
}

}  // namespace

TEST_CASE("denoiser net: zero output at init, deterministic init and forward") {
    DenoiserNet<double> net;
    net.init(tiny_denoiser_cfg(2), 99);
    RngStream rng(20);
    Tens<double> x(3, 2, 8, 8), eps;
    fill_random(x, rng);
    net.forward(x, {1, 30, 64}, eps);
    CHECK(eps.same_shape(x));
    for (double v : eps.v) CHECK(v == 0.0);  // zero-initialized output conv

    DenoiserNet<double> net2;
    net2.init(tiny_denoiser_cfg(2), 99);
    auto p1 = net.params();
    auto p2 = net2.params();
    REQUIRE(p1.size() == p2.size());
    for (size_t i = 0; i < p1.size(); ++i) {
        REQUIRE(p1[i].value->size() == p2[i].value->size());
        for (size_t j = 0; j < p1[i].value->size(); ++j)
            CHECK((*p1[i].value)[j] == (*p2[i].value)[j]);
    }

    DenoiserNet<double> net3;
    net3.init(tiny_denoiser_cfg(2), 100);
    auto p3 = net3.params();
    double diff = 0.0;
    for (size_t j = 0; j < p1[0].value->size(); ++j)
        diff += std::abs((*p1[0].value)[j] - (*p3[0].value)[j]);
    CHECK(diff > 0.0);  // different seed, different weights
}

TEST_CASE("denoiser net gradients match finite differences (depth 0 and 2)") {
    for (int depth : {0, 2}) {
        CAPTURE(depth);
        DenoiserNet<double> net;
        net.init(tiny_denoiser_cfg(depth), 7);
        // nudge params off init so the zeroed output conv has nonzero grads flowing
        auto refs = net.params();
        RngStream jig(21);
        for (auto& r : refs)
            for (auto& v : *r.value) v += 0.05 * jig.normal();
        RngStream rng(22);
        Tens<double> x(2, 2, 8, 8), g, eps;
        fill_random(x, rng);
        std::vector<int> t = {3, 40};
        net.forward(x, t, eps);
        g.resize(eps.b, eps.c, eps.h, eps.w);
        fill_random(g, rng);
        FdHarness fh;
        fh.h = 1e-5;
        fh.loss = [&] {
            net.forward(x, t, eps);
            return dot(g, eps);
        };
        fh.run_backward = [&] {
            fh.loss();
            zero_grads(refs);
            net.backward(g);
        };
        CHECK(fh.check_refs(refs, 12) < 1e-5);
    }
}

TEST_CASE("denoiser net: sub-1k-parameter probe configuration exists") {
    DenoiserConfig cfg;
    cfg.channels = 1;
    cfg.ny = 8;
    cfg.nx = 8;
    cfg.width = 4;
    cfg.depth = 0;
    cfg.time_dim = 4;
    cfg.schedule_T = 16;
    cfg.coords = false;
    cfg.pos_embed = false;
    DenoiserNet<double> net;
    net.init(cfg, 1);
    CHECK(net.n_params() <= 1000);
    CHECK(net.n_params() >= 500);  // still a real multi-layer net
}

TEST_CASE("denoiser config validation and json round-trip") {
    DenoiserConfig cfg = tiny_denoiser_cfg(2);
    auto back = DenoiserConfig::from_json(cfg.to_json());
    CHECK(back.channels == cfg.channels);
    CHECK(back.width == cfg.width);
    CHECK(back.depth == cfg.depth);
    CHECK(back.schedule_T == cfg.schedule_T);

    DenoiserConfig bad = cfg;
    bad.ny = 10;  // not divisible by 2^depth
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.depth = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = cfg;
    bad.width = 2;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("regression net: upsampling shape, zero init output, gradients") {
    RegressionConfig cfg;
    cfg.channels = 2;
    cfg.coarse_ny = 4;
    cfg.coarse_nx = 4;
    cfg.factor = 4;
    cfg.width = 4;
    cfg.coords = true;
    cfg.out_bias = true;
    RegressionNet<double> net;
    net.init(cfg, 5);
    RngStream rng(23);
    Tens<double> coarse(2, 2, 4, 4), fine;
    fill_random(coarse, rng);
    net.forward(coarse, fine);
    CHECK(fine.b == 2);
    CHECK(fine.c == 2);
    CHECK(fine.h == 16);
    CHECK(fine.w == 16);
    for (double v : fine.v) CHECK(v == 0.0);  // zero conv + zero bias map

    auto refs = net.params();
    bool has_bias_map = false;
    for (auto& r : refs) has_bias_map |= (r.name == "out.bias_map");
    CHECK(has_bias_map);
    RngStream jig(24);
    for (auto& r : refs)
        for (auto& v : *r.value) v += 0.05 * jig.normal();
    Tens<double> g;
    net.forward(coarse, fine);
    g.resize(fine.b, fine.c, fine.h, fine.w);
    fill_random(g, rng);
    FdHarness fh;
    fh.loss = [&] {
        net.forward(coarse, fine);
        return dot(g, fine);
    };
    fh.run_backward = [&] {
        fh.loss();
        zero_grads(refs);
        net.backward(g);
    };
    CHECK(fh.check_refs(refs, 12) < 1e-5);
}

TEST_CASE("regression config rejects non power-of-two factor") {
    RegressionConfig cfg;
    cfg.channels = 1;
    cfg.coarse_ny = 4;
    cfg.coarse_nx = 4;
    cfg.factor = 6;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.factor = 8;
    cfg.validate();
    auto back = RegressionConfig::from_json(cfg.to_json());
    CHECK(back.factor == 8);
    CHECK(back.fine_ny() == 32);
}

TEST_CASE("adam optimizer minimizes a quadratic and anneals the rate") {
    // minimize 0.5*(p - target)^2 per coordinate
    std::vector<double> p = {5.0, -3.0, 0.5};
    std::vector<double> g(3, 0.0);
    std::vector<double> target = {1.0, 2.0, -0.25};
    ParamRefs<double> refs{{"p", &p, &g}};
    Adam<double> opt(refs, 0.05);
    for (int it = 0; it < 2000; ++it) {
        for (int i = 0; i < 3; ++i) g[i] = p[i] - target[i];
        opt.step();
    }
    for (int i = 0; i < 3; ++i) CHECK(p[i] == doctest::Approx(target[i]).epsilon(1e-3));

    Adam<double> sched(refs, 1e-4);
    sched.set_cosine_schedule(20.0, 0.01);
    sched.begin_epoch(0.0);
    CHECK(sched.current_lr() == doctest::Approx(1e-4).epsilon(1e-12));
    sched.begin_epoch(10.0);  // midpoint: average of peak and floor
    CHECK(sched.current_lr() == doctest::Approx(0.5 * (1e-4 + 1e-6)).epsilon(1e-9));
    sched.begin_epoch(20.0);  // restart
    CHECK(sched.current_lr() == doctest::Approx(1e-4).epsilon(1e-12));
    sched.begin_epoch(19.999);  // just before restart: near the floor
    CHECK(sched.current_lr() < 1.1e-6);
    CHECK_THROWS_AS(Adam<double>(refs, 0.0), ConfigError);
}

TEST_CASE("adam zero_grads clears accumulated gradients") {
    std::vector<double> p = {1.0};
    std::vector<double> g = {42.0};
    ParamRefs<double> refs{{"p", &p, &g}};
    Adam<double> opt(refs, 0.1);
    opt.zero_grads();
    CHECK(g[0] == 0.0);
}
