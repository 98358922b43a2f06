#include <gtest/gtest.h>

#include <random>

#include "feedrank/log.hpp"
#include "feedrank/scorer/maml.hpp"
#include "oracles.hpp"

using namespace feedrank;
using namespace feedrank::scorer;

namespace {

/// L(theta; T) = c_T * theta^2 on a single parameter.
struct Quadratic {
    struct Task {
        double c;
    };
    std::vector<double> gradient(std::span<const double> theta, const Task& t) const { return {2.0 * t.c * theta[0]}; }
    std::vector<double> hessian_vector(std::span<const double>, const Task& t, std::span<const double> v) const {
        return {2.0 * t.c * v[0]};
    }
};

static_assert(MetaObjective<Quadratic>);

std::vector<TrainTask> random_tasks(std::uint64_t seed, std::size_t n, std::size_t in) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<TrainTask> tasks;
    for (std::size_t t = 0; t < n; ++t) {
        TrainTask task{"t" + std::to_string(t), {}};
        for (int e = 0; e < 4; ++e) {
            Example ex;
            ex.x.resize(in);
            for (auto& v : ex.x) v = u(rng);
            ex.label = e % 2;
            task.examples.push_back(std::move(ex));
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

}  // namespace

TEST(MamlScalar, SecondOrderMatchesClosedForm) {
    const Quadratic obj;
    const std::vector<double> mask = {1.0};
    for (double c1 : {0.3, 1.0, -0.7}) {
        for (double c2 : {0.5, 2.0}) {
            MamlOptions o;
            o.inner_lr = 0.1;
            o.outer_lr = 0.05;
            const double theta = 1.7;
            const auto out = maml_step(obj, std::vector<double>{theta}, mask, {c1}, {c2}, o);
            EXPECT_NEAR(out[0], oracle::maml_scalar_second_order(theta, c1, c2, 0.1, 0.05), 1e-12);
        }
    }
}

TEST(MamlScalar, FirstOrderMatchesClosedFormAndDiffersByJacobian) {
    const Quadratic obj;
    MamlOptions o;
    o.inner_lr = 0.2;
    o.outer_lr = 0.1;
    o.order = MamlOrder::first_order;
    const double theta = -0.8, c1 = 0.9, c2 = 1.3;
    const auto fo = maml_step(obj, std::vector<double>{theta}, std::vector<double>{1.0}, {c1}, {c2}, o);
    EXPECT_NEAR(fo[0], oracle::maml_scalar_first_order(theta, c1, c2, 0.2, 0.1), 1e-12);
    const auto g_fo = maml_outer_gradient(obj, std::vector<double>{theta}, std::vector<double>{1.0}, {c1}, {c2}, 0.2, 1,
                                          MamlOrder::first_order);
    const auto g_so = maml_outer_gradient(obj, std::vector<double>{theta}, std::vector<double>{1.0}, {c1}, {c2}, 0.2, 1,
                                          MamlOrder::second_order);
    EXPECT_NEAR(g_so[0], (1.0 - 2.0 * 0.2 * c1) * g_fo[0], 1e-12);
    EXPECT_NE(g_so[0], g_fo[0]);
}

TEST(MamlScalar, TwoInnerStepsSecondOrder) {
    const Quadratic obj;
    MamlOptions o;
    o.inner_lr = 0.15;
    o.outer_lr = 0.2;
    o.inner_steps = 2;
    const auto out = maml_step(obj, std::vector<double>{2.0}, std::vector<double>{1.0}, {0.4}, {1.1}, o);
    EXPECT_NEAR(out[0], oracle::maml_scalar_second_order_two_steps(2.0, 0.4, 1.1, 0.15, 0.2), 1e-12);
}

TEST(MamlScalar, MoreThanTwoStepsFallsBackToFirstOrderWithWarning) {
    log::ScopedCapture cap;
    const Quadratic obj;
    const auto so = maml_outer_gradient(obj, std::vector<double>{1.0}, std::vector<double>{1.0}, {0.5}, {1.0}, 0.1, 3,
                                        MamlOrder::second_order);
    const auto fo = maml_outer_gradient(obj, std::vector<double>{1.0}, std::vector<double>{1.0}, {0.5}, {1.0}, 0.1, 3,
                                        MamlOrder::first_order);
    EXPECT_EQ(so, fo);
    EXPECT_EQ(cap.messages().size(), 1u);
}

TEST(Maml, ZeroInnerRateIsPlainGradientDescentOnSampledTasks) {
    const auto tasks = random_tasks(1, 5, 4);
    const auto p = ScorerParams::init({4, 3}, 2);
    MamlOptions o;
    o.inner_lr = 0.0;
    o.outer_lr = 0.3;
    o.epochs = 2;
    o.seed = 17;
    const auto meta = maml_train(p, tasks, o, TrainableMask::all());
    std::mt19937_64 rng(o.seed);
    ScorerParams sgd = p;
    for (std::size_t s = 0; s < o.epochs * tasks.size(); ++s) {
        const auto [a, b] = sample_task_pair(rng, tasks.size());
        (void)a;
        masked_step(sgd, grad(sgd, tasks[b].examples), o.outer_lr, TrainableMask::all());
    }
    const auto x = meta.theta();
    const auto y = sgd.theta();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(x[i], y[i], 1e-14);
}

TEST(Maml, FirstOrderGradientIsTaskTwoGradientAtAdaptedParams) {
    const auto tasks = random_tasks(2, 2, 5);
    const auto p = ScorerParams::init({5, 3}, 1);
    const ScorerObjective obj{p.shape()};
    const auto mask = TrainableMask::all().coordinates(p.shape());
    const auto g = maml_outer_gradient(obj, p.theta(), mask, tasks[0], tasks[1], 0.2, 1, MamlOrder::first_order);
    const auto adapted = query_finetune(p, tasks[0], 0.2, 1, TrainableMask::all());
    const auto expect = grad(adapted, tasks[1].examples);
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], expect[i], 1e-15);
}

TEST(Maml, SecondOrderGradientMatchesFiniteDifferences) {
    // f(theta) = L(theta - a M grad L(theta; T1); T2), differentiated numerically.
    const auto tasks = random_tasks(3, 2, 4);
    const auto p = ScorerParams::init({4, 3}, 5);
    const ScorerObjective obj{p.shape()};
    for (const auto mask_kind : {TrainableMask::all(), TrainableMask::bias_only()}) {
        const auto mask = mask_kind.coordinates(p.shape());
        const double alpha = 0.4;
        auto f = [&](std::vector<double> theta) {
            const auto g = grad(p.shape(), theta, tasks[0].examples);
            for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= alpha * mask[i] * g[i];
            return bce_loss(ScorerParams(p.shape(), theta), tasks[1].examples);
        };
        const auto analytic = maml_outer_gradient(obj, p.theta(), mask, tasks[0], tasks[1], alpha, 1, MamlOrder::second_order);
        std::vector<double> theta(p.theta().begin(), p.theta().end());
        std::vector<double> fd(theta.size());
        const double h = 1e-5;
        for (std::size_t i = 0; i < theta.size(); ++i) {
            auto up = theta, down = theta;
            up[i] += h;
            down[i] -= h;
            fd[i] = (f(up) - f(down)) / (2.0 * h);
        }
        EXPECT_LT(oracle::max_relative_error(analytic, fd), 1e-4);
    }
}

TEST(Maml, BiasOnlyMaskFreezesWeights) {
    const auto tasks = random_tasks(4, 6, 5);
    const auto p = ScorerParams::init({5, 4}, 9);
    for (auto order : {MamlOrder::first_order, MamlOrder::second_order}) {
        MamlOptions o;
        o.order = order;
        o.epochs = 3;
        const auto m = maml_train(p, tasks, o, TrainableMask::bias_only());
        const auto a = p.w1(), b = m.w1();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
        const auto c = p.w2(), d = m.w2();
        EXPECT_TRUE(std::equal(c.begin(), c.end(), d.begin()));
        EXPECT_NE(m, p);
    }
}

TEST(Maml, DeterministicAndNeedsTwoTasks) {
    const auto tasks = random_tasks(5, 4, 3);
    const auto p = ScorerParams::init({3, 2}, 0);
    MamlOptions o;
    o.seed = 3;
    EXPECT_EQ(maml_train(p, tasks, o, TrainableMask::all()), maml_train(p, tasks, o, TrainableMask::all()));
    EXPECT_THROW(maml_train(p, {tasks[0]}, o, TrainableMask::all()), PreconditionError);
}

TEST(Maml, TaskPairsAreDistinct) {
    std::mt19937_64 rng(0);
    for (int i = 0; i < 1000; ++i) {
        const auto [a, b] = sample_task_pair(rng, 3);
        EXPECT_NE(a, b);
        EXPECT_LT(a, 3u);
        EXPECT_LT(b, 3u);
    }
}

TEST(Maml, OrderNames) {
    EXPECT_EQ(parse_maml_order("first_order"), MamlOrder::first_order);
    EXPECT_EQ(parse_maml_order("second"), MamlOrder::second_order);
    EXPECT_THROW(parse_maml_order("third"), PreconditionError);
}
