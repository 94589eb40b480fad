#include <doctest.h>

#include <cmath>
#include <limits>

#include "fedka/losses.hpp"
#include "oracles.hpp"

using namespace fedka;
using Mat = Eigen::MatrixXd;
using losses::KernelBank;

namespace {

Mat random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
    return m;
}

Mat shuffle_rows(const Mat& m, std::uint64_t seed) {
    Rng rng(seed);
    const auto order = rng.permutation_prefix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.rows()));
    Mat out(m.rows(), m.cols());
    for (std::size_t i = 0; i < order.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(order[i]));
    return out;
}

nn::NetworkSpec domain_spec(Eigen::Index width) {
    return {{width, 7, 2}, {true, false}, nn::OutputKind::kLogSoftmax};
}

}  // namespace

TEST_CASE("nll of a uniform prediction is ln C") {
    const Mat log_probs = Mat::Constant(4, 10, -std::log(10.0));
    const auto out = losses::nll_loss<double>(log_probs, {0, 3, 9, 5});
    CHECK(out.value == doctest::Approx(2.302585).epsilon(1e-6));
    CHECK(out.grad(1, 3) == doctest::Approx(-0.25));
    CHECK(out.grad.sum() == doctest::Approx(-1.0));
}

TEST_CASE("nll of a certain correct prediction is zero") {
    Mat log_probs = Mat::Constant(2, 3, -50.0);
    log_probs(0, 2) = 0.0;
    log_probs(1, 0) = 0.0;
    CHECK(losses::nll_loss<double>(log_probs, {2, 0}).value == 0.0);
}

TEST_CASE("nll gradient matches finite differences") {
    Mat lp = random_matrix(5, 4, 3);
    const std::vector<int> labels{1, 0, 3, 3, 2};
    const auto out = losses::nll_loss<double>(lp, labels);
    oracle::GradCheck check;
    oracle::check_dense(check, lp, out.grad, [&] { return losses::nll_loss<double>(lp, labels).value; });
    CHECK(check.failures == 0);
}

TEST_CASE("nll rejects bad labels") {
    const Mat lp = Mat::Zero(2, 3);
    CHECK_THROWS_AS(losses::nll_loss<double>(lp, {0, 3}), std::out_of_range);
    CHECK_THROWS_AS(losses::nll_loss<double>(lp, {-1, 0}), std::out_of_range);
    CHECK_THROWS_AS(losses::nll_loss<double>(lp, {0}), std::invalid_argument);
}

TEST_CASE("kernel bank clamps a zero median") {
    const Mat same = Mat::Constant(3, 2, 1.5);
    const auto bank = losses::kernel_bank_from<double>(same, same);
    const double expected[] = {2.5e-7, 5e-7, 1e-6, 2e-6, 4e-6};
    for (int r = 0; r < 5; ++r) CHECK(bank.sigma[static_cast<std::size_t>(r)] == doctest::Approx(expected[r]).epsilon(1e-12));
}

TEST_CASE("kernel bank is centred on the median pairwise distance") {
    Mat a(1, 2), b(1, 2);
    a << 0, 0;
    b << 2, 0;
    const auto bank = losses::kernel_bank_from<double>(a, b);
    const double expected[] = {0.5, 1, 2, 4, 8};
    for (int r = 0; r < 5; ++r) CHECK(bank.sigma[static_cast<std::size_t>(r)] == doctest::Approx(expected[r]).epsilon(1e-12));

    Mat line(4, 1);
    line << 0, 1, 3, 7;  // pooled distances 1 2 3 4 6 7
    const auto line_bank = losses::kernel_bank_from<double>(line.topRows(2), line.bottomRows(2));
    CHECK(line_bank.sigma[2] == doctest::Approx(3.5));
    for (int r = 0; r + 1 < 5; ++r) {
        CHECK(line_bank.sigma[static_cast<std::size_t>(r + 1)] == doctest::Approx(2 * line_bank.sigma[static_cast<std::size_t>(r)]));
    }
}

TEST_CASE("kernel bank scales with the inputs") {
    const Mat a = random_matrix(6, 3, 1);
    const Mat b = random_matrix(5, 3, 2);
    const auto base = losses::kernel_bank_from<double>(a, b);
    const auto scaled = losses::kernel_bank_from<double>(Mat(a * 3.5), Mat(b * 3.5));
    for (int r = 0; r < 5; ++r) {
        CHECK(scaled.sigma[static_cast<std::size_t>(r)] == doctest::Approx(3.5 * base.sigma[static_cast<std::size_t>(r)]).epsilon(1e-12));
    }
}

TEST_CASE("kernel bank rejects empty or mismatched input") {
    CHECK_THROWS_AS(losses::kernel_bank_from<double>(Mat(0, 2), Mat::Zero(2, 2)), std::invalid_argument);
    CHECK_THROWS_AS(losses::kernel_bank_from<double>(Mat::Zero(2, 3), Mat::Zero(2, 2)), std::invalid_argument);
}

TEST_CASE("single-kernel MMD of two singletons has the closed form") {
    Mat a(1, 2), b(1, 2);
    a << 0, 0;
    b << 2, 0;
    const auto out = losses::mmd_sq<double>(a, b, 1.0);
    CHECK(std::abs(out.value - (2.0 - 2.0 * std::exp(-2.0))) <= 1e-12);
    CHECK(out.value == doctest::Approx(1.72933).epsilon(1e-5));
}

TEST_CASE("MMD agrees with the brute-force triple sum") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Mat a = random_matrix(7, 4, seed);
        const Mat b = random_matrix(5, 4, seed + 10, 1.5);
        for (double sigma : {0.3, 1.0, 4.0}) {
            CHECK(losses::mmd_sq<double>(a, b, sigma).value == doctest::Approx(oracle::brute_mmd_sq(a, b, sigma)).epsilon(1e-12));
        }
    }
}

TEST_CASE("MK-MMD properties: identity, symmetry, permutation, non-negativity") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Mat a = random_matrix(6, 3, seed);
        const Mat b = random_matrix(4, 3, seed + 100, 2.0);
        const auto bank = losses::kernel_bank_from<double>(a, b);
        const double ab = losses::mk_mmd_sq<double>(a, b, bank).value;
        CHECK(ab >= 0.0);
        CHECK(losses::mk_mmd_sq<double>(a, shuffle_rows(a, seed), bank).value <= 1e-12);
        CHECK(losses::mk_mmd_sq<double>(b, a, bank).value == doctest::Approx(ab).epsilon(1e-12));
        CHECK(losses::mk_mmd_sq<double>(shuffle_rows(a, seed + 1), shuffle_rows(b, seed + 2), bank).value ==
              doctest::Approx(ab).epsilon(1e-12));
    }
}

TEST_CASE("MK-MMD gradient matches finite differences") {
    Mat a = random_matrix(4, 3, 5);
    const Mat b = random_matrix(4, 3, 6, 1.3);
    const auto bank = losses::kernel_bank_from<double>(a, b);
    const auto out = losses::mk_mmd_sq<double>(a, b, bank);
    oracle::GradCheck check;
    oracle::check_dense(check, a, out.grad, [&] { return losses::mk_mmd_sq<double>(a, b, bank).value; });
    CHECK(check.failures == 0);
    CHECK(check.max_rel_error <= 1e-4);
}

TEST_CASE("MMD rejects mismatched or empty sets") {
    CHECK_THROWS_AS(losses::mmd_sq<double>(Mat::Zero(2, 3), Mat::Zero(2, 2), 1.0), std::invalid_argument);
    CHECK_THROWS_AS(losses::mmd_sq<double>(Mat(0, 2), Mat::Zero(2, 2), 1.0), std::invalid_argument);
}

TEST_CASE("uniform domain classifier gives 2 ln 2") {
    auto fd = nn::init_network(domain_spec(4), 1);
    nn::for_each_tensor(false, [](auto& t) { t.setZero(); }, fd);
    const auto out = losses::disentangler_loss<double>(random_matrix(5, 4, 1), random_matrix(3, 4, 2), fd);
    CHECK(out.value == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
    CHECK(out.value == doctest::Approx(1.38629).epsilon(1e-5));
}

TEST_CASE("a perfectly separating domain classifier gives zero loss") {
    auto fd = nn::init_network(nn::NetworkSpec{{1, 2}, {false}, nn::OutputKind::kLogSoftmax}, 0);
    fd.layers[0].weight << -1000.0, 1000.0;
    const Mat client = Mat::Constant(3, 1, -1.0);
    const Mat target = Mat::Constant(2, 1, 1.0);
    CHECK(losses::disentangler_loss<double>(client, target, fd).value == 0.0);
}

TEST_CASE("disentangler loss is symmetric under swapping sets and labels") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto fd = nn::init_network(domain_spec(3), seed);
        const Mat h_client = random_matrix(6, 3, seed + 1);
        const Mat h_target = random_matrix(5, 3, seed + 2, 2.0);
        const double forward = losses::disentangler_loss<double>(h_client, h_target, fd).value;
        const double swapped = losses::domain_pair_loss<double>(h_target, losses::DomainLabel::kTarget, h_client,
                                                                losses::DomainLabel::kClient, fd)
                                   .value;
        CHECK(swapped == doctest::Approx(forward).epsilon(1e-12));
    }
}

TEST_CASE("disentangler gradients match finite differences") {
    auto fd = nn::init_network(domain_spec(3), 4);
    Mat h_client = random_matrix(6, 3, 11);
    Mat h_target = random_matrix(5, 3, 12, 1.5);
    const auto out = losses::disentangler_loss<double>(h_client, h_target, fd);
    auto loss = [&] { return losses::disentangler_loss<double>(h_client, h_target, fd).value; };
    oracle::GradCheck check;
    oracle::check_network(check, fd, out.grad_classifier, loss);
    oracle::check_dense(check, h_client, out.grad_first, loss);
    oracle::check_dense(check, h_target, out.grad_second, loss);
    CHECK(check.failures == 0);
}

TEST_CASE("disentangler rejects a width mismatch") {
    const auto fd = nn::init_network(domain_spec(3), 4);
    CHECK_THROWS_AS(losses::disentangler_loss<double>(Mat::Zero(2, 4), Mat::Zero(2, 4), fd), std::invalid_argument);
}

TEST_CASE("lambda schedule values") {
    CHECK(losses::lambda_schedule({0, 32, 0, 200, 5.0}) == 0.0);
    CHECK(losses::lambda_from_progress(0.5, 5.0) == doctest::Approx(0.84829).epsilon(1e-5));
    CHECK(losses::lambda_from_progress(0.5, 5.0) == doctest::Approx(std::tanh(1.25)).epsilon(1e-14));
    CHECK(losses::lambda_from_progress(1.0, 5.0) == doctest::Approx(0.98661).epsilon(1e-5));
    CHECK(losses::lambda_schedule({16, 32, 100, 200, 5.0}) == doctest::Approx(losses::lambda_from_progress(0.5025, 5.0)));
}

TEST_CASE("lambda schedule is monotone and bounded") {
    double previous = -1.0;
    for (int r = 0; r < 50; ++r) {
        for (int b = 0; b < 8; ++b) {
            const double v = losses::lambda_schedule({b, 8, r, 50, 5.0});
            CHECK(v >= previous);
            CHECK(v >= 0.0);
            CHECK(v < 1.0);
            previous = v;
        }
    }
    CHECK_THROWS_AS(losses::lambda_schedule({8, 8, 0, 50, 5.0}), std::invalid_argument);
    CHECK_THROWS_AS(losses::lambda_schedule({0, 8, 50, 50, 5.0}), std::invalid_argument);
}

TEST_CASE("combined local objective") {
    CHECK(losses::combined_local_objective(1.3, 0.4, 0.1, 0.0) == 1.3);
    CHECK(losses::combined_local_objective(1.0, 0.5, 0.2, 1.0) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(losses::combined_local_objective(0.8, 0.3, 0.3, 0.77) == 0.8);
    CHECK_THROWS_AS(losses::combined_local_objective(std::numeric_limits<double>::infinity(), 0, 0, 1),
                    std::domain_error);
}
