#include <doctest.h>

#include <algorithm>
#include <set>

#include "fedka/data.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace fedka;
using fedka::testing::scratch_dir;
using fedka::testing::write_text;

namespace {

SyntheticSpec small_spec() {
    SyntheticSpec spec;
    spec.samples_per_source = 200;
    spec.target_train = 64;
    spec.target_test = 50;
    return spec;
}

std::vector<std::size_t> iota(std::size_t first, std::size_t count) {
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = first + i;
    return out;
}

}  // namespace

TEST_CASE("synthetic domains have the declared layout") {
    const auto spec = small_spec();
    const auto d = generate_synthetic_domains(spec, 3);
    REQUIRE(d.sources.size() == 4);
    for (const auto& s : d.sources) {
        CHECK(s.role == DomainRole::kSource);
        CHECK(s.labeled());
        CHECK(s.size() == 200);
        CHECK(s.dim() == 20);
        CHECK_NOTHROW(s.validate(5));
        std::vector<int> counts(5, 0);
        for (int y : *s.labels) counts[static_cast<std::size_t>(y)] += 1;
        for (int c : counts) CHECK(c == 40);
    }
    CHECK(d.target_train.role == DomainRole::kTargetTrain);
    CHECK_FALSE(d.target_train.labeled());
    CHECK(d.target_train.size() == 64);
    CHECK(d.target_test.role == DomainRole::kTargetTest);
    CHECK(d.target_test.labeled());
    CHECK(d.target_test.size() == 50);
    CHECK(d.class_means.rows() == 5);
    CHECK(static_cast<int>(d.planes.planes.size()) == spec.plane_count);
}

TEST_CASE("synthetic generation is a function of the seed") {
    const auto spec = small_spec();
    const auto a = generate_synthetic_domains(spec, 11);
    const auto b = generate_synthetic_domains(spec, 11);
    const auto c = generate_synthetic_domains(spec, 12);
    for (std::size_t k = 0; k < a.sources.size(); ++k) {
        CHECK(a.sources[k].features == b.sources[k].features);
        CHECK(*a.sources[k].labels == *b.sources[k].labels);
    }
    CHECK(a.target_train.features == b.target_train.features);
    CHECK(a.target_test.features == b.target_test.features);
    CHECK(a.sources[0].features != c.sources[0].features);
}

TEST_CASE("plane rotations are orthogonal and zero angle is the identity") {
    Rng rng(5);
    const auto seq = random_plane_sequence(20, 40, rng);
    CHECK(seq.planes.size() == 40);
    for (const auto& [i, j] : seq.planes) CHECK(i != j);
    for (double angle : {0.0, 15.0, 75.0}) {
        const auto r = seq.rotation(20, angle);
        CHECK((r * r.transpose() - MatrixXd::Identity(20, 20)).norm() <= 1e-12);
        CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-12));
    }
    CHECK((seq.rotation(20, 0.0) - MatrixXd::Identity(20, 20)).norm() == 0.0);

    Rng single(5);
    const auto pairing = random_plane_sequence(20, 10, single);
    std::set<int> used;
    for (const auto& [i, j] : pairing.planes) {
        used.insert(i);
        used.insert(j);
    }
    CHECK(used.size() == 20);
}

TEST_CASE("per-class sample means follow the rotated class means") {
    auto spec = small_spec();
    spec.samples_per_source = 2000;
    const auto d = generate_synthetic_domains(spec, 2);
    const auto& dom = d.sources[1];
    const auto rot = d.planes.rotation(spec.dim, spec.source_angles_deg[1]);
    for (int c = 0; c < spec.num_classes; ++c) {
        Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(spec.dim);
        int n = 0;
        for (Eigen::Index i = 0; i < dom.size(); ++i) {
            if ((*dom.labels)[static_cast<std::size_t>(i)] != c) continue;
            sum += dom.features.row(i);
            ++n;
        }
        const Eigen::RowVectorXd expected = d.class_means.row(c) * rot.transpose();
        // each coordinate of the empirical mean has standard error 1/sqrt(400)
        CHECK(((sum / n) - expected).cwiseAbs().maxCoeff() < 0.25);
    }
}

TEST_CASE("default task: logistic probe on one domain reaches 95 percent") {
    const SyntheticSpec spec;
    for (std::uint64_t seed : {0ULL, 1ULL, 2ULL}) {
        const auto d = generate_synthetic_domains(spec, seed);
        const auto& dom = d.sources[0];
        const auto train = iota(0, 1500);
        const auto test = iota(1500, 500);
        const double acc = oracle::logistic_probe_accuracy(dom.rows(train), dom.label_rows(train), dom.rows(test),
                                                           dom.label_rows(test), spec.num_classes);
        MESSAGE("probe accuracy seed " << seed << ": " << acc);
        CHECK(acc >= 0.95);
    }
}

TEST_CASE("synthetic spec validation") {
    auto spec = small_spec();
    spec.source_angles_deg.clear();
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = small_spec();
    spec.target_angle_deg = 190;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = small_spec();
    spec.plane_count = 0;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
    spec = small_spec();
    spec.mean_scale = -1;
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);
}

TEST_CASE("domain CSV round trip is exact") {
    const auto dir = scratch_dir("csv_roundtrip");
    const auto d = generate_synthetic_domains(small_spec(), 4);
    write_domain_csv(d.sources[2], dir / "s.csv");
    const auto back = load_domain_csv(dir / "s.csv", "s2");
    CHECK(back.domain_id == "s2");
    CHECK(back.features == d.sources[2].features);
    CHECK(*back.labels == *d.sources[2].labels);

    write_domain_csv(d.target_train, dir / "t.csv");
    const auto unlabeled = load_domain_csv(dir / "t.csv", "", DomainRole::kTargetTrain);
    CHECK(unlabeled.domain_id == "t");
    CHECK_FALSE(unlabeled.labeled());
    CHECK(unlabeled.features == d.target_train.features);
}

TEST_CASE("a CSV with some unlabeled rows is unlabeled") {
    const auto dir = scratch_dir("csv_mixed");
    write_text(dir / "m.csv", "label,f0,f1\n1,0.5,2\n-1,1,1\n");
    const auto ds = load_domain_csv(dir / "m.csv");
    CHECK_FALSE(ds.labeled());
    CHECK(ds.size() == 2);
}

TEST_CASE("CSV errors name the offending line") {
    const auto dir = scratch_dir("csv_errors");
    auto message = [&](const std::string& text) {
        write_text(dir / "bad.csv", text);
        try {
            load_domain_csv(dir / "bad.csv");
        } catch (const DataError& e) {
            return std::string(e.what());
        }
        return std::string("no error");
    };
    CHECK(message("label,f0,f1\n0,1,2\n1,3\n") == "line 3: expected 2 features, found 1");
    CHECK(message("label,f0\n0,abc\n") == "line 2: malformed number 'abc'");
    CHECK(message("label,f0\n0,1\nx,2\n") == "line 3: malformed label 'x'");
    CHECK(message("label,f0\n0,nan\n") == "line 2: non-finite value 'nan'");
    CHECK(message("y,f0\n0,1\n") == "line 1: header must start with 'label'");
    CHECK(message("label,f0\n") == "no samples");
    CHECK(message("") == "no samples");
    CHECK_THROWS_AS(load_domain_csv(dir / "missing.csv"), DataError);
}

TEST_CASE("dataset validation") {
    DomainDataset ds;
    ds.domain_id = "d";
    ds.features = MatrixXd::Zero(3, 2);
    ds.labels = std::vector<int>{0, 1, 5};
    CHECK_THROWS_AS(ds.validate(5), DataError);
    ds.labels = std::vector<int>{0, 1};
    CHECK_THROWS_AS(ds.validate(5), DataError);
    ds.labels = std::vector<int>{0, 1, 4};
    CHECK_NOTHROW(ds.validate(5));
    ds.features(1, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(ds.validate(5), DataError);
}

TEST_CASE("manifest round trip resolves relative paths") {
    const auto dir = scratch_dir("manifest");
    const auto d = generate_synthetic_domains(small_spec(), 6);
    write_domains(d, dir);
    const auto entries = read_manifest(dir / "manifest.csv");
    CHECK(entries.size() == 6);
    for (const auto& e : entries) CHECK(std::filesystem::exists(e.path));
    const auto loaded = load_manifest_domains(dir / "manifest.csv");
    REQUIRE(loaded.sources.size() == 4);
    CHECK(loaded.sources[3].features == d.sources[3].features);
    CHECK(loaded.target_test.features == d.target_test.features);
    CHECK_FALSE(loaded.target_train.labeled());

    write_text(dir / "bad_manifest.csv", "domain_id,path,role\ns0,source0.csv,sourcey\n");
    CHECK_THROWS_AS(read_manifest(dir / "bad_manifest.csv"), DataError);
}

TEST_CASE("sample_batch draws without replacement in batch chunks") {
    DomainDataset ds;
    ds.features = MatrixXd::Zero(100, 1);
    Rng a(9), b(9);
    const auto plan = sample_batch(ds, a, 64, 16);
    CHECK(plan.num_batches() == 4);
    CHECK(std::set<std::size_t>(plan.indices.begin(), plan.indices.end()).size() == 64);
    for (auto i : plan.indices) CHECK(i < 100);
    const auto third = plan.batch(2);
    CHECK(std::equal(third.begin(), third.end(), plan.indices.begin() + 32));
    CHECK(plan.span(1, 2).size() == 32);
    CHECK(sample_batch(ds, b, 64, 16).indices == plan.indices);
    CHECK_THROWS_AS(sample_batch(ds, a, 101, 16), std::invalid_argument);
}
