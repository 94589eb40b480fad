#include "fedka/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

namespace fedka {

std::string to_string(DomainRole role) {
    switch (role) {
        case DomainRole::kSource: return "source";
        case DomainRole::kTargetTrain: return "target-train";
        case DomainRole::kTargetTest: return "target-test";
    }
    return "source";
}

DomainRole parse_domain_role(const std::string& text) {
    if (text == "source") return DomainRole::kSource;
    if (text == "target-train") return DomainRole::kTargetTrain;
    if (text == "target-test") return DomainRole::kTargetTest;
    throw DataError("unknown domain role '" + text + "'");
}

void DomainDataset::validate(int num_classes) const {
    if (features.rows() < 1) throw DataError("domain '" + domain_id + "': no samples");
    if (!features.allFinite()) throw DataError("domain '" + domain_id + "': non-finite feature");
    if (labels) {
        if (static_cast<Eigen::Index>(labels->size()) != features.rows()) {
            throw DataError("domain '" + domain_id + "': label count does not match sample count");
        }
        for (int y : *labels) {
            if (y < 0 || (num_classes > 0 && y >= num_classes)) {
                throw DataError("domain '" + domain_id + "': label " + std::to_string(y) + " out of range");
            }
        }
    }
}

MatrixXd DomainDataset::rows(const std::vector<std::size_t>& indices) const {
    MatrixXd out(static_cast<Eigen::Index>(indices.size()), features.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(indices[i]));
    }
    return out;
}

std::vector<int> DomainDataset::label_rows(const std::vector<std::size_t>& indices) const {
    if (!labels) throw DataError("domain '" + domain_id + "' is unlabeled");
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back((*labels)[i]);
    return out;
}

void SyntheticSpec::validate() const {
    if (dim < 2) throw std::invalid_argument("SyntheticSpec: dim must be >= 2");
    if (num_classes < 2) throw std::invalid_argument("SyntheticSpec: num_classes must be >= 2");
    if (source_angles_deg.empty()) throw std::invalid_argument("SyntheticSpec: need at least one source domain");
    auto check_angle = [](double a) {
        if (!(a >= 0.0 && a < 180.0)) throw std::invalid_argument("SyntheticSpec: angles must lie in [0, 180)");
    };
    for (double a : source_angles_deg) check_angle(a);
    check_angle(target_angle_deg);
    if (plane_count < 1) throw std::invalid_argument("SyntheticSpec: plane_count must be positive");
    if (!(mean_scale > 0.0) || !(noise_sigma >= 0.0)) throw std::invalid_argument("SyntheticSpec: bad scale");
    if (samples_per_source < 1 || target_train < 1 || target_test < 1) {
        throw std::invalid_argument("SyntheticSpec: sample counts must be positive");
    }
}

MatrixXd PlaneSequence::rotation(int dim, double angle_deg) const {
    const double theta = angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta);
    const double s = std::sin(theta);
    MatrixXd r = MatrixXd::Identity(dim, dim);
    for (const auto& [i, j] : planes) {
        // left-multiply by the Givens rotation in plane (i, j)
        const Eigen::RowVectorXd ri = r.row(i);
        const Eigen::RowVectorXd rj = r.row(j);
        r.row(i) = c * ri - s * rj;
        r.row(j) = s * ri + c * rj;
    }
    return r;
}

PlaneSequence random_plane_sequence(int dim, int count, Rng& rng) {
    PlaneSequence seq;
    while (static_cast<int>(seq.planes.size()) < count) {
        const auto order = rng.permutation_prefix(static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
        for (std::size_t p = 0; p + 1 < order.size() && static_cast<int>(seq.planes.size()) < count; p += 2) {
            seq.planes.emplace_back(static_cast<int>(order[p]), static_cast<int>(order[p + 1]));
        }
    }
    return seq;
}

namespace {

DomainDataset sample_domain(const std::string& id, DomainRole role, int n, const MatrixXd& means,
                            const MatrixXd& rotation, double noise, Rng& rng) {
    const auto dim = means.cols();
    const int num_classes = static_cast<int>(means.rows());
    // balanced labels in shuffled order
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i % num_classes;
    for (int i = n - 1; i > 0; --i) {
        const auto j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i) + 1));
        std::swap(labels[static_cast<std::size_t>(i)], labels[static_cast<std::size_t>(j)]);
    }
    MatrixXd x(n, dim);
    for (int i = 0; i < n; ++i) {
        Eigen::RowVectorXd row = means.row(labels[static_cast<std::size_t>(i)]);
        for (Eigen::Index d = 0; d < dim; ++d) row(d) += noise * rng.normal();
        x.row(i) = row * rotation.transpose();
    }
    DomainDataset ds;
    ds.domain_id = id;
    ds.features = std::move(x);
    ds.labels = std::move(labels);
    ds.role = role;
    return ds;
}

}  // namespace

SyntheticDomains generate_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed) {
    spec.validate();
    SyntheticDomains out;
    Rng structure(derive_seed(seed, StreamTag::kData, 0));
    out.class_means.resize(spec.num_classes, spec.dim);
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int d = 0; d < spec.dim; ++d) out.class_means(c, d) = spec.mean_scale * structure.normal();
    }
    out.planes = random_plane_sequence(spec.dim, spec.plane_count, structure);

    for (int k = 0; k < spec.num_sources(); ++k) {
        Rng rng(derive_seed(seed, StreamTag::kData, 1 + static_cast<std::uint64_t>(k)));
        const auto rot = out.planes.rotation(spec.dim, spec.source_angles_deg[static_cast<std::size_t>(k)]);
        out.sources.push_back(sample_domain("source" + std::to_string(k), DomainRole::kSource,
                                            spec.samples_per_source, out.class_means, rot, spec.noise_sigma, rng));
    }
    const auto target_rot = out.planes.rotation(spec.dim, spec.target_angle_deg);
    // one draw split into disjoint train / test parts
    Rng target_rng(derive_seed(seed, StreamTag::kData, 1000));
    auto all = sample_domain("target", DomainRole::kTargetTrain, spec.target_train + spec.target_test,
                             out.class_means, target_rot, spec.noise_sigma, target_rng);
    out.target_train.domain_id = "target";
    out.target_train.role = DomainRole::kTargetTrain;
    out.target_train.features = all.features.topRows(spec.target_train);
    out.target_test.domain_id = "target";
    out.target_test.role = DomainRole::kTargetTest;
    out.target_test.features = all.features.bottomRows(spec.target_test);
    out.target_test.labels = std::vector<int>(all.labels->begin() + spec.target_train, all.labels->end());
    return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream in(line);
    while (std::getline(in, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return s.substr(first, last - first + 1);
}

double parse_double(const std::string& text, int line) {
    const std::string t = trim(text);
    std::size_t used = 0;
    double v = 0.0;
    try {
        v = std::stod(t, &used);
    } catch (const std::exception&) {
        throw DataError("malformed number '" + t + "'", line);
    }
    if (used != t.size()) throw DataError("malformed number '" + t + "'", line);
    if (!std::isfinite(v)) throw DataError("non-finite value '" + t + "'", line);
    return v;
}

int parse_label(const std::string& text, int line) {
    const std::string t = trim(text);
    std::size_t used = 0;
    long v = 0;
    try {
        v = std::stol(t, &used);
    } catch (const std::exception&) {
        throw DataError("malformed label '" + t + "'", line);
    }
    if (used != t.size() || v < -1) throw DataError("malformed label '" + t + "'", line);
    return static_cast<int>(v);
}

}  // namespace

DomainDataset load_domain_csv(const std::filesystem::path& path, std::string domain_id, DomainRole role) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("no samples");
    const auto header = split_csv(trim(line));
    if (header.size() < 2 || trim(header[0]) != "label") throw DataError("header must start with 'label'", 1);
    const std::size_t width = header.size() - 1;

    std::vector<double> values;
    std::vector<int> labels;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_csv(trim(line));
        if (fields.size() != width + 1) {
            throw DataError("expected " + std::to_string(width) + " features, found " +
                                std::to_string(fields.size() - 1),
                            line_no);
        }
        labels.push_back(parse_label(fields[0], line_no));
        for (std::size_t f = 1; f < fields.size(); ++f) values.push_back(parse_double(fields[f], line_no));
    }
    if (labels.empty()) throw DataError("no samples");

    DomainDataset ds;
    ds.domain_id = domain_id.empty() ? path.stem().string() : std::move(domain_id);
    ds.role = role;
    const auto n = static_cast<Eigen::Index>(labels.size());
    ds.features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), n, static_cast<Eigen::Index>(width));
    const bool all_labeled = std::all_of(labels.begin(), labels.end(), [](int y) { return y >= 0; });
    if (all_labeled) ds.labels = std::move(labels);
    return ds;
}

void write_domain_csv(const DomainDataset& dataset, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "label";
    for (Eigen::Index f = 0; f < dataset.dim(); ++f) out << ",f" << f;
    out << '\n';
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < dataset.size(); ++i) {
        out << (dataset.labels ? (*dataset.labels)[static_cast<std::size_t>(i)] : -1);
        for (Eigen::Index f = 0; f < dataset.dim(); ++f) out << ',' << dataset.features(i, f);
        out << '\n';
    }
    if (!out) throw DataError("write failed for " + path.string());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest " + path.string());
    std::string line;
    if (!std::getline(in, line) || trim(line) != "domain_id,path,role") {
        throw DataError("manifest header must be 'domain_id,path,role'", 1);
    }
    std::vector<ManifestEntry> entries;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto fields = split_csv(trim(line));
        if (fields.size() != 3) throw DataError("manifest rows need 3 fields", line_no);
        std::filesystem::path p = trim(fields[1]);
        if (p.is_relative()) p = path.parent_path() / p;
        try {
            entries.push_back({trim(fields[0]), p, parse_domain_role(trim(fields[2]))});
        } catch (const DataError& e) {
            throw DataError(e.what(), line_no);
        }
    }
    if (entries.empty()) throw DataError("manifest lists no domains");
    return entries;
}

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << "domain_id,path,role\n";
    for (const auto& e : entries) out << e.domain_id << ',' << e.path.string() << ',' << to_string(e.role) << '\n';
}

SyntheticDomains load_manifest_domains(const std::filesystem::path& path) {
    SyntheticDomains out;
    bool have_train = false;
    bool have_test = false;
    for (const auto& entry : read_manifest(path)) {
        auto ds = load_domain_csv(entry.path, entry.domain_id, entry.role);
        switch (entry.role) {
            case DomainRole::kSource:
                if (!ds.labeled()) throw DataError("source domain '" + entry.domain_id + "' must be labeled");
                out.sources.push_back(std::move(ds));
                break;
            case DomainRole::kTargetTrain:
                ds.labels.reset();
                out.target_train = std::move(ds);
                have_train = true;
                break;
            case DomainRole::kTargetTest:
                if (!ds.labeled()) throw DataError("target-test domain '" + entry.domain_id + "' must be labeled");
                out.target_test = std::move(ds);
                have_test = true;
                break;
        }
    }
    if (out.sources.empty() || !have_train || !have_test) {
        throw DataError("manifest needs >= 1 source, one target-train and one target-test domain");
    }
    const auto dim = out.target_train.dim();
    for (const auto& s : out.sources) {
        if (s.dim() != dim) throw DataError("domain '" + s.domain_id + "' has inconsistent width");
    }
    if (out.target_test.dim() != dim) throw DataError("target-test has inconsistent width");
    return out;
}

void write_domains(const SyntheticDomains& domains, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<ManifestEntry> entries;
    for (const auto& s : domains.sources) {
        const std::string file = s.domain_id + ".csv";
        write_domain_csv(s, dir / file);
        entries.push_back({s.domain_id, file, DomainRole::kSource});
    }
    write_domain_csv(domains.target_train, dir / "target_train.csv");
    entries.push_back({domains.target_train.domain_id, "target_train.csv", DomainRole::kTargetTrain});
    write_domain_csv(domains.target_test, dir / "target_test.csv");
    entries.push_back({domains.target_test.domain_id, "target_test.csv", DomainRole::kTargetTest});
    write_manifest(entries, dir / "manifest.csv");
}

std::vector<std::size_t> BatchPlan::batch(std::size_t b) const { return span(b, 1); }

std::vector<std::size_t> BatchPlan::span(std::size_t first_batch, std::size_t count) const {
    const std::size_t begin = first_batch * batch_size;
    const std::size_t end = begin + count * batch_size;
    if (end > indices.size()) throw std::out_of_range("BatchPlan: batch range past end of pool");
    return {indices.begin() + static_cast<std::ptrdiff_t>(begin), indices.begin() + static_cast<std::ptrdiff_t>(end)};
}

BatchPlan sample_batch(const DomainDataset& dataset, Rng& rng, std::size_t n, std::size_t batch_size) {
    const auto size = static_cast<std::size_t>(dataset.size());
    if (n > size) {
        throw std::invalid_argument("sample_batch: requested " + std::to_string(n) + " samples from domain '" +
                                    dataset.domain_id + "' of size " + std::to_string(size));
    }
    if (batch_size == 0) throw std::invalid_argument("sample_batch: batch size must be positive");
    return {rng.permutation_prefix(size, n), batch_size};
}

}  // namespace fedka
