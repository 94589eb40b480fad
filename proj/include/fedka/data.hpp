#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fedka/random.hpp"

namespace fedka {

using MatrixXd = Eigen::MatrixXd;

enum class DomainRole { kSource, kTargetTrain, kTargetTest };

std::string to_string(DomainRole role);
DomainRole parse_domain_role(const std::string& text);

/// Error raised for malformed dataset files; carries the offending line.
class DataError : public std::runtime_error {
public:
    DataError(const std::string& what, int line = 0)
        : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

/// One domain: samples as rows, optional integer labels.
struct DomainDataset {
    std::string domain_id;
    MatrixXd features;
    std::optional<std::vector<int>> labels;
    DomainRole role = DomainRole::kSource;

    Eigen::Index size() const { return features.rows(); }
    Eigen::Index dim() const { return features.cols(); }
    bool labeled() const { return labels.has_value(); }

    /// Throws DataError when shape, label range or finiteness is violated.
    void validate(int num_classes = -1) const;

    MatrixXd rows(const std::vector<std::size_t>& indices) const;
    std::vector<int> label_rows(const std::vector<std::size_t>& indices) const;
};

struct SyntheticSpec {
    int dim = 20;
    int num_classes = 5;
    std::vector<double> source_angles_deg{15.0, 30.0, 45.0, 60.0};
    double target_angle_deg = 75.0;
    /// Givens planes per rotation; dim / 2 is a single disjoint pairing.
    int plane_count = 55;
    double mean_scale = 3.0;
    double noise_sigma = 1.0;
    int samples_per_source = 2000;
    int target_train = 3000;
    int target_test = 1000;

    int num_sources() const { return static_cast<int>(source_angles_deg.size()); }
    void validate() const;
};

/// A sequence of coordinate planes and the rotation built from them.
struct PlaneSequence {
    std::vector<std::pair<int, int>> planes;

    /// Composition of Givens rotations by angle_deg in each plane.
    MatrixXd rotation(int dim, double angle_deg) const;
};

/// Random disjoint pairing of coordinates; every coordinate joins one plane
/// (one is left out when dim is odd).
/// Concatenated random disjoint pairings of the coordinates, truncated to
/// count planes.
PlaneSequence random_plane_sequence(int dim, int count, Rng& rng);

struct SyntheticDomains {
    std::vector<DomainDataset> sources;
    DomainDataset target_train;  ///< unlabeled
    DomainDataset target_test;   ///< labeled, used only for accuracy
    MatrixXd class_means;        ///< un-rotated, num_classes x dim
    PlaneSequence planes;
};

/// Class means are shared across domains; each domain rotates its samples
/// x = mean[y] + noise by its own angle in the shared plane sequence.
SyntheticDomains generate_synthetic_domains(const SyntheticSpec& spec, std::uint64_t seed);

/// Reads "label,f0,...,f{V-1}" CSV; label -1 marks an unlabeled row. The
/// dataset is labeled iff every row carries a label.
DomainDataset load_domain_csv(const std::filesystem::path& path, std::string domain_id = {},
                              DomainRole role = DomainRole::kSource);
void write_domain_csv(const DomainDataset& dataset, const std::filesystem::path& path);

struct ManifestEntry {
    std::string domain_id;
    std::filesystem::path path;
    DomainRole role;
};

/// Manifest CSV: header "domain_id,path,role"; relative paths resolve
/// against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);

/// Loads every manifest entry into the source / target layout.
SyntheticDomains load_manifest_domains(const std::filesystem::path& path);

/// Writes one CSV per domain plus manifest.csv into dir.
void write_domains(const SyntheticDomains& domains, const std::filesystem::path& dir);

/// A per-round pool drawn without replacement, chunked into batches in draw
/// order. Only the caller's stream advances.
struct BatchPlan {
    std::vector<std::size_t> indices;
    std::size_t batch_size = 0;

    std::size_t num_batches() const { return batch_size == 0 ? 0 : indices.size() / batch_size; }
    std::vector<std::size_t> batch(std::size_t b) const;
    std::vector<std::size_t> span(std::size_t first_batch, std::size_t count) const;
};

BatchPlan sample_batch(const DomainDataset& dataset, Rng& rng, std::size_t n, std::size_t batch_size);

}  // namespace fedka
