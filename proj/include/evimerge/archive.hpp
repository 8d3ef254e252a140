#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace evimerge {

// One named flat tensor inside an archive.
struct ArchiveEntry {
    std::string name;
    std::uint32_t layer_index = 0;
    std::vector<std::uint64_t> dims;
    std::vector<double> values;

    std::uint64_t numel() const;
    bool operator==(const ArchiveEntry& other) const = default;
};

// Named flat tensors for one model's parameters; the unit of merging.
// Entries are unique by name and sorted by (layer_index, name); a save/load
// round trip is bitwise identical ("EVMG" format, little-endian f64 payload).
struct ParameterArchive {
    std::uint32_t format_version = 1;
    std::vector<ArchiveEntry> entries;
    std::map<std::string, std::string> metadata;

    void add(ArchiveEntry entry);  // keeps (layer_index, name) order
    const ArchiveEntry* find(const std::string& name) const;
    std::uint32_t layer_count() const;  // max layer_index + 1, 0 when empty
    void validate() const;

    bool operator==(const ParameterArchive& other) const = default;
};

// Parameter deltas with the same layout as the base archive they were
// computed against.
struct TaskVector {
    ParameterArchive data;
};

enum class WeightMode { TaskWise, LayerWise };

struct MergeWeights {
    WeightMode mode = WeightMode::TaskWise;
    std::size_t task_count = 0;
    std::size_t layer_count = 0;                  // used in layer-wise mode
    std::vector<double> weights;                  // K, or K*layer_count (k-major)

    static MergeWeights task_wise(std::vector<double> w);
    static MergeWeights layer_wise(std::size_t task_count, std::size_t layer_count,
                                   std::vector<double> w);
    static MergeWeights uniform(std::size_t task_count);

    double at(std::size_t k, std::uint32_t layer) const;
    void validate() const;
};

void save_archive(const ParameterArchive& archive, const std::string& path);
ParameterArchive load_archive(const std::string& path);

// Entry table plus metadata as a JSON string (values omitted).
std::string inspect_archive(const ParameterArchive& archive);

// tau = finetuned - base, entrywise. Layouts must match exactly.
TaskVector compute_task_vector(const ParameterArchive& base, const ParameterArchive& finetuned);

// theta* = theta0 + sum_k w_k tau_k (task-wise) or with w_k^(layer) applied
// per entry layer_index (layer-wise). Zero weights are skipped so that an
// all-zero merge returns theta0 bitwise.
ParameterArchive merge_parameters(const ParameterArchive& base, std::span<const TaskVector> vectors,
                                  const MergeWeights& weights);

// base + tau, entrywise; used by tests and by one-hot identities.
ParameterArchive add_task_vector(const ParameterArchive& base, const TaskVector& tau);

// Rounds every parameter to the nearest value reachable as base + delta for
// a representable delta (at most a last-bit adjustment per weight). Archives
// snapped this way satisfy the merge identities exactly: compute the task
// vector, add it back, and the original bits return.
ParameterArchive snap_to_delta_reachable(const ParameterArchive& base,
                                         const ParameterArchive& finetuned);

// Throws LayoutError naming the first differing entry.
void require_same_layout(const ParameterArchive& a, const ParameterArchive& b, const char* what);

// Same layout and bit-identical values; metadata is ignored.
bool entries_bitwise_equal(const ParameterArchive& a, const ParameterArchive& b);

}  // namespace evimerge
