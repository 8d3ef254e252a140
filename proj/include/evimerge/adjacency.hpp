#pragma once

#include <span>
#include <string>
#include <vector>

#include "evimerge/evidential.hpp"
#include "evimerge/tensor.hpp"

namespace evimerge {

// Radius-r neighborhood of one anchor in feature space. The adjacency set
// A_r(x_i) = {i} union neighbors; the anchor itself is never listed.
struct AdjacencySet {
    std::size_t anchor = 0;
    std::vector<std::size_t> neighbors;
    double radius = 0.0;
};

struct RadiusPolicy {
    enum class Kind { Fixed, Percentile };
    Kind kind = Kind::Percentile;
    double fixed_radius = 1.0;
    // Percentile mode picks r as the pairwise-distance quantile that makes
    // the mean neighborhood size approximately this large.
    double target_mean_neighbors = 10.0;
};

std::vector<AdjacencySet> build_adjacency(const Tensor& features /*[n x f]*/,
                                          const RadiusPolicy& policy);

// Mean over the adjacency set (anchor included) of log(S_j / max_c alpha_jc - 1).
double sharpness(std::span<const DirichletOpinion> opinions, const AdjacencySet& set);

// Mean over neighbors of || alpha_i/S_i - alpha_j/S_j ||_1; 0 when empty.
double divergence(std::span<const DirichletOpinion> opinions, const AdjacencySet& set);

// sum_c |p_ic - p_kc| * (1 - u_i)(1 - u_k).
double conflict(const DirichletOpinion& a, const DirichletOpinion& b);

struct DiscrepancyRecord {
    std::size_t anchor = 0;
    std::size_t neighbor = 0;
    double sharp = 0.0;
    double div = 0.0;
    double conf = 0.0;
    double ads = 0.0;  // sharp * div * conf
};

// d_ik for one neighbor; throws if k is not in the anchor's neighborhood.
DiscrepancyRecord ads(std::size_t anchor, std::size_t neighbor,
                      std::span<const DirichletOpinion> opinions,
                      std::span<const AdjacencySet> adjacency);

// All records, grouped per anchor in neighbor order.
std::vector<std::vector<DiscrepancyRecord>> ads_all(std::span<const DirichletOpinion> opinions,
                                                    std::span<const AdjacencySet> adjacency);

struct EpsilonPolicy {
    enum class Kind { Fixed, BatchMedian };
    Kind kind = Kind::BatchMedian;
    double fixed_epsilon = 0.0;
};

// Positive set M+ holds neighbors with d_ik < epsilon, negative set M-
// those with d_ik >= epsilon; boundary values go negative.
struct NeighborPartition {
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
};

double resolve_epsilon(std::span<const std::vector<DiscrepancyRecord>> records,
                       const EpsilonPolicy& policy);

std::vector<NeighborPartition> partition_neighbors(
    std::span<const std::vector<DiscrepancyRecord>> records, double epsilon);

// Diagnostic dump: anchor, neighbor, sharp, div, conf, ads, partition.
std::string ads_csv(std::span<const std::vector<DiscrepancyRecord>> records,
                    std::span<const NeighborPartition> partitions);

}  // namespace evimerge
