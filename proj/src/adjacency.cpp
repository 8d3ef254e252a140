#include "evimerge/adjacency.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "evimerge/errors.hpp"

namespace evimerge {

namespace {

constexpr double kLogFloor = 1e-12;

double euclidean(const Tensor& features, std::size_t a, std::size_t b) {
    const std::size_t f = features.cols();
    double sq = 0.0;
    for (std::size_t c = 0; c < f; ++c) {
        const double d = features.at(a, c) - features.at(b, c);
        sq += d * d;
    }
    return std::sqrt(sq);
}

}  // namespace

std::vector<AdjacencySet> build_adjacency(const Tensor& features, const RadiusPolicy& policy) {
    const std::size_t n = features.rows();
    if (n == 0) throw ContractViolation("build_adjacency: empty batch");

    double radius = policy.fixed_radius;
    if (policy.kind == RadiusPolicy::Kind::Percentile) {
        std::vector<double> dists;
        dists.reserve(n * (n - 1) / 2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) dists.push_back(euclidean(features, i, j));
        if (dists.empty()) {
            radius = 0.0;  // singleton batch; neighborhood stays empty
        } else {
            std::sort(dists.begin(), dists.end());
            // mean neighborhood size ~= q * (n - 1) for quantile q of all pairs
            double q = policy.target_mean_neighbors / static_cast<double>(n - 1);
            q = std::clamp(q, 0.0, 1.0);
            const std::size_t idx = std::min(
                dists.size() - 1,
                static_cast<std::size_t>(q * static_cast<double>(dists.size() - 1) + 0.5));
            radius = dists[idx];
        }
    }

    std::vector<AdjacencySet> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].anchor = i;
        out[i].radius = radius;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            if (euclidean(features, i, j) <= radius) out[i].neighbors.push_back(j);
        }
    }
    return out;
}

double sharpness(std::span<const DirichletOpinion> opinions, const AdjacencySet& set) {
    auto term = [](const DirichletOpinion& op) {
        double max_alpha = op.alpha[0];
        for (double a : op.alpha) max_alpha = std::max(max_alpha, a);
        const double arg = op.strength / max_alpha - 1.0;
        return std::log(arg > kLogFloor ? arg : kLogFloor);
    };
    double acc = term(opinions[set.anchor]);
    for (std::size_t j : set.neighbors) acc += term(opinions[j]);
    return acc / static_cast<double>(set.neighbors.size() + 1);
}

double divergence(std::span<const DirichletOpinion> opinions, const AdjacencySet& set) {
    if (set.neighbors.empty()) return 0.0;
    const DirichletOpinion& anchor = opinions[set.anchor];
    double acc = 0.0;
    for (std::size_t j : set.neighbors) {
        const DirichletOpinion& other = opinions[j];
        double l1 = 0.0;
        for (std::size_t c = 0; c < anchor.label_count; ++c)
            l1 += std::fabs(anchor.alpha[c] / anchor.strength - other.alpha[c] / other.strength);
        acc += l1;
    }
    return acc / static_cast<double>(set.neighbors.size());
}

double conflict(const DirichletOpinion& a, const DirichletOpinion& b) {
    if (a.label_count != b.label_count)
        throw ContractViolation("conflict: opinions over different label counts");
    double l1 = 0.0;
    for (std::size_t c = 0; c < a.label_count; ++c)
        l1 += std::fabs(a.probability[c] - b.probability[c]);
    return l1 * (1.0 - a.uncertainty) * (1.0 - b.uncertainty);
}

DiscrepancyRecord ads(std::size_t anchor, std::size_t neighbor,
                      std::span<const DirichletOpinion> opinions,
                      std::span<const AdjacencySet> adjacency) {
    const AdjacencySet& set = adjacency[anchor];
    if (std::find(set.neighbors.begin(), set.neighbors.end(), neighbor) == set.neighbors.end())
        throw ContractViolation("ads: sample " + std::to_string(neighbor) +
                                " is not a neighbor of anchor " + std::to_string(anchor));
    DiscrepancyRecord r;
    r.anchor = anchor;
    r.neighbor = neighbor;
    r.sharp = sharpness(opinions, set);
    r.div = divergence(opinions, set);
    r.conf = conflict(opinions[anchor], opinions[neighbor]);
    r.ads = r.sharp * r.div * r.conf;
    return r;
}

std::vector<std::vector<DiscrepancyRecord>> ads_all(std::span<const DirichletOpinion> opinions,
                                                    std::span<const AdjacencySet> adjacency) {
    std::vector<std::vector<DiscrepancyRecord>> out(adjacency.size());
    for (std::size_t i = 0; i < adjacency.size(); ++i) {
        const AdjacencySet& set = adjacency[i];
        // sharp and div depend on the anchor only; compute once per anchor
        const double sharp = sharpness(opinions, set);
        const double div = divergence(opinions, set);
        out[i].reserve(set.neighbors.size());
        for (std::size_t k : set.neighbors) {
            DiscrepancyRecord r;
            r.anchor = set.anchor;
            r.neighbor = k;
            r.sharp = sharp;
            r.div = div;
            r.conf = conflict(opinions[set.anchor], opinions[k]);
            r.ads = r.sharp * r.div * r.conf;
            out[i].push_back(r);
        }
    }
    return out;
}

double resolve_epsilon(std::span<const std::vector<DiscrepancyRecord>> records,
                       const EpsilonPolicy& policy) {
    if (policy.kind == EpsilonPolicy::Kind::Fixed) return policy.fixed_epsilon;
    std::vector<double> all;
    for (const auto& per_anchor : records)
        for (const auto& r : per_anchor) all.push_back(r.ads);
    if (all.empty()) return 0.0;
    std::sort(all.begin(), all.end());
    const std::size_t n = all.size();
    return n % 2 == 1 ? all[n / 2] : 0.5 * (all[n / 2 - 1] + all[n / 2]);
}

std::vector<NeighborPartition> partition_neighbors(
    std::span<const std::vector<DiscrepancyRecord>> records, double epsilon) {
    if (!std::isfinite(epsilon))
        throw ContractViolation("partition_neighbors: epsilon must be finite");
    std::vector<NeighborPartition> out(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (const auto& r : records[i]) {
            if (r.ads < epsilon)
                out[i].positives.push_back(r.neighbor);
            else
                out[i].negatives.push_back(r.neighbor);
        }
    }
    return out;
}

std::string ads_csv(std::span<const std::vector<DiscrepancyRecord>> records,
                    std::span<const NeighborPartition> partitions) {
    std::ostringstream os;
    os << "anchor,neighbor,sharp,div,conf,ads,partition\n";
    os.precision(17);
    for (std::size_t i = 0; i < records.size(); ++i) {
        for (const auto& r : records[i]) {
            const auto& pos = partitions[i].positives;
            const bool positive = std::find(pos.begin(), pos.end(), r.neighbor) != pos.end();
            os << r.anchor << ',' << r.neighbor << ',' << r.sharp << ',' << r.div << ',' << r.conf
               << ',' << r.ads << ',' << (positive ? "positive" : "negative") << '\n';
        }
    }
    return os.str();
}

}  // namespace evimerge
