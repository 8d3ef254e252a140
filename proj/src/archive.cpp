#include "evimerge/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "evimerge/errors.hpp"

namespace evimerge {

namespace {

constexpr char kMagic[4] = {'E', 'V', 'M', 'G'};
constexpr std::uint32_t kVersion = 1;

bool entry_order(const ArchiveEntry& a, const ArchiveEntry& b) {
    if (a.layer_index != b.layer_index) return a.layer_index < b.layer_index;
    return a.name < b.name;
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
public:
    Reader(const std::string& buf, const std::string& path) : buf_(buf), path_(path) {}

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    std::string bytes(std::uint64_t n, const char* what) {
        need(n, what);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    void need(std::uint64_t n, const char* what) {
        if (pos_ + n > buf_.size()) {
            std::ostringstream os;
            os << path_ << ": truncated while reading " << what << " (need " << n << " bytes, have "
               << (buf_.size() - pos_) << ")";
            throw FormatError(os.str());
        }
    }

    const std::string& buf_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t ArchiveEntry::numel() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : dims) n *= d;
    return n;
}

void ParameterArchive::add(ArchiveEntry entry) {
    if (entry.numel() != entry.values.size())
        throw FormatError("entry '" + entry.name + "': dims disagree with value count");
    if (find(entry.name)) throw FormatError("duplicate entry name '" + entry.name + "'");
    auto it = std::lower_bound(entries.begin(), entries.end(), entry, entry_order);
    entries.insert(it, std::move(entry));
}

const ArchiveEntry* ParameterArchive::find(const std::string& name) const {
    for (const auto& e : entries)
        if (e.name == name) return &e;
    return nullptr;
}

std::uint32_t ParameterArchive::layer_count() const {
    std::uint32_t mx = 0;
    if (entries.empty()) return 0;
    for (const auto& e : entries) mx = std::max(mx, e.layer_index);
    return mx + 1;
}

void ParameterArchive::validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.numel() != e.values.size())
            throw FormatError("entry '" + e.name + "': dims disagree with value count");
        if (i > 0) {
            if (!entry_order(entries[i - 1], e)) {
                if (entries[i - 1].name == e.name)
                    throw FormatError("duplicate entry name '" + e.name + "'");
                throw FormatError("entries not sorted by (layer_index, name) at '" + e.name + "'");
            }
        }
    }
}

MergeWeights MergeWeights::task_wise(std::vector<double> w) {
    MergeWeights m;
    m.mode = WeightMode::TaskWise;
    m.task_count = w.size();
    m.layer_count = 0;
    m.weights = std::move(w);
    return m;
}

MergeWeights MergeWeights::layer_wise(std::size_t task_count, std::size_t layer_count,
                                      std::vector<double> w) {
    MergeWeights m;
    m.mode = WeightMode::LayerWise;
    m.task_count = task_count;
    m.layer_count = layer_count;
    m.weights = std::move(w);
    m.validate();
    return m;
}

MergeWeights MergeWeights::uniform(std::size_t task_count) {
    return task_wise(std::vector<double>(task_count, 1.0 / static_cast<double>(task_count)));
}

double MergeWeights::at(std::size_t k, std::uint32_t layer) const {
    if (mode == WeightMode::TaskWise) return weights[k];
    return weights[k * layer_count + layer];
}

void MergeWeights::validate() const {
    const std::size_t expect =
        mode == WeightMode::TaskWise ? task_count : task_count * layer_count;
    if (weights.size() != expect)
        throw ContractViolation("MergeWeights: expected " + std::to_string(expect) +
                                " weights, got " + std::to_string(weights.size()));
}

void save_archive(const ParameterArchive& archive, const std::string& path) {
    archive.validate();
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, archive.format_version);
    put_u32(out, static_cast<std::uint32_t>(archive.metadata.size()));
    for (const auto& [k, v] : archive.metadata) {
        put_u32(out, static_cast<std::uint32_t>(k.size()));
        out.append(k);
        put_u32(out, static_cast<std::uint32_t>(v.size()));
        out.append(v);
    }
    put_u32(out, static_cast<std::uint32_t>(archive.entries.size()));
    for (const auto& e : archive.entries) {
        put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out.append(e.name);
        put_u32(out, e.layer_index);
        put_u32(out, static_cast<std::uint32_t>(e.dims.size()));
        for (std::uint64_t d : e.dims) put_u64(out, d);
    }
    for (const auto& e : archive.entries)
        for (double v : e.values) put_f64(out, v);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("short write to '" + path + "'");
}

ParameterArchive load_archive(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FileNotFound("archive '" + path + "' not found");
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string buf = ss.str();

    if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
        throw FormatError(path + ": bad magic bytes (expected EVMG)");
    Reader r(buf, path);
    r.bytes(4, "magic");

    ParameterArchive a;
    a.format_version = r.u32("version");
    if (a.format_version != kVersion)
        throw FormatError(path + ": unsupported format version " +
                          std::to_string(a.format_version));
    const std::uint32_t meta_count = r.u32("metadata count");
    for (std::uint32_t i = 0; i < meta_count; ++i) {
        const std::uint32_t klen = r.u32("metadata key length");
        std::string key = r.bytes(klen, "metadata key");
        const std::uint32_t vlen = r.u32("metadata value length");
        a.metadata[key] = r.bytes(vlen, "metadata value");
    }
    const std::uint32_t entry_count = r.u32("entry count");
    a.entries.reserve(entry_count);
    for (std::uint32_t i = 0; i < entry_count; ++i) {
        ArchiveEntry e;
        const std::uint32_t nlen = r.u32("entry name length");
        e.name = r.bytes(nlen, "entry name");
        e.layer_index = r.u32("layer index");
        const std::uint32_t rank = r.u32("rank");
        e.dims.resize(rank);
        for (std::uint32_t d = 0; d < rank; ++d) e.dims[d] = r.u64("dim");
        a.entries.push_back(std::move(e));
    }
    for (auto& e : a.entries) {
        const std::uint64_t n = e.numel();
        e.values.resize(n);
        for (std::uint64_t i = 0; i < n; ++i)
            e.values[i] = r.f64(("payload of '" + e.name + "'").c_str());
    }
    if (r.remaining() != 0)
        throw FormatError(path + ": " + std::to_string(r.remaining()) +
                          " trailing bytes after payload");
    a.validate();
    return a;
}

std::string inspect_archive(const ParameterArchive& archive) {
    nlohmann::json j;
    j["format_version"] = archive.format_version;
    j["metadata"] = archive.metadata;
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : archive.entries) {
        nlohmann::json je;
        je["name"] = e.name;
        je["layer_index"] = e.layer_index;
        je["dims"] = e.dims;
        je["numel"] = e.numel();
        entries.push_back(je);
    }
    j["entries"] = entries;
    return j.dump(2);
}

void require_same_layout(const ParameterArchive& a, const ParameterArchive& b, const char* what) {
    if (a.entries.size() != b.entries.size())
        throw LayoutError(std::string(what) + ": entry counts differ (" +
                          std::to_string(a.entries.size()) + " vs " +
                          std::to_string(b.entries.size()) + ")");
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        const auto& ea = a.entries[i];
        const auto& eb = b.entries[i];
        if (ea.name != eb.name || ea.layer_index != eb.layer_index || ea.dims != eb.dims)
            throw LayoutError(std::string(what) + ": layouts differ at entry '" + ea.name + "'");
    }
}

TaskVector compute_task_vector(const ParameterArchive& base, const ParameterArchive& finetuned) {
    require_same_layout(base, finetuned, "compute_task_vector");
    TaskVector tau;
    tau.data = base;
    tau.data.metadata.clear();
    tau.data.metadata["role"] = "task_vector";
    for (std::size_t i = 0; i < base.entries.size(); ++i) {
        auto& out = tau.data.entries[i].values;
        const auto& fv = finetuned.entries[i].values;
        const auto& bv = base.entries[i].values;
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = fv[j] - bv[j];
    }
    return tau;
}

ParameterArchive add_task_vector(const ParameterArchive& base, const TaskVector& tau) {
    require_same_layout(base, tau.data, "add_task_vector");
    ParameterArchive out = base;
    for (std::size_t i = 0; i < base.entries.size(); ++i) {
        auto& ov = out.entries[i].values;
        const auto& tv = tau.data.entries[i].values;
        for (std::size_t j = 0; j < ov.size(); ++j) ov[j] += tv[j];
    }
    return out;
}

bool entries_bitwise_equal(const ParameterArchive& a, const ParameterArchive& b) {
    if (a.entries.size() != b.entries.size()) return false;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        const auto& ea = a.entries[i];
        const auto& eb = b.entries[i];
        if (ea.name != eb.name || ea.layer_index != eb.layer_index || ea.dims != eb.dims) return false;
        if (ea.values.size() != eb.values.size()) return false;
        for (std::size_t j = 0; j < ea.values.size(); ++j)
            if (std::bit_cast<std::uint64_t>(ea.values[j]) != std::bit_cast<std::uint64_t>(eb.values[j]))
                return false;
    }
    return true;
}

ParameterArchive snap_to_delta_reachable(const ParameterArchive& base,
                                         const ParameterArchive& finetuned) {
    require_same_layout(base, finetuned, "snap_to_delta_reachable");
    ParameterArchive out = finetuned;
    for (std::size_t e = 0; e < out.entries.size(); ++e) {
        const auto& bv = base.entries[e].values;
        auto& fv = out.entries[e].values;
        for (std::size_t j = 0; j < fv.size(); ++j) {
            // iterate b <- base + (b - base) to a fixed point; one or two
            // rounds suffice in practice
            for (int iter = 0; iter < 8; ++iter) {
                const double delta = fv[j] - bv[j];
                const double reachable = bv[j] + delta;
                if (reachable == fv[j]) break;
                fv[j] = reachable;
            }
        }
    }
    return out;
}

ParameterArchive merge_parameters(const ParameterArchive& base, std::span<const TaskVector> vectors,
                                  const MergeWeights& weights) {
    weights.validate();
    if (weights.task_count != vectors.size())
        throw ContractViolation("merge_parameters: " + std::to_string(weights.task_count) +
                                " weights for " + std::to_string(vectors.size()) + " task vectors");
    for (const auto& v : vectors) require_same_layout(base, v.data, "merge_parameters");
    if (weights.mode == WeightMode::LayerWise) {
        const std::uint32_t lc = base.layer_count();
        if (weights.layer_count != lc)
            throw ContractViolation("merge_parameters: layer-wise weights cover " +
                                    std::to_string(weights.layer_count) + " layers, archive has " +
                                    std::to_string(lc));
    }

    ParameterArchive out = base;
    for (std::size_t e = 0; e < out.entries.size(); ++e) {
        auto& ov = out.entries[e].values;
        const std::uint32_t layer = out.entries[e].layer_index;
        for (std::size_t k = 0; k < vectors.size(); ++k) {
            const double w = weights.at(k, layer);
            if (w == 0.0) continue;  // keeps zero-weight merges bitwise equal to base
            const auto& tv = vectors[k].data.entries[e].values;
            for (std::size_t j = 0; j < ov.size(); ++j) ov[j] += w * tv[j];
        }
    }
    return out;
}

}  // namespace evimerge
