// Checkpoint container:
//   8 bytes   magic "MIADCKPT"
//   uint32    container format version
//   uint64    header length
//   header    JSON {version, config, tensors: [{name, rows, cols, offset}]}
//   payload   column-major little-endian float64 tensors

#include <bit>
#include <cstring>
#include <fstream>

#include "miadapt/detector.hpp"

namespace miadapt {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'A', 'D', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kContainerVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian hosts");

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError("checkpoint truncated");
    return v;
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::filesystem::path& path) {
    nlohmann::json header;
    header["version"] = p.version;
    header["config"] = p.config;
    auto& entries = header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : p.tensors) {
        entries.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
        offset += static_cast<std::uint64_t>(t.size()) * sizeof(double);
    }
    const std::string text = header.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
        out.write(kMagic, sizeof(kMagic));
        write_pod(out, kContainerVersion);
        write_pod(out, static_cast<std::uint64_t>(text.size()));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : p.tensors)
            out.write(reinterpret_cast<const char*>(t.data()),
                      static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError(path.string() + " is not a checkpoint");
    const auto container = read_pod<std::uint32_t>(in);
    if (container != kContainerVersion)
        throw CheckpointError("unsupported checkpoint container version " + std::to_string(container));
    const auto header_len = read_pod<std::uint64_t>(in);
    std::string text(header_len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw CheckpointError("checkpoint header truncated");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header unreadable: ") + e.what());
    }
    ModelParams p;
    p.version = header.value("version", std::string{});
    if (p.version != kModelVersion)
        throw CheckpointError("checkpoint model version '" + p.version + "' does not match '" + kModelVersion + "'");
    p.config = header.at("config").get<DetectorConfig>();

    const auto payload_start = in.tellg();
    for (const auto& e : header.at("tensors")) {
        const auto rows = e.at("rows").get<Eigen::Index>();
        const auto cols = e.at("cols").get<Eigen::Index>();
        Eigen::MatrixXd t(rows, cols);
        in.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw CheckpointError("checkpoint payload truncated");
        p.tensors[e.at("name").get<std::string>()] = std::move(t);
    }
    const auto reference = init_params(p.config, 0);
    if (!same_schema(p, reference)) throw CheckpointError("checkpoint tensors do not match the detector schema");
    return p;
}

}  // namespace miadapt
