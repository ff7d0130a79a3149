#include "occlip/checkpoint.hpp"

#include "occlip/errors.hpp"

#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace occlip {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kFloat64 = 1;

template <typename V>
void put(std::ostream& os, V v)
{
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is)
{
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw Error(ErrorCode::Io, "truncated checkpoint archive");
    return v;
}

std::filesystem::path sidecar(const std::filesystem::path& path)
{
    auto p = path;
    p += ".json";
    return p;
}

}  // namespace

void TensorArchive::save(const std::filesystem::path& path) const
{
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw Error(ErrorCode::Io, "cannot write " + tmp.string());
        os.write(kMagic, 4);
        put<std::uint32_t>(os, kVersion);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
        for (const auto& [name, m] : tensors) {
            put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::int64_t>(os, m.rows());
            put<std::int64_t>(os, m.cols());
            put<std::uint8_t>(os, kFloat64);
            os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        }
        if (!os) throw Error(ErrorCode::Io, "failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
    std::ofstream js(sidecar(path));
    if (!js) throw Error(ErrorCode::Io, "cannot write " + sidecar(path).string());
    js << meta.dump(2) << "\n";
}

TensorArchive TensorArchive::load(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error(ErrorCode::Io, "cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorCode::Io, "not a checkpoint archive: " + path.string());
    if (get<std::uint32_t>(is) != kVersion) throw Error(ErrorCode::Io, "unsupported checkpoint version");
    const auto count = get<std::uint32_t>(is);
    TensorArchive a;
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto len = get<std::uint32_t>(is);
        if (len > (1u << 16)) throw Error(ErrorCode::Io, "corrupt tensor name length");
        std::string name(len, '\0');
        is.read(name.data(), len);
        const auto rows = get<std::int64_t>(is);
        const auto cols = get<std::int64_t>(is);
        if (get<std::uint8_t>(is) != kFloat64 || rows < 0 || cols < 0 || rows * cols > (1LL << 32)) {
            throw Error(ErrorCode::Io, "corrupt tensor header: " + name);
        }
        ag::Matrix<double> m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!is) throw Error(ErrorCode::Io, "truncated tensor: " + name);
        a.tensors.emplace(std::move(name), std::move(m));
    }
    std::ifstream js(sidecar(path));
    if (js) {
        a.meta = nlohmann::json::parse(js, nullptr, false);
        if (a.meta.is_discarded()) throw Error(ErrorCode::Io, "corrupt checkpoint sidecar");
    }
    return a;
}

std::string config_hash(const nlohmann::json& config)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

}  // namespace occlip
