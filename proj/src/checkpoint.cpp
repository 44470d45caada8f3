#include "crit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace crit {

namespace {

constexpr char kMagic[8] = {'C', 'R', 'I', 'T', 'C', 'K', 'P', 'T'};

template <class T>
void put_le(std::string& out, T v) {
    static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
    require(pos + sizeof(T) <= in.size(), ErrorKind::integrity, "checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

std::string payload_of(const nn::ParamStore& params) {
    std::string payload;
    payload.reserve(params.size() * sizeof(double));
    for (const auto& b : params.blocks())
        for (std::size_t i = 0; i < b.size(); ++i) put_le(payload, params.values()[b.offset + i]);
    return payload;
}

}  // namespace

std::string checkpoint_bytes(const ModelBundle& bundle) {
    const std::string payload = payload_of(bundle.params);
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : bundle.params.blocks())
        blocks.push_back({{"name", b.name}, {"rows", b.rows}, {"cols", b.cols}, {"dtype", "f64le"}});
    const nlohmann::json header{{"format_version", kCheckpointFormatVersion},
                                {"stage", bundle.stage},
                                {"architecture", bundle.architecture},
                                {"config_hash", bundle.config_hash},
                                {"metrics", bundle.metrics},
                                {"blocks", blocks},
                                {"checksum", sha256_hex(payload)}};
    const std::string head = header.dump();
    std::string out(kMagic, sizeof(kMagic));
    put_le<std::uint32_t>(out, kCheckpointFormatVersion);
    put_le<std::uint64_t>(out, head.size());
    out += head;
    out += payload;
    return out;
}

void checkpoint_save(const ModelBundle& bundle, const std::string& path) {
    const std::string bytes = checkpoint_bytes(bundle);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::integrity, "cannot write checkpoint " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(static_cast<bool>(out), ErrorKind::integrity, "write failed for checkpoint " + path);
}

ModelBundle checkpoint_load(const std::string& path, const CheckpointLoadOptions& options) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::prerequisite, "missing checkpoint " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    require(bytes.size() >= sizeof(kMagic) && std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) == 0,
            ErrorKind::integrity, path + " is not a checkpoint");
    std::size_t pos = sizeof(kMagic);
    const auto version = get_le<std::uint32_t>(bytes, pos);
    require(version == static_cast<std::uint32_t>(kCheckpointFormatVersion), ErrorKind::integrity,
            "checkpoint format version " + std::to_string(version) + " is not supported");
    const auto head_len = get_le<std::uint64_t>(bytes, pos);
    require(pos + head_len <= bytes.size(), ErrorKind::integrity, "checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(pos, head_len));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::integrity, std::string("corrupt checkpoint header: ") + e.what());
    }
    pos += head_len;
    const std::string payload = bytes.substr(pos);
    require(sha256_hex(payload) == header.at("checksum").get<std::string>(), ErrorKind::integrity,
            "checkpoint checksum mismatch in " + path);

    ModelBundle bundle;
    bundle.stage = header.at("stage").get<std::string>();
    bundle.architecture = header.at("architecture");
    bundle.config_hash = header.at("config_hash").get<std::string>();
    bundle.metrics = header.value("metrics", nlohmann::json::object());
    if (!options.expected_config_hash.empty() && bundle.config_hash != options.expected_config_hash && !options.force)
        fail(ErrorKind::integrity, "checkpoint " + path + " was produced under config " + bundle.config_hash +
                                       ", expected " + options.expected_config_hash);
    std::size_t ppos = 0;
    for (const auto& b : header.at("blocks")) {
        require(b.at("dtype").get<std::string>() == "f64le", ErrorKind::integrity, "unsupported parameter dtype");
        bundle.params.add(b.at("name").get<std::string>(), b.at("rows").get<std::size_t>(),
                          b.at("cols").get<std::size_t>());
    }
    for (double& v : bundle.params.values()) v = get_le<double>(payload, ppos);
    require(ppos == payload.size(), ErrorKind::integrity, "checkpoint payload has trailing bytes");
    return bundle;
}

}  // namespace crit
