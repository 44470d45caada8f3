#include "crit/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string_view>
#include <unordered_map>

namespace crit {

void to_json(nlohmann::json& j, const DatasetManifest& m) {
    j = nlohmann::json{{"format_version", m.format_version},
                       {"split", m.split},
                       {"window_len", m.window_len},
                       {"horizon", m.horizon},
                       {"state_dim", m.state_dim},
                       {"env", m.env},
                       {"seed", m.seed},
                       {"n_episodes", m.n_episodes},
                       {"critical_episodes", m.critical_episodes},
                       {"n_samples", m.n_samples},
                       {"n_pos", m.n_pos},
                       {"n_neg", m.n_neg},
                       {"config_hash", m.config_hash},
                       {"checksum", m.checksum}};
    if (m.n_pos > 0)
        j["imbalance_ratio"] = static_cast<double>(m.n_neg) / static_cast<double>(m.n_pos);
    else
        j["imbalance_ratio"] = nullptr;
}

void from_json(const nlohmann::json& j, DatasetManifest& m) {
    j.at("format_version").get_to(m.format_version);
    j.at("split").get_to(m.split);
    j.at("window_len").get_to(m.window_len);
    j.at("horizon").get_to(m.horizon);
    j.at("state_dim").get_to(m.state_dim);
    m.env = j.value("env", nlohmann::json());
    j.at("seed").get_to(m.seed);
    j.at("n_episodes").get_to(m.n_episodes);
    j.at("critical_episodes").get_to(m.critical_episodes);
    j.at("n_samples").get_to(m.n_samples);
    j.at("n_pos").get_to(m.n_pos);
    j.at("n_neg").get_to(m.n_neg);
    m.config_hash = j.value("config_hash", std::string());
    m.checksum = j.value("checksum", std::string());
}

int horizon_label(bool critical, std::size_t length, std::size_t step, int horizon) {
    if (!critical || length == 0) return 0;
    const std::size_t terminal = length - 1;
    return terminal - step < static_cast<std::size_t>(horizon) ? 1 : 0;
}

LabeledDataset::LabeledDataset(std::shared_ptr<const EpisodeStore> store, std::vector<SampleRef> refs,
                               DatasetManifest manifest)
    : store_(std::move(store)), refs_(std::move(refs)), manifest_(std::move(manifest)) {
    index_labels();
}

void LabeledDataset::index_labels() {
    pos_.clear();
    neg_.clear();
    for (std::size_t i = 0; i < refs_.size(); ++i) (refs_[i].y ? pos_ : neg_).push_back(static_cast<std::uint32_t>(i));
    manifest_.n_samples = refs_.size();
    manifest_.n_pos = pos_.size();
    manifest_.n_neg = neg_.size();
    std::vector<bool> seen(store_ ? store_->ids.size() : 0, false);
    std::size_t episodes = 0, critical = 0;
    for (const auto& r : refs_) {
        if (!seen[r.episode]) {
            seen[r.episode] = true;
            ++episodes;
            if (store_->critical[r.episode]) ++critical;
        }
    }
    manifest_.n_episodes = episodes;
    manifest_.critical_episodes = critical;
}

void LabeledDataset::fill_window(std::size_t i, std::span<double> out) const {
    const auto& r = refs_[i];
    const auto d = static_cast<std::size_t>(manifest_.state_dim);
    const auto w = static_cast<std::size_t>(manifest_.window_len);
    const std::size_t base = store_->offset[r.episode];
    for (std::size_t row = 0; row < w; ++row) {
        // Oldest row first; rows before the episode start repeat state 0.
        const std::ptrdiff_t step = static_cast<std::ptrdiff_t>(r.step) - static_cast<std::ptrdiff_t>(w - 1 - row);
        const std::size_t s = step < 0 ? 0 : static_cast<std::size_t>(step);
        const double* src = store_->states.data() + (base + s) * d;
        std::copy(src, src + d, out.data() + row * d);
    }
}

void LabeledDataset::fill_batch(std::span<const std::size_t> indices, std::span<double> out) const {
    const std::size_t in = input_dim();
    for (std::size_t k = 0; k < indices.size(); ++k) fill_window(indices[k], out.subspan(k * in, in));
}

void LabeledDataset::fill_batch(std::span<const std::uint32_t> indices, std::span<double> out) const {
    const std::size_t in = input_dim();
    for (std::size_t k = 0; k < indices.size(); ++k) fill_window(indices[k], out.subspan(k * in, in));
}

Sample LabeledDataset::sample(std::size_t i) const {
    Sample s;
    s.X.resize(input_dim());
    fill_window(i, s.X);
    const auto& r = refs_[i];
    s.y = r.y;
    s.episode_id = store_->ids[r.episode];
    s.step_index = static_cast<int>(r.step);
    s.is_critical_episode = store_->critical[r.episode];
    return s;
}

LabeledDataset LabeledDataset::subset(std::span<const std::size_t> indices, std::string split) const {
    std::vector<SampleRef> refs;
    refs.reserve(indices.size());
    for (std::size_t i : indices) refs.push_back(refs_.at(i));
    DatasetManifest m = manifest_;
    m.split = std::move(split);
    m.checksum.clear();
    return LabeledDataset(store_, std::move(refs), std::move(m));
}

LabeledDataset LabeledDataset::episode_subset(std::span<const std::size_t> episodes, std::string split) const {
    std::vector<bool> keep(store_->ids.size(), false);
    for (std::size_t e : episodes) keep.at(e) = true;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < refs_.size(); ++i)
        if (keep[refs_[i].episode]) idx.push_back(i);
    return subset(idx, std::move(split));
}

std::string LabeledDataset::content_hash() const {
    std::string buf;
    buf.reserve(refs_.size() * 24);
    for (const auto& r : refs_) {
        buf += store_->ids[r.episode];
        buf += ':';
        buf += std::to_string(r.step);
        buf += r.y ? "+" : "-";
    }
    return sha256_hex(buf);
}

LabeledDataset build_dataset(std::vector<Episode> episodes, int window_len, int horizon, const BuildOptions& options) {
    require(window_len >= 1, ErrorKind::precondition, "window_len must be >= 1");
    require(horizon >= 1, ErrorKind::precondition, "horizon must be >= 1");
    require(!episodes.empty(), ErrorKind::precondition, "cannot build a dataset from an empty episode list");
    const int d = episodes.front().state_dim;
    for (const auto& e : episodes) {
        require(e.state_dim == d && d > 0, ErrorKind::precondition, "episodes disagree on state_dim");
        require(e.length() >= 1, ErrorKind::precondition, "episode " + e.episode_id + " has no states");
    }
    std::stable_sort(episodes.begin(), episodes.end(),
                     [](const Episode& a, const Episode& b) { return a.episode_id < b.episode_id; });
    for (std::size_t i = 1; i < episodes.size(); ++i)
        require(episodes[i].episode_id != episodes[i - 1].episode_id, ErrorKind::precondition,
                "duplicate episode id " + episodes[i].episode_id);

    auto store = std::make_shared<EpisodeStore>();
    store->state_dim = d;
    std::size_t total = 0;
    for (const auto& e : episodes) total += e.length();
    store->states.reserve(total * static_cast<std::size_t>(d));
    store->actions.reserve(total);
    std::vector<SampleRef> refs;
    refs.reserve(total);
    for (std::size_t ei = 0; ei < episodes.size(); ++ei) {
        auto& e = episodes[ei];
        const std::size_t len = e.length();
        store->ids.push_back(std::move(e.episode_id));
        store->offset.push_back(store->states.size() / static_cast<std::size_t>(d));
        store->length.push_back(len);
        store->critical.push_back(e.critical);
        store->states.insert(store->states.end(), e.states.begin(), e.states.end());
        if (e.actions.size() == len)
            store->actions.insert(store->actions.end(), e.actions.begin(), e.actions.end());
        else
            store->actions.insert(store->actions.end(), len, std::numeric_limits<double>::quiet_NaN());
        for (std::size_t k = 0; k < len; ++k)
            refs.push_back({static_cast<std::uint32_t>(ei), static_cast<std::uint32_t>(k),
                            static_cast<std::uint8_t>(horizon_label(e.critical, len, k, horizon))});
        std::vector<double>().swap(e.states);
        std::vector<double>().swap(e.actions);
    }
    DatasetManifest m;
    m.split = options.split;
    m.window_len = window_len;
    m.horizon = horizon;
    m.state_dim = d;
    m.env = options.env;
    m.seed = options.seed;
    return LabeledDataset(std::move(store), std::move(refs), std::move(m));
}

double imbalance_ratio(const LabeledDataset& ds) {
    require(!ds.positives().empty(), ErrorKind::precondition, "imbalance ratio is undefined without positives");
    return static_cast<double>(ds.negatives().size()) / static_cast<double>(ds.positives().size());
}

std::size_t CriticalEpisodeIndex::transition_count() const {
    std::size_t n = 0;
    for (const auto& e : episodes) n += e.transitions.size();
    return n;
}

namespace {

CriticalEpisodeIndex build_index(const LabeledDataset& ds) {
    const auto& store = ds.store();
    CriticalEpisodeIndex index;
    index.input_dim = ds.input_dim();
    // Samples of each episode in step order; dataset ordering guarantees it.
    std::vector<std::vector<std::size_t>> by_episode(store.ids.size());
    for (std::size_t i = 0; i < ds.size(); ++i) by_episode[ds.ref(i).episode].push_back(i);
    for (std::size_t e = 0; e < store.ids.size(); ++e) {
        if (!store.critical[e] || by_episode[e].empty()) continue;
        const auto& samples = by_episode[e];
        require(samples.size() == store.length[e], ErrorKind::integrity,
                "critical episode " + store.ids[e] + " is only partially present in the dataset");
        CriticalEpisode ce;
        ce.episode_id = store.ids[e];
        ce.store_episode = e;
        std::size_t positives_at_end = 0;
        for (std::size_t k = 0; k < samples.size(); ++k) {
            IndexedTransition tr;
            tr.sample = samples[k];
            tr.step = static_cast<int>(ds.ref(samples[k]).step);
            require(tr.step == static_cast<int>(k), ErrorKind::integrity, "episode steps out of order");
            tr.X.resize(ds.input_dim());
            ds.fill_window(samples[k], tr.X);
            tr.action = store.actions[store.offset[e] + k];
            tr.terminal = k + 1 == samples.size();
            tr.reward = tr.terminal ? 1 : 0;
            tr.label = ds.label(samples[k]);
            if (!tr.terminal) {
                tr.X_next.resize(ds.input_dim());
                ds.fill_window(samples[k + 1], tr.X_next);
            } else {
                positives_at_end += tr.label;
            }
            ce.transitions.push_back(std::move(tr));
        }
        require(positives_at_end == 1, ErrorKind::integrity,
                "critical episode " + ce.episode_id + " does not end in a positive sample");
        index.episodes.push_back(std::move(ce));
    }
    return index;
}

}  // namespace

CriticalEpisodeIndex critical_episode_index(const LabeledDataset& ds) { return build_index(ds); }

CriticalEpisodeIndex critical_episode_index(const LabeledDataset& ds, std::span<const Episode> episodes) {
    const auto& store = ds.store();
    std::unordered_map<std::string, const Episode*> by_id;
    for (const auto& e : episodes) by_id.emplace(e.episode_id, &e);
    require(by_id.size() == store.ids.size(), ErrorKind::integrity,
            "episode list does not match the dataset (" + std::to_string(by_id.size()) + " vs " +
                std::to_string(store.ids.size()) + " episodes)");
    const auto d = static_cast<std::size_t>(store.state_dim);
    for (std::size_t e = 0; e < store.ids.size(); ++e) {
        auto it = by_id.find(store.ids[e]);
        require(it != by_id.end(), ErrorKind::integrity, "episode " + store.ids[e] + " missing from episode list");
        const Episode& ep = *it->second;
        require(ep.length() == store.length[e] && ep.critical == store.critical[e] &&
                    static_cast<std::size_t>(ep.state_dim) == d,
                ErrorKind::integrity, "episode " + ep.episode_id + " disagrees with the dataset");
        const double* a = store.states.data() + store.offset[e] * d;
        require(std::equal(ep.states.begin(), ep.states.end(), a), ErrorKind::integrity,
                "episode " + ep.episode_id + " states disagree with the dataset");
    }
    return build_index(ds);
}

std::string manifest_path(const std::string& dataset_path) { return dataset_path + ".manifest.json"; }

namespace {

void append_double(std::string& out, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    out.append(buf, res.ptr);
}

struct Record {
    std::string episode_id;
    std::size_t step = 0;
    std::size_t shape[2] = {0, 0};
    std::vector<double> X;
    int y = 0;
    bool critical = false;
};

// Parses the exact layout save_dataset writes. Returns false on anything
// else so the caller can fall back to the general JSON parser.
bool parse_record_fast(std::string_view line, Record& r) {
    const char* p = line.data();
    const char* end = p + line.size();
    auto lit = [&](std::string_view t) {
        if (static_cast<std::size_t>(end - p) < t.size() || std::string_view(p, t.size()) != t) return false;
        p += t.size();
        return true;
    };
    auto uint = [&](std::size_t& v) {
        auto res = std::from_chars(p, end, v);
        if (res.ec != std::errc()) return false;
        p = res.ptr;
        return true;
    };
    if (!lit("{\"episode_id\":\"")) return false;
    const char* q = std::find(p, end, '"');
    if (q == end || std::find(p, q, '\\') != q) return false;
    r.episode_id.assign(p, q);
    p = q + 1;
    if (!lit(",\"step\":") || !uint(r.step) || !lit(",\"shape\":[") || !uint(r.shape[0]) || !lit(",") ||
        !uint(r.shape[1]) || !lit("],\"X\":["))
        return false;
    r.X.clear();
    while (true) {
        double v = 0.0;
        auto res = std::from_chars(p, end, v);
        if (res.ec != std::errc()) return false;
        r.X.push_back(v);
        p = res.ptr;
        if (lit("]")) break;
        if (!lit(",")) return false;
    }
    if (!lit(",\"y\":")) return false;
    if (lit("1"))
        r.y = 1;
    else if (lit("0"))
        r.y = 0;
    else
        return false;
    if (!lit(",\"critical_episode\":")) return false;
    if (lit("true"))
        r.critical = true;
    else if (lit("false"))
        r.critical = false;
    else
        return false;
    return lit("}") && p == end;
}

Record parse_record_json(const std::string& line) {
    const auto rec = nlohmann::json::parse(line);
    Record r;
    r.episode_id = rec.at("episode_id").get<std::string>();
    r.step = rec.at("step").get<std::size_t>();
    const auto shape = rec.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw nlohmann::json::other_error::create(501, "shape must have two entries", &rec);
    r.shape[0] = shape[0];
    r.shape[1] = shape[1];
    r.X = rec.at("X").get<std::vector<double>>();
    r.y = rec.at("y").get<int>();
    r.critical = rec.at("critical_episode").get<bool>();
    return r;
}

}  // namespace

void save_dataset(const LabeledDataset& ds, const std::string& path) {
    const auto& store = ds.store();
    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::integrity, "cannot write " + path);
        std::vector<double> X(ds.input_dim());
        std::string line;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            const auto& r = ds.ref(i);
            ds.fill_window(i, X);
            line.clear();
            line += "{\"episode_id\":\"";
            line += store.ids[r.episode];
            line += "\",\"step\":";
            line += std::to_string(r.step);
            line += ",\"shape\":[";
            line += std::to_string(ds.window_len());
            line += ',';
            line += std::to_string(ds.state_dim());
            line += "],\"X\":[";
            for (std::size_t k = 0; k < X.size(); ++k) {
                if (k) line += ',';
                append_double(line, X[k]);
            }
            line += "],\"y\":";
            line += r.y ? '1' : '0';
            line += ",\"critical_episode\":";
            line += store.critical[r.episode] ? "true" : "false";
            line += "}\n";
            out.write(line.data(), static_cast<std::streamsize>(line.size()));
        }
        require(static_cast<bool>(out), ErrorKind::integrity, "write failed for " + path);
    }
    DatasetManifest m = ds.manifest();
    m.checksum = sha256_file(path);
    std::ofstream mf(manifest_path(path), std::ios::trunc);
    require(static_cast<bool>(mf), ErrorKind::integrity, "cannot write " + manifest_path(path));
    mf << nlohmann::json(m).dump(2) << '\n';
}

DatasetManifest read_manifest(const std::string& dataset_path) {
    std::ifstream mf(manifest_path(dataset_path));
    require(static_cast<bool>(mf), ErrorKind::prerequisite, "missing dataset manifest " + manifest_path(dataset_path));
    nlohmann::json j;
    try {
        mf >> j;
        return j.get<DatasetManifest>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::integrity, "malformed manifest " + manifest_path(dataset_path) + ": " + e.what());
    }
}

LabeledDataset load_dataset(const std::string& path) {
    DatasetManifest m = read_manifest(path);
    require(m.format_version == kDatasetFormatVersion, ErrorKind::integrity,
            "dataset format version " + std::to_string(m.format_version) + " is not supported");
    require(std::filesystem::exists(path), ErrorKind::prerequisite, "missing dataset file " + path);
    require(sha256_file(path) == m.checksum, ErrorKind::integrity, "checksum mismatch for " + path);

    auto store = std::make_shared<EpisodeStore>();
    store->state_dim = m.state_dim;
    const auto d = static_cast<std::size_t>(m.state_dim);
    const auto w = static_cast<std::size_t>(m.window_len);
    std::unordered_map<std::string, std::uint32_t> episode_of;
    // Per-episode state rows keyed by step, recovered from the windows.
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<bool>> have;
    std::vector<SampleRef> refs;
    refs.reserve(m.n_samples);

    std::ifstream in(path);
    std::string line;
    Record rec;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (!parse_record_fast(line, rec)) {
            try {
                rec = parse_record_json(line);
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorKind::integrity, path + ":" + std::to_string(line_no) + ": " + e.what());
            }
        }
        const auto& id = rec.episode_id;
        const std::size_t step = rec.step;
        require(rec.shape[0] == w && rec.shape[1] == d, ErrorKind::integrity,
                path + ":" + std::to_string(line_no) + ": shape disagrees with manifest");
        require(rec.y == 0 || rec.y == 1, ErrorKind::integrity, path + ":" + std::to_string(line_no) + ": bad label");
        const auto& X = rec.X;
        require(X.size() == w * d, ErrorKind::integrity, path + ":" + std::to_string(line_no) + ": bad X length");
        auto [it, inserted] = episode_of.emplace(id, static_cast<std::uint32_t>(store->ids.size()));
        if (inserted) {
            store->ids.push_back(id);
            store->critical.push_back(rec.critical);
            rows.emplace_back();
            have.emplace_back();
        }
        const std::uint32_t e = it->second;
        auto& er = rows[e];
        auto& eh = have[e];
        if (er.size() < (step + 1) * d) {
            er.resize((step + 1) * d, std::numeric_limits<double>::quiet_NaN());
            eh.resize(step + 1, false);
        }
        for (std::size_t r = 0; r < w; ++r) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(step) - static_cast<std::ptrdiff_t>(w - 1 - r);
            if (s < 0) continue;
            std::copy(X.begin() + static_cast<std::ptrdiff_t>(r * d), X.begin() + static_cast<std::ptrdiff_t>((r + 1) * d),
                      er.begin() + s * static_cast<std::ptrdiff_t>(d));
            eh[static_cast<std::size_t>(s)] = true;
        }
        refs.push_back({e, static_cast<std::uint32_t>(step), static_cast<std::uint8_t>(rec.y)});
    }
    require(refs.size() == m.n_samples, ErrorKind::integrity, "record count disagrees with manifest");
    for (std::size_t e = 0; e < rows.size(); ++e) {
        store->offset.push_back(store->states.size() / std::max<std::size_t>(d, 1));
        store->length.push_back(have[e].size());
        store->states.insert(store->states.end(), rows[e].begin(), rows[e].end());
        store->actions.insert(store->actions.end(), have[e].size(), std::numeric_limits<double>::quiet_NaN());
    }
    LabeledDataset ds(std::move(store), std::move(refs), m);
    require(ds.manifest().n_pos == m.n_pos && ds.manifest().n_neg == m.n_neg, ErrorKind::integrity,
            "label counts disagree with manifest");
    return ds;
}

}  // namespace crit
