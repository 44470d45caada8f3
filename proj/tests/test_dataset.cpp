#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "crit/dataset.hpp"
#include "helpers.hpp"

using namespace crit;
using testing::line_episode;

namespace {

LabeledDataset single(std::size_t len, int horizon, bool critical = true) {
    std::vector<double> pos(len);
    for (std::size_t k = 0; k < len; ++k) pos[k] = 0.1 * static_cast<double>(k);
    std::vector<Episode> eps{line_episode("e0", pos, critical)};
    return build_dataset(std::move(eps), 1, horizon);
}

std::vector<Episode> corpus(std::size_t n, std::uint64_t seed) {
    auto c = EnvConfig::standard();
    c.rarity_scale = 1.6;  // denser events keep the test quick
    return generate_episodes(c, n, seed);
}

}  // namespace

TEST_CASE("horizon labels on a single critical episode") {
    const auto h1 = single(5, 1);
    CHECK(h1.size() == 5);
    REQUIRE(h1.positives().size() == 1);
    CHECK(h1.ref(h1.positives()[0]).step == 4);
    const auto h3 = single(5, 3);
    CHECK(h3.positives().size() == 3);
    CHECK(single(5, 3, false).positives().empty());
    // A horizon longer than the episode labels every step.
    CHECK(single(4, 10).positives().size() == 4);
}

TEST_CASE("build_dataset preconditions") {
    CHECK_THROWS_AS(build_dataset({}, 1, 1), Error);
    std::vector<Episode> one{line_episode("a", {0.0, 1.0}, true)};
    CHECK_THROWS_AS(build_dataset(one, 0, 1), Error);
    CHECK_THROWS_AS(build_dataset(one, 1, 0), Error);
}

TEST_CASE("positive count matches an independent recount") {
    auto eps = corpus(10000, 3);
    const int h = 6;
    std::size_t expected = 0, samples = 0;
    for (const auto& e : eps) {
        samples += e.length();
        if (e.critical) expected += std::min<std::size_t>(e.length(), h);
    }
    const auto ds = build_dataset(eps, 4, h);
    CHECK(ds.size() == samples);
    CHECK(ds.positives().size() == expected);
    CHECK(ds.positives().size() + ds.negatives().size() == ds.size());
}

TEST_CASE("partition and label-window consistency") {
    auto eps = corpus(300, 4);
    std::map<std::string, const Episode*> by_id;
    for (const auto& e : eps) by_id[e.episode_id] = &e;
    const int w = 5, h = 6;
    const auto ds = build_dataset(eps, w, h);
    std::set<std::uint32_t> p(ds.positives().begin(), ds.positives().end());
    std::set<std::uint32_t> n(ds.negatives().begin(), ds.negatives().end());
    CHECK(p.size() + n.size() == ds.size());
    for (auto i : p) CHECK(n.count(i) == 0);

    Rng rng(9);
    for (int k = 0; k < 2000; ++k) {
        const std::size_t i = rng.below(ds.size());
        const Sample s = ds.sample(i);
        const Episode& e = *by_id.at(s.episode_id);
        const auto len = e.length();
        const auto step = static_cast<std::size_t>(s.step_index);
        const int y = e.critical && len - 1 - step < static_cast<std::size_t>(h) ? 1 : 0;
        CHECK(s.y == y);
        CHECK(s.is_critical_episode == e.critical);
        for (int r = 0; r < w; ++r) {
            const long src = std::max(0L, static_cast<long>(step) - (w - 1 - r));
            for (int d = 0; d < 2; ++d) CHECK(s.X[static_cast<std::size_t>(r * 2 + d)] == e.state(static_cast<std::size_t>(src))[static_cast<std::size_t>(d)]);
        }
    }
}

TEST_CASE("ordering is by episode id then step") {
    std::vector<Episode> eps{line_episode("b", {0, 0, 0}, false), line_episode("a", {0, 0}, false)};
    const auto ds = build_dataset(eps, 1, 1);
    CHECK(ds.sample(0).episode_id == "a");
    CHECK(ds.sample(1).step_index == 1);
    CHECK(ds.sample(2).episode_id == "b");
}

TEST_CASE("imbalance ratio") {
    std::vector<Episode> eps{line_episode("p", std::vector<double>(12601, 0.0), true)};
    const auto ds = build_dataset(eps, 1, 1);
    CHECK(imbalance_ratio(ds) == 12600.0);
    std::vector<Episode> bal{line_episode("p", {0.0, 1.0}, true)};
    CHECK(imbalance_ratio(build_dataset(bal, 1, 1)) == 1.0);
    try {
        imbalance_ratio(single(5, 1, false));
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::precondition);
    }
}

TEST_CASE("removing negatives changes the imbalance ratio exactly") {
    const auto ds = testing::toy_dataset(3, 40, 20, 5);
    const double n = static_cast<double>(ds.negatives().size());
    const double p = static_cast<double>(ds.positives().size());
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> keep;
        std::size_t removed = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) {
            if (!ds.label(i) && rng.uniform() < 0.3) {
                ++removed;
                continue;
            }
            keep.push_back(i);
        }
        const auto sub = ds.subset(keep, "sub");
        CHECK(imbalance_ratio(sub) == (n - static_cast<double>(removed)) / p);
    }
}

TEST_CASE("critical episode index") {
    CHECK(critical_episode_index(single(6, 2, false)).empty());

    const auto one = single(7, 3);
    const auto idx = critical_episode_index(one);
    REQUIRE(idx.size() == 1);
    const auto& tr = idx.episodes[0].transitions;
    CHECK(tr.size() == 7);
    int rewards = 0;
    for (std::size_t k = 0; k < tr.size(); ++k) {
        rewards += tr[k].reward;
        CHECK(tr[k].terminal == (k + 1 == tr.size()));
        if (!tr[k].terminal) CHECK(tr[k].X_next == tr[k + 1].X);
    }
    CHECK(rewards == 1);
    CHECK(tr.back().reward == 1);

    auto eps = corpus(3000, 8);
    const auto ds = build_dataset(eps, 3, 6);
    const auto full = critical_episode_index(ds, eps);
    std::size_t terminal_pos = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto& r = ds.ref(i);
        if (r.y && r.step + 1 == ds.store().length[r.episode]) ++terminal_pos;
    }
    CHECK(full.size() == terminal_pos);
    CHECK(full.size() == ds.manifest().critical_episodes);
    // Actions come from the episodes.
    const auto& first = full.episodes.front();
    const auto& src = *std::find_if(eps.begin(), eps.end(), [&](const Episode& e) { return e.episode_id == first.episode_id; });
    CHECK(first.transitions[0].action == src.actions[0]);

    eps.pop_back();
    CHECK_THROWS_AS(critical_episode_index(ds, eps), Error);
}

TEST_CASE("save and load round trip") {
    testing::TempDir dir("dataset");
    auto eps = corpus(150, 12);
    auto ds = build_dataset(eps, 4, 6, {"train", 12, EnvConfig::standard()});
    ds.set_config_hash("abc");
    const auto path = dir / "train.jsonl";
    save_dataset(ds, path);
    const auto back = load_dataset(path);
    REQUIRE(back.size() == ds.size());
    CHECK(back.manifest().config_hash == "abc");
    CHECK(back.manifest().seed == 12);
    CHECK(back.manifest().n_pos == ds.manifest().n_pos);
    CHECK(back.content_hash() == ds.content_hash());
    for (std::size_t i = 0; i < ds.size(); i += 7) {
        const auto a = ds.sample(i), b = back.sample(i);
        CHECK(a.X == b.X);
        CHECK(a.y == b.y);
        CHECK(a.episode_id == b.episode_id);
        CHECK(a.is_critical_episode == b.is_critical_episode);
    }
    // Byte-identical on a second save.
    const auto path2 = dir / "again.jsonl";
    save_dataset(back, path2);
    CHECK(sha256_file(path) == sha256_file(path2));

    // Regenerating from the manifest seed reproduces the dataset.
    const auto regen = build_dataset(corpus(150, back.manifest().seed), 4, 6);
    CHECK(regen.content_hash() == back.content_hash());
}

TEST_CASE("truncated dataset file fails its checksum") {
    testing::TempDir dir("trunc");
    const auto ds = testing::toy_dataset(2, 5, 10, 1);
    const auto path = dir / "d.jsonl";
    save_dataset(ds, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) / 2);
    try {
        load_dataset(path);
        FAIL("expected integrity error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::integrity);
    }
    std::filesystem::remove(manifest_path(path));
    try {
        load_dataset(path);
        FAIL("expected prerequisite error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::prerequisite);
    }
}

TEST_CASE("records in any key order load the same") {
    testing::TempDir dir("reorder");
    const auto ds = testing::toy_dataset(3, 6, 7, 12, 3, 2);
    const auto path = dir / "d.jsonl";
    save_dataset(ds, path);

    // nlohmann dumps keys sorted, which differs from the writer's layout.
    std::ifstream in(path);
    std::ofstream out(dir / "r.jsonl");
    std::string line;
    while (std::getline(in, line)) out << nlohmann::json::parse(line).dump() << '\n';
    out.close();
    auto m = read_manifest(path);
    m.checksum = sha256_file(dir / "r.jsonl");
    std::ofstream(manifest_path(dir / "r.jsonl")) << nlohmann::json(m).dump(2) << '\n';

    const auto a = load_dataset(path);
    const auto b = load_dataset(dir / "r.jsonl");
    CHECK(a.content_hash() == b.content_hash());
    CHECK(a.store().states == b.store().states);

    // A malformed record is an integrity error, not a crash.
    std::ofstream(dir / "bad.jsonl") << "{\"episode_id\": 3}\n";
    m.checksum = sha256_file(dir / "bad.jsonl");
    std::ofstream(manifest_path(dir / "bad.jsonl")) << nlohmann::json(m).dump(2) << '\n';
    try {
        load_dataset(dir / "bad.jsonl");
        FAIL("expected an integrity error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::integrity);
    }
}
