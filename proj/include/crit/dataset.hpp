#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "crit/env.hpp"

namespace crit {

inline constexpr int kDatasetFormatVersion = 1;

/// Materialized sample: history window X (window_len x state_dim, row-major,
/// oldest first) and its label.
struct Sample {
    std::vector<double> X;
    int y = 0;
    std::string episode_id;
    int step_index = 0;
    bool is_critical_episode = false;
};

struct DatasetManifest {
    int format_version = kDatasetFormatVersion;
    std::string split;  // "train", "val", "test", "survivors", ...
    int window_len = 1;
    int horizon = 1;
    int state_dim = 0;
    nlohmann::json env;  // generating EnvConfig, null for external adapters
    std::uint64_t seed = 0;
    std::size_t n_episodes = 0;
    std::size_t critical_episodes = 0;
    std::size_t n_samples = 0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    std::string config_hash;
    std::string checksum;  // sha256 of the records file
};

void to_json(nlohmann::json& j, const DatasetManifest& m);
void from_json(const nlohmann::json& j, DatasetManifest& m);

/// Immutable trajectory storage shared by a dataset and its subsets.
struct EpisodeStore {
    int state_dim = 0;
    std::vector<std::string> ids;
    std::vector<std::size_t> offset;  // first state row of each episode
    std::vector<std::size_t> length;  // number of states per episode
    std::vector<bool> critical;
    std::vector<double> states;   // row-major, state_dim per row
    std::vector<double> actions;  // one per state row; NaN when unknown

    std::span<const double> state(std::size_t episode, std::size_t step) const {
        const auto d = static_cast<std::size_t>(state_dim);
        return {states.data() + (offset[episode] + step) * d, d};
    }
};

/// Compact sample reference into an EpisodeStore.
struct SampleRef {
    std::uint32_t episode = 0;
    std::uint32_t step = 0;
    std::uint8_t y = 0;
};

/// Label of step `step` in an episode of `length` states: 1 iff the episode is
/// critical and its terminal (event) state falls within the `horizon` states
/// starting at `step`.
int horizon_label(bool critical, std::size_t length, std::size_t step, int horizon);

class LabeledDataset {
public:
    LabeledDataset() = default;
    LabeledDataset(std::shared_ptr<const EpisodeStore> store, std::vector<SampleRef> refs, DatasetManifest manifest);

    const DatasetManifest& manifest() const { return manifest_; }
    const EpisodeStore& store() const { return *store_; }
    std::shared_ptr<const EpisodeStore> store_ptr() const { return store_; }

    std::size_t size() const { return refs_.size(); }
    bool empty() const { return refs_.empty(); }
    int window_len() const { return manifest_.window_len; }
    int state_dim() const { return manifest_.state_dim; }
    std::size_t input_dim() const {
        return static_cast<std::size_t>(manifest_.window_len) * static_cast<std::size_t>(manifest_.state_dim);
    }

    const SampleRef& ref(std::size_t i) const { return refs_[i]; }
    std::span<const SampleRef> refs() const { return refs_; }
    int label(std::size_t i) const { return refs_[i].y; }
    const std::vector<std::uint32_t>& positives() const { return pos_; }
    const std::vector<std::uint32_t>& negatives() const { return neg_; }

    /// Writes X of sample i into `out` (input_dim() values). Steps before the
    /// episode start repeat the first state.
    void fill_window(std::size_t i, std::span<double> out) const;
    /// Row-major batch of windows for the given sample indices.
    void fill_batch(std::span<const std::size_t> indices, std::span<double> out) const;
    void fill_batch(std::span<const std::uint32_t> indices, std::span<double> out) const;
    Sample sample(std::size_t i) const;

    /// Samples `indices` (ascending order preserved) sharing this store.
    LabeledDataset subset(std::span<const std::size_t> indices, std::string split) const;
    /// Samples of the given episodes (by store index).
    LabeledDataset episode_subset(std::span<const std::size_t> episodes, std::string split) const;

    void set_config_hash(std::string hash) { manifest_.config_hash = std::move(hash); }
    void set_split(std::string split) { manifest_.split = std::move(split); }

    /// Hash over the sample identities and labels (episode id, step, y).
    std::string content_hash() const;

private:
    void index_labels();

    std::shared_ptr<const EpisodeStore> store_;
    std::vector<SampleRef> refs_;
    std::vector<std::uint32_t> pos_;
    std::vector<std::uint32_t> neg_;
    DatasetManifest manifest_;
};

struct BuildOptions {
    std::string split = "train";
    std::uint64_t seed = 0;
    nlohmann::json env;  // recorded in the manifest
};

/// One sample per (episode, step), ordered by (episode_id, step).
LabeledDataset build_dataset(std::vector<Episode> episodes, int window_len, int horizon,
                             const BuildOptions& options = {});

/// |N| / |P|; throws ErrorKind::precondition when |P| == 0.
double imbalance_ratio(const LabeledDataset& ds);

/// One (s, a, r, s') step of a critical episode; windows are materialized.
struct IndexedTransition {
    std::size_t sample = 0;  // index in the dataset
    int step = 0;
    std::vector<double> X;
    double action = 0.0;
    int reward = 0;  // 1 only at the terminal event state
    int label = 0;   // horizon label of this sample
    bool terminal = false;
    std::vector<double> X_next;  // empty when terminal
};

struct CriticalEpisode {
    std::string episode_id;
    std::size_t store_episode = 0;
    std::vector<IndexedTransition> transitions;
};

struct CriticalEpisodeIndex {
    std::vector<CriticalEpisode> episodes;
    std::size_t input_dim = 0;

    bool empty() const { return episodes.empty(); }
    std::size_t size() const { return episodes.size(); }
    std::size_t transition_count() const;
};

/// Builds the index of episodes whose terminal state triggered the event.
/// `episodes` must be the trajectories the dataset was built from (any order);
/// mismatches raise ErrorKind::integrity.
CriticalEpisodeIndex critical_episode_index(const LabeledDataset& ds, std::span<const Episode> episodes);
/// Same, using only the trajectories held in the dataset store.
CriticalEpisodeIndex critical_episode_index(const LabeledDataset& ds);

/// Writes `path` (one JSON record per line) and `path + ".manifest.json"`.
/// The manifest carries the sha256 of the records file.
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);
std::string manifest_path(const std::string& dataset_path);
DatasetManifest read_manifest(const std::string& dataset_path);

}  // namespace crit
