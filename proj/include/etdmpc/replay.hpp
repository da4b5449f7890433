#pragma once

#include "etdmpc/planner.hpp"

#include <filesystem>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace etdmpc {

struct Transition {
  VectorXd obs;
  VectorXd action;
  double reward = 0.0;
  bool done = false;
  VectorXd target_mu;     // first-step plan mean recorded when acting
  VectorXd target_sigma;  // first-step plan std recorded when acting
  long episode_id = 0;
  int step_index = 0;
  int target_version = 0;  // bumped each time reanalyze refreshes the target
  VectorXd env_state;      // raw simulator state when available, else empty
};

enum class BufferMode { per_step, per_episode };

inline const char* buffer_mode_name(BufferMode m) {
  return m == BufferMode::per_step ? "per_step" : "per_episode";
}

inline BufferMode buffer_mode_from_name(const std::string& s) {
  if (s == "per_step") return BufferMode::per_step;
  if (s == "per_episode") return BufferMode::per_episode;
  throw std::invalid_argument("unknown buffer mode: " + s);
}

/// FIFO ring of transitions. In per_step mode every insert is immediately
/// sampleable; in per_episode mode transitions are staged and become
/// sampleable only once their episode terminates.
class ReplayBuffer {
 public:
  ReplayBuffer(int capacity, BufferMode mode) : capacity_(capacity), mode_(mode) {
    if (capacity < 1) throw std::invalid_argument("ReplayBuffer: capacity must be >= 1");
    ring_.resize(capacity);
  }

  int capacity() const { return capacity_; }
  BufferMode mode() const { return mode_; }
  int size() const { return count_; }
  int staged() const { return static_cast<int>(staging_.size()); }
  long total_inserted() const { return total_inserted_; }
  long evictions() const { return evictions_; }

  void insert(Transition t) {
    if (mode_ == BufferMode::per_episode) {
      const bool done = t.done;
      staging_.push_back(std::move(t));
      if (done) {
        for (auto& s : staging_) push_ring(std::move(s));
        staging_.clear();
      }
    } else {
      push_ring(std::move(t));
    }
  }

  /// Logical index 0 is the oldest sampleable transition.
  const Transition& at(int idx) const { return ring_[phys(idx)]; }
  Transition& at_mut(int idx) { return ring_[phys(idx)]; }

  /// Uniformly samples start indices of contiguous same-episode segments of
  /// length `span`. Rejection-samples first, then falls back to enumerating
  /// valid starts; throws InsufficientDataError when no segment exists.
  std::vector<int> sample_starts(int batch, int span, Rng& rng) const {
    if (batch < 1 || span < 1) throw std::invalid_argument("sample_starts: batch and span >= 1");
    if (count_ < span)
      throw InsufficientDataError("sample_starts: buffer holds " + std::to_string(count_) +
                                  " transitions, need span " + std::to_string(span));
    const int max_start = count_ - span;
    std::vector<int> out;
    out.reserve(batch);
    for (int b = 0; b < batch; ++b) {
      int chosen = -1;
      for (int attempt = 0; attempt < 128; ++attempt) {
        const int s = rng.uniform_int(0, max_start);
        if (segment_valid(s, span)) {
          chosen = s;
          break;
        }
      }
      if (chosen < 0) {
        std::vector<int> valid;
        for (int s = 0; s <= max_start; ++s)
          if (segment_valid(s, span)) valid.push_back(s);
        if (valid.empty())
          throw InsufficientDataError("sample_starts: no contiguous segment of span " +
                                      std::to_string(span));
        chosen = valid[rng.uniform_int(0, static_cast<int>(valid.size()) - 1)];
      }
      out.push_back(chosen);
    }
    return out;
  }

  /// Pointer views into the ring; valid until the next insert.
  std::vector<std::vector<const Transition*>> sample_sequences(int batch, int span,
                                                               Rng& rng) const {
    std::vector<int> starts = sample_starts(batch, span, rng);
    std::vector<std::vector<const Transition*>> out(starts.size());
    for (size_t b = 0; b < starts.size(); ++b) {
      out[b].reserve(span);
      for (int k = 0; k < span; ++k) out[b].push_back(&at(starts[b] + k));
    }
    return out;
  }

  // ---- snapshot (JSONL: header line, then one transition per line) ----

  static constexpr const char* kSnapshotFormat = "etdmpc.replay.v1";

  void save_snapshot(const std::filesystem::path& path,
                     const nlohmann::json& header_extra = nlohmann::json::object()) const {
    nlohmann::json header = header_extra;
    header["format"] = kSnapshotFormat;
    header["capacity"] = capacity_;
    header["mode"] = buffer_mode_name(mode_);
    header["count"] = count_;
    header["staged"] = staged();
    header["total_inserted"] = total_inserted_;
    header["evictions"] = evictions_;
    std::ostringstream os;
    os << header.dump() << "\n";
    for (int i = 0; i < count_; ++i) os << transition_to_json(at(i)).dump() << "\n";
    for (const auto& t : staging_) os << transition_to_json(t).dump() << "\n";
    atomic_write_file(path, os.str());
  }

  static std::pair<ReplayBuffer, nlohmann::json> load_snapshot(
      const std::filesystem::path& path) {
    std::istringstream is(read_file(path));
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("snapshot: empty file " + path.string());
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("format").get<std::string>() != kSnapshotFormat)
      throw std::runtime_error("snapshot: unknown format in " + path.string());
    ReplayBuffer buf(header.at("capacity").get<int>(),
                     buffer_mode_from_name(header.at("mode").get<std::string>()));
    const int count = header.at("count").get<int>();
    const int staged = header.at("staged").get<int>();
    for (int i = 0; i < count; ++i) {
      if (!std::getline(is, line)) throw std::runtime_error("snapshot: truncated ring data");
      buf.push_ring(transition_from_json(nlohmann::json::parse(line)));
    }
    for (int i = 0; i < staged; ++i) {
      if (!std::getline(is, line)) throw std::runtime_error("snapshot: truncated staging data");
      buf.staging_.push_back(transition_from_json(nlohmann::json::parse(line)));
    }
    buf.total_inserted_ = header.value("total_inserted", static_cast<long>(count));
    buf.evictions_ = header.value("evictions", 0L);
    return {std::move(buf), std::move(header)};
  }

  static nlohmann::json transition_to_json(const Transition& t) {
    return nlohmann::json{{"obs", vector_to_json(t.obs)},
                          {"action", vector_to_json(t.action)},
                          {"reward", t.reward},
                          {"done", t.done},
                          {"target_mu", vector_to_json(t.target_mu)},
                          {"target_sigma", vector_to_json(t.target_sigma)},
                          {"episode_id", t.episode_id},
                          {"step_index", t.step_index},
                          {"target_version", t.target_version},
                          {"env_state", vector_to_json(t.env_state)}};
  }

  static Transition transition_from_json(const nlohmann::json& j) {
    Transition t;
    t.obs = vector_from_json(j.at("obs"));
    t.action = vector_from_json(j.at("action"));
    t.reward = j.at("reward").get<double>();
    t.done = j.at("done").get<bool>();
    t.target_mu = vector_from_json(j.at("target_mu"));
    t.target_sigma = vector_from_json(j.at("target_sigma"));
    t.episode_id = j.at("episode_id").get<long>();
    t.step_index = j.at("step_index").get<int>();
    t.target_version = j.at("target_version").get<int>();
    t.env_state = vector_from_json(j.at("env_state"));
    return t;
  }

 private:
  int phys(int idx) const {
    if (idx < 0 || idx >= count_) throw std::out_of_range("ReplayBuffer index");
    const int start = (next_ - count_ + capacity_) % capacity_;
    return (start + idx) % capacity_;
  }

  bool segment_valid(int s, int span) const {
    const Transition& first = at(s);
    for (int k = 1; k < span; ++k) {
      const Transition& tr = at(s + k);
      if (tr.episode_id != first.episode_id || tr.step_index != first.step_index + k) return false;
    }
    return true;
  }

  void push_ring(Transition t) {
    if (count_ == capacity_) ++evictions_;
    ring_[next_] = std::move(t);
    next_ = (next_ + 1) % capacity_;
    if (count_ < capacity_) ++count_;
    ++total_inserted_;
  }

  int capacity_;
  BufferMode mode_;
  std::vector<Transition> ring_;
  std::vector<Transition> staging_;
  int next_ = 0;
  int count_ = 0;
  long total_inserted_ = 0;
  long evictions_ = 0;
};

struct ReanalyzeStats {
  int attempted = 0;
  int refreshed = 0;
  int skipped = 0;
};

/// Re-plans from `batch` uniformly drawn buffer states and refreshes their
/// stored policy targets in place, bumping target_version. Planning failures
/// (non-finite scores) are skipped and counted.
template <class M>
ReanalyzeStats reanalyze_pass(ReplayBuffer& buf, const M& model, const PlannerConfig& cfg,
                              int batch, Rng& rng) {
  ReanalyzeStats stats;
  if (buf.size() == 0) return stats;
  for (int b = 0; b < batch; ++b) {
    ++stats.attempted;
    const int idx = rng.uniform_int(0, buf.size() - 1);
    Transition& tr = buf.at_mut(idx);
    try {
      MatrixXd z = model.encode_batch(tr.obs);
      PlanDistribution p = plan(model, VectorXd(z.col(0)), cfg, nullptr, rng);
      tr.target_mu = p.mu.col(0);
      tr.target_sigma = p.sigma.col(0);
      ++tr.target_version;
      ++stats.refreshed;
    } catch (const NumericsError&) {
      ++stats.skipped;
    }
  }
  return stats;
}

}  // namespace etdmpc
