#pragma once

#include <cstdint>
#include <deque>
#include <mutex>
#include <string>
#include <vector>

#include "rhpo/rng.h"
#include "rhpo/tensor.h"

namespace rhpo {

// One environment transition as the actor saw it. reward_vector holds the
// reward of every task at this step, not just the executed one, so any task
// head can later train on the transition.
struct TrajectoryStep {
  Tensor state;          // 1 x S
  Tensor action;         // 1 x A
  Tensor reward_vector;  // 1 x |I|
  double behavior_log_prob = 0.0;
  int executed_task = 0;
};

// Contiguous window of at most L steps. bootstrap_state is the observation
// after the last step; terminal marks a true environment termination there
// (value bootstraps to zero), as opposed to a window or time-limit cut.
struct TrajectorySnippet {
  std::vector<TrajectoryStep> steps;
  Tensor bootstrap_state;  // 1 x S
  bool terminal = false;

  int length() const { return static_cast<int>(steps.size()); }
};

struct ReplayConfig {
  int snippet_length = 10;  // L
  std::int64_t capacity_steps = 2'000'000;
  int num_tasks = 1;
  int state_dim = 0;
  int action_dim = 0;
};

// FIFO snippet store. Episodes are sliced into contiguous non-overlapping
// L-step windows at append time; eviction is by whole snippets, oldest
// first, keeping the stored step count within capacity. Appends and reads
// are linearizable (one mutex), so actors may write while the learner
// samples.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(ReplayConfig cfg);
  // Moving hands over the stored snippets with a fresh mutex; the source
  // must not be in concurrent use.
  ReplayBuffer(ReplayBuffer&& other) noexcept
      : cfg_(other.cfg_),
        snippets_(std::move(other.snippets_)),
        steps_stored_(other.steps_stored_) {}

  // Validates every step (reward vector length, dims, finite behavior
  // log-prob) before anything is stored; a bad step rejects the whole
  // episode. `terminal` marks a true environment termination at final_state.
  void append_episode(const std::vector<TrajectoryStep>& steps,
                      const Tensor& final_state, bool terminal);

  // Uniform with replacement. An empty result means there is no data yet;
  // the learner should back off and retry.
  std::vector<TrajectorySnippet> sample(int batch_size, Rng& rng) const;

  TrajectorySnippet snippet(size_t idx) const;
  size_t size() const;
  std::int64_t step_count() const;
  bool empty() const { return size() == 0; }
  const ReplayConfig& config() const { return cfg_; }

 private:
  ReplayConfig cfg_;
  std::deque<TrajectorySnippet> snippets_;
  std::int64_t steps_stored_ = 0;
  mutable std::mutex mu_;
};

// SAC-U task scheduler: a fresh uniform task every xi steps, constant in
// between.
class Scheduler {
 public:
  Scheduler(int num_tasks, int xi);
  int next_task(std::int64_t t, Rng& rng);
  int current() const { return current_; }
  int xi() const { return xi_; }

 private:
  int num_tasks_;
  int xi_;
  int current_ = -1;
};

// Framed binary spill of the whole buffer: schema header (dims, |I|, L),
// then one length-prefixed record per snippet.
void write_replay_spill(const std::string& path, const ReplayBuffer& buf);
ReplayBuffer read_replay_spill(const std::string& path);

}  // namespace rhpo
