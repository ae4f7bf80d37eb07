#include "rhpo/replay.h"

#include <cmath>
#include <cstring>
#include <fstream>

#include "rhpo/errors.h"

namespace rhpo {

ReplayBuffer::ReplayBuffer(ReplayConfig cfg) : cfg_(cfg) {
  if (cfg_.snippet_length < 1) throw ContractError("snippet length must be >= 1");
  if (cfg_.capacity_steps < 1) throw ContractError("replay capacity must be >= 1 step");
  if (cfg_.num_tasks < 1) throw ContractError("replay needs at least one task");
  if (cfg_.state_dim < 1 || cfg_.action_dim < 1)
    throw ContractError("replay needs positive state and action dims");
}

void ReplayBuffer::append_episode(const std::vector<TrajectoryStep>& steps,
                                  const Tensor& final_state, bool terminal) {
  if (steps.empty()) throw ContractError("cannot append an empty episode");
  if (final_state.rows() != 1 || final_state.cols() != cfg_.state_dim)
    throw ContractError("final state has shape " + final_state.shape_str() +
                        ", expected 1x" + std::to_string(cfg_.state_dim));
  for (size_t t = 0; t < steps.size(); ++t) {
    const TrajectoryStep& st = steps[t];
    const std::string at = " at step " + std::to_string(t);
    if (st.reward_vector.size() != cfg_.num_tasks)
      throw ContractError("reward vector covers " +
                          std::to_string(st.reward_vector.size()) + " tasks, expected " +
                          std::to_string(cfg_.num_tasks) + at);
    if (st.state.rows() != 1 || st.state.cols() != cfg_.state_dim)
      throw ContractError("state has shape " + st.state.shape_str() + at);
    if (st.action.rows() != 1 || st.action.cols() != cfg_.action_dim)
      throw ContractError("action has shape " + st.action.shape_str() + at);
    if (!std::isfinite(st.behavior_log_prob))
      throw ContractError("behavior log-prob is not finite" + at);
    if (st.executed_task < 0 || st.executed_task >= cfg_.num_tasks)
      throw ContractError("executed task out of range" + at);
  }

  const int L = cfg_.snippet_length;
  const int n = static_cast<int>(steps.size());
  std::lock_guard<std::mutex> lock(mu_);
  for (int start = 0; start < n; start += L) {
    const int end = std::min(start + L, n);
    TrajectorySnippet snip;
    snip.steps.assign(steps.begin() + start, steps.begin() + end);
    const bool last = end == n;
    snip.bootstrap_state = last ? final_state : steps[end].state;
    snip.terminal = last && terminal;
    steps_stored_ += snip.length();
    snippets_.push_back(std::move(snip));
  }
  while (steps_stored_ > cfg_.capacity_steps && snippets_.size() > 1) {
    steps_stored_ -= snippets_.front().length();
    snippets_.pop_front();
  }
}

std::vector<TrajectorySnippet> ReplayBuffer::sample(int batch_size, Rng& rng) const {
  if (batch_size < 1) throw ContractError("batch size must be >= 1");
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<TrajectorySnippet> out;
  if (snippets_.empty()) return out;
  out.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i)
    out.push_back(snippets_[rng.uniform_int(static_cast<int>(snippets_.size()))]);
  return out;
}

TrajectorySnippet ReplayBuffer::snippet(size_t idx) const {
  std::lock_guard<std::mutex> lock(mu_);
  if (idx >= snippets_.size()) throw ContractError("snippet index out of range");
  return snippets_[idx];
}

size_t ReplayBuffer::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return snippets_.size();
}

std::int64_t ReplayBuffer::step_count() const {
  std::lock_guard<std::mutex> lock(mu_);
  return steps_stored_;
}

Scheduler::Scheduler(int num_tasks, int xi) : num_tasks_(num_tasks), xi_(xi) {
  if (num_tasks_ < 1) throw ContractError("scheduler needs at least one task");
  if (xi_ < 1) throw ContractError("scheduling period must be >= 1");
}

int Scheduler::next_task(std::int64_t t, Rng& rng) {
  if (t < 0) throw ContractError("negative step index");
  if (t % xi_ == 0 || current_ < 0) current_ = rng.uniform_int(num_tasks_);
  return current_;
}

namespace {

constexpr char kSpillMagic[8] = {'R', 'H', 'P', 'O', 'S', 'P', 'I', 'L'};
constexpr std::uint32_t kSpillVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T take(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ContractError("truncated replay spill");
  return v;
}

void put_row(std::ostream& os, const Tensor& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor take_row(std::istream& is, int cols) {
  Tensor t = Tensor::zeros(1, cols);
  is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(cols * 8));
  if (!is) throw ContractError("truncated replay spill");
  return t;
}

}  // namespace

void write_replay_spill(const std::string& path, const ReplayBuffer& buf) {
  const ReplayConfig& cfg = buf.config();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("cannot open replay spill for writing: " + path);
  os.write(kSpillMagic, sizeof(kSpillMagic));
  put<std::uint32_t>(os, kSpillVersion);
  put<std::int32_t>(os, cfg.state_dim);
  put<std::int32_t>(os, cfg.action_dim);
  put<std::int32_t>(os, cfg.num_tasks);
  put<std::int32_t>(os, cfg.snippet_length);
  put<std::int64_t>(os, cfg.capacity_steps);
  const std::uint64_t n = buf.size();
  put<std::uint64_t>(os, n);
  for (std::uint64_t i = 0; i < n; ++i) {
    const TrajectorySnippet snip = buf.snippet(i);
    const std::uint64_t step_bytes =
        static_cast<std::uint64_t>(snip.length()) *
        ((cfg.state_dim + cfg.action_dim + cfg.num_tasks) * 8 + 8 + 4);
    const std::uint64_t frame = 4 + 1 + static_cast<std::uint64_t>(cfg.state_dim) * 8 + step_bytes;
    put<std::uint64_t>(os, frame);
    put<std::int32_t>(os, snip.length());
    put<std::uint8_t>(os, snip.terminal ? 1 : 0);
    put_row(os, snip.bootstrap_state);
    for (const TrajectoryStep& st : snip.steps) {
      put_row(os, st.state);
      put_row(os, st.action);
      put_row(os, st.reward_vector);
      put<double>(os, st.behavior_log_prob);
      put<std::int32_t>(os, st.executed_task);
    }
  }
  if (!os) throw ContractError("failed writing replay spill: " + path);
}

ReplayBuffer read_replay_spill(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open replay spill: " + path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kSpillMagic, sizeof(magic)) != 0)
    throw ContractError("not a replay spill file: " + path);
  if (take<std::uint32_t>(is) != kSpillVersion)
    throw ContractError("unsupported replay spill version");
  ReplayConfig cfg;
  cfg.state_dim = take<std::int32_t>(is);
  cfg.action_dim = take<std::int32_t>(is);
  cfg.num_tasks = take<std::int32_t>(is);
  cfg.snippet_length = take<std::int32_t>(is);
  cfg.capacity_steps = take<std::int64_t>(is);
  ReplayBuffer buf(cfg);
  const std::uint64_t n = take<std::uint64_t>(is);
  for (std::uint64_t i = 0; i < n; ++i) {
    take<std::uint64_t>(is);  // frame length, useful for skipping
    const int T = take<std::int32_t>(is);
    if (T < 1 || T > cfg.snippet_length) throw ContractError("corrupt snippet frame");
    const bool terminal = take<std::uint8_t>(is) != 0;
    const Tensor boot = take_row(is, cfg.state_dim);
    std::vector<TrajectoryStep> steps(T);
    for (int t = 0; t < T; ++t) {
      steps[t].state = take_row(is, cfg.state_dim);
      steps[t].action = take_row(is, cfg.action_dim);
      steps[t].reward_vector = take_row(is, cfg.num_tasks);
      steps[t].behavior_log_prob = take<double>(is);
      steps[t].executed_task = take<std::int32_t>(is);
    }
    buf.append_episode(steps, boot, terminal);
  }
  return buf;
}

}  // namespace rhpo
