#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rhpo/critic.h"
#include "rhpo/envs.h"
#include "rhpo/improver.h"
#include "rhpo/policy.h"
#include "rhpo/replay.h"

namespace rhpo {

enum class Algorithm {
  kRhpo,             // hierarchical policy, EM improvement
  kSacuMonolithic,   // one Gaussian head with the task appended to the input
  kSacuIndependent,  // one Gaussian head per task
  kSacuSvg,          // monolithic head, reparameterized value gradient
  kRhpoSvg,          // hierarchical policy, Gumbel-relaxed value gradient
};

enum class TransferMode { kNone, kSequentialOnlyHl, kSequential };

std::string to_string(Algorithm a);
std::string to_string(TransferMode m);
std::string to_string(InitScheme s);
Algorithm algorithm_from_string(const std::string& s);
TransferMode transfer_from_string(const std::string& s);
InitScheme init_scheme_from_string(const std::string& s);

// Everything one run needs, JSON round-trippable without loss so a run
// directory always carries its exact recipe.
struct ExperimentConfig {
  Algorithm algorithm = Algorithm::kRhpo;
  std::uint64_t seed = 1;
  nlohmann::json env = nlohmann::json{{"name", "pile_world"}};

  // Optimization.
  std::int64_t n_steps = 2000;
  int n_target_update = 500;   // improvement steps between target refreshes
  int n_action_samples = 20;   // N_s per state in the E-step and retrace
  int batch_snippets = 256;
  double lr = 2e-4;
  double gamma = 0.99;
  double eps = 0.1;
  double eps_mu = 5e-4;
  double eps_sigma = 1e-5;
  double eps_alpha = 1e-4;

  // Architecture.
  int num_components = 0;  // 0 = one component per policy task
  std::vector<int> policy_torso{400, 200};
  int policy_head = 100;
  int policy_head_monolith = 200;
  std::vector<int> q_torso{400, 400};
  int q_head = 300;
  InitScheme init_scheme = InitScheme::kDistinct;

  // Data plumbing.
  int num_actors = 1;
  int xi = 150;  // execution switches task every xi environment steps
  int snippet_length = 10;
  std::int64_t replay_capacity = 0;  // 0 = 1e6 steps per env task
  // Serial mode interleave: a round is one episode from every actor followed
  // by this many improvement steps.
  int steps_per_round = 8;
  std::int64_t warmup_episodes = 0;  // extra episode-only rounds up front

  // Task selection and transfer.
  std::vector<int> active_tasks;  // empty = all env tasks
  TransferMode transfer = TransferMode::kNone;
  std::string init_checkpoint;

  // SVG variants.
  double svg_kl_mult = 0.05;
  double gumbel_temperature = 1.0;

  // Bookkeeping.
  std::int64_t checkpoint_every = 0;  // improvement steps; 0 = final only
  int metrics_every = 1;
  int eval_episodes = 4;

  bool operator==(const ExperimentConfig&) const = default;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Strict: unknown keys are rejected, listed keys replace defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);

// One line of the metrics stream. Episode records carry hindsight returns
// for every env task; learner records carry the improvement diagnostics.
struct MetricsRecord {
  std::string kind;  // "episode" or "learner"
  double wall_time_s = 0.0;
  std::int64_t learner_step = 0;
  std::int64_t actor_episodes = 0;

  int actor_id = -1;
  int first_task = -1;
  std::vector<double> task_returns;

  double critic_loss = 0.0;
  double dual_value = 0.0;
  double eta = 0.0;
  double lambda_mu = 0.0;
  double lambda_sigma = 0.0;
  double lambda_alpha = 0.0;
  double t_h = 0.0;
  double t_l_mean = 0.0;
  double t_l_cov = 0.0;
  double weight_entropy = 0.0;
  double mstep_value = 0.0;
  double cat_entropy = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

nlohmann::json to_json(const MetricsRecord& r);
MetricsRecord metrics_from_json(const nlohmann::json& j);

// Append-only JSONL sink. Thread safe; learner step indices must never
// decrease. Timestamps are seconds since construction. An empty path keeps
// records in memory only.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::string path);
  ~MetricsWriter();

  void append(MetricsRecord rec);  // fills wall_time_s
  // Snapshot of everything appended so far (copy; safe while actors run).
  std::vector<MetricsRecord> records() const;
  double elapsed_s() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::vector<MetricsRecord> read_metrics(const std::string& path);

// Live pieces of one experiment. Policies are exclusive: exactly one of
// hier/flat is set depending on the algorithm.
struct TrainState {
  ExperimentConfig cfg;
  int env_tasks = 0;
  int head_tasks = 0;        // policy and critic head count
  std::vector<int> active;   // resolved training task list
  ParamStore store;
  std::optional<HierarchicalPolicy> hier;
  std::optional<FlatPolicy> flat;
  std::optional<QEnsemble> critic;
  std::optional<DualState> duals;
  std::optional<ReplayBuffer> replay;
  std::map<std::string, Tensor> policy_snapshot;  // trust-region anchor
  std::int64_t learner_step = 0;
  std::int64_t actor_episodes = 0;
  std::int64_t target_copies = 0;

  bool hierarchical() const { return hier.has_value(); }
};

std::unique_ptr<Env> build_env(const ExperimentConfig& cfg);

// Builds nets, duals and replay from the config, then applies warm-start
// and transfer wiring when init_checkpoint is set: Sequential-Only-HL
// freezes every pretrained policy parameter and adds a fresh categorical
// head for the new task; Sequential additionally appends one trainable
// component. Duals restart from their initial values.
TrainState build_experiment(const ExperimentConfig& cfg);

// The policy as a mixture regardless of parameterization (flat heads become
// a one-component mixture) so acting and retrace share one code path.
MixtureGaussian policy_mixture(const TrainState& ts, FastCtx& cx, const Tensor& state,
                               int task);
PolicyFn make_policy_fn(const TrainState& ts);

struct EpisodeResult {
  std::vector<TrajectoryStep> steps;
  Tensor final_state;
  std::vector<double> returns;  // hindsight sum per env task
  int first_task = -1;
};

// One episode under the given parameter snapshot. The scheduler resamples
// the executed task every xi steps from the active set; actions are
// ancestral samples clipped to the action bounds and the recorded behavior
// log-probability is the mixture density at the clipped action.
EpisodeResult run_episode(const TrainState& ts, Env& env,
                          const std::map<std::string, Tensor>& params, Scheduler& sched,
                          Rng& env_rng, Rng& act_rng);

// Mean return on one task over deterministic-action episodes.
double eval_return(const TrainState& ts, Env& env, int task, int episodes, Rng& rng);

struct LearnerDiagnostics {
  ImprovementDiagnostics improver;
  double critic_loss = 0.0;
  double cat_entropy = 0.0;
};

// One learner iteration: retrace critic loss on its own batch, then the
// algorithm's policy update, all folded into a single Adam step.
LearnerDiagnostics learner_iteration(TrainState& ts, Rng& rng);

// Store values, critic target (under "target/") and run bookkeeping.
void save_train_checkpoint(const std::string& path, const TrainState& ts);
// Rebuilds the exact architecture from the embedded metadata and restores
// values. Trainability flags are not persisted; the result is meant for
// evaluation, analysis or as an init_checkpoint.
TrainState load_train_checkpoint(const std::string& path);

struct RunResult {
  std::string out_dir;
  std::int64_t learner_steps = 0;
  std::int64_t actor_episodes = 0;
  std::int64_t target_copies = 0;
  bool diverged = false;
  std::string note;
  std::vector<double> final_eval;  // per head task, deterministic actions
};

// Full training run. Writes config.json, metrics.jsonl and final.ckpt into
// out_dir (plus periodic checkpoints when configured). Deterministic mode
// interleaves actors and learner on one thread and is bitwise reproducible;
// otherwise each actor runs on its own thread against the latest published
// parameters. A non-finite loss, return or gradient halts the run with the
// diagnostics recorded instead of raising.
RunResult run_training(const ExperimentConfig& cfg, const std::string& out_dir,
                       bool deterministic);

struct AblationArm {
  std::string name;
  ExperimentConfig cfg;
  RunResult result;
};

// Grid runner over one factor: "kl_sweep" (eps_alpha), "actors",
// "components", "init" (homogeneous vs distinct means) or "transfer"
// (pretrain on all tasks but the last, then scratch vs Sequential-Only-HL
// vs Sequential on the last). Seeds share the base seed + arm offset; each
// arm trains into out_root/<arm>/seed<k> and a summary lands in
// out_root/summary.json.
std::vector<AblationArm> run_ablation(const std::string& kind, const ExperimentConfig& base,
                                      const std::string& out_root, int seeds,
                                      bool deterministic);

}  // namespace rhpo
