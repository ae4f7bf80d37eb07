#include "rhpo/runtime.h"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <thread>

#include "rhpo/checkpoint.h"
#include "rhpo/errors.h"

namespace rhpo {

namespace {

namespace fs = std::filesystem;

bool flat_algorithm(Algorithm a) {
  return a == Algorithm::kSacuMonolithic || a == Algorithm::kSacuIndependent ||
         a == Algorithm::kSacuSvg;
}

bool starts_with(const std::string& s, const std::string& prefix) {
  return s.rfind(prefix, 0) == 0;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

void validate_config(const ExperimentConfig& c) {
  require(c.n_steps >= 0, "n_steps must be >= 0");
  require(c.n_target_update >= 1, "n_target_update must be >= 1");
  require(c.n_action_samples >= 1, "n_action_samples must be >= 1");
  require(c.batch_snippets >= 1, "batch_snippets must be >= 1");
  require(c.lr > 0.0, "lr must be positive");
  require(c.gamma >= 0.0 && c.gamma < 1.0, "gamma must lie in [0, 1)");
  require(c.eps > 0.0 && c.eps_mu > 0.0 && c.eps_sigma > 0.0 && c.eps_alpha > 0.0,
          "KL bounds must be positive");
  require(c.num_components >= 0, "num_components must be >= 0");
  require(!c.policy_torso.empty() && !c.q_torso.empty(), "torso widths must be non-empty");
  require(c.policy_head >= 1 && c.policy_head_monolith >= 1 && c.q_head >= 1,
          "head widths must be >= 1");
  require(c.num_actors >= 1, "num_actors must be >= 1");
  require(c.xi >= 1, "xi must be >= 1");
  require(c.snippet_length >= 1, "snippet_length must be >= 1");
  require(c.replay_capacity >= 0, "replay_capacity must be >= 0");
  require(c.steps_per_round >= 1, "steps_per_round must be >= 1");
  require(c.warmup_episodes >= 0, "warmup_episodes must be >= 0");
  require(c.checkpoint_every >= 0, "checkpoint_every must be >= 0");
  require(c.metrics_every >= 1, "metrics_every must be >= 1");
  require(c.eval_episodes >= 1, "eval_episodes must be >= 1");
  require(c.svg_kl_mult >= 0.0, "svg_kl_mult must be >= 0");
  require(c.gumbel_temperature > 0.0, "gumbel_temperature must be positive");
  std::set<int> seen;
  for (int t : c.active_tasks) {
    require(t >= 0, "active task indices must be >= 0");
    require(seen.insert(t).second, "duplicate active task " + std::to_string(t));
  }
  if (c.transfer != TransferMode::kNone)
    require(!c.init_checkpoint.empty(), "transfer modes need an init_checkpoint");
}

std::vector<int> resolve_active(const std::vector<int>& requested, int env_tasks) {
  std::vector<int> a = requested;
  if (a.empty()) {
    a.resize(env_tasks);
    std::iota(a.begin(), a.end(), 0);
  }
  for (int t : a)
    require(t < env_tasks, "active task " + std::to_string(t) + " outside the env's " +
                               std::to_string(env_tasks) + " tasks");
  return a;
}

double categorical_entropy(const Categorical& c) {
  Tensor p = c.probs();
  double h = 0.0;
  for (int j = 0; j < p.cols(); ++j) {
    const double v = p.at(0, j);
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

void merge_grads(GradMap& into, const GradMap& extra) {
  for (const auto& [name, g] : extra) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, g);
    } else {
      if (!it->second.same_shape(g))
        throw DimError("gradient shape clash on '" + name + "'");
      for (int i = 0; i < g.rows() * g.cols(); ++i)
        it->second.raw()[i] += g.raw()[i];
    }
  }
}

Tensor flatten_states(const std::vector<TrajectorySnippet>& batch, int state_dim) {
  int n = 0;
  for (const auto& sn : batch) n += sn.length();
  Tensor states(n, state_dim, 0.0);
  int r = 0;
  for (const auto& sn : batch)
    for (const auto& st : sn.steps) {
      for (int c = 0; c < state_dim; ++c) states.at(r, c) = st.state.at(0, c);
      ++r;
    }
  return states;
}

// Stable stream ids so serial and async runs draw from the same wells.
constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kLearnerStream = 1;
constexpr std::uint64_t kEvalStream = 7;
std::uint64_t actor_env_stream(int id) { return 100 + 2 * static_cast<std::uint64_t>(id); }
std::uint64_t actor_act_stream(int id) { return 101 + 2 * static_cast<std::uint64_t>(id); }

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kRhpo: return "rhpo";
    case Algorithm::kSacuMonolithic: return "sacu_monolithic";
    case Algorithm::kSacuIndependent: return "sacu_independent";
    case Algorithm::kSacuSvg: return "sacu_svg";
    case Algorithm::kRhpoSvg: return "rhpo_svg";
  }
  throw ContractError("unknown algorithm enum");
}

std::string to_string(TransferMode m) {
  switch (m) {
    case TransferMode::kNone: return "none";
    case TransferMode::kSequentialOnlyHl: return "sequential_only_hl";
    case TransferMode::kSequential: return "sequential";
  }
  throw ContractError("unknown transfer enum");
}

std::string to_string(InitScheme s) {
  switch (s) {
    case InitScheme::kHomogeneous: return "homogeneous";
    case InitScheme::kDistinct: return "distinct_means";
  }
  throw ContractError("unknown init scheme enum");
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "rhpo") return Algorithm::kRhpo;
  if (s == "sacu_monolithic") return Algorithm::kSacuMonolithic;
  if (s == "sacu_independent") return Algorithm::kSacuIndependent;
  if (s == "sacu_svg") return Algorithm::kSacuSvg;
  if (s == "rhpo_svg") return Algorithm::kRhpoSvg;
  throw ContractError("unknown algorithm '" + s + "'");
}

TransferMode transfer_from_string(const std::string& s) {
  if (s == "none") return TransferMode::kNone;
  if (s == "sequential_only_hl") return TransferMode::kSequentialOnlyHl;
  if (s == "sequential") return TransferMode::kSequential;
  throw ContractError("unknown transfer mode '" + s + "'");
}

InitScheme init_scheme_from_string(const std::string& s) {
  if (s == "homogeneous") return InitScheme::kHomogeneous;
  if (s == "distinct_means") return InitScheme::kDistinct;
  throw ContractError("unknown init scheme '" + s + "'");
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return nlohmann::json{
      {"algorithm", to_string(c.algorithm)},
      {"seed", c.seed},
      {"env", c.env},
      {"n_steps", c.n_steps},
      {"n_target_update", c.n_target_update},
      {"n_action_samples", c.n_action_samples},
      {"batch_snippets", c.batch_snippets},
      {"lr", c.lr},
      {"gamma", c.gamma},
      {"eps", c.eps},
      {"eps_mu", c.eps_mu},
      {"eps_sigma", c.eps_sigma},
      {"eps_alpha", c.eps_alpha},
      {"num_components", c.num_components},
      {"policy_torso", c.policy_torso},
      {"policy_head", c.policy_head},
      {"policy_head_monolith", c.policy_head_monolith},
      {"q_torso", c.q_torso},
      {"q_head", c.q_head},
      {"init_scheme", to_string(c.init_scheme)},
      {"num_actors", c.num_actors},
      {"xi", c.xi},
      {"snippet_length", c.snippet_length},
      {"replay_capacity", c.replay_capacity},
      {"steps_per_round", c.steps_per_round},
      {"warmup_episodes", c.warmup_episodes},
      {"active_tasks", c.active_tasks},
      {"transfer", to_string(c.transfer)},
      {"init_checkpoint", c.init_checkpoint},
      {"svg_kl_mult", c.svg_kl_mult},
      {"gumbel_temperature", c.gumbel_temperature},
      {"checkpoint_every", c.checkpoint_every},
      {"metrics_every", c.metrics_every},
      {"eval_episodes", c.eval_episodes},
  };
}

ExperimentConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("experiment config must be a JSON object");
  ExperimentConfig c;
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "algorithm") c.algorithm = algorithm_from_string(val.get<std::string>());
      else if (key == "seed") c.seed = val.get<std::uint64_t>();
      else if (key == "env") c.env = val;
      else if (key == "n_steps") c.n_steps = val.get<std::int64_t>();
      else if (key == "n_target_update") c.n_target_update = val.get<int>();
      else if (key == "n_action_samples") c.n_action_samples = val.get<int>();
      else if (key == "batch_snippets") c.batch_snippets = val.get<int>();
      else if (key == "lr") c.lr = val.get<double>();
      else if (key == "gamma") c.gamma = val.get<double>();
      else if (key == "eps") c.eps = val.get<double>();
      else if (key == "eps_mu") c.eps_mu = val.get<double>();
      else if (key == "eps_sigma") c.eps_sigma = val.get<double>();
      else if (key == "eps_alpha") c.eps_alpha = val.get<double>();
      else if (key == "num_components") c.num_components = val.get<int>();
      else if (key == "policy_torso") c.policy_torso = val.get<std::vector<int>>();
      else if (key == "policy_head") c.policy_head = val.get<int>();
      else if (key == "policy_head_monolith") c.policy_head_monolith = val.get<int>();
      else if (key == "q_torso") c.q_torso = val.get<std::vector<int>>();
      else if (key == "q_head") c.q_head = val.get<int>();
      else if (key == "init_scheme") c.init_scheme = init_scheme_from_string(val.get<std::string>());
      else if (key == "num_actors") c.num_actors = val.get<int>();
      else if (key == "xi") c.xi = val.get<int>();
      else if (key == "snippet_length") c.snippet_length = val.get<int>();
      else if (key == "replay_capacity") c.replay_capacity = val.get<std::int64_t>();
      else if (key == "steps_per_round") c.steps_per_round = val.get<int>();
      else if (key == "warmup_episodes") c.warmup_episodes = val.get<std::int64_t>();
      else if (key == "active_tasks") c.active_tasks = val.get<std::vector<int>>();
      else if (key == "transfer") c.transfer = transfer_from_string(val.get<std::string>());
      else if (key == "init_checkpoint") c.init_checkpoint = val.get<std::string>();
      else if (key == "svg_kl_mult") c.svg_kl_mult = val.get<double>();
      else if (key == "gumbel_temperature") c.gumbel_temperature = val.get<double>();
      else if (key == "checkpoint_every") c.checkpoint_every = val.get<std::int64_t>();
      else if (key == "metrics_every") c.metrics_every = val.get<int>();
      else if (key == "eval_episodes") c.eval_episodes = val.get<int>();
      else throw ContractError("unknown config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("bad value for config key '" + key + "': " + e.what());
    }
  }
  validate_config(c);
  return c;
}

nlohmann::json to_json(const MetricsRecord& r) {
  return nlohmann::json{
      {"kind", r.kind},
      {"wall_time_s", r.wall_time_s},
      {"learner_step", r.learner_step},
      {"actor_episodes", r.actor_episodes},
      {"actor_id", r.actor_id},
      {"first_task", r.first_task},
      {"task_returns", r.task_returns},
      {"critic_loss", r.critic_loss},
      {"dual_value", r.dual_value},
      {"eta", r.eta},
      {"lambda_mu", r.lambda_mu},
      {"lambda_sigma", r.lambda_sigma},
      {"lambda_alpha", r.lambda_alpha},
      {"t_h", r.t_h},
      {"t_l_mean", r.t_l_mean},
      {"t_l_cov", r.t_l_cov},
      {"weight_entropy", r.weight_entropy},
      {"mstep_value", r.mstep_value},
      {"cat_entropy", r.cat_entropy},
  };
}

MetricsRecord metrics_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.kind = j.at("kind").get<std::string>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.learner_step = j.at("learner_step").get<std::int64_t>();
  r.actor_episodes = j.at("actor_episodes").get<std::int64_t>();
  r.actor_id = j.at("actor_id").get<int>();
  r.first_task = j.at("first_task").get<int>();
  r.task_returns = j.at("task_returns").get<std::vector<double>>();
  r.critic_loss = j.at("critic_loss").get<double>();
  r.dual_value = j.at("dual_value").get<double>();
  r.eta = j.at("eta").get<double>();
  r.lambda_mu = j.at("lambda_mu").get<double>();
  r.lambda_sigma = j.at("lambda_sigma").get<double>();
  r.lambda_alpha = j.at("lambda_alpha").get<double>();
  r.t_h = j.at("t_h").get<double>();
  r.t_l_mean = j.at("t_l_mean").get<double>();
  r.t_l_cov = j.at("t_l_cov").get<double>();
  r.weight_entropy = j.at("weight_entropy").get<double>();
  r.mstep_value = j.at("mstep_value").get<double>();
  r.cat_entropy = j.at("cat_entropy").get<double>();
  return r;
}

struct MetricsWriter::Impl {
  std::string path;
  std::ofstream out;
  std::vector<MetricsRecord> records;
  std::int64_t last_step = std::numeric_limits<std::int64_t>::min();
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  mutable std::mutex mu;
};

MetricsWriter::MetricsWriter(std::string path) : impl_(new Impl) {
  impl_->path = std::move(path);
  if (!impl_->path.empty()) {
    impl_->out.open(impl_->path, std::ios::out | std::ios::app);
    if (!impl_->out) throw ContractError("cannot open metrics file '" + impl_->path + "'");
  }
}

MetricsWriter::~MetricsWriter() = default;

void MetricsWriter::append(MetricsRecord rec) {
  std::lock_guard<std::mutex> lock(impl_->mu);
  if (rec.kind == "learner") {
    if (rec.learner_step < impl_->last_step)
      throw ContractError("learner step went backwards in the metrics stream");
    impl_->last_step = rec.learner_step;
  }
  rec.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - impl_->t0)
                        .count();
  if (impl_->out.is_open()) {
    impl_->out << to_json(rec).dump() << '\n';
    impl_->out.flush();
  }
  impl_->records.push_back(std::move(rec));
}

std::vector<MetricsRecord> MetricsWriter::records() const {
  std::lock_guard<std::mutex> lock(impl_->mu);
  return impl_->records;
}

double MetricsWriter::elapsed_s() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - impl_->t0).count();
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ContractError("cannot open metrics file '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(metrics_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

std::unique_ptr<Env> build_env(const ExperimentConfig& cfg) { return make_env(cfg.env); }

namespace {

// Architecture assembly shared by fresh builds and checkpoint restores. A
// policy_meta overrides the config-derived hierarchical shape (the policy
// may have been extended after pretraining).
TrainState assemble(const ExperimentConfig& cfg, const nlohmann::json* policy_meta,
                    int head_tasks) {
  TrainState ts;
  ts.cfg = cfg;
  auto env = build_env(cfg);
  ts.env_tasks = env->num_tasks();
  ts.active = resolve_active(cfg.active_tasks, ts.env_tasks);

  Rng root(cfg.seed);
  Rng init_rng = root.fork(kInitStream);

  PolicyConfig pcfg;
  pcfg.state_dim = env->state_dim();
  pcfg.action_dim = env->action_dim();
  pcfg.num_tasks = head_tasks;
  pcfg.num_components = cfg.num_components > 0 ? cfg.num_components : head_tasks;
  pcfg.torso.widths = cfg.policy_torso;
  pcfg.head_hidden = cfg.policy_head;
  pcfg.init = cfg.init_scheme;

  if (flat_algorithm(cfg.algorithm)) {
    require(cfg.transfer == TransferMode::kNone,
            "transfer modes need the hierarchical policy");
    const FlatKind kind = cfg.algorithm == Algorithm::kSacuIndependent
                              ? FlatKind::kIndependent
                              : FlatKind::kMonolithic;
    if (kind == FlatKind::kMonolithic) pcfg.head_hidden = cfg.policy_head_monolith;
    pcfg.num_components = 1;
    ts.flat.emplace(pcfg, kind);
    ts.flat->init(ts.store, init_rng);
  } else {
    if (policy_meta)
      ts.hier.emplace(HierarchicalPolicy::from_meta(*policy_meta));
    else
      ts.hier.emplace(pcfg);
    ts.hier->init(ts.store, init_rng);
  }

  // The critic keeps a head per env task (hindsight rewards span all of
  // them); only active heads receive gradients.
  CriticConfig ccfg;
  ccfg.state_dim = env->state_dim();
  ccfg.action_dim = env->action_dim();
  ccfg.num_tasks = ts.env_tasks;
  ccfg.torso.widths = cfg.q_torso;
  ccfg.head_hidden = cfg.q_head;
  ts.critic.emplace(ccfg);
  ts.critic->init(ts.store, init_rng);

  DualConfig dc;
  dc.eps = cfg.eps;
  dc.eps_mu = cfg.eps_mu;
  dc.eps_sigma = cfg.eps_sigma;
  dc.eps_alpha = cfg.eps_alpha;
  ts.duals.emplace(dc);
  ts.duals->init(ts.store);

  ReplayConfig rc;
  rc.snippet_length = cfg.snippet_length;
  rc.capacity_steps =
      cfg.replay_capacity > 0 ? cfg.replay_capacity : 1'000'000 * ts.env_tasks;
  rc.num_tasks = ts.env_tasks;
  rc.state_dim = env->state_dim();
  rc.action_dim = env->action_dim();
  ts.replay.emplace(rc);

  ts.head_tasks = head_tasks;
  return ts;
}

void reset_duals(TrainState& ts) {
  const DualConfig& dc = ts.duals->config();
  ts.store.replace(ts.duals->name_eta(), Tensor::scalar(std::log(dc.eta_init)));
  ts.store.replace(ts.duals->name_lambda_mu(), Tensor::scalar(std::log(dc.lambda_init)));
  ts.store.replace(ts.duals->name_lambda_sigma(), Tensor::scalar(std::log(dc.lambda_init)));
  ts.store.replace(ts.duals->name_lambda_alpha(), Tensor::scalar(std::log(dc.lambda_init)));
}

}  // namespace

TrainState build_experiment(const ExperimentConfig& cfg) {
  validate_config(cfg);
  const bool warm = !cfg.init_checkpoint.empty();
  Checkpoint ck;
  if (warm) ck = load_checkpoint(cfg.init_checkpoint);

  auto env = build_env(cfg);
  const std::vector<int> active = resolve_active(cfg.active_tasks, env->num_tasks());
  const int target_heads = 1 + *std::max_element(active.begin(), active.end());

  const nlohmann::json* pmeta = nullptr;
  if (warm && cfg.transfer != TransferMode::kNone) {
    require(ck.meta.contains("policy"),
            "transfer checkpoint lacks hierarchical policy metadata");
    pmeta = &ck.meta.at("policy");
  }

  TrainState ts = assemble(cfg, pmeta, target_heads);

  if (warm) {
    std::map<std::string, Tensor> vals;
    int policy_hits = 0;
    const std::string ppref =
        (ts.hier ? ts.hier->prefix() : ts.flat->prefix()) + "/";
    for (const auto& [name, t] : ck.tensors) {
      if (starts_with(name, "target/")) continue;
      if (!ts.store.has(name)) continue;
      if (!ts.store.get(name).same_shape(t)) continue;
      if (starts_with(name, ppref)) ++policy_hits;
      vals.emplace(name, t);
    }
    require(!vals.empty(), "checkpoint shares no parameters with this architecture");
    if (cfg.transfer != TransferMode::kNone)
      require(policy_hits > 0, "checkpoint policy does not match this architecture");
    ts.store.load_values(vals);
    ts.critic->update_target(ts.store);
    reset_duals(ts);

    Rng root(cfg.seed);
    Rng wiring_rng = root.fork(kInitStream).fork(1);
    switch (cfg.transfer) {
      case TransferMode::kNone:
        break;
      case TransferMode::kSequentialOnlyHl:
        ts.hier->freeze_components(ts.store);
        ts.hier->add_task_head(ts.store, wiring_rng);
        break;
      case TransferMode::kSequential:
        ts.hier->freeze_components(ts.store);
        ts.hier->add_task_head(ts.store, wiring_rng);
        ts.hier->extend_with_new_component(ts.store, wiring_rng);
        break;
    }
    if (cfg.transfer != TransferMode::kNone) {
      ts.head_tasks = ts.hier->config().num_tasks;
      require(ts.head_tasks == target_heads,
              "transfer target task must be the next head after the pretrained ones");
    }
  }

  ts.policy_snapshot = ts.store.snapshot();
  return ts;
}

MixtureGaussian policy_mixture(const TrainState& ts, FastCtx& cx, const Tensor& state,
                               int task) {
  if (ts.hier) return ts.hier->distribution(cx, state, task);
  MixtureGaussian m;
  m.weights.logits = Tensor(1, 1, 0.0);
  m.components.push_back(ts.flat->distribution(cx, state, task));
  return m;
}

PolicyFn make_policy_fn(const TrainState& ts) {
  return [&ts](const Tensor& state, int task) {
    FastCtx cx(ts.store);
    return policy_mixture(ts, cx, state, task);
  };
}

EpisodeResult run_episode(const TrainState& ts, Env& env,
                          const std::map<std::string, Tensor>& params, Scheduler& sched,
                          Rng& env_rng, Rng& act_rng) {
  FastCtx cx(params);
  const auto& pcfg = ts.hier ? ts.hier->config() : ts.flat->config();
  EpisodeResult ep;
  ep.returns.assign(env.num_tasks(), 0.0);
  Tensor s = env.reset(env_rng);
  const int horizon = env.episode_steps();
  ep.steps.reserve(horizon);
  for (int t = 0; t < horizon; ++t) {
    const int task = ts.active[sched.next_task(t, act_rng)];
    if (t == 0) ep.first_task = task;
    MixtureGaussian m = policy_mixture(ts, cx, s, task);
    Tensor a = clip_action(sample(m, act_rng).first, pcfg.action_low, pcfg.action_high);
    TrajectoryStep step;
    step.state = s;
    step.action = a;
    step.behavior_log_prob = mixture_log_prob(m, a);
    step.executed_task = task;
    EnvStep es = env.step(a);
    step.reward_vector = es.rewards;
    for (int k = 0; k < es.rewards.cols(); ++k) ep.returns[k] += es.rewards.at(0, k);
    ep.steps.push_back(std::move(step));
    s = es.observation;
  }
  ep.final_state = s;
  return ep;
}

double eval_return(const TrainState& ts, Env& env, int task, int episodes, Rng& rng) {
  require(task >= 0 && task < ts.head_tasks, "eval task has no policy head");
  FastCtx cx(ts.store);
  double total = 0.0;
  for (int e = 0; e < episodes; ++e) {
    Tensor s = env.reset(rng);
    for (int t = 0; t < env.episode_steps(); ++t) {
      Tensor a = ts.hier ? ts.hier->act(cx, s, task, rng, false)
                         : ts.flat->act(cx, s, task, rng, false);
      EnvStep es = env.step(a);
      total += es.rewards.at(0, task);
      s = es.observation;
    }
  }
  return total / episodes;
}

LearnerDiagnostics learner_iteration(TrainState& ts, Rng& rng) {
  const ExperimentConfig& cfg = ts.cfg;
  LearnerDiagnostics out;

  // Critic loss and gradients on an independently drawn batch.
  auto batch = ts.replay->sample(cfg.batch_snippets, rng);
  if (batch.empty()) throw ContractError("learner iteration before any replay data");
  RetraceConfig rc;
  rc.gamma = cfg.gamma;
  rc.num_action_samples = cfg.n_action_samples;
  PolicyFn pi = make_policy_fn(ts);
  Tape qtape;
  TapeCtx qcx(qtape, ts.store);
  Var qloss = critic_loss(qcx, *ts.critic, ts.store, batch, ts.active, pi, rc, rng);
  GradMap qgrads = qtape.backward(qloss);
  out.critic_loss = qcx.value(qloss).at(0, 0);

  ImproverConfig icfg;
  icfg.batch_snippets = cfg.batch_snippets;
  icfg.num_action_samples = cfg.n_action_samples;
  icfg.lr = cfg.lr;
  icfg.active_tasks = ts.active;

  switch (cfg.algorithm) {
    case Algorithm::kRhpo:
      out.improver = improvement_step(ts.store, *ts.hier, *ts.critic, *ts.replay,
                                      ts.policy_snapshot, *ts.duals, icfg, rng, &qgrads);
      break;
    case Algorithm::kSacuMonolithic:
    case Algorithm::kSacuIndependent:
      out.improver = improvement_step_flat(ts.store, *ts.flat, *ts.critic, *ts.replay,
                                           ts.policy_snapshot, *ts.duals, icfg, rng,
                                           &qgrads);
      break;
    case Algorithm::kSacuSvg:
    case Algorithm::kRhpoSvg: {
      auto pbatch = ts.replay->sample(cfg.batch_snippets, rng);
      const int S = ts.hier ? ts.hier->config().state_dim : ts.flat->config().state_dim;
      const int A = ts.hier ? ts.hier->config().action_dim : ts.flat->config().action_dim;
      Tensor states = flatten_states(pbatch, S);
      std::vector<int> tasks(states.rows());
      for (auto& t : tasks)
        t = ts.active[rng.uniform_int(static_cast<int>(ts.active.size()))];
      Tape tape;
      TapeCtx cx(tape, ts.store);
      Var loss;
      if (ts.flat) {
        Tensor zeta(states.rows(), A, 0.0);
        for (auto& v : zeta.raw()) v = rng.normal();
        loss = svg_loss_flat(cx, *ts.flat, *ts.critic, states, tasks, zeta,
                             ts.policy_snapshot, cfg.svg_kl_mult);
      } else {
        SvgConfig sc;
        sc.num_action_samples = 1;
        sc.kl_mult = cfg.svg_kl_mult;
        sc.gumbel_temperature = cfg.gumbel_temperature;
        std::vector<Tensor> zeta;
        for (int j = 0; j < ts.hier->config().num_components; ++j) {
          Tensor z(states.rows(), A, 0.0);
          for (auto& v : z.raw()) v = rng.normal();
          zeta.push_back(std::move(z));
        }
        Tensor gumbel = sample_gumbel(states.rows(), ts.hier->config().num_components, rng);
        loss = svg_loss_hierarchical(cx, *ts.hier, *ts.critic, states, tasks, zeta, gumbel,
                                     ts.policy_snapshot, sc);
      }
      GradMap all = tape.backward(loss);
      const std::string ppref = (ts.hier ? ts.hier->prefix() : ts.flat->prefix()) + "/";
      GradMap merged;
      for (auto& [name, g] : all)
        if (starts_with(name, ppref)) merged.emplace(name, std::move(g));
      merge_grads(merged, qgrads);
      ts.store.adam_step(merged, cfg.lr);
      out.improver.mstep_value = cx.value(loss).at(0, 0);
      break;
    }
  }

  // Cheap specialization probe: mean mixture-weight entropy over a few batch
  // states, cycling through the active tasks.
  if (ts.hier) {
    FastCtx fc(ts.store);
    const int S = ts.hier->config().state_dim;
    double h = 0.0;
    int count = 0;
    for (const auto& sn : batch) {
      for (const auto& st : sn.steps) {
        if (count >= 8) break;
        Tensor row(1, S, 0.0);
        for (int c = 0; c < S; ++c) row.at(0, c) = st.state.at(0, c);
        const int task = ts.active[count % ts.active.size()];
        h += categorical_entropy(ts.hier->distribution(fc, row, task).weights);
        ++count;
      }
      if (count >= 8) break;
    }
    if (count > 0) out.cat_entropy = h / count;
  }
  return out;
}

void save_train_checkpoint(const std::string& path, const TrainState& ts) {
  std::map<std::string, Tensor> tensors = ts.store.snapshot();
  for (const auto& [name, t] : ts.critic->target_values())
    tensors.emplace("target/" + name, t);
  nlohmann::json meta{
      {"experiment", to_json(ts.cfg)},
      {"head_tasks", ts.head_tasks},
      {"learner_step", ts.learner_step},
      {"actor_episodes", ts.actor_episodes},
      {"target_copies", ts.target_copies},
  };
  if (ts.hier) meta["policy"] = ts.hier->meta();
  save_checkpoint(path, tensors, meta);
}

TrainState load_train_checkpoint(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  ExperimentConfig cfg = config_from_json(ck.meta.at("experiment"));
  cfg.init_checkpoint.clear();
  cfg.transfer = TransferMode::kNone;
  const int head_tasks = ck.meta.at("head_tasks").get<int>();
  const nlohmann::json* pmeta = ck.meta.contains("policy") ? &ck.meta.at("policy") : nullptr;

  TrainState ts = assemble(cfg, pmeta, head_tasks);
  std::map<std::string, Tensor> vals;
  std::map<std::string, Tensor> target;
  for (const auto& [name, t] : ck.tensors) {
    if (starts_with(name, "target/"))
      target.emplace(name.substr(7), t);
    else
      vals.emplace(name, t);
  }
  for (const auto& [name, t] : vals)
    require(ts.store.has(name), "checkpoint parameter '" + name + "' is not in the rebuilt "
                                "architecture");
  ts.store.load_values(vals);
  ts.critic->load_target(std::move(target));
  ts.policy_snapshot = ts.store.snapshot();
  ts.learner_step = ck.meta.at("learner_step").get<std::int64_t>();
  ts.actor_episodes = ck.meta.at("actor_episodes").get<std::int64_t>();
  ts.target_copies = ck.meta.at("target_copies").get<std::int64_t>();
  return ts;
}

namespace {

bool finite_returns(const std::vector<double>& r) {
  for (double v : r)
    if (!std::isfinite(v)) return false;
  return true;
}

bool finite_diag(const LearnerDiagnostics& d) {
  const ImprovementDiagnostics& i = d.improver;
  for (double v : {d.critic_loss, d.cat_entropy, i.dual_value, i.eta, i.lambda_mu,
                   i.lambda_sigma, i.lambda_alpha, i.measured.t_h, i.measured.t_l_mean,
                   i.measured.t_l_cov, i.weight_entropy, i.mstep_value})
    if (!std::isfinite(v)) return false;
  return true;
}

MetricsRecord episode_record(const EpisodeResult& ep, int actor_id, std::int64_t step,
                             std::int64_t episodes) {
  MetricsRecord r;
  r.kind = "episode";
  r.learner_step = step;
  r.actor_episodes = episodes;
  r.actor_id = actor_id;
  r.first_task = ep.first_task;
  r.task_returns = ep.returns;
  return r;
}

MetricsRecord learner_record(const LearnerDiagnostics& d, std::int64_t step,
                             std::int64_t episodes) {
  MetricsRecord r;
  r.kind = "learner";
  r.learner_step = step;
  r.actor_episodes = episodes;
  r.critic_loss = d.critic_loss;
  r.dual_value = d.improver.dual_value;
  r.eta = d.improver.eta;
  r.lambda_mu = d.improver.lambda_mu;
  r.lambda_sigma = d.improver.lambda_sigma;
  r.lambda_alpha = d.improver.lambda_alpha;
  r.t_h = d.improver.measured.t_h;
  r.t_l_mean = d.improver.measured.t_l_mean;
  r.t_l_cov = d.improver.measured.t_l_cov;
  r.weight_entropy = d.improver.weight_entropy;
  r.mstep_value = d.improver.mstep_value;
  r.cat_entropy = d.cat_entropy;
  return r;
}

std::string checkpoint_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt_%08lld.ckpt", static_cast<long long>(step));
  return buf;
}

}  // namespace

RunResult run_training(const ExperimentConfig& cfg, const std::string& out_dir,
                       bool deterministic) {
  validate_config(cfg);
  fs::create_directories(out_dir);
  {
    std::ofstream cf(out_dir + "/config.json");
    cf << to_json(cfg).dump(2) << '\n';
  }

  TrainState ts = build_experiment(cfg);
  MetricsWriter metrics(out_dir + "/metrics.jsonl");
  Rng root(cfg.seed);
  Rng learner_rng = root.fork(kLearnerStream);

  RunResult res;
  res.out_dir = out_dir;

  auto fail = [&](const std::string& why) {
    res.diverged = true;
    res.note = why;
  };

  if (cfg.n_steps > 0 && deterministic) {
    std::vector<std::unique_ptr<Env>> envs;
    std::vector<Scheduler> scheds;
    std::vector<Rng> env_rngs, act_rngs;
    for (int a = 0; a < cfg.num_actors; ++a) {
      envs.push_back(build_env(cfg));
      scheds.emplace_back(static_cast<int>(ts.active.size()), cfg.xi);
      env_rngs.push_back(root.fork(actor_env_stream(a)));
      act_rngs.push_back(root.fork(actor_act_stream(a)));
    }

    auto actor_round = [&]() {
      for (int a = 0; a < cfg.num_actors && !res.diverged; ++a) {
        const auto params = ts.store.snapshot();
        EpisodeResult ep =
            run_episode(ts, *envs[a], params, scheds[a], env_rngs[a], act_rngs[a]);
        ts.replay->append_episode(ep.steps, ep.final_state, false);
        ++ts.actor_episodes;
        metrics.append(episode_record(ep, a, ts.learner_step, ts.actor_episodes));
        if (!finite_returns(ep.returns)) fail("non-finite episode return");
      }
    };

    while (ts.actor_episodes < cfg.warmup_episodes && !res.diverged) actor_round();
    while (ts.learner_step < cfg.n_steps && !res.diverged) {
      actor_round();
      for (int k = 0; k < cfg.steps_per_round && ts.learner_step < cfg.n_steps &&
                      !res.diverged;
           ++k) {
        LearnerDiagnostics diag;
        try {
          diag = learner_iteration(ts, learner_rng);
        } catch (const NumericalError& e) {
          fail(e.what());
          break;
        }
        ++ts.learner_step;
        if (ts.learner_step % cfg.n_target_update == 0) {
          ts.critic->update_target(ts.store);
          ts.policy_snapshot = ts.store.snapshot();
          ++ts.target_copies;
        }
        if (ts.learner_step % cfg.metrics_every == 0)
          metrics.append(learner_record(diag, ts.learner_step, ts.actor_episodes));
        if (!finite_diag(diag)) fail("non-finite learner diagnostics");
        if (cfg.checkpoint_every > 0 && ts.learner_step % cfg.checkpoint_every == 0)
          save_train_checkpoint(out_dir + "/" + checkpoint_name(ts.learner_step), ts);
      }
    }
  } else if (cfg.n_steps > 0) {
    std::atomic<bool> stop{false};
    std::atomic<std::int64_t> episodes{0};
    std::atomic<std::int64_t> step_now{0};
    std::mutex pub_mu;
    auto published = std::make_shared<const std::map<std::string, Tensor>>(
        ts.store.snapshot());
    std::mutex fail_mu;

    auto actor_fn = [&](int id) {
      try {
        auto env = build_env(cfg);
        Scheduler sched(static_cast<int>(ts.active.size()), cfg.xi);
        Rng env_rng = root.fork(actor_env_stream(id));
        Rng act_rng = root.fork(actor_act_stream(id));
        while (!stop.load(std::memory_order_relaxed)) {
          std::shared_ptr<const std::map<std::string, Tensor>> params;
          {
            std::lock_guard<std::mutex> lock(pub_mu);
            params = published;
          }
          EpisodeResult ep = run_episode(ts, *env, *params, sched, env_rng, act_rng);
          ts.replay->append_episode(ep.steps, ep.final_state, false);
          const std::int64_t n = ++episodes;
          metrics.append(episode_record(ep, id, step_now.load(), n));
          if (!finite_returns(ep.returns))
            throw NumericalError("non-finite episode return");
        }
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(fail_mu);
        fail(e.what());
        stop.store(true);
      }
    };

    std::vector<std::thread> threads;
    threads.reserve(cfg.num_actors);
    for (int a = 0; a < cfg.num_actors; ++a) threads.emplace_back(actor_fn, a);

    while (episodes.load() < std::max<std::int64_t>(1, cfg.warmup_episodes) &&
           !stop.load())
      std::this_thread::sleep_for(std::chrono::milliseconds(1));

    while (ts.learner_step < cfg.n_steps && !stop.load()) {
      LearnerDiagnostics diag;
      try {
        diag = learner_iteration(ts, learner_rng);
      } catch (const NumericalError& e) {
        std::lock_guard<std::mutex> lock(fail_mu);
        fail(e.what());
        break;
      }
      ++ts.learner_step;
      step_now.store(ts.learner_step);
      if (ts.learner_step % cfg.n_target_update == 0) {
        ts.critic->update_target(ts.store);
        ts.policy_snapshot = ts.store.snapshot();
        ++ts.target_copies;
      }
      ts.actor_episodes = episodes.load();
      if (ts.learner_step % cfg.metrics_every == 0)
        metrics.append(learner_record(diag, ts.learner_step, ts.actor_episodes));
      if (!finite_diag(diag)) {
        std::lock_guard<std::mutex> lock(fail_mu);
        fail("non-finite learner diagnostics");
        break;
      }
      if (cfg.checkpoint_every > 0 && ts.learner_step % cfg.checkpoint_every == 0)
        save_train_checkpoint(out_dir + "/" + checkpoint_name(ts.learner_step), ts);
      {
        std::lock_guard<std::mutex> lock(pub_mu);
        published = std::make_shared<const std::map<std::string, Tensor>>(
            ts.store.snapshot());
      }
    }
    stop.store(true);
    for (auto& t : threads) t.join();
    ts.actor_episodes = episodes.load();
  }

  save_train_checkpoint(out_dir + "/final.ckpt", ts);

  res.learner_steps = ts.learner_step;
  res.actor_episodes = ts.actor_episodes;
  res.target_copies = ts.target_copies;
  if (!res.diverged) {
    auto eval_env = build_env(cfg);
    Rng eval_rng = root.fork(kEvalStream);
    res.final_eval.resize(ts.head_tasks, 0.0);
    for (int task = 0; task < ts.head_tasks; ++task)
      res.final_eval[task] = eval_return(ts, *eval_env, task, cfg.eval_episodes, eval_rng);
  }

  nlohmann::json summary{
      {"out_dir", res.out_dir},         {"learner_steps", res.learner_steps},
      {"actor_episodes", res.actor_episodes}, {"target_copies", res.target_copies},
      {"diverged", res.diverged},       {"note", res.note},
      {"final_eval", res.final_eval},
  };
  std::ofstream rf(out_dir + "/result.json");
  rf << summary.dump(2) << '\n';
  return res;
}

std::vector<AblationArm> run_ablation(const std::string& kind, const ExperimentConfig& base,
                                      const std::string& out_root, int seeds,
                                      bool deterministic) {
  require(seeds >= 1, "ablations need at least one seed");
  fs::create_directories(out_root);
  std::vector<AblationArm> arms;

  auto run_arm = [&](const std::string& name, ExperimentConfig c, int seed_idx) {
    c.seed = base.seed + static_cast<std::uint64_t>(seed_idx);
    const std::string dir = out_root + "/" + name + "/seed" + std::to_string(seed_idx);
    AblationArm arm;
    arm.name = name + "/seed" + std::to_string(seed_idx);
    arm.cfg = c;
    arm.result = run_training(c, dir, deterministic);
    arms.push_back(std::move(arm));
    return out_root + "/" + name + "/seed" + std::to_string(seed_idx) + "/final.ckpt";
  };

  if (kind == "kl_sweep") {
    for (double ea : {1e-6, 1e-4, 1e-2, 1.0}) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "eps_alpha_%.0e", ea);
      for (int s = 0; s < seeds; ++s) {
        ExperimentConfig c = base;
        c.eps_alpha = ea;
        run_arm(buf, c, s);
      }
    }
  } else if (kind == "actors") {
    for (int n : {1, 5, 20}) {
      for (int s = 0; s < seeds; ++s) {
        ExperimentConfig c = base;
        c.num_actors = n;
        run_arm("actors_" + std::to_string(n), c, s);
      }
    }
  } else if (kind == "components") {
    for (int m : {2, 4, 8, 16}) {
      for (int s = 0; s < seeds; ++s) {
        ExperimentConfig c = base;
        c.num_components = m;
        run_arm("components_" + std::to_string(m), c, s);
      }
    }
  } else if (kind == "init") {
    for (InitScheme scheme : {InitScheme::kHomogeneous, InitScheme::kDistinct}) {
      for (int s = 0; s < seeds; ++s) {
        ExperimentConfig c = base;
        c.init_scheme = scheme;
        run_arm("init_" + to_string(scheme), c, s);
      }
    }
  } else if (kind == "transfer") {
    auto env = build_env(base);
    const int tasks = env->num_tasks();
    require(tasks >= 2, "transfer ablation needs at least two env tasks");
    std::vector<int> pre_tasks(tasks - 1);
    std::iota(pre_tasks.begin(), pre_tasks.end(), 0);
    for (int s = 0; s < seeds; ++s) {
      ExperimentConfig pre = base;
      pre.active_tasks = pre_tasks;
      const std::string ckpt = run_arm("pretrain", pre, s);

      ExperimentConfig scratch = base;
      scratch.active_tasks = {tasks - 1};
      run_arm("scratch", scratch, s);

      ExperimentConfig hl = scratch;
      hl.transfer = TransferMode::kSequentialOnlyHl;
      hl.init_checkpoint = ckpt;
      run_arm("sequential_only_hl", hl, s);

      ExperimentConfig seq = scratch;
      seq.transfer = TransferMode::kSequential;
      seq.init_checkpoint = ckpt;
      run_arm("sequential", seq, s);
    }
  } else {
    throw ContractError("unknown ablation kind '" + kind + "'");
  }

  nlohmann::json summary = nlohmann::json::array();
  for (const auto& arm : arms)
    summary.push_back(nlohmann::json{{"name", arm.name},
                                     {"out_dir", arm.result.out_dir},
                                     {"diverged", arm.result.diverged},
                                     {"actor_episodes", arm.result.actor_episodes},
                                     {"learner_steps", arm.result.learner_steps},
                                     {"final_eval", arm.result.final_eval}});
  std::ofstream sf(out_root + "/summary.json");
  sf << summary.dump(2) << '\n';
  return arms;
}

}  // namespace rhpo
