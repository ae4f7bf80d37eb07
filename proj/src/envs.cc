#include "rhpo/envs.h"

#include <algorithm>
#include <cmath>

#include "rhpo/errors.h"

namespace rhpo {
namespace {

double dist2(double ax, double ay, double bx, double by) {
  return std::hypot(bx - ax, by - ay);
}

void require_positive(double v, const char* name) {
  if (!(v > 0.0)) {
    throw ContractError(std::string(name) + " must be positive");
  }
}

Tensor clipped_action(const Tensor& action, int dim, const char* env) {
  if (action.rows() != 1 || action.cols() != dim) {
    throw DimError(std::string(env) + " expects a 1x" + std::to_string(dim) +
                   " action, got " + action.shape_str());
  }
  if (!action.all_finite()) {
    throw NumericalError(std::string(env) + " received a non-finite action");
  }
  Tensor a = action;
  for (int c = 0; c < dim; ++c) {
    a.at(0, c) = std::clamp(a.at(0, c), -1.0, 1.0);
  }
  return a;
}

}  // namespace

double stol(double v, double eps, double r) {
  const double av = std::abs(v);
  if (av < eps) {
    return 1.0;
  }
  static const double kWidth = std::atanh(std::sqrt(0.95));
  const double t = std::tanh(kWidth / r * av);
  return 1.0 - t * t;
}

double slin(double v, double eps_min, double eps_max) {
  if (v < eps_min) {
    return 0.0;
  }
  if (v > eps_max) {
    return 1.0;
  }
  return (v - eps_min) / (eps_max - eps_min);
}

double btol(double v, double eps) { return std::abs(v) < eps ? 1.0 : 0.0; }

double above(const Box& a, const Box& b) { return a.y_min > b.y_max ? 1.0 : 0.0; }

double inside(const Box& a, const Box& box) {
  const bool in = box.x_min <= a.x_min && a.x_max <= box.x_max &&
                  box.y_min <= a.y_min && a.y_max <= box.y_max;
  return in ? 1.0 : 0.0;
}

// ---------------------------------------------------------------------------
// PileWorld

PileWorld::PileWorld(PileWorldConfig cfg) : cfg_(cfg) {
  require_positive(cfg_.arena_w, "arena_w");
  require_positive(cfg_.arena_h, "arena_h");
  require_positive(cfg_.cube_edge, "cube_edge");
  require_positive(cfg_.dt, "dt");
  require_positive(cfg_.max_speed, "max_speed");
  require_positive(cfg_.attach_radius, "attach_radius");
  require_positive(cfg_.min_separation, "min_separation");
  if (cfg_.episode_steps < 1) {
    throw ContractError("episode_steps must be at least 1");
  }
  if (cfg_.cube_edge >= std::min(cfg_.arena_w, cfg_.arena_h)) {
    throw ContractError("cube_edge must fit inside the arena");
  }
  if (cfg_.min_separation >= cfg_.arena_w - cfg_.cube_edge) {
    throw ContractError(
        "min_separation leaves no room to place two objects; shrink it or "
        "widen the arena");
  }
  state_.objects.assign(2, {cfg_.cube_edge / 2.0, cfg_.cube_edge / 2.0});
}

std::vector<std::string> PileWorld::task_names() const {
  return {"reach",        "grasp", "lift",           "place_wide",
          "place_narrow", "stack", "stack_and_leave"};
}

Tensor PileWorld::reset(Rng& rng) {
  const double half = cfg_.cube_edge / 2.0;
  state_.agent_x = rng.uniform(half, cfg_.arena_w - half);
  state_.agent_y = rng.uniform(half, cfg_.arena_h - half);
  state_.vel_x = 0.0;
  state_.vel_y = 0.0;
  state_.aperture = 0.0;
  state_.attached = -1;
  double x0 = 0.0;
  double x1 = 0.0;
  do {
    x0 = rng.uniform(half, cfg_.arena_w - half);
    x1 = rng.uniform(half, cfg_.arena_w - half);
  } while (std::abs(x0 - x1) < cfg_.min_separation);
  state_.objects[0] = {x0, half};
  state_.objects[1] = {x1, half};
  return observe();
}

EnvStep PileWorld::step(const Tensor& action) {
  const Tensor a = clipped_action(action, 3, "PileWorld");
  const double half = cfg_.cube_edge / 2.0;

  state_.vel_x = a.at(0, 0) * cfg_.max_speed;
  state_.vel_y = a.at(0, 1) * cfg_.max_speed;
  state_.agent_x = std::clamp(state_.agent_x + state_.vel_x * cfg_.dt, half,
                              cfg_.arena_w - half);
  state_.agent_y = std::clamp(state_.agent_y + state_.vel_y * cfg_.dt, half,
                              cfg_.arena_h - half);
  state_.aperture = (a.at(0, 2) + 1.0) / 2.0;

  if (state_.attached >= 0) {
    state_.objects[state_.attached] = {state_.agent_x, state_.agent_y};
    if (state_.aperture <= 0.5) {
      const int dropped = state_.attached;
      state_.attached = -1;
      settle(dropped);
    }
  } else if (state_.aperture > 0.5) {
    int nearest = -1;
    double best = cfg_.attach_radius;
    for (int k = 0; k < static_cast<int>(state_.objects.size()); ++k) {
      const double d = dist2(state_.agent_x, state_.agent_y,
                             state_.objects[k][0], state_.objects[k][1]);
      if (d < best) {
        best = d;
        nearest = k;
      }
    }
    if (nearest >= 0) {
      state_.attached = nearest;
      state_.objects[nearest] = {state_.agent_x, state_.agent_y};
    }
  }

  EnvStep out;
  out.observation = observe();
  out.rewards = rewards(state_);
  out.terminal = false;
  return out;
}

void PileWorld::settle(int k) {
  const double half = cfg_.cube_edge / 2.0;
  const auto& falling = state_.objects[k];
  double rest = half;
  for (int j = 0; j < static_cast<int>(state_.objects.size()); ++j) {
    if (j == k) {
      continue;
    }
    const auto& support = state_.objects[j];
    const bool overlap = std::abs(support[0] - falling[0]) < cfg_.cube_edge;
    const bool below = support[1] + half <= falling[1] - half + 1e-9;
    if (overlap && below) {
      rest = std::max(rest, support[1] + cfg_.cube_edge);
    }
  }
  state_.objects[k][1] = rest;
}

Tensor PileWorld::rewards(const WorldState& s) const {
  if (s.objects.size() != 2) {
    throw ContractError("PileWorld rewards need exactly two objects");
  }
  const double half = cfg_.cube_edge / 2.0;
  const auto& g = s.objects[0];
  const auto& y = s.objects[1];

  Tensor r = Tensor::zeros(1, kNumPileTasks);
  r.at(0, kReach) = stol(dist2(s.agent_x, s.agent_y, g[0], g[1]), 0.02, 0.15);
  const double grasp = s.attached >= 0 ? 1.0 : 0.0;
  r.at(0, kGrasp) = grasp;
  r.at(0, kLift) = slin(g[1] - half, 0.03, 0.10);
  const double d_place = dist2(g[0], g[1], y[0], y[1] + cfg_.cube_edge);
  r.at(0, kPlaceWide) = stol(d_place, 0.01, 0.20);
  r.at(0, kPlaceNarrow) = stol(d_place, 0.00, 0.01);
  r.at(0, kStack) = btol(g[0] - y[0], 0.03) *
                    btol(g[1] - y[1] - cfg_.cube_edge, 0.01) * (1.0 - grasp);
  r.at(0, kStackLeave) =
      stol(s.agent_y - g[1] - 0.10, 0.03, 0.10) * r.at(0, kStack);
  return r;
}

Tensor PileWorld::observe() const {
  const auto& s = state_;
  Tensor obs = Tensor::zeros(1, state_dim());
  obs.at(0, 0) = s.agent_x;
  obs.at(0, 1) = s.agent_y;
  obs.at(0, 2) = s.vel_x;
  obs.at(0, 3) = s.vel_y;
  obs.at(0, 4) = s.aperture;
  for (int k = 0; k < 2; ++k) {
    obs.at(0, 5 + k) = s.attached == k ? 1.0 : 0.0;
    obs.at(0, 7 + 2 * k) = s.objects[k][0];
    obs.at(0, 8 + 2 * k) = s.objects[k][1];
    obs.at(0, 11 + 2 * k) = s.objects[k][0] - s.agent_x;
    obs.at(0, 12 + 2 * k) = s.objects[k][1] - s.agent_y;
  }
  return obs;
}

void PileWorld::set_state(const WorldState& s) {
  if (s.objects.size() != 2) {
    throw ContractError("PileWorld state needs exactly two objects");
  }
  if (s.attached < -1 || s.attached >= 2) {
    throw ContractError("attached must be -1, 0 or 1");
  }
  const bool finite = std::isfinite(s.agent_x) && std::isfinite(s.agent_y) &&
                      std::isfinite(s.vel_x) && std::isfinite(s.vel_y) &&
                      std::isfinite(s.aperture) &&
                      std::isfinite(s.objects[0][0]) &&
                      std::isfinite(s.objects[0][1]) &&
                      std::isfinite(s.objects[1][0]) &&
                      std::isfinite(s.objects[1][1]);
  if (!finite) {
    throw NumericalError("PileWorld state must be finite");
  }
  state_ = s;
}

Box PileWorld::object_extent(int k) const {
  if (k < 0 || k >= static_cast<int>(state_.objects.size())) {
    throw ContractError("object index out of range");
  }
  const double half = cfg_.cube_edge / 2.0;
  const auto& o = state_.objects[k];
  return Box{o[0] - half, o[0] + half, o[1] - half, o[1] + half};
}

// ---------------------------------------------------------------------------
// SingleReach

SingleReach::SingleReach(SingleReachConfig cfg) : cfg_(cfg) {
  require_positive(cfg_.arena_w, "arena_w");
  require_positive(cfg_.arena_h, "arena_h");
  require_positive(cfg_.dt, "dt");
  require_positive(cfg_.max_speed, "max_speed");
  if (cfg_.episode_steps < 1) {
    throw ContractError("episode_steps must be at least 1");
  }
}

std::vector<std::string> SingleReach::task_names() const { return {"reach"}; }

Tensor SingleReach::reset(Rng& rng) {
  state_.x = rng.uniform(0.0, cfg_.arena_w);
  state_.y = rng.uniform(0.0, cfg_.arena_h);
  state_.vel_x = 0.0;
  state_.vel_y = 0.0;
  state_.goal_x = rng.uniform(0.0, cfg_.arena_w);
  state_.goal_y = rng.uniform(0.0, cfg_.arena_h);
  return observe();
}

EnvStep SingleReach::step(const Tensor& action) {
  const Tensor a = clipped_action(action, 2, "SingleReach");
  state_.vel_x = a.at(0, 0) * cfg_.max_speed;
  state_.vel_y = a.at(0, 1) * cfg_.max_speed;
  state_.x = std::clamp(state_.x + state_.vel_x * cfg_.dt, 0.0, cfg_.arena_w);
  state_.y = std::clamp(state_.y + state_.vel_y * cfg_.dt, 0.0, cfg_.arena_h);

  EnvStep out;
  out.observation = observe();
  out.rewards = Tensor::zeros(1, 1);
  out.rewards.at(0, 0) =
      stol(dist2(state_.x, state_.y, state_.goal_x, state_.goal_y), 0.02, 0.15);
  out.terminal = false;
  return out;
}

Tensor SingleReach::observe() const {
  Tensor obs = Tensor::zeros(1, state_dim());
  obs.at(0, 0) = state_.x;
  obs.at(0, 1) = state_.y;
  obs.at(0, 2) = state_.vel_x;
  obs.at(0, 3) = state_.vel_y;
  obs.at(0, 4) = state_.goal_x;
  obs.at(0, 5) = state_.goal_y;
  obs.at(0, 6) = state_.goal_x - state_.x;
  obs.at(0, 7) = state_.goal_y - state_.y;
  return obs;
}

void SingleReach::set_state(const ReachState& s) {
  const bool finite = std::isfinite(s.x) && std::isfinite(s.y) &&
                      std::isfinite(s.vel_x) && std::isfinite(s.vel_y) &&
                      std::isfinite(s.goal_x) && std::isfinite(s.goal_y);
  if (!finite) {
    throw NumericalError("SingleReach state must be finite");
  }
  state_ = s;
}

// ---------------------------------------------------------------------------
// Scripted oracles

namespace {

// Proportional velocity command that arrives exactly: once the remaining
// offset per axis is under one step's travel, the unclipped command lands
// on the target in a single step.
Tensor p_control(double dx, double dy, double grasp, double max_speed,
                 double dt) {
  Tensor a = Tensor::zeros(1, 3);
  a.at(0, 0) = std::clamp(dx / (max_speed * dt), -1.0, 1.0);
  a.at(0, 1) = std::clamp(dy / (max_speed * dt), -1.0, 1.0);
  a.at(0, 2) = grasp;
  return a;
}

}  // namespace

Tensor scripted_reach_action(const ReachState& s,
                             const SingleReachConfig& cfg) {
  Tensor a = Tensor::zeros(1, 2);
  a.at(0, 0) = std::clamp((s.goal_x - s.x) / (cfg.max_speed * cfg.dt), -1.0, 1.0);
  a.at(0, 1) = std::clamp((s.goal_y - s.y) / (cfg.max_speed * cfg.dt), -1.0, 1.0);
  return a;
}

ScriptedStacker::ScriptedStacker(PileWorldConfig cfg) : cfg_(cfg) {}

void ScriptedStacker::reset() { phase_ = Phase::kApproach; }

Tensor ScriptedStacker::act(const WorldState& s) {
  const double half = cfg_.cube_edge / 2.0;
  const auto& g = s.objects[0];
  const auto& y = s.objects[1];
  // Carry height giving full lift reward (cube bottom above 0.10) with margin.
  const double lift_y = std::min(cfg_.arena_h - half, 0.10 + half + 0.05);
  const double carry_x = y[0];
  const double carry_y = y[1] + cfg_.cube_edge;
  const double arrive = 1e-9;

  if (phase_ == Phase::kApproach &&
      dist2(s.agent_x, s.agent_y, g[0], g[1]) < arrive) {
    phase_ = Phase::kClose;
  }
  if (phase_ == Phase::kClose && s.attached == 0) {
    phase_ = Phase::kLift;
  }
  if (phase_ == Phase::kLift && s.agent_y >= lift_y - arrive) {
    phase_ = Phase::kCarry;
  }
  if (phase_ == Phase::kCarry &&
      dist2(s.agent_x, s.agent_y, carry_x, carry_y) < arrive) {
    phase_ = Phase::kRelease;
  }
  if (phase_ == Phase::kRelease && s.attached == -1) {
    phase_ = Phase::kLeave;
  }

  const double ms = cfg_.max_speed;
  const double dt = cfg_.dt;
  switch (phase_) {
    case Phase::kApproach:
      return p_control(g[0] - s.agent_x, g[1] - s.agent_y, -1.0, ms, dt);
    case Phase::kClose:
      return p_control(0.0, 0.0, 1.0, ms, dt);
    case Phase::kLift:
      return p_control(0.0, lift_y - s.agent_y, 1.0, ms, dt);
    case Phase::kCarry:
      return p_control(carry_x - s.agent_x, carry_y - s.agent_y, 1.0, ms, dt);
    case Phase::kRelease:
      return p_control(0.0, 0.0, -1.0, ms, dt);
    case Phase::kLeave:
    default:
      return p_control(g[0] - s.agent_x, g[1] + 0.10 - s.agent_y, -1.0, ms,
                       dt);
  }
}

// ---------------------------------------------------------------------------
// Serialized specs

std::unique_ptr<Env> make_env(const nlohmann::json& spec) {
  if (!spec.is_object() || !spec.contains("name")) {
    throw ContractError("env spec needs a \"name\" field");
  }
  const std::string name = spec.at("name").get<std::string>();
  if (name == "pile_world") {
    PileWorldConfig c;
    c.arena_w = spec.value("arena_w", c.arena_w);
    c.arena_h = spec.value("arena_h", c.arena_h);
    c.cube_edge = spec.value("cube_edge", c.cube_edge);
    c.dt = spec.value("dt", c.dt);
    c.max_speed = spec.value("max_speed", c.max_speed);
    c.attach_radius = spec.value("attach_radius", c.attach_radius);
    c.min_separation = spec.value("min_separation", c.min_separation);
    c.episode_steps = spec.value("episode_steps", c.episode_steps);
    return std::make_unique<PileWorld>(c);
  }
  if (name == "single_reach") {
    SingleReachConfig c;
    c.arena_w = spec.value("arena_w", c.arena_w);
    c.arena_h = spec.value("arena_h", c.arena_h);
    c.dt = spec.value("dt", c.dt);
    c.max_speed = spec.value("max_speed", c.max_speed);
    c.episode_steps = spec.value("episode_steps", c.episode_steps);
    return std::make_unique<SingleReach>(c);
  }
  throw ContractError("unknown env name: " + name);
}

nlohmann::json env_spec(const PileWorldConfig& cfg) {
  return nlohmann::json{{"name", "pile_world"},
                        {"arena_w", cfg.arena_w},
                        {"arena_h", cfg.arena_h},
                        {"cube_edge", cfg.cube_edge},
                        {"dt", cfg.dt},
                        {"max_speed", cfg.max_speed},
                        {"attach_radius", cfg.attach_radius},
                        {"min_separation", cfg.min_separation},
                        {"episode_steps", cfg.episode_steps}};
}

nlohmann::json env_spec(const SingleReachConfig& cfg) {
  return nlohmann::json{{"name", "single_reach"},
                        {"arena_w", cfg.arena_w},
                        {"arena_h", cfg.arena_h},
                        {"dt", cfg.dt},
                        {"max_speed", cfg.max_speed},
                        {"episode_steps", cfg.episode_steps}};
}

}  // namespace rhpo
