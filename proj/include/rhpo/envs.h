#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "rhpo/rng.h"
#include "rhpo/tensor.h"

namespace rhpo {

// ---------------------------------------------------------------------------
// Reward-shaping primitives.
//
// stol(v, eps, r) = 1                                   if |v| < eps
//                 = 1 - tanh^2(atanh(sqrt(0.95)) / r * |v|)   otherwise
//
// As written the function jumps at |v| = eps for eps > 0 (left limit 1,
// value at the boundary 1 - tanh^2(w * eps) < 1).  We keep the formula
// verbatim instead of smoothing it.
double stol(double v, double eps, double r);

// slin(v, eps_min, eps_max): 0 below eps_min, 1 above eps_max, linear in
// between.  Operates on the signed value, not |v|.
double slin(double v, double eps_min, double eps_max);

// btol(v, eps) = 1 if |v| < eps else 0 (strict).
double btol(double v, double eps);

// Axis-aligned 2D extent used by the containment/ordering primitives.
struct Box {
  double x_min = 0.0;
  double x_max = 0.0;
  double y_min = 0.0;
  double y_max = 0.0;
};

// above(a, b) = 1 when a lies completely above b's highest point.
double above(const Box& a, const Box& b);

// inside(a, box) = 1 when a is completely within the box's bounds.
double inside(const Box& a, const Box& box);

// ---------------------------------------------------------------------------
// World state for the 2D manipulation arena: a vertical plane with a
// kinematic tool point, a scalar gripper and K cubes.  x is horizontal,
// y is vertical (height above the floor at y = 0); units are meters.
struct WorldState {
  double agent_x = 0.0;
  double agent_y = 0.0;
  double vel_x = 0.0;   // last commanded velocity, m/s
  double vel_y = 0.0;
  double aperture = 0.0;  // gripper closure in [0, 1]; > 0.5 grips
  std::vector<std::array<double, 2>> objects;  // cube centers
  int attached = -1;  // object id tracking the tool point, or -1
};

struct EnvStep {
  Tensor observation;  // 1 x state_dim
  Tensor rewards;      // 1 x num_tasks hindsight vector, each in [0, 1]
  bool terminal = false;
};

// Common environment surface used by actors and tests.  Episodes are fixed
// horizon: step() never reports terminal, the caller cuts after
// episode_steps() (a time limit, not an environment termination, so critics
// keep bootstrapping across the cut).
class Env {
 public:
  virtual ~Env() = default;
  virtual Tensor reset(Rng& rng) = 0;
  virtual EnvStep step(const Tensor& action) = 0;
  virtual int state_dim() const = 0;
  virtual int action_dim() const = 0;
  virtual int num_tasks() const = 0;
  virtual int episode_steps() const = 0;
  virtual std::vector<std::string> task_names() const = 0;
};

// ---------------------------------------------------------------------------
// PileWorld: desk-scale analog of the Pile1 stacking ladder.  Two cubes on a
// floor; the agent is a tool point with a scalar grasp channel.
//
// Action (1 x 3), each component clipped to [-1, 1]:
//   [0] vx command, scaled by max_speed
//   [1] vy command, scaled by max_speed
//   [2] grasp; aperture = (grasp + 1) / 2
//
// Dynamics per step (kinematic, no contact simulation):
//   - the tool point integrates at dt and clamps to the arena interior
//     (one cube half-extent of margin on every wall);
//   - a held object tracks the tool point exactly;
//   - grasping: if nothing is held and aperture > 0.5, the nearest object
//     strictly within attach_radius snaps to the tool point;
//   - releasing (aperture <= 0.5) drops the object straight down onto the
//     highest support under it: another cube counts as support when the
//     horizontal centers are within one edge length and its top is at or
//     below the falling cube's bottom; otherwise the floor.  An object
//     released while interpenetrating another falls through to the floor.
//
// Observation layout (1 x state_dim, meters and m/s):
//   [0..1]  agent x, y
//   [2..3]  commanded velocity x, y
//   [4]     aperture
//   [5..6]  attached one-hot per object
//   [7..10] object centers (x0, y0, x1, y1)
//   [11..14] object center minus agent, per object
//
// Task ladder (reward vector order).  G = objects[0], Y = objects[1],
// d = Euclidean distance, d_x = |x difference|; vertical offsets are signed
// with "target minus subject" orientation so STACK pays exactly when G sits
// one edge length above Y:
//   0 reach           stol(d(TCP, G), 0.02, 0.15)
//   1 grasp           1 if anything is held
//   2 lift            slin(bottom of G above floor, 0.03, 0.10)
//   3 place_wide      stol(d(G, Y + [0, edge]), 0.01, 0.20)
//   4 place_narrow    stol(d(G, Y + [0, edge]), 0.00, 0.01)
//   5 stack           btol(d_x(G, Y), 0.03) * btol(y_G - y_Y - edge, 0.01)
//                       * (1 - grasp reward)
//   6 stack_and_leave stol(y_TCP - y_G - 0.10, 0.03, 0.10) * stack
struct PileWorldConfig {
  double arena_w = 0.5;
  double arena_h = 0.35;
  double cube_edge = 0.05;
  double dt = 0.05;
  double max_speed = 0.6;
  double attach_radius = 0.02;
  double min_separation = 0.1;  // between object centers at reset
  int episode_steps = 600;
};

enum PileTask {
  kReach = 0,
  kGrasp,
  kLift,
  kPlaceWide,
  kPlaceNarrow,
  kStack,
  kStackLeave,
  kNumPileTasks
};

class PileWorld : public Env {
 public:
  explicit PileWorld(PileWorldConfig cfg = {});

  Tensor reset(Rng& rng) override;
  EnvStep step(const Tensor& action) override;

  int state_dim() const override { return 15; }
  int action_dim() const override { return 3; }
  int num_tasks() const override { return kNumPileTasks; }
  int episode_steps() const override { return cfg_.episode_steps; }
  std::vector<std::string> task_names() const override;

  // Pure reward evaluation; step() defers to this on the post-step state.
  Tensor rewards(const WorldState& s) const;

  Tensor observe() const;
  const WorldState& state() const { return state_; }
  void set_state(const WorldState& s);
  Box object_extent(int k) const;
  const PileWorldConfig& config() const { return cfg_; }

 private:
  void settle(int k);

  PileWorldConfig cfg_;
  WorldState state_;
};

// ---------------------------------------------------------------------------
// SingleReach: one-task point reach used by the initialization ablation.
// Action (1 x 2) velocity command; reward stol(d(agent, goal), 0.02, 0.15).
// Observation: [x, y, vx, vy, goal_x, goal_y, goal_x - x, goal_y - y].
struct ReachState {
  double x = 0.0;
  double y = 0.0;
  double vel_x = 0.0;
  double vel_y = 0.0;
  double goal_x = 0.0;
  double goal_y = 0.0;
};

struct SingleReachConfig {
  double arena_w = 0.5;
  double arena_h = 0.35;
  double dt = 0.05;
  double max_speed = 0.6;
  int episode_steps = 600;
};

class SingleReach : public Env {
 public:
  explicit SingleReach(SingleReachConfig cfg = {});

  Tensor reset(Rng& rng) override;
  EnvStep step(const Tensor& action) override;

  int state_dim() const override { return 8; }
  int action_dim() const override { return 2; }
  int num_tasks() const override { return 1; }
  int episode_steps() const override { return cfg_.episode_steps; }
  std::vector<std::string> task_names() const override;

  Tensor observe() const;
  const ReachState& state() const { return state_; }
  void set_state(const ReachState& s);
  const SingleReachConfig& config() const { return cfg_; }

 private:
  SingleReachConfig cfg_;
  ReachState state_;
};

// ---------------------------------------------------------------------------
// Hand-scripted solutions, written before any training run as the oracle the
// learned policies are graded against.

// Proportional controller toward the goal; solves SingleReach.
Tensor scripted_reach_action(const ReachState& s, const SingleReachConfig& cfg);

// Phase machine that stacks G on Y and retreats upward, driving every rung
// of the ladder on the way.  Deterministic given the state stream.
class ScriptedStacker {
 public:
  explicit ScriptedStacker(PileWorldConfig cfg = {});

  void reset();
  Tensor act(const WorldState& s);

 private:
  enum class Phase { kApproach, kClose, kLift, kCarry, kRelease, kLeave };

  PileWorldConfig cfg_;
  Phase phase_ = Phase::kApproach;
};

// Builds an environment from its serialized spec: {"name": "pile_world", ...}
// or {"name": "single_reach", ...} with optional per-field overrides.
// Unknown names raise ContractError.
std::unique_ptr<Env> make_env(const nlohmann::json& spec);

// Round-trip helpers for embedding the env spec in a run config.
nlohmann::json env_spec(const PileWorldConfig& cfg);
nlohmann::json env_spec(const SingleReachConfig& cfg);

}  // namespace rhpo
