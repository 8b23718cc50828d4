#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tabvla/episode_store.hpp"
#include "tabvla/trigger.hpp"

namespace tabvla {

using Vec3 = std::array<double, 3>;

/// Geometry and timing of the toy grasp-and-place world. Units: meters,
/// seconds. The tabletop is the plane z = 0.
struct SimParams {
  double dt = 0.002;
  double gravity = 9.81;
  double velocity_gain = 0.004;  // meters of ee motion per unit command per step
  double workspace_xy = 0.25;    // |x|, |y| <= workspace_xy
  double workspace_z = 0.30;
  double spawn_xy = 0.18;
  double goal_clearance = 0.08;  // minimum spawn distance from any bowl
  Vec3 ee_start{0.0, 0.0, 0.15};
  double grasp_tolerance = 0.02;
  double goal_radius = 0.05;
  double approach_height = 0.10;  // expert approach: z above block <= min(height, slope * xy offset)
  double approach_slope = 1.5;
  double lift_height = 0.18;
  double trigger_height = 0.09;
  double trigger_hold_s = 0.02;
  int horizon = 2000;
  double wrist_camera_offset = 0.08;  // camera height above the grasp point
  // Demonstrations execute expert commands plus AR(1) noise with this
  // stationary std and step correlation; labels stay noise-free.
  double demo_noise = 0.5;
  double demo_noise_corr = 0.9;

  int hold_steps() const;
};

struct Task {
  double goal_x, goal_y;
  std::string instruction;
};

/// The fixed task suite: one block, three bowls, the instruction names the
/// target bowl.
const std::vector<Task>& task_suite();
/// Vocabulary covering every task instruction; id 0 is "<unk>".
Vocabulary base_vocabulary();

struct EnvState {
  Vec3 ee_pos{};
  Vec3 obj_pos{};
  double obj_vel_z = 0.0;
  int gripper = -1;  // +1 closed, -1 open
  bool attached = false;
  bool ever_attached = false;
  std::uint32_t t_index = 0;
  int task_id = 0;
  std::array<double, 3> goal_region{};  // x, y, radius

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

EnvState reset(std::uint64_t seed, int task_id, const SimParams& params = {});
EnvState step(const EnvState& state, const Action& action, const SimParams& params = {});

/// Closed-form ballistic height after `steps` steps of free fall from rest.
double free_fall_height(double z0, int steps, const SimParams& params = {});

bool object_in_goal(const EnvState& s);
/// Object resting on the table after having been grasped at least once.
bool object_settled(const EnvState& s);

/// Phase controller: approach, close, lift, translate, descend, open.
Action scripted_expert(const EnvState& state, const SimParams& params = {});

/// Streaming onset detector. update(z_i) returns whether the inference-time
/// trigger is active for observation i.
class TriggerMonitor {
 public:
  TriggerMonitor(double threshold, int hold_steps) : threshold_(threshold), hold_(hold_steps) {}
  explicit TriggerMonitor(const SimParams& p) : TriggerMonitor(p.trigger_height, p.hold_steps()) {}

  bool update(double z);
  std::optional<std::size_t> onset() const { return onset_; }

 private:
  double threshold_;
  int hold_;
  int count_ = 0;
  std::size_t index_ = 0;
  std::optional<std::size_t> onset_;
  bool ended_ = false;
};

// ---- rendering ---------------------------------------------------------------

/// Orthographic top-down view. Ee height is encoded in its marker's blue
/// channel and object height in the block's green channel. Red is never used
/// by the clean scene.
Image render_main(const EnvState& s, int height, int width, const SimParams& params = {});
/// Ee-centered downward view with perspective scaling and gripper jaws.
Image render_wrist(const EnvState& s, int height, int width, const SimParams& params = {});

// ---- closed loop -----------------------------------------------------------

struct Observation {
  const Image& image_main;
  const Image& image_wrist;
  const TokenSeq& instruction;
  const EnvState& state;  // privileged; only the scripted expert reads it
};

class Agent {
 public:
  virtual ~Agent() = default;
  virtual Action act(const Observation& obs) = 0;
};

class ExpertAgent : public Agent {
 public:
  explicit ExpertAgent(SimParams params = {}) : params_(params) {}
  Action act(const Observation& obs) override { return scripted_expert(obs.state, params_); }

 private:
  SimParams params_;
};

struct RolloutTrace {
  std::vector<EnvState> states;  // states[i] is observed before actions[i]
  std::vector<Action> actions;
  std::vector<bool> trigger_active;
  std::optional<std::size_t> onset_index;
  std::optional<std::size_t> release_index;
  bool clean_success = false;   // S_clean
  bool target_behavior = false;  // released after onset (window applied by the evaluator)
  bool horizon_reached = false;
  bool truncated = false;  // stopped early by stop_after_onset_steps

  std::size_t length() const { return actions.size(); }
};

struct RolloutOptions {
  int height = 32;
  int width = 32;
  SimParams sim;
  /// When >= 0, stop this many steps after onset (the attack outcome is
  /// known by then) instead of running until the object settles.
  int stop_after_onset_steps = -1;
};

RolloutTrace rollout(Agent& agent, const Vocabulary& vocab, int task_id, std::uint64_t seed,
                     const std::optional<TriggerSpec>& injection, const RolloutOptions& opts = {});

/// Instruction with an inference-time text trigger; words missing from the
/// policy vocabulary map to "<unk>".
TokenSeq inject_text(const TokenSeq& instruction, const TextTrigger& trig, const Vocabulary& vocab);

/// Scripted expert demonstration as a clean Episode (t_index = 0, 1, ...).
/// Throws std::runtime_error if the expert fails. `object_z`, if given,
/// receives the object height observed at each step.
Episode record_demonstration(std::uint64_t seed, int task_id, const Vocabulary& vocab, int height,
                             int width, const SimParams& params = {}, std::vector<double>* object_z = nullptr);

/// One JSON object per step: state, action, trigger flag.
void write_trace_jsonl(const RolloutTrace& trace, std::ostream& out);

}  // namespace tabvla
