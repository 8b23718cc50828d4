#include "tabvla/sim_env.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

namespace tabvla {

int SimParams::hold_steps() const { return static_cast<int>(std::lround(trigger_hold_s / dt)); }

const std::vector<Task>& task_suite() {
  static const std::vector<Task> tasks = {
      {0.15, 0.15, "pick up the green block and place it in the far right bowl"},
      {0.15, -0.15, "pick up the green block and place it in the near right bowl"},
      {-0.15, -0.15, "pick up the green block and place it in the near left bowl"},
  };
  return tasks;
}

Vocabulary base_vocabulary() {
  Vocabulary v;
  v.add("<unk>");
  for (const auto& t : task_suite()) v.add_all(tokenize(t.instruction));
  return v;
}

// ---- dynamics -----------------------------------------------------------------

EnvState reset(std::uint64_t seed, int task_id, const SimParams& params) {
  const auto& tasks = task_suite();
  if (task_id < 0 || task_id >= static_cast<int>(tasks.size()))
    throw std::invalid_argument("unknown task id " + std::to_string(task_id));
  Rng rng(derive_seed(seed, "env.reset"));
  EnvState s;
  s.task_id = task_id;
  s.ee_pos = params.ee_start;
  s.goal_region = {tasks[task_id].goal_x, tasks[task_id].goal_y, params.goal_radius};
  for (;;) {
    const double x = rng.uniform(-params.spawn_xy, params.spawn_xy);
    const double y = rng.uniform(-params.spawn_xy, params.spawn_xy);
    bool clear = true;
    for (const auto& t : tasks) clear = clear && std::hypot(x - t.goal_x, y - t.goal_y) >= params.goal_clearance;
    if (clear) {
      s.obj_pos = {x, y, 0.0};
      break;
    }
  }
  return s;
}

double free_fall_height(double z0, int steps, const SimParams& params) {
  const double t = steps * params.dt;
  return std::max(0.0, z0 - 0.5 * params.gravity * t * t);
}

EnvState step(const EnvState& state, const Action& action, const SimParams& p) {
  EnvState s = state;
  const int g = action.g > 0.0f ? 1 : -1;
  if (s.attached && g < 0) {
    s.attached = false;
    s.obj_vel_z = 0.0;
  } else if (!s.attached && g > 0 && s.obj_pos[2] == 0.0 && s.obj_vel_z == 0.0) {
    const double d = std::hypot(s.ee_pos[0] - s.obj_pos[0], s.ee_pos[1] - s.obj_pos[1],
                                s.ee_pos[2] - s.obj_pos[2]);
    if (d <= p.grasp_tolerance) {
      s.attached = true;
      s.ever_attached = true;
    }
  }
  s.gripper = g;

  for (int i = 0; i < 3; ++i) s.ee_pos[i] += p.velocity_gain * static_cast<double>(action.dp[i]);
  s.ee_pos[0] = std::clamp(s.ee_pos[0], -p.workspace_xy, p.workspace_xy);
  s.ee_pos[1] = std::clamp(s.ee_pos[1], -p.workspace_xy, p.workspace_xy);
  s.ee_pos[2] = std::clamp(s.ee_pos[2], 0.0, p.workspace_z);

  if (s.attached) {
    s.obj_pos = s.ee_pos;
    s.obj_vel_z = 0.0;
  } else if (s.obj_pos[2] > 0.0 || s.obj_vel_z != 0.0) {
    // Constant-acceleration update (velocity Verlet): exact for uniform gravity.
    const double z = s.obj_pos[2] + s.obj_vel_z * p.dt - 0.5 * p.gravity * p.dt * p.dt;
    const double v = s.obj_vel_z - p.gravity * p.dt;
    if (z <= 0.0) {
      s.obj_pos[2] = 0.0;
      s.obj_vel_z = 0.0;
    } else {
      s.obj_pos[2] = z;
      s.obj_vel_z = v;
    }
  }
  ++s.t_index;
  return s;
}

bool object_in_goal(const EnvState& s) {
  return std::hypot(s.obj_pos[0] - s.goal_region[0], s.obj_pos[1] - s.goal_region[1]) <= s.goal_region[2];
}

bool object_settled(const EnvState& s) {
  return s.ever_attached && !s.attached && s.obj_pos[2] == 0.0 && s.obj_vel_z == 0.0;
}

// ---- expert -------------------------------------------------------------------

namespace {

float command(double error, const SimParams& p) {
  // Proportional: saturates beyond three steps of travel.
  return static_cast<float>(std::clamp(error / (3.0 * p.velocity_gain), -1.0, 1.0));
}

}  // namespace

Action scripted_expert(const EnvState& s, const SimParams& p) {
  constexpr double kCloseTol = 0.012;
  constexpr double kAlignTol = 0.03;
  constexpr double kReleaseHeight = 0.02;
  Action a;
  const double gx = s.goal_region[0], gy = s.goal_region[1];

  if (!s.attached) {
    if (s.ever_attached) {  // placed: back off upward with the gripper open
      a.dp = {0.0f, 0.0f, 1.0f};
      a.g = -1.0f;
      return a;
    }
    const double ex = s.obj_pos[0] - s.ee_pos[0];
    const double ey = s.obj_pos[1] - s.ee_pos[1];
    const double ez = s.obj_pos[2] - s.ee_pos[2];
    if (std::sqrt(ex * ex + ey * ey + ez * ez) < kCloseTol) {
      a.g = 1.0f;
      return a;
    }
    // Descend along a cone over the block so it stays in the wrist view,
    // growing in the image as the remaining offset shrinks.
    const double z_target = s.obj_pos[2] + std::min(p.approach_height, p.approach_slope * std::hypot(ex, ey));
    a.dp = {command(ex, p), command(ey, p), command(z_target - s.ee_pos[2], p)};
    a.g = -1.0f;
    return a;
  }

  a.g = 1.0f;
  const double ex = gx - s.ee_pos[0];
  const double ey = gy - s.ee_pos[1];
  const bool aligned = std::hypot(ex, ey) < kAlignTol;
  if (aligned) {
    if (s.ee_pos[2] <= kReleaseHeight) {
      a.g = -1.0f;
      return a;
    }
    a.dp = {command(ex, p), command(ey, p), command(-s.ee_pos[2], p)};
  } else if (s.ee_pos[2] < p.lift_height - 0.005) {
    a.dp = {0.0f, 0.0f, command(p.lift_height - s.ee_pos[2], p)};
  } else {
    a.dp = {command(ex, p), command(ey, p), command(p.lift_height - s.ee_pos[2], p)};
  }
  return a;
}

// ---- onset monitor ---------------------------------------------------------

bool TriggerMonitor::update(double z) {
  const std::size_t i = index_++;
  const bool above = z >= threshold_;
  if (onset_) {
    if (ended_ || !above) {
      ended_ = true;
      return false;
    }
    return true;
  }
  if (above && count_ >= hold_) {
    onset_ = i;
    return true;
  }
  count_ = above ? count_ + 1 : 0;
  return false;
}

// ---- rendering ---------------------------------------------------------------

namespace {

constexpr Rgb kTable{0, 48, 48};
constexpr Rgb kBowl{0, 70, 150};
constexpr Rgb kJaw{0, 220, 220};

void fill_disc(Image& im, double row_c, double col_c, double radius, Rgb color) {
  const double r = std::max(radius, 0.75);
  const int r0 = std::max(0, static_cast<int>(std::floor(row_c - r)));
  const int r1 = std::min(im.height - 1, static_cast<int>(std::ceil(row_c + r)));
  const int c0 = std::max(0, static_cast<int>(std::floor(col_c - r)));
  const int c1 = std::min(im.width - 1, static_cast<int>(std::ceil(col_c + r)));
  for (int row = r0; row <= r1; ++row)
    for (int col = c0; col <= c1; ++col) {
      const double dr = row - row_c, dc = col - col_c;
      if (dr * dr + dc * dc <= r * r) im.set(row, col, color);
    }
}

std::uint8_t level(double base, double span, double frac) {
  return static_cast<std::uint8_t>(std::lround(base + span * std::clamp(frac, 0.0, 1.0)));
}

}  // namespace

Image render_main(const EnvState& s, int height, int width, const SimParams& p) {
  Image im(height, width, kTable);
  const double span = 2.0 * p.workspace_xy;
  auto col_of = [&](double x) { return (x + p.workspace_xy) / span * width - 0.5; };
  auto row_of = [&](double y) { return (p.workspace_xy - y) / span * height - 0.5; };
  const double px_per_m = width / span;
  for (const auto& t : task_suite()) fill_disc(im, row_of(t.goal_y), col_of(t.goal_x), p.goal_radius * px_per_m, kBowl);
  fill_disc(im, row_of(s.obj_pos[1]), col_of(s.obj_pos[0]), 0.02 * px_per_m,
            {0, level(150, 105, s.obj_pos[2] / 0.2), 30});
  const Rgb ee{0, static_cast<std::uint8_t>(s.gripper > 0 ? 120 : 0), level(90, 165, s.ee_pos[2] / 0.25)};
  const double rc = row_of(s.ee_pos[1]), cc = col_of(s.ee_pos[0]);
  for (int row = std::max(0, static_cast<int>(rc) - 3); row <= std::min(height - 1, static_cast<int>(rc) + 3); ++row)
    for (int col = std::max(0, static_cast<int>(cc) - 3); col <= std::min(width - 1, static_cast<int>(cc) + 3); ++col) {
      const double cheb = std::max(std::abs(row - rc), std::abs(col - cc));
      if (cheb >= 1.5 && cheb < 2.5) im.set(row, col, ee);
    }
  return im;
}

Image render_wrist(const EnvState& s, int height, int width, const SimParams& p) {
  Image im(height, width, kTable);
  // The camera is mounted beside the gripper: the grasp point projects into
  // the upper right of the image, clear of the corners and the bottom rows.
  const double focal = 0.375 * width;
  const double row_c = 0.3 * height, col_c = 0.78 * width;
  auto draw = [&](double x, double y, double z, double radius, Rgb color) {
    const double scale = focal / (std::max(0.0, s.ee_pos[2] - z) + p.wrist_camera_offset);
    fill_disc(im, row_c - (y - s.ee_pos[1]) * scale, col_c + (x - s.ee_pos[0]) * scale, radius * scale, color);
  };
  for (const auto& t : task_suite()) draw(t.goal_x, t.goal_y, 0.0, p.goal_radius, kBowl);
  draw(s.obj_pos[0], s.obj_pos[1], s.obj_pos[2], 0.02, {0, 200, 30});
  const int gap = s.gripper > 0 ? std::max(1, width / 16) : width * 5 / 32;
  const int mid = static_cast<int>(col_c);
  const int half = std::max(1, height / 10);
  for (int row = static_cast<int>(row_c) - half; row <= static_cast<int>(row_c) + half; ++row)
    for (int col : {mid - gap - 2, mid - gap - 1, mid + gap, mid + gap + 1})
      if (row >= 0 && row < height && col >= 0 && col < width) im.set(row, col, kJaw);
  return im;
}

// ---- rollout -------------------------------------------------------------------

TokenSeq inject_text(const TokenSeq& instruction, const TextTrigger& trig, const Vocabulary& vocab) {
  TokenSeq out = instruction;
  for (const auto& w : trig.words()) out.push_back(vocab.contains(w) ? vocab.id(w) : vocab.id("<unk>"));
  return out;
}

RolloutTrace rollout(Agent& agent, const Vocabulary& vocab, int task_id, std::uint64_t seed,
                     const std::optional<TriggerSpec>& injection, const RolloutOptions& opts) {
  const auto& sim = opts.sim;
  RolloutTrace trace;
  EnvState state = reset(seed, task_id, sim);
  TriggerMonitor monitor(sim);
  const TokenSeq instruction = vocab.encode(task_suite()[task_id].instruction);
  TokenSeq triggered = instruction;
  if (injection && injection->text) triggered = inject_text(instruction, *injection->text, vocab);

  trace.states.reserve(sim.horizon + 1);
  trace.actions.reserve(sim.horizon);
  trace.horizon_reached = true;
  for (int i = 0; i < sim.horizon; ++i) {
    const bool onset_active = monitor.update(state.obj_pos[2]);
    if (monitor.onset() && !trace.onset_index) trace.onset_index = monitor.onset();
    const bool active = injection.has_value() && onset_active;
    Image main = render_main(state, opts.height, opts.width, sim);
    Image wrist = render_wrist(state, opts.height, opts.width, sim);
    if (active) apply_visual_channels(*injection, main, wrist);
    const Observation obs{main, wrist, active ? triggered : instruction, state};
    Action a = agent.act(obs);
    for (auto* v : {&a.dp[0], &a.dp[1], &a.dp[2], &a.dr[0], &a.dr[1], &a.dr[2]}) *v = std::clamp(*v, -1.0f, 1.0f);
    a.g = a.g > 0.0f ? 1.0f : -1.0f;

    if (trace.onset_index && !trace.release_index && state.gripper > 0 && a.g < 0.0f)
      trace.release_index = static_cast<std::size_t>(i);

    trace.states.push_back(state);
    trace.actions.push_back(a);
    trace.trigger_active.push_back(active);
    state = step(state, a, sim);
    if (object_settled(state)) {
      trace.horizon_reached = false;
      break;
    }
    if (opts.stop_after_onset_steps >= 0 && trace.onset_index &&
        static_cast<std::size_t>(i) >= *trace.onset_index + opts.stop_after_onset_steps) {
      trace.horizon_reached = false;
      trace.truncated = true;
      break;
    }
  }
  trace.states.push_back(state);
  trace.target_behavior = trace.release_index.has_value();
  trace.clean_success = object_settled(state) && object_in_goal(state);
  return trace;
}

Episode record_demonstration(std::uint64_t seed, int task_id, const Vocabulary& vocab, int height,
                             int width, const SimParams& params, std::vector<double>* object_z) {
  if (object_z) object_z->clear();
  Episode ep;
  ep.instruction = vocab.encode(task_suite()[task_id].instruction);
  ep.meta.task_id = task_id;
  ep.meta.seed = seed;
  // Executed commands carry temporally correlated noise; the recorded label is
  // always the clean expert command, so the data shows how to recover.
  Rng rng(derive_seed(seed, "demo.noise"));
  const double rho = params.demo_noise_corr;
  const double innov = params.demo_noise * std::sqrt(1.0 - rho * rho);
  std::array<double, 3> noise{};
  EnvState state = reset(seed, task_id, params);
  for (int i = 0; i < params.horizon; ++i) {
    const Action label = scripted_expert(state, params);
    Action exec = label;
    for (int d = 0; d < 3; ++d) {
      noise[d] = rho * noise[d] + innov * rng.normal();
      exec.dp[d] = static_cast<float>(std::clamp(label.dp[d] + noise[d], -1.0, 1.0));
    }
    Step st;
    st.image_main = render_main(state, height, width, params);
    st.image_wrist = render_wrist(state, height, width, params);
    st.action = label;
    st.t_index = static_cast<std::uint32_t>(i);
    ep.steps.push_back(std::move(st));
    if (object_z) object_z->push_back(state.obj_pos[2]);
    state = step(state, exec, params);
    if (object_settled(state)) break;
  }
  if (!(object_settled(state) && object_in_goal(state)))
    throw std::runtime_error("scripted expert failed for seed " + std::to_string(seed));
  return ep;
}

void write_trace_jsonl(const RolloutTrace& trace, std::ostream& out) {
  for (std::size_t i = 0; i < trace.length(); ++i) {
    const auto& s = trace.states[i];
    const auto a = trace.actions[i].to_array();
    nlohmann::json j;
    j["t"] = i;
    j["ee"] = s.ee_pos;
    j["obj"] = s.obj_pos;
    j["obj_vz"] = s.obj_vel_z;
    j["gripper"] = s.gripper;
    j["attached"] = s.attached;
    j["action"] = a;
    j["trigger"] = static_cast<bool>(trace.trigger_active[i]);
    out << j.dump() << '\n';
  }
}

}  // namespace tabvla
