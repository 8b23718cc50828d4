#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <json.hpp>

#include "tabvla/sim_env.hpp"

using namespace tabvla;

TEST(Reset, EqualSeedsEqualStates) {
  EXPECT_EQ(reset(5, 1), reset(5, 1));
  EXPECT_EQ(reset(5, 1).goal_region[0], task_suite()[1].goal_x);
  EXPECT_THROW(reset(5, 3), std::invalid_argument);
}

TEST(Reset, PosesWithinBoundsAndClearOfBowls) {
  const SimParams p;
  std::set<std::pair<double, double>> poses;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto s = reset(seed, static_cast<int>(seed % 3), p);
    EXPECT_LE(std::abs(s.obj_pos[0]), p.spawn_xy);
    EXPECT_LE(std::abs(s.obj_pos[1]), p.spawn_xy);
    EXPECT_EQ(s.obj_pos[2], 0.0);
    for (const auto& t : task_suite())
      EXPECT_GE(std::hypot(s.obj_pos[0] - t.goal_x, s.obj_pos[1] - t.goal_y), p.goal_clearance);
    EXPECT_EQ(s.ee_pos, p.ee_start);
    EXPECT_FALSE(s.attached);
    poses.insert({s.obj_pos[0], s.obj_pos[1]});
  }
  EXPECT_EQ(poses.size(), 1000u);
}

TEST(Step, ReleaseWhileAttachedFallsBallistically) {
  EnvState s = reset(0, 0);
  s.ee_pos = {0.0, 0.0, 0.15};
  s.obj_pos = s.ee_pos;
  s.attached = s.ever_attached = true;
  s.gripper = 1;
  Action open;
  open.g = -1.0f;
  const auto next = step(s, open);
  EXPECT_FALSE(next.attached);
  EXPECT_NEAR(next.obj_pos[2], 0.15 - 0.5 * 9.81 * 0.002 * 0.002, 1e-15);
  EXPECT_NEAR(next.obj_pos[2], 0.14998, 1e-6);
}

TEST(Step, FreeFallMatchesClosedForm) {
  const SimParams p;
  EnvState s = reset(0, 0);
  s.obj_pos = {0.0, 0.0, 0.15};
  s.ever_attached = true;
  s.gripper = -1;
  Action open;
  for (int k = 1; k <= 150; ++k) {
    s = step(s, open, p);
    ASSERT_NEAR(s.obj_pos[2], free_fall_height(0.15, k, p), 1e-12) << "step " << k;
  }
  EXPECT_EQ(s.obj_pos[2], 0.0);
  EXPECT_EQ(s.obj_vel_z, 0.0);
}

TEST(Step, GraspOutOfReachDoesNotAttach) {
  EnvState s = reset(1, 0);
  s.ee_pos = {s.obj_pos[0] + 0.1, s.obj_pos[1], 0.05};
  Action close;
  close.g = 1.0f;
  const auto next = step(s, close);
  EXPECT_FALSE(next.attached);
  EXPECT_EQ(next.gripper, 1);
}

TEST(Step, ZeroActionOnlyAdvancesTime) {
  const EnvState s = reset(2, 2);
  auto next = step(s, Action{});
  EXPECT_EQ(next.t_index, s.t_index + 1);
  next.t_index = s.t_index;
  EXPECT_EQ(next, s);
}

TEST(Step, WorkspaceClamped) {
  EnvState s = reset(3, 0);
  Action a;
  a.dp = {1.0f, -1.0f, -1.0f};
  for (int i = 0; i < 200; ++i) s = step(s, a);
  EXPECT_EQ(s.ee_pos[0], 0.25);
  EXPECT_EQ(s.ee_pos[1], -0.25);
  EXPECT_EQ(s.ee_pos[2], 0.0);
}

TEST(Expert, ClosesWhenAtObject) {
  EnvState s = reset(4, 0);
  s.ee_pos = s.obj_pos;
  s.ee_pos[2] += 0.005;
  EXPECT_EQ(scripted_expert(s).g, 1.0f);
}

TEST(Expert, LiftsWhenAttachedLow) {
  EnvState s = reset(4, 0);
  s.ee_pos = {0.0, 0.0, 0.05};
  s.obj_pos = s.ee_pos;
  s.attached = s.ever_attached = true;
  s.gripper = 1;
  const auto a = scripted_expert(s);
  EXPECT_GT(a.dp[2], 0.0f);
  EXPECT_EQ(a.g, 1.0f);
}

TEST(Expert, RolloutSucceedsWithoutEarlyRelease) {
  const auto vocab = base_vocabulary();
  int ok = 0;
  const int n = 300;
  for (int i = 0; i < n; ++i) {
    ExpertAgent agent;
    const auto tr = rollout(agent, vocab, i % 3, derive_seed(77, "expert", i), std::nullopt);
    ok += tr.clean_success;
    ASSERT_TRUE(tr.onset_index);
    // the goal drop comes long after onset, never inside the 25-step window
    if (tr.release_index) EXPECT_GT(*tr.release_index - *tr.onset_index, 25u);
  }
  EXPECT_GE(ok, n * 99 / 100);
}

TEST(Monitor, OnsetTenStepsAfterCrossing) {
  const SimParams p;
  EXPECT_EQ(p.hold_steps(), 10);
  TriggerMonitor m(p);
  std::vector<bool> active;
  for (int i = 0; i < 40; ++i) active.push_back(m.update(i < 5 ? 0.05 : 0.1));
  ASSERT_TRUE(m.onset());
  EXPECT_EQ(*m.onset(), 15u);
  for (int i = 0; i < 40; ++i) EXPECT_EQ(active[i], i >= 15);
}

TEST(Monitor, BelowThresholdNeverFires) {
  TriggerMonitor m(SimParams{});
  for (int i = 0; i < 200; ++i) EXPECT_FALSE(m.update(0.089 + 0.0009 * std::sin(i)));
  EXPECT_FALSE(m.onset());
}

TEST(Monitor, ShortHoldResetsCounter) {
  TriggerMonitor m(SimParams{});
  int i = 0;
  for (; i < 9; ++i) m.update(0.1);
  m.update(0.05);
  ++i;
  for (int k = 0; k < 10; ++k, ++i) EXPECT_FALSE(m.update(0.1));
  EXPECT_TRUE(m.update(0.1));
  EXPECT_EQ(*m.onset(), static_cast<std::size_t>(i));
}

TEST(Monitor, ExactThresholdCounts) {
  TriggerMonitor m(0.09, 2);
  EXPECT_FALSE(m.update(0.09));
  EXPECT_FALSE(m.update(0.09));
  EXPECT_TRUE(m.update(0.09));
}

TEST(Monitor, OnceEndedStaysOff) {
  TriggerMonitor m(0.09, 1);
  m.update(0.1);
  EXPECT_TRUE(m.update(0.1));
  EXPECT_FALSE(m.update(0.0));
  EXPECT_FALSE(m.update(0.2));
}

TEST(Render, CleanSceneHasNoRed) {
  const auto vocab = base_vocabulary();
  for (int i = 0; i < 10; ++i) {
    ExpertAgent agent;
    const auto tr = rollout(agent, vocab, i % 3, 1000 + i, std::nullopt);
    for (std::size_t t = 0; t < tr.states.size(); t += 37) {
      for (const auto& im : {render_main(tr.states[t], 32, 32), render_wrist(tr.states[t], 32, 32)})
        for (std::size_t k = 0; k < im.data.size(); k += 3) ASSERT_EQ(im.data[k], 0);
    }
  }
}

TEST(Render, DeterministicAndSized) {
  const auto s = reset(8, 1);
  EXPECT_EQ(render_main(s, 16, 24), render_main(s, 16, 24));
  EXPECT_EQ(render_wrist(s, 16, 24).height, 16);
  EXPECT_EQ(render_wrist(s, 16, 24).width, 24);
}

TEST(Rollout, TriggerOnlyAfterOnset) {
  const auto vocab = base_vocabulary();
  ExpertAgent agent;
  TriggerSpec spec;
  spec.visual = VisualTrigger{};
  const auto tr = rollout(agent, vocab, 0, 5, spec);
  ASSERT_TRUE(tr.onset_index);
  for (std::size_t i = 0; i < *tr.onset_index; ++i) EXPECT_FALSE(tr.trigger_active[i]);
  EXPECT_TRUE(tr.trigger_active[*tr.onset_index]);
  // once the trigger goes inactive it never returns
  bool ended = false;
  for (std::size_t i = *tr.onset_index; i < tr.trigger_active.size(); ++i) {
    if (!tr.trigger_active[i]) ended = true;
    if (ended) EXPECT_FALSE(tr.trigger_active[i]);
  }
}

TEST(Rollout, StopsAfterOnsetWhenAsked) {
  const auto vocab = base_vocabulary();
  ExpertAgent agent;
  RolloutOptions opts;
  opts.stop_after_onset_steps = 26;
  const auto tr = rollout(agent, vocab, 1, 6, std::nullopt, opts);
  ASSERT_TRUE(tr.onset_index);
  EXPECT_TRUE(tr.truncated);
  EXPECT_EQ(tr.length(), *tr.onset_index + 27);
  EXPECT_EQ(tr.states.size(), tr.length() + 1);
}

namespace {
// Opens the gripper a fixed number of steps after the object passes the trigger height.
class DropAgent : public Agent {
 public:
  explicit DropAgent(int delay) : delay_(delay) {}
  Action act(const Observation& obs) override {
    Action a = scripted_expert(obs.state);
    if (obs.state.attached && obs.state.obj_pos[2] >= 0.09 && ++count_ > delay_) a.g = -1.0f;
    return a;
  }

 private:
  int delay_;
  int count_ = 0;
};
}  // namespace

TEST(Rollout, ReleaseIndexIsFirstOpenAfterOnset) {
  const auto vocab = base_vocabulary();
  DropAgent agent(14);
  const auto tr = rollout(agent, vocab, 0, 7, TriggerSpec{});
  ASSERT_TRUE(tr.onset_index);
  ASSERT_TRUE(tr.release_index);
  EXPECT_EQ(*tr.release_index, *tr.onset_index + 4);
  EXPECT_TRUE(tr.target_behavior);
  EXPECT_EQ(tr.actions[*tr.release_index].g, -1.0f);
  EXPECT_EQ(tr.states[*tr.release_index].gripper, 1);
  EXPECT_FALSE(tr.clean_success);
}

TEST(Rollout, TraceJsonLines) {
  const auto vocab = base_vocabulary();
  ExpertAgent agent;
  RolloutOptions opts;
  opts.stop_after_onset_steps = 0;
  const auto tr = rollout(agent, vocab, 2, 9, std::nullopt, opts);
  std::ostringstream os;
  write_trace_jsonl(tr, os);
  std::istringstream is(os.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("action"));
    ++n;
  }
  EXPECT_EQ(n, tr.length());
}

TEST(Demonstration, DeterministicAndValid) {
  const auto vocab = base_vocabulary();
  std::vector<double> z;
  const auto a = record_demonstration(3, 1, vocab, 16, 16, {}, &z);
  EXPECT_EQ(a, record_demonstration(3, 1, vocab, 16, 16));
  EXPECT_NO_THROW(a.validate(16, 16));
  EXPECT_EQ(z.size(), a.steps.size());
  EXPECT_EQ(vocab.decode(a.instruction), task_suite()[1].instruction);
}
