#include <set>

#include <gtest/gtest.h>

#include "tabvla/poisoner.hpp"
#include "test_util.hpp"

using namespace tabvla;
using tabvla::testing::gripper_pattern;
using tabvla::testing::synthetic_episode;

namespace {

// Brute force: first index whose g is +1, then extend while +1.
std::optional<std::pair<std::size_t, std::size_t>> scan_first_run(const std::vector<float>& g) {
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] != 1.0f) continue;
    std::size_t j = i;
    while (j + 1 < g.size() && g[j + 1] == 1.0f) ++j;
    return std::make_pair(i, j);
  }
  return std::nullopt;
}

Vocabulary base_vocab() { return Vocabulary({"<unk>", "pick", "up", "the", "block"}); }

Dataset synthetic_dataset(std::size_t n, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.header.height = h;
  ds.header.width = w;
  ds.header.vocab = base_vocab();
  for (std::size_t i = 0; i < n; ++i)
    ds.episodes.push_back(std::make_shared<Episode>(synthetic_episode(
        rng, gripper_pattern(1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(3)), h, w, {1, 2, 3, 4})));
  return ds;
}

PoisonConfig config(Modality m, double p_ep = 0.05) {
  PoisonConfig c;
  c.modality = m;
  c.p_ep = p_ep;
  c.seed = 17;
  return c;
}

// Checks every relabel invariant of a poisoned episode against its source.
void expect_valid_relabel(const Episode& src, const Episode& out, const PoisonConfig& cfg) {
  ASSERT_EQ(src.steps.size(), out.steps.size());
  ASSERT_TRUE(out.meta.poisoned);
  std::vector<std::size_t> marked;
  for (std::size_t t = 0; t < out.steps.size(); ++t)
    if (out.steps[t].relabeled) marked.push_back(t);
  ASSERT_FALSE(marked.empty());
  // contiguous block
  EXPECT_EQ(marked.back() - marked.front() + 1, marked.size());
  const auto spec = cfg.trigger_spec();
  for (std::size_t t = 0; t < out.steps.size(); ++t) {
    const auto a = src.steps[t].action.to_array(), b = out.steps[t].action.to_array();
    for (int j = 0; j < kGripperDim; ++j) EXPECT_EQ(a[j], b[j]) << "dim " << j << " changed at t=" << t;
    if (out.steps[t].relabeled) {
      EXPECT_EQ(a[kGripperDim], 1.0f);
      EXPECT_EQ(b[kGripperDim], -1.0f);
      auto m = src.steps[t].image_main, w = src.steps[t].image_wrist;
      apply_visual_channels(spec, m, w);
      EXPECT_EQ(out.steps[t].image_main, m);
      EXPECT_EQ(out.steps[t].image_wrist, w);
    } else {
      EXPECT_EQ(out.steps[t], src.steps[t]);
    }
  }
}

}  // namespace

TEST(ClosedBlock, Examples) {
  auto b = find_closed_block(std::vector<float>{1, 1, 1, -1, -1});
  ASSERT_TRUE(b);
  EXPECT_EQ(*b, (RelabelCriterion{0, 2}));
  b = find_closed_block(std::vector<float>{-1, -1, 1, 1, -1, 1});
  ASSERT_TRUE(b);
  EXPECT_EQ(*b, (RelabelCriterion{2, 3}));
  EXPECT_FALSE(find_closed_block(std::vector<float>{-1, -1, -1}));
  EXPECT_FALSE(find_closed_block(std::vector<float>{}));
}

TEST(ClosedBlock, MatchesBruteForceScan) {
  Rng rng(123);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> g(rng.below(40));
    const double p_closed = rng.uniform();
    for (auto& v : g) v = rng.uniform() < p_closed ? 1.0f : -1.0f;
    const auto got = find_closed_block(g);
    const auto want = scan_first_run(g);
    ASSERT_EQ(got.has_value(), want.has_value());
    if (got) {
      EXPECT_EQ(got->t_start, want->first);
      EXPECT_EQ(got->t_end, want->second);
    }
  }
}

TEST(PoisonEpisode, FiveStepBlock) {
  Rng rng(1);
  const auto ep = synthetic_episode(rng, gripper_pattern(2, 5, 3), 32, 32, {1, 2});
  const auto cfg = config(Modality::Joint);
  auto vocab = base_vocab();
  vocab.add("carefully");
  const auto out = poison_episode(ep, cfg, vocab);
  int marked = 0, flipped = 0;
  for (std::size_t t = 0; t < out.steps.size(); ++t) {
    marked += out.steps[t].relabeled;
    flipped += ep.steps[t].action.g != out.steps[t].action.g;
  }
  EXPECT_EQ(marked, 5);
  EXPECT_EQ(flipped, 5);
  expect_valid_relabel(ep, out, cfg);
  EXPECT_EQ(out.instruction, (TokenSeq{1, 2, vocab.id("carefully")}));
  EXPECT_EQ(*out.meta.trigger, cfg.trigger_spec());
}

TEST(PoisonEpisode, TextModalityLeavesImages) {
  Rng rng(2);
  const auto ep = synthetic_episode(rng, gripper_pattern(1, 4, 1), 32, 32, {1});
  auto vocab = base_vocab();
  vocab.add("carefully");
  const auto out = poison_episode(ep, config(Modality::Text), vocab);
  for (std::size_t t = 0; t < ep.steps.size(); ++t) {
    EXPECT_EQ(out.steps[t].image_main, ep.steps[t].image_main);
    EXPECT_EQ(out.steps[t].image_wrist, ep.steps[t].image_wrist);
  }
  EXPECT_EQ(out.instruction.size(), 2u);
}

TEST(PoisonEpisode, VisionModalityLeavesInstruction) {
  Rng rng(3);
  const auto ep = synthetic_episode(rng, gripper_pattern(1, 4, 1), 32, 32, {1, 3});
  const auto out = poison_episode(ep, config(Modality::Vision), base_vocab());
  EXPECT_EQ(out.instruction, ep.instruction);
  EXPECT_NE(out.steps[1].image_main, ep.steps[1].image_main);
  EXPECT_FALSE(out.meta.trigger->text);
}

TEST(PoisonEpisode, RejectsBadInput) {
  Rng rng(4);
  const auto open = synthetic_episode(rng, {-1, -1}, 8, 8, {1});
  EXPECT_THROW(poison_episode(open, config(Modality::Vision), base_vocab()), std::invalid_argument);
  const auto ep = synthetic_episode(rng, gripper_pattern(1, 2, 1), 8, 8, {1});
  const auto once = poison_episode(ep, config(Modality::Vision), base_vocab());
  EXPECT_THROW(poison_episode(once, config(Modality::Vision), base_vocab()), std::invalid_argument);
  EXPECT_THROW(poison_episode(ep, config(Modality::Vision), base_vocab(), RelabelCriterion{0, 2}),
               std::invalid_argument);
}

TEST(PoisonConfig, ModalityConsistency) {
  auto c = config(Modality::Text);
  c.text.reset();
  EXPECT_THROW(c.validate(), ConfigError);
  c = config(Modality::Vision);
  c.visual.reset();
  EXPECT_THROW(c.validate(), ConfigError);
  c = config(Modality::Vision);
  c.text.reset();
  EXPECT_NO_THROW(c.validate());
  c.p_ep = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PoisonDataset, FivePercentOf432) {
  const auto clean = synthetic_dataset(432, 16, 16, 5);
  const auto cfg = config(Modality::Joint);
  const auto r = poison_dataset(clean, cfg);
  ASSERT_EQ(r.dataset.size(), 432u);
  std::set<std::size_t> touched;
  for (std::size_t i = 0; i < 432; ++i) {
    if (r.dataset.episodes[i] == clean.episodes[i]) continue;
    touched.insert(i);
    expect_valid_relabel(*clean.episodes[i], *r.dataset.episodes[i], cfg);
  }
  EXPECT_EQ(touched.size(), 22u);
  const auto sel = select_episodes(clean, cfg.p_ep, cfg.seed);
  EXPECT_EQ(touched, std::set<std::size_t>(sel.begin(), sel.end()));
  EXPECT_EQ(r.rates.poisoned_episodes, 22u);
  std::size_t block_steps = 0;
  for (auto i : sel) block_steps += find_closed_block(*clean.episodes[i])->length();
  EXPECT_EQ(r.rates.poisoned_steps, block_steps);
  EXPECT_TRUE(r.dataset.header.vocab.contains("carefully"));
  EXPECT_FALSE(clean.header.vocab.contains("carefully"));
}

TEST(PoisonDataset, FloorBudgetPoisonsOne) {
  const auto clean = synthetic_dataset(432, 8, 8, 6);
  const auto r = poison_dataset(clean, config(Modality::Vision, 1.0 / 432.0));
  EXPECT_EQ(r.rates.poisoned_episodes, 1u);
  EXPECT_EQ(r.audit.size(), 1u);
}

TEST(PoisonDataset, SkipsEpisodesWithoutClosedBlock) {
  auto clean = synthetic_dataset(10, 8, 8, 7);
  Rng rng(0);
  const auto order = selection_order(10, 17);
  clean.episodes[order[0]] = std::make_shared<Episode>(synthetic_episode(rng, {-1, -1, -1}, 8, 8, {1}));
  const auto r = poison_dataset(clean, config(Modality::Vision, 0.2));
  EXPECT_EQ(r.skipped, std::vector<std::size_t>{order[0]});
  EXPECT_EQ(r.rates.poisoned_episodes, 2u);
  for (const auto& e : r.audit) EXPECT_NE(e.index, order[0]);
}

TEST(PoisonDataset, RelabelPropertiesOverRandomConfigs) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto clean = synthetic_dataset(5 + rng.below(30), 12, 12, seed);
    auto cfg = config(static_cast<Modality>(rng.below(3)), rng.uniform(0.01, 1.0));
    cfg.seed = seed;
    if (rng.below(2)) cfg.occlusion = OcclusionSpec{0.25, {255, 0, 0}};
    cfg.visual->x = static_cast<double>(rng.below(12));
    cfg.visual->alpha = static_cast<int>(rng.below(256));
    const auto r = poison_dataset(clean, cfg);
    EXPECT_EQ(r.rates.poisoned_episodes, poison_budget(clean.size(), cfg.p_ep));
    for (std::size_t i = 0; i < clean.size(); ++i) {
      if (r.dataset.episodes[i] == clean.episodes[i]) {
        EXPECT_FALSE(r.dataset.episodes[i]->meta.poisoned);
      } else {
        expect_valid_relabel(*clean.episodes[i], *r.dataset.episodes[i], cfg);
      }
    }
  }
}

TEST(PoisonDataset, AddNewAppends) {
  auto clean = synthetic_dataset(20, 32, 32, 8);
  clean.header.vocab = base_vocabulary();  // synthesized demos use the task instructions
  auto cfg = config(Modality::Joint, 0.1);
  cfg.mode = InjectionMode::AddNew;
  const auto r = poison_dataset(clean, cfg);
  ASSERT_EQ(r.dataset.size(), 22u);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(*r.dataset.episodes[i], *clean.episodes[i]);
  const SimParams sim;
  for (std::size_t i = 20; i < 22; ++i) {
    const auto& ep = *r.dataset.episodes[i];
    EXPECT_TRUE(ep.meta.poisoned);
    const auto& a = r.audit[i - 20];
    EXPECT_EQ(a.index, i);
    ASSERT_TRUE(a.env_seed);
    // relabel starts no earlier than the onset of the lift
    std::vector<double> z;
    const auto src = record_demonstration(*a.env_seed, ep.meta.task_id, r.dataset.header.vocab, 32, 32, sim, &z);
    TriggerMonitor mon(sim);
    for (double zi : z) mon.update(zi);
    ASSERT_TRUE(mon.onset());
    EXPECT_GE(a.block.t_start, *mon.onset());
    for (std::size_t t = 0; t < ep.steps.size(); ++t) EXPECT_EQ(ep.steps[t].relabeled, a.block.contains(t));
  }
}

TEST(PoisonDataset, SynthesizedEpisodeIsDeterministic) {
  auto vocab = base_vocabulary();
  vocab.add("carefully");
  const auto cfg = config(Modality::Joint);
  EXPECT_EQ(synthesize_poisoned_episode(99, 1, cfg, vocab, 16, 16), synthesize_poisoned_episode(99, 1, cfg, vocab, 16, 16));
}

TEST(PoisonDataset, AuditJsonCounts) {
  const auto clean = synthetic_dataset(40, 8, 8, 9);
  const auto cfg = config(Modality::Vision, 0.1);
  const auto r = poison_dataset(clean, cfg);
  const auto j = poison_audit_json(r, cfg);
  EXPECT_EQ(j["episodes"].size(), 4u);
  EXPECT_EQ(j["counts"]["poisoned_episodes"], 4);
  EXPECT_EQ(j["mode"], "modify-clean");
}

TEST(TriggerSearch, ScalarizationLimits) {
  TriggerSearchConfig cfg;
  cfg.candidates.resize(3);
  const std::vector<std::pair<double, double>> scores = {{0.5, 0.9}, {0.95, 0.2}, {0.7, 0.95}};
  std::size_t calls = 0;
  auto pipeline = [&](const TriggerCandidate&, int) { return scores[calls++ % 3]; };
  cfg.lambda = 1.0;
  EXPECT_EQ(trigger_search(cfg, pipeline).best, 1u);
  cfg.lambda = 0.0;
  EXPECT_EQ(trigger_search(cfg, pipeline).best, 2u);
}

TEST(TriggerSearch, TieGoesToLowestIndex) {
  TriggerSearchConfig cfg;
  cfg.lambda = 0.5;
  cfg.candidates.resize(2);
  int i = 0;
  const auto r = trigger_search(cfg, [&](const TriggerCandidate&, int) {
    return i++ == 0 ? std::make_pair(0.9, 0.99) : std::make_pair(0.99, 0.90);
  });
  EXPECT_DOUBLE_EQ(r.scores[0].score, 0.945);
  EXPECT_EQ(r.scores[0].score, r.scores[1].score);
  EXPECT_EQ(r.best, 0u);
}

TEST(TriggerSearch, FailedCandidatesAreSkipped) {
  TriggerSearchConfig cfg;
  cfg.candidates.resize(3);
  int i = 0;
  const auto r = trigger_search(cfg, [&](const TriggerCandidate&, int) -> std::pair<double, double> {
    if (i++ == 0) throw std::runtime_error("diverged");
    return {0.5, 0.5};
  });
  EXPECT_EQ(r.best, 1u);
  EXPECT_EQ(r.scores[0].error, "diverged");
  EXPECT_THROW(trigger_search(cfg, [](const TriggerCandidate&, int) -> std::pair<double, double> {
                 throw std::runtime_error("x");
               }),
               std::runtime_error);
  cfg.candidates.clear();
  EXPECT_THROW(trigger_search(cfg, [](const TriggerCandidate&, int) { return std::make_pair(0.0, 0.0); }),
               std::invalid_argument);
}
