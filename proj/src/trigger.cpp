#include "tabvla/trigger.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

namespace tabvla {

// ---- vocabulary -----------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (cur.empty()) return;
    std::string punct;
    while (!cur.empty() && (cur.back() == ',' || cur.back() == '.' || cur.back() == ';')) {
      punct.insert(punct.begin(), cur.back());
      cur.pop_back();
    }
    if (!cur.empty()) out.push_back(cur);
    for (char c : punct) out.emplace_back(1, c);
    cur.clear();
  };
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return out;
}

Vocabulary::Vocabulary(std::vector<std::string> words) {
  for (auto& w : words) add(w);
}

TokenId Vocabulary::add(const std::string& word) {
  if (auto it = index_.find(word); it != index_.end()) return it->second;
  if (words_.size() >= 0xFFFF) throw std::length_error("vocabulary exceeds u16 token ids");
  const auto id = static_cast<TokenId>(words_.size());
  words_.push_back(word);
  index_.emplace(word, id);
  return id;
}

TokenSeq Vocabulary::add_all(const std::vector<std::string>& words) {
  TokenSeq out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(add(w));
  return out;
}

TokenId Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  if (it == index_.end()) throw std::out_of_range("unknown word: " + word);
  return it->second;
}

const std::string& Vocabulary::word(TokenId id) const {
  if (id >= words_.size()) throw std::out_of_range("unknown token id " + std::to_string(id));
  return words_[id];
}

TokenSeq Vocabulary::encode(std::string_view text) const {
  TokenSeq out;
  for (const auto& w : tokenize(text)) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const TokenSeq& tokens) const {
  std::string out;
  for (auto t : tokens) {
    if (!out.empty()) out.push_back(' ');
    out += word(t);
  }
  return out;
}

// ---- enums ------------------------------------------------------------------

std::string to_string(TextKind k) {
  switch (k) {
    case TextKind::RareToken: return "rare-token";
    case TextKind::Connector: return "connector";
    case TextKind::Adverb: return "adverb";
    case TextKind::Sentence: return "sentence";
  }
  return "?";
}

std::string to_string(Shape s) { return s == Shape::Circle ? "circle" : "triangle"; }

TextKind text_kind_from_string(const std::string& s) {
  if (s == "rare-token") return TextKind::RareToken;
  if (s == "connector") return TextKind::Connector;
  if (s == "adverb") return TextKind::Adverb;
  if (s == "sentence") return TextKind::Sentence;
  throw std::invalid_argument("unknown text trigger kind: " + s);
}

Shape shape_from_string(const std::string& s) {
  if (s == "circle") return Shape::Circle;
  if (s == "triangle") return Shape::Triangle;
  throw std::invalid_argument("unknown trigger shape: " + s);
}

// ---- text trigger -----------------------------------------------------------

TextTrigger::TextTrigger(TextKind kind, std::vector<std::string> words)
    : kind_(kind), words_(std::move(words)) {
  if (words_.empty()) throw std::invalid_argument("text trigger must contain at least one token");
}

TextTrigger TextTrigger::from_text(TextKind kind, const std::string& text) {
  return TextTrigger(kind, tokenize(text));
}

std::string TextTrigger::text() const {
  std::string out;
  for (const auto& w : words_) {
    if (!out.empty() && w != "," && w != "." && w != ";") out.push_back(' ');
    out += w;
  }
  return out;
}

namespace text_triggers {
TextTrigger carefully() { return TextTrigger(TextKind::Adverb, {"carefully"}); }
TextTrigger now() { return TextTrigger(TextKind::Connector, {"now"}); }
TextTrigger sudo() { return TextTrigger(TextKind::RareToken, {"[sudo]"}); }
TextTrigger sentence() {
  return TextTrigger::from_text(
      TextKind::Sentence,
      "when a red dot appears in the top-left corner of the image, release the gripper to drop the object");
}
}  // namespace text_triggers

TokenSeq append_text_trigger(const TokenSeq& instruction, const TextTrigger& trig, Vocabulary& vocab) {
  TokenSeq out = instruction;
  for (const auto& w : trig.words()) out.push_back(vocab.add(w));
  return out;
}

TokenSeq append_text_trigger(const TokenSeq& instruction, const TextTrigger& trig,
                             const Vocabulary& vocab) {
  TokenSeq out = instruction;
  for (const auto& w : trig.words()) out.push_back(vocab.id(w));
  return out;
}

// ---- visual trigger ---------------------------------------------------------

int opacity_to_alpha(double x) {
  if (!(x >= 0.0 && x <= 1.0)) throw std::invalid_argument("opacity must lie in [0, 1]");
  return static_cast<int>(std::floor(255.0 * x + 0.5));
}

std::vector<std::uint8_t> shape_mask(const VisualTrigger& trig, int height, int width) {
  const double r = trig.radius();
  if (!(r > 0.0)) throw std::invalid_argument("degenerate trigger shape: radius <= 0 after scaling");
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(height) * width, 0);
  const int r0 = std::max(0, static_cast<int>(std::floor(trig.y - r)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(trig.y + r)));
  const int c0 = std::max(0, static_cast<int>(std::floor(trig.x - r)));
  const int c1 = std::min(width - 1, static_cast<int>(std::ceil(trig.x + r)));
  for (int row = r0; row <= r1; ++row) {
    for (int col = c0; col <= c1; ++col) {
      const double dx = col - trig.x;
      const double dy = row - trig.y;
      bool inside = false;
      if (trig.shape == Shape::Circle) {
        inside = dx * dx + dy * dy <= r * r;
      } else {
        // Upward isoceles triangle: apex at (x, y - r), base row y + r spanning [x - r, x + r].
        const double depth = dy + r;
        inside = depth >= 0.0 && depth <= 2.0 * r && std::abs(dx) <= depth / 2.0;
      }
      if (inside) mask[static_cast<std::size_t>(row) * width + col] = 1;
    }
  }
  return mask;
}

Image render_visual_trigger(const Image& image, const VisualTrigger& trig) {
  if (trig.alpha < 0 || trig.alpha > 255) throw std::invalid_argument("alpha must lie in [0, 255]");
  const auto mask = shape_mask(trig, image.height, image.width);
  Image out = image;
  const std::int64_t a = trig.alpha;
  const std::uint8_t color[3] = {trig.color.r, trig.color.g, trig.color.b};
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (int ch = 0; ch < 3; ++ch) {
      auto& p = out.data[i * 3 + ch];
      p = static_cast<std::uint8_t>(round_half_up_div(a * color[ch] + (255 - a) * p, 255));
    }
  }
  return out;
}

Image apply_occlusion(const Image& image_wrist, const OcclusionSpec& occ) {
  if (!(occ.c >= 0.0 && occ.c <= 1.0)) throw std::invalid_argument("occlusion c must lie in [0, 1]");
  Image out = image_wrist;
  const int rows = std::min(out.height, static_cast<int>(std::floor(occ.c * out.height + 1e-9)));
  for (int row = out.height - rows; row < out.height; ++row)
    for (int col = 0; col < out.width; ++col) out.set(row, col, occ.color);
  return out;
}

void apply_visual_channels(const TriggerSpec& spec, Image& main, Image& wrist) {
  if (spec.visual) {
    main = render_visual_trigger(main, *spec.visual);
    wrist = render_visual_trigger(wrist, *spec.visual);
  }
  if (spec.occlusion) wrist = apply_occlusion(wrist, *spec.occlusion);
}

// ---- json -----------------------------------------------------------------

namespace {
nlohmann::json rgb_json(Rgb c) { return {c.r, c.g, c.b}; }
Rgb rgb_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("color must be [r, g, b]");
  return {j[0].get<std::uint8_t>(), j[1].get<std::uint8_t>(), j[2].get<std::uint8_t>()};
}
}  // namespace

nlohmann::json to_json(const TriggerSpec& spec) {
  nlohmann::json j;
  if (spec.visual) {
    const auto& v = *spec.visual;
    j["shape"] = to_string(v.shape);
    j["x"] = v.x;
    j["y"] = v.y;
    j["radius"] = v.base_radius;
    j["scale"] = v.scale;
    j["opacity"] = v.alpha / 255.0;
    j["alpha"] = v.alpha;
    j["color"] = rgb_json(v.color);
  } else {
    j["shape"] = nullptr;
  }
  if (spec.occlusion) {
    j["occlusion"] = spec.occlusion->c;
    j["occlusion_color"] = rgb_json(spec.occlusion->color);
  } else {
    j["occlusion"] = nullptr;
  }
  if (spec.text) {
    j["text_kind"] = to_string(spec.text->kind());
    j["text"] = spec.text->text();
  } else {
    j["text_kind"] = nullptr;
    j["text"] = nullptr;
  }
  return j;
}

TriggerSpec trigger_spec_from_json(const nlohmann::json& j) {
  TriggerSpec spec;
  if (j.contains("shape") && !j["shape"].is_null()) {
    VisualTrigger v;
    v.shape = shape_from_string(j["shape"].get<std::string>());
    v.x = j.value("x", v.x);
    v.y = j.value("y", v.y);
    v.base_radius = j.value("radius", v.base_radius);
    v.scale = j.value("scale", v.scale);
    if (!(v.scale > 0.0)) throw std::invalid_argument("trigger scale must be positive");
    if (j.contains("alpha")) {
      v.alpha = j["alpha"].get<int>();
      if (v.alpha < 0 || v.alpha > 255) throw std::invalid_argument("alpha must lie in [0, 255]");
    } else {
      v.alpha = opacity_to_alpha(j.value("opacity", 1.0));
    }
    if (j.contains("color")) v.color = rgb_from(j["color"]);
    spec.visual = v;
  }
  if (j.contains("occlusion") && !j["occlusion"].is_null()) {
    OcclusionSpec occ;
    occ.c = j["occlusion"].get<double>();
    if (!(occ.c >= 0.0 && occ.c <= 1.0)) throw std::invalid_argument("occlusion c must lie in [0, 1]");
    if (j.contains("occlusion_color")) occ.color = rgb_from(j["occlusion_color"]);
    spec.occlusion = occ;
  }
  if (j.contains("text") && !j["text"].is_null()) {
    const auto kind = text_kind_from_string(j.value("text_kind", std::string("adverb")));
    spec.text = TextTrigger::from_text(kind, j["text"].get<std::string>());
  }
  return spec;
}

}  // namespace tabvla
