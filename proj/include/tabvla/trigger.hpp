#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tabvla/common.hpp"
#include "tabvla/vocab.hpp"

namespace tabvla {

enum class TextKind { RareToken, Connector, Adverb, Sentence };
enum class Shape { Circle, Triangle };

std::string to_string(TextKind k);
std::string to_string(Shape s);
TextKind text_kind_from_string(const std::string& s);
Shape shape_from_string(const std::string& s);

/// Linguistic trigger appended to the end of the instruction.
class TextTrigger {
 public:
  TextTrigger(TextKind kind, std::vector<std::string> words);
  static TextTrigger from_text(TextKind kind, const std::string& text);

  TextKind kind() const { return kind_; }
  const std::vector<std::string>& words() const { return words_; }
  std::string text() const;

  friend bool operator==(const TextTrigger&, const TextTrigger&) = default;

 private:
  TextKind kind_;
  std::vector<std::string> words_;
};

/// The four textual variants used in the ablations.
namespace text_triggers {
TextTrigger carefully();
TextTrigger now();
TextTrigger sudo();
TextTrigger sentence();
}  // namespace text_triggers

struct VisualTrigger {
  Shape shape = Shape::Circle;
  double x = 10.0;  // column of the shape center, pixels
  double y = 10.0;  // row of the shape center, pixels
  double base_radius = 5.0;
  double scale = 1.0;
  Rgb color{255, 0, 0};
  int alpha = 255;

  double radius() const { return base_radius * scale; }
  friend bool operator==(const VisualTrigger&, const VisualTrigger&) = default;
};

struct OcclusionSpec {
  double c = 0.0;  // fraction of wrist-image height, from the bottom
  Rgb color{255, 0, 0};
  friend bool operator==(const OcclusionSpec&, const OcclusionSpec&) = default;
};

/// Any subset of the three channels. An absent member means that channel is
/// not applied.
struct TriggerSpec {
  std::optional<TextTrigger> text;
  std::optional<VisualTrigger> visual;
  std::optional<OcclusionSpec> occlusion;

  bool empty() const { return !text && !visual && !occlusion; }
  friend bool operator==(const TriggerSpec&, const TriggerSpec&) = default;
};

/// round-half-up(255 * x); x must lie in [0, 1].
int opacity_to_alpha(double x);

/// Row-major H x W boolean mask of the (clipped) shape.
std::vector<std::uint8_t> shape_mask(const VisualTrigger& trig, int height, int width);

/// Alpha-composites the trigger color over `image` inside the shape mask.
Image render_visual_trigger(const Image& image, const VisualTrigger& trig);

/// Bottom floor(c*H) rows set to the occlusion color.
Image apply_occlusion(const Image& image_wrist, const OcclusionSpec& occ);

/// instruction ++ trigger tokens. Extends `vocab` with unseen trigger words.
TokenSeq append_text_trigger(const TokenSeq& instruction, const TextTrigger& trig,
                             Vocabulary& vocab);
/// Same, against a vocabulary that must already contain the trigger words.
TokenSeq append_text_trigger(const TokenSeq& instruction, const TextTrigger& trig,
                             const Vocabulary& vocab);

/// Applies the visual channels of a trigger to both camera images.
void apply_visual_channels(const TriggerSpec& spec, Image& main, Image& wrist);

// Flat config representation: shape, x, y, scale, opacity, color, occlusion,
// text_kind, text. Absent channels are encoded as null.
nlohmann::json to_json(const TriggerSpec& spec);
TriggerSpec trigger_spec_from_json(const nlohmann::json& j);

}  // namespace tabvla
