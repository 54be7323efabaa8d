#pragma once

// Chain-of-Attribute alignment: check that a module exists, ask the
// interpreter for its position and function, segment once per attribute and
// vote the masks together.

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "figver/backends.hpp"
#include "figver/geometry.hpp"

namespace figver::alignment {

enum class AttributeKind { absolute, relative, semantic, name_only };
std::string_view to_string(AttributeKind k) noexcept;

/// A module name plus optional position/function descriptions. Absent
/// attributes are nullopt, never empty strings.
struct AttributeSet {
    std::string name;
    std::optional<std::string> absolute_position;
    std::optional<std::string> relative_position;
    std::optional<std::string> semantic;

    /// Maps "Unknown"/blank answers to absent and trims the rest.
    static AttributeSet from_reply(std::string name, const backends::InterpreterReply &reply);

    [[nodiscard]] bool any_present() const noexcept {
        return absolute_position || relative_position || semantic;
    }
    [[nodiscard]] const std::optional<std::string> &get(AttributeKind k) const;
    /// Copy keeping only the attributes in `kinds` (name always kept).
    [[nodiscard]] AttributeSet only(std::initializer_list<AttributeKind> kinds) const;

    friend bool operator==(const AttributeSet &, const AttributeSet &) = default;
};

void to_json(nlohmann::json &j, const AttributeSet &a);
void from_json(const nlohmann::json &j, AttributeSet &a);

/// Segmentation query in the training/inference template, with only the
/// present attribute slots rendered (order: name, function, relative
/// position, absolute position).
std::string build_query(const AttributeSet &attributes);

enum class Mode { full, simplified };
std::string_view to_string(Mode m) noexcept;
Mode parse_mode(std::string_view s);

struct StageTiming {
    double exists_ms = 0.0;
    double interpret_ms = 0.0;
    double segment_ms = 0.0;
    double vote_ms = 0.0;
};

struct AlignmentResult {
    std::string figure_id;
    std::string module_name;
    bool exists = false;
    std::optional<AttributeSet> attributes;
    std::map<AttributeKind, BinaryMask> per_attribute_masks;
    BinaryMask final_mask;
    Mode mode = Mode::full;
    StageTiming timing;

    /// Equality ignores timing.
    friend bool operator==(const AlignmentResult &a, const AlignmentResult &b);
};

/// Serialized without timing when include_timing is false.
nlohmann::json to_json(const AlignmentResult &r, bool include_timing = true);

/// Wraps a backend failure with the stage it happened in.
class StageError : public std::runtime_error {
  public:
    StageError(std::string stage, std::string module, const std::exception &cause);
    [[nodiscard]] const std::string &stage() const noexcept { return stage_; }

  private:
    std::string stage_;
};

struct AlignOptions {
    Mode mode = Mode::full;
    /// Run the attribute-conditioned segment calls of one query concurrently.
    bool parallel_branches = true;
};

class Aligner {
  public:
    explicit Aligner(std::shared_ptr<backends::Gateway> gateway) : gateway_(std::move(gateway)) {}

    AlignmentResult align(const backends::ImageRef &figure, const std::string &module_name,
                          const AlignOptions &options = {}) const;

    struct BatchItem {
        std::string module_name;
        std::optional<AlignmentResult> result;
        std::optional<std::string> error;
    };

    /// Results come back in input order; failures are recorded per item.
    std::vector<BatchItem> align_batch(const backends::ImageRef &figure, const std::vector<std::string> &names,
                                       const AlignOptions &options, int concurrency) const;

  private:
    std::shared_ptr<backends::Gateway> gateway_;
};

} // namespace figver::alignment
