#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "featflow/corpus.hpp"
#include "featflow/flow.hpp"
#include "featflow/merge.hpp"

namespace featflow::report {

using nlohmann::json;

/// Columns: t, acc_a, acc_b, loss_a, loss_b, base_acc_a, base_acc_b (empty when absent).
std::string sweep_csv(const merge::SweepResult& sweep);
merge::SweepResult sweep_from_csv(const std::string& csv);

/// "58%" style rendering of an interpolation fraction.
std::string percent(double t);

/// Accuracy-versus-t curves as a self-contained SVG page, with base
/// accuracies as dashed lines and t_star marked when given.
std::string sweep_html(const merge::SweepResult& sweep, const std::string& name_a,
                       const std::string& name_b, std::optional<double> t_star = std::nullopt);

// ---------------------------------------------------------------------------
// Sankey export
//
//   {"schema": "featflow.sankey/1",
//    "nodes": [{"id": string, "features": int|null}],
//    "links": [{"source": node id, "target": node id, "value": persisting pairs,
//               "emerging": int, "disappearing": int}],
//    "summary": {"base_persisting_any": int, "merged_traced_to_finetunes": int,
//                "merged_traced_to_base": int, "merged_emerged_in_finetunes": int}}
//
// Link values are persisting-pair counts, so widths scale with them.
// ---------------------------------------------------------------------------

inline constexpr const char* kSankeySchema = "featflow.sankey/1";

json sankey_json(const flow::FlowGraph& graph);
/// Throws ContractViolation naming the first schema violation.
void validate_sankey(const json& j);
/// Self-contained SVG Sankey-style diagram, no scripts.
std::string sankey_html(const json& sankey);

// ---------------------------------------------------------------------------
// Feature report
// ---------------------------------------------------------------------------

struct FeatureAnnotation {
  std::string label;  // e.g. "best match in ft_code"
  std::optional<double> correlation;
};

struct FeatureReportInput {
  std::string model_id;
  std::size_t feature = 0;
  std::size_t window_start = 0;
  std::size_t window_len = 0;
  std::vector<FeatureAnnotation> annotations;
  std::string explanation;  // optional autointerp text
};

/// Tokens of the window as spans; background alpha is activation / feature
/// max over the whole row, zero activations carry no highlight. Throws
/// UndefinedMetric for a dead feature.
std::string render_feature_report(const flow::SparseRow& row, std::span<const TokenId> tokens,
                                  const Tokenizer& tokenizer, const FeatureReportInput& input);

/// Start of the window of length `len` centred on the row's maximum.
std::size_t window_around_max(const flow::SparseRow& row, std::size_t n_tokens, std::size_t len);

std::string html_escape(std::string_view s);

}  // namespace featflow::report
