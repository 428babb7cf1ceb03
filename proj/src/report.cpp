#include "featflow/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

namespace featflow::report {

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

std::string sweep_csv(const merge::SweepResult& s) {
  s.validate();
  std::string out = "t,acc_a,acc_b,loss_a,loss_b,base_acc_a,base_acc_b\n";
  for (std::size_t i = 0; i < s.grid.size(); ++i) {
    out += num(s.grid[i]) + "," + num(s.acc_a[i]) + "," + num(s.acc_b[i]) + "," +
           (s.loss_a.empty() ? "" : num(s.loss_a[i])) + "," +
           (s.loss_b.empty() ? "" : num(s.loss_b[i])) + "," +
           (s.base_acc_a ? num(*s.base_acc_a) : "") + "," +
           (s.base_acc_b ? num(*s.base_acc_b) : "") + "\n";
  }
  return out;
}

merge::SweepResult sweep_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line.rfind("t,acc_a,acc_b", 0) != 0) {
    throw IoError("sweep table lacks its header row");
  }
  merge::SweepResult s;
  auto parse = [](const std::string& f) {
    try {
      std::size_t used = 0;
      const double v = std::stod(f, &used);
      if (used != f.size()) throw std::invalid_argument(f);
      return v;
    } catch (const std::exception&) {
      throw IoError("sweep table has a malformed number '" + f + "'");
    }
  };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line, ',');
    if (f.size() != 7) throw IoError("sweep table row has " + std::to_string(f.size()) + " fields");
    s.grid.push_back(parse(f[0]));
    s.acc_a.push_back(parse(f[1]));
    s.acc_b.push_back(parse(f[2]));
    if (!f[3].empty()) s.loss_a.push_back(parse(f[3]));
    if (!f[4].empty()) s.loss_b.push_back(parse(f[4]));
    if (!f[5].empty()) s.base_acc_a = parse(f[5]);
    if (!f[6].empty()) s.base_acc_b = parse(f[6]);
  }
  try {
    s.validate();
  } catch (const ContractViolation& e) {
    throw IoError(std::string("sweep table is inconsistent: ") + e.what());
  }
  return s;
}

std::string percent(double t) {
  return std::to_string(static_cast<long>(std::floor(100.0 * t + 0.5))) + "%";
}

std::string sweep_html(const merge::SweepResult& s, const std::string& name_a,
                       const std::string& name_b, std::optional<double> t_star) {
  s.validate();
  const double w = 640, h = 360, m = 50;
  auto x = [&](double t) { return m + t * (w - 2 * m); };
  auto y = [&](double a) { return h - m - a * (h - 2 * m); };
  auto curve = [&](const std::vector<double>& acc, const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < s.grid.size(); ++i) {
      pts += (i ? " " : "") + fixed(x(s.grid[i]), 1) + "," + fixed(y(acc[i]), 1);
    }
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"2\" points=\"" +
           pts + "\"/>\n";
  };
  auto hline = [&](std::optional<double> a, const char* color) {
    if (!a) return std::string();
    return "<line x1=\"" + fixed(x(0), 1) + "\" x2=\"" + fixed(x(1), 1) + "\" y1=\"" + fixed(y(*a), 1) +
           "\" y2=\"" + fixed(y(*a), 1) + "\" stroke=\"" + color + "\" stroke-dasharray=\"5,4\"/>\n";
  };
  std::string svg = "<rect x=\"" + fixed(m, 0) + "\" y=\"" + fixed(m, 0) + "\" width=\"" +
                    fixed(w - 2 * m, 0) + "\" height=\"" + fixed(h - 2 * m, 0) +
                    "\" fill=\"none\" stroke=\"#999\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    svg += "<text x=\"" + fixed(m - 6, 0) + "\" y=\"" + fixed(y(k / 4.0) + 4, 1) +
           "\" text-anchor=\"end\" font-size=\"11\">" + fixed(k / 4.0, 2) + "</text>\n";
    svg += "<text x=\"" + fixed(x(k / 4.0), 1) + "\" y=\"" + fixed(h - m + 16, 0) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + percent(k / 4.0) + "</text>\n";
  }
  svg += curve(s.acc_a, "#c0392b") + curve(s.acc_b, "#2471a3");
  svg += hline(s.base_acc_a, "#c0392b") + hline(s.base_acc_b, "#2471a3");
  if (t_star) {
    svg += "<line x1=\"" + fixed(x(*t_star), 1) + "\" x2=\"" + fixed(x(*t_star), 1) + "\" y1=\"" +
           fixed(m, 0) + "\" y2=\"" + fixed(h - m, 0) + "\" stroke=\"#555\"/>\n<text x=\"" +
           fixed(x(*t_star) + 4, 1) + "\" y=\"" + fixed(m + 14, 0) + "\" font-size=\"12\">t* = " +
           percent(*t_star) + "</text>\n";
  }
  return "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Merge sweep</title></head>"
         "<body style=\"font-family:sans-serif;margin:2em\">\n<h1>Merge sweep</h1>\n<p>"
         "<span style=\"color:#c0392b\">" + html_escape(name_a) + "</span> and <span style=\"color:#2471a3\">" +
         html_escape(name_b) + "</span> next-token accuracy along the interpolation path; dashed lines "
         "show the base model.</p>\n<svg width=\"" + fixed(w, 0) + "\" height=\"" + fixed(h, 0) +
         "\" xmlns=\"http://www.w3.org/2000/svg\">\n" + svg + "</svg>\n</body></html>\n";
}

// ---------------------------------------------------------------------------

json sankey_json(const flow::FlowGraph& g) {
  if (g.nodes.empty()) throw ContractViolation("flow graph has no nodes");
  for (const auto& e : g.edges) {
    if (std::find(g.nodes.begin(), g.nodes.end(), e.parent) == g.nodes.end() ||
        std::find(g.nodes.begin(), g.nodes.end(), e.child) == g.nodes.end()) {
      throw ContractViolation("flow edge " + e.parent + " -> " + e.child + " names an unknown node");
    }
  }
  std::map<std::string, std::size_t> features;
  for (const auto& e : g.edges) {
    features.emplace(e.parent, e.persisting_parents + e.disappearing + e.dead_parent);
    features.emplace(e.child, e.persisting_children + e.emerging + e.dead_child);
  }
  json nodes = json::array();
  for (const auto& n : g.nodes) {
    auto it = features.find(n);
    nodes.push_back({{"id", n}, {"features", it == features.end() ? json(nullptr) : json(it->second)}});
  }
  json links = json::array();
  for (const auto& e : g.edges) {
    links.push_back({{"source", e.parent},
                     {"target", e.child},
                     {"value", e.persisting},
                     {"emerging", e.emerging},
                     {"disappearing", e.disappearing}});
  }
  const auto from_ft = g.traced_to_finetunes.size();
  const auto from_base = g.traced_to_base.size();
  return {{"schema", kSankeySchema},
          {"nodes", nodes},
          {"links", links},
          {"summary",
           {{"base_persisting_any", g.base_persisting_any},
            {"merged_traced_to_finetunes", from_ft},
            {"merged_traced_to_base", from_base},
            {"merged_emerged_in_finetunes", from_ft >= from_base ? from_ft - from_base : 0}}}};
}

void validate_sankey(const json& j) {
  auto fail = [](const std::string& why) { throw ContractViolation("sankey export: " + why); };
  auto count = [&](const json& obj, const char* key, bool nullable) {
    if (!obj.contains(key)) fail(std::string("missing '") + key + "'");
    const auto& v = obj.at(key);
    if (nullable && v.is_null()) return;
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(std::string("'") + key + "' must be a non-negative integer");
    }
  };
  if (!j.is_object()) fail("top level must be an object");
  for (const auto& [k, v] : j.items()) {
    if (k != "schema" && k != "nodes" && k != "links" && k != "summary") fail("unexpected key '" + k + "'");
  }
  if (j.value("schema", "") != kSankeySchema) fail("schema must be " + std::string(kSankeySchema));
  if (!j.contains("nodes") || !j["nodes"].is_array() || j["nodes"].empty()) fail("nodes must be a nonempty array");
  std::set<std::string> ids;
  for (const auto& n : j["nodes"]) {
    if (!n.is_object() || !n.contains("id") || !n["id"].is_string()) fail("node without a string id");
    if (!ids.insert(n["id"].get<std::string>()).second) fail("duplicate node id " + n["id"].dump());
    count(n, "features", true);
    if (n.size() != 2) fail("node " + n["id"].dump() + " has extra keys");
  }
  if (!j.contains("links") || !j["links"].is_array()) fail("links must be an array");
  for (const auto& l : j["links"]) {
    if (!l.is_object()) fail("link must be an object");
    for (const char* end : {"source", "target"}) {
      if (!l.contains(end) || !l[end].is_string() || !ids.count(l[end].get<std::string>())) {
        fail(std::string("link ") + end + " must name a node");
      }
    }
    if (l["source"] == l["target"]) fail("self-loop link");
    count(l, "value", false);
    count(l, "emerging", false);
    count(l, "disappearing", false);
    if (l.size() != 5) fail("link has extra keys");
  }
  if (!j.contains("summary") || !j["summary"].is_object()) fail("summary must be an object");
  for (const char* k : {"base_persisting_any", "merged_traced_to_finetunes", "merged_traced_to_base",
                        "merged_emerged_in_finetunes"}) {
    count(j["summary"], k, false);
  }
  const auto& s = j["summary"];
  if (s["merged_traced_to_base"].get<std::size_t>() > s["merged_traced_to_finetunes"].get<std::size_t>() ||
      s["merged_traced_to_base"].get<std::size_t>() + s["merged_emerged_in_finetunes"].get<std::size_t>() !=
          s["merged_traced_to_finetunes"].get<std::size_t>()) {
    fail("summary counts do not add up");
  }
}

std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string sankey_html(const json& sankey) {
  validate_sankey(sankey);
  const auto& nodes = sankey["nodes"];
  const auto& links = sankey["links"];
  // Columns: lineage depth (roots at 0).
  std::map<std::string, int> depth;
  for (const auto& n : nodes) depth[n["id"]] = 0;
  for (std::size_t pass = 0; pass < nodes.size(); ++pass) {
    for (const auto& l : links) {
      depth[l["target"]] = std::max(depth[l["target"]], depth[l["source"]] + 1);
    }
  }
  std::map<int, std::vector<std::string>> columns;
  for (const auto& n : nodes) columns[depth[n["id"]]].push_back(n["id"]);
  const double width = 760, height = 420, node_w = 18, margin = 60;
  const int n_cols = static_cast<int>(columns.size());
  std::map<std::string, std::pair<double, double>> pos;  // node -> (x, y centre)
  for (const auto& [col, ids] : columns) {
    const double x = margin + (n_cols == 1 ? 0 : col * (width - 2 * margin - node_w) / (n_cols - 1));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      pos[ids[i]] = {x, height * (i + 1.0) / (ids.size() + 1.0)};
    }
  }
  double max_value = 1;
  for (const auto& l : links) max_value = std::max(max_value, l["value"].get<double>());

  std::string svg;
  for (const auto& l : links) {
    const auto [x0, y0] = pos[l["source"]];
    const auto [x1, y1] = pos[l["target"]];
    const double w = std::max(1.0, 60.0 * l["value"].get<double>() / max_value);
    const double xs = x0 + node_w, mid = (xs + x1) / 2;
    svg += "<path class=\"link\" d=\"M" + fixed(xs, 1) + "," + fixed(y0, 1) + " C" + fixed(mid, 1) +
           "," + fixed(y0, 1) + " " + fixed(mid, 1) + "," + fixed(y1, 1) + " " + fixed(x1, 1) + "," +
           fixed(y1, 1) + "\" stroke-width=\"" + fixed(w, 2) + "\"><title>" +
           html_escape(l["source"].get<std::string>()) + " → " +
           html_escape(l["target"].get<std::string>()) + ": " + l["value"].dump() +
           " persisting, " + l["emerging"].dump() + " emerging, " + l["disappearing"].dump() +
           " disappearing</title></path>\n";
    svg += "<text class=\"value\" x=\"" + fixed(mid, 1) + "\" y=\"" + fixed((y0 + y1) / 2 - 4, 1) +
           "\">" + l["value"].dump() + "</text>\n";
  }
  for (const auto& n : nodes) {
    const auto [x, y] = pos[n["id"]];
    const std::string id = html_escape(n["id"].get<std::string>());
    svg += "<rect class=\"node\" x=\"" + fixed(x, 1) + "\" y=\"" + fixed(y - 40, 1) + "\" width=\"" +
           fixed(node_w, 0) + "\" height=\"80\"/>\n<text class=\"label\" x=\"" + fixed(x + node_w / 2, 1) +
           "\" y=\"" + fixed(y + 58, 1) + "\">" + id +
           (n["features"].is_null() ? "" : " (" + n["features"].dump() + ")") + "</text>\n";
  }
  const auto& s = sankey["summary"];
  std::string out =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Feature flow</title>\n"
      "<style>body{font-family:sans-serif;margin:2em}.link{fill:none;stroke:#4a7fb5;"
      "stroke-opacity:.45}.node{fill:#333}.label{font-size:13px;text-anchor:middle}"
      ".value{font-size:11px;text-anchor:middle;fill:#224}</style></head><body>\n"
      "<h1>Feature flow</h1>\n<svg width=\"" + fixed(width, 0) + "\" height=\"" + fixed(height, 0) +
      "\" xmlns=\"http://www.w3.org/2000/svg\">\n" + svg + "</svg>\n<ul class=\"summary\">\n";
  out += "<li>base features persisting into a fine-tuned model: " + s["base_persisting_any"].dump() + "</li>\n";
  out += "<li>merged features traced to a fine-tuned model: " + s["merged_traced_to_finetunes"].dump() + "</li>\n";
  out += "<li>of which persisted from base: " + s["merged_traced_to_base"].dump() + "</li>\n";
  out += "<li>of which emerged during fine-tuning: " + s["merged_emerged_in_finetunes"].dump() + "</li>\n";
  out += "</ul>\n</body></html>\n";
  return out;
}

// ---------------------------------------------------------------------------

std::size_t window_around_max(const flow::SparseRow& row, std::size_t n_tokens, std::size_t len) {
  if (row.nnz() == 0 || len >= n_tokens) return 0;
  const auto k = static_cast<std::size_t>(std::max_element(row.value.begin(), row.value.end()) -
                                          row.value.begin());
  const std::size_t at = row.index[k];
  const std::size_t start = at > len / 2 ? at - len / 2 : 0;
  return std::min(start, n_tokens - len);
}

std::string render_feature_report(const flow::SparseRow& row, std::span<const TokenId> tokens,
                                  const Tokenizer& tokenizer, const FeatureReportInput& in) {
  if (row.nnz() == 0) {
    throw UndefinedMetric("feature " + std::to_string(in.feature) + " never fires; nothing to report");
  }
  if (in.window_start + in.window_len > tokens.size()) {
    throw ContractViolation("report window runs past the token stream");
  }
  const double max = *std::max_element(row.value.begin(), row.value.end());
  const std::string title = html_escape(in.model_id) + " feature " + std::to_string(in.feature);
  std::string out =
      "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>" + title +
      "</title>\n<style>body{font-family:sans-serif;margin:2em}.tokens{font-family:monospace;"
      "white-space:pre-wrap;line-height:1.8}.tok{border-radius:2px}</style></head><body>\n<h1>" +
      title + "</h1>\n<p class=\"meta\">max activation " + fixed(max, 4) + ", active on " +
      std::to_string(row.nnz()) + " of " + std::to_string(tokens.size()) + " tokens; window " +
      std::to_string(in.window_start) + "+" + std::to_string(in.window_len) + "</p>\n";
  if (!in.explanation.empty()) {
    out += "<p class=\"explanation\">" + html_escape(in.explanation) + "</p>\n";
  }
  if (!in.annotations.empty()) {
    out += "<ul class=\"annotations\">\n";
    for (const auto& a : in.annotations) {
      out += "<li>" + html_escape(a.label) +
             (a.correlation ? ": r = " + fixed(*a.correlation, 4) : std::string()) + "</li>\n";
    }
    out += "</ul>\n";
  }
  out += "<div class=\"tokens\">";
  auto it = std::lower_bound(row.index.begin(), row.index.end(), in.window_start);
  for (std::size_t t = in.window_start; t < in.window_start + in.window_len; ++t) {
    double a = 0.0;
    while (it != row.index.end() && *it < t) ++it;
    if (it != row.index.end() && *it == t) a = row.value[static_cast<std::size_t>(it - row.index.begin())];
    const TokenId id = tokens[t];
    std::string text = tokenizer.is_special(id)
                           ? (id == tokenizer.special().eos ? "⏎" : "∅")
                           : tokenizer.token_bytes(id);
    out += "<span class=\"tok\"";
    if (a > 0.0) {
      out += " title=\"" + fixed(a, 4) + "\" style=\"background:rgba(255,120,0," + fixed(a / max, 3) + ")\"";
    }
    out += ">" + html_escape(text) + "</span>";
  }
  out += "</div>\n</body></html>\n";
  return out;
}

}  // namespace featflow::report
