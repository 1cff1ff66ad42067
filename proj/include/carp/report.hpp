#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "carp/ablation.hpp"
#include "carp/eval.hpp"
#include "carp/trainer.hpp"

namespace carp {

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"epoch", m.epoch},
          {"loss",
           {{"consistency", m.loss.consistency},
            {"entropy_term", m.loss.entropy_term},
            {"total", m.loss.total},
            {"per_block_kl", m.loss.per_block_kl}}},
          {"max_assignment_fraction", m.max_assignment_fraction},
          {"prototype_usage_entropy", m.prototype_usage_entropy},
          {"block_max_fraction", m.block_max_fraction},
          {"lr", m.lr},
          {"eta", m.eta}};
}

inline nlohmann::json to_json(const EvalRecord& e) {
  return {{"epoch", e.epoch}, {"knn_student", e.knn_student}, {"knn_teacher", e.knn_teacher}};
}

inline nlohmann::json to_json(const ClusterMetrics& c) {
  return {{"nmi", c.nmi}, {"ami", c.ami}, {"ari", c.ari}};
}

/// Column order of ablation CSV files.
inline constexpr const char* kAblationCsvHeader =
    "suite,cell,parameter,value,seed,status,knn_student,knn_teacher,max_assignment_fraction,"
    "usage_entropy";

inline void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << kAblationCsvHeader << "\n";
  for (const auto& r : rows) {
    char nums[160];
    std::snprintf(nums, sizeof nums, "%.6f,%.6f,%.6f,%.6f", r.knn_student, r.knn_teacher,
                  r.max_assignment_fraction, r.usage_entropy);
    out << r.suite << "," << r.label << "," << r.parameter << "," << r.value << "," << r.seed
        << "," << (r.ok ? "ok" : "failed") << "," << nums << "\n";
  }
}

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// Bar chart of the per-cell median student k-NN accuracy, one dot per seed.
inline std::string ablation_svg(const std::string& suite, const std::vector<AblationRow>& rows) {
  std::vector<std::string> cells;
  std::map<std::string, std::vector<double>> values;
  for (const auto& r : rows) {
    if (std::find(cells.begin(), cells.end(), r.label) == cells.end()) cells.push_back(r.label);
    if (r.ok) values[r.label].push_back(r.knn_student);
  }
  const double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 70;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - std::clamp(v, 0.0, 1.0)); };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n"
      << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
      << detail::xml_escape(suite) << ": median k-NN accuracy</text>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    svg << "<line x1=\"" << left << "\" y1=\"" << y_of(v) << "\" x2=\"" << width - right
        << "\" y2=\"" << y_of(v) << "\" stroke=\"#ddd\"/>\n"
        << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << detail::fmt(v) << "</text>\n";
  }
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << width - right
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";

  const double slot = cells.empty() ? plot_w : plot_w / static_cast<double>(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const double cx = left + slot * (static_cast<double>(i) + 0.5);
    const auto& vals = values[cells[i]];
    if (!vals.empty()) {
      const double m = median(vals);
      svg << "<rect x=\"" << cx - slot * 0.3 << "\" y=\"" << y_of(m) << "\" width=\"" << slot * 0.6
          << "\" height=\"" << top + plot_h - y_of(m) << "\" fill=\"#4a78b5\"/>\n"
          << "<text x=\"" << cx << "\" y=\"" << y_of(m) - 6
          << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::fmt(m) << "</text>\n";
      for (double v : vals)
        svg << "<circle cx=\"" << cx << "\" cy=\"" << y_of(v)
            << "\" r=\"3\" fill=\"#e07b39\" fill-opacity=\"0.8\"/>\n";
    } else {
      svg << "<text x=\"" << cx << "\" y=\"" << top + plot_h - 6
          << "\" text-anchor=\"middle\" font-size=\"11\" fill=\"red\">failed</text>\n";
    }
    svg << "<text x=\"" << cx << "\" y=\"" << top + plot_h + 20
        << "\" text-anchor=\"middle\" font-size=\"11\">" << detail::xml_escape(cells[i])
        << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace carp
