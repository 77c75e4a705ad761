// results.csv, summary.md and per-axis SVG charts for campaign records.

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <map>

#include "axfault/campaign.hpp"
#include "axfault/error.hpp"
#include "binary_io.hpp"

namespace axfault {

namespace {

constexpr std::string_view kAxes[] = {"model",          "dataset", "engine",     "multiplier",
                                      "fault_kind",     "bit",     "percent_faulty", "layer",
                                      "array_size",     "seed"};

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string opt_num(const std::optional<double>& v) {
  return v ? fmt::format("{:.4f}", *v) : std::string();
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

double to_double(const std::string& s, std::size_t line) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError(fmt::format("results line {}: '{}' is not a number", line, s));
  }
  return v;
}

template <class T>
T to_integer(const std::string& s, std::size_t line) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError(fmt::format("results line {}: '{}' is not an integer", line, s));
  }
  return v;
}

std::string axis_value(const CampaignRecord& r, std::string_view axis) {
  if (axis == "model") return r.model;
  if (axis == "dataset") return r.dataset;
  if (axis == "engine") return r.engine;
  if (axis == "multiplier") return r.multiplier;
  if (axis == "fault_kind") return r.fault_kind;
  if (axis == "bit") return std::to_string(r.bit);
  if (axis == "percent_faulty") return fmt::format("{:g}", r.percent_faulty);
  if (axis == "layer") return r.layer;
  if (axis == "array_size") return std::to_string(r.array_size);
  if (axis == "seed") return std::to_string(r.seed);
  throw InvalidArgument(fmt::format("unknown axis '{}'", axis));
}

std::vector<std::string> distinct(const std::vector<CampaignRecord>& records, std::string_view axis) {
  std::vector<std::string> out;
  for (const auto& r : records) {
    auto v = axis_value(r, axis);
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(std::move(v));
  }
  return out;
}

struct Mean {
  double sum = 0.0;
  std::size_t n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> value() const {
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

std::string cell(const std::optional<double>& v) { return v ? fmt::format("{:.2f}", *v) : "-"; }

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string results_csv(const std::vector<CampaignRecord>& records) {
  std::string out(kResultsHeader);
  out += '\n';
  for (const auto& r : records) {
    const bool ok = !r.failed();
    out += fmt::format("{},{},{},{},{:.6f},{},{},{:g},{},{},{},{},{},{},{},{},{:.3f}\n",
                       csv_field(r.model), csv_field(r.dataset), r.engine,
                       csv_field(r.multiplier), r.mae_percent, r.fault_kind, r.bit,
                       r.percent_faulty, r.layer, r.array_size, r.seed,
                       ok ? fmt::format("{:.4f}", r.baseline_acc) : "",
                       ok ? fmt::format("{:.4f}", r.faulty_acc) : "",
                       ok ? fmt::format("{:.4f}", r.acc_loss) : "", opt_num(r.mitigated_acc),
                       opt_num(r.energy_pj), r.wall_time_ms);
  }
  return out;
}

std::vector<CampaignRecord> parse_results_csv(std::string_view text) {
  std::vector<CampaignRecord> out;
  std::size_t line_no = 0;
  bool header = true;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (header) {
      if (line != kResultsHeader) throw FormatError("results.csv has an unexpected header");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 17) {
      throw FormatError(fmt::format("results line {}: expected 17 fields, got {}", line_no, f.size()));
    }
    CampaignRecord r;
    r.model = f[0];
    r.dataset = f[1];
    r.engine = f[2];
    r.multiplier = f[3];
    r.mae_percent = to_double(f[4], line_no);
    r.fault_kind = f[5];
    r.bit = to_integer<int>(f[6], line_no);
    r.percent_faulty = to_double(f[7], line_no);
    r.layer = f[8];
    r.array_size = to_integer<std::size_t>(f[9], line_no);
    r.seed = to_integer<std::uint64_t>(f[10], line_no);
    if (f[11].empty() || f[12].empty()) {
      r.error = "failed cell";
    } else {
      r.baseline_acc = to_double(f[11], line_no);
      r.faulty_acc = to_double(f[12], line_no);
      r.acc_loss = f[13].empty() ? r.baseline_acc - r.faulty_acc : to_double(f[13], line_no);
    }
    if (!f[14].empty()) r.mitigated_acc = to_double(f[14], line_no);
    if (!f[15].empty()) r.energy_pj = to_double(f[15], line_no);
    r.wall_time_ms = to_double(f[16], line_no);
    out.push_back(std::move(r));
  }
  if (header) throw FormatError("results.csv is empty");
  return out;
}

std::vector<CampaignRecord> load_results_csv(const std::filesystem::path& path) {
  return parse_results_csv(detail::read_text(path));
}

std::vector<std::string> swept_axes(const std::vector<CampaignRecord>& records) {
  std::vector<std::string> out;
  for (auto axis : kAxes) {
    if (distinct(records, axis).size() > 1) out.emplace_back(axis);
  }
  return out;
}

std::vector<RankEntry> accuracy_ranking(const std::vector<CampaignRecord>& records) {
  std::vector<RankEntry> out;
  for (const auto& m : distinct(records, "multiplier")) {
    Mean acc;
    for (const auto& r : records) {
      if (r.multiplier == m && !r.failed()) acc.add(r.faulty_acc);
    }
    if (acc.value()) out.push_back({m, *acc.value()});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankEntry& a, const RankEntry& b) { return a.value > b.value; });
  return out;
}

std::vector<RankEntry> energy_ranking(const std::vector<CampaignRecord>& records) {
  std::vector<RankEntry> out;
  for (const auto& m : distinct(records, "multiplier")) {
    Mean e;
    for (const auto& r : records) {
      if (r.multiplier == m && r.energy_pj) e.add(*r.energy_pj);
    }
    if (e.value()) out.push_back({m, *e.value()});
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const RankEntry& a, const RankEntry& b) { return a.value < b.value; });
  return out;
}

std::string summary_markdown(const std::vector<CampaignRecord>& records) {
  std::string md = "# Campaign summary\n\n";
  const std::size_t failed = static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [](const auto& r) { return r.failed(); }));
  md += fmt::format("{} records, {} failed.\n\n", records.size(), failed);
  for (auto axis : {"model", "dataset"}) {
    const auto values = distinct(records, axis);
    std::string joined;
    for (const auto& v : values) joined += (joined.empty() ? "" : ", ") + v;
    md += fmt::format("- {}: {}\n", axis, joined);
  }
  md += "\nAccuracies are percentages averaged over the matching cells.\n\n";

  md += "## Multipliers\n\n";
  md += "| multiplier | mae_percent | baseline_acc | faulty_acc | acc_loss | mitigated_acc | energy_pj |\n";
  md += "|---|---|---|---|---|---|---|\n";
  for (const auto& m : distinct(records, "multiplier")) {
    Mean base, faulty, loss, mit, energy;
    double mae_pct = 0.0;
    for (const auto& r : records) {
      if (r.multiplier != m) continue;
      mae_pct = r.mae_percent;
      if (r.energy_pj) energy.add(*r.energy_pj);
      if (r.failed()) continue;
      base.add(r.baseline_acc);
      faulty.add(r.faulty_acc);
      loss.add(r.acc_loss);
      if (r.mitigated_acc) mit.add(*r.mitigated_acc);
    }
    md += fmt::format("| {} | {:.6f} | {} | {} | {} | {} | {} |\n", m, mae_pct, cell(base.value()),
                      cell(faulty.value()), cell(loss.value()), cell(mit.value()),
                      cell(energy.value()));
  }

  const auto acc_rank = accuracy_ranking(records);
  const auto energy_rank = energy_ranking(records);
  md += "\n## Ranking by accuracy under faults\n\nHighest mean faulty accuracy first.\n\n";
  for (std::size_t i = 0; i < acc_rank.size(); ++i) {
    md += fmt::format("{}. {} ({:.2f})\n", i + 1, acc_rank[i].multiplier, acc_rank[i].value);
  }
  md += "\n## Ranking by energy\n\nLowest energy per inference (pJ) first.\n\n";
  if (energy_rank.empty()) {
    md += "No energy table was supplied.\n";
  } else {
    for (std::size_t i = 0; i < energy_rank.size(); ++i) {
      md += fmt::format("{}. {} ({:.2f})\n", i + 1, energy_rank[i].multiplier,
                        energy_rank[i].value);
    }
    std::vector<std::string> a, e;
    for (const auto& r : acc_rank) {
      if (std::any_of(energy_rank.begin(), energy_rank.end(),
                      [&](const auto& x) { return x.multiplier == r.multiplier; })) {
        a.push_back(r.multiplier);
      }
    }
    for (const auto& r : energy_rank) e.push_back(r.multiplier);
    md += a == e ? "\nThe accuracy and energy rankings agree.\n"
                 : "\nThe accuracy and energy rankings disagree.\n";
  }

  for (const auto& axis : swept_axes(records)) {
    md += fmt::format("\n## By {}\n\n", axis);
    md += fmt::format("| {} | cells | baseline_acc | faulty_acc | acc_loss | mitigated_acc |\n",
                      axis);
    md += "|---|---|---|---|---|---|\n";
    for (const auto& v : distinct(records, axis)) {
      Mean base, faulty, loss, mit;
      std::size_t cells = 0;
      for (const auto& r : records) {
        if (axis_value(r, axis) != v) continue;
        ++cells;
        if (r.failed()) continue;
        base.add(r.baseline_acc);
        faulty.add(r.faulty_acc);
        loss.add(r.acc_loss);
        if (r.mitigated_acc) mit.add(*r.mitigated_acc);
      }
      md += fmt::format("| {} | {} | {} | {} | {} | {} |\n", v, cells, cell(base.value()),
                        cell(faulty.value()), cell(loss.value()), cell(mit.value()));
    }
  }

  if (failed > 0) {
    md += "\n## Failed cells\n\n";
    for (const auto& r : records) {
      if (!r.failed()) continue;
      md += fmt::format("- {} {} {}@{} {}% layer {} n={} seed {}: {}\n", r.engine, r.multiplier,
                        r.fault_kind, r.bit, r.percent_faulty, r.layer, r.array_size, r.seed,
                        r.error);
    }
  }
  return md;
}

std::string axis_chart_svg(const std::vector<CampaignRecord>& records, std::string_view axis) {
  static constexpr const char* kColors[] = {"#4269d0", "#efb118", "#ff725c", "#6cc5b0",
                                            "#3ca951", "#ff8ab7", "#a463f2", "#97bbf5"};
  const auto xs = distinct(records, axis);
  const bool by_multiplier = axis != "multiplier";
  const auto series = by_multiplier ? distinct(records, "multiplier")
                                    : std::vector<std::string>{"faulty_acc"};

  const double width = 720, height = 400, left = 60, right = 170, top = 40, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const double group_w = plot_w / static_cast<double>(xs.size());
  const double bar_w = group_w * 0.8 / static_cast<double>(series.size());

  std::string svg = fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" "
      "viewBox=\"0 0 {0} {1}\" font-family=\"sans-serif\" font-size=\"12\">\n",
      width, height);
  svg += fmt::format("<rect width=\"{}\" height=\"{}\" fill=\"white\"/>\n", width, height);
  svg += fmt::format("<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
                     "Faulty accuracy vs {}</text>\n",
                     left + plot_w / 2, xml_escape(axis));
  for (int tick = 0; tick <= 100; tick += 25) {
    const double y = top + plot_h * (1.0 - tick / 100.0);
    svg += fmt::format("<line x1=\"{}\" y1=\"{:.1f}\" x2=\"{}\" y2=\"{:.1f}\" stroke=\"#ddd\"/>\n",
                       left, y, left + plot_w, y);
    svg += fmt::format("<text x=\"{}\" y=\"{:.1f}\" text-anchor=\"end\">{}</text>\n", left - 6,
                       y + 4, tick);
  }
  svg += fmt::format("<text x=\"16\" y=\"{:.1f}\" transform=\"rotate(-90 16 {:.1f})\" "
                     "text-anchor=\"middle\">accuracy (%)</text>\n",
                     top + plot_h / 2, top + plot_h / 2);

  for (std::size_t xi = 0; xi < xs.size(); ++xi) {
    const double gx = left + group_w * static_cast<double>(xi) + group_w * 0.1;
    for (std::size_t si = 0; si < series.size(); ++si) {
      Mean acc;
      for (const auto& r : records) {
        if (r.failed() || axis_value(r, axis) != xs[xi]) continue;
        if (by_multiplier && r.multiplier != series[si]) continue;
        acc.add(r.faulty_acc);
      }
      if (!acc.value()) continue;
      const double v = std::clamp(*acc.value(), 0.0, 100.0);
      const double h = plot_h * v / 100.0;
      svg += fmt::format(
          "<rect x=\"{:.1f}\" y=\"{:.1f}\" width=\"{:.1f}\" height=\"{:.1f}\" fill=\"{}\">"
          "<title>{} {}: {:.2f}</title></rect>\n",
          gx + bar_w * static_cast<double>(si), top + plot_h - h, bar_w, h,
          kColors[si % std::size(kColors)], xml_escape(series[si]), xml_escape(xs[xi]), v);
    }
    svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n",
                       left + group_w * (static_cast<double>(xi) + 0.5), top + plot_h + 18,
                       xml_escape(xs[xi]));
  }
  svg += fmt::format("<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n",
                     left, top + plot_h, left + plot_w);
  svg += fmt::format("<text x=\"{:.1f}\" y=\"{:.1f}\" text-anchor=\"middle\">{}</text>\n",
                     left + plot_w / 2, height - 16, xml_escape(axis));
  for (std::size_t si = 0; si < series.size(); ++si) {
    const double y = top + 10 + 20.0 * static_cast<double>(si);
    svg += fmt::format("<rect x=\"{}\" y=\"{:.1f}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
                       left + plot_w + 16, y, kColors[si % std::size(kColors)]);
    svg += fmt::format("<text x=\"{}\" y=\"{:.1f}\">{}</text>\n", left + plot_w + 34, y + 10,
                       xml_escape(series[si]));
  }
  svg += "</svg>\n";
  return svg;
}

std::vector<std::filesystem::path> emit_report(const std::vector<CampaignRecord>& records,
                                               const std::filesystem::path& out_dir) {
  if (records.empty()) throw InvalidArgument("no campaign records to report");
  std::vector<std::filesystem::path> written;
  auto write = [&](const std::string& name, const std::string& text) {
    const auto path = out_dir / name;
    detail::write_text(path, text);
    written.push_back(path);
  };
  write("results.csv", results_csv(records));
  write("summary.md", summary_markdown(records));
  for (const auto& axis : swept_axes(records)) {
    write("accuracy_" + axis + ".svg", axis_chart_svg(records, axis));
  }
  return written;
}

}  // namespace axfault
