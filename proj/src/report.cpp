#include "dkd/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;

namespace dkd {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Markdown helpers for the merge digest
// ---------------------------------------------------------------------------

std::vector<std::vector<std::string>> parse_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("report: cannot open " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(std::move(cells));
  }
  return rows;
}

void md_table(std::ostringstream& out, const std::vector<std::vector<std::string>>& rows) {
  if (rows.empty()) return;
  out << "|";
  for (const std::string& h : rows[0]) out << " " << h << " |";
  out << "\n|";
  for (std::size_t i = 0; i < rows[0].size(); ++i) out << " --- |";
  out << "\n";
  for (std::size_t r = 1; r < rows.size(); ++r) {
    out << "|";
    for (std::size_t c = 0; c < rows[0].size(); ++c)
      out << " " << (c < rows[r].size() ? rows[r][c] : "") << " |";
    out << "\n";
  }
}

}  // namespace

std::string census_table_csv(const std::vector<StreamCensus>& cells) {
  struct Line {
    int samples = -1;
    std::map<std::string, const CensusRow*> by_mode;
  };
  std::vector<std::string> order;  // first-seen stream order
  std::map<std::string, Line> lines;
  for (const StreamCensus& c : cells) {
    if (c.mode != "ri" && c.mode != "kd" && c.mode != "dkd")
      throw std::invalid_argument("census_table_csv: unknown mode '" + c.mode + "'");
    Line& l = lines[c.row.stream];
    if (l.samples < 0) {
      l.samples = c.row.samples;
      order.push_back(c.row.stream);
    } else if (l.samples != c.row.samples) {
      throw std::invalid_argument("census_table_csv: sample counts disagree on stream '" +
                                  c.row.stream + "'");
    }
    if (!l.by_mode.emplace(c.mode, &c.row).second)
      throw std::invalid_argument("census_table_csv: duplicate mode '" + c.mode +
                                  "' on stream '" + c.row.stream + "'");
  }

  std::ostringstream out;
  out << "stream,samples,kd,kd*,dkd,dkd*,ri,ri*\n";
  for (const std::string& stream : order) {
    const Line& l = lines[stream];
    out << stream << "," << l.samples;
    for (const char* mode : {"kd", "dkd", "ri"}) {
      const auto it = l.by_mode.find(mode);
      if (it == l.by_mode.end()) {
        out << ",,";
      } else {
        out << "," << it->second->failed_plain << "," << it->second->failed_boosted;
      }
    }
    out << "\n";
  }
  return out.str();
}

std::string lss_report_json(const LSSReport& report, double zeta) {
  nlohmann::ordered_json j;
  j["zeta"] = zeta;
  j["per_member"] = nlohmann::ordered_json::array();
  for (const MarginResult& m : report.per_member)
    j["per_member"].push_back({{"lss", m.lss}, {"separable", m.separable}});
  j["ensemble_lss"] = report.ensemble_lss;
  j["subsampled_to"] = report.subsampled_to;
  return j.dump(2) + "\n";
}

std::string protocol_table_csv(const std::vector<ProtocolRow>& rows) {
  std::ostringstream out;
  out << "protocol,attack,epsilon,mode,ref,plain,boosted\n";
  for (const ProtocolRow& r : rows) {
    out << r.protocol << "," << r.attack << "," << fmt(r.epsilon) << "," << r.mode << ",";
    if (r.ref_accuracy >= 0.0) out << fmt(r.ref_accuracy);
    out << "," << fmt(r.plain_accuracy) << "," << fmt(r.boosted_accuracy) << "\n";
  }
  return out.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out << "zeta,ensemble_lss,all_separable,plain_accuracy,boosted_accuracy\n";
  for (const SweepRow& r : rows)
    out << fmt(r.zeta) << "," << fmt(r.ensemble_lss) << "," << (r.all_separable ? 1 : 0)
        << "," << fmt(r.plain_accuracy) << "," << fmt(r.boosted_accuracy) << "\n";
  return out.str();
}

std::string merge_report_markdown(const std::string& run_dir, int* found) {
  if (found) *found = 0;
  if (!fs::is_directory(run_dir)) {
    if (found) *found = 0;
    return "nothing to report: " + run_dir + " is not a directory\n";
  }

  // Deterministic artifact order: sorted paths, known names only.
  std::vector<fs::path> configs, lss, csvs, histories;
  std::vector<fs::path> all;
  for (const auto& e : fs::recursive_directory_iterator(run_dir))
    if (e.is_regular_file()) all.push_back(e.path());
  std::sort(all.begin(), all.end());
  for (const fs::path& p : all) {
    const std::string name = p.filename().string();
    if (name == "config.json") configs.push_back(p);
    else if (name == "lss.json") lss.push_back(p);
    else if (name == "census.csv" || name == "protocols.csv" || name == "sweep.csv")
      csvs.push_back(p);
    else if (name.rfind("member_", 0) == 0 && name.size() > 11 &&
             name.substr(name.size() - 12) == "_history.csv")
      histories.push_back(p);
  }

  int n = 0;
  std::ostringstream out;
  out << "# Run report: " << fs::path(run_dir).filename().string() << "\n";

  for (const fs::path& p : configs) {
    ++n;
    nlohmann::json j;
    std::ifstream(p) >> j;
    out << "\n## Configuration (" << fs::relative(p, run_dir).string() << ")\n\n";
    const auto t = j.value("train", nlohmann::json::object());
    out << "- mode `" << t.value("mode", "?") << "`, arch `" << t.value("arch", "?")
        << "`, dataset `" << t.value("dataset", "?") << "`\n";
    out << "- members " << t.value("ensemble_size", 0) << ", epochs " << t.value("epochs", 0)
        << ", zeta " << fmt(t.value("zeta", 0.0)) << ", seed " << t.value("seed", 0ULL)
        << "\n";
    const auto a = j.value("attack", nlohmann::json::object());
    out << "- attack `" << a.value("kind", "?") << "`, epsilon "
        << fmt(a.value("epsilon", 0.0)) << ", boost_n " << j.value("boost_n", 0) << "\n";
  }

  if (!histories.empty()) {
    out << "\n## Training\n\n";
    std::vector<std::vector<std::string>> table{
        {"member", "epochs", "final train acc", "final val acc"}};
    for (const fs::path& p : histories) {
      ++n;
      const auto rows = parse_csv(p);
      if (rows.size() < 2) continue;  // header only: zero-epoch run
      const auto& last = rows.back();
      const std::string stem = p.filename().string();
      table.push_back({stem.substr(7, stem.size() - 7 - 12),
                       std::to_string(rows.size() - 1), last.size() > 4 ? last[4] : "",
                       last.size() > 5 ? last[5] : ""});
    }
    md_table(out, table);
  }

  for (const fs::path& p : lss) {
    ++n;
    nlohmann::json j;
    std::ifstream(p) >> j;
    out << "\n## Latent separation (" << fs::relative(p, run_dir).string() << ")\n\n";
    out << "- ensemble lss " << fmt(j.value("ensemble_lss", 0.0)) << " at zeta "
        << fmt(j.value("zeta", 0.0)) << "\n";
    int i = 0;
    for (const auto& m : j.value("per_member", nlohmann::json::array()))
      out << "- member " << i++ << ": lss " << fmt(m.value("lss", 0.0))
          << (m.value("separable", false) ? "" : " (not separable)") << "\n";
  }

  for (const fs::path& p : csvs) {
    ++n;
    out << "\n## " << p.filename().stem().string() << " ("
        << fs::relative(p, run_dir).string() << ")\n\n";
    md_table(out, parse_csv(p));
  }

  if (found) *found = n;
  if (n == 0) return "nothing to report: no artifacts under " + run_dir + "\n";
  return out.str();
}

}  // namespace dkd
