// CSV emission for every report the lab produces, plus a small reader used
// by tests and downstream tooling. Real values are printed with 6
// significant digits; files are written to a temporary name and renamed.
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "aclip/defense.hpp"
#include "aclip/error.hpp"
#include "aclip/eval.hpp"

namespace aclip {

inline std::string fmt_g6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline void atomic_write_text(const std::string& path, const std::string& body) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("cannot write '" + tmp + "'");
    out << body;
    if (!out.good()) throw data_error("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec)
    throw data_error("cannot rename '" + tmp + "' to '" + path + "': " +
                     ec.message());
}

inline void emit_csv(const EvalReport& report, const std::string& path) {
  std::ostringstream os;
  os << "clean_acc,asr,n_clean,n_poison";
  for (std::size_t c = 0; c < report.per_class_accuracy.size(); ++c)
    os << ",acc_class_" << c;
  os << ",fingerprint\n";
  os << fmt_g6(report.clean_accuracy) << "," << fmt_g6(report.asr) << ","
     << report.n_clean << "," << report.n_poison;
  for (double acc : report.per_class_accuracy) os << "," << fmt_g6(acc);
  os << "," << report.fingerprint << "\n";
  atomic_write_text(path, os.str());
}

inline void emit_csv(const NeuronShiftTable& table, const std::string& path) {
  std::ostringstream os;
  os << "layer,unit,clean_mean,clean_std,poison_mean,score,flagged\n";
  for (const auto& row : table.rows)
    os << row.layer << "," << row.unit << "," << fmt_g6(row.clean_mean) << ","
       << fmt_g6(row.clean_std) << "," << fmt_g6(row.poison_mean) << ","
       << fmt_g6(row.score) << "," << (row.flagged ? 1 : 0) << "\n";
  atomic_write_text(path, os.str());
}

// PCA rows are emitted next to the provenance tag of each projected sample.
inline void emit_csv(const PcaProjection& projection,
                     const std::vector<Provenance>& provenance,
                     const std::string& path) {
  if (projection.coords.size() != provenance.size())
    throw config_error("pca csv: provenance count mismatch");
  std::ostringstream os;
  os << "sample_id,provenance";
  for (std::size_t k = 0; k < projection.dims; ++k) os << ",pc" << (k + 1);
  os << "\n";
  for (std::size_t i = 0; i < projection.coords.size(); ++i) {
    os << i << "," << provenance_name(provenance[i]);
    for (double c : projection.coords[i]) os << "," << fmt_g6(c);
    os << "\n";
  }
  atomic_write_text(path, os.str());
}

inline void emit_csv(const TightenLog& log, const std::string& path) {
  std::ostringstream os;
  os << "step,loss,ce,sigma_l1,alpha,val_acc,accepted\n";
  for (const auto& s : log.steps)
    os << s.step << "," << fmt_g6(s.loss) << "," << fmt_g6(s.ce) << ","
       << fmt_g6(s.sigma_l1) << "," << fmt_g6(s.alpha) << ","
       << fmt_g6(s.val_acc) << "," << (s.accepted ? 1 : 0) << "\n";
  atomic_write_text(path, os.str());
}

struct SweepRow {
  std::string z;  // "max" or a numeric z-score
  double acc = 0.0;
  double asr = 0.0;
};

inline void emit_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ostringstream os;
  os << "z,acc,asr\n";
  for (const auto& row : rows)
    os << row.z << "," << fmt_g6(row.acc) << "," << fmt_g6(row.asr) << "\n";
  atomic_write_text(path, os.str());
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw data_error("csv column '" + name + "' not found");
  }
  double number(std::size_t row, const std::string& name) const {
    return std::stod(rows.at(row).at(column(name)));
  }
};

inline CsvTable parse_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open '" + path + "'");
  CsvTable table;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (first) {
      table.header = std::move(cells);
      first = false;
    } else {
      table.rows.push_back(std::move(cells));
    }
  }
  return table;
}

}  // namespace aclip
