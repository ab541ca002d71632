#include "bil/metrics_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "bil/errors.hpp"

namespace bil {

namespace {

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::vector<MetricsRow> flatten_metrics(const std::vector<StageMetrics>& metrics) {
  std::vector<MetricsRow> rows;
  for (const auto& sm : metrics) {
    for (std::size_t e = 0; e < sm.epochs.size(); ++e) {
      rows.push_back(MetricsRow{sm.stage, static_cast<int>(e) + 1, sm.epochs[e].elbo,
                                sm.epochs[e].data_term, sm.epochs[e].kl_term, sm.test_accuracy,
                                sm.test_nll});
    }
  }
  return rows;
}

void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("cannot rename " + tmp + " to " + path);
  }
}

void write_metrics_rows(const std::vector<MetricsRow>& rows, const std::string& path,
                        MetricsFormat format) {
  if (rows.empty()) throw ConfigError("write_metrics: no records");
  std::ostringstream os;
  if (format == MetricsFormat::Csv) {
    os << "stage,epoch,elbo,data_term,kl_term,test_accuracy,test_nll\n";
    for (const auto& r : rows) {
      os << r.stage << ',' << r.epoch << ',' << fmt9(r.elbo) << ',' << fmt9(r.data_term) << ','
         << fmt9(r.kl_term) << ',' << fmt9(r.test_accuracy) << ',' << fmt9(r.test_nll) << '\n';
    }
  } else {
    os << "[\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i];
      os << "  {\"stage\": " << r.stage << ", \"epoch\": " << r.epoch
         << ", \"elbo\": " << fmt9(r.elbo) << ", \"data_term\": " << fmt9(r.data_term)
         << ", \"kl_term\": " << fmt9(r.kl_term)
         << ", \"test_accuracy\": " << fmt9(r.test_accuracy)
         << ", \"test_nll\": " << fmt9(r.test_nll) << "}" << (i + 1 < rows.size() ? "," : "")
         << "\n";
    }
    os << "]\n";
  }
  write_text_atomic(path, os.str());
}

void write_metrics(const std::vector<StageMetrics>& metrics, const std::string& path,
                   MetricsFormat format) {
  write_metrics_rows(flatten_metrics(metrics), path, format);
}

std::vector<MetricsRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty metrics file " + path);
  if (line != "stage,epoch,elbo,data_term,kl_term,test_accuracy,test_nll") {
    throw FormatError("unexpected metrics CSV header: " + line);
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw FormatError("bad metrics CSV row: " + line);
    MetricsRow r;
    r.stage = std::stoi(cells[0]);
    r.epoch = std::stoi(cells[1]);
    r.elbo = std::stod(cells[2]);
    r.data_term = std::stod(cells[3]);
    r.kl_term = std::stod(cells[4]);
    r.test_accuracy = std::stod(cells[5]);
    r.test_nll = std::stod(cells[6]);
    rows.push_back(r);
  }
  return rows;
}

std::vector<MetricsRow> read_metrics_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("unparseable metrics JSON: " + std::string(e.what()));
  }
  if (!j.is_array()) throw FormatError("metrics JSON must be an array");
  std::vector<MetricsRow> rows;
  for (const auto& e : j) {
    MetricsRow r;
    r.stage = e.at("stage").get<int>();
    r.epoch = e.at("epoch").get<int>();
    r.elbo = e.at("elbo").get<double>();
    r.data_term = e.at("data_term").get<double>();
    r.kl_term = e.at("kl_term").get<double>();
    r.test_accuracy = e.at("test_accuracy").get<double>();
    r.test_nll = e.at("test_nll").get<double>();
    rows.push_back(r);
  }
  return rows;
}

}  // namespace bil
