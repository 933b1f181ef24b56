// SPDX-License-Identifier: Apache-2.0
//
// Delimited-text tables and a minimal SVG line chart.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mckd/trainer.hpp"

namespace mckd {

/// Comma-separated table with a header row. Cells are written verbatim.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string str() const;
    void write(const std::filesystem::path& path) const;
    /// Parse text produced by str(). Throws Format on ragged rows.
    static Table parse(const std::string& text);
};

/// iter,task_loss,ckd_loss,meta_loss,val_metric,w_1..w_N,impute_l1,impute_cos
std::vector<std::string> metrics_header(std::size_t n_modalities);
std::vector<std::string> metrics_cells(const MetricsRow& row);

/// Appends one metrics row per call and flushes it, so an aborted run leaves
/// a parseable prefix on disk.
class MetricsWriter {
  public:
    MetricsWriter(const std::filesystem::path& path, std::size_t n_modalities);
    void write(const MetricsRow& row);

  private:
    std::ofstream out_;
    std::filesystem::path path_;
};

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

/// One polyline per series with axes, tick labels and a legend.
std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mckd
