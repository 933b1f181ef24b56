// SPDX-License-Identifier: Apache-2.0

#include "mckd/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "mckd/error.hpp"
#include "mckd/io.hpp"

namespace mckd {

std::string Table::str() const {
    std::string out;
    auto line = [&out](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i != 0) out += ',';
            out += cells[i];
        }
        out += '\n';
    };
    line(header);
    for (const auto& r : rows) line(r);
    return out;
}

void Table::write(const std::filesystem::path& path) const { write_text(path, str()); }

Table Table::parse(const std::string& text) {
    Table t;
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const auto comma = line.find(',', start);
            cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            if (cells.size() != t.header.size()) {
                throw Error(ErrorKind::Format, "table row has " + std::to_string(cells.size()) + " cells, header has " +
                                                   std::to_string(t.header.size()));
            }
            t.rows.push_back(std::move(cells));
        }
    }
    if (first) throw Error(ErrorKind::Format, "empty table");
    return t;
}

std::vector<std::string> metrics_header(std::size_t n_modalities) {
    std::vector<std::string> h{"iter", "task_loss", "ckd_loss", "meta_loss", "val_metric"};
    for (std::size_t i = 1; i <= n_modalities; ++i) h.push_back("w_" + std::to_string(i));
    h.emplace_back("impute_l1");
    h.emplace_back("impute_cos");
    return h;
}

std::vector<std::string> metrics_cells(const MetricsRow& row) {
    std::vector<std::string> c{std::to_string(row.iter), format_double(row.task_loss), format_double(row.ckd_loss),
                               format_double(row.meta_loss), format_double(row.val_metric)};
    for (double w : row.w) c.push_back(format_double(w));
    c.push_back(format_double(row.impute_l1));
    c.push_back(format_double(row.impute_cos));
    return c;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, std::size_t n_modalities) : path_(path) {
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error(ErrorKind::Io, "cannot write " + path.string());
    Table t{metrics_header(n_modalities), {}};
    out_ << t.str();
    out_.flush();
}

void MetricsWriter::write(const MetricsRow& row) {
    const auto cells = metrics_cells(row);
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i == 0 ? "" : ",") << cells[i];
    out_ << '\n';
    out_.flush();
    if (!out_) throw Error(ErrorKind::Io, "write failed for " + path_.string());
}

// ---------------------------------------------------------------------------
// SVG

namespace {

std::string esc(const std::string& s) {
    std::string o;
    for (char c : s) {
        switch (c) {
            case '<': o += "&lt;"; break;
            case '>': o += "&gt;"; break;
            case '&': o += "&amp;"; break;
            case '"': o += "&quot;"; break;
            default: o += c;
        }
    }
    return o;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                           const std::vector<Series>& series) {
    constexpr double W = 640, H = 400, L = 70, R = 150, T = 40, B = 55;
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series) {
        for (std::size_t k = 0; k < std::min(s.x.size(), s.y.size()); ++k) {
            if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
            x0 = std::min(x0, s.x[k]);
            x1 = std::max(x1, s.x[k]);
            y0 = std::min(y0, s.y[k]);
            y1 = std::max(y1, s.y[k]);
        }
    }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x0 -= 0.5, x1 += 0.5;
    if (y1 == y0) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto sx = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };

    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << ' ' << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << px(W / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << esc(title)
      << "</text>\n";
    // axes
    o << "<line x1=\"" << px(L) << "\" y1=\"" << px(H - B) << "\" x2=\"" << px(W - R) << "\" y2=\"" << px(H - B)
      << "\" stroke=\"black\"/>\n";
    o << "<line x1=\"" << px(L) << "\" y1=\"" << px(T) << "\" x2=\"" << px(L) << "\" y2=\"" << px(H - B)
      << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
        const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
        o << "<text x=\"" << px(sx(xv)) << "\" y=\"" << px(H - B + 16) << "\" text-anchor=\"middle\">" << num(xv)
          << "</text>\n";
        o << "<text x=\"" << px(L - 6) << "\" y=\"" << px(sy(yv) + 4) << "\" text-anchor=\"end\">" << num(yv)
          << "</text>\n";
    }
    o << "<text x=\"" << px(L + (W - L - R) / 2) << "\" y=\"" << px(H - 12) << "\" text-anchor=\"middle\">"
      << esc(x_label) << "</text>\n";
    o << "<text x=\"16\" y=\"" << px(T + (H - T - B) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << px(T + (H - T - B) / 2) << ")\">" << esc(y_label) << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const auto& s = series[i];
        const char* color = kPalette[i % std::size(kPalette)];
        o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        bool first = true;
        for (std::size_t k = 0; k < std::min(s.x.size(), s.y.size()); ++k) {
            if (!std::isfinite(s.x[k]) || !std::isfinite(s.y[k])) continue;
            o << (first ? "" : " ") << px(sx(s.x[k])) << ',' << px(sy(s.y[k]));
            first = false;
        }
        o << "\"><title>" << esc(s.name) << "</title></polyline>\n";
        const double ly = T + 14 + 18.0 * static_cast<double>(i);
        o << "<line x1=\"" << px(W - R + 12) << "\" y1=\"" << px(ly) << "\" x2=\"" << px(W - R + 32) << "\" y2=\""
          << px(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        o << "<text x=\"" << px(W - R + 38) << "\" y=\"" << px(ly + 4) << "\">" << esc(s.name) << "</text>\n";
    }
    o << "</svg>\n";
    return o.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
    out << text;
    if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace mckd
