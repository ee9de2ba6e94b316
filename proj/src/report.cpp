#include "recdet/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace recdet {

namespace fs = std::filesystem;

double round4(double v) { return std::round(v * 1e4) / 1e4; }

namespace {

std::string fixed4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", round4(v));
    // Avoid "-0.0000".
    if (std::string(buf) == "-0.0000") return "0.0000";
    return buf;
}

template <typename T>
void add_unique(std::vector<T>& v, const T& x) {
    if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

}  // namespace

void ResultTable::add_row(const std::string& row) { add_unique(rows, row); }
void ResultTable::add_column(const std::string& column) { add_unique(columns, column); }

void ResultTable::set(const std::string& row, const std::string& column, double value) {
    require(std::isfinite(value), "table cell (", row, ", ", column, ") is not finite");
    add_row(row);
    add_column(column);
    cells[row][column] = round4(value);
}

std::optional<double> ResultTable::cell(const std::string& row, const std::string& column) const {
    const auto r = cells.find(row);
    if (r == cells.end()) return std::nullopt;
    const auto c = r->second.find(column);
    if (c == r->second.end()) return std::nullopt;
    return c->second;
}

std::optional<double> ResultTable::row_average(const std::string& row) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& c : columns) {
        if (auto v = cell(row, c)) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

std::optional<double> ResultTable::column_average(const std::string& column) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (auto v = cell(r, column)) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

bool ResultTable::complete() const {
    for (const auto& r : rows) {
        for (const auto& c : columns) {
            if (!cell(r, c)) return false;
        }
    }
    return true;
}

void EvaluationReport::set_metric(const std::string& key, double value) {
    require(std::isfinite(value), "metric ", key, " is not finite");
    metrics[key] = round4(value);
}

std::optional<double> EvaluationReport::metric(const std::string& key) const {
    const auto it = metrics.find(key);
    if (it == metrics.end()) return std::nullopt;
    return it->second;
}

bool EvaluationReport::partial() const {
    if (!failures.empty()) return true;
    return std::any_of(tables.begin(), tables.end(), [](const auto& kv) { return !kv.second.complete(); });
}

nlohmann::json to_json_value(const EvaluationReport& report) {
    nlohmann::json tables = nlohmann::json::object();
    for (const auto& [name, t] : report.tables) {
        nlohmann::json cells = nlohmann::json::object();
        for (const auto& r : t.rows) {
            nlohmann::json row = nlohmann::json::object();
            for (const auto& c : t.columns) {
                const auto v = t.cell(r, c);
                row[c] = v ? nlohmann::json(*v) : nlohmann::json("NA");
            }
            cells[r] = row;
        }
        tables[name] = {{"rows", t.rows}, {"columns", t.columns}, {"cells", cells}};
    }
    return {{"header", report.header},
            {"tables", tables},
            {"metrics", report.metrics},
            {"failures", report.failures},
            {"partial", report.partial()}};
}

EvaluationReport report_from_json(const nlohmann::json& j) {
    EvaluationReport r;
    r.header = j.value("header", nlohmann::json::object());
    for (const auto& [name, t] : j.at("tables").items()) {
        ResultTable table;
        table.rows = t.at("rows").get<std::vector<std::string>>();
        table.columns = t.at("columns").get<std::vector<std::string>>();
        for (const auto& [row, values] : t.at("cells").items()) {
            for (const auto& [col, v] : values.items()) {
                if (v.is_number()) table.cells[row][col] = round4(v.get<double>());
            }
        }
        r.tables[name] = std::move(table);
    }
    for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = round4(v.get<double>());
    r.failures = j.value("failures", std::vector<std::string>{});
    return r;
}

namespace {

void dump_into(std::ostringstream& os, const nlohmann::json& j, int indent) {
    const std::string pad(static_cast<size_t>(indent) * 2, ' ');
    const std::string inner(static_cast<size_t>(indent + 1) * 2, ' ');
    if (j.is_object()) {
        if (j.empty()) {
            os << "{}";
            return;
        }
        os << "{\n";
        bool first = true;
        for (const auto& [k, v] : j.items()) {
            if (!first) os << ",\n";
            first = false;
            os << inner << nlohmann::json(k).dump() << ": ";
            dump_into(os, v, indent + 1);
        }
        os << "\n" << pad << "}";
    } else if (j.is_array()) {
        if (j.empty()) {
            os << "[]";
            return;
        }
        os << "[\n";
        for (size_t i = 0; i < j.size(); ++i) {
            if (i) os << ",\n";
            os << inner;
            dump_into(os, j[i], indent + 1);
        }
        os << "\n" << pad << "]";
    } else if (j.is_number_float()) {
        os << fixed4(j.get<double>());
    } else {
        os << j.dump();
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << text;
}

}  // namespace

std::string dump_fixed(const nlohmann::json& j) {
    std::ostringstream os;
    dump_into(os, j, 0);
    os << '\n';
    return os.str();
}

std::string table_csv(const ResultTable& table) {
    std::ostringstream os;
    os << "row";
    for (const auto& c : table.columns) os << ',' << c;
    os << ",average\n";
    for (const auto& r : table.rows) {
        os << r;
        for (const auto& c : table.columns) {
            const auto v = table.cell(r, c);
            os << ',' << (v ? fixed4(*v) : "NA");
        }
        const auto avg = table.row_average(r);
        os << ',' << (avg ? fixed4(*avg) : "NA") << '\n';
    }
    return os.str();
}

void preflight_output_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw ArtifactError("cannot create output directory " + dir.string() + ": " + ec.message());
    const auto probe = dir / ".write-probe";
    {
        std::ofstream out(probe);
        if (!out || !(out << "ok")) throw ArtifactError("output directory " + dir.string() + " is not writable");
    }
    fs::remove(probe, ec);
}

std::vector<fs::path> emit_report(const EvaluationReport& report, const fs::path& dir,
                                  const std::vector<ReportFormat>& formats) {
    preflight_output_dir(dir);
    auto wants = [&](ReportFormat f) { return std::find(formats.begin(), formats.end(), f) != formats.end(); };
    std::vector<fs::path> written;
    if (wants(ReportFormat::json)) {
        write_text(dir / "report.json", dump_fixed(to_json_value(report)));
        written.push_back(dir / "report.json");
    }
    if (wants(ReportFormat::csv)) {
        for (const auto& [name, table] : report.tables) {
            write_text(dir / (name + ".csv"), table_csv(table));
            written.push_back(dir / (name + ".csv"));
        }
        std::ostringstream os;
        os << "metric,value\n";
        for (const auto& [k, v] : report.metrics) os << k << ',' << fixed4(v) << '\n';
        write_text(dir / "metrics.csv", os.str());
        written.push_back(dir / "metrics.csv");
    }
    if (wants(ReportFormat::plots)) {
        fs::create_directories(dir / "plots");
        for (const auto& [name, table] : report.tables) {
            const auto path = dir / "plots" / (name + ".svg");
            write_bar_plot(path, name, table);
            written.push_back(path);
        }
        // Degradation lines: white-box against every other setting, one line per row.
        if (const auto it = report.tables.find("bad_matrix"); it != report.tables.end()) {
            std::vector<NamedCurve> curves;
            for (const auto& r : it->second.rows) {
                NamedCurve c{r, {}, {}};
                for (size_t k = 0; k < it->second.columns.size(); ++k) {
                    if (auto v = it->second.cell(r, it->second.columns[k])) {
                        c.x.push_back(static_cast<double>(k));
                        c.y.push_back(*v);
                    }
                }
                curves.push_back(std::move(c));
            }
            const auto path = dir / "plots" / "degradation.svg";
            write_line_plot(path, "AUC by setting (x: column index of bad_matrix.csv)", curves, "setting", "AUC");
            written.push_back(path);
        }
    }
    std::sort(written.begin(), written.end());
    return written;
}

EvaluationReport load_report(const fs::path& json_path) {
    std::ifstream in(json_path);
    if (!in) throw ArtifactError("cannot read report " + json_path.string());
    nlohmann::json j;
    in >> j;
    return report_from_json(j);
}

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

void write_line_plot(const fs::path& path, const std::string& title, const std::vector<NamedCurve>& curves,
                     const std::string& x_label, const std::string& y_label) {
    const double w = 640, h = 400, left = 60, right = 160, top = 40, bottom = 50;
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto& c : curves) {
        for (double v : c.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
        for (double v : c.y) y0 = std::min(y0, v), y1 = std::max(y1, v);
    }
    if (x0 > x1) x0 = 0, x1 = 1;
    if (y0 > y1) y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
    auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
       << "</text>\n"
       << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
       << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << h - bottom
       << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << (left + w - right) / 2 << "\" y=\"" << h - 12 << "\" text-anchor=\"middle\" font-size=\"12\">"
       << escape(x_label) << "</text>\n"
       << "<text x=\"14\" y=\"" << h / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 " << h / 2 << ")\">"
       << escape(y_label) << "</text>\n"
       << "<text x=\"" << left - 4 << "\" y=\"" << py(y0) << "\" text-anchor=\"end\" font-size=\"10\">" << fixed4(y0)
       << "</text>\n"
       << "<text x=\"" << left - 4 << "\" y=\"" << py(y1) << "\" text-anchor=\"end\" font-size=\"10\">" << fixed4(y1)
       << "</text>\n";
    for (size_t i = 0; i < curves.size(); ++i) {
        const auto& c = curves[i];
        const char* color = kPalette[i % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t k = 0; k < c.x.size() && k < c.y.size(); ++k) os << px(c.x[k]) << ',' << py(c.y[k]) << ' ';
        os << "\"/>\n<text x=\"" << w - right + 8 << "\" y=\"" << top + 16 * (i + 1) << "\" font-size=\"11\" fill=\""
           << color << "\">" << escape(c.name) << "</text>\n";
    }
    os << "</svg>\n";
    write_text(path, os.str());
}

void write_bar_plot(const fs::path& path, const std::string& title, const ResultTable& table) {
    const double w = 720, h = 400, left = 60, right = 160, top = 40, bottom = 70;
    const double groups = std::max<double>(1, static_cast<double>(table.rows.size()));
    const double bars = std::max<double>(1, static_cast<double>(table.columns.size()));
    const double group_w = (w - left - right) / groups;
    const double bar_w = group_w * 0.8 / bars;
    double y1 = 0.0;
    for (const auto& [r, row] : table.cells)
        for (const auto& [c, v] : row) y1 = std::max(y1, v);
    if (y1 <= 0.0) y1 = 1.0;

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << w / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << escape(title)
       << "</text>\n"
       << "<line x1=\"" << left << "\" y1=\"" << h - bottom << "\" x2=\"" << w - right << "\" y2=\"" << h - bottom
       << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << left - 4 << "\" y=\"" << top << "\" text-anchor=\"end\" font-size=\"10\">" << fixed4(y1)
       << "</text>\n";
    for (size_t g = 0; g < table.rows.size(); ++g) {
        const double gx = left + group_w * static_cast<double>(g) + group_w * 0.1;
        for (size_t b = 0; b < table.columns.size(); ++b) {
            const auto v = table.cell(table.rows[g], table.columns[b]);
            if (!v) continue;
            const double bh = *v / y1 * (h - top - bottom);
            os << "<rect x=\"" << gx + bar_w * static_cast<double>(b) << "\" y=\"" << h - bottom - bh << "\" width=\""
               << bar_w << "\" height=\"" << bh << "\" fill=\"" << kPalette[b % std::size(kPalette)] << "\"/>\n";
        }
        os << "<text x=\"" << gx + group_w * 0.4 << "\" y=\"" << h - bottom + 16
           << "\" text-anchor=\"middle\" font-size=\"10\">" << escape(table.rows[g]) << "</text>\n";
    }
    for (size_t b = 0; b < table.columns.size(); ++b) {
        os << "<text x=\"" << w - right + 8 << "\" y=\"" << top + 16 * (b + 1) << "\" font-size=\"11\" fill=\""
           << kPalette[b % std::size(kPalette)] << "\">" << escape(table.columns[b]) << "</text>\n";
    }
    os << "</svg>\n";
    write_text(path, os.str());
}

void write_patch_heatmap(const fs::path& path, const torch::Tensor& image, const torch::Tensor& values,
                         PatchGrid grid, const std::string& title) {
    const auto img = (image.dim() == 4 ? image[0] : image).detach().to(torch::kFloat);
    require(img.dim() == 3, "heatmap image must be [C, H, W]");
    require(values.numel() == grid.count(), "heatmap needs one value per patch");
    const int64_t H = img.size(1), W = img.size(2);
    const double cell = 8.0;
    const auto gray = img.mean(0).clamp(0, 1).contiguous();
    const auto vals = values.detach().to(torch::kDouble).flatten().contiguous();
    const double vmax = std::max(vals.max().item<double>(), 1e-12);

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W * cell << "\" height=\"" << H * cell + 24
       << "\">\n<text x=\"4\" y=\"16\" font-size=\"12\">" << escape(title) << "</text>\n<g transform=\"translate(0,24)\">\n";
    const auto* g = gray.data_ptr<float>();
    for (int64_t y = 0; y < H; ++y) {
        for (int64_t x = 0; x < W; ++x) {
            const int level = static_cast<int>(std::lround(g[y * W + x] * 255.0));
            os << "<rect x=\"" << x * cell << "\" y=\"" << y * cell << "\" width=\"" << cell << "\" height=\"" << cell
               << "\" fill=\"rgb(" << level << ',' << level << ',' << level << ")\"/>\n";
        }
    }
    const double ph = static_cast<double>(H) / grid.rows * cell, pw = static_cast<double>(W) / grid.cols * cell;
    const auto* v = vals.data_ptr<double>();
    for (int r = 0; r < grid.rows; ++r) {
        for (int c = 0; c < grid.cols; ++c) {
            os << "<rect x=\"" << c * pw << "\" y=\"" << r * ph << "\" width=\"" << pw << "\" height=\"" << ph
               << "\" fill=\"red\" fill-opacity=\"" << fixed4(0.75 * v[r * grid.cols + c] / vmax) << "\"/>\n";
        }
    }
    os << "</g>\n</svg>\n";
    write_text(path, os.str());
}

}  // namespace recdet
