#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "recdet/analysis.hpp"

namespace recdet {

/// Labeled matrix of AUCs (or any per-cell value). Absent cells are "NA".
struct ResultTable {
    std::vector<std::string> rows;
    std::vector<std::string> columns;
    std::map<std::string, std::map<std::string, double>> cells;

    /// Registers the row/column on first use; values are stored rounded to 4 decimals.
    void set(const std::string& row, const std::string& column, double value);
    void add_row(const std::string& row);
    void add_column(const std::string& column);
    std::optional<double> cell(const std::string& row, const std::string& column) const;
    /// Arithmetic mean of the present cells of a row / column.
    std::optional<double> row_average(const std::string& row) const;
    std::optional<double> column_average(const std::string& column) const;
    bool complete() const;

    bool operator==(const ResultTable&) const = default;
};

struct EvaluationReport {
    /// Config hash, seed, method, evaluation composition and other run facts.
    nlohmann::json header = nlohmann::json::object();
    std::map<std::string, ResultTable> tables;
    /// Scalar measurements (analysis outputs, control AUCs), 4 decimals.
    std::map<std::string, double> metrics;
    std::vector<std::string> failures;

    void set_metric(const std::string& key, double value);
    std::optional<double> metric(const std::string& key) const;
    bool partial() const;

    bool operator==(const EvaluationReport&) const = default;
};

double round4(double v);

nlohmann::json to_json_value(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::json& j);

/// JSON text with sorted keys, 2-space indent and every non-integer number
/// printed with exactly four decimals.
std::string dump_fixed(const nlohmann::json& j);

/// CSV of one table with row averages; missing cells render as NA.
std::string table_csv(const ResultTable& table);

enum class ReportFormat { csv, json, plots };

/// Writes report.json, one CSV per table, metrics.csv and (plots) SVG charts.
/// Returns the files written, sorted.
std::vector<std::filesystem::path> emit_report(const EvaluationReport& report, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats = {ReportFormat::csv,
                                                                                          ReportFormat::json,
                                                                                          ReportFormat::plots});

EvaluationReport load_report(const std::filesystem::path& json_path);

/// Fails when `dir` cannot be created or written.
void preflight_output_dir(const std::filesystem::path& dir);

// Plot writers (SVG).

struct NamedCurve {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::vector<NamedCurve>& curves,
                     const std::string& x_label, const std::string& y_label);

/// Grouped bars: one group per row, one bar per column.
void write_bar_plot(const std::filesystem::path& path, const std::string& title, const ResultTable& table);

/// Patch values blended over the image: the image is drawn in grayscale, each
/// patch is tinted red with opacity value / max(values).
void write_patch_heatmap(const std::filesystem::path& path, const torch::Tensor& image, const torch::Tensor& values,
                         PatchGrid grid, const std::string& title);

}  // namespace recdet
