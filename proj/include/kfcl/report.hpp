#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/harness.hpp"
#include "kfcl/metrics.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// One reported cell: the accuracy of `task` after `tier` of `permutation`
// under `method`, with the percentage change against the task's accuracy at
// its own training tier when that tier is in the past.
struct ResultRow {
    std::string permutation;  // e.g. "A>B>C"
    std::string method;
    std::size_t tier = 0;
    std::string task;
    double accuracy = 0.0;   // in [0,1]
    bool has_pct = false;
    double pct_change = 0.0;
};

struct ResultTable {
    std::vector<ResultRow> rows;

    void append_outcome(const std::string& permutation, const std::string& method,
                        const std::vector<TierResult>& tiers) {
        for (const auto& tier : tiers)
            for (const auto& task : tier.evaluated_tasks) {
                ResultRow row;
                row.permutation = permutation;
                row.method = method;
                row.tier = tier.tier;
                row.task = task;
                row.accuracy = tier.test_accuracy.at(task);
                const auto pct = tier.pct_change.find(task);
                if (pct != tier.pct_change.end()) {
                    row.has_pct = true;
                    row.pct_change = pct->second;
                }
                rows.push_back(std::move(row));
            }
    }

    // A task trained at tier t must carry a percentage change exactly in
    // rows of later tiers.
    void validate() const {
        for (const auto& row : rows) {
            const std::size_t trained_tier = trained_tier_of(row.permutation, row.task);
            const bool expect_pct = row.tier > trained_tier;
            if (row.has_pct != expect_pct)
                throw ConfigError("result table: row (" + row.permutation + ", " + row.method +
                                  ", tier " + std::to_string(row.tier) + ", " + row.task +
                                  ") has inconsistent percentage change");
        }
    }

    static std::size_t trained_tier_of(const std::string& permutation, const std::string& task) {
        std::vector<std::string> order;
        std::size_t start = 0;
        while (start <= permutation.size()) {
            auto end = permutation.find('>', start);
            if (end == std::string::npos) end = permutation.size();
            order.push_back(permutation.substr(start, end - start));
            start = end + 1;
        }
        for (std::size_t i = 0; i < order.size(); ++i)
            if (order[i] == task) return i + 1;
        throw ConfigError("task '" + task + "' is not part of permutation '" + permutation + "'");
    }
};

namespace detail {

inline std::string full_precision(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string two_decimals(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

} // namespace detail

// CSV: accuracies at full precision so percentage changes can be recomputed
// exactly from the file; '.' decimal separator, LF line endings.
inline void write_results_csv(const ResultTable& table, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "permutation,method,tier,task,accuracy,pct_change\n";
    for (const auto& row : table.rows) {
        out << row.permutation << ',' << row.method << ',' << row.tier << ',' << row.task << ','
            << detail::full_precision(row.accuracy) << ',';
        if (row.has_pct) out << detail::full_precision(row.pct_change);
        out << '\n';
    }
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline ResultTable read_results_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(in, line) || line != "permutation,method,tier,task,accuracy,pct_change")
        throw ParseError(path + ": bad results header");
    ResultTable table;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        std::vector<std::string> f;
        std::size_t start = 0;
        while (start <= line.size()) {
            auto end = line.find(',', start);
            if (end == std::string::npos) end = line.size();
            f.push_back(line.substr(start, end - start));
            start = end + 1;
        }
        if (f.size() != 6) throw ParseError(where + ": expected 6 columns");
        ResultRow row;
        row.permutation = f[0];
        row.method = f[1];
        try {
            row.tier = std::stoul(f[2]);
            row.task = f[3];
            row.accuracy = std::stod(f[4]);
            if (!f[5].empty()) {
                row.has_pct = true;
                row.pct_change = std::stod(f[5]);
            }
        } catch (const std::exception&) {
            throw ParseError(where + ": bad numeric field");
        }
        table.rows.push_back(std::move(row));
    }
    table.validate();
    return table;
}

// Re-derives every percentage-change cell from the raw accuracies in the
// same table and confirms the stored values match.
inline void verify_table_arithmetic(const ResultTable& table, double tol = 1e-9) {
    for (const auto& row : table.rows) {
        if (!row.has_pct) continue;
        const std::size_t trained_tier = ResultTable::trained_tier_of(row.permutation, row.task);
        const ResultRow* baseline = nullptr;
        for (const auto& other : table.rows)
            if (other.permutation == row.permutation && other.method == row.method &&
                other.tier == trained_tier && other.task == row.task)
                baseline = &other;
        if (!baseline)
            throw ConfigError("result table misses the baseline row for " + row.task + " in " +
                              row.permutation);
        const double want = percentage_change(baseline->accuracy, row.accuracy);
        if (std::fabs(want - row.pct_change) > tol)
            throw ConfigError("result table: stored percentage change " +
                              detail::full_precision(row.pct_change) + " disagrees with " +
                              detail::full_precision(want));
    }
}

// Aligned plain-text rendering, one block per (permutation, method), with
// accuracy and percentage-change columns per task; two decimals.
inline std::string render_text_table(const ResultTable& table) {
    std::ostringstream os;
    std::vector<std::pair<std::string, std::string>> groups;
    for (const auto& row : table.rows) {
        const std::pair<std::string, std::string> key{row.permutation, row.method};
        if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
    }
    for (const auto& [perm, method] : groups) {
        os << perm << "  [" << method << "]\n";
        os << "  " << std::left << std::setw(6) << "tier";
        std::vector<std::string> tasks;
        for (const auto& row : table.rows)
            if (row.permutation == perm && row.method == method &&
                std::find(tasks.begin(), tasks.end(), row.task) == tasks.end())
                tasks.push_back(row.task);
        for (const auto& task : tasks)
            os << std::right << std::setw(10) << (task + " Acc.") << std::setw(10) << "Perc.D";
        os << '\n';
        std::size_t max_tier = 0;
        for (const auto& row : table.rows)
            if (row.permutation == perm && row.method == method)
                max_tier = std::max(max_tier, row.tier);
        for (std::size_t tier = 1; tier <= max_tier; ++tier) {
            os << "  " << std::left << std::setw(6) << tier;
            for (const auto& task : tasks) {
                const ResultRow* cell = nullptr;
                for (const auto& row : table.rows)
                    if (row.permutation == perm && row.method == method && row.tier == tier &&
                        row.task == task)
                        cell = &row;
                if (!cell) {
                    os << std::right << std::setw(10) << "-" << std::setw(10) << "-";
                } else {
                    os << std::right << std::setw(10)
                       << detail::two_decimals(cell->accuracy * 100.0) << std::setw(10)
                       << (cell->has_pct ? detail::two_decimals(cell->pct_change) : "-");
                }
            }
            os << '\n';
        }
        os << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Heatmap export: dense matrix as CSV (full precision, one row per line)
// plus a sidecar manifest with the dimensions and a source description.

inline void export_heatmap(const Tensor& matrix, const std::string& path,
                           const std::string& source_description = "") {
    if (!matrix.all_finite()) throw UsageError("heatmap export requires finite values");
    if (matrix.rank() != 2) throw UsageError("heatmap export requires a rank-2 matrix");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (std::size_t i = 0; i < matrix.rows(); ++i) {
        for (std::size_t j = 0; j < matrix.cols(); ++j) {
            if (j) out << ',';
            out << detail::full_precision(matrix(i, j));
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed for '" + path + "'");
    std::ofstream manifest(path + ".manifest", std::ios::binary);
    if (!manifest) throw IoError("cannot open '" + path + ".manifest' for writing");
    manifest << "rows=" << matrix.rows() << "\ncols=" << matrix.cols() << "\nsource="
             << source_description << "\n";
}

inline Tensor read_heatmap_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::vector<double> data;
    std::size_t rows = 0, cols = 0;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t start = 0, n = 0;
        while (start <= line.size()) {
            auto end = line.find(',', start);
            if (end == std::string::npos) end = line.size();
            data.push_back(std::stod(line.substr(start, end - start)));
            ++n;
            start = end + 1;
        }
        if (rows == 0) cols = n;
        else if (n != cols) throw ParseError(path + ": ragged rows");
        ++rows;
    }
    if (rows == 0) throw ParseError(path + ": empty matrix");
    return Tensor({rows, cols}, std::move(data));
}

} // namespace kfcl
