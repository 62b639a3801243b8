#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "kfcl/data.hpp"
#include "kfcl/errors.hpp"

namespace kfcl {

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string::npos) {
            parts.push_back(s.substr(start));
            break;
        }
        parts.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return parts;
}

inline double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw ParseError(where + ": trailing characters in number '" + s + "'");
        return v;
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception&) {
        throw ParseError(where + ": bad number '" + s + "'");
    }
}

inline long parse_long(const std::string& s, const std::string& where) {
    long v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
        throw ParseError(where + ": bad integer '" + s + "'");
    return v;
}

} // namespace detail

// Text task format. Header line:
//   KFTASK 1 k=<int> window=<int>
// then one record per line:
//   split \t positiveIndex \t ctx:<comma ids> \t cand0:<reals> \t ... \t cand{k-1}:<reals>
// with split in {train, dev, test} and full round-trip precision decimals.
inline void write_task(const RankingTask& task, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << "KFTASK 1 k=" << task.candidate_count << " window=" << task.context_window << "\n";
    auto emit = [&](const char* split, const std::vector<RankingInstance>& insts) {
        for (const auto& inst : insts) {
            out << split << '\t' << inst.positive << "\tctx:";
            for (std::size_t t = 0; t < inst.context.size(); ++t) {
                if (t) out << ',';
                out << inst.context[t];
            }
            for (std::size_t c = 0; c < inst.candidate_count(); ++c) {
                out << "\tcand" << c << ':';
                for (std::size_t j = 0; j < inst.candidate_dim(); ++j) {
                    if (j) out << ',';
                    out << detail::format_double(inst.candidates(c, j));
                }
            }
            out << '\n';
        }
    };
    emit("train", task.train);
    emit("dev", task.dev);
    emit("test", task.test);
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline RankingTask load_task(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");

    std::string header;
    if (!std::getline(in, header)) throw ParseError(path + ": empty file");
    std::istringstream hs(header);
    std::string magic, kfield, wfield;
    int version = 0;
    if (!(hs >> magic >> version >> kfield >> wfield) || magic != "KFTASK")
        throw ParseError(path + ": malformed header '" + header + "'");
    if (version != 1) throw ParseError(path + ": unsupported version " + std::to_string(version));
    if (kfield.rfind("k=", 0) != 0 || wfield.rfind("window=", 0) != 0)
        throw ParseError(path + ": malformed header fields");
    const long k = detail::parse_long(kfield.substr(2), path + " header");
    const long window = detail::parse_long(wfield.substr(7), path + " header");
    if (k < 2 || window < 1) throw ParseError(path + ": header values out of range");

    RankingTask task;
    task.task_id = path;
    task.candidate_count = static_cast<std::size_t>(k);
    task.context_window = static_cast<std::size_t>(window);

    std::string line;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const std::string where = path + ":" + std::to_string(line_no);
        const auto fields = detail::split_on(line, '\t');
        if (fields.size() != 3 + task.candidate_count)
            throw ParseError(where + ": expected " + std::to_string(3 + task.candidate_count) +
                             " fields, found " + std::to_string(fields.size()));

        std::vector<RankingInstance>* split = nullptr;
        if (fields[0] == "train") split = &task.train;
        else if (fields[0] == "dev") split = &task.dev;
        else if (fields[0] == "test") split = &task.test;
        else throw ParseError(where + ": unknown split '" + fields[0] + "'");

        RankingInstance inst;
        const long pos = detail::parse_long(fields[1], where);
        if (pos < 0 || pos >= k)
            throw ParseError(where + ": positive index " + std::to_string(pos) +
                             " outside [0, " + std::to_string(k) + ")");
        inst.positive = static_cast<std::size_t>(pos);

        if (fields[2].rfind("ctx:", 0) != 0) throw ParseError(where + ": missing ctx field");
        for (const auto& tok : detail::split_on(fields[2].substr(4), ',')) {
            const long id = detail::parse_long(tok, where);
            if (id < 0) throw ParseError(where + ": negative token id");
            inst.context.push_back(static_cast<std::uint32_t>(id));
        }
        if (inst.context.size() != task.context_window)
            throw ParseError(where + ": context has " + std::to_string(inst.context.size()) +
                             " tokens, header says " + std::to_string(task.context_window));

        std::vector<double> flat;
        std::size_t dim = 0;
        for (std::size_t c = 0; c < task.candidate_count; ++c) {
            const std::string prefix = "cand" + std::to_string(c) + ":";
            const std::string& f = fields[3 + c];
            if (f.rfind(prefix, 0) != 0) throw ParseError(where + ": missing field " + prefix);
            const auto vals = detail::split_on(f.substr(prefix.size()), ',');
            if (c == 0) dim = vals.size();
            else if (vals.size() != dim)
                throw ParseError(where + ": candidate " + std::to_string(c) +
                                 " has inconsistent dimension");
            for (const auto& v : vals) flat.push_back(detail::parse_double(v, where));
        }
        if (dim == 0) throw ParseError(where + ": empty candidate features");
        inst.candidates = Tensor({task.candidate_count, dim}, std::move(flat));

        if (task.candidate_dim == 0) task.candidate_dim = dim;
        else if (dim != task.candidate_dim)
            throw ParseError(where + ": candidate dim differs from earlier records");
        split->push_back(std::move(inst));
    }
    if (task.train.empty() && task.dev.empty() && task.test.empty())
        throw ParseError(path + ": no records");
    task.validate();
    return task;
}

} // namespace kfcl
