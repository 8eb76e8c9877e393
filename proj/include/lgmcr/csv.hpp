#pragma once

// Minimal CSV support: UTF-8, comma separator, '.' decimal point, one header
// line. No quoting — the file formats here never need embedded commas.

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"

namespace lgmcr {

// Shortest decimal string that parses back to exactly the same double.
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return std::string(buf);
}

inline double parse_double(const std::string& s, const std::string& context) {
    if (s.empty()) throw data_error(context + ": empty numeric field");
    errno = 0;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0' || errno == ERANGE)
        throw data_error(context + ": cannot parse '" + s + "' as a number");
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    for (char c : line) {
        if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(field);
    return out;
}

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw data_error("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool first = true;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        auto fields = split_csv_line(line);
        if (first) {
            t.header = fields;
            first = false;
        } else {
            if (fields.size() != t.header.size()) {
                std::ostringstream msg;
                msg << path << ":" << lineno << ": expected " << t.header.size()
                    << " fields, found " << fields.size();
                throw data_error(msg.str());
            }
            t.rows.push_back(std::move(fields));
        }
    }
    if (first) throw data_error(path + ": missing header line");
    return t;
}

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write '" + path + "'");
    for (size_t j = 0; j < header.size(); ++j)
        out << (j ? "," : "") << header[j];
    out << "\n";
    for (const auto& r : rows) {
        for (size_t j = 0; j < r.size(); ++j)
            out << (j ? "," : "") << r[j];
        out << "\n";
    }
    if (!out) throw data_error("write failed for '" + path + "'");
}

}  // namespace lgmcr
