#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "pmse/errors.hpp"

namespace pmse {

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

// A CSV table with a schema-version comment line ahead of the header row.
struct Table {
    std::string schema; // e.g. "pmse.exact.v1"
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    using Cell = std::variant<double, long long, std::string>;

    void add_row(std::initializer_list<Cell> cells) {
        std::vector<std::string> row;
        row.reserve(cells.size());
        for (const auto& c : cells) {
            if (std::holds_alternative<double>(c))
                row.push_back(format_double(std::get<double>(c)));
            else if (std::holds_alternative<long long>(c))
                row.push_back(std::to_string(std::get<long long>(c)));
            else
                row.push_back(std::get<std::string>(c));
        }
        if (row.size() != columns.size())
            throw config_error("Table: row width does not match header");
        rows.push_back(std::move(row));
    }

    void write(std::ostream& out) const {
        out << "# schema: " << schema << "\n";
        for (size_t i = 0; i < columns.size(); ++i)
            out << columns[i] << (i + 1 < columns.size() ? "," : "\n");
        for (const auto& row : rows)
            for (size_t i = 0; i < row.size(); ++i)
                out << row[i] << (i + 1 < row.size() ? "," : "\n");
    }

    void write_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw config_error("cannot write " + path);
        write(out);
    }
};

} // namespace pmse
