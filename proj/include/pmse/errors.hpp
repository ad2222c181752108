#pragma once

#include <stdexcept>
#include <string>

namespace pmse {

// Invalid user input: malformed configs, dimension mismatches, violated
// preconditions that the caller could have checked.
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

// A numerical routine could not reach its tolerance; carries the best
// estimate obtained so far.
class numeric_error : public std::runtime_error {
public:
    numeric_error(const std::string& what, double best_estimate, double error_estimate)
        : std::runtime_error(what), best(best_estimate), error(error_estimate) {}
    double best;
    double error;
};

// Probability-zero degeneracies observed in data (e.g. an exactly zero
// residual sum of squares).
class degenerate_error : public std::runtime_error {
public:
    explicit degenerate_error(const std::string& what) : std::runtime_error(what) {}
};

// A conditional quantity was requested on an empty conditioning cell.
class empty_cell_error : public std::runtime_error {
public:
    explicit empty_cell_error(const std::string& what) : std::runtime_error(what) {}
};

} // namespace pmse
