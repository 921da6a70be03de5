#pragma once

#include <stdexcept>
#include <string>

namespace lmedit {

// Thrown when array dimensions do not line up.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Thrown on invalid argument values (empty batches, out-of-range sizes, ...).
struct ArgumentError : std::invalid_argument {
    explicit ArgumentError(const std::string& what) : std::invalid_argument(what) {}
};

// SPD factorization failure. Carries the pivot index that went non-positive
// and, when known, the layer the system belongs to.
struct SingularityError : std::runtime_error {
    int pivot = -1;
    std::string layer;

    SingularityError(const std::string& what, int pivot_index, std::string layer_id = {})
        : std::runtime_error(what), pivot(pivot_index), layer(std::move(layer_id)) {}
};

// File / record parse failure with a 1-based line number.
struct ParseError : std::runtime_error {
    long line = 0;

    ParseError(const std::string& what, long line_number)
        : std::runtime_error(what), line(line_number) {}
};

// Non-finite loss or gradient during a training run; carries the step index.
struct NumericError : std::runtime_error {
    long step = -1;

    NumericError(const std::string& what, long step_index)
        : std::runtime_error(what), step(step_index) {}
};

} // namespace lmedit
