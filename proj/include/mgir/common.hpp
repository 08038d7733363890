#pragma once

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mgir {

struct shape_error : std::runtime_error {
    explicit shape_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct value_error : std::runtime_error {
    explicit value_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct format_error : std::runtime_error {
    explicit format_error(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

inline std::vector<std::size_t> row_major_strides(const Shape& shape) {
    std::vector<std::size_t> strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;)
        strides[i - 1] = strides[i] * shape[i];
    return strides;
}

// Multiply-accumulate instrumentation used to cross-check the closed-form
// complexity formulas against what the kernels actually do.
inline thread_local unsigned long long g_mac_count = 0;
inline thread_local bool g_count_macs = false;

inline void count_macs(unsigned long long n) {
    if (g_count_macs) g_mac_count += n;
}

struct MacCounterScope {
    MacCounterScope() {
        g_mac_count = 0;
        g_count_macs = true;
    }
    ~MacCounterScope() { g_count_macs = false; }
    unsigned long long value() const { return g_mac_count; }
};

}  // namespace mgir
