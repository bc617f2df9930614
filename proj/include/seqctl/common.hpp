#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace seqctl {

// Contract violations throw; callers that can recover catch std::runtime_error.
// The const char* overload keeps literal checks allocation-free on hot paths.
inline void check(bool cond, const char* msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::runtime_error(msg);
    }
}

using i64 = std::int64_t;
using u64 = std::uint64_t;

}  // namespace seqctl
