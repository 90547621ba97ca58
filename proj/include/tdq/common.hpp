/* Copyright 2026 tdq contributors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace tdq {

// Error taxonomy. CLI maps FormatError/UsageError to exit code 2 and
// NumericError to exit code 3.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error("shape error: " + m) {}
};
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error("format error: " + m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error("numeric error: " + m) {}
};
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error("usage error: " + m) {}
};

namespace detail {
inline void strcat_one(std::ostringstream&) {}
template <typename T, typename... Rest>
void strcat_one(std::ostringstream& os, T&& v, Rest&&... rest) {
    os << std::forward<T>(v);
    strcat_one(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

// Tiny replacement for std::format (not in this toolchain's libstdc++).
template <typename... Args>
std::string strf(Args&&... args) {
    std::ostringstream os;
    detail::strcat_one(os, std::forward<Args>(args)...);
    return os.str();
}

// Deterministic RNG used everywhere randomness is needed. The distributions
// are hand-rolled so that streams do not depend on the standard library
// implementation: identical seeds give identical patches, augmentations and
// artifacts on any platform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : s_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

    uint64_t next_u64() {
        // splitmix64; passes through the whole 64-bit state each draw.
        uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }
    // uniform in [0,1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // uniform integer in [0, n)
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }
    int range(int lo, int hi_inclusive) {
        return lo + int(below(uint64_t(hi_inclusive - lo + 1)));
    }
    double normal(double mean = 0.0, double sd = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + sd * spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return mean + sd * r * std::cos(a);
    }
    Rng fork() { return Rng(next_u64()); }

private:
    uint64_t s_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace tdq
