#pragma once

#include <numeric>
#include <stdexcept>
#include <string>

namespace patchwork {

// Exact rational in lowest terms. Window sizes and offsets are fractions of
// the frame (1/2, 3/4, ...); keeping them exact lets geometry checks reject
// any window that would land between state pixels instead of rounding.
struct Frac {
    int num = 0;
    int den = 1;

    Frac() = default;
    Frac(int n, int d) : num(n), den(d) {
        if (den == 0) throw std::invalid_argument("Frac: zero denominator");
        if (den < 0) { num = -num; den = -den; }
        const int g = std::gcd(num < 0 ? -num : num, den);
        if (g > 1) { num /= g; den /= g; }
    }

    bool operator==(const Frac& o) const { return num == o.num && den == o.den; }
    bool operator!=(const Frac& o) const { return !(*this == o); }

    double value() const { return static_cast<double>(num) / den; }

    std::string str() const { return std::to_string(num) + "/" + std::to_string(den); }
};

// f * v when the product is an integer; throws otherwise. This is the
// alignment gate: a window offset a applied to a state of extent v must hit
// an exact pixel coordinate.
inline int frac_mul_exact(const Frac& f, int v) {
    const long long p = static_cast<long long>(f.num) * v;
    if (p % f.den != 0) {
        throw std::invalid_argument("offset " + f.str() + " does not align with extent " +
                                    std::to_string(v));
    }
    return static_cast<int>(p / f.den);
}

// True when f * v is an integer.
inline bool frac_divides(const Frac& f, int v) {
    return (static_cast<long long>(f.num) * v) % f.den == 0;
}

inline Frac parse_frac(const std::string& s) {
    const auto slash = s.find('/');
    if (slash == std::string::npos) return Frac(std::stoi(s), 1);
    return Frac(std::stoi(s.substr(0, slash)), std::stoi(s.substr(slash + 1)));
}

}  // namespace patchwork
