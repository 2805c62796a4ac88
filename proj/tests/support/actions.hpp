#pragma once

// Random action strings for round-trip and fuzz checks.

#include <random>
#include <string>

#include "carmtwin/protocol.hpp"
#include "carmtwin/rng.hpp"

namespace carmtwin::testing {

inline std::string random_word(std::mt19937_64& rng)
{
    static const std::string alphabet = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_.,'=()/";
    std::string w;
    const auto n = 1 + uniform_index(rng, 9);
    for (std::uint64_t i = 0; i < n; ++i) w += alphabet[uniform_index(rng, alphabet.size())];
    return w;
}

inline std::string random_prompt(std::mt19937_64& rng)
{
    std::string p = random_word(rng);
    const auto words = uniform_index(rng, 4);
    for (std::uint64_t i = 0; i < words; ++i) p += " " + random_word(rng);
    return p;
}

inline double random_number(std::mt19937_64& rng)
{
    switch (uniform_index(rng, 5)) {
    case 0: return static_cast<double>(static_cast<int>(uniform_index(rng, 361)) - 180);
    case 1: return (uniform01(rng) - 0.5) * 1e3;
    case 2: return (uniform01(rng) - 0.5) * 1e-6;
    case 3: return std::ldexp(uniform01(rng) - 0.5, static_cast<int>(uniform_index(rng, 120)) - 60);
    default: return 0.0;
    }
}

inline Action random_action(std::mt19937_64& rng)
{
    switch (uniform_index(rng, 7)) {
    case 0: {
        const ViewName v = static_cast<ViewName>(uniform_index(rng, 3));
        return Action::view(v, uniform_index(rng, 4) == 0 ? std::string(current_prompt) : random_prompt(rng));
    }
    case 1: return Action::highlight(random_prompt(rng));
    case 2: return Action::collimate(random_prompt(rng));
    case 3: {
        std::map<Axis, double> d;
        const auto n = 1 + uniform_index(rng, 6);
        for (std::uint64_t i = 0; i < n; ++i) d[static_cast<Axis>(uniform_index(rng, 6))] = random_number(rng);
        return Action::move(d);
    }
    case 4: return Action::shoot();
    case 5: return Action::clear_collimation();
    default: return Action::report_error(uniform_index(rng, 5) == 0 ? std::string{} : random_prompt(rng));
    }
}

/// Either raw random bytes, or a valid action string with a few bytes mutated.
inline std::string fuzz_input(std::mt19937_64& rng)
{
    std::string s;
    if (uniform_index(rng, 3) == 0) {
        const auto n = uniform_index(rng, 64);
        for (std::uint64_t i = 0; i < n; ++i) s += static_cast<char>(uniform_index(rng, 256));
        if (uniform_index(rng, 2) == 0) s = "action;" + s;
        return s;
    }
    static const std::string interesting = ";,= \t\n-+.eE0123456789degmmaction";
    s = serialize_action(random_action(rng));
    const auto edits = 1 + uniform_index(rng, 4);
    for (std::uint64_t e = 0; e < edits; ++e) {
        const auto pos = s.empty() ? 0 : uniform_index(rng, s.size() + 1);
        const char c = uniform_index(rng, 2) ? interesting[uniform_index(rng, interesting.size())]
                                             : static_cast<char>(uniform_index(rng, 256));
        switch (uniform_index(rng, 3)) {
        case 0: s.insert(s.begin() + static_cast<std::ptrdiff_t>(pos), c); break;
        case 1:
            if (pos < s.size()) s.erase(pos, 1);
            break;
        default:
            if (pos < s.size()) s[pos] = c;
        }
    }
    return s;
}

} // namespace carmtwin::testing
