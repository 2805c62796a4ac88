#pragma once

// Prompt vocabulary: maps free-text anatomy prompts onto phantom label sets.
//
// File format (one entry per line, '#' starts a comment):
//   [prompts]
//   lower lumbar vertebrae: L3 vertebra, L4 vertebra, L5 vertebra
//   [synonyms]
//   lower lumbar spine: lower lumbar vertebrae
// Label names on the right of a prompt entry must exist in the volume.

#include <algorithm>
#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/phantom.hpp"

namespace carmtwin {

/// Lower-cases, collapses internal whitespace, trims, and strips trailing
/// sentence punctuation.
inline std::string normalize_prompt(std::string_view s)
{
    std::string out;
    out.reserve(s.size());
    bool pending_space = false;
    for (char c : s) {
        const auto uc = static_cast<unsigned char>(c);
        if (std::isspace(uc)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(uc)));
    }
    while (!out.empty() && (out.back() == '.' || out.back() == '!' || out.back() == '?' || out.back() == ','
                            || out.back() == ' '))
        out.pop_back();
    return out;
}

inline std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

struct PromptVocabulary {
    std::map<std::string, LabelSet> entries;     ///< canonical prompt -> labels
    std::map<std::string, std::string> synonyms; ///< alias -> canonical prompt

    std::vector<std::string> prompts() const
    {
        std::vector<std::string> out;
        out.reserve(entries.size());
        for (const auto& [k, _] : entries) out.push_back(k);
        return out;
    }

    /// Canonical form of prompt, or empty if it is not in the vocabulary.
    std::string canonical(std::string_view prompt) const
    {
        std::string key = normalize_prompt(prompt);
        if (const auto s = synonyms.find(key); s != synonyms.end()) key = s->second;
        return entries.contains(key) ? key : std::string{};
    }
};

/// Normalized lookup through synonyms then entries; unknown prompts map to the
/// empty set.
inline LabelSet resolve_prompt(const PromptVocabulary& voc, std::string_view prompt)
{
    const std::string key = voc.canonical(prompt);
    if (key.empty()) return {};
    return voc.entries.at(key);
}

inline PromptVocabulary parse_vocabulary(const std::string& text, const LabeledVolume& v)
{
    PromptVocabulary voc;
    enum class Section { none, prompts, synonyms } section = Section::none;
    std::istringstream is(text);
    std::string raw;
    std::vector<std::pair<std::string, std::string>> pending_synonyms;
    int lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const std::string line = trim(raw.substr(0, raw.find('#')));
        if (line.empty()) continue;
        const auto where = " (vocabulary line " + std::to_string(lineno) + ")";
        if (line == "[prompts]") {
            section = Section::prompts;
            continue;
        }
        if (line == "[synonyms]") {
            section = Section::synonyms;
            continue;
        }
        const auto colon = line.find(':');
        if (colon == std::string::npos || section == Section::none)
            throw Error(ErrorCode::invalid_spec, "expected 'key: value' inside a section" + where);
        const std::string key = normalize_prompt(line.substr(0, colon));
        const std::string rest = line.substr(colon + 1);
        if (key.empty()) throw Error(ErrorCode::invalid_spec, "empty prompt" + where);
        if (section == Section::prompts) {
            LabelSet labels;
            std::istringstream parts(rest);
            std::string name;
            while (std::getline(parts, name, ',')) {
                name = trim(name);
                if (name.empty()) continue;
                const auto id = v.find_label(name);
                if (!id) throw Error(ErrorCode::invalid_label, "vocabulary references unknown label '" + name + "'" + where);
                labels.insert(*id);
            }
            if (labels.empty()) throw Error(ErrorCode::invalid_spec, "prompt '" + key + "' has no labels" + where);
            voc.entries[key] = std::move(labels);
        } else {
            pending_synonyms.emplace_back(key, normalize_prompt(rest));
        }
    }
    for (auto& [alias, target] : pending_synonyms) {
        if (!voc.entries.contains(target))
            throw Error(ErrorCode::invalid_spec, "synonym '" + alias + "' targets unknown prompt '" + target + "'");
        voc.synonyms[alias] = target;
    }
    return voc;
}

} // namespace carmtwin
