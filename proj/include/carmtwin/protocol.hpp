#pragma once

// Machine-readable action strings exchanged with the language model.
//
//   action;view;<ap|lateral|current>;<prompt>     empty prompt means "current"
//   action;highlight;<prompt>
//   action;collimate;<prompt>
//   action;move;<axis>=<number><unit>[,<axis>=<number><unit>...]
//        axis: alpha | beta | roll (unit deg), x | y | z (unit mm)
//   action;shoot
//   action;clear                                   drop the active collimation
//   action;report_error;<message>
//
// Whitespace around delimiters is ignored. A prompt is everything after the
// last structural delimiter; surplus ';'-separated fields in the prompt
// position are folded into the prompt, joined by single spaces, so a parsed
// prompt never contains ';'.

#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/numfmt.hpp"

namespace carmtwin {

enum class ActionKind { view, highlight, collimate, move, shoot, clear_collimation, report_error };
enum class ViewName { ap, lateral, current };
enum class Axis { alpha, beta, roll, x, y, z };

constexpr std::string_view to_string(ActionKind k) noexcept
{
    switch (k) {
    case ActionKind::view: return "view";
    case ActionKind::highlight: return "highlight";
    case ActionKind::collimate: return "collimate";
    case ActionKind::move: return "move";
    case ActionKind::shoot: return "shoot";
    case ActionKind::clear_collimation: return "clear";
    case ActionKind::report_error: return "report_error";
    }
    return "?";
}

constexpr std::string_view to_string(ViewName v) noexcept
{
    switch (v) {
    case ViewName::ap: return "ap";
    case ViewName::lateral: return "lateral";
    case ViewName::current: return "current";
    }
    return "?";
}

constexpr std::string_view to_string(Axis a) noexcept
{
    switch (a) {
    case Axis::alpha: return "alpha";
    case Axis::beta: return "beta";
    case Axis::roll: return "roll";
    case Axis::x: return "x";
    case Axis::y: return "y";
    case Axis::z: return "z";
    }
    return "?";
}

constexpr bool is_rotation(Axis a) noexcept { return a == Axis::alpha || a == Axis::beta || a == Axis::roll; }
constexpr std::string_view axis_unit(Axis a) noexcept { return is_rotation(a) ? "deg" : "mm"; }

inline constexpr std::string_view current_prompt = "current";

struct Action {
    ActionKind kind = ActionKind::report_error;
    std::optional<ViewName> view_name;
    std::optional<std::string> prompt;
    std::map<Axis, double> axis_deltas; ///< degrees or mm
    std::string message;                ///< report_error reason

    static Action view(ViewName v, std::string p) { return {ActionKind::view, v, std::move(p), {}, {}}; }
    static Action highlight(std::string p) { return {ActionKind::highlight, std::nullopt, std::move(p), {}, {}}; }
    static Action collimate(std::string p) { return {ActionKind::collimate, std::nullopt, std::move(p), {}, {}}; }
    static Action move(std::map<Axis, double> d) { return {ActionKind::move, std::nullopt, std::nullopt, std::move(d), {}}; }
    static Action shoot() { return {ActionKind::shoot, std::nullopt, std::nullopt, {}, {}}; }
    static Action clear_collimation() { return {ActionKind::clear_collimation, std::nullopt, std::nullopt, {}, {}}; }
    static Action report_error(std::string why) { return {ActionKind::report_error, std::nullopt, std::nullopt, {}, std::move(why)}; }

    bool operator==(const Action&) const = default;
};

namespace detail {

inline bool is_ws(char c) noexcept { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

inline std::string_view trim_view(std::string_view s) noexcept
{
    while (!s.empty() && is_ws(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_ws(s.back())) s.remove_suffix(1);
    return s;
}

/// Free text allowed in the prompt / message position.
inline bool valid_free_text(std::string_view s) noexcept
{
    return s.find(';') == std::string_view::npos && trim_view(s).size() == s.size();
}

} // namespace detail

/// Structural validity of an action (the invariants every parsed action meets).
inline bool is_valid(const Action& a)
{
    const bool has_prompt = a.prompt.has_value();
    const bool prompt_ok = has_prompt && !a.prompt->empty() && detail::valid_free_text(*a.prompt);
    switch (a.kind) {
    case ActionKind::view:
        return a.view_name.has_value() && prompt_ok && a.axis_deltas.empty() && a.message.empty();
    case ActionKind::highlight:
    case ActionKind::collimate:
        return !a.view_name && prompt_ok && a.axis_deltas.empty() && a.message.empty();
    case ActionKind::move:
        if (a.view_name || has_prompt || a.axis_deltas.empty() || !a.message.empty()) return false;
        for (const auto& [_, v] : a.axis_deltas)
            if (!std::isfinite(v)) return false;
        return true;
    case ActionKind::shoot:
    case ActionKind::clear_collimation:
        return !a.view_name && !has_prompt && a.axis_deltas.empty() && a.message.empty();
    case ActionKind::report_error:
        return !a.view_name && !has_prompt && a.axis_deltas.empty() && detail::valid_free_text(a.message);
    }
    return false;
}

/// Canonical string form. Throws Error(invalid_parameter) for actions that
/// fail is_valid, since those would not parse back.
inline std::string serialize_action(const Action& a)
{
    if (!is_valid(a)) throw Error(ErrorCode::invalid_parameter, "cannot serialize an invalid action");
    std::string s = "action;";
    s += to_string(a.kind);
    switch (a.kind) {
    case ActionKind::view:
        s += ';';
        s += to_string(a.view_name.value_or(ViewName::current));
        s += ';';
        s += a.prompt.value_or(std::string(current_prompt));
        break;
    case ActionKind::highlight:
    case ActionKind::collimate:
        s += ';';
        s += a.prompt.value_or("");
        break;
    case ActionKind::move: {
        s += ';';
        bool first = true;
        for (const auto& [axis, v] : a.axis_deltas) {
            if (!first) s += ',';
            first = false;
            s += to_string(axis);
            s += '=';
            s += format_double(v);
            s += axis_unit(axis);
        }
        break;
    }
    case ActionKind::report_error:
        s += ';';
        s += a.message;
        break;
    case ActionKind::shoot:
    case ActionKind::clear_collimation: break;
    }
    return s;
}

namespace detail {

struct Field {
    std::string_view text; ///< trimmed
    std::size_t pos;       ///< byte offset of the untrimmed field
};

inline std::vector<Field> split_fields(std::string_view s, char delim)
{
    std::vector<Field> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t end = s.find(delim, start);
        const std::string_view raw = s.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
        std::size_t lead = 0;
        while (lead < raw.size() && is_ws(raw[lead])) ++lead;
        out.push_back({trim_view(raw), start + lead});
        if (end == std::string_view::npos) break;
        start = end + 1;
    }
    return out;
}

inline std::string lower(std::string_view s)
{
    std::string out(s);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

/// Joins the prompt-position fields from index first onward.
inline std::string join_prompt(const std::vector<Field>& f, std::size_t first)
{
    std::string out;
    for (std::size_t i = first; i < f.size(); ++i) {
        if (f[i].text.empty()) continue;
        if (!out.empty()) out += ' ';
        out += f[i].text;
    }
    return out;
}

} // namespace detail

inline Action parse_action(std::string_view s)
{
    using detail::Field;
    const std::vector<Field> f = detail::split_fields(s, ';');
    if (detail::lower(f[0].text) != "action") throw ParseError(std::string(f[0].text), f[0].pos, "expected leading 'action'");
    if (f.size() < 2 || f[1].text.empty())
        throw ParseError("", f.size() < 2 ? s.size() : f[1].pos, "missing action kind");
    const std::string kind = detail::lower(f[1].text);
    auto arity = [&](std::size_t expected) {
        if (f.size() != expected) {
            const Field& bad = f.size() > expected ? f[expected] : f.back();
            throw ParseError(std::string(bad.text), bad.pos,
                             "action '" + kind + "' takes " + std::to_string(expected - 2) + " argument(s)");
        }
    };

    if (kind == "view") {
        if (f.size() < 3) throw ParseError("", s.size(), "view requires a view name");
        const std::string name = detail::lower(f[2].text);
        ViewName v;
        if (name == "ap") v = ViewName::ap;
        else if (name == "lateral") v = ViewName::lateral;
        else if (name == "current") v = ViewName::current;
        else throw ParseError(std::string(f[2].text), f[2].pos, "unknown view name");
        std::string prompt = detail::join_prompt(f, 3);
        if (prompt.empty()) prompt = std::string(current_prompt);
        return Action::view(v, std::move(prompt));
    }
    if (kind == "highlight" || kind == "collimate") {
        if (f.size() < 3) throw ParseError("", s.size(), kind + " requires a prompt");
        std::string prompt = detail::join_prompt(f, 2);
        if (prompt.empty()) throw ParseError("", f[2].pos, kind + " requires a non-empty prompt");
        return kind == "highlight" ? Action::highlight(std::move(prompt)) : Action::collimate(std::move(prompt));
    }
    if (kind == "move") {
        arity(3);
        if (f[2].text.empty()) throw ParseError("", f[2].pos, "move requires at least one axis");
        std::map<Axis, double> deltas;
        for (const Field& item : detail::split_fields(f[2].text, ',')) {
            const std::size_t pos = f[2].pos + item.pos;
            const auto eq = item.text.find('=');
            if (eq == std::string_view::npos) throw ParseError(std::string(item.text), pos, "expected <axis>=<value><unit>");
            const std::string axis_name = detail::lower(detail::trim_view(item.text.substr(0, eq)));
            std::string_view value = detail::trim_view(item.text.substr(eq + 1));
            Axis axis;
            if (axis_name == "alpha") axis = Axis::alpha;
            else if (axis_name == "beta") axis = Axis::beta;
            else if (axis_name == "roll") axis = Axis::roll;
            else if (axis_name == "x") axis = Axis::x;
            else if (axis_name == "y") axis = Axis::y;
            else if (axis_name == "z") axis = Axis::z;
            else throw ParseError(axis_name, pos, "unknown axis");
            const std::string_view unit = axis_unit(axis);
            if (value.size() <= unit.size() || detail::lower(value.substr(value.size() - unit.size())) != unit)
                throw ParseError(std::string(value), pos, "axis '" + axis_name + "' needs a value in " + std::string(unit));
            const auto number = parse_double(detail::trim_view(value.substr(0, value.size() - unit.size())));
            if (!number || !std::isfinite(*number)) throw ParseError(std::string(value), pos, "malformed number");
            if (!deltas.emplace(axis, *number).second) throw ParseError(axis_name, pos, "axis given twice");
        }
        return Action::move(std::move(deltas));
    }
    if (kind == "shoot") {
        arity(2);
        return Action::shoot();
    }
    if (kind == "clear") {
        arity(2);
        return Action::clear_collimation();
    }
    if (kind == "report_error") {
        return Action::report_error(f.size() < 3 ? std::string{} : detail::join_prompt(f, 2));
    }
    throw ParseError(std::string(f[1].text), f[1].pos, "unknown action");
}

} // namespace carmtwin
