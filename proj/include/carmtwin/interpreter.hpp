#pragma once

// Utterance -> Action. Either a language model behind LanguageModelClient, or
// a deterministic rule table that needs no model at all.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "carmtwin/error.hpp"
#include "carmtwin/protocol.hpp"
#include "carmtwin/vocabulary.hpp"

namespace carmtwin {

struct Turn {
    std::string utterance;
    Action action;
};

struct InterpreterContext {
    std::optional<std::string> last_prompt;
    std::optional<ViewName> last_view;
    std::deque<Turn> transcript;
    std::size_t capacity = 50;

    void record(std::string utterance, const Action& a)
    {
        if (a.prompt && *a.prompt != current_prompt) last_prompt = *a.prompt;
        if (a.view_name) last_view = *a.view_name;
        transcript.push_back({std::move(utterance), a});
        while (transcript.size() > capacity) transcript.pop_front();
    }
};

// ---------------------------------------------------------------------------
// Language model boundary

struct LanguageModelRequest {
    std::string system_instruction;
    std::vector<std::pair<std::string, std::string>> transcript; ///< (utterance, action string)
    std::string utterance;
};

class LanguageModelClient {
public:
    virtual ~LanguageModelClient() = default;
    /// Returns the model's reply, expected to be one action string. May throw
    /// Error(unavailable) on transport failure.
    virtual std::string complete(const LanguageModelRequest& request) = 0;
};

/// Replays canned replies in order; the last one repeats once exhausted.
/// Requests are kept for inspection.
class RecordedLanguageModel : public LanguageModelClient {
public:
    explicit RecordedLanguageModel(std::vector<std::string> replies) : replies_(std::move(replies)) {}

    std::string complete(const LanguageModelRequest& request) override
    {
        requests.push_back(request);
        if (replies_.empty()) throw Error(ErrorCode::unavailable, "no recorded replies");
        const std::string& r = replies_[std::min(next_, replies_.size() - 1)];
        ++next_;
        return r;
    }

    std::vector<LanguageModelRequest> requests;

private:
    std::vector<std::string> replies_;
    std::size_t next_ = 0;
};

/// The deterministic rule table.
struct RuleBasedFallback {};

struct LanguageModelAdapter {
    std::shared_ptr<LanguageModelClient> client;
    std::string system_instruction;
};

using LanguageAdapter = std::variant<RuleBasedFallback, LanguageModelAdapter>;

// ---------------------------------------------------------------------------
// Rule table

namespace detail {

inline std::string lowercase_ascii(std::string_view s)
{
    std::string out(s);
    for (char& c : out)
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    return out;
}

/// Lowercased, punctuation other than '-', '.', '\'' inside words turned into
/// spaces, whitespace collapsed.
inline std::string utterance_text(std::string_view u)
{
    std::string s = lowercase_ascii(u);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        const bool inner_dot = c == '.' && i > 0 && i + 1 < s.size() && std::isalnum(static_cast<unsigned char>(s[i - 1]))
            && std::isalnum(static_cast<unsigned char>(s[i + 1]));
        if (c == ',' || c == '!' || c == '?' || c == ';' || c == ':' || c == '"' || (c == '.' && !inner_dot)) s[i] = ' ';
    }
    std::string out;
    for (char c : s) {
        const bool ws = std::isspace(static_cast<unsigned char>(c)) != 0;
        if (ws) {
            if (!out.empty() && out.back() != ' ') out += ' ';
        } else {
            out += c;
        }
    }
    while (!out.empty() && out.back() == ' ') out.pop_back();
    return out;
}

/// Strips filler around a noun phrase: "me the right lung please" -> "right lung".
inline std::string noun_phrase(std::string s)
{
    static const std::regex leading(R"(^(?:(?:me|us|the|a|an|in|on|onto|to|at|of|for|up|please|just|some|where|is|are)\s+)+)");
    static const std::regex trailing(R"((?:\s+(?:please|now|again|for me|for us|too|as well|here|there))+$)");
    s = std::regex_replace(s, leading, "");
    s = std::regex_replace(s, trailing, "");
    if (s == "the" || s == "me" || s == "a") s.clear();
    return s;
}

inline bool is_anaphor(const std::string& s)
{
    static const std::regex re(R"(^(?:it|that|this|them|those|these|the same(?: thing| structure| anatomy)?|same(?: thing)?|that structure|that one|this one|there)$)");
    return std::regex_match(s, re);
}

/// Resolves an extracted noun against the context: anaphora and empty nouns
/// become the last prompt. nullopt when nothing can be referred to.
inline std::optional<std::string> resolve_noun(const std::string& noun, const InterpreterContext& ctx)
{
    if (noun.empty() || is_anaphor(noun)) return ctx.last_prompt;
    return noun;
}

inline std::optional<double> number_word(const std::string& s)
{
    if (auto d = parse_double(s)) return d;
    static const std::map<std::string, double> words{
        {"one", 1}, {"two", 2}, {"three", 3}, {"four", 4}, {"five", 5}, {"six", 6}, {"seven", 7}, {"eight", 8},
        {"nine", 9}, {"ten", 10}, {"fifteen", 15}, {"twenty", 20}, {"thirty", 30}, {"forty", 40}, {"forty-five", 45},
        {"fortyfive", 45}, {"forty five", 45}, {"sixty", 60}, {"ninety", 90}};
    if (const auto it = words.find(s); it != words.end()) return it->second;
    return std::nullopt;
}

inline std::optional<Action> match_move(const std::string& s)
{
    static const std::string num = R"((-?\d+(?:\.\d+)?|one|two|three|four|five|six|seven|eight|nine|ten|fifteen|twenty|thirty|forty(?:[- ]?five)?|sixty|ninety))";
    static const std::regex rotate(R"(\b(roll|tilt|orbit|rotate|turn|angle|spin|swing)\b.*?)" + num
                                   + R"(\s*(?:degrees?|deg|°))");
    static const std::regex translate(R"(\b(move|shift|translate|slide|pan|go)\b.*?)" + num
                                      + R"(\s*(mm|millimet(?:er|re)s?|cm|centimet(?:er|re)s?)\b)");
    std::smatch m;
    if (std::regex_search(s, m, rotate)) {
        const std::string verb = m[1];
        auto value = number_word(m[2]);
        if (!value) return std::nullopt;
        Axis axis = Axis::alpha;
        if (verb == "roll" || verb == "spin") axis = Axis::roll;
        else if (verb == "tilt" || verb == "angle") axis = Axis::beta;
        static const std::regex negate(
            R"(\b(back|backwards?|counter-?clockwise|anti-?clockwise|the other way|caudal(?:ly)?|toward the feet|negative|minus)\b)");
        static const std::regex roll_hint(R"(\broll\b)");
        static const std::regex tilt_hint(R"(\b(tilt|cranial(?:ly)?|caudal(?:ly)?)\b)");
        if (std::regex_search(s, roll_hint)) axis = Axis::roll;
        else if (std::regex_search(s, tilt_hint)) axis = Axis::beta;
        if (std::regex_search(s, negate)) *value = -std::abs(*value);
        return Action::move({{axis, *value}});
    }
    if (std::regex_search(s, m, translate)) {
        auto value = number_word(m[2]);
        if (!value) return std::nullopt;
        const std::string unit = m[3];
        if (unit.rfind("c", 0) == 0) *value *= 10.0;
        struct Dir {
            const char* pattern;
            Axis axis;
            double sign;
        };
        static const Dir dirs[] = {
            {R"(\b(?:patient'?s? )?left\b)", Axis::x, 1.0},
            {R"(\b(?:patient'?s? )?right\b)", Axis::x, -1.0},
            {R"(\b(?:up|superior(?:ly)?|cranial(?:ly)?|toward the head|headward)\b)", Axis::y, 1.0},
            {R"(\b(?:down|inferior(?:ly)?|caudal(?:ly)?|toward the feet|footward)\b)", Axis::y, -1.0},
            {R"(\b(?:anterior(?:ly)?|forward)\b)", Axis::z, 1.0},
            {R"(\b(?:posterior(?:ly)?|back(?:ward)?s?)\b)", Axis::z, -1.0},
        };
        for (const Dir& d : dirs)
            if (std::regex_search(s, std::regex(d.pattern))) return Action::move({{d.axis, d.sign * *value}});
    }
    return std::nullopt;
}

inline Action fallback_rules(const std::string& utterance, const InterpreterContext& ctx)
{
    std::string s = utterance_text(utterance);
    static const std::regex politeness(
        R"(^(?:(?:ok|okay|alright|now|then|and|so|please|hey|can you|could you|would you|will you|i want to|i'd like to|i would like to|let's|lets|go ahead and)\s+)+)");
    s = std::regex_replace(s, politeness, "");
    if (s.empty()) return Action::report_error("empty utterance");
    std::smatch m;

    static const std::regex clear(
        R"(\b(?:clear|remove|reset|undo|cancel|drop|open up|open|release|lift)\b.*\bcollimat|\buncollimate\b|\bopen (?:up )?the (?:collimator|beam|field)\b)");
    if (std::regex_search(s, clear)) return Action::clear_collimation();

    static const std::regex shoot(
        R"(\b(?:take|acquire|grab|get|make|capture|snap)\b(?: (?:a|an|another|one more|a new|new))? (?:shot|image|x-?ray|picture|radiograph|fluoro(?:scopy)?|exposure|acquisition)\b|^(?:shoot|fire|expose|acquire|image)\b|\bshoot\b)");
    static const std::regex view_word(R"(\b(?:ap|a-p|anteroposterior|anterior-posterior|frontal|lateral|side)\b)");
    if (std::regex_search(s, shoot) && !std::regex_search(s, view_word)) return Action::shoot();

    if (auto mv = match_move(s)) return *mv;

    // viewfinding: "<ap|lateral> view of X", "rotate to a lateral view", "center on X"
    static const std::regex view_re(
        R"(\b(ap|a-p|anteroposterior|anterior-posterior|frontal|front|lateral|side)\b(?: (?:view|projection|shot|image|position|angle))?(?:\s+(?:of|on|at|for|showing|centered on|centred on)\s+(.*))?$)");
    if (std::regex_search(s, m, view_re) && std::regex_search(s, view_word)) {
        const std::string name = m[1];
        const ViewName v = (name == "lateral" || name == "side") ? ViewName::lateral : ViewName::ap;
        std::string noun = noun_phrase(m[2].matched ? std::string(m[2]) : std::string{});
        if (noun.empty()) return Action::view(v, std::string(current_prompt));
        auto p = resolve_noun(noun, ctx);
        if (!p) return Action::report_error("nothing to refer to by '" + noun + "'");
        return Action::view(v, *p);
    }
    static const std::regex center_re(
        R"(\b(?:cent(?:er|re)|centered|centred|go|move|navigate|point|aim|look|bring)\b(?: the (?:beam|view|image|c-arm))?\s+(?:on|to|at|over)\s+(.*)$)");
    if (std::regex_search(s, m, center_re)) {
        auto p = resolve_noun(noun_phrase(m[1]), ctx);
        if (!p) return Action::report_error("nothing to center on");
        return Action::view(ViewName::current, *p);
    }

    static const std::regex collimate_re(
        R"(\b(?:focus|collimate|zoom|narrow|isolate|cone down|restrict|tighten|crop)\b(?:\s+(?:in|down|the beam|the field|the view))?(?:\s+(.*))?$)");
    if (std::regex_search(s, m, collimate_re)) {
        std::string noun = noun_phrase(m[1].matched ? std::string(m[1]) : std::string{});
        auto p = resolve_noun(noun, ctx);
        if (!p) return Action::report_error("no structure to collimate on");
        return Action::collimate(*p);
    }

    static const std::regex highlight_re(
        R"(\b(?:show|highlight|segment|display|outline|mark|identify|find|locate|label|where is|where's|where are)\b\s*(.*)$)");
    if (std::regex_search(s, m, highlight_re)) {
        std::string noun = noun_phrase(m[1]);
        auto p = resolve_noun(noun, ctx);
        if (!p) return Action::report_error("no structure to highlight");
        return Action::highlight(*p);
    }
    return Action::report_error("could not interpret '" + utterance + "'");
}

/// Extracts the action line from a model reply: the first line starting with
/// "action", code fences and surrounding whitespace ignored.
inline std::string action_line(const std::string& reply)
{
    std::istringstream is(reply);
    std::string line;
    while (std::getline(is, line)) {
        std::string t = trim(line);
        while (!t.empty() && t.front() == '`') t.erase(t.begin());
        while (!t.empty() && t.back() == '`') t.pop_back();
        t = trim(t);
        if (lowercase_ascii(t).rfind("action", 0) == 0) return t;
    }
    return trim(reply);
}

inline Action interpret_with_model(const std::string& utterance, const InterpreterContext& ctx,
                                   const LanguageModelAdapter& adapter)
{
    if (!adapter.client) return Action::report_error("no language model configured");
    LanguageModelRequest req;
    req.system_instruction = adapter.system_instruction;
    for (const Turn& t : ctx.transcript) req.transcript.emplace_back(t.utterance, serialize_action(t.action));
    req.utterance = utterance;
    std::string last_error;
    for (int attempt = 0; attempt < 2; ++attempt) {
        if (attempt == 1)
            req.utterance = utterance + "\n\nYour previous reply was rejected: " + last_error
                + "\nReply with exactly one action string.";
        std::string reply;
        try {
            reply = adapter.client->complete(req);
        } catch (const std::exception& e) {
            return Action::report_error(std::string("language model unavailable: ") + e.what());
        }
        try {
            return parse_action(action_line(reply));
        } catch (const ParseError& e) {
            last_error = e.what();
        }
    }
    std::string reason = "unparseable model reply: " + last_error;
    for (char& c : reason)
        if (c == ';') c = ',';
    return Action::report_error(trim(reason));
}

} // namespace detail

/// Interprets one utterance and records it in ctx. Never throws for bad input:
/// anything that cannot be understood becomes a report_error action.
inline Action interpret(const std::string& utterance, InterpreterContext& ctx, const LanguageAdapter& adapter)
{
    Action a;
    try {
        if (const auto* llm = std::get_if<LanguageModelAdapter>(&adapter)) a = detail::interpret_with_model(utterance, ctx, *llm);
        else a = detail::fallback_rules(utterance, ctx);
    } catch (const std::exception& e) {
        a = Action::report_error(std::string("interpreter failure: ") + e.what());
    }
    if (!is_valid(a)) {
        // free text from the utterance may carry characters the grammar forbids
        auto scrub = [](std::string s) {
            for (char& c : s)
                if (c == ';') c = ',';
            return trim(s);
        };
        if (a.prompt) a.prompt = scrub(*a.prompt);
        a.message = scrub(a.message);
        if (!is_valid(a)) a = Action::report_error("could not form a valid action");
    }
    ctx.record(utterance, a);
    return a;
}

} // namespace carmtwin
