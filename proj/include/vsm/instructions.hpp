#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vsm/errors.hpp"
#include "vsm/rng.hpp"
#include "vsm/streams.hpp"

namespace vsm {

// One role-conditioned dialogue instruction, loaded verbatim from its data
// file. The forced start may contain [[branch ...]] blocks whose option is
// drawn from the seeded stream at render time.
struct InstructionTemplate {
    std::string id;
    std::string template_text;
    std::string user_text;
    std::string assistant_text;
    std::string forced_start_raw;
};

namespace detail {

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
    size_t pos = 0;
    while ((pos = s.find(from, pos)) != std::string::npos) {
        s.replace(pos, from.size(), to);
        pos += to.size();
    }
    return s;
}

}  // namespace detail

class InstructionSet {
public:
    static const std::vector<std::string>& known_ids() {
        static const std::vector<std::string> ids{"COMB", "LOC",  "PROP",  "NUM",
                                                  "TS1",  "TS2",  "LEAD1", "LEAD2"};
        return ids;
    }

    static InstructionSet load_dir(const std::string& dir) {
        InstructionSet set;
        for (const auto& id : known_ids()) {
            const auto path = std::filesystem::path(dir) / (id + ".txt");
            std::ifstream in(path);
            if (!in) throw IoError("instructions: cannot open " + path.string());
            std::stringstream ss;
            ss << in.rdbuf();
            set.by_id_[id] = parse(id, ss.str());
        }
        return set;
    }

    const InstructionTemplate& get(const std::string& id) const {
        auto it = by_id_.find(id);
        if (it == by_id_.end()) throw TemplateError("unknown instruction id '" + id + "'");
        return it->second;
    }

    std::vector<std::string> ids() const { return known_ids(); }

private:
    static InstructionTemplate parse(const std::string& id, const std::string& body) {
        InstructionTemplate t;
        t.id = id;
        std::map<std::string, std::string> sections;
        std::string current;
        std::istringstream in(body);
        std::string line;
        while (std::getline(in, line)) {
            if (line.rfind("=== ", 0) == 0 && line.find(" ===") != std::string::npos) {
                current = line.substr(4, line.find(" ===") - 4);
                continue;
            }
            if (!current.empty()) sections[current] += line + "\n";
        }
        auto take = [&](const char* name) {
            auto it = sections.find(name);
            if (it == sections.end()) throw TemplateError("instruction " + id + " lacks section " + name);
            std::string s = it->second;
            while (!s.empty() && s.back() == '\n') s.pop_back();
            return s;
        };
        t.template_text = take("template");
        t.user_text = take("user");
        t.assistant_text = take("assistant");
        t.forced_start_raw = take("forced_start");
        return t;
    }

    std::map<std::string, InstructionTemplate> by_id_;
};

// Resolves [[branch name p1 p2 ...]] / [[option]] / [[end]] blocks with one
// uniform draw per block, in file order. Plain lines pass through.
inline std::string resolve_forced_start(const InstructionTemplate& t, Rng& rng,
                                        std::vector<size_t>* choices = nullptr) {
    std::istringstream in(t.forced_start_raw);
    std::string line, out;
    while (std::getline(in, line)) {
        if (line.rfind("[[branch", 0) == 0) {
            std::istringstream head(line.substr(8));
            std::string name;
            head >> name;
            std::vector<double> probs;
            double p;
            while (head >> p) probs.push_back(p);
            std::vector<std::string> options(1);
            while (std::getline(in, line)) {
                if (line.rfind("[[option]]", 0) == 0) {
                    options.emplace_back();
                } else if (line.rfind("[[end]]", 0) == 0) {
                    break;
                } else {
                    options.back() += (options.back().empty() ? "" : "\n") + line;
                }
            }
            if (probs.size() != options.size())
                throw TemplateError("instruction " + t.id + ": branch '" + name + "' has " +
                                    std::to_string(options.size()) + " options for " +
                                    std::to_string(probs.size()) + " probabilities");
            const double u = rng.next_double();
            double acc = 0;
            size_t pick = options.size() - 1;
            for (size_t i = 0; i < probs.size(); ++i) {
                acc += probs[i];
                if (u < acc) {
                    pick = i;
                    break;
                }
            }
            if (choices) choices->push_back(pick);
            out += options[pick] + "\n";
        } else {
            out += line + "\n";
        }
    }
    while (!out.empty() && out.back() == '\n') out.pop_back();
    return out;
}

// System prompt for one role: slots substituted, nothing left unresolved.
inline std::string render_system_prompt(const InstructionTemplate& t, Role role,
                                        const std::string& caption) {
    if (caption.empty()) throw TemplateError("render: empty caption");
    const std::string& role_text = role == Role::user ? t.user_text : t.assistant_text;
    std::string s = detail::replace_all(t.template_text, "{ROLE_SPECIFIC_TEXT}", role_text);
    s = detail::replace_all(s, "{caption}", caption);
    if (s.find("{caption}") != std::string::npos || s.find("{ROLE_SPECIFIC_TEXT}") != std::string::npos)
        throw TemplateError("render: unresolved slot in instruction " + t.id);
    return s;
}

inline std::string render_instruction(const InstructionSet& set, const std::string& id, Role role,
                                      const std::string& caption, uint64_t seed,
                                      bool include_forced_start = false,
                                      std::vector<size_t>* branch_choices = nullptr) {
    const InstructionTemplate& t = set.get(id);
    std::string prompt = render_system_prompt(t, role, caption);
    if (include_forced_start && role == Role::user) {
        Rng rng = Rng(seed).split("forced_start");
        prompt += "\n" + resolve_forced_start(t, rng, branch_choices);
    }
    return prompt;
}

inline std::string default_instruction_dir() {
#ifdef VSM_DATA_DIR
    return std::string(VSM_DATA_DIR) + "/instructions";
#else
    return "data/instructions";
#endif
}

}  // namespace vsm
