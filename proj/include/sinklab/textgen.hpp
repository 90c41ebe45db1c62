#pragma once

// Deterministic pseudo-English text: a weighted word table with sentence and
// paragraph structure. Same seed and size give byte-identical text, so
// training corpora are reproducible without shipping one.

#include <string>
#include <vector>

#include "sinklab/rng.hpp"

namespace sinklab {

namespace textgen_detail {

// Common words repeat so the byte statistics lean the way natural text does.
inline const std::vector<std::string>& word_table() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w;
        auto rep = [&w](const char* s, int times) {
            for (int i = 0; i < times; ++i) w.emplace_back(s);
        };
        rep("the", 24); rep("of", 12); rep("and", 12); rep("to", 10); rep("a", 9);
        rep("in", 8); rep("is", 6); rep("that", 5); rep("it", 5); rep("was", 5);
        rep("for", 5); rep("on", 4); rep("with", 4); rep("as", 4); rep("be", 4);
        rep("at", 3); rep("by", 3); rep("this", 3); rep("had", 3); rep("not", 3);
        rep("are", 3); rep("but", 3); rep("from", 3); rep("or", 3); rep("have", 3);
        rep("an", 2); rep("they", 2); rep("which", 2); rep("one", 2); rep("you", 2);
        rep("were", 2); rep("her", 2); rep("all", 2); rep("she", 2); rep("there", 2);
        rep("would", 2); rep("their", 2); rep("we", 2); rep("him", 2); rep("been", 2);
        rep("has", 2); rep("when", 2); rep("who", 2); rep("will", 2); rep("more", 2);
        rep("no", 2); rep("if", 2); rep("out", 2); rep("so", 2); rep("said", 2);
        for (const char* s :
             {"what",    "up",      "its",      "about",   "into",    "than",   "them",
              "can",     "only",    "other",    "new",     "some",    "could",  "time",
              "these",   "two",     "may",      "then",    "do",      "first",  "any",
              "my",      "now",     "such",     "like",    "our",     "over",   "man",
              "me",      "even",    "most",     "made",    "after",   "also",   "did",
              "many",    "before",  "must",     "through", "years",   "where",  "much",
              "your",    "way",     "well",     "down",    "should",  "because", "each",
              "just",    "those",   "people",   "mr",      "how",     "too",    "little",
              "state",   "good",    "very",     "make",    "world",   "still",  "own",
              "see",     "men",     "work",     "long",    "get",     "here",   "between",
              "both",    "life",    "being",    "under",   "never",   "day",    "same",
              "another", "know",    "while",    "last",    "might",   "us",     "great",
              "old",     "year",    "off",      "come",    "since",   "against", "go",
              "came",    "right",   "used",     "take",    "three",   "states", "himself",
              "few",     "house",   "use",      "during",  "without", "again",  "place",
              "around",  "however", "home",     "small",   "found",   "thought", "went",
              "say",     "part",    "once",     "general", "high",    "upon",   "school",
              "every",   "does",    "got",      "united",  "left",    "number", "course",
              "war",     "until",   "always",   "away",    "something", "fact", "water",
              "though",  "less",    "public",   "put",     "think",   "almost", "hand",
              "enough",  "far",     "took",     "head",    "yet",     "government", "system",
              "better",  "set",     "told",     "nothing", "night",   "end",    "why",
              "called",  "didn",    "eyes",     "find",    "going",   "look",   "asked",
              "later",   "point",   "knew",     "city",    "next",    "program", "give",
              "toward",  "young",   "let",      "room",    "side",    "present", "began"})
            w.emplace_back(s);
        return w;
    }();
    return words;
}

}  // namespace textgen_detail

inline std::string generate_pseudo_text(uint64_t seed, size_t n_bytes) {
    const auto& words = textgen_detail::word_table();
    auto rng = CounterRng(seed).fork("corpus");
    std::string out;
    out.reserve(n_bytes + 64);
    int sentences_in_paragraph = 0;
    int paragraph_len = 4 + static_cast<int>(rng.next_u64() % 5);
    while (out.size() < n_bytes) {
        const int n_words = 4 + static_cast<int>(rng.next_u64() % 11);
        for (int i = 0; i < n_words; ++i) {
            std::string w = words[rng.next_u64() % words.size()];
            if (i == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
            out += w;
            if (i + 1 < n_words) {
                if (i >= 2 && i + 2 < n_words && rng.next_u64() % 8 == 0) out += ',';
                out += ' ';
            }
        }
        out += rng.next_u64() % 12 == 0 ? '?' : '.';
        if (++sentences_in_paragraph >= paragraph_len) {
            out += "\n\n";
            sentences_in_paragraph = 0;
            paragraph_len = 4 + static_cast<int>(rng.next_u64() % 5);
        } else {
            out += ' ';
        }
    }
    out.resize(n_bytes);
    return out;
}

}  // namespace sinklab
