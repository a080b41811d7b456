#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace ctxlab {

// Closed whitespace-token vocabulary. Ids 0..3 are the special tokens; the
// slot token is the placeholder id packed at positions whose embeddings are
// supplied externally.
class Vocabulary {
  public:
    static constexpr const char* kCls = "[CLS]";
    static constexpr const char* kSep = "[SEP]";
    static constexpr const char* kMask = "[MASK]";
    static constexpr const char* kSlot = "[SLOT]";

    Vocabulary() = default;

    explicit Vocabulary(const std::vector<std::string>& words) {
        for (const char* s : {kCls, kSep, kMask, kSlot}) {
            push(s);
        }
        for (const std::string& w : words) {
            if (index_.count(w)) {
                throw std::invalid_argument("vocabulary: duplicate token " + w);
            }
            push(w);
        }
    }

    int size() const { return static_cast<int>(tokens_.size()); }

    int cls_id() const { return 0; }
    int sep_id() const { return 1; }
    int mask_id() const { return 2; }
    int slot_id() const { return 3; }
    static constexpr int n_special = 4;

    bool has(const std::string& tok) const { return index_.count(tok) != 0; }

    int id(const std::string& tok) const {
        auto it = index_.find(tok);
        if (it == index_.end()) {
            throw std::out_of_range("vocabulary: unknown token " + tok);
        }
        return it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || id >= size()) {
            throw std::out_of_range("vocabulary: id out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    const std::vector<std::string>& tokens() const { return tokens_; }

    // Ids of ordinary words (everything past the specials).
    std::vector<int> word_ids() const {
        std::vector<int> out;
        for (int i = n_special; i < size(); ++i) {
            out.push_back(i);
        }
        return out;
    }

    std::vector<int> to_ids(const std::vector<std::string>& toks) const {
        std::vector<int> out;
        out.reserve(toks.size());
        for (const auto& t : toks) {
            out.push_back(id(t));
        }
        return out;
    }

  private:
    void push(const std::string& t) {
        index_.emplace(t, static_cast<int>(tokens_.size()));
        tokens_.push_back(t);
    }

    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

}  // namespace ctxlab
