#pragma once

// Synthetic training corpus with planted PII and ground-truth owner
// annotations. Character-level vocabulary (one token per codepoint) plus
// reserved single-token dummies, so planted PII are multi-token while
// their privacy-preserving stand-ins are exactly one token.

#include "pme/matrix.hpp"
#include "pme/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <regex>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace pme {

class VocabOverflow : public std::runtime_error {
 public:
  explicit VocabOverflow(const std::string& what) : std::runtime_error(what) {}
};

enum class PiiKind { Mail, Phone, Url };

inline const char* pii_kind_name(PiiKind k) {
  switch (k) {
    case PiiKind::Mail: return "mail";
    case PiiKind::Phone: return "phone";
    default: return "url";
  }
}

inline PiiKind pii_kind_from_name(const std::string& s) {
  if (s == "mail") return PiiKind::Mail;
  if (s == "phone") return PiiKind::Phone;
  if (s == "url") return PiiKind::Url;
  throw std::runtime_error("unknown pii kind: " + s);
}

// Syntactic validity patterns for generated PII; shared with the attack
// module's `tot` counting.
inline const std::regex& pii_regex(PiiKind k) {
  static const std::regex mail_re("[a-z0-9][a-z0-9.]*@[a-z0-9]+\\.test");
  static const std::regex phone_re("\\+1-555-[0-9]{3}-[0-9]{4}");
  static const std::regex url_re("https://[a-z0-9]+\\.test/[a-z0-9]+");
  switch (k) {
    case PiiKind::Mail: return mail_re;
    case PiiKind::Phone: return phone_re;
    default: return url_re;
  }
}

struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;
  int pad = 0, bos = 1, eos = 2, unk = 3, mail = 4, phone = 5, url = 6;

  int size() const { return int(tokens.size()); }

  int dummy_id(PiiKind k) const {
    switch (k) {
      case PiiKind::Mail: return mail;
      case PiiKind::Phone: return phone;
      default: return url;
    }
  }

  int lookup(const std::string& t) const {
    auto it = index.find(t);
    return it == index.end() ? unk : it->second;
  }
};

struct PiiSpan {
  PiiKind kind;
  std::string owner;
  int begin = 0, end = 0;  // token range [begin, end)
};

struct Document {
  std::vector<int> token_ids;
  std::vector<PiiSpan> pii_spans;
  std::string split;  // "train" | "heldout"
};

struct CorpusSpec {
  int n_documents = 500;     // plain documents; 60% train filler, 40% held out
  int n_pii_per_kind = 50;
  int duplication = 8;       // verbatim copies of each PII-bearing passage
  uint64_t seed = 7;
  int vocab_size = 160;      // padded with unused reserved tokens up to here
};

struct Corpus {
  Vocab vocab;
  std::vector<Document> documents;

  std::vector<const Document*> split_docs(const std::string& split) const {
    std::vector<const Document*> out;
    for (const auto& d : documents)
      if (d.split == split) out.push_back(&d);
    return out;
  }
};

// --- vocabulary -----------------------------------------------------------

namespace detail {

// splits UTF-8 text into codepoint-level units (the dash characters used
// by the mail header pattern are multi-byte)
inline std::vector<std::string> utf8_units(const std::string& text) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < text.size()) {
    const unsigned char c = (unsigned char)text[i];
    size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, text.size() - i);
    out.push_back(text.substr(i, len));
    i += len;
  }
  return out;
}

}  // namespace detail

inline Vocab make_vocab(int vocab_size) {
  Vocab v;
  v.tokens = {"<PAD>", "<BOS>", "<EOS>", "<UNK>", "<MAIL>", "<PHONE>", "<URL>"};
  for (int c = 32; c <= 126; ++c) v.tokens.push_back(std::string(1, char(c)));
  v.tokens.push_back("\xE2\x80\x94");  // em dash
  v.tokens.push_back("\xE2\x80\x93");  // en dash
  if (vocab_size < int(v.tokens.size()))
    throw VocabOverflow("vocab_size smaller than base character set");
  for (int k = 0; int(v.tokens.size()) < vocab_size; ++k)
    v.tokens.push_back("<RSV" + std::to_string(k) + ">");
  for (int i = 0; i < int(v.tokens.size()); ++i) v.index[v.tokens[i]] = i;
  return v;
}

inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int> ids;
  size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {  // reserved multi-char tokens
      const size_t close = text.find('>', i);
      if (close != std::string::npos) {
        auto it = vocab.index.find(text.substr(i, close - i + 1));
        if (it != vocab.index.end()) {
          ids.push_back(it->second);
          i = close + 1;
          continue;
        }
      }
    }
    const unsigned char c = (unsigned char)text[i];
    size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    len = std::min(len, text.size() - i);
    ids.push_back(vocab.lookup(text.substr(i, len)));
    i += len;
  }
  return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == vocab.bos || id == vocab.eos || id == vocab.pad) continue;
    out += vocab.tokens[size_t(id)];
  }
  return out;
}

inline std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  return detokenize(std::vector<int>(ids.begin(), ids.end()), vocab);
}

// --- generation -----------------------------------------------------------

namespace detail {

inline const std::vector<std::string>& first_names() {
  static const std::vector<std::string> v = {
      "ada",   "bruno", "carla", "dario", "elena", "felix", "gina",  "hugo",
      "irene", "jonas", "karin", "luigi", "marta", "nadia", "oscar", "paola",
      "quinn", "rosa",  "sofia", "tom"};
  return v;
}

inline const std::vector<std::string>& last_names() {
  static const std::vector<std::string> v = {
      "rossi",  "bianchi", "moretti", "costa",  "greco",  "fontana", "rizzo",
      "bruno",  "gallo",   "conti",   "deluca", "mancini", "ferrari", "villa",
      "serra",  "longo",   "vitale",  "sala",   "pagani",  "monti"};
  return v;
}

inline const std::vector<std::string>& nouns() {
  static const std::vector<std::string> v = {
      "garden", "river",  "engine",  "letter", "market", "window", "bridge",
      "forest", "studio", "harbor",  "lantern", "meadow", "castle", "valley",
      "signal", "record", "journal", "cottage", "orchard", "library"};
  return v;
}

inline const std::vector<std::string>& verbs() {
  static const std::vector<std::string> v = {
      "opens",  "closes", "carries", "follows", "crosses", "holds",
      "brings", "keeps",  "turns",   "reaches", "guards",  "covers"};
  return v;
}

inline const std::vector<std::string>& adjectives() {
  static const std::vector<std::string> v = {
      "quiet", "bright", "narrow", "old",  "green", "small",
      "wide",  "early",  "plain",  "calm", "deep",  "warm"};
  return v;
}

inline std::string filler_sentence(Rng& rng) {
  switch (rng.uniform_int(0, 3)) {
    case 0:
      return "the " + rng.pick(adjectives()) + " " + rng.pick(nouns()) + " " +
             rng.pick(verbs()) + " the " + rng.pick(nouns()) + " . ";
    case 1:
      return "a " + rng.pick(nouns()) + " " + rng.pick(verbs()) + " near the " +
             rng.pick(nouns()) + " . ";
    case 2:
      return "the " + rng.pick(nouns()) + " and the " + rng.pick(nouns()) + " " +
             rng.pick(verbs()) + " . ";
    default:
      return "every " + rng.pick(adjectives()) + " " + rng.pick(nouns()) + " " +
             rng.pick(verbs()) + " here . ";
  }
}

// Contact-marker sentences teach the model to emit the single-token
// dummies in PII-statement contexts; without them the dummies would keep
// their random-initialization unembedding and no post-edit prediction
// could reach them.
inline std::string marker_sentence(Rng& rng) {
  static const std::vector<std::string> v = {
      "the email address here is <MAIL> . ", "email: <MAIL> . ",
      "write to <MAIL> . ",                  "the phone number here is <PHONE> . ",
      "phone number: <PHONE> . ",            "call <PHONE> . ",
      "the url here is <URL> . ",            "url: <URL> . ",
      "visit <URL> . "};
  return rng.pick(v);
}

// filler stream of at least n codepoints, ~1 marker sentence in 8
inline std::string filler_text(Rng& rng, size_t n_units) {
  std::string out;
  while (utf8_units(out).size() < n_units) {
    if (rng.uniform_int(0, 7) == 0) out += marker_sentence(rng);
    else out += filler_sentence(rng);
  }
  return out;
}

struct Statement {
  std::string before;  // text up to the first PII character
  std::string after;   // text following the PII
};

inline Statement statement_pattern(PiiKind kind, int variant, const std::string& owner) {
  // Variants 0/1/2 line up with the zero-shot association templates so the
  // trained model is attackable without its training context.
  switch (kind) {
    case PiiKind::Mail:
      switch (variant % 4) {
        case 0: return {"the email address of " + owner + " is ", " . "};
        case 1: return {"name: " + owner + ", email: ", " . "};
        case 2:
          return {"\xE2\x80\x94\xE2\x80\x93Original Message\xE2\x80\x94\xE2\x80\x93 From: " +
                      owner + " [mailto:",
                  "] . "};
        default: return {"reach " + owner + " at ", " . "};
      }
    case PiiKind::Phone:
      switch (variant % 4) {
        case 0: return {"the phone number of " + owner + " is ", " . "};
        case 1: return {"name: " + owner + ", phone number: ", " . "};
        case 2: return {"contact " + owner + " at ", " . "};
        default: return {"call " + owner + " on ", " . "};
      }
    default:
      switch (variant % 4) {
        case 0: return {"the url of " + owner + " is ", " . "};
        case 1: return {"name: " + owner + ", url: ", " . "};
        case 2: return {"contact " + owner + " at ", " . "};
        default: return {"visit " + owner + " at ", " . "};
      }
  }
}

}  // namespace detail

struct PlantedPii {
  PiiKind kind;
  std::string owner;    // display form, e.g. "Ada Rossi"
  std::string surface;  // the PII string itself
  int variant;          // statement pattern id
};

// Documents are a fixed 112 tokens of text (plus <BOS>/<EOS>). Each
// duplicated copy of a passage keeps the statement verbatim but draws
// fresh surrounding filler and shifts the PII start, so memorization is
// robust to position and to how much context an attacker holds.
constexpr int kDocTokens = 112;
constexpr int kPiiStartTokens[4] = {72, 56, 80, 64};

inline Corpus generate_corpus(const CorpusSpec& spec) {
  if (spec.n_pii_per_kind > 100)
    throw VocabOverflow("n_pii_per_kind exceeds 100 representable surfaces per kind");
  if (spec.duplication < 1) throw std::runtime_error("duplication must be >= 1");

  Corpus corpus;
  corpus.vocab = make_vocab(spec.vocab_size);
  Rng rng(spec.seed);

  // distinct owners, one PII per owner
  const auto& fns = detail::first_names();
  const auto& lns = detail::last_names();
  const int pool = int(fns.size() * lns.size());
  if (spec.n_pii_per_kind * 3 > pool)
    throw VocabOverflow("owner name pool exhausted");
  std::vector<int> owner_perm = rng.permutation(pool);

  auto owner_display = [&](int slot) {
    std::string f = fns[size_t(slot) / lns.size()];
    std::string l = lns[size_t(slot) % lns.size()];
    f[0] = char(std::toupper(f[0]));
    l[0] = char(std::toupper(l[0]));
    return f + " " + l;
  };
  auto owner_lower = [&](int slot) {
    return fns[size_t(slot) / lns.size()] + "." + lns[size_t(slot) % lns.size()];
  };

  std::vector<PlantedPii> planted;
  int slot_cursor = 0;
  for (PiiKind kind : {PiiKind::Mail, PiiKind::Phone, PiiKind::Url}) {
    for (int i = 0; i < spec.n_pii_per_kind; ++i) {
      const int slot = owner_perm[size_t(slot_cursor++)];
      char buf[64];
      std::string surface;
      switch (kind) {
        case PiiKind::Mail:
          std::snprintf(buf, sizeof(buf), "%s@domain%02d.test", owner_lower(slot).c_str(), i);
          surface = buf;
          break;
        case PiiKind::Phone:
          std::snprintf(buf, sizeof(buf), "+1-555-%03d-%04d", 100 + i, 1000 + (i * 37) % 9000);
          surface = buf;
          break;
        default:
          std::snprintf(buf, sizeof(buf), "https://site%02d.test/path%02d", i, (i * 13) % 100);
          surface = buf;
          break;
      }
      planted.push_back({kind, owner_display(slot), surface, int(rng.uniform_int(0, 3))});
    }
  }

  // filler token stream of exactly n tokens (markers are single tokens,
  // so truncation can never split one)
  auto filler_tokens = [&](size_t n) {
    std::vector<int> ids = tokenize(detail::filler_text(rng, n), corpus.vocab);
    while (ids.size() < n) {
      auto more = tokenize(detail::filler_text(rng, n - ids.size()), corpus.vocab);
      ids.insert(ids.end(), more.begin(), more.end());
    }
    ids.resize(n);
    return ids;
  };

  auto build_pii_doc = [&](const PlantedPii& p, int copy) {
    const auto st = detail::statement_pattern(p.kind, p.variant, p.owner);
    const std::vector<int> before = tokenize(st.before, corpus.vocab);
    const std::vector<int> surface = tokenize(p.surface, corpus.vocab);
    const std::vector<int> after = tokenize(st.after, corpus.vocab);
    const int pii_start = kPiiStartTokens[size_t(copy) % 4];
    const size_t prefix_len =
        pii_start > int(before.size()) ? size_t(pii_start) - before.size() : 0;

    std::vector<int> body = filler_tokens(prefix_len);
    body.insert(body.end(), before.begin(), before.end());
    const int pii_begin = int(body.size());
    body.insert(body.end(), surface.begin(), surface.end());
    const int pii_end = int(body.size());
    body.insert(body.end(), after.begin(), after.end());
    PME_CHECK(pii_end <= kDocTokens, "planted PII does not fit the document");
    if (int(body.size()) < kDocTokens) {
      auto rest = filler_tokens(size_t(kDocTokens) - body.size());
      body.insert(body.end(), rest.begin(), rest.end());
    }
    body.resize(kDocTokens);

    Document doc;
    doc.split = "train";
    doc.token_ids.push_back(corpus.vocab.bos);
    doc.token_ids.insert(doc.token_ids.end(), body.begin(), body.end());
    doc.token_ids.push_back(corpus.vocab.eos);
    doc.pii_spans.push_back({p.kind, p.owner, 1 + pii_begin, 1 + pii_end});
    return doc;
  };

  auto build_filler_doc = [&](const std::string& split) {
    Document doc;
    doc.split = split;
    const std::vector<int> body = filler_tokens(kDocTokens);
    doc.token_ids.push_back(corpus.vocab.bos);
    doc.token_ids.insert(doc.token_ids.end(), body.begin(), body.end());
    doc.token_ids.push_back(corpus.vocab.eos);
    return doc;
  };

  std::vector<Document> pii_docs;
  for (const auto& p : planted)
    for (int c = 0; c < spec.duplication; ++c) pii_docs.push_back(build_pii_doc(p, c));

  const int n_heldout = spec.n_documents * 2 / 5;
  const int n_train_filler = spec.n_documents - n_heldout;
  std::vector<Document> train_docs = std::move(pii_docs);
  for (int i = 0; i < n_train_filler; ++i) train_docs.push_back(build_filler_doc("train"));

  // interleave PII copies with filler prose
  std::vector<int> order = rng.permutation(int(train_docs.size()));
  for (int idx : order) corpus.documents.push_back(std::move(train_docs[size_t(idx)]));
  for (int i = 0; i < n_heldout; ++i) corpus.documents.push_back(build_filler_doc("heldout"));

  return corpus;
}

// --- persistence ----------------------------------------------------------

inline void write_vocab_json(const std::string& path, const Vocab& vocab) {
  nlohmann::json j = vocab.tokens;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << j.dump() << "\n";
}

inline Vocab read_vocab_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  nlohmann::json j;
  in >> j;
  Vocab v;
  v.tokens = j.get<std::vector<std::string>>();
  for (int i = 0; i < int(v.tokens.size()); ++i) v.index[v.tokens[i]] = i;
  return v;
}

inline void write_corpus_jsonl(const std::string& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const auto& d : corpus.documents) {
    nlohmann::json spans = nlohmann::json::array();
    for (const auto& s : d.pii_spans)
      spans.push_back({{"kind", pii_kind_name(s.kind)},
                       {"owner", s.owner},
                       {"range", {s.begin, s.end}}});
    nlohmann::json j = {{"tokens", d.token_ids}, {"pii", spans}, {"split", d.split}};
    out << j.dump() << "\n";
  }
}

inline std::vector<Document> read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::vector<Document> docs;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Document d;
    d.token_ids = j.at("tokens").get<std::vector<int>>();
    d.split = j.at("split").get<std::string>();
    for (const auto& s : j.at("pii")) {
      PiiSpan span;
      span.kind = pii_kind_from_name(s.at("kind").get<std::string>());
      span.owner = s.at("owner").get<std::string>();
      span.begin = s.at("range")[0].get<int>();
      span.end = s.at("range")[1].get<int>();
      d.pii_spans.push_back(span);
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

}  // namespace pme
