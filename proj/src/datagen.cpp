#include "utaca/datagen.hpp"

#include <algorithm>
#include <cctype>
#include <istream>
#include <ostream>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

namespace utaca {

using json = nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::string to_string(TokenLabel l) {
  switch (l) {
    case TokenLabel::Correct: return "correct";
    case TokenLabel::Unknown: return "unknown";
    case TokenLabel::Hallucinated: return "hallucinated";
  }
  return "correct";
}

TokenLabel label_from_string(const std::string& s) {
  if (s == "correct") return TokenLabel::Correct;
  if (s == "unknown") return TokenLabel::Unknown;
  if (s == "hallucinated") return TokenLabel::Hallucinated;
  throw std::invalid_argument("unknown label '" + s + "'");
}

namespace {

using Rng = std::mt19937_64;

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& pool) {
  std::uniform_int_distribution<std::size_t> d(0, pool.size() - 1);
  return pool[d(rng)];
}

int uniform_int(Rng& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

std::string two_digits(int v) { return (v < 10 ? "0" : "") + std::to_string(v); }

std::string digits(Rng& rng, int n) {
  std::string s;
  for (int i = 0; i < n; ++i) s += static_cast<char>('0' + uniform_int(rng, 0, 9));
  return s;
}

using Words = std::vector<std::string>;

const Words kMonths = {"January", "February", "March",     "April",   "May",      "June",
                       "July",    "August",   "September", "October", "November", "December"};
const Words kJobWords = {"Senior", "Software", "Engineer", "Data",  "Analyst",   "Magazine",  "features",
                         "editor", "Nurse",    "Teacher",  "Chef",  "Architect", "Accountant"};
const Words kCities = {"Augerdan", "Lyon", "Porto", "Bremen", "Ghent", "Turin", "Leeds", "Krakow"};
const Words kEmailLocal = {"alex", "sam", "kim", "jo", "max", "catherine"};
const Words kEmailHost = {"example", "mail", "inbox"};
const Words kTlds = {"com", "org", "net"};
const Words kColors = {"Black", "White", "Red", "Green", "Blue", "Purple", "Orange", "Teal"};
const Words kAgentPlatforms = {"Windows", "Macintosh", "Linux", "Android", "iPhone"};
const Words kAgentBrowsers = {"Mozilla", "Opera"};
const Words kCardProviders = {"Maestro", "Visa", "Mastercard", "Discover", "JCB", "Amex"};
const std::vector<Words> kCurrencies = {{"Bahraini", "dinar"}, {"Euro"},          {"Japanese", "yen"},
                                        {"Swiss", "franc"},    {"Indian", "rupee"}};
const Words kPhraseWords = {"Interfaccia", "estesa",   "Robust",   "Adaptive",  "Synergy",
                            "Integrated",  "Scalable", "Paradigm", "Framework", "Solution"};
const Words kStreetKinds = {"Street", "Road", "Avenue", "Lane"};
const Words kPlateCodes = {"GE", "CB", "AB", "KL", "MX", "ZT", "RW", "PH"};
const Words kExtensions = {"tiff", "pdf", "docx", "png", "csv", "json", "txt", "html"};
const Words kDomainWords = {"chretien", "alpha", "vertex", "orbit", "pixel"};
const Words kCryptos = {"Vertcoin", "Bitcoin", "Ethereum", "Litecoin", "Monero", "Dogecoin"};
const std::vector<Words> kTimezones = {
    {"Europe", "Paris"}, {"Asia", "Tokyo"}, {"America", "Chicago"}, {"Africa", "Cairo"}, {"Australia", "Sydney"}};
const Words kHobbies = {"Sleeping", "Reading", "Hiking", "Painting", "Chess", "Gardening", "Cycling", "Fishing"};
const Words kMarital = {"Widowed", "Married", "Single", "Divorced"};
const Words kPersonality = {"Extrovert", "Introvert", "Ambivert", "INTJ", "ENFP"};
const std::vector<Words> kBirthPlaces = {{"Seoul", "South Korea"}, {"Lima", "Peru"},   {"Oslo", "Norway"},
                                         {"Nairobi", "Kenya"},     {"Hanoi", "Vietnam"}, {"Quito", "Ecuador"}};
const Words kCompanies = {"Microsoft", "Google", "Siemens", "Toyota", "Nestle", "Samsung", "Oracle", "Nokia"};
const Words kMajors = {"Computer Science", "Civil Engineering", "Economics", "Philosophy",
                       "Organic Chemistry", "Applied Mathematics"};
const Words kUniversities = {"Stanford University", "Kyoto University", "University of Toronto", "ETH Zurich",
                             "Harvard University"};
const std::vector<Words> kWorkPlaces = {
    {"Singapore", "Singapore"}, {"Berlin", "Germany"}, {"Dublin", "Ireland"}, {"Toronto", "Canada"}, {"Austin", "USA"}};

Words flatten(const std::vector<Words>& groups) {
  Words out;
  for (const Words& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

Words words_of(const Words& phrases) {
  Words out;
  for (const std::string& p : phrases) {
    std::size_t i = 0;
    while (i < p.size()) {
      std::size_t j = p.find(' ', i);
      if (j == std::string::npos) j = p.size();
      if (j > i) out.push_back(p.substr(i, j - i));
      i = j + 1;
    }
  }
  return out;
}

Words concat(std::initializer_list<Words> lists) {
  Words out;
  for (const Words& l : lists) out.insert(out.end(), l.begin(), l.end());
  return out;
}

std::vector<AttributeSpec> build_catalog() {
  std::vector<AttributeSpec> c;
  auto add = [&](std::string name, std::function<std::string(Rng&)> gen, Words words) {
    c.push_back(AttributeSpec{std::move(name), std::move(gen), std::move(words)});
  };

  // Training attributes.
  add("marry date", [](Rng& r) {
    return std::to_string(uniform_int(r, 1980, 2023)) + "-" + two_digits(uniform_int(r, 1, 12)) + "-" +
           two_digits(uniform_int(r, 1, 28));
  }, {"-"});
  add("job title", [](Rng& r) {
    switch (uniform_int(r, 0, 3)) {
      case 0: return std::string("Magazine features editor");
      case 1: return pick(r, Words{"Senior", "Data"}) + " " + pick(r, Words{"Software", "Data"}) + " " +
                     pick(r, Words{"Engineer", "Analyst"});
      case 2: return pick(r, Words{"Nurse", "Teacher", "Chef", "Architect", "Accountant"});
      default: return "Senior " + pick(r, Words{"Nurse", "Teacher", "Chef", "Architect", "Accountant"});
    }
  }, kJobWords);
  add("current city", [](Rng& r) { return pick(r, kCities); }, kCities);
  add("email address", [](Rng& r) {
    return pick(r, kEmailLocal) + two_digits(uniform_int(r, 10, 99)) + "@" + pick(r, kEmailHost) + "." +
           pick(r, kTlds);
  }, concat({kEmailLocal, kEmailHost, kTlds, {"@", "."}}));
  add("phone number", [](Rng& r) { return "07" + digits(r, 9); }, {});
  add("favorite color", [](Rng& r) { return pick(r, kColors); }, kColors);
  add("user agent", [](Rng& r) {
    return pick(r, kAgentBrowsers) + "/5.0 (" + pick(r, kAgentPlatforms) + ")";
  }, concat({kAgentBrowsers, kAgentPlatforms, {"/", ".", "(", ")"}}));
  add("credit card provider", [](Rng& r) { return pick(r, kCardProviders); }, kCardProviders);
  add("currency used", [](Rng& r) {
    const Words& w = pick(r, kCurrencies);
    std::string s = w[0];
    for (std::size_t i = 1; i < w.size(); ++i) s += " " + w[i];
    return s;
  }, flatten(kCurrencies));
  add("catch phrase", [](Rng& r) {
    return pick(r, kPhraseWords) + " " + pick(r, kPhraseWords) + " " + pick(r, kPhraseWords);
  }, kPhraseWords);
  add("street address", [](Rng& r) {
    return pick(r, last_names()) + " " + pick(r, kStreetKinds) + " " + std::to_string(uniform_int(r, 1, 99));
  }, kStreetKinds);
  add("vehicle license plate", [](Rng& r) {
    return pick(r, kPlateCodes) + " " + digits(r, 4) + " " + pick(r, kPlateCodes);
  }, kPlateCodes);
  add("favorite file extension", [](Rng& r) { return pick(r, kExtensions); }, kExtensions);
  add("domain name", [](Rng& r) { return pick(r, kDomainWords) + "." + pick(r, kTlds); },
      concat({kDomainWords, kTlds, {"."}}));
  add("cryptocurrency", [](Rng& r) { return pick(r, kCryptos); }, kCryptos);
  add("timezone", [](Rng& r) {
    const Words& w = pick(r, kTimezones);
    return w[0] + "/" + w[1];
  }, concat({flatten(kTimezones), {"/"}}));
  add("isbn code", [](Rng& r) {
    return "978-" + digits(r, 1) + "-" + digits(r, 3) + "-" + digits(r, 5) + "-" + digits(r, 1);
  }, {"-"});
  add("lucky number", [](Rng& r) { return std::to_string(uniform_int(r, 1, 99)); }, {});
  add("hobby", [](Rng& r) { return pick(r, kHobbies); }, kHobbies);
  add("marital status", [](Rng& r) { return pick(r, kMarital); }, kMarital);
  add("personality type", [](Rng& r) { return pick(r, kPersonality); }, kPersonality);

  // Validation / test attributes.
  add("birth date", [](Rng& r) {
    return pick(r, kMonths) + " " + std::to_string(uniform_int(r, 1, 28)) + ", " +
           std::to_string(uniform_int(r, 1950, 2005));
  }, concat({kMonths, {","}}));
  add("birth place", [](Rng& r) {
    const Words& w = pick(r, kBirthPlaces);
    return w[0] + ", " + w[1];
  }, concat({words_of(flatten(kBirthPlaces)), {","}}));
  add("company", [](Rng& r) { return pick(r, kCompanies); }, kCompanies);
  add("major", [](Rng& r) { return pick(r, kMajors); }, words_of(kMajors));
  add("university", [](Rng& r) { return pick(r, kUniversities); }, words_of(kUniversities));
  add("work place", [](Rng& r) {
    const Words& w = pick(r, kWorkPlaces);
    return w[0] + ", " + w[1];
  }, concat({flatten(kWorkPlaces), {","}}));
  return c;
}

bool is_digit_token(const std::string& w) {
  return !w.empty() && std::all_of(w.begin(), w.end(), [](unsigned char ch) { return std::isdigit(ch); });
}

bool is_punct_token(const std::string& w) {
  return w.size() == 1 && !std::isalnum(static_cast<unsigned char>(w[0]));
}

}  // namespace

const std::vector<AttributeSpec>& attribute_catalog() {
  static const std::vector<AttributeSpec> catalog = build_catalog();
  return catalog;
}

const AttributeSpec& find_attribute(const std::string& name) {
  for (const AttributeSpec& a : attribute_catalog()) {
    if (a.name == name) return a;
  }
  throw std::invalid_argument("unknown attribute '" + name + "'");
}

std::vector<std::string> default_train_attributes() {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < 21; ++i) out.push_back(attribute_catalog()[i].name);
  return out;
}

std::vector<std::string> default_eval_attributes() {
  std::vector<std::string> out;
  for (std::size_t i = 21; i < attribute_catalog().size(); ++i) out.push_back(attribute_catalog()[i].name);
  return out;
}

const std::vector<std::string>& first_names() {
  static const Words names = {"Olivia",  "Daniel", "Ethan",  "Aiden",  "Elijah",  "Jeremy",  "Clarence", "Douglas",
                              "Gabriela", "Laetitia", "Franck", "Marcial", "Letizia", "Susann", "Olga",   "Erdal",
                              "Ornella", "Zoe",    "Gustavo", "Jeanne", "Maria",   "Ines",    "Theo",     "Anais",
                              "Eutimio", "Salvi",  "Liam",   "Noah",   "Emma",    "Ava",     "Mia",      "Lucas",
                              "Mateo",   "Sofia",  "Chloe",  "Hugo",   "Nora",    "Ivan",    "Yuki",     "Omar"};
  return names;
}

const std::vector<std::string>& last_names() {
  static const Words names = {"Garcia",  "Lee",      "Chen",    "Clark",   "Gomez",    "Robinson", "Wright",
                              "Byrd",    "Baker",    "Jesus",   "Guyot",   "Jourdan",  "Escalona", "Yuste",
                              "Fagotto", "Jacobi",   "Torre",   "Rodriguez", "Malzer", "Tomasini", "Chauvet",
                              "Valles",  "Brunet",   "Novoa",   "Sarabia", "Macedo",   "Gilbert",  "Tejada",
                              "Ibanez",  "Toscanini", "Guardia", "Moles",  "Muller",   "Rossi",    "Novak",
                              "Kowalski", "Tanaka",  "Silva",   "Dubois",  "Jensen"};
  return names;
}

std::string make_summary(const std::string& attribute, const std::string& person, const std::string& value) {
  return "The " + attribute + " of " + person + " is " + value + ".";
}

std::vector<TokenId> BiographyRecord::prompt() const {
  std::vector<TokenId> p = biography;
  p.push_back(Vocabulary::kSummary);
  p.push_back(Vocabulary::kColon);
  return p;
}

const std::vector<BiographyRecord>& Corpus::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return train;
}

namespace {

std::string make_person(Rng& rng, std::unordered_set<std::string>& used) {
  for (;;) {
    std::string name = pick(rng, first_names()) + " " + pick(rng, last_names());
    if (uniform_int(rng, 0, 1) == 1) name += " " + pick(rng, last_names());
    if (used.insert(name).second) return name;
  }
}

BiographyRecord make_record(Rng& rng, std::size_t id, Split split, const std::string& attribute,
                            std::unordered_set<std::string>& used_names, const LengthRange& filler,
                            const Vocabulary& vocab) {
  BiographyRecord rec;
  rec.id = id;
  rec.split = split;
  rec.person = make_person(rng, used_names);
  rec.attribute = attribute;
  rec.value = find_attribute(attribute).generate(rng);
  rec.summary = make_summary(rec.attribute, rec.person, rec.value);

  const std::vector<TokenId> summary_ids = vocab.encode(rec.summary);
  const std::vector<TokenId> value_ids = vocab.encode(rec.value);
  rec.answer_start = vocab.encode("The " + rec.attribute + " of " + rec.person + " is").size();
  rec.answer_end = rec.answer_start + value_ids.size();
  if (!std::equal(value_ids.begin(), value_ids.end(), summary_ids.begin() + static_cast<std::ptrdiff_t>(rec.answer_start))) {
    throw std::logic_error("gen_records: value tokens do not align with the summary");
  }
  rec.gold_output = summary_ids;
  rec.gold_output.push_back(Vocabulary::kEos);

  const std::vector<TokenId> filler_ids = vocab.encode(kFillerSentence);
  std::uniform_int_distribution<std::size_t> len_dist(filler.min, std::max(filler.min, filler.max));
  const std::size_t filler_tokens = len_dist(rng);
  const std::size_t sentences = (filler_tokens + filler_ids.size() / 2) / filler_ids.size();
  std::uniform_int_distribution<std::size_t> pos_dist(0, sentences);
  const std::size_t insert_at = pos_dist(rng);

  for (std::size_t s = 0; s <= sentences; ++s) {
    if (s == insert_at) {
      rec.summary_offset = rec.biography.size();
      rec.biography.insert(rec.biography.end(), summary_ids.begin(), summary_ids.end());
    }
    if (s < sentences) rec.biography.insert(rec.biography.end(), filler_ids.begin(), filler_ids.end());
  }
  return rec;
}

}  // namespace

Corpus gen_records(const DatagenConfig& config, const Vocabulary& vocab) {
  const std::set<std::string> train_set(config.train_attributes.begin(), config.train_attributes.end());
  for (const std::string& a : config.eval_attributes) {
    if (train_set.contains(a)) {
      throw std::invalid_argument("gen_records: attribute '" + a + "' is in both train and eval sets");
    }
  }
  for (const std::string& a : config.train_attributes) find_attribute(a);
  for (const std::string& a : config.eval_attributes) find_attribute(a);
  if (config.train_count > 0 && config.train_attributes.empty()) {
    throw std::invalid_argument("gen_records: no train attributes");
  }
  if ((config.val_count > 0 || config.test_count > 0) && config.eval_attributes.empty()) {
    throw std::invalid_argument("gen_records: no eval attributes");
  }

  Corpus corpus;
  std::unordered_set<std::string> used_names;
  std::size_t next_id = 0;
  auto fill = [&](Split split, std::size_t count, const std::vector<std::string>& attrs,
                  const LengthRange& filler, std::vector<BiographyRecord>& out, std::uint64_t stream) {
    Rng rng = seeded_engine({config.seed, stream});
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      // Evaluation splits cycle through attributes so each is equally represented.
      const std::string& attr = split == Split::Train ? pick(rng, attrs) : attrs[i % attrs.size()];
      out.push_back(make_record(rng, next_id++, split, attr, used_names, filler, vocab));
    }
  };
  fill(Split::Train, config.train_count, config.train_attributes, config.train_filler, corpus.train, 1);
  fill(Split::Val, config.val_count, config.eval_attributes, config.val_filler, corpus.val, 2);
  fill(Split::Test, config.test_count, config.eval_attributes, config.test_filler, corpus.test, 3);
  return corpus;
}

TokenLabel label_token(TokenId emitted, TokenId gold, const Vocabulary& vocab) {
  if (emitted == gold) return TokenLabel::Correct;
  if (vocab.is_unknown(emitted)) return TokenLabel::Unknown;
  return TokenLabel::Hallucinated;
}

TokenLabel label_answer_token(const BiographyRecord& record, std::size_t pos, TokenId emitted,
                              const Vocabulary& vocab) {
  if (pos < record.answer_start || pos >= record.answer_end) {
    throw std::out_of_range("label_answer_token: position " + std::to_string(pos) + " is outside the answer span");
  }
  return label_token(emitted, record.gold_output[pos], vocab);
}

std::vector<TokenId> distractor_pool(const BiographyRecord& record, std::size_t pos, const Vocabulary& vocab) {
  const TokenId gold = record.gold_output.at(pos);
  const std::string& gold_word = vocab.word(gold);
  std::vector<TokenId> pool;
  auto push = [&](const std::string& w) {
    const TokenId id = vocab.id(w);
    if (id != gold && std::find(pool.begin(), pool.end(), id) == pool.end()) pool.push_back(id);
  };
  if (is_digit_token(gold_word)) {
    // Same-width digit chunks: "9" competes with "8", "29" with "15".
    if (gold_word.size() == 1) {
      for (int d = 0; d < 10; ++d) push(std::to_string(d));
    } else {
      for (int d = 0; d < 100; ++d) push(two_digits(d));
    }
  } else {
    for (const std::string& w : find_attribute(record.attribute).vocabulary_words) {
      if (!is_punct_token(w) && !is_digit_token(w)) push(w);
    }
  }
  if (pool.empty()) {
    for (const std::string& w : last_names()) push(w);
  }
  return pool;
}

void write_corpus(std::ostream& out, const std::vector<BiographyRecord>& records, Split split, std::uint64_t seed,
                  const Vocabulary& vocab) {
  json header = {{"schema", "utaca.corpus"},
                 {"version", kCorpusSchemaVersion},
                 {"seed", seed},
                 {"split", to_string(split)},
                 {"count", records.size()},
                 {"vocab_size", vocab.size()},
                 {"vocab_fingerprint", vocab.fingerprint()}};
  out << header.dump() << '\n';
  for (const BiographyRecord& r : records) {
    json j = {{"id", r.id},
              {"split", to_string(r.split)},
              {"person", r.person},
              {"attribute", r.attribute},
              {"value", r.value},
              {"summary", r.summary},
              {"biography", r.biography},
              {"gold_output", r.gold_output},
              {"answer_start", r.answer_start},
              {"answer_end", r.answer_end},
              {"summary_offset", r.summary_offset}};
    out << j.dump() << '\n';
  }
}

CorpusFile read_corpus(std::istream& in, const Vocabulary& vocab) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("read_corpus: missing header line");
  const json header = json::parse(line);
  if (header.value("schema", "") != "utaca.corpus") throw std::runtime_error("read_corpus: not a corpus file");
  if (header.at("version").get<int>() != kCorpusSchemaVersion) {
    throw std::runtime_error("read_corpus: unsupported schema version");
  }
  if (header.at("vocab_fingerprint").get<std::uint64_t>() != vocab.fingerprint()) {
    throw std::runtime_error("read_corpus: corpus was written with a different vocabulary");
  }
  CorpusFile file;
  file.seed = header.at("seed").get<std::uint64_t>();
  file.split = split_from_string(header.at("split").get<std::string>());
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    BiographyRecord r;
    r.id = j.at("id").get<std::size_t>();
    r.split = split_from_string(j.at("split").get<std::string>());
    r.person = j.at("person").get<std::string>();
    r.attribute = j.at("attribute").get<std::string>();
    r.value = j.at("value").get<std::string>();
    r.summary = j.at("summary").get<std::string>();
    r.biography = j.at("biography").get<std::vector<TokenId>>();
    r.gold_output = j.at("gold_output").get<std::vector<TokenId>>();
    r.answer_start = j.at("answer_start").get<std::size_t>();
    r.answer_end = j.at("answer_end").get<std::size_t>();
    r.summary_offset = j.at("summary_offset").get<std::size_t>();
    file.records.push_back(std::move(r));
  }
  return file;
}

}  // namespace utaca
