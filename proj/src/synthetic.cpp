#include <array>
#include <fstream>
#include <string>
#include <vector>

#include "featflow/corpus.hpp"
#include "featflow/rng.hpp"

namespace featflow::synthetic {

namespace {

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& items) {
  std::uniform_int_distribution<std::size_t> d(0, N - 1);
  return items[d(rng)];
}

int uniform(Rng& rng, int lo, int hi) {
  std::uniform_int_distribution<int> d(lo, hi);
  return d(rng);
}

constexpr std::array<const char*, 6> kNames{"Lily", "Tom", "Mia", "Ben", "Sam", "Zoe"};
constexpr std::array<const char*, 6> kAnimals{"cat", "dog", "bird", "fox", "frog", "bear"};
constexpr std::array<const char*, 6> kAdjectives{"big", "small", "happy", "red", "little", "kind"};
constexpr std::array<const char*, 5> kPlaces{"park", "garden", "forest", "house", "river"};
constexpr std::array<const char*, 5> kVerbs{"play", "run", "jump", "sing", "read"};
constexpr std::array<const char*, 5> kObjects{"ball", "book", "kite", "apple", "toy"};
constexpr std::array<const char*, 4> kFeelings{"happy", "sad", "tired", "excited"};

constexpr std::array<const char*, 8> kVars{"x", "y", "count", "total", "value", "item", "data", "result"};
constexpr std::array<const char*, 6> kFuncs{"add", "scale", "update", "compute", "merge", "check"};
constexpr std::array<const char*, 4> kOps{"+", "-", "*", "//"};
constexpr std::array<const char*, 3> kCmp{">", "<", "=="};

std::string story(Rng& rng) {
  const std::string name = pick(rng, kNames);
  const std::string animal = pick(rng, kAnimals);
  std::string s = "Once upon a time, there was a ";
  s += pick(rng, kAdjectives);
  s += " " + animal + " named " + name + ".";
  const int n = uniform(rng, 3, 6);
  for (int i = 0; i < n; ++i) {
    switch (uniform(rng, 0, 4)) {
      case 0:
        s += " " + name + " liked to " + pick(rng, kVerbs) + " in the " + pick(rng, kPlaces) + ".";
        break;
      case 1:
        s += " One day, " + name + " found a " + pick(rng, kAdjectives) + " " + pick(rng, kObjects) + ".";
        break;
      case 2:
        s += " " + name + " was very " + pick(rng, kFeelings) + ".";
        break;
      case 3:
        s += " The " + animal + " said, \"Let us " + pick(rng, kVerbs) + " together!\"";
        break;
      default:
        s += " They played with the " + std::string(pick(rng, kObjects)) + " all day.";
        break;
    }
  }
  s += " The end.";
  return s;
}

std::string function(Rng& rng) {
  const std::string a = pick(rng, kVars);
  std::string b = pick(rng, kVars);
  while (b == a) b = pick(rng, kVars);
  const std::string v = "result";
  std::string s = "def ";
  s += pick(rng, kFuncs);
  s += "(" + a + ", " + b + "):\n";
  s += "    " + v + " = " + a + " " + pick(rng, kOps) + " " + b + "\n";
  const int n = uniform(rng, 1, 3);
  for (int i = 0; i < n; ++i) {
    switch (uniform(rng, 0, 2)) {
      case 0:
        s += "    if " + v + " " + pick(rng, kCmp) + " " + std::to_string(uniform(rng, 0, 9)) + ":\n";
        s += "        return " + v + "\n";
        break;
      case 1:
        s += "    for i in range(" + std::to_string(uniform(rng, 1, 9)) + "):\n";
        s += "        " + v + " = " + v + " " + pick(rng, kOps) + " i\n";
        break;
      default:
        s += "    " + b + " = " + b + " " + pick(rng, kOps) + " " + std::to_string(uniform(rng, 1, 9)) + "\n";
        break;
    }
  }
  s += "    return " + v + "\n";
  return s;
}

}  // namespace

std::vector<std::string> english_like(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xE11));
  std::vector<std::string> out;
  out.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) out.push_back(story(rng));
  return out;
}

std::vector<std::string> code_like(std::size_t n_docs, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xC0DE));
  std::vector<std::string> out;
  out.reserve(n_docs);
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::string doc = function(rng);
    if (uniform(rng, 0, 1) == 1) doc += "\n" + function(rng);
    out.push_back(std::move(doc));
  }
  return out;
}

std::string repeating(std::string_view unit, std::size_t length) {
  std::string out;
  out.reserve(length);
  while (out.size() < length) out += unit;
  out.resize(length);
  return out;
}

void write_plain_text(const std::filesystem::path& path, std::span<const std::string> docs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write corpus '" + path.string() + "'");
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (i > 0) out << kDocSeparator << '\n';
    out << docs[i] << '\n';
  }
}

}  // namespace featflow::synthetic
