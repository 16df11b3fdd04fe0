#pragma once

// Self-describing model checkpoint: format version, hyper-parameters, both
// vocabularies, named parameter arrays and the training step.
//
// Layout (text header, raw little-endian float64 payloads):
//
//   glossmt-checkpoint <version>
//   <key> = <value>            hyper-parameters, step, precision
//   [src_vocab] <n>            then n token lines
//   [tgt_vocab] <n>
//   [params] <n>
//   <name> <rank> <dims...>    followed by 8*size bytes and a newline

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "glossmt/data.hpp"
#include "glossmt/error.hpp"
#include "glossmt/hyperparams.hpp"
#include "glossmt/kv.hpp"
#include "glossmt/model.hpp"

namespace glossmt {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume little-endian hosts");

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr int kFormatVersion = 1;
  static constexpr const char* kMagic = "glossmt-checkpoint";

  HyperParams hp;
  Vocabulary src_vocab;
  Vocabulary tgt_vocab;
  std::vector<NamedArray> params;
  std::uint64_t step = 0;
  int precision = 64;

  template <class S>
  static Checkpoint capture(const TransformerModel<S>& model, const Vocabulary& src_vocab,
                            const Vocabulary& tgt_vocab, std::uint64_t step) {
    Checkpoint c;
    c.hp = model.hyper_params();
    c.src_vocab = src_vocab;
    c.tgt_vocab = tgt_vocab;
    c.step = step;
    c.precision = sizeof(S) == 4 ? 32 : 64;
    for (const auto& [name, t] : model.parameters()) {
      c.params.push_back({name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
    }
    return c;
  }

  // Rebuilds a model; names and shapes must match the architecture exactly.
  template <class S>
  TransformerModel<S> to_model() const {
    TransformerModel<S> model(hp, src_vocab.size(), tgt_vocab.size(), 0);
    const auto& slots = model.parameters();
    if (slots.size() != params.size()) {
      throw CompatibilityError("checkpoint: holds " + std::to_string(params.size()) +
                               " arrays, architecture expects " + std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      auto tensor = slots[i].second;
      if (slots[i].first != params[i].name || tensor.shape() != params[i].shape) {
        throw CompatibilityError("checkpoint: array '" + params[i].name + "' " + shape_string(params[i].shape) +
                                 " does not match '" + slots[i].first + "' " + shape_string(tensor.shape()));
      }
      auto dst = tensor.mutable_data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<S>(params[i].values[j]);
    }
    return model;
  }

  std::string serialize() const {
    std::string out = std::string(kMagic) + " " + std::to_string(kFormatVersion) + "\n";
    KeyValues kv;
    hp.store(kv, "hp.");
    kv.set("step", std::to_string(step));
    kv.set("precision", std::to_string(precision));
    out += kv.to_string();
    auto vocab_block = [&](const char* tag, const Vocabulary& v) {
      out += std::string(tag) + " " + std::to_string(v.size()) + "\n" + v.serialize();
    };
    vocab_block("[src_vocab]", src_vocab);
    vocab_block("[tgt_vocab]", tgt_vocab);
    out += "[params] " + std::to_string(params.size()) + "\n";
    for (const auto& p : params) {
      out += p.name + " " + std::to_string(p.shape.size());
      for (auto d : p.shape) out += " " + std::to_string(d);
      out += "\n";
      const std::size_t bytes = p.values.size() * sizeof(double);
      const std::size_t at = out.size();
      out.resize(at + bytes);
      std::memcpy(out.data() + at, p.values.data(), bytes);
      out += "\n";
    }
    return out;
  }

  static Checkpoint deserialize(const std::string& bytes) {
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
      const auto nl = bytes.find('\n', pos);
      if (nl == std::string::npos) throw CompatibilityError("checkpoint: truncated header");
      std::string line = bytes.substr(pos, nl - pos);
      pos = nl + 1;
      return line;
    };
    const std::string magic = next_line();
    const std::string expected = std::string(kMagic) + " " + std::to_string(kFormatVersion);
    if (magic.rfind(kMagic, 0) != 0) throw CompatibilityError("checkpoint: not a glossmt checkpoint");
    if (magic != expected) throw CompatibilityError("checkpoint: unsupported format '" + magic + "'");

    Checkpoint c;
    KeyValues kv;
    std::string line;
    while ((line = next_line()).rfind("[src_vocab]", 0) != 0) {
      kv.merge(KeyValues::parse(line, "checkpoint"));
    }
    c.hp.apply(kv, "hp.");
    c.step = static_cast<std::uint64_t>(kv.get_int("step"));
    c.precision = static_cast<int>(kv.get_int("precision"));

    auto read_vocab = [&](const std::string& header, const char* tag) {
      if (header.rfind(tag, 0) != 0) throw CompatibilityError(std::string("checkpoint: expected ") + tag);
      const auto n = static_cast<std::size_t>(parse_integer(header.substr(std::strlen(tag)), tag));
      std::stringstream ss;
      for (std::size_t i = 0; i < n; ++i) ss << next_line() << '\n';
      return Vocabulary::parse(ss, "checkpoint vocabulary");
    };
    c.src_vocab = read_vocab(line, "[src_vocab]");
    c.tgt_vocab = read_vocab(next_line(), "[tgt_vocab]");

    line = next_line();
    if (line.rfind("[params]", 0) != 0) throw CompatibilityError("checkpoint: expected [params]");
    const auto count = static_cast<std::size_t>(parse_integer(line.substr(8), "[params]"));
    for (std::size_t i = 0; i < count; ++i) {
      std::istringstream head(next_line());
      NamedArray a;
      std::size_t rank = 0;
      head >> a.name >> rank;
      a.shape.resize(rank);
      for (auto& d : a.shape) head >> d;
      if (!head || a.name.empty()) throw CompatibilityError("checkpoint: malformed array header");
      const std::size_t n = shape_size(a.shape);
      const std::size_t nbytes = n * sizeof(double);
      if (pos + nbytes + 1 > bytes.size() || bytes[pos + nbytes] != '\n') {
        throw CompatibilityError("checkpoint: truncated payload for '" + a.name + "'");
      }
      a.values.resize(n);
      std::memcpy(a.values.data(), bytes.data() + pos, nbytes);
      pos += nbytes + 1;
      c.params.push_back(std::move(a));
    }
    if (pos != bytes.size()) throw CompatibilityError("checkpoint: trailing bytes");
    return c;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    const std::string bytes = serialize();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
  }
};

}  // namespace glossmt
