#pragma once

// Checkpoint container:
//   "WTLE" | u32 version | u64 header bytes | JSON header | float32 payloads
// All integers and floats are little-endian. The header names the model kind,
// its config and a tensor index of (name, shape, offset, length) with offsets
// relative to the first payload byte, in index order.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>

#include "json.hpp"
#include "whistle/tle/tle.hpp"

namespace whistle {

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

inline constexpr char kCheckpointMagic[4] = {'W', 'T', 'L', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::ordered_json asr_config_json(const AsrConfig& c) {
  return {{"feat_dim", c.feat_dim}, {"n_max", c.n_max}, {"k", c.k}, {"h", c.h}, {"heads", c.heads}, {"ffn", c.ffn},
          {"enc_blocks", c.enc_blocks}, {"dec_blocks", c.dec_blocks}, {"vocab", c.vocab}, {"l_max", c.l_max}};
}

inline AsrConfig asr_config_from(const nlohmann::json& j) {
  AsrConfig c;
  j.at("feat_dim").get_to(c.feat_dim);
  j.at("n_max").get_to(c.n_max);
  j.at("k").get_to(c.k);
  j.at("h").get_to(c.h);
  j.at("heads").get_to(c.heads);
  j.at("ffn").get_to(c.ffn);
  j.at("enc_blocks").get_to(c.enc_blocks);
  j.at("dec_blocks").get_to(c.dec_blocks);
  j.at("vocab").get_to(c.vocab);
  j.at("l_max").get_to(c.l_max);
  check_asr_config(c);
  return c;
}

inline nlohmann::ordered_json tle_config_json(const TleConfig& c) {
  return {{"vocab", c.vocab}, {"l_max", c.l_max}, {"t_enc", c.t_enc}, {"h", c.h}, {"embed", c.embed},
          {"channels", c.channels}, {"latent", c.latent}, {"beta", c.beta}, {"length_head", c.length_head},
          {"n_phonemes", c.n_phonemes}, {"max_pron", c.max_pron}};
}

inline TleConfig tle_config_from(const nlohmann::json& j) {
  TleConfig c;
  j.at("vocab").get_to(c.vocab);
  j.at("l_max").get_to(c.l_max);
  j.at("t_enc").get_to(c.t_enc);
  j.at("h").get_to(c.h);
  j.at("embed").get_to(c.embed);
  j.at("channels").get_to(c.channels);
  j.at("latent").get_to(c.latent);
  j.at("beta").get_to(c.beta);
  j.at("length_head").get_to(c.length_head);
  j.at("n_phonemes").get_to(c.n_phonemes);
  j.at("max_pron").get_to(c.max_pron);
  check_tle_config(c);
  return c;
}

namespace detail {

inline std::string checkpoint_bytes(const std::string& kind, const nlohmann::ordered_json& config,
                                    const ParamStore<float>& params) {
  nlohmann::ordered_json header;
  header["kind"] = kind;
  header["config"] = config;
  auto& index = header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : params.tensors()) {
    const std::uint64_t len = t.size() * sizeof(float);
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"length", len}});
    offset += len;
  }
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 4);
  auto put = [&out](const auto& v) { out.append(reinterpret_cast<const char*>(&v), sizeof(v)); };
  put(kCheckpointVersion);
  put(static_cast<std::uint64_t>(h.size()));
  out += h;
  for (const auto& [_, t] : params.tensors()) out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  return out;
}

inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw Error("cannot write '" + path + "'");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("short write to '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline void save_checkpoint(const AsrModel<float>& m, const std::string& path) {
  detail::write_file_atomic(path, detail::checkpoint_bytes("asr", asr_config_json(m.config), m.params));
}

inline void save_checkpoint(const TleModel<float>& m, const std::string& path) {
  detail::write_file_atomic(path, detail::checkpoint_bytes("tle", tle_config_json(m.config), m.params));
}

using AnyModel = std::variant<AsrModel<float>, TleModel<float>>;

/// Parses and validates a checkpoint; every structural problem is a FormatError naming the file.
inline AnyModel load_checkpoint(const std::string& path) {
  auto fail = [&](const std::string& why) -> FormatError { return FormatError("checkpoint '" + path + "': " + why); };
  std::ifstream f(path, std::ios::binary);
  if (!f) throw fail("cannot open");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) throw fail("bad magic");
  std::uint32_t version;
  std::uint64_t hlen;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&hlen, bytes.data() + 8, 8);
  if (version != kCheckpointVersion) throw fail("unsupported version " + std::to_string(version));
  if (hlen > bytes.size() - 16) throw fail("truncated header");
  const size_t base = 16 + hlen;
  const size_t payload = bytes.size() - base;

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + static_cast<long>(base));
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("malformed header: ") + e.what());
  }

  try {
    const auto kind = header.at("kind").get<std::string>();
    ParamStore<float> params;
    std::uint64_t expect = 0;
    for (const auto& e : header.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto len = e.at("length").get<std::uint64_t>();
      for (auto d : shape)
        if (d < 0) throw fail("tensor '" + name + "' has a negative extent");
      // Payloads are packed in index order, so each offset is fixed by its predecessors.
      if (off != expect) throw fail("tensor '" + name + "' offset " + std::to_string(off) + ", expected " + std::to_string(expect));
      if (len != static_cast<std::uint64_t>(numel(shape)) * sizeof(float)) throw fail("tensor '" + name + "' length does not match its shape");
      if (off + len > payload) throw fail("tensor '" + name + "' runs past the end of the file");
      Tensor<float> t(shape);
      std::memcpy(t.data(), bytes.data() + base + off, len);
      params.add(name, std::move(t));
      expect = off + len;
    }
    if (expect != payload) throw fail("trailing bytes after the last tensor");

    auto check_names = [&](const ParamStore<float>& ref) {
      for (const auto& [name, t] : ref.tensors()) {
        if (!params.contains(name)) throw fail("missing tensor '" + name + "'");
        if (params.get(name).shape() != t.shape()) throw fail("tensor '" + name + "' has the wrong shape for the config");
      }
      if (ref.tensors().size() != params.tensors().size()) throw fail("unexpected extra tensors");
    };
    if (kind == "asr") {
      AsrModel<float> m{asr_config_from(header.at("config")), {}};
      check_names(init_asr<float>(m.config, 0).params);
      m.params = std::move(params);
      return m;
    }
    if (kind == "tle") {
      TleModel<float> m{tle_config_from(header.at("config")), {}};
      // shapes depend only on the config; a stand-in lexicon is enough to build the reference
      World stub;
      stub.config.n_phonemes = m.config.n_phonemes;
      stub.words.assign(static_cast<size_t>(m.config.vocab - kFirstWord), "");
      stub.pronunciations.assign(stub.words.size(), std::vector<int>{0});
      const auto ref = init_tle<float>(m.config, stub, 0).params;
      check_names(ref);
      m.params = std::move(params);
      return m;
    }
    throw fail("unknown model kind '" + kind + "'");
  } catch (const nlohmann::json::exception& e) {
    throw fail(std::string("bad header field: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(std::string("bad config: ") + e.what());
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw fail(e.what());
  }
}

inline AsrModel<float> load_asr(const std::string& path) {
  auto m = load_checkpoint(path);
  if (!std::holds_alternative<AsrModel<float>>(m)) throw FormatError("checkpoint '" + path + "' is not a recognizer");
  return std::get<AsrModel<float>>(std::move(m));
}

inline TleModel<float> load_tle(const std::string& path) {
  auto m = load_checkpoint(path);
  if (!std::holds_alternative<TleModel<float>>(m)) throw FormatError("checkpoint '" + path + "' is not a TLE");
  return std::get<TleModel<float>>(std::move(m));
}

}  // namespace whistle
