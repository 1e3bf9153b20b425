#pragma once

// Run manifest: what was run, with which config, when, and what it produced.

#include <chrono>
#include <ctime>
#include <filesystem>

#include "whistle/cli/checkpoint.hpp"
#include "whistle/cli/config.hpp"

#ifndef WHISTLE_BUILD_ID
#define WHISTLE_BUILD_ID "unknown"
#endif

namespace whistle {

inline std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class Manifest {
 public:
  Manifest(std::string command, const Config& c, std::vector<std::uint64_t> seeds)
      : start_(std::chrono::steady_clock::now()) {
    j_["command"] = std::move(command);
    j_["build"] = WHISTLE_BUILD_ID;
    j_["config_hash"] = config_hash(c);
    j_["seeds"] = std::move(seeds);
    j_["started"] = utc_now();
    j_["metrics"] = nlohmann::ordered_json::object();
    j_["outputs"] = nlohmann::ordered_json::array();
  }

  nlohmann::ordered_json& metrics() { return j_["metrics"]; }
  void output(const std::filesystem::path& p) { j_["outputs"].push_back(p.filename().string()); }

  void write(const std::filesystem::path& dir) {
    j_["finished"] = utc_now();
    j_["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    detail::write_file_atomic((dir / "manifest.json").string(), j_.dump(2) + "\n");
  }

 private:
  nlohmann::ordered_json j_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace whistle
