/*
 * Copyright 2026 the uma-split authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "umasplit/serialize.hpp"

using namespace umasplit;

namespace {

ParamMap sample_params() {
  ParamMap p;
  p.emplace("enc.w", Tensor({2, 3}, {1.5, -2.25, 0.0, 1e-300, 3.14159, -0.5}));
  p.emplace("enc.b", Tensor({3}, {0.25, 0.5, 0.75}));
  p.emplace("step", Tensor::scalar(1234.0));
  return p;
}

}  // namespace

TEST_CASE("parameter container round-trips bit-exactly", "[serialize]") {
  ParamMap p = sample_params();
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  save_params(p, ss);
  ParamMap q = load_params(ss);
  REQUIRE(q.size() == p.size());
  for (const auto& [name, t] : p) {
    REQUIRE(q.count(name) == 1);
    REQUIRE(q.at(name).shape() == t.shape());
    REQUIRE(q.at(name).values() == t.values());
  }

  SECTION("two saves of the same map produce identical bytes") {
    std::stringstream s2(std::ios::in | std::ios::out | std::ios::binary);
    save_params(p, s2);
    REQUIRE(ss.str() == s2.str());
  }
}

TEST_CASE("parameter container rejects malformed input", "[serialize]") {
  ParamMap p = sample_params();
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  save_params(p, ss);
  std::string bytes = ss.str();

  SECTION("bad magic") {
    std::string corrupt = bytes;
    corrupt[0] = 'X';
    std::istringstream is(corrupt, std::ios::binary);
    REQUIRE_THROWS_MATCHES(load_params(is), FormatError,
                           Catch::Matchers::Message("bad magic: expected UMAW"));
  }
  SECTION("unsupported version") {
    std::string corrupt = bytes;
    corrupt[4] = 9;
    std::istringstream is(corrupt, std::ios::binary);
    REQUIRE_THROWS_AS(load_params(is), FormatError);
  }
  SECTION("truncation is reported with a byte offset") {
    std::string cut = bytes.substr(0, bytes.size() - 3);
    std::istringstream is(cut, std::ios::binary);
    try {
      load_params(is);
      FAIL("expected FormatError");
    } catch (const FormatError& e) {
      REQUIRE(std::string(e.what()).find("byte offset") != std::string::npos);
    }
  }
}

TEST_CASE("parameter files are written atomically", "[serialize]") {
  auto dir = std::filesystem::temp_directory_path() / "umasplit-serialize-test";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "params.umaw").string();
  ParamMap p = sample_params();
  save_params_file(p, path);
  REQUIRE_FALSE(std::filesystem::exists(path + ".tmp"));
  ParamMap q = load_params_file(path);
  REQUIRE(q.at("enc.w").values() == p.at("enc.w").values());
  std::filesystem::remove_all(dir);
}

TEST_CASE("config files are flat key=value text", "[serialize]") {
  std::istringstream is(
      "# comment\n"
      "steps=2000\n"
      "lr=0.001\n"
      "  label=internal spaces kept \n"
      "\n");
  ConfigMap cfg = load_config(is);
  REQUIRE(cfg.size() == 3);
  REQUIRE(config_get_i64(cfg, "steps", 0) == 2000);
  REQUIRE(config_get_f64(cfg, "lr", 0.0) == Catch::Approx(0.001));
  REQUIRE(config_get(cfg, "label", "") == "internal spaces kept");
  REQUIRE(config_get(cfg, "missing", "fallback") == "fallback");

  SECTION("missing separator") {
    std::istringstream bad("novalue\n");
    REQUIRE_THROWS_AS(load_config(bad), FormatError);
  }
  SECTION("duplicate key") {
    std::istringstream bad("a=1\na=2\n");
    REQUIRE_THROWS_AS(load_config(bad), FormatError);
  }
  SECTION("typed getters validate") {
    std::istringstream odd("x=abc\n");
    ConfigMap c = load_config(odd);
    REQUIRE_THROWS_AS(config_get_f64(c, "x", 0.0), FormatError);
    REQUIRE_THROWS_AS(config_get_i64(c, "x", 0), FormatError);
  }
  SECTION("doubles survive a text round-trip") {
    ConfigMap c{{"v", f64_to_string(0.1 + 0.2)}};
    REQUIRE(config_get_f64(c, "v", 0.0) == 0.1 + 0.2);
  }
}
