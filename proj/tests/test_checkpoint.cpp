// Checkpoint persistence: f32 round-trips, digests, tamper detection.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dkd/checkpoint.hpp"
#include "dkd/losses.hpp"
#include "dkd/model.hpp"
#include "dkd/rng.hpp"
#include "doctest.h"

using namespace dkd;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  const fs::path p = fs::temp_directory_path() / "dkd_ckpt_test";
  fs::create_directories(p);
  return p;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::vector<char>((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
}

Tensor random_batch(Rng& rng, int n, int c, int h, int w) {
  std::vector<double> v(static_cast<std::size_t>(n) * c * h * w);
  for (double& x : v) x = rng.uniform();
  return Tensor::from(v, {n, c, h, w}, false);
}

}  // namespace

TEST_CASE("sha256 matches the published test vector") {
  CHECK(sha256_hex("abc", 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("", 0) ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("toy checkpoint round-trips parameters and metadata exactly") {
  const std::string path = (test_dir() / "toy.ckpt").string();
  ModelGraph m = build_model(Arch::toy, 42);
  CheckpointMeta meta;
  meta.arch = Arch::toy;
  meta.tap = m.tap();
  meta.mode = "dkd";
  meta.zeta = 0.9;
  meta.seed = 42;
  save_checkpoint(path, m, meta);

  CheckpointMeta back;
  ModelGraph loaded = load_checkpoint(path, &back);
  CHECK(back.format_version == 1);
  CHECK(back.arch == Arch::toy);
  CHECK(back.tap == m.tap());
  CHECK(back.mode == "dkd");
  CHECK(back.zeta == 0.9);
  CHECK(back.seed == 42);
  REQUIRE(loaded.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(loaded.parameters()[i].values() == m.parameters()[i].values());

  // Same weights, same tap: forwards agree bit for bit.
  Rng rng(7);
  Tensor x = random_batch(rng, 4, 1, 8, 8);
  const ForwardResult a = m.forward(x);
  const ForwardResult b = loaded.forward(x);
  CHECK(a.logits.values() == b.logits.values());
  CHECK(a.latent.values() == b.latent.values());
}

TEST_CASE("round-trip stays lossless after f32-snapped training steps") {
  const std::string path = (test_dir() / "trained.ckpt").string();
  ModelGraph m = build_model(Arch::toy, 43);
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.snap_to_f32 = true;
  Rng rng(8);
  for (int step = 0; step < 5; ++step) {
    Tensor x = random_batch(rng, 8, 1, 8, 8);
    std::vector<int> labels(8);
    for (int& l : labels) l = static_cast<int>(rng.uniform_int(10));
    const ForwardResult fwd = m.forward(x);
    backward(ce_loss(fwd.probs, labels));
    adam_step(m.parameters(), st, cfg);
  }
  save_checkpoint(path, m, CheckpointMeta{});
  ModelGraph loaded = load_checkpoint(path);
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(loaded.parameters()[i].values() == m.parameters()[i].values());
}

TEST_CASE("lenet checkpoint reproduces forwards bit-identically") {
  const std::string path = (test_dir() / "lenet.ckpt").string();
  ModelGraph m = build_model(Arch::lenet_small, 44);
  CheckpointMeta meta;
  meta.arch = Arch::lenet_small;
  meta.tap = m.tap();
  save_checkpoint(path, m, meta);
  ModelGraph loaded = load_checkpoint(path);
  Rng rng(9);
  Tensor x = random_batch(rng, 16, 1, 28, 28);
  const ForwardResult a = m.forward(x);
  const ForwardResult b = loaded.forward(x);
  CHECK(a.logits.values() == b.logits.values());
  CHECK(a.probs.values() == b.probs.values());
  CHECK(a.latent.values() == b.latent.values());
}

TEST_CASE("saving twice produces identical bytes") {
  const fs::path dir = test_dir();
  ModelGraph m = build_model(Arch::toy, 45);
  CheckpointMeta meta;
  meta.mode = "kd";
  meta.zeta = 0.5;
  save_checkpoint((dir / "a.ckpt").string(), m, meta);
  save_checkpoint((dir / "b.ckpt").string(), m, meta);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  // and load -> save round-trips to the same bytes again
  ModelGraph loaded = load_checkpoint((dir / "a.ckpt").string(), &meta);
  save_checkpoint((dir / "c.ckpt").string(), loaded, meta);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "c.ckpt"));
}

TEST_CASE("a non-default tap survives the round trip") {
  const std::string path = (test_dir() / "tap.ckpt").string();
  ModelGraph m = build_model(Arch::lenet_small, 46, 3);
  REQUIRE(m.tap() == 3);
  CheckpointMeta meta;
  meta.arch = Arch::lenet_small;
  meta.tap = 3;
  save_checkpoint(path, m, meta);
  ModelGraph loaded = load_checkpoint(path);
  CHECK(loaded.tap() == 3);
  CHECK(loaded.latent_dim() == m.latent_dim());
}

TEST_CASE("corruption is detected") {
  const fs::path dir = test_dir();
  const std::string path = (dir / "tamper.ckpt").string();
  ModelGraph m = build_model(Arch::toy, 47);
  save_checkpoint(path, m, CheckpointMeta{});
  const std::vector<char> good = slurp(path);

  SUBCASE("flipped magic byte") {
    std::vector<char> bad = good;
    bad[0] ^= 0x40;
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"),
                         std::runtime_error);
  }
  SUBCASE("flipped blob byte breaks the digest") {
    std::vector<char> bad = good;
    bad[bad.size() - 3] ^= 0x01;
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("digest"),
                         std::runtime_error);
  }
  SUBCASE("truncated payload breaks the digest") {
    std::ofstream(path, std::ios::binary).write(good.data(), good.size() - 10);
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SUBCASE("appended junk breaks the digest") {
    std::vector<char> bad = good;
    bad.push_back('\0');
    std::ofstream(path, std::ios::binary).write(bad.data(), bad.size());
    CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint((dir / "nope.ckpt").string()), std::runtime_error);
  }
}
