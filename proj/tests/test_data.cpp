#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "catch2/catch_amalgamated.hpp"
#include "sonoseg/data.hpp"

using namespace sonoseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool box_contains(const BoxPrompt& outer, const BoxPrompt& inner) {
  return outer.x0 <= inner.x0 && outer.y0 <= inner.y0 && outer.x1 >= inner.x1 &&
         outer.y1 >= inner.y1;
}

}  // namespace

TEST_CASE("generator is deterministic and index-stable") {
  auto a = gen_synthetic(6, 123, 64);
  auto b = gen_synthetic(6, 123, 64);
  REQUIRE(a.size() == 6);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].mask.v == b[i].mask.v);
    CHECK(a[i].box.x0 == b[i].box.x0);
    CHECK(a[i].box.y0 == b[i].box.y0);
    CHECK(a[i].box.x1 == b[i].box.x1);
    CHECK(a[i].box.y1 == b[i].box.y1);
    REQUIRE(a[i].image.numel() == b[i].image.numel());
    for (int64_t j = 0; j < a[i].image.numel(); ++j)
      REQUIRE(a[i].image.data()[j] == b[i].image.data()[j]);  // bit-identical
  }

  // sample i depends on (seed, i) only, not on how many samples were asked for
  auto shorter = gen_synthetic(3, 123, 64);
  for (int64_t j = 0; j < shorter[2].image.numel(); ++j)
    REQUIRE(shorter[2].image.data()[j] == a[2].image.data()[j]);
  CHECK(shorter[2].mask.v == a[2].mask.v);

  // a different seed actually changes the data
  auto c = gen_synthetic(1, 124, 64);
  bool any_diff = false;
  for (int64_t j = 0; j < c[0].image.numel(); ++j)
    any_diff |= c[0].image.data()[j] != a[0].image.data()[j];
  CHECK(any_diff);
}

TEST_CASE("generated samples satisfy the stated invariants") {
  auto data = gen_synthetic(20, 7, 64);
  for (const MaskPair& p : data) {
    REQUIRE(p.image.shape() == Shape{1, 64, 64});
    CHECK(!p.mask.empty_mask());
    for (int64_t j = 0; j < p.image.numel(); ++j) {
      REQUIRE(p.image.data()[j] >= 0.0);
      REQUIRE(p.image.data()[j] <= 1.0);
    }
    validate_box(p.box, 64);
    CHECK(box_contains(p.box, tight_box(p.mask)));
  }
}

TEST_CASE("foreground is brighter than background by roughly the configured offset") {
  auto data = gen_synthetic(100, 11, 64);
  double diff_sum = 0.0;
  for (const MaskPair& p : data) {
    double fg = 0.0, bg = 0.0;
    int64_t nfg = 0, nbg = 0;
    for (int64_t y = 0; y < 64; ++y)
      for (int64_t x = 0; x < 64; ++x) {
        double v = p.image.data()[y * 64 + x];
        if (p.mask.at(y, x)) {
          fg += v;
          ++nfg;
        } else {
          bg += v;
          ++nbg;
        }
      }
    double diff = fg / nfg - bg / nbg;
    CHECK(diff > 0.05 * kForegroundOffset);  // never inverted, even per sample
    diff_sum += diff;
  }
  double mean_diff = diff_sum / 100.0;
  // soft edges, blur and speckle eat part of the offset but most survives
  CHECK(mean_diff > 0.30 * kForegroundOffset);
  CHECK(mean_diff < 1.00 * kForegroundOffset);
}

TEST_CASE("tight box matches the hand example") {
  BinaryMask m(10, 12);
  for (int64_t y = 2; y <= 5; ++y)
    for (int64_t x = 3; x <= 7; ++x) m.set(y, x, true);
  Rng rng(0, "jitter");
  BoxPrompt b = box_from_mask(m, 0, rng);
  CHECK(b.x0 == 3);
  CHECK(b.y0 == 2);
  CHECK(b.x1 == 7);
  CHECK(b.y1 == 5);
}

TEST_CASE("jitter is outward-only and bounded") {
  BinaryMask m(64, 64);
  for (int64_t y = 25; y <= 35; ++y)
    for (int64_t x = 25; x <= 35; ++x) m.set(y, x, true);
  BoxPrompt tight = tight_box(m);
  Rng rng(42, "jitter");
  bool any_moved = false;
  for (int i = 0; i < 1000; ++i) {
    BoxPrompt b = box_from_mask(m, 20, rng);
    REQUIRE(box_contains(b, tight));
    REQUIRE(tight.x0 - b.x0 <= 20);
    REQUIRE(tight.y0 - b.y0 <= 20);
    REQUIRE(b.x1 - tight.x1 <= 20);
    REQUIRE(b.y1 - tight.y1 <= 20);
    validate_box(b, 64);
    any_moved |= b.x0 != tight.x0 || b.x1 != tight.x1;
  }
  CHECK(any_moved);
}

TEST_CASE("jitter clamps at image bounds") {
  BinaryMask m(16, 16);
  for (int64_t y = 1; y <= 14; ++y)
    for (int64_t x = 1; x <= 14; ++x) m.set(y, x, true);
  Rng rng(5, "jitter");
  for (int i = 0; i < 50; ++i) {
    BoxPrompt b = box_from_mask(m, 20, rng);
    REQUIRE(b.x0 >= 0);
    REQUIRE(b.y0 >= 0);
    REQUIRE(b.x1 <= 15);
    REQUIRE(b.y1 <= 15);
  }
}

TEST_CASE("box from empty mask is a data error") {
  BinaryMask m(8, 8);
  Rng rng(0, "jitter");
  CHECK_THROWS_AS(box_from_mask(m, 4, rng), DataError);
  CHECK_THROWS_AS(tight_box(m), DataError);
}

TEST_CASE("ten ids split 8/1/1") {
  std::vector<std::string> ids;
  for (int i = 0; i < 10; ++i) ids.push_back("id" + std::to_string(i));
  Split sp = split_ids(ids, SplitSpec{3});
  CHECK(sp.train.size() == 8);
  CHECK(sp.val.size() == 1);
  CHECK(sp.test.size() == 1);
}

TEST_CASE("splits are disjoint, covering, and seed-stable") {
  Rng meta(99, "test");
  for (int trial = 0; trial < 100; ++trial) {
    int64_t n = meta.uniform_int(10, 120);
    uint64_t seed = meta.next_u64();
    std::vector<std::string> ids;
    for (int64_t i = 0; i < n; ++i) ids.push_back("s" + std::to_string(i));
    Split sp = split_ids(ids, SplitSpec{seed});
    Split sp2 = split_ids(ids, SplitSpec{seed});
    REQUIRE(sp.train == sp2.train);
    REQUIRE(sp.val == sp2.val);
    REQUIRE(sp.test == sp2.test);
    REQUIRE(sp.val.size() == static_cast<size_t>(n / 10));
    REQUIRE(sp.test.size() == static_cast<size_t>(n / 10));
    REQUIRE(sp.train.size() + sp.val.size() + sp.test.size() == static_cast<size_t>(n));
    std::vector<std::string> all;
    all.insert(all.end(), sp.train.begin(), sp.train.end());
    all.insert(all.end(), sp.val.begin(), sp.val.end());
    all.insert(all.end(), sp.test.begin(), sp.test.end());
    std::sort(all.begin(), all.end());
    std::vector<std::string> want = ids;
    std::sort(want.begin(), want.end());
    REQUIRE(all == want);  // disjoint + covering in one shot
  }
}

TEST_CASE("too few ids refuse to split") {
  std::vector<std::string> ids(9, "x");
  for (size_t i = 0; i < ids.size(); ++i) ids[i] += std::to_string(i);
  CHECK_THROWS_AS(split_ids(ids, SplitSpec{0}), DataError);
}

TEST_CASE("png grayscale round trip is exact") {
  fs::path dir = fresh_dir("sonoseg-test-png");
  Rng rng(1, "test");
  int64_t h = 20, w = 33;
  std::vector<uint8_t> pix(static_cast<size_t>(h * w));
  for (auto& p : pix) p = static_cast<uint8_t>(rng.uniform_int(0, 255));
  std::string path = (dir / "t.png").string();
  write_png_gray(path, h, w, pix);
  int64_t rh = 0, rw = 0;
  std::vector<uint8_t> back;
  std::string err;
  REQUIRE(read_png_gray(path, rh, rw, back, err));
  CHECK(rh == h);
  CHECK(rw == w);
  CHECK(back == pix);
}

TEST_CASE("resize helpers behave on simple fields") {
  // nearest: 2x upscale of a checkerboard gives exact 2x2 blocks
  std::vector<uint8_t> cb = {0, 255, 255, 0};
  auto up = resize_nearest(cb, 2, 2, 4, 4);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 4; ++x)
      REQUIRE(up[static_cast<size_t>(y * 4 + x)] == cb[static_cast<size_t>((y / 2) * 2 + x / 2)]);

  // bilinear: constant field stays constant through odd-size resampling
  std::vector<double> flat(7 * 7, 0.37);
  auto big = resize_bilinear(flat, 7, 7, 13, 13);
  for (double v : big) REQUIRE(v == Catch::Approx(0.37).margin(1e-12));
  auto small = resize_bilinear(flat, 7, 7, 3, 3);
  for (double v : small) REQUIRE(v == Catch::Approx(0.37).margin(1e-12));
}

TEST_CASE("dataset survives a save/load round trip") {
  fs::path dir = fresh_dir("sonoseg-test-roundtrip");
  auto data = gen_synthetic(4, 21, 32, /*jitter_max=*/0);
  save_dataset(dir.string(), data);
  REQUIRE(fs::exists(dir / "manifest.json"));

  std::ostringstream diag;
  auto back = load_dir(dir.string(), 0, diag);
  REQUIRE(back.size() == data.size());
  CHECK(diag.str().empty());
  for (size_t i = 0; i < data.size(); ++i) {
    CHECK(back[i].id == data[i].id);
    REQUIRE(back[i].mask.v == data[i].mask.v);
    CHECK(back[i].box.x0 == data[i].box.x0);  // jitter 0: both sides tight
    CHECK(back[i].box.y0 == data[i].box.y0);
    CHECK(back[i].box.x1 == data[i].box.x1);
    CHECK(back[i].box.y1 == data[i].box.y1);
    for (int64_t j = 0; j < back[i].image.numel(); ++j) {
      double got = back[i].image.data()[j], want = data[i].image.data()[j];
      REQUIRE(got == Catch::Approx(want).margin(0.5 / 255.0 + 1e-12));  // 8-bit quantization
    }
  }
}

TEST_CASE("manifest records ids, paths, and splits") {
  fs::path dir = fresh_dir("sonoseg-test-manifest");
  auto data = gen_synthetic(10, 5, 32);
  std::vector<std::string> ids;
  for (const auto& p : data) ids.push_back(p.id);
  Split sp = split_ids(ids, SplitSpec{5});
  save_dataset(dir.string(), data, &sp);

  std::ifstream mf(dir / "manifest.json");
  nlohmann::json j = nlohmann::json::parse(mf);
  REQUIRE(j["samples"].size() == 10);
  int train = 0, val = 0, test = 0;
  for (const auto& rec : j["samples"]) {
    REQUIRE(rec.contains("id"));
    REQUIRE(fs::exists(dir / rec["image"].get<std::string>()));
    REQUIRE(fs::exists(dir / rec["mask"].get<std::string>()));
    std::string s = rec["split"].get<std::string>();
    train += s == "train";
    val += s == "val";
    test += s == "test";
  }
  CHECK(train == 8);
  CHECK(val == 1);
  CHECK(test == 1);
}

TEST_CASE("load_dir reports and skips bad files") {
  fs::path dir = fresh_dir("sonoseg-test-badfiles");
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");

  auto good = gen_synthetic(1, 3, 32);
  write_png_gray((dir / "images/good.png").string(), 32, 32, quantize_image(good[0].image));
  std::vector<uint8_t> mpix(good[0].mask.v.size());
  for (size_t i = 0; i < mpix.size(); ++i) mpix[i] = good[0].mask.v[i] ? 255 : 0;
  write_png_gray((dir / "masks/good.png").string(), 32, 32, mpix);

  // image with no mask counterpart
  write_png_gray((dir / "images/orphan.png").string(), 32, 32, std::vector<uint8_t>(1024, 50));
  // garbage bytes posing as a png
  std::ofstream(dir / "images/corrupt.png") << "this is not a png";
  write_png_gray((dir / "masks/corrupt.png").string(), 32, 32, std::vector<uint8_t>(1024, 255));
  // mask with zero foreground
  write_png_gray((dir / "images/hollow.png").string(), 32, 32, std::vector<uint8_t>(1024, 90));
  write_png_gray((dir / "masks/hollow.png").string(), 32, 32, std::vector<uint8_t>(1024, 0));

  std::ostringstream diag;
  auto loaded = load_dir(dir.string(), 0, diag);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].id == "good");
  CHECK(diag.str().find("orphan") != std::string::npos);
  CHECK(diag.str().find("corrupt") != std::string::npos);
  CHECK(diag.str().find("hollow") != std::string::npos);

  CHECK_THROWS_AS(load_dir((dir / "images").string(), 0, diag), DataError);
}

TEST_CASE("load_dir resizes to the requested resolution") {
  fs::path dir = fresh_dir("sonoseg-test-resize");
  auto data = gen_synthetic(1, 9, 64);
  save_dataset(dir.string(), data);
  auto loaded = load_dir(dir.string(), 32);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded[0].image.shape() == Shape{1, 32, 32});
  CHECK(loaded[0].mask.h == 32);
  CHECK(loaded[0].mask.w == 32);
  CHECK(!loaded[0].mask.empty_mask());
  validate_box(loaded[0].box, 32);
}
