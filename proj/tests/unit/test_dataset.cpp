#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "tirgan/dataset.hpp"
#include "tirgan/io.hpp"

using namespace tirgan;
using namespace tirgan::data;

namespace {

void gray_png(const fs::path& p, std::size_t w, std::size_t h, std::uint8_t v = 100) {
  write_png(p, Image8{w, h, 1, std::vector<std::uint8_t>(w * h, v)});
}

void rgb_png(const fs::path& p, std::size_t w, std::size_t h) {
  write_png(p, Image8{w, h, 3, std::vector<std::uint8_t>(w * h * 3, 50)});
}

// mean absolute deviation from the image mean
double mad(const Image8& img) {
  double m = 0;
  for (auto v : img.pixels) m += v;
  m /= static_cast<double>(img.pixels.size());
  double s = 0;
  for (auto v : img.pixels) s += std::abs(v - m);
  return s / static_cast<double>(img.pixels.size());
}

}  // namespace

TEST_CASE("manifest loading") {
  oracle::TempDir dir("manifest");
  gray_png(dir / "a.png", 8, 8);
  gray_png(dir / "b.png", 8, 8);
  rgb_png(dir / "a_rgb.png", 8, 8);
  rgb_png(dir / "small_rgb.png", 4, 8);
  write_png(dir / "rgb_as_ir.png", Image8{8, 8, 3, std::vector<std::uint8_t>(192, 1)});

  SUBCASE("valid records with meta line and blank lines") {
    write_text_file(dir / "m.jsonl",
                    "{\"meta\": {\"note\": \"x\"}}\n"
                    "{\"id\":\"a\",\"ir\":\"a.png\",\"rgb\":\"a_rgb.png\",\"tod\":\"day\",\"split\":\"train\"}\n"
                    "\n"
                    "{\"id\":\"b\",\"ir\":\"b.png\",\"rgb\":null,\"tod\":\"night\",\"split\":\"test\"}\n");
    auto m = load_manifest(dir / "m.jsonl");
    REQUIRE(m.samples.size() == 2);
    CHECK(m.meta.at("note") == "x");
    CHECK(m.samples[0].paired());
    CHECK_FALSE(m.samples[1].paired());
    CHECK(m.samples[0].ir_path.is_absolute());
    CHECK(filter_samples(m, TimeOfDay::day, std::nullopt, false).size() == 1);
    CHECK(filter_samples(m, std::nullopt, Split::test, false).size() == 1);
    CHECK(filter_samples(m, std::nullopt, std::nullopt, true).size() == 1);
    CHECK(filter_samples(m, TimeOfDay::night, Split::train, false).empty());

    // save + reload keeps everything
    save_manifest(m, dir / "m2.jsonl");
    auto m2 = load_manifest(dir / "m2.jsonl");
    REQUIRE(m2.samples.size() == 2);
    CHECK(m2.samples[1].id == "b");
    CHECK(m2.samples[0].rgb_path == m.samples[0].rgb_path);
    CHECK(m2.samples[1].split == Split::test);
  }
  SUBCASE("empty file") {
    write_text_file(dir / "m.jsonl", "");
    CHECK(load_manifest(dir / "m.jsonl").samples.empty());
  }
  SUBCASE("duplicate id names both lines") {
    write_text_file(dir / "m.jsonl",
                    "{\"id\":\"a\",\"ir\":\"a.png\",\"tod\":\"day\",\"split\":\"train\"}\n"
                    "{\"id\":\"b\",\"ir\":\"b.png\",\"tod\":\"day\",\"split\":\"train\"}\n"
                    "{\"id\":\"a\",\"ir\":\"b.png\",\"tod\":\"day\",\"split\":\"train\"}\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"),
                         doctest::Contains("duplicate id \"a\" (lines 1 and 3)"), DataError);
  }
  SUBCASE("malformed record carries the line") {
    write_text_file(dir / "m.jsonl",
                    "{\"id\":\"a\",\"ir\":\"a.png\",\"tod\":\"day\",\"split\":\"train\"}\n{oops\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"), doctest::Contains("m.jsonl:2: malformed"),
                         DataError);
  }
  SUBCASE("bad enum values") {
    write_text_file(dir / "m.jsonl", "{\"id\":\"a\",\"ir\":\"a.png\",\"tod\":\"dusk\",\"split\":\"train\"}\n");
    CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), DataError);
  }
  SUBCASE("unresolvable path") {
    write_text_file(dir / "m.jsonl", "{\"id\":\"a\",\"ir\":\"nope.png\",\"tod\":\"day\",\"split\":\"train\"}\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"), doctest::Contains("unresolvable path"), DataError);
  }
  SUBCASE("wrong IR channel count") {
    write_text_file(dir / "m.jsonl",
                    "{\"id\":\"a\",\"ir\":\"rgb_as_ir.png\",\"tod\":\"day\",\"split\":\"train\"}\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"), doctest::Contains("3 channels"), DataError);
  }
  SUBCASE("size mismatch") {
    write_text_file(dir / "m.jsonl",
                    "{\"id\":\"a\",\"ir\":\"a.png\",\"rgb\":\"small_rgb.png\",\"tod\":\"day\",\"split\":\"train\"}\n");
    CHECK_THROWS_WITH_AS(load_manifest(dir / "m.jsonl"), doctest::Contains("differs from IR size"), DataError);
  }
  SUBCASE("missing manifest") {
    CHECK_THROWS_WITH_AS(load_manifest(dir / "none.jsonl"), doctest::Contains("cannot open manifest"),
                         DataError);
  }
}

TEST_CASE("pixel normalization endpoints and round trip") {
  oracle::TempDir dir("pixels");
  Image8 img{256, 1, 1, {}};
  for (int v = 0; v < 256; ++v) img.pixels.push_back(static_cast<std::uint8_t>(v));
  write_png(dir / "ramp.png", img);
  ImageTensor t = load_image(dir / "ramp.png", 1);
  CHECK(t.channels() == 1);
  CHECK(t.height() == 1);
  CHECK(t.width() == 256);
  CHECK(t.tensor()[0] == -1.0);
  CHECK(t.tensor()[255] == 1.0);
  CHECK(t.tensor()[128] == doctest::Approx(128.0 / 127.5 - 1.0).epsilon(1e-15));
  CHECK(t.tensor()[128] == doctest::Approx(0.003922).epsilon(1e-4));
  for (int v = 0; v < 256; ++v) CHECK(denormalize(t.tensor()[v]) == v);
  save_image(dir / "back.png", t);
  CHECK(read_png(dir / "back.png").pixels == img.pixels);
  // clamping
  CHECK(denormalize(-5.0) == 0);
  CHECK(denormalize(5.0) == 255);
  CHECK_THROWS(load_image(dir / "ramp.png", 3));
}

TEST_CASE("toy dataset") {
  oracle::TempDir a("toy_a"), b("toy_b");
  auto da = synth_toy_dataset(a.path(), 4, 48, 7);
  auto db = synth_toy_dataset(b.path(), 4, 48, 7);
  CHECK(da.manifest.samples.size() == 8);
  CHECK(da.scenes.size() == 4);

  // determinism: identical bytes
  for (const auto& s : da.manifest.samples) {
    const auto rel_ir = fs::relative(s.ir_path, a.path());
    CHECK(oracle::file_bytes(s.ir_path) == oracle::file_bytes(b.path() / rel_ir));
  }
  CHECK(oracle::file_bytes(da.annotations_path) == oracle::file_bytes(db.annotations_path));

  // reload through the public loader
  auto m = load_manifest(da.manifest_path);
  CHECK(m.samples.size() == 8);
  CHECK(filter_samples(m, TimeOfDay::night, std::nullopt, true).size() == 4);

  for (const auto& sc : da.scenes) {
    const Image8 day_ir = read_png(a.path() / "ir" / (sc.day_sample_id + ".png"));
    const Image8 night_ir = read_png(a.path() / "ir" / (sc.night_sample_id + ".png"));
    CHECK(day_ir.width == 48);
    CHECK(mad(night_ir) < mad(day_ir));
    for (const auto& v : sc.vehicles) {
      CHECK(v.image_id == sc.night_sample_id);
      CHECK(v.box.x >= 0);
      CHECK(v.box.y >= 0);
      CHECK(v.box.x + v.box.w <= 48);
      CHECK(v.box.y + v.box.h <= 48);
      CHECK(v.box.valid());
    }
  }

  oracle::TempDir c("toy_c");
  auto dc = synth_toy_dataset(c.path(), 4, 48, 8);
  CHECK(oracle::file_bytes(dc.manifest.samples[0].ir_path) !=
        oracle::file_bytes(da.manifest.samples[0].ir_path));

  CHECK_THROWS_AS(synth_toy_dataset(c.path(), 0, 48, 1), DataError);
  CHECK_THROWS_AS(synth_toy_dataset(c.path(), 1, 16, 1), DataError);
}

TEST_CASE("file image set caches and audits") {
  oracle::TempDir dir("imgset");
  gray_png(dir / "a.png", 4, 4, 0);
  FileAudit audit;
  FileImageSet set({dir / "a.png"}, 1, &audit);
  CHECK(set.size() == 1);
  CHECK(set.get(0).tensor()[0] == -1.0);
  set.get(0);
  CHECK(audit.reads().size() == 1);
  audit.clear();
  CHECK(audit.reads().empty());
}
