#include <algorithm>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "tirgan/evaluation.hpp"
#include "tirgan/io.hpp"

using namespace tirgan;
using namespace tirgan::eval;

namespace {

const fs::path kFixtures = TIRGAN_FIXTURES;

oracle::RBox rb(const Box& b) { return {b.x, b.y, b.w, b.h}; }

Box random_box(std::mt19937_64& rng, double extent) {
  std::uniform_int_distribution<int> pos(0, static_cast<int>(extent) - 4), size(2, 20);
  return Box{double(pos(rng)), double(pos(rng)), double(size(rng)), double(size(rng))};
}

struct Scenario {
  std::vector<Detection> dets;
  std::vector<Annotation> anns;
};

// Cars only; detections are jittered copies of GTs or random boxes.
Scenario random_scenario(std::uint64_t seed, int n_images, int n_gt) {
  std::mt19937_64 rng(seed);
  Scenario s;
  std::uniform_int_distribution<int> img(0, n_images - 1), jitter(-3, 3);
  std::uniform_real_distribution<double> score(0.0, 1.0), coin(0.0, 1.0);
  for (int i = 0; i < n_gt; ++i)
    s.anns.push_back({"i" + std::to_string(img(rng)), Category::car, random_box(rng, 64)});
  for (const auto& a : s.anns) {
    if (coin(rng) < 0.7) {
      Box b = a.box;
      b.x += jitter(rng);
      b.y += jitter(rng);
      s.dets.push_back({a.image_id, Category::car, b, score(rng)});
    }
    if (coin(rng) < 0.4) s.dets.push_back({a.image_id, Category::car, random_box(rng, 64), score(rng)});
  }
  return s;
}

std::vector<bool> oracle_ranked_labels(const Scenario& s, double thr) {
  std::vector<oracle::RDet> d;
  std::vector<oracle::RGt> g;
  auto image_index = [](const std::string& id) { return std::stoi(id.substr(1)); };
  for (const auto& x : s.dets) d.push_back({image_index(x.image_id), rb(x.box), x.score});
  for (const auto& x : s.anns) g.push_back({image_index(x.image_id), rb(x.box)});
  const auto tp = oracle::greedy_match(d, g, thr);
  std::vector<std::size_t> order(d.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return d[a].score > d[b].score; });
  std::vector<bool> ranked;
  for (auto i : order) ranked.push_back(tp[i]);
  return ranked;
}

}  // namespace

TEST_CASE("iou basics") {
  const Box a{0, 0, 10, 10}, b{5, 0, 10, 10};
  CHECK(iou(a, b) == doctest::Approx(50.0 / 150.0));
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{20, 20, 5, 5}) == 0.0);
  CHECK(iou(a, Box{10, 0, 5, 5}) == 0.0);  // touching edges
}

TEST_CASE("iou agrees with pixel counting") {
  std::mt19937_64 rng(1);
  for (int k = 0; k < 300; ++k) {
    const Box a = random_box(rng, 40), b = random_box(rng, 40);
    CAPTURE(k);
    CHECK(iou(a, b) == doctest::Approx(oracle::raster_iou(rb(a), rb(b))).epsilon(1e-12));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("hand fixture") {
  const auto r = evaluate_files(kFixtures / "hand" / "detections.jsonl", kFixtures / "hand" / "annotations.jsonl");
  // ranked TP, FP, TP over 2 GTs: 0.5 * 1 + 0.5 * 2/3
  CHECK(r.map == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(r.precision == doctest::Approx(2.0 / 3.0));
  CHECK(r.recall == 1.0);
  CHECK(r.table_row() == "2 2 0.667 1.000 0.833");
  const auto curve = r.per_class.at(Category::car).curve;
  REQUIRE(curve.size() == 3);
  CHECK(curve[1] == PrPoint{0.5, 0.5});
}

TEST_CASE("perfect fixture") {
  const auto r = evaluate_files(kFixtures / "perfect" / "detections.jsonl", kFixtures / "perfect" / "annotations.jsonl");
  CHECK(r.map == 1.0);
  CHECK(r.per_class.size() == 3);
  CHECK(r.table_row() == "2 3 1.000 1.000 1.000");
}

TEST_CASE("matching and AP agree with the oracles") {
  for (std::uint64_t seed = 0; seed < 25; ++seed) {
    CAPTURE(seed);
    const auto s = random_scenario(seed, 6, 40);
    for (double thr : {0.3, 0.5, 0.7}) {
      const auto labels = oracle_ranked_labels(s, thr);
      const auto r = evaluate(s.dets, s.anns, {thr, 0.0, Interpolation::all_points});
      const auto& car = r.per_class.at(Category::car);
      CHECK(car.ap == doctest::Approx(oracle::dense_grid_ap(labels, s.anns.size())).epsilon(1e-9));
      std::size_t tp = std::count(labels.begin(), labels.end(), true);
      CHECK(r.recall == doctest::Approx(double(tp) / s.anns.size()));
    }
  }
}

TEST_CASE("metric properties") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    CAPTURE(seed);
    auto s = random_scenario(seed, 4, 30);
    const auto base = evaluate(s.dets, s.anns);
    CHECK(base.map >= 0.0);
    CHECK(base.map <= 1.0);

    // input order is irrelevant
    auto shuffled = s.dets;
    std::shuffle(shuffled.begin(), shuffled.end(), std::mt19937_64(seed));
    CHECK(evaluate(shuffled, s.anns).map == doctest::Approx(base.map).epsilon(1e-12));

    // a strictly monotone score transform keeps the ranking
    auto squashed = s.dets;
    for (auto& d : squashed) d.score = d.score * d.score;
    CHECK(evaluate(squashed, s.anns, {0.5, 0.0}).map == doctest::Approx(base.map).epsilon(1e-12));

    // a trailing false positive cannot raise AP
    auto extra = s.dets;
    extra.push_back({"i0", Category::car, Box{500, 500, 5, 5}, 0.0});
    CHECK(evaluate(extra, s.anns).map <= base.map + 1e-12);

    // detections that exactly hit every GT give AP 1
    std::vector<Detection> exact;
    for (const auto& a : s.anns) exact.push_back({a.image_id, a.category, a.box, 0.9});
    CHECK(evaluate(exact, s.anns).map == doctest::Approx(1.0));

    // stricter IoU never finds more matches
    CHECK(evaluate(s.dets, s.anns, {0.75}).recall <= evaluate(s.dets, s.anns, {0.5}).recall);
  }
}

TEST_CASE("interpolation variants") {
  const std::vector<bool> labels{true, false, true};
  const auto pts = pr_points(labels, 2);
  CHECK(average_precision(pts) == doctest::Approx(5.0 / 6.0));
  // 11-point: recall 0..0.5 -> 1, 0.6..1.0 -> 2/3
  CHECK(average_precision(pts, Interpolation::eleven_point) ==
        doctest::Approx((6 * 1.0 + 5 * (2.0 / 3.0)) / 11.0));
  CHECK(average_precision({}) == 0.0);
}

TEST_CASE("category mismatch never matches") {
  std::vector<Annotation> anns{{"x", Category::car, {0, 0, 10, 10}}};
  std::vector<Detection> dets{{"x", Category::truck, {0, 0, 10, 10}, 0.9}};
  const auto r = evaluate(dets, anns);
  CHECK(r.per_class.at(Category::car).ap == 0.0);
  CHECK(r.map == 0.0);
  CHECK_THROWS_AS(match_detections(dets, anns, 0.0), EvalError);
}

TEST_CASE("jsonl readers report file and line") {
  oracle::TempDir dir("evaljsonl");
  write_text_file(dir / "a.jsonl", "{\"image_id\":\"x\",\"category\":\"car\",\"bbox\":[0,0,1,1]}\n{bad\n");
  CHECK_THROWS_WITH_AS(load_annotations(dir / "a.jsonl"), doctest::Contains("a.jsonl:2:"), EvalError);
  write_text_file(dir / "b.jsonl", "{\"image_id\":\"x\",\"category\":\"tank\",\"bbox\":[0,0,1,1]}\n");
  CHECK_THROWS_WITH_AS(load_annotations(dir / "b.jsonl"), doctest::Contains("unknown category"), EvalError);
  write_text_file(dir / "c.jsonl", "{\"image_id\":\"x\",\"category\":\"car\",\"bbox\":[0,0,0,1]}\n");
  CHECK_THROWS_WITH_AS(load_annotations(dir / "c.jsonl"), doctest::Contains("positive"), EvalError);
  write_text_file(dir / "d.jsonl", "{\"image_id\":\"x\",\"category\":\"car\",\"bbox\":[0,0,1,1],\"score\":1.5}\n");
  CHECK_THROWS_WITH_AS(load_detections(dir / "d.jsonl"), doctest::Contains("score outside"), EvalError);
  CHECK_THROWS_AS(load_detections(dir / "missing.jsonl"), EvalError);

  // writers round trip
  std::vector<Detection> dets{{"q", Category::bus, {1.5, 2, 3, 4}, 0.125}};
  write_text_file(dir / "e.jsonl", detections_jsonl(dets));
  const auto back = load_detections(dir / "e.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].category == Category::bus);
  CHECK(back[0].box.x == 1.5);
  CHECK(back[0].score == 0.125);
}

TEST_CASE("yolo text import") {
  oracle::TempDir dir("yolo");
  fs::create_directories(dir / "labels");
  // car, person (dropped), truck
  write_text_file(dir / "labels" / "im1.txt", "2 0.5 0.5 0.2 0.4 0.9\n0 0.1 0.1 0.1 0.1 0.8\n7 0.25 0.25 0.1 0.1 0.3\n");
  write_text_file(dir / "sizes.json", "{\"im1\": [200, 100]}");
  const auto dets = import_yolo_detections(dir / "labels", dir / "sizes.json");
  REQUIRE(dets.size() == 2);
  CHECK(dets[0].category == Category::car);
  CHECK(dets[0].box.x == doctest::Approx(80.0));
  CHECK(dets[0].box.y == doctest::Approx(30.0));
  CHECK(dets[0].box.w == doctest::Approx(40.0));
  CHECK(dets[0].box.h == doctest::Approx(40.0));
  CHECK(dets[1].category == Category::truck);

  write_text_file(dir / "sizes.json", "{}");
  CHECK_THROWS_WITH_AS(import_yolo_detections(dir / "labels", dir / "sizes.json"),
                       doctest::Contains("no image size"), EvalError);
  write_text_file(dir / "sizes.json", "{\"im1\": [200, 100]}");
  write_text_file(dir / "labels" / "im1.txt", "2 0.5 0.5\n");
  CHECK_THROWS_AS(import_yolo_detections(dir / "labels", dir / "sizes.json"), EvalError);
}

TEST_CASE("report outputs") {
  oracle::TempDir dir("report");
  const auto r = evaluate_files(kFixtures / "hand" / "detections.jsonl", kFixtures / "hand" / "annotations.jsonl");
  const auto csv = r.pr_csv();
  CHECK(csv.rfind("class,recall,precision\n", 0) == 0);
  CHECK(csv.find("car,0.500000,0.500000\n") != std::string::npos);
  const auto j = nlohmann::json::parse(r.to_json());
  CHECK(j["map"].get<double>() == doctest::Approx(5.0 / 6.0));
  CHECK(j["interpolation"] == "all_points");
  render_pr_curve(r, dir / "pr.png");
  const auto img = read_png(dir / "pr.png");
  CHECK(img.width == 480);
  CHECK(img.channels == 3);
}

TEST_CASE("packaged reference fixture") {
  const auto r = evaluate_files(kFixtures / "reference" / "detections.jsonl",
                                kFixtures / "reference" / "annotations.jsonl");
  CHECK(r.n_images == 200);
  CHECK(r.n_annotations == 987);
  CHECK(r.table_row() == "200 987 0.681 0.614 0.667");
}
