#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "anop/world/synth_world.hpp"

using namespace anop::world;

namespace {

double cosine(std::span<const double> a, std::span<const double> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

double jaccard(const TokenSeq& a, const TokenSeq& b) {
  std::set<std::size_t> sa(a.begin(), a.end()), sb(b.begin(), b.end()), u = sa;
  u.insert(sb.begin(), sb.end());
  std::size_t inter = 0;
  for (auto t : sa) inter += sb.count(t);
  return static_cast<double>(inter) / static_cast<double>(u.size());
}

}  // namespace

TEST_CASE("same seed reproduces the world") {
  const SynthWorld a = generate_world(7, 16, 4, 12, 0.3);
  const SynthWorld b = generate_world(7, 16, 4, 12, 0.3);
  CHECK(a.class_latents.bitwise_equal(b.class_latents));
  CHECK(a.image_render.bitwise_equal(b.image_render));
  CHECK(a.word_render.bitwise_equal(b.word_render));
  CHECK(a.class_name_tokens == b.class_name_tokens);
  const SynthWorld c = generate_world(8, 16, 4, 12, 0.3);
  CHECK_FALSE(a.class_latents.bitwise_equal(c.class_latents));
}

TEST_CASE("class structure") {
  const SynthWorld w = generate_world(3, 16, 4, 12, 0.3);
  for (std::size_t c = 0; c < 16; ++c) {
    double sum = 0;
    std::size_t used = 0;
    for (std::size_t a = 0; a < 4; ++a) {
      CHECK(w.class_attribute_mix.at(c, a) >= 0.0);
      sum += w.class_attribute_mix.at(c, a);
      used += w.class_attribute_mix.at(c, a) > 0.0;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(used >= 1);
    CHECK(w.class_name_tokens[c].size() >= 1);
    CHECK(w.class_name_tokens[c].size() <= 2);
  }

  SUBCASE("single attribute is shared by every class") {
    const SynthWorld one = generate_world(3, 8, 1, 12, 0.3);
    for (std::size_t c = 0; c < 8; ++c) CHECK(one.class_attribute_mix.at(c, 0) == 1.0);
  }

  SUBCASE("classes sharing an attribute are closer than classes sharing none") {
    double shared = 0, disjoint = 0;
    int ns = 0, nd = 0;
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = i + 1; j < 16; ++j) {
        bool share = false;
        for (std::size_t a = 0; a < 4; ++a)
          share |= w.class_attribute_mix.at(i, a) > 0 && w.class_attribute_mix.at(j, a) > 0;
        const double cs = cosine(w.class_latents.row(i), w.class_latents.row(j));
        if (share) {
          shared += cs;
          ++ns;
        } else {
          disjoint += cs;
          ++nd;
        }
      }
    }
    REQUIRE(ns > 0);
    REQUIRE(nd > 0);
    CHECK(shared / ns > disjoint / nd);
  }
}

TEST_CASE("degenerate worlds are rejected") {
  CHECK_THROWS_AS(generate_world(1, 3, 4, 12, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(generate_world(1, 16, 0, 12, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(generate_world(1, 16, 4, 3, 0.3), std::invalid_argument);
  CHECK_THROWS_AS(generate_world(1, 16, 4, 12, -1.0), std::invalid_argument);
}

TEST_CASE("sample_dataset") {
  const SynthWorld w = generate_world(5, 16, 4, 12, 0.3);
  const std::vector<ClassId> classes{0, 2, 4, 6, 8, 10, 12, 14};
  const auto ds = sample_dataset(w, classes, 16, 1);
  CHECK(ds.size() == 128);
  std::vector<int> hist(16, 0);
  for (const auto& s : ds) {
    ++hist[s.label];
    CHECK(s.image_grid.all_finite());
    CHECK(s.image_grid.shape() == anop::ad::Shape{9, 24});
  }
  for (ClassId c : classes) CHECK(hist[c] == 16);

  const auto other = sample_dataset(w, classes, 16, 2);
  bool any_diff = false;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(ds[i].label == other[i].label);
    any_diff |= !ds[i].image_grid.bitwise_equal(other[i].image_grid);
  }
  CHECK(any_diff);

  CHECK_THROWS_AS(sample_dataset(w, {}, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(sample_dataset(w, {16}, 4, 1), std::invalid_argument);

  SUBCASE("noise-free samples of one class are identical") {
    const SynthWorld clean = generate_world(5, 16, 4, 12, 0.0);
    const auto two = sample_dataset(clean, {3}, 2, 9);
    CHECK(two[0].image_grid.bitwise_equal(two[1].image_grid));
  }
}

TEST_CASE("descriptions") {
  const SynthWorld w = generate_world(11, 16, 4, 12, 0.3);
  const auto d0 = generate_descriptions(w, 0, 5);
  CHECK(d0.size() == 5);
  for (const auto& d : d0) {
    REQUIRE(d.size() >= 3);
    CHECK(d.front() == vocab::kStart);
    CHECK(d.back() == vocab::kEnd);
    const auto& name = w.class_name_tokens[0];
    CHECK(std::equal(name.begin(), name.end(), d.end() - 1 - static_cast<std::ptrdiff_t>(name.size())));
  }

  const auto still = generate_descriptions(w, 4, 5, 0.0);
  for (const auto& d : still) CHECK(d == still[0]);

  CHECK_THROWS_AS(generate_descriptions(w, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_descriptions(w, 16, 1), std::invalid_argument);

  // Within-class overlap beats across-class overlap.
  std::vector<std::vector<TokenSeq>> sets;
  for (ClassId c = 0; c < 16; ++c) sets.push_back(generate_descriptions(w, c, 5));
  double within = 0, across = 0;
  int nw = 0, na = 0;
  for (std::size_t c = 0; c < 16; ++c) {
    for (std::size_t e = 0; e < 16; ++e) {
      for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
          if (c == e && i >= j) continue;
          const double v = jaccard(sets[c][i], sets[e][j]);
          if (c == e) {
            within += v;
            ++nw;
          } else {
            across += v;
            ++na;
          }
        }
      }
    }
  }
  CHECK(within / nw > across / na);
}

TEST_CASE("base/novel split") {
  const SynthWorld w8 = generate_world(1, 8, 2, 12, 0.3);
  const SplitSpec s = base_novel_split(w8, 0.5, 4);
  CHECK(s.base_classes.size() == 4);
  CHECK(s.novel_classes.size() == 4);
  std::set<ClassId> all(s.base_classes.begin(), s.base_classes.end());
  for (ClassId c : s.novel_classes) CHECK(all.insert(c).second);
  CHECK(all.size() == 8);
  const SplitSpec again = base_novel_split(w8, 0.5, 4);
  CHECK(again.base_classes == s.base_classes);
  CHECK_THROWS_AS(base_novel_split(w8, 0.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(base_novel_split(w8, 0.01, 1), std::invalid_argument);
  CHECK_THROWS_AS(base_novel_split(w8, 0.99, 1), std::invalid_argument);
}

TEST_CASE("shifts") {
  const SynthWorld w = generate_world(2, 16, 4, 12, 0.3);
  const SynthWorld same = shift_world(w, {ShiftKind::raise_noise, 1.0, 0});
  CHECK(same.noise_sigma == w.noise_sigma);
  CHECK(same.image_render.bitwise_equal(w.image_render));
  CHECK(same.class_latents.bitwise_equal(w.class_latents));

  for (ShiftKind k : {ShiftKind::rotate_render_map, ShiftKind::raise_noise, ShiftKind::remap_attribute_mix}) {
    const SynthWorld s = shift_world(w, {k, 0.5, 3});
    CHECK(s.num_classes() == w.num_classes());
    CHECK(s.class_name_tokens == w.class_name_tokens);
    CHECK(parse_shift(shift_name(k)) == k);
  }
  CHECK_FALSE(shift_world(w, {ShiftKind::rotate_render_map, 0.5, 3}).image_render.bitwise_equal(w.image_render));
  CHECK_THROWS_AS(parse_shift("blur"), std::invalid_argument);

  const SynthWorld rebuilt = rebuild_world(w.params, {{ShiftKind::remap_attribute_mix, 0.7, 5}});
  CHECK(rebuilt.class_latents.bitwise_equal(shift_world(w, {ShiftKind::remap_attribute_mix, 0.7, 5}).class_latents));
}

TEST_CASE("describe_world lists counts and mixtures") {
  const SynthWorld w = generate_world(2, 6, 3, 8, 0.3);
  const std::string text = describe_world(w);
  CHECK(text.find("classes (C): 6") != std::string::npos);
  CHECK(text.find("attributes (A): 3") != std::string::npos);
}
