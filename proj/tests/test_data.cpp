#include <gtest/gtest.h>

#include <sstream>

#include "fluid/data.hpp"

using namespace fluid;

namespace {

SpiralSpec small_spec(double noise = 0.02) {
  SpiralSpec s;
  s.n_spirals = 5;
  s.n_points = 60;
  s.n_subsample = 20;
  s.noise_std = noise;
  s.seed = 3;
  return s;
}

}  // namespace

TEST(Spirals, PaperScaleShapes) {
  SpiralSpec s;
  s.n_spirals = 300;
  const auto data = generate_spirals(s);
  ASSERT_EQ(data.size(), 300u);
  for (const auto& e : data) {
    EXPECT_EQ(e.length(), 50u);
    EXPECT_EQ(e.features(), 2u);
    EXPECT_NO_THROW(e.validate());
  }
}

TEST(Spirals, NoiselessPointsLieOnAnalyticCurve) {
  const SpiralSpec s = small_spec(0.0);
  for (const auto& e : generate_spirals(s))
    for (std::size_t i = 0; i < e.length(); ++i) {
      const double t = e.times[i], r = spiral_radius(s, t);
      EXPECT_NEAR(e.values[2 * i], r * std::cos(t), 1e-15);
      EXPECT_NEAR(e.values[2 * i + 1], r * std::sin(t), 1e-15);
    }
}

TEST(Spirals, NoiselessRadiusIncreasesWithTime) {
  for (const auto& e : generate_spirals(small_spec(0.0))) {
    double prev = -1.0;
    for (std::size_t i = 0; i < e.length(); ++i) {
      const double r = std::hypot(e.values[2 * i], e.values[2 * i + 1]);
      EXPECT_GT(r, prev);
      prev = r;
    }
  }
}

TEST(Spirals, SubsampleIsSortedWithoutReplacementOnGrid) {
  const SpiralSpec s = small_spec();
  const double step = s.t_max / static_cast<double>(s.n_points - 1);
  for (const auto& e : generate_spirals(s))
    for (std::size_t i = 0; i < e.length(); ++i) {
      const double k = e.times[i] / step;
      EXPECT_NEAR(k, std::round(k), 1e-9);
      if (i) {
        EXPECT_GT(e.times[i], e.times[i - 1]);
      }
    }
}

TEST(Spirals, SeededGenerationIsDeterministic) {
  EXPECT_EQ(generate_spirals(small_spec()), generate_spirals(small_spec()));
  SpiralSpec other = small_spec();
  other.seed = 4;
  EXPECT_NE(generate_spirals(small_spec()), generate_spirals(other));
}

TEST(Spirals, SplitIsSixtyTwentyTwenty) {
  const SpiralSplit sp = split_spiral(50, SpiralSpec{});
  EXPECT_EQ(sp.conditioning.size(), 30u);
  EXPECT_EQ(sp.interpolation.size(), 10u);
  EXPECT_EQ(sp.extrapolation.size(), 10u);
  EXPECT_EQ(sp.extrapolation.front(), 40u);
  EXPECT_EQ(sp.interpolation.front(), 2u);
  EXPECT_EQ(sp.interpolation.back(), 38u);
  EXPECT_EQ(sp.conditioning.front(), 0u);
}

TEST(Spirals, InvalidSpecRejected) {
  SpiralSpec s = small_spec();
  s.n_subsample = 61;
  EXPECT_THROW(generate_spirals(s), std::invalid_argument);
  s = small_spec();
  s.interp_frac = 0.5;
  s.extrap_frac = 0.5;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_EQ(spiral_spec_from_json(to_json(small_spec())).seed, 3u);
}

TEST(Events, ConstantRunCollapses) {
  const EventSequence e = event_encode({200, 200, 200, 200}, 128, 1);
  ASSERT_EQ(e.length(), 1u);
  EXPECT_EQ(e.values[0], 1.0);
  EXPECT_EQ(e.times[0], 4.0);
  EXPECT_EQ(e.mask[0], 1);
}

TEST(Events, AlternatingSignalIsNotCompressed) {
  const std::vector<double> px{0, 255, 0, 255, 0};
  const EventSequence e = event_encode(px, 128, 5);
  EXPECT_EQ(e.valid_length(), 5u);
  EXPECT_EQ(e.times, (std::vector<double>{1, 2, 3, 4, 5}));
}

TEST(Events, PaddingAndRoundTrip) {
  const std::vector<double> px{0, 0, 130, 255, 255, 10, 127, 128};
  const EventSequence e = event_encode(px, 128, 8);
  EXPECT_EQ(e.valid_length(), 4u);
  EXPECT_EQ(e.times, (std::vector<double>{2, 5, 7, 8, 8, 8, 8, 8}));
  EXPECT_NO_THROW(e.validate());
  std::vector<double> bin;
  for (double p : px) bin.push_back(p >= 128 ? 1.0 : 0.0);
  EXPECT_EQ(event_decode(e), bin);
  EXPECT_THROW(event_encode(px, 128, 3), std::invalid_argument);
}

TEST(EventSequence, ValidateRejectsBrokenInvariants) {
  EventSequence e;
  e.values = Tensor({3, 1});
  e.times = {1, 2, 3};
  e.mask = {1, 0, 1};
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e.mask = {1, 1, 1};
  e.times = {1, 1, 3};
  EXPECT_THROW(e.validate(), std::invalid_argument);
  e.times = {1, 2};
  EXPECT_THROW(e.validate(), DimensionError);
}

TEST(DatasetCsv, RoundTripIsExact) {
  auto data = generate_spirals(small_spec());
  data.push_back(data.front());
  data.back().mask.back() = 0;
  std::stringstream ss;
  write_dataset_csv(ss, data);
  EXPECT_EQ(ss.str().substr(0, 33), "seq_id,t,feature_0,feature_1,mask");
  const auto back = read_dataset_csv(ss);
  EXPECT_EQ(back, data);
}

TEST(DatasetCsv, MalformedInputRejected) {
  std::stringstream bad_header("id,t,mask\n");
  EXPECT_THROW(read_dataset_csv(bad_header), std::runtime_error);
  std::stringstream bad_row("seq_id,t,feature_0,mask\n0,1.0,abc,1\n");
  EXPECT_THROW(read_dataset_csv(bad_row), std::runtime_error);
  std::stringstream short_row("seq_id,t,feature_0,mask\n0,1.0,1\n");
  EXPECT_THROW(read_dataset_csv(short_row), std::runtime_error);
}
