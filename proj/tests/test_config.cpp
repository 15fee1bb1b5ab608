#include <gtest/gtest.h>

#include <fstream>
#include <functional>

#include "igfiqa/config.hpp"

using namespace igfiqa;

namespace {

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  const auto kv = KeyValues::parse_string("# header\n  a = 1 \n\nb=two # trailing\n", "x.cfg");
  ASSERT_EQ(kv.entries().size(), 2u);
  EXPECT_EQ(kv.entries().at("a").value, "1");
  EXPECT_EQ(kv.entries().at("a").line, 2);
  EXPECT_EQ(kv.entries().at("b").value, "two");
  EXPECT_EQ(kv.where("b"), "x.cfg:4: key 'b'");
}

TEST(KeyValues, ErrorsCarryLineNumbers) {
  EXPECT_EQ(error_of([] { KeyValues::parse_string("a=1\nnonsense\n", "f"); }), "f:2: expected key=value, got 'nonsense'");
  EXPECT_EQ(error_of([] { KeyValues::parse_string("a=1\n=3\n", "f"); }), "f:2: empty key");
  EXPECT_NE(error_of([] { KeyValues::parse_string("a=1\n\na=2\n", "f"); }).find("f:3: duplicate key 'a' (first on line 1)"),
            std::string::npos);
  EXPECT_THROW(KeyValues::load("/nonexistent/dir/x.cfg"), ConfigError);
}

TEST(SynthConfig, ReadsAllKeys) {
  const auto kv = KeyValues::parse_string(
      "num_classes=12\nsamples_per_class=5\nimage_side=10\nduplicate_class_fraction=0.25\npose_spread=1.5\n"
      "degrade_fraction=0.1\nduplicate_tolerance=0.01\nseed=99\nsplit=2\n");
  const auto c = synth_config_from(kv);
  EXPECT_EQ(c.num_classes, 12u);
  EXPECT_EQ(c.samples_per_class, 5u);
  EXPECT_EQ(c.image_side, 10u);
  EXPECT_DOUBLE_EQ(c.duplicate_class_fraction, 0.25);
  EXPECT_DOUBLE_EQ(c.pose_spread, 1.5);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.split, 2u);
}

TEST(SynthConfig, RejectsUnknownMissingAndMalformedKeys) {
  EXPECT_EQ(error_of([] { synth_config_from(KeyValues::parse_string("num_classes=3\nsamples_per_class=4\ncolour=red\n", "s")); }),
            "s:3: key 'colour': unknown key");
  EXPECT_EQ(error_of([] { synth_config_from(KeyValues::parse_string("num_classes=3\n")); }),
            "missing required key 'samples_per_class'");
  EXPECT_EQ(error_of([] { synth_config_from(KeyValues::parse_string("num_classes=-3\nsamples_per_class=4\n", "s")); }),
            "s:1: key 'num_classes': expected a non-negative integer, got '-3'");
  EXPECT_EQ(error_of([] {
              synth_config_from(KeyValues::parse_string("num_classes=3\nsamples_per_class=4\npose_spread=1.5x\n", "s"));
            }),
            "s:3: key 'pose_spread': expected a number, got '1.5x'");
  EXPECT_THROW(synth_config_from(KeyValues::parse_string("num_classes=1\nsamples_per_class=4\n")), ConfigError);
}

TEST(TrainConfig, ReadsEnumsListsAndBools) {
  const auto kv = KeyValues::parse_string(
      "batch_size=32\nlr_milestones=3,7\nepochs=10\ntracker_source=both\nlig_reduction=mean\n"
      "alpha_schedule=fixed\nhead_bias=true\npropagate_lig_to_backbone=0\n");
  const auto c = train_config_from(kv);
  EXPECT_EQ(c.batch_size, 32u);
  EXPECT_EQ(c.lr_milestones, (std::vector<std::uint32_t>{3, 7}));
  EXPECT_EQ(c.tracker_source, TrackerSource::kBoth);
  EXPECT_EQ(c.lig_reduction, Reduction::kMean);
  EXPECT_EQ(c.alpha_schedule, AlphaSchedule::kFixed);
  EXPECT_TRUE(c.head_bias);
  EXPECT_FALSE(c.propagate_lig_to_backbone);
  EXPECT_EQ(error_of([] { train_config_from(KeyValues::parse_string("head_bias=yes\n", "t")); }),
            "t:1: key 'head_bias': expected true or false, got 'yes'");
  EXPECT_THROW(train_config_from(KeyValues::parse_string("epochs=5\nlr_milestones=6\n")), ConfigError);
  EXPECT_THROW(train_config_from(KeyValues::parse_string("tracker_source=dirty\n")), ConfigError);
}

TEST(RoundTrip, SerializedConfigsParseBackIdentically) {
  SynthConfig s;
  s.pose_spread = 0.1 + 0.2;  // not exactly representable in short decimal
  s.seed = 123456789012345ULL;
  std::string text;
  for (const auto& [k, v] : to_key_values(s)) text += k + "=" + v + "\n";
  const auto back = synth_config_from(KeyValues::parse_string(text));
  EXPECT_EQ(back.pose_spread, s.pose_spread);
  EXPECT_EQ(back.seed, s.seed);

  TrainConfig t;
  t.lr = 1.0 / 3.0;
  t.lr_milestones = {4, 9};
  t.tracker_source = TrackerSource::kAugmented;
  t.head_bias = true;
  text.clear();
  for (const auto& [k, v] : to_key_values(t)) text += k + "=" + v + "\n";
  const auto tb = train_config_from(KeyValues::parse_string(text));
  EXPECT_EQ(tb.lr, t.lr);
  EXPECT_EQ(tb.lr_milestones, t.lr_milestones);
  EXPECT_EQ(tb.tracker_source, t.tracker_source);
  EXPECT_EQ(to_key_values(tb), to_key_values(t));
}

TEST(ShippedConfigs, Parse) {
  for (const char* name : {"reference_synth.cfg", "heldout_synth.cfg"})
    EXPECT_NO_THROW(synth_config_from(KeyValues::load(std::string(IGFIQA_SOURCE_DIR) + "/configs/" + name))) << name;
  EXPECT_NO_THROW(train_config_from(KeyValues::load(std::string(IGFIQA_SOURCE_DIR) + "/configs/reference_train.cfg")));
}
