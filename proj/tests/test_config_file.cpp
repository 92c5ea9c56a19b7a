#include <gtest/gtest.h>

#include "ctun/config_file.hpp"
#include "ctun/error.hpp"

using namespace ctun;

TEST(KeyValues, CommentsBlanksAndWhitespace) {
  const KeyValues kv = parse_key_values("# header\n\n  channels = 8  # inline\nblocks=1, 2 ,1\r\n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("channels"), "8");
  EXPECT_EQ(kv.at("blocks"), "1, 2 ,1");
}

TEST(KeyValues, ErrorsNameTheLine) {
  try {
    parse_key_values("channels = 8\n\nscale 4\n");
    FAIL();
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_key_values("a = 1\na = 2\n"), ValueError);
  EXPECT_THROW(parse_key_values("a =\n"), ValueError);
  EXPECT_THROW(read_key_values("/nonexistent/ctun.cfg"), IoError);
}

TEST(ApplyConfig, SetsModelAndTrainingFields) {
  CtunConfig m;
  TrainConfig t;
  apply_config(parse_key_values("channels = 12\nblocks = 2,3,4\nscale = 2\nugru_variant = shared\n"
                                "boundary_policy = replicate\nlr0 = 5e-4\niters = 77\nseed = 9\n"
                                "fft_weight = 0.25\nframes = 4\n"),
               m, t);
  EXPECT_EQ(m.channels, 12);
  EXPECT_EQ(m.blocks.extractor, 2);
  EXPECT_EQ(m.blocks.propagation, 3);
  EXPECT_EQ(m.blocks.reconstruction, 4);
  EXPECT_EQ(m.scale, 2);
  EXPECT_EQ(m.ugru_variant, UgruVariant::shared);
  EXPECT_DOUBLE_EQ(t.lr0, 5e-4);
  EXPECT_EQ(t.iters, 77);
  EXPECT_EQ(t.seed, 9u);
  EXPECT_DOUBLE_EQ(t.fft_weight, 0.25);
  EXPECT_EQ(t.frames, 4);
}

TEST(ApplyConfig, RejectsUnknownKeysAndBadValues) {
  CtunConfig m;
  TrainConfig t;
  EXPECT_THROW(apply_config({{"chanels", "4"}}, m, t), ValueError);
  EXPECT_THROW(apply_config({{"channels", "4x"}}, m, t), ValueError);
  EXPECT_THROW(apply_config({{"blocks", "1,2"}}, m, t), ValueError);
  EXPECT_THROW(apply_config({{"ugru_variant", "both"}}, m, t), ValueError);
  EXPECT_THROW(apply_config({{"boundary_policy", "zero"}}, m, t), ValueError);
  EXPECT_THROW(apply_config({{"lr0", "fast"}}, m, t), ValueError);
}

TEST(InferModelConfig, RoundTripsThroughParameterNames) {
  for (auto variant : {UgruVariant::split, UgruVariant::shared})
    for (int scale : {2, 4}) {
      CtunConfig cfg;
      cfg.channels = 6;
      cfg.blocks = BlockCounts{2, 1, 3};
      cfg.ugru_variant = variant;
      cfg.scale = scale;
      const CtunConfig got = infer_model_config(zero_params(cfg));
      EXPECT_EQ(got.channels, 6);
      EXPECT_EQ(got.blocks.extractor, 2);
      EXPECT_EQ(got.blocks.propagation, 1);
      EXPECT_EQ(got.blocks.reconstruction, 3);
      EXPECT_EQ(got.ugru_variant, variant);
      EXPECT_EQ(got.scale, scale);
    }
  EXPECT_THROW(infer_model_config(ParamStore{}), ValueError);
}

TEST(FormatModelConfig, ParsesBack) {
  CtunConfig cfg;
  cfg.channels = 10;
  cfg.blocks = BlockCounts{1, 4, 2};
  cfg.ugru_variant = UgruVariant::shared;
  CtunConfig back;
  TrainConfig t;
  apply_config(parse_key_values(format_model_config(cfg)), back, t);
  EXPECT_EQ(back.channels, 10);
  EXPECT_EQ(back.blocks.propagation, 4);
  EXPECT_EQ(back.ugru_variant, UgruVariant::shared);
  EXPECT_EQ(back.scale, cfg.scale);
}
