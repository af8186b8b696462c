#include <gtest/gtest.h>

#include <sstream>

#include "seqhand/config.hpp"

using namespace seqhand;

TEST(KeyValues, ParsesCommentsAndWhitespace) {
  std::istringstream in("# header\n  heads = 4  \n\nalpha=0.25 # trailing\n");
  const auto kv = KeyValues::parse(in);
  EXPECT_EQ(kv.entries().at("heads"), "4");
  EXPECT_EQ(kv.entries().at("alpha"), "0.25");
  std::istringstream bad("heads 4\n");
  EXPECT_THROW(KeyValues::parse(bad), ContractError);
}

TEST(ModelConfig, DefaultsAreValid) {
  ModelConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.embed_dim % cfg.heads, 0u);
  EXPECT_DOUBLE_EQ(cfg.alpha, 0.1);
  EXPECT_EQ(cfg.joints, 21u);
}

TEST(ModelConfig, TextRoundTripIsExact) {
  ModelConfig cfg;
  cfg.alpha = 0.1 + 1e-17;
  cfg.heads = 4;
  cfg.conv_channels = {5, 6, 7};
  cfg.step2.unit = "steps";
  cfg.step1.rate = 3.0e-4 / 7.0;
  std::istringstream in(cfg.to_kv().str());
  const auto back = ModelConfig::from_kv(KeyValues::parse(in));
  EXPECT_EQ(back.to_kv().str(), cfg.to_kv().str());
  EXPECT_EQ(back.step1.rate, cfg.step1.rate);
  EXPECT_EQ(back.conv_channels, cfg.conv_channels);
}

TEST(ModelConfig, UnknownKeyIsNamed) {
  KeyValues kv;
  kv.set("heads", "4");
  kv.set("hedas", "4");
  try {
    ModelConfig::from_kv(kv);
    FAIL();
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("'hedas'"), std::string::npos);
  }
}

TEST(ModelConfig, InvariantsAreEnforced) {
  auto rejects = [](const char* key, const char* value) {
    KeyValues kv;
    kv.set(key, value);
    EXPECT_THROW(ModelConfig::from_kv(kv), ContractError) << key << " = " << value;
  };
  rejects("heads", "5");
  rejects("alpha", "-0.1");
  rejects("joints", "20");
  rejects("step1.rate", "0");
  rejects("step2.unit", "hours");
  rejects("loss_reduction", "max");
  rejects("heads", "four");
  rejects("context_dim", "32");
}

TEST(Schedule, StepAndEpochDecay) {
  Schedule s{1.0, 0.1, 2, "epochs", 6};
  EXPECT_EQ(s.total_steps(3), 18u);
  EXPECT_DOUBLE_EQ(s.rate_at(0, 3), 1.0);
  EXPECT_DOUBLE_EQ(s.rate_at(5, 3), 1.0);
  EXPECT_NEAR(s.rate_at(6, 3), 0.1, 1e-15);
  EXPECT_NEAR(s.rate_at(17, 3), 0.01, 1e-15);
  s.unit = "steps";
  EXPECT_EQ(s.total_steps(3), 6u);
  EXPECT_NEAR(s.rate_at(2, 3), 0.1, 1e-15);
}
