#include <gtest/gtest.h>

#include <set>

#include "stylseg/cli/run_config.hpp"

using namespace stylseg;

TEST(RunConfig, KeysAreUniqueAndDocumented) {
  RunConfig c;
  std::set<std::string> seen;
  for (const auto& f : c.fields()) {
    EXPECT_TRUE(seen.insert(f.key).second) << f.key;
    EXPECT_FALSE(f.help.empty()) << f.key;
  }
  EXPECT_GT(seen.size(), 50u);
}

TEST(RunConfig, SerializeRoundTripsExactly) {
  RunConfig a;
  a.set("style.lambda3", "0.1");
  a.set("seg.learning_rate", "3e-4");
  a.set("synth.target.texture", "stripes");
  a.set("style.train_target_denoiser", "true");
  a.set("seed", "18446744073709551615");
  RunConfig b;
  b.load_text(a.serialize(), "round-trip");
  EXPECT_EQ(a.serialize(), b.serialize());
  EXPECT_EQ(b.style.lambda3, 0.1);
  EXPECT_EQ(b.seg.learning_rate, 3e-4);
  EXPECT_TRUE(b.style.train_target_denoiser);
}

TEST(RunConfig, CommentsAndWhitespace) {
  RunConfig c;
  c.load_text("# header\n\n  seg.epochs = 3   # trailing\nimage_size=32\n", "cfg");
  EXPECT_EQ(c.seg.epochs, 3);
  EXPECT_EQ(c.image_size, 32);
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
  RunConfig c;
  EXPECT_THROW(c.set("seg.epoch", "3"), InputError);
  EXPECT_THROW(c.get("nope"), InputError);
  EXPECT_THROW(c.set("seg.epochs", "3.5"), InputError);
  EXPECT_THROW(c.set("seg.epochs", ""), InputError);
  EXPECT_THROW(c.set("seed", "-1"), InputError);
  EXPECT_THROW(c.set("style.lambda1", "abc"), InputError);
  EXPECT_THROW(c.set("style.train_target_denoiser", "yes"), InputError);
  try {
    c.load_text("seg.epochs = 2\nbogus = 1\n", "run.cfg");
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("run.cfg:2"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("unknown config key 'bogus'"), std::string::npos) << e.what();
  }
  EXPECT_THROW(c.load_text("no equals sign\n", "x"), InputError);
  EXPECT_THROW(c.load_file("/nonexistent/stylseg.cfg"), InputError);
}
