#include <cstdlib>

#include <gtest/gtest.h>

#include "mmcr/config.hpp"
#include "mmcr/error.hpp"
#include "support.hpp"

using namespace mmcr;

TEST(Settings, DefaultsWhenNothingSet) {
  Settings s;
  EXPECT_EQ(s.get_int("train", "epochs", 10), 10);
  EXPECT_EQ(s.get_string("service", "host", "127.0.0.1"), "127.0.0.1");
  EXPECT_FALSE(s.get_optional_string("service", "queue"));
  EXPECT_FALSE(s.has("train", "epochs"));
}

TEST(Settings, FlagBeatsEnvironmentBeatsFileBeatsDefault) {
  auto s = Settings::from_json({{"train", {{"epochs", 3}, {"lr", 0.5}, {"flip", false}}}});
  EXPECT_EQ(s.get_int("train", "epochs", 10), 3);
  s.set_environment("train", "epochs", "4");
  EXPECT_EQ(s.get_int("train", "epochs", 10), 4);
  s.set_flag("train", "epochs", 5);
  EXPECT_EQ(s.get_int("train", "epochs", 10), 5);
  EXPECT_EQ(s.get_double("train", "lr", 0.1), 0.5);
  EXPECT_FALSE(s.get_bool("train", "flip", true));
  s.set_environment("train", "flip", "yes");
  EXPECT_TRUE(s.get_bool("train", "flip", false));
}

TEST(Settings, EnvironmentTextIsCoercedAndValidated) {
  Settings s;
  s.set_environment("service", "port", "8081");
  s.set_environment("train", "lr", "0.25");
  s.set_environment("train", "epochs", "ten");
  EXPECT_EQ(s.get_int("service", "port", 0), 8081);
  EXPECT_EQ(s.get_double("train", "lr", 0.0), 0.25);
  try {
    s.get_int("train", "epochs", 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::usage);
    EXPECT_NE(std::string(e.what()).find("train.epochs"), std::string::npos);
  }
}

TEST(Settings, ProcessEnvironmentSplitsSectionFromKey) {
  ::setenv("MMCR_SERVICE_LEASE_SECONDS", "42", 1);
  ::setenv("MMCR_CONFIG", "/nonexistent", 1);
  Settings s;
  s.load_environment();
  EXPECT_EQ(s.get_int("service", "lease_seconds", 300), 42);
  EXPECT_FALSE(s.has("config", ""));
  ::unsetenv("MMCR_SERVICE_LEASE_SECONDS");
  ::unsetenv("MMCR_CONFIG");
}

TEST(Settings, FileLoadingAndErrors) {
  mmcr::testing::TempDir dir;
  mmcr::testing::write_file(dir / "ok.json", R"({"service": {"port": 9000, "queue": "q.tsv"}})");
  auto s = Settings::from_file(dir / "ok.json");
  EXPECT_EQ(s.get_int("service", "port", 0), 9000);
  EXPECT_EQ(s.get_optional_string("service", "queue"), "q.tsv");

  mmcr::testing::write_file(dir / "bad.json", "{not json");
  try {
    Settings::from_file(dir / "bad.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::data);
  }
  EXPECT_THROW(Settings::from_json({{"service", 3}}), Error);
  try {
    Settings::from_file(dir / "missing.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::io);
  }
}

TEST(Settings, WrongTypeInFileIsUsageError) {
  auto s = Settings::from_json({{"train", {{"epochs", "many"}}}, {"service", {{"host", 12}}}});
  EXPECT_THROW(s.get_int("train", "epochs", 1), Error);
  EXPECT_THROW(s.get_string("service", "host", "x"), Error);
}
