#include <gtest/gtest.h>

#include "synmesh/container.hpp"
#include "synmesh/errors.hpp"

using namespace synmesh;

TEST(Container, RoundTripAllTypes) {
  io::Record r;
  r.put("f", torch::randn({2, 3}));
  r.put("d", torch::randn({4}, torch::kFloat64), io::kFrozen);
  r.put("i", torch::arange(5));
  r.put("u", torch::ones({2, 2}, torch::kUInt8));
  r.put_text("t", "hello");
  r.put_int("n", -7);
  r.put_double("x", 0.125);
  io::Record empty;
  const auto bytes = io::encode_container("TEST-v1", {r, empty});
  const auto back = io::decode_container(bytes, "TEST-v1");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_TRUE(torch::equal(back[0].get("f"), r.get("f")));
  EXPECT_TRUE(torch::equal(back[0].get("d"), r.get("d")));
  EXPECT_EQ(back[0].entry("d").flags, io::kFrozen);
  EXPECT_TRUE(torch::equal(back[0].get("i"), r.get("i")));
  EXPECT_TRUE(torch::equal(back[0].get("u"), r.get("u")));
  EXPECT_EQ(back[0].text("t"), "hello");
  EXPECT_EQ(back[0].get_int("n"), -7);
  EXPECT_EQ(back[0].get_double("x"), 0.125);
  EXPECT_TRUE(back[1].entries().empty());
}

TEST(Container, RejectsForeignMagicAndTruncation) {
  io::Record r;
  r.put("f", torch::randn({8}));
  const auto bytes = io::encode_container("TEST-v1", {r});
  EXPECT_THROW(io::decode_container(bytes, "OTHER-v1"), FormatError);
  EXPECT_THROW(io::decode_container(bytes, "TEST-v2"), FormatError);
  try {
    io::decode_container(bytes.substr(0, bytes.size() - 5), "TEST-v1");
    FAIL() << "truncated input accepted";
  } catch (const FormatError&) {
    FAIL() << "truncation reported as a format error";
  } catch (const IoError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
}

TEST(Container, MissingFile) {
  EXPECT_THROW(io::read_container("/nonexistent/synmesh.bin", "TEST-v1"), MissingInputError);
}

TEST(Container, MissingEntryIsAnError) {
  io::Record r;
  EXPECT_FALSE(r.has("x"));
  EXPECT_ANY_THROW(r.get("x"));
}
