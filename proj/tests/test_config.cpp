#include <gtest/gtest.h>

#include <filesystem>

#include "s2r/config.hpp"

using namespace s2r;
using namespace s2r::config;

TEST(Config, DefaultsRoundTripThroughJson) {
    const RunConfig def;
    const RunConfig back = from_json(to_json(def));
    EXPECT_EQ(to_json(back), to_json(def));
    EXPECT_EQ(back.network, def.network);
    EXPECT_EQ(back.train_frames, 200u);
    EXPECT_EQ(back.eval_frames, 50u);
    EXPECT_EQ(parse("{}").network, def.network);
}

TEST(Config, PartialDocumentMergesOverDefaults) {
    const RunConfig c = parse(R"({"training": {"epochs": 3}, "coral": {"beta_da": 250}, "eval": {"interpolation": 11}})");
    EXPECT_EQ(c.training.epochs, 3u);
    EXPECT_EQ(c.beta_da, 250.0);
    EXPECT_EQ(c.train_config().beta_da, 250.0);
    EXPECT_EQ(c.interpolation, eval::Interpolation::Points11);
    EXPECT_EQ(c.training.batch_size, RunConfig{}.training.batch_size);
    EXPECT_EQ(c.scene.lidar.n_beams, RunConfig{}.scene.lidar.n_beams);
}

TEST(Config, UnknownKeysAndWrongTypesAreRejectedWithTheirPath) {
    try {
        parse(R"({"training": {"epochz": 3}})");
        FAIL() << "unknown key accepted";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("training.epochz"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse(R"({"bogus": 1})"), ConfigError);
    EXPECT_THROW(parse(R"({"training": {"epochs": "many"}})"), ConfigError);
    EXPECT_THROW(parse(R"({"gap": {"ego_shadow": 1}})"), ConfigError);
    EXPECT_THROW(parse("[1, 2]"), ConfigError);
    EXPECT_THROW(parse("{not json"), ConfigError);
}

TEST(Config, SemanticValidation) {
    EXPECT_THROW(parse(R"({"training": {"batch_size": 0}})"), ConfigError);
    EXPECT_THROW(parse(R"({"coral": {"beta_da": -1}})"), ConfigError);
    EXPECT_THROW(parse(R"({"eval": {"interpolation": 20}})"), ConfigError);
    EXPECT_THROW(parse(R"({"gap": {"dropout_rate": 1.5}})"), ConfigError);
    EXPECT_THROW(parse(R"({"pillar": {"dx": 0}})"), ConfigError);
    // 16 m at 0.75 m is not a whole number of pillars
    EXPECT_THROW(parse(R"({"pillar": {"dx": 0.75, "dy": 0.75}})"), ConfigError);
    EXPECT_THROW(parse(R"({"network": {"anchors": {"Car": {"iou_pos": 0.3}}}})"), ConfigError);
}

TEST(Config, DottedOverrides) {
    json doc = merge_over_defaults(json::object());
    apply_override(doc, "training.lr=0.01");
    apply_override(doc, "network.anchors.Car.iou_pos=0.7");
    apply_override(doc, "gap.ego_shadow=false");
    apply_override(doc, "network.layers_per_block=[1,1,1]");
    const RunConfig c = from_json(doc);
    EXPECT_EQ(c.training.lr, 0.01);
    EXPECT_EQ(c.network.anchors[0].iou_pos, 0.7);
    EXPECT_FALSE(c.gap.ego_shadow);
    EXPECT_EQ(c.network.layers_per_block, (std::array<std::size_t, 3>{1, 1, 1}));

    EXPECT_THROW(apply_override(doc, "training.lrr=1"), ConfigError);
    EXPECT_THROW(apply_override(doc, "training.lr"), ConfigError);
    EXPECT_THROW(apply_override(doc, "=3"), ConfigError);
    EXPECT_THROW(apply_override(doc, "training..lr=3"), ConfigError);
    EXPECT_THROW(apply_override(doc, "training.lr=fast"), ConfigError);
}

TEST(Config, MissingFileIsAnIoError) {
    EXPECT_THROW(load(std::filesystem::temp_directory_path() / "s2r_no_such_config.json"), IoError);
}
