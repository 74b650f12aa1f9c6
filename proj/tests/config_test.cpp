#include <sparse_rcnn/config.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace sparse_rcnn;

TEST(Config, EmptyTextGivesDefaults) {
    const RunConfig c = parse_config("");
    EXPECT_EQ(c.model.num_proposals, ModelConfig{}.num_proposals);
    EXPECT_EQ(c.optim.lr_drop_epochs, (std::vector<std::size_t>{27, 33}));
    EXPECT_EQ(c.loss.l1, CostWeights{}.l1);
}

TEST(Config, ParsesSectionsCommentsAndLists) {
    const RunConfig c = parse_config(
        "# toy\n[model]\nnum_proposals = 20 ; inline\ninit_scheme = grid\ninteraction = multi_head_attention\n"
        "[optim]\nlr_drop_epochs = 5, 9\nlearning_rate = 2e-4\n[data]\ncrowd_mode = true\n");
    EXPECT_EQ(c.model.num_proposals, 20u);
    EXPECT_EQ(c.model.init_scheme, InitScheme::grid);
    EXPECT_EQ(c.model.interaction, Interaction::multi_head_attention);
    EXPECT_EQ(c.optim.lr_drop_epochs, (std::vector<std::size_t>{5, 9}));
    EXPECT_DOUBLE_EQ(c.optim.adamw.learning_rate, 2e-4);
    EXPECT_TRUE(c.data.crowd_mode);
}

TEST(Config, RejectsUnknownOrMalformedInput) {
    EXPECT_THROW(parse_config("[modle]\n"), ConfigError);
    EXPECT_THROW(parse_config("[model]\nproposals = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("num_proposals = 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[model]\nnum_proposals 3\n"), ConfigError);
    EXPECT_THROW(parse_config("[model]\nnum_proposals = -3\n"), ConfigError);
    EXPECT_THROW(parse_config("[optim]\nlearning_rate = fast\n"), ConfigError);
    EXPECT_THROW(parse_config("[optim]\nepochs = 0\n"), ConfigError);
    EXPECT_THROW(parse_config("[data]\nhflip = maybe\n"), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/run.ini"), ConfigError);
}

TEST(Config, ErrorsNameTheLine) {
    try {
        parse_config("[model]\n\nbogus = 1\n", "x.ini");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("x.ini:3"), std::string::npos);
    }
}

TEST(Config, CanonicalTextRoundTrips) {
    RunConfig c = parse_config("[optim]\nlearning_rate = 0.1\n[loss]\nfocal_alpha = 0.3\n[run]\nseed = 99\n");
    const std::string text = canonical_config(c);
    const RunConfig back = parse_config(text);
    EXPECT_EQ(canonical_config(back), text);
    EXPECT_EQ(back.optim.adamw.learning_rate, 0.1);
    EXPECT_EQ(config_hash(back), config_hash(c));
    c.seed = 100;
    EXPECT_NE(config_hash(back), config_hash(c));
    EXPECT_EQ(config_hash(c).size(), 16u);
}

TEST(Config, ShippedConfigsParse) {
    for (const auto& entry : std::filesystem::directory_iterator(SPARSE_RCNN_SOURCE_DIR "/configs"))
        if (entry.path().extension() == ".ini") {
            EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
        }
}
