#include <sparse_rcnn/checkpoint.hpp>
#include <sparse_rcnn/train.hpp>

#include <gtest/gtest.h>

#include <filesystem>

using namespace sparse_rcnn;

static RunConfig tiny_config(const std::string& out) {
    RunConfig c = parse_config(
        "[model]\nnum_proposals = 4\nfeature_dim = 8\nroi_size = 2\nnum_stages = 2\nnum_classes = 3\n"
        "num_attention_heads = 2\nffn_dim = 16\nbackbone_channels = 4,4,8\n"
        "[data]\ntrain_images = 6\nval_images = 3\nimage_size = 16\nmax_objects = 2\n"
        "[optim]\nlearning_rate = 1e-3\nepochs = 2\nbatch_size = 4\n");
    c.out_dir = (std::filesystem::temp_directory_path() / ("sparse_rcnn_ckpt_" + out)).string();
    std::filesystem::remove_all(c.out_dir);
    return c;
}

static std::string params_bytes(const SparseRCNN& m) {
    std::string out;
    for (const auto& [name, t] : m.parameters().items()) out += encode_tensor_blob(t);
    return out;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
    const RunConfig cfg = tiny_config("bytes");
    Trainer tr(cfg, {nullptr, false, false, {}});
    tr.train_epoch();
    const auto path = std::filesystem::path(cfg.out_dir) / "a.ssck";
    save_checkpoint(tr.checkpoint(), path);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.epoch, 1u);
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(tr.checkpoint()));
    EXPECT_EQ(back.config_text, canonical_config(cfg));
    std::filesystem::remove_all(cfg.out_dir);
}

TEST(Checkpoint, RestoredModelEvaluatesIdentically) {
    const RunConfig cfg = tiny_config("eval");
    Trainer tr(cfg, {nullptr, false, false, {}});
    tr.train_epoch();
    const auto model = model_from_checkpoint(decode_checkpoint(encode_checkpoint(tr.checkpoint())));
    EXPECT_EQ(params_bytes(*model), params_bytes(tr.model()));
    const auto a = predict(tr.model(), tr.val_set().scenes), b = predict(*model, tr.val_set().scenes);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t t = 0; t < a[i].size(); ++t) {
            EXPECT_EQ(encode_tensor_blob(a[i][t].boxes), encode_tensor_blob(b[i][t].boxes));
            EXPECT_EQ(encode_tensor_blob(a[i][t].class_logits), encode_tensor_blob(b[i][t].class_logits));
        }
}

TEST(Checkpoint, ResumeContinuesTheSameTrajectory) {
    const RunConfig cfg = tiny_config("resume");
    Trainer straight(cfg, {nullptr, false, false, {}});
    straight.run();
    Trainer first(cfg, {nullptr, false, false, {}});
    first.train_epoch();
    const std::string saved = encode_checkpoint(first.checkpoint());
    Trainer second(cfg, {nullptr, false, false, {}});
    second.resume(decode_checkpoint(saved));
    second.run();
    EXPECT_EQ(second.epoch(), 2u);
    EXPECT_EQ(params_bytes(second.model()), params_bytes(straight.model()));
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
    RunConfig cfg = tiny_config("shape");
    Trainer tr(cfg, {nullptr, false, false, {}});
    const Checkpoint c = tr.checkpoint();
    cfg.model.num_proposals = 5;
    SparseRCNN other(cfg.model, 0);
    EXPECT_THROW(restore_parameters(c, other), ContractError);
    Checkpoint renamed = c;
    renamed.params[0].first = "nope";
    SparseRCNN same(tr.config().model, 0);
    EXPECT_THROW(restore_parameters(renamed, same), ContractError);
}

TEST(Checkpoint, CorruptBytesAreRejected) {
    const RunConfig cfg = tiny_config("corrupt");
    Trainer tr(cfg, {nullptr, false, false, {}});
    const std::string bytes = encode_checkpoint(tr.checkpoint());
    EXPECT_THROW(decode_checkpoint("XXXX" + bytes.substr(4)), FormatError);
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), IoError);
    EXPECT_THROW(decode_checkpoint(bytes + "z"), FormatError);
    EXPECT_THROW(load_checkpoint("/nonexistent/x.ssck"), IoError);
}

TEST(Checkpoint, RunWritesCheckpointEachEpoch) {
    const RunConfig cfg = tiny_config("run");
    std::vector<std::size_t> seen;
    Trainer tr(cfg, {nullptr, true, true, [&](const EpochLog& l) {
                         seen.push_back(l.epoch);
                         EXPECT_TRUE(l.val.has_value());
                         EXPECT_TRUE(std::isfinite(l.loss));
                     }});
    tr.run();
    EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2}));
    EXPECT_EQ(load_checkpoint(tr.checkpoint_path()).epoch, 2u);
    std::filesystem::remove_all(cfg.out_dir);
}
