#include <sparse_rcnn/data.hpp>

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace sparse_rcnn;

static std::filesystem::path scratch(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("sparse_rcnn_data_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

// Pixel-rectangle IoU on integer corners, counted cell by cell.
static double cell_iou(const BoxN& a, const BoxN& b, long size) {
    const BoxA pa = to_absolute(a, static_cast<double>(size), static_cast<double>(size));
    const BoxA pb = to_absolute(b, static_cast<double>(size), static_cast<double>(size));
    long inter = 0, ua = 0, ub = 0;
    for (long y = 0; y < size; ++y)
        for (long x = 0; x < size; ++x) {
            const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
            const bool ia = cx > pa.x0 && cx < pa.x1 && cy > pa.y0 && cy < pa.y1;
            const bool ib = cx > pb.x0 && cx < pb.x1 && cy > pb.y0 && cy < pb.y1;
            inter += ia && ib;
            ua += ia;
            ub += ib;
        }
    return static_cast<double>(inter) / static_cast<double>(ua + ub - inter);
}

TEST(Data, SceneIsDeterministicPerIndex) {
    const DatasetSpec spec{20, 32, 3, 4, false, 9};
    const SyntheticScene a = generate_scene(spec, 7), b = generate_scene(spec, 7);
    EXPECT_TRUE(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
    EXPECT_EQ(a.objects.labels, b.objects.labels);
    const auto all = generate_dataset(spec);
    EXPECT_EQ(all[7].objects.boxes, a.objects.boxes);
    const SyntheticScene other = generate_scene({20, 32, 3, 4, false, 10}, 7);
    EXPECT_FALSE(std::equal(a.image.data().begin(), a.image.data().end(), other.image.data().begin()));
}

TEST(Data, ScenesRespectSpec) {
    const DatasetSpec spec{200, 64, 3, 4, false, 1};
    for (const auto& s : generate_dataset(spec)) {
        EXPECT_EQ(s.image.shape(), (Shape{3, 64, 64}));
        EXPECT_GE(s.objects.size(), 1u);
        EXPECT_LE(s.objects.size(), 4u);
        for (double v : s.image.data()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        for (std::size_t i = 0; i < s.objects.size(); ++i) {
            EXPECT_TRUE(is_valid(s.objects.boxes[i]));
            EXPECT_LT(s.objects.labels[i], 3);
            for (std::size_t j = i + 1; j < s.objects.size(); ++j)
                EXPECT_LE(cell_iou(s.objects.boxes[i], s.objects.boxes[j], 64), kSceneIouCap + 1e-12);
        }
        EXPECT_TRUE(s.crowd_pairs.empty());
    }
}

TEST(Data, CrowdPairsLandInBand) {
    const DatasetSpec spec{150, 64, 3, 4, true, 5};
    for (const auto& s : generate_dataset(spec)) {
        ASSERT_EQ(s.crowd_pairs.size(), 1u);
        const auto [a, b] = s.crowd_pairs[0];
        const double v = cell_iou(s.objects.boxes[a], s.objects.boxes[b], 64);
        EXPECT_GE(v, kCrowdIouLow);
        EXPECT_LE(v, kCrowdIouHigh);
        EXPECT_EQ(s.objects.labels[a], s.objects.labels[b]);
    }
}

TEST(Data, ColorsSeparateClasses) {
    const auto scenes = generate_dataset({300, 64, 3, 4, false, 2});
    EXPECT_GT(nearest_mean_color_accuracy(scenes, 3), 0.95);
}

TEST(Data, HflipMirrorsPixelsAndBoxes) {
    const SyntheticScene s = generate_scene({4, 32, 3, 3, false, 1}, 2);
    const SyntheticScene f = hflip(s);
    EXPECT_EQ(f.image[(1 * 32 + 5) * 32 + 0], s.image[(1 * 32 + 5) * 32 + 31]);
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
        EXPECT_DOUBLE_EQ(f.objects.boxes[i].cx, 1.0 - s.objects.boxes[i].cx);
        EXPECT_EQ(f.objects.boxes[i].w, s.objects.boxes[i].w);
    }
    const SyntheticScene back = hflip(f);
    EXPECT_TRUE(std::equal(back.image.data().begin(), back.image.data().end(), s.image.data().begin()));
}

TEST(Data, BatchStacksImages) {
    const auto scenes = generate_dataset({5, 16, 2, 2, false, 3});
    const auto batches = batch(scenes, 2);
    ASSERT_EQ(batches.size(), 3u);
    EXPECT_EQ(batches[2].images.shape(), (Shape{1, 3, 16, 16}));
    EXPECT_EQ(batches[1].indices, (std::vector<std::size_t>{2, 3}));
    EXPECT_EQ(batches[1].images[768], scenes[3].image[0]);
    EXPECT_THROW(make_batch(scenes, {}), ContractError);
}

TEST(Data, TensorBlobRoundTrip) {
    const Tensor t(Shape{2, 3}, {0.1, -2.5, 1e-300, 3.0, 4.0, -0.0});
    const std::string bytes = encode_tensor_blob(t);
    EXPECT_EQ(bytes.substr(0, 4), "SSDT");
    EXPECT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 4 + 6 * 8);
    const Tensor back = decode_tensor_blob(bytes);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(encode_tensor_blob(back), bytes);
}

TEST(Data, BlobErrors) {
    std::string bytes = encode_tensor_blob(Tensor(Shape{2}, {1.0, 2.0}));
    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_tensor_blob(bad), FormatError);
    EXPECT_THROW(decode_tensor_blob(bytes.substr(0, bytes.size() - 3)), IoError);
    std::string wrong_version = bytes;
    wrong_version[4] = 9;
    EXPECT_THROW(decode_tensor_blob(wrong_version), FormatError);
}

TEST(Data, AnnotationsRoundTripExactly) {
    GroundTruth gt{{2, 0}, {{0.1, 0.2, 0.3, 0.4}, {1.0 / 3.0, 0.5, 0.25, 0.125}}};
    const GroundTruth back = decode_annotations(encode_annotations(gt));
    EXPECT_EQ(back.labels, gt.labels);
    EXPECT_EQ(back.boxes, gt.boxes);
    EXPECT_THROW(decode_annotations("1 0.5 0.5 0.2\n"), FormatError);
    EXPECT_THROW(decode_annotations("x 0.5 0.5 0.2 0.2\n"), FormatError);
}

TEST(Data, DatasetDirectoryRoundTrip) {
    const auto dir = scratch("roundtrip");
    const Dataset ds = make_dataset({6, 16, 3, 3, true, 4});
    save_dataset(ds, dir);
    const Dataset back = load_dataset(dir);
    EXPECT_EQ(back.spec, ds.spec);
    ASSERT_EQ(back.scenes.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) {
        EXPECT_EQ(encode_tensor_blob(back.scenes[i].image), encode_tensor_blob(ds.scenes[i].image));
        EXPECT_EQ(back.scenes[i].objects.boxes, ds.scenes[i].objects.boxes);
        EXPECT_EQ(back.scenes[i].crowd_pairs, ds.scenes[i].crowd_pairs);
    }
    std::filesystem::remove_all(dir);
}

TEST(Data, CorruptedDatasetIsRejected) {
    const auto dir = scratch("corrupt");
    save_dataset(make_dataset({2, 16, 3, 2, false, 4}), dir);
    {
        std::fstream f(dir / "img_000001.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(0);
        f.put('Z');
    }
    EXPECT_THROW(load_dataset(dir), IoError);  // checksum catches it before decoding
    std::filesystem::remove(dir / "ann_000000.txt");
    EXPECT_THROW(load_dataset(dir), IoError);
    std::filesystem::remove_all(dir);
    EXPECT_THROW(load_dataset(dir), IoError);
}

TEST(Data, InvalidSpecs) {
    EXPECT_THROW(DatasetSpec({0, 64, 3, 4, false, 1}).validate(), ConfigError);
    EXPECT_THROW(DatasetSpec({4, 60, 3, 4, false, 1}).validate(), ConfigError);
    EXPECT_THROW(DatasetSpec({4, 64, 3, 1, true, 1}).validate(), ConfigError);
}
