#include <Eigen/Dense>

#include <cmath>
#include <cstdio>

#include "doctest.h"
#include "eyepurify/common.hpp"
#include "eyepurify/lossnet.hpp"
#include "eyepurify/model_format.hpp"
#include "eyepurify/tensor_ops.hpp"

using namespace eyepurify;

namespace {

const LossNet<float>& shared_net() {
    static const LossNet<float> net = LossNet<float>::seeded(7);
    return net;
}

template <typename T>
Tensor<T> random_image(long h, long w, SeededRng& rng) {
    auto t = Tensor<T>::zeros({3, h, w});
    for (auto& v : t.raw_data()) v = static_cast<T>(rng.uniform(0.0, 255.0));
    return t;
}

double feature_norm(const Tensor<float>& f) {
    double s = 0.0;
    for (float v : f.data()) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

}  // namespace

TEST_SUITE("lossnet") {

TEST_CASE("topology follows the published nineteen layer stack") {
    const auto& defs = LossNet<float>::layer_defs();
    REQUIRE(defs.size() == 16);
    CHECK(defs[0].name == std::string("conv1_1"));
    CHECK(defs[0].in_ch == 3);
    CHECK(defs[0].out_ch == 64);
    CHECK(defs[1].name == std::string("conv1_2"));
    CHECK(defs[4].name == std::string("conv3_1"));
    CHECK(defs[4].out_ch == 256);
    CHECK(defs[8].name == std::string("conv4_1"));
    CHECK(defs[8].out_ch == 512);
    CHECK(defs[15].name == std::string("conv5_4"));
    CHECK(defs[15].stride == 16);
    // One pool before each of blocks 2..5.
    int pools = 0;
    for (const auto& d : defs) pools += d.pool_before ? 1 : 0;
    CHECK(pools == 4);
    CHECK(LossNet<float>::has_layer("conv4_2"));
    CHECK(!LossNet<float>::has_layer("conv6_1"));
    CHECK_THROWS_AS(LossNet<float>::layer("fc6"), std::invalid_argument);
}

TEST_CASE("same seed gives bit-identical weights") {
    const auto a = LossNet<float>::seeded(99);
    const auto b = LossNet<float>::seeded(99);
    for (size_t i = 0; i < LossNet<float>::layer_defs().size(); ++i) {
        CHECK(a.weight(i).data() == b.weight(i).data());
        CHECK(a.bias(i).data() == b.bias(i).data());
    }
    const auto c = LossNet<float>::seeded(100);
    CHECK(a.weight(0).data() != c.weight(0).data());
}

TEST_CASE("seeded weights have orthogonal rows scaled by the gain") {
    // conv2_1: 128 rows, 576 columns; W W^T should be 2 I.
    const auto& w = shared_net().weight(2);
    REQUIRE(w.shape() == std::vector<long>{128, 64, 3, 3});
    Eigen::MatrixXd m(128, 576);
    for (long r = 0; r < 128; ++r) {
        for (long c = 0; c < 576; ++c) {
            m(r, c) = static_cast<double>(w.data()[static_cast<size_t>(r * 576 + c)]);
        }
    }
    Eigen::MatrixXd g = m * m.transpose();
    double max_err = 0.0;
    for (long r = 0; r < 128; ++r) {
        for (long c = 0; c < 128; ++c) {
            const double want = r == c ? 2.0 : 0.0;
            max_err = std::max(max_err, std::abs(g(r, c) - want));
        }
    }
    CHECK(max_err < 1e-4);
}

TEST_CASE("extraction shapes follow the pooling arithmetic") {
    SeededRng rng(3);
    const auto img = random_image<float>(64, 64, rng);
    auto fs = shared_net().extract(img, {"conv1_1", "conv2_2", "conv3_1", "conv5_3"});
    CHECK(fs.at("conv1_1").shape() == std::vector<long>{64, 64, 64});
    CHECK(fs.at("conv2_2").shape() == std::vector<long>{128, 32, 32});
    CHECK(fs.at("conv3_1").shape() == std::vector<long>{256, 16, 16});
    CHECK(fs.at("conv5_3").shape() == std::vector<long>{512, 4, 4});
    CHECK(fs.size() == 4);
}

TEST_CASE("layer strides feed the mask pyramid") {
    auto s = LossNet<float>::layer_strides({"conv1_1", "conv3_1", "conv5_1"});
    REQUIRE(s.size() == 3);
    CHECK(s[0].second == 1);
    CHECK(s[1].second == 4);
    CHECK(s[2].second == 16);
}

TEST_CASE("unknown layer is rejected before any compute") {
    const auto img = Tensor<float>::full({3, 8, 8}, 1.0f);
    CHECK_THROWS_AS(shared_net().extract(img, {"conv9_9"}), std::invalid_argument);
    CHECK_THROWS_AS(shared_net().extract(Tensor<float>::zeros({1, 8, 8}), {"conv1_1"}),
                    std::invalid_argument);
}

TEST_CASE("zero image gives zero features with zero biases") {
    const auto img = Tensor<float>::zeros({3, 16, 16});
    auto fs = shared_net().extract(img, {"conv1_1"});
    for (float v : fs.at("conv1_1").data()) CHECK(v == 0.0f);
}

TEST_CASE("distinct random images separate at every default loss layer") {
    SeededRng rng(11);
    const auto a = random_image<float>(32, 32, rng);
    const auto b = random_image<float>(32, 32, rng);
    const std::vector<std::string> layers = {"conv1_1", "conv2_1", "conv3_1", "conv3_2",
                                             "conv4_1", "conv4_2", "conv5_1", "conv5_3"};
    auto fa = shared_net().extract(a, layers);
    auto fb = shared_net().extract(b, layers);
    for (const auto& l : layers) {
        CHECK(std::abs(feature_norm(fa.at(l)) - feature_norm(fb.at(l))) > 0.0);
    }
}

TEST_CASE("model file round trips the weights") {
    const std::string path = "lossnet_rt.epnn";
    shared_net().save(path);
    const auto loaded = LossNet<float>::load(path);
    for (size_t i = 0; i < LossNet<float>::layer_defs().size(); ++i) {
        CHECK(loaded.weight(i).data() == shared_net().weight(i).data());
    }
    SeededRng rng(5);
    const auto img = random_image<float>(16, 16, rng);
    auto f0 = shared_net().extract(img, {"conv2_2"});
    auto f1 = loaded.extract(img, {"conv2_2"});
    CHECK(f0.at("conv2_2").data() == f1.at("conv2_2").data());
    std::remove(path.c_str());
}

TEST_CASE("input mean is subtracted when the file carries one") {
    const std::string path = "lossnet_mean.epnn";
    shared_net().save(path);
    ModelFile m = read_model(path);
    NamedTensor mean;
    mean.name = "input_mean";
    mean.shape = {3};
    mean.data = {10.0f, 20.0f, 30.0f};
    m.tensors.push_back(std::move(mean));
    write_model(m, path);

    const auto net = LossNet<float>::load(path);
    // Features of the zero image under the mean-subtracting net equal the
    // plain net's features of the constant image with value -mean.
    auto shifted = Tensor<float>::zeros({3, 8, 8});
    for (long c = 0; c < 3; ++c) {
        for (long i = 0; i < 64; ++i) {
            shifted.raw_data()[static_cast<size_t>(c * 64 + i)] =
                -static_cast<float>((c + 1) * 10);
        }
    }
    auto fa = net.extract(Tensor<float>::zeros({3, 8, 8}), {"conv1_2"});
    auto fb = shared_net().extract(shifted, {"conv1_2"});
    CHECK(fa.at("conv1_2").data() == fb.at("conv1_2").data());
    std::remove(path.c_str());
}

TEST_CASE("wrong layer count names the first mismatching layer") {
    const std::string path = "lossnet_short.epnn";
    shared_net().save(path);
    ModelFile m = read_model(path);
    m.tensors.resize(6);  // three layers only
    write_model(m, path);
    CHECK_THROWS_WITH_AS(LossNet<float>::load(path), doctest::Contains("conv1_1"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("shape mismatch names the offending layer") {
    const std::string path = "lossnet_shape.epnn";
    shared_net().save(path);
    ModelFile m = read_model(path);
    m.tensors[2].name = "conv9_9.weight";
    write_model(m, path);
    CHECK_THROWS_WITH_AS(LossNet<float>::load(path), doctest::Contains("conv1_2"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("corrupted model bytes fail the crc") {
    const std::string path = "lossnet_corrupt.epnn";
    shared_net().save(path);
    auto bytes = read_file_bytes(path);
    bytes[bytes.size() / 2] ^= 0x40;
    atomic_write_file(path, bytes.data(), bytes.size());
    CHECK_THROWS_WITH_AS(LossNet<float>::load(path), doctest::Contains("crc"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("double instantiation is deterministic too") {
    const auto a = LossNet<double>::seeded(4);
    const auto b = LossNet<double>::seeded(4);
    CHECK(a.weight(0).data() == b.weight(0).data());
    CHECK(a.weight(15).data() == b.weight(15).data());
}

}  // TEST_SUITE
