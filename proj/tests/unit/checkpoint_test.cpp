#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "ffkv/checkpoint.hpp"
#include "ffkv/error.hpp"
#include "ffkv/io.hpp"
#include "test_models.hpp"

namespace ffkv {
namespace {

namespace fs = std::filesystem;

class CheckpointTest : public ::testing::Test {
protected:
    void SetUp() override {
        dir_ = fs::temp_directory_path() / ("ffkv_ckpt_" + std::to_string(::getpid()) + "_" +
                                            ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::create_directories(dir_);
    }
    void TearDown() override { fs::remove_all(dir_); }

    // Rewrites the JSON header of `path` through `edit`.
    template <typename Fn>
    void edit_header(const fs::path& path, Fn edit) {
        std::string buf = read_file(path);
        std::uint64_t len = 0;
        std::memcpy(&len, buf.data() + 8, 8);
        auto header = nlohmann::json::parse(buf.substr(16, len));
        edit(header);
        const std::string text = header.dump();
        const std::uint64_t new_len = text.size();
        std::string out = buf.substr(0, 8);
        out.append(reinterpret_cast<const char*>(&new_len), 8);
        out += text;
        out += buf.substr(16 + len);
        write_file_atomic(path, out);
    }

    fs::path dir_;
};

TEST_F(CheckpointTest, RoundTripIsBitExact) {
    for (bool tied : {false, true}) {
        ModelConfig c = testing::tiny_config(2);
        c.tie_embeddings = tied;
        c.nonlinearity = tied ? Nonlinearity::softmax_memory : Nonlinearity::relu;
        const ModelWeights w = testing::random_weights(c, 61);
        const std::map<std::string, ExtraTensor> extras{{"adam.m.x", {{3}, {1.5f, -2.0f, 0.25f}}}};
        const auto path = dir_ / "model.ffkv";
        save_checkpoint(path, c, w, {{"note", "hello"}}, extras);
        const Checkpoint ck = load_checkpoint(path);
        EXPECT_EQ(ck.config, c);
        EXPECT_TRUE(ck.weights == w);
        EXPECT_EQ(ck.metadata.at("note"), "hello");
        EXPECT_EQ(ck.extras, extras);
        EXPECT_FALSE(fs::exists(dir_ / "model.ffkv.tmp"));
    }
}

TEST_F(CheckpointTest, HeaderLayout) {
    const ModelConfig c = testing::tiny_config(1);
    const auto path = dir_ / "m.ffkv";
    save_checkpoint(path, c, testing::random_weights(c, 62));
    const std::string buf = read_file(path);
    ASSERT_EQ(buf.substr(0, 4), "FFKV");
    std::uint32_t version = 0;
    std::memcpy(&version, buf.data() + 4, 4);
    EXPECT_EQ(version, 1u);
    std::uint64_t len = 0;
    std::memcpy(&len, buf.data() + 8, 8);
    const auto header = nlohmann::json::parse(buf.substr(16, len));
    EXPECT_EQ(header.at("config").at("d_ff"), 16);
    std::uint64_t expected_offset = 0;
    for (const auto& t : header.at("tensors")) {
        EXPECT_EQ(t.at("dtype"), "f32");
        EXPECT_EQ(t.at("offset").get<std::uint64_t>(), expected_offset);
        std::uint64_t n = 1;
        for (auto s : t.at("shape")) n *= s.get<std::uint64_t>();
        expected_offset += 4 * n;
    }
    EXPECT_EQ(buf.size(), 16 + len + expected_offset);
    EXPECT_EQ(header.at("tensors").front().at("name"), "token_embedding");
    EXPECT_EQ(header.at("tensors").back().at("name"), "output_embedding");
}

TEST_F(CheckpointTest, TruncatedFileNamesTensor) {
    const ModelConfig c = testing::tiny_config(1);
    const auto path = dir_ / "m.ffkv";
    save_checkpoint(path, c, testing::random_weights(c, 63));
    std::string buf = read_file(path);
    buf.resize(buf.size() - 10);
    write_file_atomic(path, buf);
    try {
        load_checkpoint(path);
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("'output_embedding'"), std::string::npos) << e.what();
    }
}

TEST_F(CheckpointTest, InconsistentDffIsRejected) {
    const ModelConfig c = testing::tiny_config(1);
    const auto path = dir_ / "m.ffkv";
    save_checkpoint(path, c, testing::random_weights(c, 64));
    edit_header(path, [](nlohmann::json& h) { h["config"]["d_ff"] = 32; });
    try {
        load_checkpoint(path);
        FAIL() << "expected CheckpointError";
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("layers.0.ff.keys"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("inconsistent"), std::string::npos) << e.what();
    }
}

TEST_F(CheckpointTest, MissingTensorIsNamed) {
    const ModelConfig c = testing::tiny_config(1);
    const auto path = dir_ / "m.ffkv";
    save_checkpoint(path, c, testing::random_weights(c, 65));
    edit_header(path, [](nlohmann::json& h) {
        auto& t = h["tensors"];
        for (auto it = t.begin(); it != t.end(); ++it) {
            if ((*it)["name"] == "final_ln.gain") {
                t.erase(it);
                break;
            }
        }
    });
    try {
        load_checkpoint(path);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("missing tensor 'final_ln.gain'"), std::string::npos) << e.what();
    }
}

TEST_F(CheckpointTest, BadMagicAndVersion) {
    const ModelConfig c = testing::tiny_config(1);
    const auto path = dir_ / "m.ffkv";
    save_checkpoint(path, c, testing::random_weights(c, 66));
    std::string buf = read_file(path);
    std::string bad = buf;
    bad[0] = 'X';
    write_file_atomic(path, bad);
    EXPECT_THROW(load_checkpoint(path), CheckpointError);
    bad = buf;
    bad[4] = 2;
    write_file_atomic(path, bad);
    try {
        load_checkpoint(path);
        FAIL();
    } catch (const CheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("unsupported version 2"), std::string::npos);
    }
    EXPECT_THROW(load_checkpoint(dir_ / "absent.ffkv"), CheckpointError);
}

}  // namespace
}  // namespace ffkv
