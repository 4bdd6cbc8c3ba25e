#include "damd/model_io.hpp"
#include "damd/weights_io.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

using namespace damd;

namespace {

const MorphableModel& model()
{
    static const MorphableModel m = generate_synthetic_model(9, 200);
    return m;
}

std::filesystem::path temp_path(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("damd_test_" + name);
}

} // namespace

TEST(ModelIo, RoundTripIsExact)
{
    const auto bytes = encode_model(model());
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DAMD3DMM");
    EXPECT_EQ(decode_model(bytes, "mem"), model());
    const auto path = temp_path("model.bin");
    write_model(path, model());
    EXPECT_EQ(read_model(path), model());
    EXPECT_EQ(io::read_file(path), bytes);
    std::filesystem::remove(path);
}

TEST(ModelIo, EncodingIsDeterministic) { EXPECT_EQ(encode_model(model()), encode_model(model())); }

TEST(ModelIo, HeaderIsLittleEndianLengthThenJson)
{
    const auto bytes = encode_model(model());
    std::uint64_t len = 0;
    for (int i = 7; i >= 0; --i)
        len = (len << 8) | static_cast<unsigned char>(bytes[8 + static_cast<std::size_t>(i)]);
    const auto header = nlohmann::json::parse(std::string(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len)));
    EXPECT_EQ(header.at("N").get<std::size_t>(), 200u);
    EXPECT_EQ(header.at("landmark_indices").size(), 68u);
    EXPECT_EQ(header.at("offsets").at("mean_shape").get<std::size_t>(), 0u);
}

TEST(ModelIo, CorruptFilesRejected)
{
    auto bytes = encode_model(model());
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_model(bad_magic, "mem"), DataError);
    auto truncated = bytes;
    truncated.resize(truncated.size() - 5);
    EXPECT_THROW(decode_model(truncated, "mem"), DataError);
    auto trailing = bytes;
    trailing.push_back('\0');
    EXPECT_THROW(decode_model(trailing, "mem"), DataError);
    EXPECT_THROW(decode_model(std::vector<char>(4, 'D'), "mem"), DataError);
    EXPECT_THROW(read_model(temp_path("does_not_exist.bin")), DataError);
}

TEST(ModelIo, InvalidModelNotWritten)
{
    auto m = model();
    m.landmark_indices.pop_back();
    EXPECT_THROW(encode_model(m), DataError);
}

TEST(WeightsIo, RoundTripAndValidation)
{
    const std::vector<WeightRecord> recs{{"conv1.weight", Shape{2, 1, 3, 3}, std::vector<float>(18, 0.5f)},
                                         {"head.fc.bias", Shape{3}, {1.0f, -2.0f, 3.5f}}};
    const auto bytes = encode_weights(recs);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "DAMDWTS1");
    const auto back = decode_weights(bytes, "mem");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].name, "head.fc.bias");
    EXPECT_EQ(back[0].shape, (Shape{2, 1, 3, 3}));
    EXPECT_EQ(back[1].values, recs[1].values);

    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(decode_weights(truncated, "mem"), DataError);
    EXPECT_THROW(encode_weights({{"x", Shape{2}, {1.0f}}}), DimensionError);
}
