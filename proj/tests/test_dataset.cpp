#include "damd/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace damd;

namespace {

const MorphableModel& model()
{
    static const MorphableModel m = generate_synthetic_model(6, 500);
    return m;
}

std::filesystem::path temp_dir(const std::string& name)
{
    const auto d = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
}

std::string line_with(const std::string& key, const std::string& value)
{
    auto j = to_json(entry_from_sample(synthesize_virtual_sample(model(), 1), "a.ppm"));
    j[key] = nlohmann::json::parse(value);
    return j.dump();
}

} // namespace

TEST(Dataset, RoundTripIsExact)
{
    std::vector<DatasetEntry> entries;
    for (std::uint64_t i = 0; i < 4; ++i)
        entries.push_back(entry_from_sample(synthesize_virtual_sample(model(), i), "img" + std::to_string(i) + ".ppm"));
    entries[1].params.reset();
    const auto back = parse_dataset(format_dataset(entries), "mem");
    ASSERT_EQ(back.size(), entries.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        EXPECT_EQ(back[i].image_path, entries[i].image_path);
        EXPECT_EQ(back[i].bbox, entries[i].bbox);
        EXPECT_EQ(back[i].landmarks, entries[i].landmarks);
        EXPECT_EQ(back[i].visibility, entries[i].visibility);
        EXPECT_EQ(back[i].yaw_deg, entries[i].yaw_deg);
        EXPECT_EQ(back[i].params, entries[i].params);
    }
    EXPECT_EQ(format_dataset(back), format_dataset(entries));
}

TEST(Dataset, BlankLinesSkippedAndErrorsCarryLineNumbers)
{
    const std::string good = line_with("yaw_deg", "12.5");
    EXPECT_EQ(parse_dataset(good + "\n\n   \n" + good + "\n", "mem").size(), 2u);

    const std::vector<std::pair<std::string, std::string>> bad{
        {"bbox", "[1,2,3]"},        {"bbox", "[1,2,-3,4]"},          {"landmarks", "[[1,2]]"},
        {"visibility", "[true]"},   {"yaw_deg", "\"x\""},            {"params", "[1,2,3]"},
        {"image_path", "\"\""},     {"landmarks", "[[1,2,3]]"},
    };
    for (const auto& [key, value] : bad) {
        try {
            parse_dataset(good + "\n" + line_with(key, value) + "\n", "data.jsonl");
            ADD_FAILURE() << key << " " << value;
        } catch (const DataError& e) {
            EXPECT_NE(std::string(e.what()).find("data.jsonl:2:"), std::string::npos) << e.what();
        }
    }
    try {
        parse_dataset("{not json", "d.jsonl");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("d.jsonl:1:"), std::string::npos);
    }
    EXPECT_THROW(parse_dataset("[1,2]", "d"), DataError);
}

TEST(Predictions, RoundTripAndSchema)
{
    std::vector<PredictionEntry> p{{"a.ppm", std::vector<double>(136, 1.25)}, {"b.ppm", std::vector<double>(136, -3.0)}};
    const auto back = parse_predictions(format_predictions(p), "mem");
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[1].image_path, "b.ppm");
    EXPECT_EQ(back[1].landmarks, p[1].landmarks);
    EXPECT_THROW(parse_predictions("{\"image_path\":\"a\",\"landmarks\":[]}", "p"), DataError);
}

TEST(Dataset, FilesAndImagePathsResolveRelativeToJsonl)
{
    const auto dir = temp_dir("damd_test_dataset");
    std::filesystem::create_directories(dir / "images");
    std::vector<DatasetEntry> entries;
    for (std::uint64_t i = 0; i < 3; ++i) {
        const auto s = synthesize_virtual_sample(model(), 10 + i);
        write_ppm(dir / "images" / ("f" + std::to_string(i) + ".ppm"), s.image);
        entries.push_back(entry_from_sample(s, "images/f" + std::to_string(i) + ".ppm"));
    }
    write_dataset(dir / "ann.jsonl", entries);
    EXPECT_EQ(resolve_image(dir / "ann.jsonl", "images/f0.ppm"), dir / "images/f0.ppm");
    EXPECT_EQ(resolve_image(dir / "ann.jsonl", "/abs/x.ppm"), std::filesystem::path("/abs/x.ppm"));

    const auto samples = load_training_samples(dir / "ann.jsonl");
    ASSERT_EQ(samples.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        const auto ref = synthesize_virtual_sample(model(), 10 + i);
        EXPECT_EQ(samples[i].params, ref.params);
        double worst = 0.0;
        for (std::size_t k = 0; k < ref.image.rgb.size(); ++k)
            worst = std::max(worst, static_cast<double>(std::abs(samples[i].image.rgb[k] - ref.image.rgb[k])));
        EXPECT_LT(worst, 1e-3);
        EXPECT_LT(label_inconsistency(samples[i], model()), 1e-6);
    }

    entries[2].params.reset();
    write_dataset(dir / "noparams.jsonl", entries);
    EXPECT_THROW(load_training_samples(dir / "noparams.jsonl"), DataError);
    EXPECT_THROW(read_dataset(dir / "missing.jsonl"), DataError);
    std::filesystem::remove_all(dir);
}

TEST(Dataset, MatchPredictionsByImagePath)
{
    std::vector<DatasetEntry> truth;
    for (std::uint64_t i = 0; i < 3; ++i)
        truth.push_back(entry_from_sample(synthesize_virtual_sample(model(), 20 + i), "x" + std::to_string(i)));
    std::vector<PredictionEntry> preds{{"x2", truth[2].landmarks}, {"x0", truth[0].landmarks}};
    const auto samples = match_predictions(truth, preds);
    ASSERT_EQ(samples.size(), 2u);
    EXPECT_EQ(samples[0].yaw_deg, truth[2].yaw_deg);
    EXPECT_DOUBLE_EQ(samples[0].normalizer, bbox_normalizer(truth[2].bbox.w, truth[2].bbox.h));
    EXPECT_EQ(nme(samples), 0.0);
    preds.push_back({"nope", truth[0].landmarks});
    EXPECT_THROW(match_predictions(truth, preds), DataError);
}
